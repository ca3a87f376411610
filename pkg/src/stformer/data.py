"""Synthetic slide-pyramid corpus with a planted multi-scale signal.

Each synthetic slide is a three-level image pyramid plus a spot table of
raw gene counts. Three latent fields drive level 0 (high-frequency cell
dots, mid-frequency texture, low-frequency regional intensity); levels 1
and 2 are exact average-pools of level 0 plus their own level-specific
latent field, so the higher levels carry signal that cannot be recovered
from level 0 alone. Per-gene count rates are log-linear in the latent
fields at the spot center, with Poisson sampling on top.

On-disk layout under the corpus root:

    manifest.json                   ids, splits, geometry, signal params
    <wsi>/level{0,1,2}.tns (+.json) pyramid images, float32 in [0, 1]
    <wsi>/spots.tsv                 spot_id, pixel_x, pixel_y (level 0)
    <wsi>/counts.tsv                header = gene ids, one row per spot
    <wsi>/latents.tns (+.json)      ground-truth fields, for oracle tests
    panel.json                      selected gene panel (written later)

Per-slide draw order (one child stream per slide): field noise for the
three level-0 fields, then the level-1 and level-2 fields, then spot
jitter, then Poisson counts. Gene weights come from the corpus-level
``genes`` stream before any slide is generated.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rng_mod

MANIFEST_VERSION = 1
N_FIELDS = 5  # cell, texture, region, level-1 extra, level-2 extra
FIELD_NAMES = ("cell", "texture", "region", "extra1", "extra2")

# fixed channel mixes turning the three level-0 fields into RGB planes
_CHANNEL_BASE = np.array([0.55, 0.50, 0.45])
_CHANNEL_MIX = np.array([
    [0.14, 0.10, 0.10],
    [0.10, 0.14, 0.08],
    [0.08, 0.10, 0.14],
])


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    """Knobs of the planted signal.

    ``level_scale`` controls how strongly the level-specific fields show
    up, both in the level-1/2 images and in the count rates; zero makes
    the pyramid an exact pool stack with no extra information upstairs.
    """

    cell_sigma: float = 1.5
    texture_sigma: float = 6.0
    region_sigma: float = 24.0
    extra1_sigma: float = 6.0
    extra2_sigma: float = 10.0
    level_scale: float = 1.0
    image_amp: float = 0.15
    rate_low: float = 30.0
    rate_high: float = 100.0
    dominant_low: float = 0.8
    dominant_high: float = 1.2
    off_weight_scale: float = 0.08


# ---------------------------------------------------------------------------
# raw tensor files

def write_tns(path, arr: np.ndarray) -> None:
    """Binary blob + JSON sidecar: little-endian float32, row-major."""
    path = Path(path)
    data = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(data.tobytes())
    sidecar = {
        "shape": list(arr.shape),
        "dtype": "f32",
        "layout": "row-major",
        "byte_order": "little",
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f)
        f.write("\n")


def read_tns(path) -> np.ndarray:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise CorpusError(f"missing tensor file or sidecar at {path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    shape = tuple(sidecar["shape"])
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    expect = int(np.prod(shape))
    if arr.size != expect:
        raise CorpusError(
            f"{path}: expected {expect} scalars for shape {shape}, found {arr.size}"
        )
    return arr.reshape(shape).copy()


# ---------------------------------------------------------------------------
# synthesis

def split_assignments(n_wsis: int, fractions=(0.6, 0.1, 0.3)) -> list[str]:
    """Per-slide split labels; floor for train/val, remainder to test."""
    n_train = int(n_wsis * fractions[0])
    n_val = int(n_wsis * fractions[1])
    labels = ["train"] * n_train + ["val"] * n_val
    labels += ["test"] * (n_wsis - len(labels))
    return labels


def draw_gene_model(seed: int, gene_universe: int, signal: SignalSpec):
    """Per-gene bias and field weights from the ``genes`` stream.

    Each gene picks one dominant latent field with a strong signed weight
    and gets small Gaussian weights on the rest. Draw order: bias,
    dominant index, dominant sign, dominant magnitude, off weights.
    """
    gen = rng_mod.stream(seed, "genes")
    bias = gen.uniform(math.log(signal.rate_low), math.log(signal.rate_high),
                       size=gene_universe)
    dominant = gen.integers(0, N_FIELDS, size=gene_universe)
    signs = gen.choice([-1.0, 1.0], size=gene_universe)
    magnitude = gen.uniform(signal.dominant_low, signal.dominant_high,
                            size=gene_universe)
    weights = gen.normal(0.0, signal.off_weight_scale,
                         size=(gene_universe, N_FIELDS))
    weights[np.arange(gene_universe), dominant] = signs * magnitude
    return bias, weights, dominant


def effective_gene_weights(weights: np.ndarray, signal: SignalSpec) -> np.ndarray:
    """Weights actually applied to rates: level-specific columns scaled."""
    eff = weights.copy()
    eff[:, 3:] *= signal.level_scale
    return eff


def _normalized_field(gen: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = gaussian_filter(gen.standard_normal(shape), sigma)
    field -= field.mean()
    std = field.std()
    if std > 0:
        field /= std
    return field


def pool2x(img: np.ndarray, factor: int) -> np.ndarray:
    """Exact average pool of a [3, h, w] image, computed in float64."""
    c, h, w = img.shape
    x = img.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor)
    return x.mean(axis=(2, 4))


def _spot_grid(height, width, margin, pitch, jitter, n_spots, gen):
    rows = (height - 2 * margin) // pitch + 1
    cols = (width - 2 * margin) // pitch + 1
    if rows * cols < n_spots:
        raise CorpusError(
            f"grid {rows}x{cols} holds {rows * cols} spots, need {n_spots}; "
            f"grow the extents or shrink the pitch"
        )
    offsets = gen.integers(-jitter, jitter + 1, size=(n_spots, 2)) if jitter > 0 \
        else np.zeros((n_spots, 2), dtype=np.int64)
    spots = []
    idx = 0
    for r in range(rows):
        for c in range(cols):
            if idx >= n_spots:
                break
            y = margin + r * pitch + int(offsets[idx, 0])
            x = margin + c * pitch + int(offsets[idx, 1])
            spots.append((f"s{idx:04d}", x, y))
            idx += 1
    return spots


def synth_corpus(root, seed: int, n_wsis: int = 10, spots_per_wsi: int = 200,
                 gene_universe: int = 400, signal: SignalSpec | None = None,
                 height: int | None = None, width: int | None = None,
                 margin: int = 112, pitch: int = 56, jitter: int | None = None,
                 split_fractions=(0.6, 0.1, 0.3)) -> dict:
    """Generate a corpus; returns the manifest dict after writing it."""
    if gene_universe < 300:
        raise CorpusError(f"gene_universe must be >= 300, got {gene_universe}")
    signal = signal or SignalSpec()
    jitter = pitch // 8 if jitter is None else jitter
    if jitter >= margin:
        raise CorpusError(f"jitter {jitter} must be smaller than margin {margin}")
    if height is None or width is None:
        side = math.ceil(math.sqrt(spots_per_wsi))
        extent = 2 * margin + (side - 1) * pitch
        extent += (-extent) % 4
        height = height or extent
        width = width or extent
    if height % 4 or width % 4:
        raise CorpusError(f"extents must be divisible by 4, got {height}x{width}")

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    bias, weights, _ = draw_gene_model(seed, gene_universe, signal)
    eff_weights = effective_gene_weights(weights, signal)
    gene_ids = [f"g{i:04d}" for i in range(gene_universe)]
    wsi_ids = [f"wsi{i:02d}" for i in range(n_wsis)]
    labels = split_assignments(n_wsis, split_fractions)

    spot_counts = {}
    for index, wsi in enumerate(wsi_ids):
        gen = rng_mod.child_stream(seed, "corpus", index)
        fields = np.empty((N_FIELDS, height, width), dtype=np.float64)
        fields[0] = _normalized_field(gen, (height, width), signal.cell_sigma)
        fields[1] = _normalized_field(gen, (height, width), signal.texture_sigma)
        fields[2] = _normalized_field(gen, (height, width), signal.region_sigma)
        extra1 = _normalized_field(gen, (height // 2, width // 2), signal.extra1_sigma)
        extra2 = _normalized_field(gen, (height // 4, width // 4), signal.extra2_sigma)
        fields[3] = np.repeat(np.repeat(extra1, 2, axis=0), 2, axis=1)
        fields[4] = np.repeat(np.repeat(extra2, 4, axis=0), 4, axis=1)

        level0 = _CHANNEL_BASE[:, None, None] + np.einsum(
            "cf,fhw->chw", _CHANNEL_MIX, fields[:3])
        level0 = np.clip(level0, 0.0, 1.0).astype(np.float32)
        bump = signal.level_scale * signal.image_amp
        level1 = np.clip(pool2x(level0, 2) + bump * extra1, 0.0, 1.0).astype(np.float32)
        level2 = np.clip(pool2x(level0, 4) + bump * extra2, 0.0, 1.0).astype(np.float32)

        spots = _spot_grid(height, width, margin, pitch, jitter, spots_per_wsi, gen)
        ys = np.array([y for _, _, y in spots])
        xs = np.array([x for _, x, _ in spots])
        field_vals = fields[:, ys, xs]                        # [5, S]
        log_rate = bias[None, :] + field_vals.T @ eff_weights.T
        counts = gen.poisson(np.exp(log_rate))                # [S, G]

        wdir = root / wsi
        wdir.mkdir(exist_ok=True)
        write_tns(wdir / "level0.tns", level0)
        write_tns(wdir / "level1.tns", level1)
        write_tns(wdir / "level2.tns", level2)
        write_tns(wdir / "latents.tns", fields.astype(np.float32))
        with open(wdir / "spots.tsv", "w", encoding="utf-8", newline="\n") as f:
            f.write("spot_id\tpixel_x\tpixel_y\n")
            for spot_id, x, y in spots:
                f.write(f"{spot_id}\t{x}\t{y}\n")
        with open(wdir / "counts.tsv", "w", encoding="utf-8", newline="\n") as f:
            f.write("spot_id\t" + "\t".join(gene_ids) + "\n")
            for (spot_id, _, _), row in zip(spots, counts):
                f.write(spot_id + "\t" + "\t".join(str(int(v)) for v in row) + "\n")
        spot_counts[wsi] = len(spots)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "wsi_ids": wsi_ids,
        "splits": {wsi: label for wsi, label in zip(wsi_ids, labels)},
        "split_fractions": list(split_fractions),
        "spots_per_wsi": spot_counts,
        "gene_universe": gene_universe,
        "geometry": {"height": height, "width": width, "margin": margin,
                     "pitch": pitch, "jitter": jitter},
        "signal": asdict(signal),
    }
    with open(root / "manifest.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# normalization and gene selection

def cpm_log_normalize(raw_counts: np.ndarray) -> np.ndarray:
    """log1p of counts rescaled to a library size of 1e6.

    Works on a single vector or row-wise on a matrix; any all-zero row is
    an error (exclude such spots upstream).
    """
    raw = np.asarray(raw_counts, dtype=np.float64)
    if raw.ndim == 1:
        total = raw.sum()
        if total <= 0:
            raise ValueError("cannot normalize an all-zero count vector")
        return np.log1p(1e6 * raw / total)
    totals = raw.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        bad = np.flatnonzero(totals[:, 0] <= 0)
        raise ValueError(f"all-zero count rows at indices {bad.tolist()}")
    return np.log1p(1e6 * raw / totals)


def gene_variances(expr: np.ndarray) -> np.ndarray:
    """Population variance of each gene column."""
    return expr.var(axis=0)


def top_variance_genes(expr: np.ndarray, gene_ids: list[str], n_top: int) -> list[str]:
    """Indices of the n_top highest-variance genes, ties broken by id order."""
    var = gene_variances(expr)
    order = np.lexsort((np.arange(len(gene_ids)), -var))
    return [gene_ids[i] for i in order[:n_top]]


def select_genes(corpus: "Corpus", n_top: int = 1000, n_final: int = 250,
                 seed: int = 0) -> dict:
    """Panel selection: per training slide take the top-variance genes,
    sample the final panel from their union. Returns the panel dict; use
    ``save_panel`` to persist it."""
    top_lists = []
    for wsi in corpus.ids_for_split("train"):
        gene_ids, _, counts = corpus.counts(wsi)
        keep = counts.sum(axis=1) > 0
        if not keep.all():
            warnings.warn(
                f"{wsi}: excluding {(~keep).sum()} all-zero spots from gene selection"
            )
        expr = cpm_log_normalize(counts[keep])
        top_lists.append(top_variance_genes(expr, gene_ids, n_top))
    union = sorted(set().union(*top_lists))
    if len(union) < n_final:
        raise CorpusError(
            f"union of per-slide top-{n_top} lists has {len(union)} genes, "
            f"need {n_final}"
        )
    gen = rng_mod.stream(seed, "select")
    chosen = gen.choice(len(union), size=n_final, replace=False)
    panel = [union[i] for i in chosen]
    import hashlib
    digest = hashlib.sha256(
        "\n".join(",".join(t) for t in top_lists).encode()
    ).hexdigest()
    return {
        "genes": panel,
        "seed": seed,
        "n_top": n_top,
        "n_final": n_final,
        "provenance": digest,
    }


def save_panel(panel: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(panel, f, indent=2)
        f.write("\n")


def load_panel(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no gene panel at {path}; run gene selection first")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# corpus access

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def extract_patches(pyramid: dict[int, np.ndarray], spot_xy: tuple,
                    crop_h: int, crop_w: int,
                    levels=(0, 1, 2)) -> dict[int, np.ndarray]:
    """Concentric crops: level i is (crop/2^i) pixels centered on the spot
    center divided by 2^i (rounded half up). Rows follow pixel_y."""
    x, y = spot_xy
    out = {}
    for lvl in levels:
        img = pyramid[lvl]
        h_l, w_l = crop_h // (2 ** lvl), crop_w // (2 ** lvl)
        cy = _round_half_up(y / (2 ** lvl))
        cx = _round_half_up(x / (2 ** lvl))
        r0, c0 = cy - h_l // 2, cx - w_l // 2
        r1, c1 = r0 + h_l, c0 + w_l
        if r0 < 0 or c0 < 0 or r1 > img.shape[1] or c1 > img.shape[2]:
            raise CorpusError(
                f"spot at ({x}, {y}) too close to the border for a "
                f"{crop_h}x{crop_w} crop at level {lvl}"
            )
        out[lvl] = img[:, r0:r1, c0:c1].copy()
    return out


class Corpus:
    """Read access to a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise CorpusError(f"no corpus manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        self._pyramids: dict[str, dict[int, np.ndarray]] = {}
        self._expr: dict[str, tuple] = {}

    @property
    def wsi_ids(self) -> list[str]:
        return list(self.manifest["wsi_ids"])

    @property
    def geometry(self) -> dict:
        return self.manifest["geometry"]

    def split_of(self, wsi: str) -> str:
        return self.manifest["splits"][wsi]

    def ids_for_split(self, split: str) -> list[str]:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return [w for w in self.wsi_ids if self.split_of(w) == split]

    def pyramid(self, wsi: str) -> dict[int, np.ndarray]:
        if wsi not in self._pyramids:
            wdir = self.root / wsi
            self._pyramids[wsi] = {
                lvl: read_tns(wdir / f"level{lvl}.tns") for lvl in (0, 1, 2)
            }
        return self._pyramids[wsi]

    def latents(self, wsi: str) -> np.ndarray:
        return read_tns(self.root / wsi / "latents.tns")

    def spots(self, wsi: str) -> list[tuple[str, int, int]]:
        rows = []
        with open(self.root / wsi / "spots.tsv", encoding="utf-8") as f:
            header = f.readline().rstrip("\n").split("\t")
            if header != ["spot_id", "pixel_x", "pixel_y"]:
                raise CorpusError(f"unexpected spots.tsv header in {wsi}: {header}")
            for line in f:
                spot_id, x, y = line.rstrip("\n").split("\t")
                rows.append((spot_id, int(x), int(y)))
        return rows

    def counts(self, wsi: str) -> tuple[list[str], list[str], np.ndarray]:
        """(gene_ids, spot_ids, integer count matrix [spots, genes])."""
        path = self.root / wsi / "counts.tsv"
        with open(path, encoding="utf-8") as f:
            header = f.readline().rstrip("\n").split("\t")
            gene_ids = header[1:]
            spot_ids = []
            rows = []
            for line in f:
                parts = line.rstrip("\n").split("\t")
                spot_ids.append(parts[0])
                rows.append(parts[1:])
        matrix = np.array(rows, dtype=np.int64)
        if np.any(matrix < 0):
            raise CorpusError(f"negative counts in {path}")
        return gene_ids, spot_ids, matrix

    def expressions(self, wsi: str, panel_genes: list[str]) -> tuple[list[str], np.ndarray]:
        """Normalized targets over the panel, per spot. All-zero spots are
        dropped with a warning. Cached per slide."""
        key = wsi
        if key not in self._expr:
            gene_ids, spot_ids, counts = self.counts(wsi)
            keep = counts.sum(axis=1) > 0
            if not keep.all():
                warnings.warn(f"{wsi}: dropping {(~keep).sum()} all-zero spots")
            expr = cpm_log_normalize(counts[keep])
            index = {g: i for i, g in enumerate(gene_ids)}
            self._expr[key] = (
                [s for s, ok in zip(spot_ids, keep) if ok],
                expr,
                index,
            )
        spot_ids, expr, index = self._expr[key]
        cols = [index[g] for g in panel_genes]
        return spot_ids, expr[:, cols].astype(np.float32)


@dataclass
class Batch:
    images: dict[int, np.ndarray]
    targets: np.ndarray
    spot_ids: list[tuple[str, str]]


def iterate_batches(corpus: Corpus, panel_genes: list[str], split: str,
                    batch_size: int, crop_h: int, crop_w: int,
                    levels=(0, 1, 2), shuffle_rng: np.random.Generator | None = None):
    """Stream batches of (per-level crops, panel targets) for one split.

    Order is slide-major then spot order; a shuffle generator permutes the
    flat spot list. The final short batch is emitted.
    """
    entries = []
    for wsi in corpus.ids_for_split(split):
        spot_ids, targets = corpus.expressions(wsi, panel_genes)
        pos = {s: (x, y) for s, x, y in corpus.spots(wsi)}
        for row, spot_id in enumerate(spot_ids):
            entries.append((wsi, spot_id, pos[spot_id], targets[row]))
    if not entries:
        raise CorpusError(f"split {split!r} has no spots")
    order = np.arange(len(entries))
    if shuffle_rng is not None:
        order = shuffle_rng.permutation(len(entries))
    for start in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        images = {lvl: [] for lvl in levels}
        targets = []
        ids = []
        for wsi, spot_id, xy, target in chunk:
            crops = extract_patches(corpus.pyramid(wsi), xy, crop_h, crop_w, levels)
            for lvl in levels:
                images[lvl].append(crops[lvl])
            targets.append(target)
            ids.append((wsi, spot_id))
        yield Batch(
            images={lvl: np.stack(images[lvl]) for lvl in levels},
            targets=np.stack(targets),
            spot_ids=ids,
        )
