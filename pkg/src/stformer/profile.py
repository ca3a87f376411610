"""Closed-form parameter and multiply-accumulate accounting.

Both counts are pure functions of the config: ``param_count`` sums the
shared parameter plan (so it cannot drift from the builder), and
``mac_count`` tallies one forward pass in the one-MAC-per-reported-FLOP
convention: linear layers plus the two attention matrix products; norms
and activations are ignored.
"""

from __future__ import annotations

from .model import ModelConfig, parameter_shapes


def param_count(config: ModelConfig) -> int:
    total = 0
    for _, shape, _ in parameter_shapes(config):
        n = 1
        for extent in shape:
            n *= extent
        total += n
    return total


def mac_count(config: ModelConfig) -> int:
    L = config.seq_len
    t = config.tokens
    v = config.n_levels
    c = config.C
    vc = v * c

    total = 0
    for lvl in config.levels:
        d_in = config.patch_dim(lvl)
        hidden = config.embed_hidden(lvl)
        total += L * (d_in * hidden + hidden * c)

    per_encoder = 0
    if not config.disable_itmm:
        if config.encoder_mode == "decoupled":
            # per level: QKV + the two score products + output projection
            per_encoder += v * (t * c * 3 * c + 2 * t * t * c + t * c * c)
        else:
            per_encoder += t * vc * 3 * vc + 2 * t * t * vc + t * vc * vc
    if not config.disable_icmm:
        hidden = 4 * vc if config.encoder_mode == "coupled_full" else config.mixer_hidden
        per_encoder += 2 * t * vc * hidden
    total += config.N * per_encoder

    total += vc * config.k
    return total
