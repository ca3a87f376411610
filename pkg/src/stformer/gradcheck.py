"""Finite-difference verification of the analytic gradients.

Central differences at float64: rel_err = |analytic - numeric| /
max(|analytic|, |numeric|), skipping entries where both magnitudes are
below ``tiny`` (1e-8). The full-model check perturbs every parameter
scalar of a small config and compares against one backward pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig
from .rng import RngHub
from .train import mse_loss

DEFAULT_CHECK_CONFIG = ModelConfig(
    N=2, n_head=2, C=16, p=16, H=32, W=32, k=5,
    m=0.0, dropout_rate=0.0,
)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    tiny: float = 1e-8) -> np.ndarray:
    """Elementwise relative error, zero where both entries are negligible."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.zeros_like(denom)
    mask = denom >= tiny
    err[mask] = np.abs(a - n)[mask] / denom[mask]
    return err


def numeric_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` w.r.t. ``arr``,
    perturbing the array in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_op(build, leaves: list[T.Tensor], h: float = 1e-5) -> float:
    """Max relative error of one op graph. ``build()`` must construct the
    scalar output from ``leaves`` (float64, requires_grad)."""
    out = build()
    for leaf in leaves:
        leaf.grad = None
    out.backward()
    worst = 0.0
    for leaf in leaves:
        numeric = numeric_gradient(lambda: build().item(), leaf.data, h)
        err = relative_errors(leaf.grad_or_zeros(), numeric)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def model_gradcheck(config: ModelConfig | None = None, seed: int = 0,
                    h: float = 1e-5, batch: int = 2) -> dict:
    """Full-model check at float64. Returns per-parameter worst errors and
    the overall max."""
    config = config or DEFAULT_CHECK_CONFIG
    hub = RngHub(seed)
    model = Model(config, init_rng=hub.get("init"), dtype=np.float64)
    data_rng = np.random.default_rng(seed + 1)
    images = {
        lvl: data_rng.random((batch,) + config.image_extents(lvl))
        for lvl in config.levels
    }
    target = data_rng.standard_normal((batch, config.k))

    def loss_value() -> float:
        return mse_loss(model.forward(images, training=False), target).item()

    loss = mse_loss(model.forward(images, training=False), target)
    model.zero_grad()
    loss.backward()
    analytic = {name: p.grad_or_zeros().copy() for name, p in model.params.items()}

    per_param = {}
    worst = 0.0
    for name, p in model.params.items():
        numeric = numeric_gradient(loss_value, p.data, h)
        err = relative_errors(analytic[name], numeric)
        param_worst = float(err.max()) if err.size else 0.0
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return {
        "max_rel_err": worst,
        "per_param": per_param,
        "n_params": sum(p.size for p in model.params.values()),
    }
