"""Central finite-difference checks of every analytic backward pass (float64).

The error of one entry is ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``;
``atol`` only matters for entries whose true gradient is at the noise floor
of the difference quotient (e.g. conv biases feeding batch norm, whose
gradient is exactly zero).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .losses import LossConfig, compute_beta, network_loss_and_grads
from .network import TDCEDN
from .tensor import concat_channels, split_channels

LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
SPOT_CHECKS = 20


def rel_error(analytic, numeric, atol: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place and restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx) if index is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * step)
    return out if index is not None else out.reshape(arr.shape)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _layer_checks(rng: np.random.Generator) -> dict[str, float]:
    shape = (1, 2, 4, 4)
    errs = {}

    # conv 3x3
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal((1, 3, 4, 4))
    f = lambda: float((L.conv2d_forward(x, w, b) * up).sum())
    gx, gw, gb = L.conv2d_backward(x, w, up)
    errs["conv2d"] = max(
        rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)), rel_error(gb, numeric_grad(f, b))
    )

    # conv 1x1 (prediction heads)
    w1 = rng.standard_normal((1, 2, 1, 1))
    b1 = rng.standard_normal(1)
    up1 = rng.standard_normal((1, 1, 4, 4))
    f = lambda: float((L.conv2d_forward(x, w1, b1) * up1).sum())
    gx, gw, gb = L.conv2d_backward(x, w1, up1)
    errs["conv2d_1x1"] = max(
        rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w1)), rel_error(gb, numeric_grad(f, b1))
    )

    # batch norm, training statistics
    x = rng.standard_normal(shape) * 2 + 0.5
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)
    up = rng.standard_normal(shape)

    def bn_loss():
        out, _ = L.batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)
        return float((out * up).sum())

    _, cache = L.batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)
    gx, gg, gbt = L.batchnorm_backward(up, cache)
    errs["batchnorm"] = max(
        rel_error(gx, numeric_grad(bn_loss, x)),
        rel_error(gg, numeric_grad(bn_loss, gamma)),
        rel_error(gbt, numeric_grad(bn_loss, beta)),
    )

    # relu away from the kink
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    up = rng.standard_normal(shape)
    f = lambda: float((L.relu(x) * up).sum())
    errs["relu"] = rel_error(L.relu_backward(x, up), numeric_grad(f, x))

    # max pool on distinct values
    x = rng.permutation(np.arange(16.0)).reshape(shape[2:])[None, None].repeat(2, axis=1) * 0.1
    x = x + rng.uniform(0, 0.01, x.shape)
    up = rng.standard_normal((1, 2, 2, 2))
    f = lambda: float((L.maxpool2x2(x)[0] * up).sum())
    _, idx = L.maxpool2x2(x)
    errs["maxpool2x2"] = rel_error(L.maxpool2x2_backward(up, idx, x.shape), numeric_grad(f, x))

    # fixed bilinear upsample to an odd size
    x = rng.standard_normal(shape)
    up = rng.standard_normal((1, 2, 7, 9))
    f = lambda: float((L.bilinear_upsample(x, (7, 9)) * up).sum())
    errs["bilinear_upsample"] = rel_error(L.bilinear_backward(up, (4, 4)), numeric_grad(f, x))

    # sigmoid
    x = rng.standard_normal(shape) * 3
    up = rng.standard_normal(shape)
    f = lambda: float((L.sigmoid(x) * up).sum())
    errs["sigmoid"] = rel_error(L.sigmoid_backward(L.sigmoid(x), up), numeric_grad(f, x))

    # dropout with a frozen mask
    mask = L.dropout_mask(shape, 0.5, 7, 1, 3, np.float64)
    x = rng.standard_normal(shape)
    f = lambda: float((x * mask * up).sum())
    errs["dropout"] = rel_error(up * mask, numeric_grad(f, x))

    # channel concat
    a = rng.standard_normal((1, 2, 2, 2))
    c = rng.standard_normal((1, 3, 2, 2))
    up = rng.standard_normal((1, 5, 2, 2))
    f = lambda: float((concat_channels(a, c) * up).sum())
    ga, gc = split_channels(up, 2)
    errs["concat_channels"] = max(rel_error(ga, numeric_grad(f, a)), rel_error(gc, numeric_grad(f, c)))
    return errs


def check_layers(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(k, v, LAYER_TOL) for k, v in _layer_checks(rng).items()]


def _graph_loss(graph: TDCEDN, x, target, cfg) -> float:
    out = graph.forward(x)
    return network_loss_and_grads(out, target, cfg)[0]


def check_network(
    seed: int = 0,
    widths=(16, 16, 16, 16, 16),
    size: int = 32,
    spot: int = SPOT_CHECKS,
    step: float = 1e-6,
) -> list[CheckResult]:
    """Spot-check the total training loss gradient of every layer's parameters.

    Runs a float64 graph in training mode (dropout masks frozen by fixing
    the iteration) on a random ``(1, 3, size, size)`` input against a random
    sparse contour map.
    """
    rng = np.random.default_rng(seed)
    graph = TDCEDN(widths, seed=seed, precision="f64").train()
    graph.set_iteration(0)
    x = rng.uniform(0, 1, (1, 3, size, size))
    gt = (rng.uniform(size=(1, 1, size, size)) < 0.1).astype(np.uint8)
    target = compute_beta(gt)
    cfg = LossConfig()

    out = graph.forward(x)
    loss, _, _, g_pred, g_sides = network_loss_and_grads(out, target, cfg)
    graph.backward(g_pred, g_sides)
    analytic = {k: t.grad.copy() for k, t in graph.params.items()}
    atol = 1e-6 * max(1.0, abs(loss))

    groups: dict[str, list[str]] = {}
    for name in graph.params:
        groups.setdefault(name.rsplit(".", 1)[0], []).append(name)

    results = []
    for layer, names in groups.items():
        sizes = [graph.params[n].data.size for n in names]
        total = sum(sizes)
        picks = rng.choice(total, size=min(spot, total), replace=False)
        err = 0.0
        for flat in sorted(picks):
            for n, sz in zip(names, sizes):
                if flat < sz:
                    break
                flat -= sz
            arr = graph.params[n].data
            num = numeric_grad(lambda: _graph_loss(graph, x, target, cfg), arr, step, index=[int(flat)])
            err = max(err, rel_error(analytic[n].reshape(-1)[flat], num[0], atol))
        results.append(CheckResult(layer, err, NETWORK_TOL))
    return results


def run_suite(seed: int = 0, network: bool = True) -> list[CheckResult]:
    results = check_layers(seed)
    if network:
        results += check_network(seed)
    return results
