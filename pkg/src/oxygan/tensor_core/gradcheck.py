"""Central finite-difference checks of analytic gradients in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from oxygan.tensor_core import ops
from oxygan.tensor_core.tensor import GradTape, Tensor

# elementwise relative errors are taken against max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], *, eps: float = 1e-4,
                    seed: int = 0, name: str = "fn", tolerance: float = 1e-3) -> GradCheckResult:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` against central differences.

    ``R`` is a fixed random projection so every output element contributes.
    ``fn`` must be deterministic across calls (reseed any rng inside it).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays]).data
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(vals) -> float:
        return float(np.sum(fn(*[Tensor(v) for v in vals]).data * proj))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = ops.sum_all(ops.mul(fn(*leaves), Tensor(proj)))
    analytic = tape.backward(loss, leaves)

    worst, count = 0.0, 0
    for idx, arr in enumerate(arrays):
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus = scalar(arrays)
            flat[j] = orig - eps
            minus = scalar(arrays)
            flat[j] = orig
            nflat[j] = (plus - minus) / (2 * eps)
        a = analytic[idx]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), FLOOR)
        rel = np.abs(a - numeric) / denom
        worst = max(worst, float(rel.max()))
        count += arr.size
    return GradCheckResult(name, worst, count, tolerance)


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # keeps kinked ops (relu, abs) off their kink by more than eps
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin + a, a)


def op_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    """(name, fn, inputs) for every differentiable op; each input has <= 64 elements."""
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.standard_normal(shape)  # noqa: E731

    def dropout_fn(x):
        return ops.dropout(x, 0.5, np.random.default_rng(7), active=True)

    def bn_train(x, g, b):
        return ops.batch_norm2d(x, g, b, None, training=True)

    eval_stats = ops.RunningStats(rng.standard_normal(2) * 0.1, rng.uniform(0.5, 1.5, 2))

    def bn_eval(x, g, b):
        return ops.batch_norm2d(x, g, b, eval_stats, training=False)

    return [
        ("add", ops.add, [r(2, 3), r(2, 3)]),
        ("add_broadcast", ops.add, [r(2, 3, 2), r(3, 1)]),
        ("sub", ops.sub, [r(2, 3), r(2, 3)]),
        ("mul", ops.mul, [r(2, 3), r(2, 3)]),
        ("neg", ops.neg, [r(2, 3)]),
        ("abs", ops.abs_, [_away_from_zero(r(2, 3))]),
        ("sum", ops.sum_all, [r(3, 4)]),
        ("mean", ops.mean_all, [r(3, 4)]),
        ("relu", ops.relu, [_away_from_zero(r(2, 3, 2))]),
        ("leaky_relu", lambda x: ops.leaky_relu(x, 0.2), [_away_from_zero(r(2, 3, 2))]),
        ("tanh", ops.tanh_act, [r(2, 3, 2)]),
        ("sigmoid", ops.sigmoid, [r(2, 3, 2)]),
        ("softplus", ops.softplus, [r(2, 3, 2) * 3]),
        ("dropout", dropout_fn, [r(2, 3, 2)]),
        ("concat_channels", ops.concat_channels, [r(1, 2, 2, 2), r(1, 1, 2, 2)]),
        ("slice_channels", lambda x: ops.slice_channels(x, 1, 3), [r(1, 3, 2, 2)]),
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
         [r(1, 2, 4, 4), r(3, 2, 2, 2), r(3)]),
        ("conv2d_stride2", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
         [r(2, 2, 4, 4), r(2, 2, 4, 4) * 0.5, r(2)]),
        ("conv_transpose2d", lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2, padding=1),
         [r(1, 3, 2, 2), r(3, 2, 4, 4), r(2)]),
        ("conv_transpose2d_stride1", lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=1, padding=0),
         [r(1, 2, 3, 3), r(2, 2, 2, 2), r(2)]),
        ("batch_norm2d_train", bn_train, [r(2, 2, 3, 3), r(2), r(2)]),
        ("batch_norm2d_eval", bn_eval, [r(2, 2, 3, 3), r(2), r(2)]),
        ("instance_norm2d", ops.instance_norm2d, [r(2, 2, 3, 3), r(2), r(2)]),
    ]


def run_suite(seed: int = 0, eps: float = 1e-4, tolerance: float = 1e-3) -> list[GradCheckResult]:
    return [check_gradients(fn, inputs, eps=eps, seed=seed, name=name, tolerance=tolerance)
            for name, fn, inputs in op_cases(seed)]
