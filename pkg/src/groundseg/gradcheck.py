"""Finite-difference verification of the analytic gradients.

Fixtures are small enough to perturb every scalar parameter; everything is
evaluated in double precision. The pipeline fixture drives the full
image -> masks -> combined-objective graph through a miniature model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, train
from .autodiff import Tensor
from .config import ModelDims

MAX_FIXTURE_SCALARS = 2000

FIXTURE_NAMES = ("weighted_bce", "weighted_dice", "consistency_loss", "text_loss", "pipeline")


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_scalars: int
    nonfinite: bool = False

    def __str__(self):
        if self.nonfinite:
            return f"grad check FAILED: non-finite loss (param {self.worst_param})"
        return (f"max relative error {self.max_rel_error:.3e} "
                f"over {self.n_scalars} scalars (worst: {self.worst_param})")


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-4, mode: str = "central") -> GradCheckReport:
    """Compare backward() gradients of loss_fn against central differences.

    The relative error denominator is max(|g|, |g_fd|, 1e-8). A non-finite
    loss is reported, never skipped.
    """
    if mode != "central":
        raise ValueError("only central differences are implemented")
    n_scalars = sum(p.data.size for p in params.values())
    if n_scalars > MAX_FIXTURE_SCALARS:
        raise ValueError(f"fixture has {n_scalars} scalars, limit is {MAX_FIXTURE_SCALARS}")

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        return GradCheckReport(np.inf, "<loss>", n_scalars, nonfinite=True)
    loss.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for k, p in params.items()}

    worst = 0.0
    worst_param = "<none>"
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return GradCheckReport(np.inf, f"{name}[{i}]", n_scalars, nonfinite=True)
            fd = (up - down) / (2.0 * step)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
                worst_param = f"{name}[{i}]"
    return GradCheckReport(worst, worst_param, n_scalars)


# ---------------------------------------------------------------------------
# named fixtures

def _t64(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _bce_fixture():
    logits = _t64([[1.0, -1.0], [0.0, 2.0]])
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    wmap = np.array([[1.0, 1.5], [1.0, 1.0]])
    params = {"logits": logits}
    return (lambda: losses.weighted_bce(logits, target, wmap)), params


def _dice_fixture():
    rng = np.random.default_rng(3)
    probs = _t64(rng.uniform(0.2, 0.8, size=(3, 3)))
    target = (rng.random((3, 3)) > 0.5).astype(np.float64)
    wmap = np.where(rng.random((3, 3)) > 0.5, 1.5, 1.0)
    cfg = losses.LossConfig()
    params = {"probs": probs}
    return (lambda: losses.weighted_dice(probs, target, wmap, cfg)), params


def _consistency_fixture():
    rng = np.random.default_rng(5)
    probs = _t64(rng.uniform(0.05, 0.95, size=(3, 3)))
    params = {"probs": probs}
    return (lambda: losses.consistency_loss([probs])), params


def _text_fixture():
    rng = np.random.default_rng(7)
    logits = _t64(rng.normal(size=(4, 7)))
    ids = np.array([2, 5, 0, 3])
    region = [1, 2, 3]
    params = {"logits": logits}
    return (lambda: losses.text_loss(logits, ids, region)), params


def pipeline_dims() -> ModelDims:
    return ModelDims(canvas=16, channels=4, local_channels=3, enc_channels=(2, 3),
                     dec_channels=(3, 3, 2, 2), embed_dim=8, proj_dim=2, heads=2,
                     blocks=1, mlp_factor=2, context=24, vocab_size=12)


def _pipeline_fixture():
    dims = pipeline_dims()
    rng = np.random.default_rng(11)
    params = train.init_params(dims, vocab_size=8, seed=13, dtype=np.float64)

    image = rng.uniform(0.0, 1.0, size=(1, 3, 16, 16)).astype(np.float32)
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[2:7, 3:9] = 1
    gt[10:14, 8:13] = 2
    # ids: bos, q, q, SEG-bearing answer, eos; seg id is 4
    text = np.array([[1, 6, 7, 4, 6, 2]], dtype=np.int64)
    cfg = losses.LossConfig()
    batch = train.Batch(
        images=image,
        text_ids=text,
        loss_positions=[[3, 4, 5]],
        seg_flat=[(0, 3)],
        token_item=np.array([0]),
        mask_targets=(gt == 1).astype(np.float32)[None],
        weight_maps=losses.penalty_weight_map(gt, 1, cfg).astype(np.float32)[None],
        token_weight=np.array([1.0], dtype=np.float32),
        sample_ids=["fixture/0"],
    )
    return (lambda: train.batch_loss(params, dims, cfg, batch)[0]), params


_FIXTURES = {
    "weighted_bce": _bce_fixture,
    "weighted_dice": _dice_fixture,
    "consistency_loss": _consistency_fixture,
    "text_loss": _text_fixture,
    "pipeline": _pipeline_fixture,
}


def build_fixture(name: str):
    """Returns (loss_fn, params) for a named fixture."""
    if name not in _FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")
    return _FIXTURES[name]()


def fixture_tolerance(name: str) -> float:
    return 1e-2 if name == "pipeline" else 1e-3


def run_fixture(name: str, step: float = 1e-4) -> GradCheckReport:
    loss_fn, params = build_fixture(name)
    return grad_check(loss_fn, params, step=step)
