"""Training objectives.

The mask objective combines class-penalized binary cross entropy and Dice;
a neighbor-consistency term penalizes probability jumps between 4-adjacent
pixels; the text objective is next-token cross entropy over the answer
region. All functions build autodiff graphs, so the same code path is used
for training and for finite-difference verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossConfig:
    lambda_bce: float = 2.0       # weight on the BCE term of the mask loss
    lambda_dice: float = 0.5      # weight on the Dice term of the mask loss
    w_penalty: float = 1.5        # per-pixel penalty on other-category false positives
    lambda_mask: float = 1.0
    lambda_txt: float = 1.0
    lambda_con: float = 1.0
    dice_smooth: float = 1e-6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _const_like(x, ref: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=ref.data.dtype)


def penalty_weight_map(gt: np.ndarray, current_category: int,
                       cfg: LossConfig, num_categories: int = 4) -> np.ndarray:
    """Per-pixel weights: cfg.w_penalty on foreground pixels of *other*
    categories, 1 elsewhere (background and the current category)."""
    gt = np.asarray(gt)
    if not 1 <= current_category <= num_categories:
        raise ValueError(f"current_category {current_category} outside 1..{num_categories}")
    other = (gt != 0) & (gt != current_category)
    return np.where(other, cfg.w_penalty, 1.0)


def bce_map(logits: Tensor, target: np.ndarray, wmap: np.ndarray) -> Tensor:
    """Elementwise weighted stable BCE: w * (t*softplus(-z) + (1-t)*softplus(z))."""
    t = _const_like(target, logits)
    w = _const_like(wmap, logits)
    pos = ad.mul(ad.softplus(ad.neg(logits)), Tensor(t))
    neg = ad.mul(ad.softplus(logits), Tensor(1.0 - t))
    return ad.mul(ad.add(pos, neg), Tensor(w))


def weighted_bce(logits, target, wmap) -> Tensor:
    """Mean over pixels of the weighted stable binary cross entropy."""
    z = _as_tensor(logits)
    if z.shape != np.asarray(target).shape:
        raise ValueError("logits and target shapes differ")
    return ad.tmean(bce_map(z, target, wmap))


def weighted_dice(probs, target, wmap, cfg: LossConfig) -> Tensor:
    """1 - (2*sum(w*p*t) + s) / (sum(w*p) + sum(w*t) + s)."""
    p = _as_tensor(probs)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ValueError("probs and target shapes differ")
    w = _const_like(wmap, p)
    wt = _const_like(w * t, p)
    inter = ad.tsum(ad.mul(p, Tensor(wt)))
    denom = ad.add(ad.tsum(ad.mul(p, Tensor(w))), Tensor(np.asarray(wt.sum(), dtype=p.data.dtype)))
    s = Tensor(np.asarray(cfg.dice_smooth, dtype=p.data.dtype))
    two = Tensor(np.asarray(2.0, dtype=p.data.dtype))
    return ad.add(Tensor(np.asarray(1.0, dtype=p.data.dtype)),
                  ad.neg(ad.div(ad.add(ad.mul(two, inter), s), ad.add(denom, s))))


def mask_loss(logit_maps, gts, wmaps, cfg: LossConfig) -> Tensor:
    """Mean over seg tokens of lambda_bce*BCE + lambda_dice*Dice.

    An empty token list is legal (a batch item with no grounded objects)
    and contributes 0.
    """
    if len(logit_maps) != len(gts) or len(gts) != len(wmaps):
        raise ValueError("logit_maps, gts and wmaps must have equal lengths")
    if len(logit_maps) == 0:
        return Tensor(0.0)
    terms = []
    for z, t, w in zip(logit_maps, gts, wmaps):
        zt = _as_tensor(z)
        bce = weighted_bce(zt, t, w)
        dice = weighted_dice(ad.sigmoid(zt), t, w, cfg)
        terms.append(ad.add(ad.mul(Tensor(np.asarray(cfg.lambda_bce, zt.data.dtype)), bce),
                            ad.mul(Tensor(np.asarray(cfg.lambda_dice, zt.data.dtype)), dice)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, Tensor(np.asarray(1.0 / len(terms), total.data.dtype)))


def directed_pair_count(h: int, w: int) -> int:
    """Number of directed in-bounds 4-neighbor pairs of an h x w grid."""
    return 2 * (h * (w - 1) + (h - 1) * w)


def consistency_loss(prob_maps) -> Tensor:
    """Mean absolute difference over all directed 4-neighbor pixel pairs,
    summed across maps. Degenerate grids with no pairs give 0."""
    if len(prob_maps) == 0:
        raise ValueError("prob_maps must be non-empty")
    maps = [_as_tensor(p) for p in prob_maps]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("all prob maps must share one shape")
    h, w = shape
    n_pairs = len(maps) * directed_pair_count(h, w)
    if n_pairs == 0:
        return Tensor(0.0)
    total = None
    for p in maps:
        parts = []
        if w > 1:
            parts.append(ad.tsum(ad.tabs(ad.add(p[:, 1:], ad.neg(p[:, :-1])))))
        if h > 1:
            parts.append(ad.tsum(ad.tabs(ad.add(p[1:, :], ad.neg(p[:-1, :])))))
        for part in parts:
            total = part if total is None else ad.add(total, part)
    # each undirected pair is counted once above but twice in the objective
    return ad.mul(total, Tensor(np.asarray(2.0 / n_pairs, total.data.dtype)))


def text_loss(logits, target_ids, loss_region) -> Tensor:
    """Mean next-token cross entropy over the answer region.

    `loss_region` holds the indices j of supervised target tokens; the
    prediction for target_ids[j] is read from logits row j-1.
    """
    z = _as_tensor(logits)
    ids = np.asarray(target_ids)
    region = np.asarray(list(loss_region), dtype=np.int64)
    if region.size == 0:
        raise ValueError("loss_region must be non-empty")
    if region.min() < 1 or region.max() >= z.shape[0]:
        raise ValueError("loss_region positions must lie in [1, len(logits))")
    rows = ad.take(z, region - 1)
    ce = ad.cross_entropy_rows(rows, ids[region])
    return ad.tmean(ce)


def total_loss(mask, txt, con, cfg: LossConfig) -> Tensor:
    """lambda_mask*L_mask + lambda_txt*L_txt + lambda_con*L_con."""
    m, t, c = _as_tensor(mask), _as_tensor(txt), _as_tensor(con)
    dt = m.data.dtype
    return ad.add(
        ad.add(ad.mul(Tensor(np.asarray(cfg.lambda_mask, dt)), m),
               ad.mul(Tensor(np.asarray(cfg.lambda_txt, dt)), t)),
        ad.mul(Tensor(np.asarray(cfg.lambda_con, dt)), c),
    )
