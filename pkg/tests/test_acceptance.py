"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with `pytest -s tests/test_acceptance.py` to see the lines as they
complete. The three 2000-step training arms are session fixtures, so the
expensive work happens once.
"""

import math
import time

import numpy as np
import pytest

from groundseg import data, gradcheck, train
from groundseg.config import RunConfig
from groundseg.losses import (LossConfig, consistency_loss, mask_loss, text_loss, total_loss,
                              weighted_bce, weighted_dice)
from groundseg.metrics import (EvalPair, bleu4, ciou_dataset, fragment_count, giou_dataset,
                               iou, token_f1, word_tokens)

from oracles import (bce_scalar, bleu4_scalar, ciou_scalar, consistency_scalar,
                     cross_entropy_scalar, dice_scalar, flood_fill_count, giou_scalar,
                     iou_scalar, sigmoid_scalar, token_f1_scalar)

DATA_SEED = 42
RUN_SEED = 0
OVERFIT_STEPS = 2000


def report(num: int, name: str, ok: bool, detail: str):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {num}: {name} ({detail})")
    assert ok, f"criterion {num} failed: {name} ({detail})"


@pytest.fixture(scope="session")
def overfit_dataset():
    records = data.make_dataset(num_slides=4, patches_per_slide=8, seed=DATA_SEED)
    assert len(records) == 32
    return data.DatasetSplits(train=records, val=[], test=[])


def _arm(dataset, **loss_kw):
    cfg = RunConfig(steps=OVERFIT_STEPS, seed=RUN_SEED, loss=LossConfig(**loss_kw))
    t0 = time.monotonic()
    bundle, log = train.train(cfg, dataset=dataset)
    return bundle, log, time.monotonic() - t0


@pytest.fixture(scope="session")
def default_run(overfit_dataset):
    return _arm(overfit_dataset)


@pytest.fixture(scope="session")
def no_penalty_run(overfit_dataset):
    return _arm(overfit_dataset, w_penalty=1.0)


@pytest.fixture(scope="session")
def no_consistency_run(overfit_dataset):
    return _arm(overfit_dataset, lambda_con=0.0)


# ---------------------------------------------------------------------------
# 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.monotonic()
    details = []
    ok = True
    for name in gradcheck.FIXTURE_NAMES:
        rep = gradcheck.run_fixture(name)
        tol = gradcheck.fixture_tolerance(name)
        good = (not rep.nonfinite) and rep.max_rel_error < tol
        ok &= good
        details.append(f"{name} {rep.max_rel_error:.2e}<{tol:g}")
    elapsed = time.monotonic() - t0
    ok &= elapsed < 300.0
    report(1, "gradient suite", ok, "; ".join(details) + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. loss oracles (every derived loss example, within 1e-6 absolute)

def test_criterion_2_loss_oracles():
    cfg = LossConfig()
    checks = []

    z = np.array([[1.0, -1.0], [0.0, 2.0]])
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = np.array([[1.0, 1.5], [1.0, 1.0]])
    checks.append(abs(float(weighted_bce(z, t, w).data)
                      - bce_scalar(z.tolist(), t.tolist(), w.tolist())))

    p = np.array([[1.0, 1.0], [0.0, 0.0]])
    td = np.array([[1.0, 0.0], [0.0, 0.0]])
    checks.append(abs(float(weighted_dice(p, td, np.ones_like(p), cfg).data)
                      - dice_scalar(p.tolist(), td.tolist(),
                                    np.ones_like(p).tolist(), cfg.dice_smooth)))

    rng = np.random.default_rng(2)
    zs = [rng.normal(size=(3, 3)) for _ in range(2)]
    ts = [(rng.random((3, 3)) > 0.5).astype(float) for _ in range(2)]
    ws = [np.where(rng.random((3, 3)) > 0.5, 1.5, 1.0) for _ in range(2)]
    per_token = []
    for zz, tt, ww in zip(zs, ts, ws):
        probs = [[sigmoid_scalar(v) for v in row] for row in zz.tolist()]
        per_token.append(cfg.lambda_bce * bce_scalar(zz.tolist(), tt.tolist(), ww.tolist())
                         + cfg.lambda_dice * dice_scalar(probs, tt.tolist(), ww.tolist(),
                                                         cfg.dice_smooth))
    checks.append(abs(float(mask_loss(zs, ts, ws, cfg).data) - sum(per_token) / 2))

    checks.append(abs(float(consistency_loss([np.array([[1.0, 0.0]])]).data) - 1.0))
    board = np.array([[1.0, 0.0], [0.0, 1.0]])
    checks.append(abs(float(consistency_loss([board]).data)
                      - consistency_scalar([board.tolist()])))

    logits = rng.normal(size=(4, 7))
    ids = np.array([2, 5, 0, 3])
    checks.append(abs(float(text_loss(logits, ids, [1, 2, 3]).data)
                      - cross_entropy_scalar(logits.tolist(), ids.tolist(), [1, 2, 3])))

    weighted = LossConfig(lambda_mask=2.0, lambda_txt=1.0, lambda_con=0.5)
    checks.append(abs(float(total_loss(0.4, 0.6, 0.2, weighted).data) - 1.5))

    worst = max(checks)
    report(2, "loss oracles", worst < 1e-6, f"max abs err {worst:.2e} over {len(checks)} fixtures")


# ---------------------------------------------------------------------------
# 3. metric oracles on >= 100 randomized fixtures each

def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(7)
    words = ["the", "nuclei", "cells", "are", "at", "<seg>", ".", "a", "b"]
    worst = 0.0
    n = 0
    for _ in range(100):
        h, w = rng.integers(1, 7, size=2)
        a = rng.random((h, w)) > rng.uniform(0.3, 0.8)
        b = rng.random((h, w)) > rng.uniform(0.3, 0.8)
        worst = max(worst, abs(iou(a, b) - iou_scalar(a.tolist(), b.tolist())))
        pairs = [EvalPair(pred=rng.random((4, 4)) > 0.5, gt=rng.random((4, 4)) > 0.5)
                 for _ in range(int(rng.integers(1, 5)))]
        raw = [(p.pred.tolist(), p.gt.tolist()) for p in pairs]
        worst = max(worst, abs(giou_dataset(pairs) - giou_scalar(raw)))
        worst = max(worst, abs(ciou_dataset(pairs) - ciou_scalar(raw)))
        cand = " ".join(rng.choice(words, size=rng.integers(0, 10)))
        ref = " ".join(rng.choice(words, size=rng.integers(1, 10)))
        worst = max(worst, abs(bleu4(cand, ref)
                               - bleu4_scalar(word_tokens(cand), word_tokens(ref))))
        worst = max(worst, abs(token_f1(cand, ref)
                               - token_f1_scalar(word_tokens(cand), word_tokens(ref))))
        mask = rng.random((8, 8)) > 0.6
        worst = max(worst, abs(fragment_count(mask) - flood_fill_count(mask.tolist())))
        n += 6
    empty = np.zeros((3, 3), dtype=bool)
    convention_ok = iou(empty, empty) == 1.0
    report(3, "metric oracles", worst < 1e-9 and convention_ok,
           f"max abs err {worst:.2e} over {n} fixtures; both-empty IoU=1 {convention_ok}")


# ---------------------------------------------------------------------------
# 4. overfit run

def test_criterion_4_overfit(overfit_dataset, default_run):
    bundle, log, elapsed = default_run
    referring = train.evaluate(bundle, overfit_dataset.train, "referring")
    conversation = train.evaluate(bundle, overfit_dataset.train, "conversation")
    exact, total = train.seg_emission_accuracy(bundle, overfit_dataset.train, "referring")
    first, last = log.steps[0]["total"], log.steps[-1]["total"]
    ok = (referring.giou is not None and referring.giou >= 0.85
          and conversation.bleu4 >= 0.9
          and exact / total >= 0.9
          and last < 0.1 * first
          and elapsed < 1800.0)
    report(4, "overfit run",
           ok,
           f"referring gIoU {referring.giou:.3f}>=0.85; conversation BLEU-4 "
           f"{conversation.bleu4:.3f}>=0.9; exact seg counts {exact}/{total}>=90%; "
           f"loss {first:.3f}->{last:.3f} (<10%); {elapsed/60:.1f} min<30")


# ---------------------------------------------------------------------------
# 5. ablation directions (reasoning segmentation, fixed seed)

def test_criterion_5_ablation_directions(overfit_dataset, default_run, no_penalty_run,
                                         no_consistency_run):
    base, _, _ = default_run
    w1, _, _ = no_penalty_run
    c0, _, _ = no_consistency_run
    base_rep = train.evaluate(base, overfit_dataset.train, "reasoning")
    w1_rep = train.evaluate(w1, overfit_dataset.train, "reasoning")
    c0_rep = train.evaluate(c0, overfit_dataset.train, "reasoning")
    giou_ok = base_rep.giou >= w1_rep.giou
    frag_ok = base_rep.mean_fragments <= c0_rep.mean_fragments
    report(5, "ablation directions", giou_ok and frag_ok,
           f"gIoU W=1.5 {base_rep.giou:.4f} >= W=1.0 {w1_rep.giou:.4f}: {giou_ok}; "
           f"fragments con=1 {base_rep.mean_fragments:.3f} <= con=0 "
           f"{c0_rep.mean_fragments:.3f}: {frag_ok}")


# ---------------------------------------------------------------------------
# 6. determinism

def test_criterion_6_determinism(overfit_dataset, tmp_path):
    cfg = RunConfig(steps=40, seed=RUN_SEED)
    a_bundle, a_log = train.train(cfg, dataset=overfit_dataset)
    b_bundle, b_log = train.train(cfg, dataset=overfit_dataset)
    logs_equal = a_log.steps == b_log.steps
    train.save_checkpoint(a_bundle, tmp_path / "a")
    train.save_checkpoint(b_bundle, tmp_path / "b")
    bytes_equal = ((tmp_path / "a" / "arrays.bin").read_bytes()
                   == (tmp_path / "b" / "arrays.bin").read_bytes())
    report(6, "determinism", logs_equal and bytes_equal,
           f"40-step TrainLogs identical {logs_equal}; checkpoints bitwise equal {bytes_equal}")


# ---------------------------------------------------------------------------
# 7. data pipeline

def test_criterion_7_data_pipeline(overfit_dataset, default_run, tmp_path):
    records = data.make_dataset(num_slides=20, patches_per_slide=1, seed=3)
    split_ok = True
    for seed in range(100):
        s = data.split_dataset(records, seed=seed)
        sets = [{r.slide_id for r in part} for part in (s.train, s.val, s.test)]
        split_ok &= (len(sets[0]) == 16 and len(sets[1]) == 2 and len(sets[2]) == 2)
        split_ok &= not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        split_ok &= len(s.train) + len(s.val) + len(s.test) == len(records)

    data.persist_dataset(overfit_dataset, tmp_path / "data")
    ds_ok = data.load_dataset(tmp_path / "data") == overfit_dataset

    bundle, _, _ = default_run
    train.save_checkpoint(bundle, tmp_path / "ck")
    back = train.load_checkpoint(tmp_path / "ck")
    ck_ok = all(np.array_equal(back.params[k], bundle.params[k]) for k in bundle.params)
    ck_ok &= back.config == bundle.config and back.step == bundle.step

    report(7, "data pipeline", split_ok and ds_ok and ck_ok,
           f"100-seed slide-disjoint 8:1:1 {split_ok}; dataset round-trip {ds_ok}; "
           f"checkpoint round-trip {ck_ok}")
