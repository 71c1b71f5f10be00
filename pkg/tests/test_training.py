import json

import numpy as np
import pytest

from groundseg import data, train
from groundseg.config import ModelDims, RunConfig
from groundseg.losses import LossConfig
from groundseg.metrics import EvalPair, giou_dataset
from groundseg.train import (CheckpointBundle, TrainingDiverged, encode_sample, evaluate,
                             init_params, load_checkpoint, pair_masks, save_checkpoint)


@pytest.fixture(scope="module")
def dataset():
    records = data.make_dataset(num_slides=3, patches_per_slide=2, seed=21)
    return data.DatasetSplits(train=records, val=[], test=[])


def short_config(steps=4, seed=11, **kw):
    return RunConfig(steps=steps, batch_size=4, seed=seed, **kw)


def test_zero_steps_equals_initialization(dataset):
    bundle, log = train.train(short_config(steps=0), dataset=dataset)
    fresh = init_params(bundle.config.dims, len(bundle.vocab), bundle.config.seed)
    assert bundle.step == 0
    assert log.steps == []
    assert set(bundle.params) == set(fresh)
    for name, arr in bundle.params.items():
        assert np.array_equal(arr, fresh[name].data), name


def test_training_decreases_loss_and_is_deterministic(dataset):
    a_bundle, a_log = train.train(short_config(steps=12), dataset=dataset)
    b_bundle, b_log = train.train(short_config(steps=12), dataset=dataset)
    assert [s["total"] for s in a_log.steps] == [s["total"] for s in b_log.steps]
    for name in a_bundle.params:
        assert np.array_equal(a_bundle.params[name], b_bundle.params[name]), name
    assert a_log.steps[-1]["total"] < a_log.steps[0]["total"]


def test_different_seed_differs(dataset):
    a, _ = train.train(short_config(steps=2, seed=1), dataset=dataset)
    b, _ = train.train(short_config(steps=2, seed=2), dataset=dataset)
    assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_divergence_aborts_with_last_good(dataset, monkeypatch):
    real_init = train.init_params

    def poisoned(dims, vocab_size, seed, dtype=np.float32):
        params = real_init(dims, vocab_size, seed, dtype=dtype)
        params["lm.head"].data[0, 0] = np.nan
        return params

    monkeypatch.setattr(train, "init_params", poisoned)
    with pytest.raises(TrainingDiverged) as err:
        train.train(short_config(steps=3), dataset=dataset)
    assert err.value.step == 0
    assert err.value.batch_ids
    assert isinstance(err.value.bundle, CheckpointBundle)
    assert err.value.train_log.steps  # offending step is logged


def test_train_log_jsonl(dataset, tmp_path):
    _, log = train.train(short_config(steps=3), dataset=dataset)
    path = tmp_path / "log.jsonl"
    log.to_jsonl(path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(lines) == 3
    assert all(l["type"] == "step" for l in lines)
    assert [l["step"] for l in lines] == [0, 1, 2]
    assert all(np.isfinite(l["total"]) for l in lines)


# --- checkpoints

def test_checkpoint_round_trip_bitwise(dataset, tmp_path):
    bundle, _ = train.train(short_config(steps=2), dataset=dataset)
    save_checkpoint(bundle, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.step == bundle.step
    assert back.vocab.tokens == bundle.vocab.tokens
    assert back.config == bundle.config
    assert set(back.params) == set(bundle.params)
    for name in bundle.params:
        assert back.params[name].tobytes() == bundle.params[name].tobytes(), name


def test_checkpoint_truncation_names_array(dataset, tmp_path):
    bundle, _ = train.train(short_config(steps=1), dataset=dataset)
    root = save_checkpoint(bundle, tmp_path / "ckpt")
    blob = (root / "arrays.bin").read_bytes()
    (root / "arrays.bin").write_bytes(blob[: len(blob) // 2])
    manifest = json.loads((root / "manifest.json").read_text())
    cut = len(blob) // 2
    victim = next(e for e in manifest["arrays"] if e["offset"] + e["nbytes"] > cut)
    with pytest.raises(ValueError, match=victim["name"].replace(".", r"\.")):
        load_checkpoint(root)
    with pytest.raises(ValueError, match=str(victim["nbytes"])):
        load_checkpoint(root)


def test_checkpoint_reload_reproduces_evaluation(dataset, tmp_path):
    bundle, _ = train.train(short_config(steps=4), dataset=dataset)
    save_checkpoint(bundle, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    a = evaluate(bundle, dataset.train, "conversation")
    b = evaluate(back, dataset.train, "conversation")
    assert a == b


# --- evaluation

def test_pair_masks_oracle_upper_bound(dataset):
    # injecting the ground-truth masks must give gIoU = cIoU = 1
    pairs = []
    for rec in dataset.train:
        for qa in rec.qa:
            if qa.task != "referring" or not qa.slot_categories:
                continue
            gt_masks = [rec.gt.categories == c for c in qa.slot_categories]
            pairs.extend(pair_masks(qa.slot_categories, rec.gt.categories, gt_masks,
                                    rec.patch_id))
    assert pairs
    assert giou_dataset(pairs) == 1.0


def test_pair_masks_missing_predictions_score_zero():
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:5, 2:5] = 1
    pairs = pair_masks([1], gt, [], "x")
    assert len(pairs) == 1
    assert giou_dataset(pairs) == 0.0


def test_pair_masks_extra_predictions_score_zero():
    gt = np.zeros((8, 8), dtype=np.uint8)
    extra = np.zeros((8, 8), dtype=bool)
    extra[0, 0] = True
    pairs = pair_masks([], gt, [extra], "x")
    assert len(pairs) == 1
    assert pairs[0].category is None
    assert giou_dataset(pairs) == 0.0


def test_untrained_conversation_bleu_near_zero():
    # the derived value is pinned at the overfit setup: data seed 42, run seed 0
    records = data.make_dataset(num_slides=4, patches_per_slide=8, seed=42)
    ds = data.DatasetSplits(train=records, val=[], test=[])
    bundle, _ = train.train(RunConfig(steps=0, seed=0), dataset=ds)
    report = evaluate(bundle, ds.train, "conversation")
    assert report.bleu4 < 0.05
    assert report.giou is None


def test_evaluate_rejects_empty_split(dataset):
    bundle, _ = train.train(short_config(steps=0), dataset=dataset)
    with pytest.raises(ValueError):
        evaluate(bundle, [], "referring")
    with pytest.raises(ValueError):
        evaluate(bundle, dataset.train, "retrieval")


def test_eval_cadence_records_reports(dataset):
    _, log = train.train(short_config(steps=4, eval_every=2), dataset=dataset)
    assert [e["step"] for e in log.evals] == [2, 4]
    assert all(e["task"] == "referring" for e in log.evals)


# --- config and sample plumbing

def test_run_config_json_round_trip():
    cfg = RunConfig(data_dir="/tmp/x", steps=7, seed=3,
                    loss=LossConfig(w_penalty=1.25), dims=ModelDims(canvas=32))
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg


def test_run_config_rejects_unknown_fields():
    with pytest.raises(ValueError):
        RunConfig.from_json(json.dumps({"learning_rate": 1.0}))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)


def test_encode_sample_rejects_overlong(dataset):
    rec = dataset.train[0]
    qa = rec.qa[0]
    from groundseg.lm import Vocabulary
    vocab = Vocabulary.from_corpus([qa.question, qa.answer_template], size=64)
    tiny = ModelDims(context=16)
    with pytest.raises(ValueError):
        encode_sample(rec, qa, vocab, tiny)
