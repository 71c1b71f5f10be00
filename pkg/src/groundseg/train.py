"""Training loop, task evaluation and checkpoint persistence.

Training is teacher-forced: ground-truth answer tokens are fed and seg
embeddings are taken at ground-truth seg positions. Evaluation generates
answers greedily and grounds masks at the *emitted* seg positions. A run is
a pure function of (config, dataset): fixed init, fixed data order, fixed
reduction order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import lm as lm_mod
from . import losses, metrics, vision
from .autodiff import Tensor
from .config import ModelDims, RunConfig
from .data import DatasetSplits, PatchRecord, QARecord, load_dataset
from .lm import Vocabulary

log = logging.getLogger(__name__)

GROUNDED_TASKS = ("reasoning", "referring")
EVAL_MAX_NEW_TOKENS = 40


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, step: int, batch_ids: list[str], bundle: "CheckpointBundle",
                 train_log: "TrainLog"):
        super().__init__(f"non-finite loss at step {step} (batch: {batch_ids})")
        self.step = step
        self.batch_ids = batch_ids
        self.bundle = bundle
        self.train_log = train_log


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"type": "eval", **rec}) + "\n")


@dataclass
class CheckpointBundle:
    params: dict[str, np.ndarray]
    config: RunConfig
    step: int
    vocab: Vocabulary

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}


def init_params(dims: ModelDims, vocab_size: int, seed: int,
                dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0])
    params = vision.init_vision_params(dims, rng, dtype=dtype)
    params.update(lm_mod.init_lm_params(dims, vocab_size, rng, dtype=dtype))
    return params


# ---------------------------------------------------------------------------
# sample preparation

@dataclass
class TrainSample:
    record: PatchRecord
    qa: QARecord
    text_ids: list[int]
    answer_start: int          # index of the first answer token in text_ids
    seg_positions: list[int]   # ground-truth seg token indices in text_ids

    @property
    def sample_id(self) -> str:
        return f"{self.record.patch_id}/{self.qa.task}"


def encode_sample(record: PatchRecord, qa: QARecord, vocab: Vocabulary,
                  dims: ModelDims) -> TrainSample:
    q_ids = vocab.encode(qa.question)
    a_ids = vocab.encode(qa.answer_template)
    ids = [vocab.bos_id] + q_ids + a_ids + [vocab.eos_id]
    if dims.n_img + len(ids) > dims.context:
        raise ValueError(f"sample {record.patch_id}/{qa.task} exceeds the context limit")
    answer_start = 1 + len(q_ids)
    seg_positions = [j for j in range(answer_start, len(ids)) if ids[j] == vocab.seg_id]
    if len(seg_positions) != len(qa.slot_categories):
        raise ValueError(f"sample {record.patch_id}: seg token / slot category mismatch")
    return TrainSample(record, qa, ids, answer_start, seg_positions)


@dataclass
class Batch:
    images: np.ndarray              # (B, 3, H, W) float32
    text_ids: np.ndarray            # (B, Lt) padded
    loss_positions: list[list[int]]
    seg_flat: list[tuple[int, int]]   # (item, text position) per seg token
    token_item: np.ndarray           # (M,) owner item per token
    mask_targets: np.ndarray         # (M, H, W) float32
    weight_maps: np.ndarray          # (M, H, W) float32
    token_weight: np.ndarray         # (M,) mask-loss weights 1/(tokens_in_item * B)
    sample_ids: list[str]


def collate(samples: list[TrainSample], vocab: Vocabulary, cfg: losses.LossConfig) -> Batch:
    b = len(samples)
    lt = max(len(s.text_ids) for s in samples)
    text = np.full((b, lt), vocab.pad_id, dtype=np.int64)
    images = np.stack([s.record.image.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    loss_positions = []
    seg_flat: list[tuple[int, int]] = []
    token_item: list[int] = []
    targets: list[np.ndarray] = []
    wmaps: list[np.ndarray] = []
    token_weight: list[float] = []
    for i, s in enumerate(samples):
        text[i, : len(s.text_ids)] = s.text_ids
        loss_positions.append(list(range(s.answer_start, len(s.text_ids))))
        gt = s.record.gt.categories
        n_tok = len(s.seg_positions)
        for j, cat in zip(s.seg_positions, s.qa.slot_categories):
            seg_flat.append((i, j))
            token_item.append(i)
            targets.append((gt == cat).astype(np.float32))
            wmaps.append(losses.penalty_weight_map(gt, cat, cfg).astype(np.float32))
            token_weight.append(1.0 / (n_tok * b))
    m = len(token_item)
    h, w = samples[0].record.gt.categories.shape
    return Batch(
        images=images,
        text_ids=text,
        loss_positions=loss_positions,
        seg_flat=seg_flat,
        token_item=np.asarray(token_item, dtype=np.int64),
        mask_targets=(np.stack(targets) if m else np.zeros((0, h, w), dtype=np.float32)),
        weight_maps=(np.stack(wmaps) if m else np.ones((0, h, w), dtype=np.float32)),
        token_weight=np.asarray(token_weight, dtype=np.float32),
        sample_ids=[s.sample_id for s in samples],
    )


def batch_loss(params: dict[str, Tensor], dims: ModelDims, cfg: losses.LossConfig,
               batch: Batch) -> tuple[Tensor, dict[str, float]]:
    """Combined objective over one batch; reduction is per item, then over
    items, matching the single-example loss definitions."""
    b = batch.images.shape[0]
    v_g, v_l = vision.encode_image_batch(Tensor(batch.images), params)
    v_seg = vision.aggregate_batch(v_g, v_l, params)
    img_tokens = lm_mod.project_image_tokens(v_g, params)
    logits, hiddens = lm_mod.lm_forward_batch(img_tokens, batch.text_ids, params, dims)
    _, length, vsize = logits.shape
    n_img = dims.n_img
    dtype = logits.data.dtype

    flat_logits = ad.reshape(logits, (b * length, vsize))
    rows, tgts, wts = [], [], []
    for i, positions in enumerate(batch.loss_positions):
        for j in positions:
            rows.append(i * length + n_img + j - 1)
            tgts.append(batch.text_ids[i, j])
            wts.append(1.0 / (len(positions) * b))
    ce = ad.cross_entropy_rows(ad.take(flat_logits, np.asarray(rows)), np.asarray(tgts))
    txt = ad.tsum(ad.mul(ce, Tensor(np.asarray(wts, dtype=dtype))))

    m = batch.mask_targets.shape[0]
    if m == 0:
        mask = Tensor(np.asarray(0.0, dtype=dtype))
        con = Tensor(np.asarray(0.0, dtype=dtype))
    else:
        flat_h = ad.reshape(hiddens, (b * length, hiddens.shape[2]))
        seg_rows = np.asarray([i * length + n_img + j for i, j in batch.seg_flat])
        h_seg = ad.take(flat_h, seg_rows)
        f_seg = ad.add(ad.matmul(h_seg, params["mm.seg_proj.w"]), params["mm.seg_proj.b"])
        v_tok = ad.take(v_seg, batch.token_item)
        mask_logits = vision.decode_mask_batch(v_tok, f_seg, params)

        t = batch.mask_targets
        w = batch.weight_maps
        hw = float(t.shape[1] * t.shape[2])
        bce_vec = ad.mul(ad.tsum(losses.bce_map(mask_logits, t, w), axis=(1, 2)),
                         Tensor(np.asarray(1.0 / hw, dtype=dtype)))
        probs = ad.sigmoid(mask_logits)
        wt = (w * t).astype(dtype)
        s = np.asarray(cfg.dice_smooth, dtype=dtype)
        inter = ad.tsum(ad.mul(probs, Tensor(wt)), axis=(1, 2))
        denom = ad.add(ad.tsum(ad.mul(probs, Tensor(w.astype(dtype))), axis=(1, 2)),
                       Tensor(wt.sum(axis=(1, 2))))
        dice_vec = ad.add(Tensor(np.asarray(1.0, dtype=dtype)),
                          ad.neg(ad.div(ad.add(ad.mul(Tensor(np.asarray(2.0, dtype=dtype)), inter),
                                               Tensor(s)),
                                        ad.add(denom, Tensor(s)))))
        per_tok = ad.add(ad.mul(Tensor(np.asarray(cfg.lambda_bce, dtype=dtype)), bce_vec),
                         ad.mul(Tensor(np.asarray(cfg.lambda_dice, dtype=dtype)), dice_vec))
        mask = ad.tsum(ad.mul(per_tok, Tensor(batch.token_weight.astype(dtype))))

        pairs = losses.directed_pair_count(t.shape[1], t.shape[2])
        und = ad.add(ad.tsum(ad.tabs(ad.add(probs[:, :, 1:], ad.neg(probs[:, :, :-1]))), axis=(1, 2)),
                     ad.tsum(ad.tabs(ad.add(probs[:, 1:, :], ad.neg(probs[:, :-1, :]))), axis=(1, 2)))
        con_w = 2.0 * batch.token_weight / pairs  # directed pairs, per-item mean
        con = ad.tsum(ad.mul(und, Tensor(con_w.astype(dtype))))

    total = losses.total_loss(mask, txt, con, cfg)
    parts = {"mask": float(mask.data), "txt": float(txt.data), "con": float(con.data),
             "total": float(total.data)}
    return total, parts


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Decoupled weight decay; decay skips 1-d params (gains and biases)."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float,
                 beta2: float, weight_decay: float, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def clip_global_norm(self, max_norm: float) -> float:
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        if max_norm > 0 and norm > max_norm:
            scale = np.float32(max_norm / (norm + 1e-12))
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim > 1:
                update = update + self.wd * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# the loop

def _batch_index_stream(n: int, batch_size: int, seed: int):
    rng = np.random.default_rng([seed, 1])
    pool: list[int] = []
    while True:
        while len(pool) < batch_size:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:batch_size]
        del pool[:batch_size]


def train(config: RunConfig, dataset: DatasetSplits | None = None) -> tuple[CheckpointBundle, TrainLog]:
    if dataset is None:
        if config.data_dir is None:
            raise ValueError("config.data_dir is required when no dataset is passed")
        dataset = load_dataset(config.data_dir)
    if not dataset.train:
        raise ValueError("training split is empty")

    texts = [t for r in dataset.train for qa in r.qa for t in (qa.question, qa.answer_template)]
    vocab = Vocabulary.from_corpus(texts, size=config.dims.vocab_size)
    params = init_params(config.dims, len(vocab), config.seed)
    samples = [encode_sample(r, qa, vocab, config.dims) for r in dataset.train for qa in r.qa]

    opt = AdamW(params, config.lr, config.beta1, config.beta2, config.weight_decay)
    train_log = TrainLog()
    stream = _batch_index_stream(len(samples), config.batch_size, config.seed)
    last_good = {k: v.data.copy() for k, v in params.items()}

    for step in range(config.steps):
        idx = next(stream)
        batch = collate([samples[i] for i in idx], vocab, config.loss)
        opt.zero_grad()
        total, parts = batch_loss(params, config.dims, config.loss, batch)
        if not np.isfinite(parts["total"]):
            log.error("non-finite loss at step %d; batch %s", step, batch.sample_ids)
            train_log.steps.append({"step": step, **parts, "batch": batch.sample_ids})
            bundle = CheckpointBundle({k: v.copy() for k, v in last_good.items()},
                                      config, step, vocab)
            raise TrainingDiverged(step, batch.sample_ids, bundle, train_log)
        total.backward()
        opt.clip_global_norm(config.clip_norm)
        opt.step()
        train_log.steps.append({"step": step, **parts})
        last_good = {k: v.data.copy() for k, v in params.items()}

        if config.eval_every and (step + 1) % config.eval_every == 0:
            snap = CheckpointBundle({k: v.data.copy() for k, v in params.items()},
                                    config, step + 1, vocab)
            records = dataset.val if dataset.val else dataset.train
            report = evaluate(snap, records, "referring")
            train_log.evals.append({"step": step + 1, "task": "referring",
                                    "report": json.loads(report.to_json())})

    bundle = CheckpointBundle({k: v.data.copy() for k, v in params.items()},
                              config, config.steps, vocab)
    return bundle, train_log


# ---------------------------------------------------------------------------
# evaluation

def pair_masks(slot_categories: list[int], gt_categories: np.ndarray,
               pred_masks: list[np.ndarray], example_id: str) -> list[metrics.EvalPair]:
    """Pair predicted masks with ground-truth slots by order. Unmatched
    slots on either side score against an empty mask (IoU 0)."""
    empty = np.zeros_like(gt_categories, dtype=bool)
    pairs = []
    for i in range(max(len(slot_categories), len(pred_masks))):
        cat = slot_categories[i] if i < len(slot_categories) else None
        gt_mask = (gt_categories == cat) if cat is not None else empty
        pred = pred_masks[i].astype(bool) if i < len(pred_masks) else empty
        pairs.append(metrics.EvalPair(pred=pred, gt=gt_mask, category=cat,
                                      example_id=f"{example_id}/slot{i}"))
    return pairs


def _image_tokens_numpy(record: PatchRecord, params: dict[str, Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """Image tokens (n_img, d) and v_seg (1, c, g, g) for one record."""
    x = record.image.pixels.transpose(2, 0, 1)[None].astype(np.float32)
    with ad.no_grad():
        v_g, v_l = vision.encode_image_batch(Tensor(x), params)
        v_seg = vision.aggregate_batch(v_g, v_l, params)
        tokens = lm_mod.project_image_tokens(v_g, params)
    return tokens.data[0], v_seg.data


def evaluate(bundle: CheckpointBundle, records: list[PatchRecord], task: str) -> metrics.MetricsReport:
    """Generate answers for `task` over `records` and score them.

    Referring/reasoning: greedy generation, masks decoded at emitted seg
    positions, slot-order pairing against ground truth. Conversation:
    BLEU-4 and token F1 only.
    """
    if task not in GROUNDED_TASKS + ("conversation",):
        raise ValueError(f"unknown task {task!r}")
    if not records:
        raise ValueError("empty evaluation split")
    params = {k: Tensor(v) for k, v in bundle.params.items()}
    vocab = bundle.vocab
    dims = bundle.config.dims
    text_pairs: list[tuple[str, str]] = []
    pairs: list[metrics.EvalPair] = []
    fragments: list[int] = []

    for rec in records:
        for qa in rec.qa:
            if qa.task != task:
                continue
            img_tokens, v_seg = _image_tokens_numpy(rec, params)
            prompt = [vocab.bos_id] + vocab.encode(qa.question)
            cont = lm_mod.generate(img_tokens, prompt, params, dims,
                                   max_len=EVAL_MAX_NEW_TOKENS, eos_id=vocab.eos_id)
            candidate = vocab.decode(cont)
            reference = vocab.decode(vocab.encode(qa.answer_template))
            text_pairs.append((candidate, reference))
            if task not in GROUNDED_TASKS:
                continue
            full = prompt + cont
            out = lm_mod.lm_forward(lm_mod.MultimodalInput(img_tokens, full), params, dims)
            embs = lm_mod.extract_seg_embeddings(out, full, (len(prompt), len(full)),
                                                 vocab.seg_id, params)
            pred_masks: list[np.ndarray] = []
            if len(embs):
                with ad.no_grad():
                    tok_feats = Tensor(np.repeat(v_seg, len(embs), axis=0))
                    logit_maps = vision.decode_mask_batch(tok_feats, Tensor(embs.vectors), params)
                pred_masks = [logit_maps.data[i] > 0.0 for i in range(len(embs))]
            fragments.extend(metrics.fragment_count(m) for m in pred_masks)
            pairs.extend(pair_masks(qa.slot_categories, rec.gt.categories, pred_masks,
                                    f"{rec.patch_id}/{task}"))

    if not text_pairs:
        raise ValueError(f"split holds no {task!r} records")
    return metrics.build_report(task, pairs, text_pairs,
                                fragments if task in GROUNDED_TASKS else None)


def seg_emission_accuracy(bundle: CheckpointBundle, records: list[PatchRecord],
                          task: str = "referring") -> tuple[int, int]:
    """How many generated answers emit exactly the ground-truth number of
    seg tokens. Returns (exact, total)."""
    params = {k: Tensor(v) for k, v in bundle.params.items()}
    vocab = bundle.vocab
    exact = 0
    total = 0
    for rec in records:
        for qa in rec.qa:
            if qa.task != task:
                continue
            img_tokens, _ = _image_tokens_numpy(rec, params)
            prompt = [vocab.bos_id] + vocab.encode(qa.question)
            cont = lm_mod.generate(img_tokens, prompt, params, bundle.config.dims,
                                   max_len=EVAL_MAX_NEW_TOKENS, eos_id=vocab.eos_id)
            emitted = sum(1 for t in cont if t == vocab.seg_id)
            exact += emitted == len(qa.slot_categories)
            total += 1
    return exact, total


# ---------------------------------------------------------------------------
# checkpoints

_MANIFEST_NAME = "manifest.json"
_ARRAYS_NAME = "arrays.bin"


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    """Write manifest.json + arrays.bin (+ config.json, vocab.json)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(bundle.params):
        arr = np.ascontiguousarray(bundle.params[name], dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    with open(root / _ARRAYS_NAME, "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    with open(root / _MANIFEST_NAME, "w") as fh:
        json.dump({"step": bundle.step, "arrays": entries}, fh, indent=2)
    (root / "config.json").write_text(bundle.config.to_json())
    (root / "vocab.json").write_text(bundle.vocab.to_json())
    return root


def load_checkpoint(path) -> CheckpointBundle:
    root = Path(path)
    manifest = json.loads((root / _MANIFEST_NAME).read_text())
    raw = (root / _ARRAYS_NAME).read_bytes()
    params = {}
    for entry in manifest["arrays"]:
        name, offset, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        if offset + nbytes > len(raw):
            raise ValueError(
                f"array {name!r}: expected {nbytes} bytes at offset {offset}, "
                f"file holds {max(len(raw) - offset, 0)}")
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=nbytes // 4, offset=offset)
        params[name] = arr.reshape(entry["shape"]).copy()
    config = RunConfig.from_json((root / "config.json").read_text())
    vocab = Vocabulary.from_json((root / "vocab.json").read_text())
    return CheckpointBundle(params=params, config=config, step=manifest["step"], vocab=vocab)
