"""Segmentation and text metrics.

gIoU averages per-pair IoU; cIoU divides summed intersections by summed
unions. Text quality uses sentence-level BLEU-4 with add-one smoothing on
zero n-gram counts and token-level micro F1. Fragment counting (4-connected
components) quantifies mask fragmentation for the ablation probes.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import math

import numpy as np

from . import kernels
from .data import CATEGORY_NAMES

_WORD_RE = re.compile(r"<seg>|[a-z0-9]+|[^\w\s]")


def word_tokens(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class EvalPair:
    pred: np.ndarray
    gt: np.ndarray
    category: int | None = None
    example_id: str = ""

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=bool)
        self.gt = np.asarray(self.gt, dtype=bool)
        if self.pred.shape != self.gt.shape:
            raise ValueError("pred and gt shapes differ")


def iou(pred, gt) -> float:
    """Intersection over union; both masks empty counts as a perfect 1."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def _intersection_union(pair: EvalPair) -> tuple[int, int]:
    return int((pair.pred & pair.gt).sum()), int((pair.pred | pair.gt).sum())


def giou_dataset(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    return float(np.mean([iou(p.pred, p.gt) for p in pairs]))


def ciou_dataset(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    inter = 0
    union = 0
    for p in pairs:
        i, u = _intersection_union(p)
        inter += i
        union += u
    if union == 0:
        return 1.0
    return inter / union


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence BLEU-4: geometric mean of modified 1..4-gram precisions with
    add-one smoothing on zero counts, times the brevity penalty."""
    cand = word_tokens(candidate)
    ref = word_tokens(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        total = max(len(cand) - n + 1, 0)
        if total == 0:
            continue  # no n-grams of this order; smoothing would give (0+1)/(0+1)
        counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in counts.items())
        if clipped == 0:
            log_sum += math.log((clipped + 1) / (total + 1))
        else:
            log_sum += math.log(clipped / total)
    score = math.exp(log_sum / 4.0)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return bp * score


def token_f1(candidate: str, reference: str) -> float:
    """Micro F1 over the token multisets; two empty texts count as equal."""
    cand = Counter(word_tokens(candidate))
    ref = Counter(word_tokens(reference))
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    matched = sum((cand & ref).values())
    if matched == 0:
        return 0.0
    precision = matched / sum(cand.values())
    recall = matched / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def fragment_count(mask) -> int:
    """Number of 4-connected foreground components."""
    m = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    _, count = kernels.label_components(m)
    return count


@dataclass
class MetricsReport:
    task: str
    num_examples: int
    giou: float | None = None
    ciou: float | None = None
    per_category_giou: dict[int, float] = field(default_factory=dict)
    per_category_ciou: dict[int, float] = field(default_factory=dict)
    bleu4: float = 0.0
    token_f1: float = 0.0
    mean_fragments: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["per_category_giou"] = {str(k): v for k, v in self.per_category_giou.items()}
        d["per_category_ciou"] = {str(k): v for k, v in self.per_category_ciou.items()}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["per_category_giou"] = {int(k): v for k, v in d.get("per_category_giou", {}).items()}
        d["per_category_ciou"] = {int(k): v for k, v in d.get("per_category_ciou", {}).items()}
        return cls(**d)

    def to_table(self) -> str:
        def cell(v):
            return f"{v:.3f}" if v is not None else "  -  "

        cols = ["overall"] + [CATEGORY_NAMES[c] for c in sorted(CATEGORY_NAMES)]
        rows = [
            ("gIoU", [self.giou] + [self.per_category_giou.get(c) for c in sorted(CATEGORY_NAMES)]),
            ("cIoU", [self.ciou] + [self.per_category_ciou.get(c) for c in sorted(CATEGORY_NAMES)]),
        ]
        width = max(len(c) for c in cols) + 2
        lines = [f"task: {self.task}  (n={self.num_examples})"]
        lines.append(" " * 6 + "".join(c.rjust(width) for c in cols))
        for name, values in rows:
            lines.append(name.ljust(6) + "".join(cell(v).rjust(width) for v in values))
        lines.append(f"BLEU-4: {self.bleu4:.3f}   token F1: {self.token_f1:.3f}"
                     + (f"   mean fragments: {self.mean_fragments:.2f}"
                        if self.mean_fragments is not None else ""))
        return "\n".join(lines)


def build_report(task: str, pairs: list[EvalPair], text_pairs: list[tuple[str, str]],
                 fragment_counts: list[int] | None = None) -> MetricsReport:
    """Aggregate evaluation pairs and candidate/reference texts."""
    report = MetricsReport(task=task, num_examples=len(text_pairs))
    if text_pairs:
        report.bleu4 = float(np.mean([bleu4(c, r) for c, r in text_pairs]))
        report.token_f1 = float(np.mean([token_f1(c, r) for c, r in text_pairs]))
    if pairs:
        report.giou = giou_dataset(pairs)
        report.ciou = ciou_dataset(pairs)
        for cat in sorted({p.category for p in pairs if p.category is not None}):
            sub = [p for p in pairs if p.category == cat]
            report.per_category_giou[cat] = giou_dataset(sub)
            report.per_category_ciou[cat] = ciou_dataset(sub)
    if fragment_counts is not None and fragment_counts:
        report.mean_fragments = float(np.mean(fragment_counts))
    return report
