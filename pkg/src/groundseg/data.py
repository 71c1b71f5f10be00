"""Domain types and the synthetic nuclei dataset.

Patches are noise-textured canvases with elliptical "nuclei" whose hue, size
and eccentricity depend on the category, so a small model can learn the
categories from appearance alone. Every generator is a pure function of its
seed. Patches group into synthetic slides, and splitting is slide-wise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels

log = logging.getLogger(__name__)

NUM_CATEGORIES = 4
CATEGORY_NAMES = {1: "neoplastic", 2: "inflammatory", 3: "connective", 4: "epithelial"}
CATEGORY_IDS = {name: cid for cid, name in CATEGORY_NAMES.items()}

TASK_REASONING = "reasoning"
TASK_REFERRING = "referring"
TASK_CONVERSATION = "conversation"
TASKS = (TASK_REASONING, TASK_REFERRING, TASK_CONVERSATION)

SEG_TOKEN = "<seg>"

# per-category appearance: rgb hue, semi-major axis range, aspect (minor/major) range.
# neoplastic and inflammatory hues deliberately overlap under jitter so the
# category of a nucleus is ambiguous from colour alone
_CATEGORY_STYLE = {
    1: ((0.42, 0.18, 0.55), (4.5, 7.5), (0.75, 1.0)),   # neoplastic: large purple, round
    2: ((0.33, 0.22, 0.62), (2.4, 3.8), (0.85, 1.0)),   # inflammatory: small blue-purple, round
    3: ((0.16, 0.50, 0.36), (4.5, 8.0), (0.30, 0.55)),  # connective: green, elongated
    4: ((0.66, 0.42, 0.24), (3.2, 5.2), (0.60, 0.85)),  # epithelial: brown-orange, oval
}
_BACKGROUND_RGB = (0.91, 0.83, 0.88)
_HUE_JITTER = 0.10
_NUCLEUS_NOISE = 0.05

NUMBER_WORDS = ("zero", "one", "two", "three", "four")


@dataclass(eq=False)
class ImagePatch:
    """H x W x 3 image with values in [0, 1]; sides divisible by 16."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")
        if p.shape[0] % 16 or p.shape[1] % 16:
            raise ValueError("image sides must be divisible by 16")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, ImagePatch) and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class CategoryMap:
    """H x W integer map, 0 = background, 1..num_categories = nuclei classes."""

    categories: np.ndarray
    num_categories: int = NUM_CATEGORIES

    def __post_init__(self):
        c = np.asarray(self.categories)
        if c.ndim != 2:
            raise ValueError("categories must be 2-d")
        if c.min(initial=0) < 0 or c.max(initial=0) > self.num_categories:
            raise ValueError(f"category values must lie in 0..{self.num_categories}")
        self.categories = c

    def pixel_counts(self) -> np.ndarray:
        """Foreground pixel count per category id (index 0 unused)."""
        return np.bincount(self.categories.ravel(), minlength=self.num_categories + 1)

    def present_categories(self) -> list[int]:
        """Category ids present, by descending pixel count, ties by ascending id."""
        counts = self.pixel_counts()
        present = [c for c in range(1, self.num_categories + 1) if counts[c] > 0]
        return sorted(present, key=lambda c: (-counts[c], c))

    def __eq__(self, other):
        return (isinstance(other, CategoryMap)
                and self.num_categories == other.num_categories
                and np.array_equal(self.categories, other.categories))


@dataclass(eq=False)
class InstanceMap:
    """H x W instance-id map (0 = background) plus the id -> category table."""

    instances: np.ndarray
    instance_category: dict[int, int]

    def __post_init__(self):
        m = np.asarray(self.instances)
        if m.ndim != 2 or m.min(initial=0) < 0:
            raise ValueError("instances must be a 2-d map of non-negative ids")
        ids = set(np.unique(m).tolist()) - {0}
        missing = ids - set(self.instance_category)
        if missing:
            raise ValueError(f"instance ids without category: {sorted(missing)}")
        self.instances = m

    def __eq__(self, other):
        return (isinstance(other, InstanceMap)
                and self.instance_category == other.instance_category
                and np.array_equal(self.instances, other.instances))


@dataclass
class QARecord:
    task: str
    question: str
    answer_template: str
    slot_categories: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        n_slots = self.answer_template.count(SEG_TOKEN)
        if n_slots != len(self.slot_categories):
            raise ValueError(
                f"{n_slots} seg slots in answer but {len(self.slot_categories)} bound categories")
        if self.task == TASK_CONVERSATION and self.slot_categories:
            raise ValueError("conversation records must not bind seg slots")


@dataclass(eq=False)
class PatchRecord:
    patch_id: str
    slide_id: str
    image: ImagePatch
    gt: CategoryMap
    instances: InstanceMap
    qa: list[QARecord]

    def __post_init__(self):
        if not self.qa:
            raise ValueError("a patch needs at least one QA record")
        shape = self.image.pixels.shape[:2]
        if self.gt.categories.shape != shape or self.instances.instances.shape != shape:
            raise ValueError("image, gt and instance shapes differ")

    def __eq__(self, other):
        return (isinstance(other, PatchRecord)
                and self.patch_id == other.patch_id
                and self.slide_id == other.slide_id
                and self.image == other.image
                and self.gt == other.gt
                and self.instances == other.instances
                and self.qa == other.qa)


@dataclass(eq=False)
class DatasetSplits:
    train: list[PatchRecord]
    val: list[PatchRecord]
    test: list[PatchRecord]

    def __post_init__(self):
        slide_sets = [
            {r.slide_id for r in part} for part in (self.train, self.val, self.test)
        ]
        for i in range(3):
            for j in range(i + 1, 3):
                shared = slide_sets[i] & slide_sets[j]
                if shared:
                    raise ValueError(f"slides in more than one split: {sorted(shared)}")

    def __eq__(self, other):
        return (isinstance(other, DatasetSplits)
                and self.train == other.train
                and self.val == other.val
                and self.test == other.test)

    def part(self, name: str) -> list[PatchRecord]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class GenSpec:
    """Recipe for one synthetic patch."""

    canvas: int = 64
    count_ranges: dict[int, tuple[int, int]] = field(
        default_factory=lambda: {c: (0, 4) for c in CATEGORY_NAMES})
    seed: int = 0

    def __post_init__(self):
        if self.canvas % 16:
            raise ValueError("canvas must be divisible by 16")
        for cat, (lo, hi) in self.count_ranges.items():
            if lo < 0 or hi < lo:
                raise ValueError(f"bad count range for category {cat}: ({lo}, {hi})")


@dataclass(frozen=True)
class TemplateBank:
    """Question/answer templates per task. `{cat}` is replaced by the
    category name, `{n}` by a count word; answers carry literal seg tokens."""

    referring_questions: tuple[str, ...] = (
        "segment the {cat} nuclei .",
        "where are the {cat} cells ?",
        "mark every {cat} nucleus .",
    )
    referring_answers: tuple[str, ...] = (
        "the {cat} nuclei are at <seg> .",
        "{cat} cells : <seg> .",
    )
    referring_absent_answers: tuple[str, ...] = (
        "no nuclei are present here .",
    )
    reasoning_questions: tuple[str, ...] = (
        "which cell types are present ?",
        "name and ground each nucleus type .",
    )
    reasoning_leads: tuple[str, ...] = (
        "the patch shows",
        "this image holds",
    )
    reasoning_absent_answers: tuple[str, ...] = (
        "no nuclei are visible here .",
    )
    conversation_questions: tuple[str, ...] = (
        "describe this patch .",
        "what does this patch show ?",
    )
    conversation_answers: tuple[str, ...] = (
        "mostly {cat} nuclei with {n} cell types .",
        "{cat} cells dominate among {n} types .",
    )
    conversation_absent_answers: tuple[str, ...] = (
        "only background tissue is visible .",
    )

    def __post_init__(self):
        groups = (self.referring_questions, self.referring_answers,
                  self.referring_absent_answers, self.reasoning_questions,
                  self.reasoning_leads, self.reasoning_absent_answers,
                  self.conversation_questions, self.conversation_answers,
                  self.conversation_absent_answers)
        if any(len(g) == 0 for g in groups):
            raise ValueError("every template group must be non-empty")


def default_templates() -> TemplateBank:
    return TemplateBank()


def template_corpus(bank: TemplateBank) -> list[str]:
    """Expand every template with every category name and count word, for
    vocabulary construction."""
    texts = []
    names = list(CATEGORY_NAMES.values())
    for group in (bank.referring_questions, bank.referring_answers,
                  bank.referring_absent_answers, bank.reasoning_questions,
                  bank.reasoning_absent_answers, bank.conversation_questions,
                  bank.conversation_absent_answers):
        for tpl in group:
            for cat in names:
                texts.append(tpl.format(cat=cat))
    for lead in bank.reasoning_leads:
        texts.append(lead + " " + " , ".join(f"{c} {SEG_TOKEN}" for c in names) + " and more .")
    for tpl in bank.conversation_answers:
        for cat in names:
            for n in NUMBER_WORDS:
                texts.append(tpl.format(cat=cat, n=n))
    return texts


def _ellipse_mask(canvas: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    dy = yy - cy
    dx = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


_MAX_PLACEMENT_ATTEMPTS = 200


def generate_patch(spec: GenSpec, patch_id: str | None = None, slide_id: str = "slide0000",
                   templates: TemplateBank | None = None) -> PatchRecord:
    """Render one synthetic patch. Deterministic in (spec, ids, templates).

    Placement uses rejection sampling; an instance whose placement fails
    after the attempt budget is dropped (logged, never an error).
    """
    rng = np.random.default_rng(spec.seed)
    c = spec.canvas

    # tissue-like background: pale base, smooth blotches, fine grain
    img = np.empty((c, c, 3), dtype=np.float64)
    img[:] = _BACKGROUND_RGB
    coarse = rng.normal(0.0, 0.05, size=(c // 8, c // 8, 3))
    img += np.kron(coarse, np.ones((8, 8, 1)))
    img += rng.normal(0.0, 0.02, size=(c, c, 3))

    gt = np.zeros((c, c), dtype=np.uint8)
    inst = np.zeros((c, c), dtype=np.uint8)
    instance_category: dict[int, int] = {}
    blocked = np.zeros((c, c), dtype=bool)
    next_id = 1

    for cat in sorted(spec.count_ranges):
        lo, hi = spec.count_ranges[cat]
        want = int(rng.integers(lo, hi + 1))
        rgb, (a_lo, a_hi), (asp_lo, asp_hi) = _CATEGORY_STYLE[cat]
        placed = 0
        for _ in range(want):
            ok = False
            for _attempt in range(_MAX_PLACEMENT_ATTEMPTS):
                a = rng.uniform(a_lo, a_hi)
                b = max(1.6, a * rng.uniform(asp_lo, asp_hi))
                theta = rng.uniform(0.0, np.pi)
                if a >= c - 1 - a:
                    continue  # nucleus cannot fit this canvas
                cy = rng.uniform(a, c - 1 - a)
                cx = rng.uniform(a, c - 1 - a)
                m = _ellipse_mask(c, cy, cx, a, b, theta)
                if m.sum() < 4 or (m & blocked).any():
                    continue
                _, parts = kernels.label_components(m)
                if parts != 1:
                    continue
                ok = True
                break
            if not ok:
                log.info("patch seed=%s: dropped a category-%d instance after %d attempts",
                         spec.seed, cat, _MAX_PLACEMENT_ATTEMPTS)
                continue
            shade = np.clip(np.asarray(rgb) + rng.uniform(-_HUE_JITTER, _HUE_JITTER, size=3), 0.0, 1.0)
            img[m] = shade + rng.normal(0.0, _NUCLEUS_NOISE, size=(int(m.sum()), 3))
            gt[m] = cat
            inst[m] = next_id
            instance_category[next_id] = cat
            blocked |= _dilate(m)
            next_id += 1
            placed += 1

    # quantize so PNG persistence round-trips exactly
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / 255.0

    qa_seed = int(rng.integers(0, 2**31 - 1))
    gt_map = CategoryMap(gt)
    inst_map = InstanceMap(inst, instance_category)
    qa = build_qa(gt_map, inst_map, templates or default_templates(), qa_seed)
    return PatchRecord(
        patch_id=patch_id if patch_id is not None else f"patch-{spec.seed}",
        slide_id=slide_id,
        image=ImagePatch(pixels),
        gt=gt_map,
        instances=inst_map,
        qa=qa,
    )


def build_qa(gt: CategoryMap, instances: InstanceMap, templates: TemplateBank,
             seed: int) -> list[QARecord]:
    """One QA record per task. Reasoning answers ground every present
    category in descending pixel-count order; referring answers ground one
    category chosen among those present; empty patches state absence."""
    rng = np.random.default_rng(seed)
    present = gt.present_categories()

    def pick(options):
        return options[int(rng.integers(len(options)))]

    # reasoning
    q = pick(templates.reasoning_questions)
    if present:
        lead = pick(templates.reasoning_leads)
        parts = [f"{CATEGORY_NAMES[cid]} {SEG_TOKEN}" for cid in present]
        if len(parts) == 1:
            body = parts[0]
        else:
            body = " , ".join(parts[:-1]) + " and " + parts[-1]
        reasoning = QARecord(TASK_REASONING, q, f"{lead} {body} .", list(present))
    else:
        reasoning = QARecord(TASK_REASONING, q, pick(templates.reasoning_absent_answers), [])

    # referring
    if present:
        target = present[int(rng.integers(len(present)))]
        name = CATEGORY_NAMES[target]
        referring = QARecord(
            TASK_REFERRING,
            pick(templates.referring_questions).format(cat=name),
            pick(templates.referring_answers).format(cat=name),
            [target],
        )
    else:
        name = CATEGORY_NAMES[int(rng.integers(1, NUM_CATEGORIES + 1))]
        referring = QARecord(
            TASK_REFERRING,
            pick(templates.referring_questions).format(cat=name),
            pick(templates.referring_absent_answers),
            [],
        )

    # conversation
    q = pick(templates.conversation_questions)
    if present:
        answer = pick(templates.conversation_answers).format(
            cat=CATEGORY_NAMES[present[0]], n=NUMBER_WORDS[len(present)])
        conversation = QARecord(TASK_CONVERSATION, q, answer, [])
    else:
        conversation = QARecord(TASK_CONVERSATION, q, pick(templates.conversation_absent_answers), [])

    return [reasoning, referring, conversation]


def filter_patches(patch_embeddings, reference_embedding, threshold: float) -> list[int]:
    """Indices of embeddings whose cosine similarity to the reference is
    >= threshold, in input order. Embeddings must be unit vectors."""
    ref = np.asarray(reference_embedding, dtype=np.float64)
    embs = [np.asarray(e, dtype=np.float64) for e in patch_embeddings]
    for i, e in enumerate(embs):
        if e.shape != ref.shape:
            raise ValueError(f"embedding {i} has dimension {e.shape}, expected {ref.shape}")
        if abs(np.linalg.norm(e) - 1.0) > 1e-6:
            raise ValueError(f"embedding {i} is not unit-norm")
    if abs(np.linalg.norm(ref) - 1.0) > 1e-6:
        raise ValueError("reference embedding is not unit-norm")
    return [i for i, e in enumerate(embs) if float(e @ ref) >= threshold]


def split_dataset(records: list[PatchRecord], ratios=(8, 1, 1), seed: int = 0) -> DatasetSplits:
    """Partition slide-wise, shuffled by seed, as close to `ratios` as
    integer counts allow; val and test each get at least one slide."""
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    slides = sorted({r.slide_id for r in records})
    if len(slides) < 3:
        raise ValueError("need at least 3 slides to split")
    rng = np.random.default_rng(seed)
    order = [slides[i] for i in rng.permutation(len(slides))]
    n = len(slides)
    total = sum(ratios)
    n_val = max(1, int(n * ratios[1] / total + 0.5))
    n_test = max(1, int(n * ratios[2] / total + 0.5))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("ratios leave no slides for training")
    train_slides = set(order[:n_train])
    val_slides = set(order[n_train:n_train + n_val])
    return DatasetSplits(
        train=[r for r in records if r.slide_id in train_slides],
        val=[r for r in records if r.slide_id in val_slides],
        test=[r for r in records if r.slide_id not in train_slides and r.slide_id not in val_slides],
    )


def make_dataset(num_slides: int, patches_per_slide: int, seed: int,
                 canvas: int = 64, count_ranges: dict[int, tuple[int, int]] | None = None,
                 templates: TemplateBank | None = None) -> list[PatchRecord]:
    """Generate `num_slides * patches_per_slide` patches; consecutive patches
    share a slide. Per-patch seeds are spawned so shards are independent."""
    ranges = count_ranges or {c: (0, 4) for c in CATEGORY_NAMES}
    records = []
    for s in range(num_slides):
        for p in range(patches_per_slide):
            i = s * patches_per_slide + p
            child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            spec = GenSpec(canvas=canvas, count_ranges=ranges, seed=child)
            records.append(generate_patch(
                spec, patch_id=f"patch{i:05d}", slide_id=f"slide{s:04d}", templates=templates))
    return records


# ---------------------------------------------------------------------------
# persistence: manifest.jsonl + 8-bit PNGs

def _save_png(path: Path, array: np.ndarray, mode: str):
    Image.fromarray(array, mode=mode).save(path)


def persist_dataset(splits: DatasetSplits, directory) -> Path:
    """Write manifest.jsonl plus images/, masks/ and instances/ PNGs.
    Returns the manifest path."""
    root = Path(directory)
    for sub in ("images", "masks", "instances"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for split_name in ("train", "val", "test"):
            for rec in splits.part(split_name):
                if rec.instances.instances.max(initial=0) > 255:
                    raise ValueError(f"patch {rec.patch_id}: more than 255 instances")
                img_rel = f"images/{rec.patch_id}.png"
                mask_rel = f"masks/{rec.patch_id}.png"
                inst_rel = f"instances/{rec.patch_id}.png"
                _save_png(root / img_rel,
                          np.round(rec.image.pixels * 255.0).astype(np.uint8), "RGB")
                _save_png(root / mask_rel, rec.gt.categories.astype(np.uint8), "L")
                _save_png(root / inst_rel, rec.instances.instances.astype(np.uint8), "L")
                fh.write(json.dumps({
                    "patch_id": rec.patch_id,
                    "slide_id": rec.slide_id,
                    "split": split_name,
                    "image": img_rel,
                    "mask": mask_rel,
                    "instances": inst_rel,
                    "instance_categories": {str(k): v for k, v in
                                            sorted(rec.instances.instance_category.items())},
                    "qa": [{"task": qa.task, "question": qa.question,
                            "answer_template": qa.answer_template,
                            "slot_categories": qa.slot_categories} for qa in rec.qa],
                }) + "\n")
    return manifest


def load_dataset(directory) -> DatasetSplits:
    """Inverse of persist_dataset. Malformed manifest lines fail with the
    file name and line number; missing images fail with the patch id."""
    root = Path(directory)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise ValueError(f"no manifest.jsonl under {root}")
    parts: dict[str, list[PatchRecord]] = {"train": [], "val": [], "test": []}
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{manifest}:{lineno}: malformed manifest line ({e.msg})") from e
            pid = obj.get("patch_id", f"<line {lineno}>")
            for key in ("image", "mask", "instances"):
                if not (root / obj[key]).exists():
                    raise ValueError(f"patch {pid}: missing {key} file {obj[key]}")
            pixels = np.asarray(Image.open(root / obj["image"]).convert("RGB"),
                                dtype=np.float32) / 255.0
            gt = np.asarray(Image.open(root / obj["mask"]).convert("L"), dtype=np.uint8)
            inst = np.asarray(Image.open(root / obj["instances"]).convert("L"), dtype=np.uint8)
            rec = PatchRecord(
                patch_id=pid,
                slide_id=obj["slide_id"],
                image=ImagePatch(pixels),
                gt=CategoryMap(gt),
                instances=InstanceMap(inst, {int(k): int(v) for k, v in
                                             obj["instance_categories"].items()}),
                qa=[QARecord(q["task"], q["question"], q["answer_template"],
                             list(q["slot_categories"])) for q in obj["qa"]],
            )
            split = obj.get("split")
            if split not in parts:
                raise ValueError(f"{manifest}:{lineno}: unknown split {split!r}")
            parts[split].append(rec)
    return DatasetSplits(**parts)
