"""GazeVQA records: schema, JSONL loading, splitting, question typology and corpus statistics."""

from __future__ import annotations

import json
import random
import unicodedata
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import ConfigurationError, ParseError, ValidationError

SPLITS = ("train", "valid", "test")
TEST_ANSWER_COUNT = 10
MIN_QUESTION_CHARS = 10

COCO_CATEGORIES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
)


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (self.x >= 0 and self.y >= 0):
            raise ValidationError(f"point coordinates must be non-negative, got ({self.x}, {self.y})")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner plus extent, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box extent must be positive, got w={self.w}, h={self.h}")
        if not (self.x >= 0 and self.y >= 0):
            raise ValidationError(f"box origin must be non-negative, got ({self.x}, {self.y})")

    def contains(self, p: Point2D) -> bool:
        return self.x <= p.x <= self.x + self.w and self.y <= p.y <= self.y + self.h

    def within(self, width: float, height: float) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def full(cls, width: int, height: int) -> "BoundingBox":
        return cls(0, 0, width, height)


@dataclass(frozen=True)
class GazeAnnotation:
    source: Point2D
    targets: tuple[Point2D, ...]
    head_box: BoundingBox


@dataclass(frozen=True)
class GazeVQASample:
    sample_id: str
    image_ref: str
    image_size: tuple[int, int]
    gaze: GazeAnnotation
    gt_roi: BoundingBox
    ambiguous_question: str
    answers: tuple[str, ...]
    category: str
    split: str
    clarified_question: str | None = None
    heatmap_ref: str | None = None

    @property
    def question(self) -> str:
        return self.ambiguous_question

    def to_json(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "image_size": list(self.image_size),
            "gaze": {
                "source": [self.gaze.source.x, self.gaze.source.y],
                "targets": [[t.x, t.y] for t in self.gaze.targets],
                "head_box": self.gaze.head_box.as_list(),
            },
            "gt_roi": self.gt_roi.as_list(),
            "question": self.ambiguous_question,
            "clarified_question": self.clarified_question,
            "answers": list(self.answers),
            "category": self.category,
            "split": self.split,
        }
        if self.heatmap_ref is not None:
            d["heatmap"] = self.heatmap_ref
        return d


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of samples, optionally rooted at a directory for image lookup."""

    samples: tuple[GazeVQASample, ...]
    root: Path | None = None
    manifest: dict | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[GazeVQASample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> GazeVQASample:
        return self.samples[i]

    def by_split(self, split: str) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.split == split), self.root, self.manifest)

    def resolve(self, ref: str) -> Path:
        return (self.root or Path(".")) / ref


def validate_sample(sample: GazeVQASample) -> None:
    """Raise ValidationError if `sample` breaks any record-level invariant."""
    sid = sample.sample_id
    if not sid:
        raise ValidationError("sample_id must be nonempty", sid, "sample_id")
    W, H = sample.image_size
    if W <= 0 or H <= 0:
        raise ValidationError("image_size must be positive", sid, "image_size")
    if sample.split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}", sid, "split")
    if not sample.gaze.targets:
        raise ValidationError("at least one gaze target required", sid, "gaze.targets")
    if not sample.gaze.head_box.contains(sample.gaze.source):
        raise ValidationError("head_box must contain the gaze source", sid, "gaze.head_box")
    if not sample.gaze.head_box.within(W, H):
        raise ValidationError("head_box exceeds image bounds", sid, "gaze.head_box")
    if not sample.gt_roi.within(W, H):
        raise ValidationError("gt_roi exceeds image bounds", sid, "gt_roi")
    if len(sample.ambiguous_question) < MIN_QUESTION_CHARS:
        raise ValidationError(
            f"question must be at least {MIN_QUESTION_CHARS} characters", sid, "question"
        )
    if not sample.answers:
        raise ValidationError("answers must be nonempty", sid, "answers")
    if sample.split == "test" and len(sample.answers) != TEST_ANSWER_COUNT:
        raise ValidationError(
            f"test samples require {TEST_ANSWER_COUNT} answers (got {len(sample.answers)})",
            sid,
            "answers",
        )
    if sample.split != "test" and len(sample.answers) != 1:
        raise ValidationError(
            f"{sample.split} samples require exactly 1 answer (got {len(sample.answers)})",
            sid,
            "answers",
        )
    if sample.category not in COCO_CATEGORIES:
        raise ValidationError(f"unknown COCO category {sample.category!r}", sid, "category")


def _point(v, sid: str, name: str) -> Point2D:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ValidationError("expected [x, y]", sid, name)
    try:
        return Point2D(float(v[0]), float(v[1]))
    except ValidationError as e:
        raise ValidationError(str(e), sid, name) from None


def _box(v, sid: str, name: str) -> BoundingBox:
    if not (isinstance(v, (list, tuple)) and len(v) == 4):
        raise ValidationError("expected [x, y, w, h]", sid, name)
    try:
        return BoundingBox(*(float(c) for c in v))
    except ValidationError as e:
        raise ValidationError(str(e), sid, name) from None


_REQUIRED = ("sample_id", "image", "image_size", "gaze", "gt_roi", "question", "answers", "category", "split")


def sample_from_json(d: dict) -> GazeVQASample:
    """Build a sample from one decoded JSONL object (structure checks only)."""
    if not isinstance(d, dict):
        raise ValidationError("record must be a JSON object")
    sid = str(d.get("sample_id", "<missing>"))
    for key in _REQUIRED:
        if key not in d:
            raise ValidationError("missing required field", sid, key)
    gaze = d["gaze"]
    if not isinstance(gaze, dict):
        raise ValidationError("expected an object", sid, "gaze")
    for key in ("source", "targets", "head_box"):
        if key not in gaze:
            raise ValidationError("missing required field", sid, f"gaze.{key}")
    size = d["image_size"]
    if not (isinstance(size, (list, tuple)) and len(size) == 2):
        raise ValidationError("expected [W, H]", sid, "image_size")
    answers = d["answers"]
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise ValidationError("expected a list of strings", sid, "answers")
    if not isinstance(d["question"], str):
        raise ValidationError("expected a string", sid, "question")
    targets = gaze["targets"]
    if not isinstance(targets, list):
        raise ValidationError("expected a list of points", sid, "gaze.targets")
    return GazeVQASample(
        sample_id=sid,
        image_ref=str(d["image"]),
        image_size=(int(size[0]), int(size[1])),
        gaze=GazeAnnotation(
            source=_point(gaze["source"], sid, "gaze.source"),
            targets=tuple(_point(t, sid, "gaze.targets") for t in targets),
            head_box=_box(gaze["head_box"], sid, "gaze.head_box"),
        ),
        gt_roi=_box(d["gt_roi"], sid, "gt_roi"),
        ambiguous_question=d["question"],
        clarified_question=d.get("clarified_question"),
        answers=tuple(answers),
        category=str(d["category"]),
        split=str(d["split"]),
        heatmap_ref=d.get("heatmap"),
    )


def load_dataset(path: str | Path, manifest_path: str | Path | None = None) -> Dataset:
    """Read a JSONL dataset; every returned sample has passed `validate_sample`.

    If ``manifest_path`` is omitted, a sibling ``manifest.json`` is picked up when present.
    """
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(e.msg, lineno) from None
            sample = sample_from_json(record)
            validate_sample(sample)
            samples.append(sample)
    if manifest_path is None and (path.parent / "manifest.json").exists():
        manifest_path = path.parent / "manifest.json"
    manifest = load_manifest(manifest_path) if manifest_path else None
    return Dataset(tuple(samples), root=path.parent, manifest=manifest)


def save_dataset(samples: Iterable[GazeVQASample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def load_manifest(path: str | Path) -> dict:
    """Dataset manifest: declared split sizes and provenance notes, stored verbatim."""
    with Path(path).open(encoding="utf-8") as fh:
        manifest = json.load(fh)
    sizes = manifest.get("declared_split_sizes", {})
    for k, v in sizes.items():
        if k not in SPLITS or not isinstance(v, int) or v < 0:
            raise ValidationError(f"bad declared split size {k}={v!r}", field="declared_split_sizes")
    return manifest


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor the valid/test shares and give the remainder to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    fr = [Fraction(repr(float(r))) for r in ratios]
    n_valid = int(n * fr[1])
    n_test = int(n * fr[2])
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(
    dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded random partition into (train, valid, test)."""
    n_train, n_valid, _ = split_sizes(len(dataset), ratios)
    order = list(range(len(dataset)))
    random.Random(seed).shuffle(order)
    parts = (order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :])
    return tuple(
        Dataset(tuple(dataset.samples[i] for i in sorted(idx)), dataset.root, dataset.manifest)
        for idx in parts
    )


# --- question typology -----------------------------------------------------

MAJOR_TYPES = ("What", "Where", "How", "Which", "Others")
WHAT_SUBTYPES = ("is_are_do_does", "color", "condition", "kind", "shape", "others")

# (major, keywords) checked in this order; first hit wins.
_MAJOR_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Which", ("どちら",)),
    ("Where", ("どこ",)),
    ("How", ("どれ", "いくつ")),
    ("Others", ("いつ", "だれ", "誰", "なぜ")),
    ("What", ("なに", "何", "どの", "どんな")),
)
_WHAT_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("color", ("色",)),
    ("condition", ("状態", "様子")),
    ("kind", ("種類",)),
    ("shape", ("形",)),
)
_COPULA_FORMS = ("です", "ます", "する")


@dataclass(frozen=True, order=True)
class QuestionType:
    major: str
    minor: str = "none"

    def __post_init__(self) -> None:
        if self.major not in MAJOR_TYPES:
            raise ValidationError(f"unknown major type {self.major!r}")
        if self.major == "What":
            if self.minor not in WHAT_SUBTYPES:
                raise ValidationError(f"unknown What subtype {self.minor!r}")
        elif self.minor != "none":
            raise ValidationError("only What questions carry a subtype")

    def __str__(self) -> str:
        return self.major if self.minor == "none" else f"{self.major}/{self.minor}"


def classify_question(question: str) -> QuestionType:
    for major, keywords in _MAJOR_RULES:
        if any(k in question for k in keywords):
            break
    else:
        return QuestionType("Others")
    if major != "What":
        return QuestionType(major)
    for minor, keywords in _WHAT_RULES:
        if any(k in question for k in keywords):
            return QuestionType("What", minor)
    if any(f in question for f in _COPULA_FORMS):
        return QuestionType("What", "is_are_do_does")
    return QuestionType("What", "others")


# --- statistics ------------------------------------------------------------


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFKC", text).strip()


@dataclass(frozen=True)
class DatasetStats:
    n_images: int
    n_qa_pairs: int
    n_unique_questions: int
    n_unique_answers: int
    avg_question_length: float
    avg_answer_length: float

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_qa_pairs": self.n_qa_pairs,
            "n_unique_questions": self.n_unique_questions,
            "n_unique_answers": self.n_unique_answers,
            "avg_question_length": self.avg_question_length,
            "avg_answer_length": self.avg_answer_length,
        }


def compute_statistics(dataset: Iterable[GazeVQASample]) -> DatasetStats:
    """Corpus counts in the style of the GazeVQA statistics table.

    Each QA pair contributes its first answer (the originally collected one);
    test-time extra answers are not counted.
    """
    samples = list(dataset)
    if not samples:
        raise ValidationError("cannot compute statistics of an empty dataset")
    questions = [s.ambiguous_question for s in samples]
    answers = [s.answers[0] for s in samples]
    n = len(samples)
    return DatasetStats(
        n_images=len({s.image_ref for s in samples}),
        n_qa_pairs=n,
        n_unique_questions=len({normalize_text(q) for q in questions}),
        n_unique_answers=len({normalize_text(a) for a in answers}),
        avg_question_length=sum(len(q) for q in questions) / n,
        avg_answer_length=sum(len(a) for a in answers) / n,
    )


def typology_counts(dataset: Iterable[GazeVQASample]) -> dict[QuestionType, int]:
    counts: dict[QuestionType, int] = {}
    for s in dataset:
        t = classify_question(s.ambiguous_question)
        counts[t] = counts.get(t, 0) + 1
    return dict(sorted(counts.items()))


def major_type_counts(dataset: Iterable[GazeVQASample]) -> dict[str, int]:
    counts = {m: 0 for m in MAJOR_TYPES}
    for t, c in typology_counts(dataset).items():
        counts[t.major] += c
    return counts
