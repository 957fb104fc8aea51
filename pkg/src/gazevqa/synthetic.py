"""Seeded synthetic gaze-QA corpora for desk-scale runs and tests.

Each scene is a small gray canvas with a few solid-coloured squares. A "speaker"
head sits in one corner and looks at one square; questions ask for the colour of
whatever is being looked at without naming it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import BoundingBox, GazeAnnotation, GazeVQASample, Point2D, save_dataset
from .gaze_roi import Heatmap, save_heatmap

COLORS = {
    "赤": (220, 30, 30),
    "青": (30, 60, 220),
    "緑": (30, 170, 40),
    "黄": (235, 215, 30),
    "白": (245, 245, 245),
    "黒": (15, 15, 15),
}
GAZE_QUESTIONS = (
    "見ているものは何色ですか",
    "あれは何色をしていますか",
    "それって何色なのですか",
)
CAPTION_QUESTION = "この画像の物は何色ですか"
CATEGORIES = {"cup": "コップ", "book": "本", "vase": "花瓶", "bottle": "瓶", "clock": "時計"}
HEATMAP_STRIDE = 4


def _place_squares(rng: np.random.Generator, size: int, count: int, head: BoundingBox) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    while len(boxes) < count:
        side = int(rng.integers(size // 5, size // 3))
        x, y = (int(v) for v in rng.integers(0, size - side, size=2))
        b = BoundingBox(x, y, side, side)
        if all(_disjoint(b, o) for o in boxes + [head]):
            boxes.append(b)
    return boxes


def _disjoint(a: BoundingBox, b: BoundingBox, margin: int = 1) -> bool:
    return (
        a.x + a.w + margin <= b.x
        or b.x + b.w + margin <= a.x
        or a.y + a.h + margin <= b.y
        or b.y + b.h + margin <= a.y
    )


def _render(rng: np.random.Generator, size: int, boxes: list[BoundingBox], colors: list[str]) -> np.ndarray:
    img = np.full((size, size, 3), 128, dtype=np.int16)
    img += rng.integers(-6, 7, size=img.shape, dtype=np.int16)
    for b, c in zip(boxes, colors):
        img[int(b.y) : int(b.y + b.h), int(b.x) : int(b.x + b.w)] = COLORS[c]
    return np.clip(img, 0, 255).astype(np.uint8)


def _heatmap(target: BoundingBox, size: int, miss: bool) -> Heatmap:
    """Coarse score grid peaking on the target; ``miss`` yields an all-negative map."""
    g = size // HEATMAP_STRIDE
    ys, xs = np.mgrid[0:g, 0:g].astype(np.float32) * HEATMAP_STRIDE + HEATMAP_STRIDE / 2
    cx, cy = target.x + target.w / 2, target.y + target.h / 2
    sigma = max(target.w, target.h) / 2
    v = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2)) - 0.5
    if miss:
        v = -np.abs(v) - 0.1
    return Heatmap(v.astype(np.float32))


def make_corpus(
    out_dir: str | Path,
    n: int,
    seed: int = 0,
    split: str = "train",
    size: int = 32,
    objects: int = 3,
    caption_style: bool = False,
    miss_rate: float = 0.0,
    filename: str = "dataset.jsonl",
) -> Path:
    """Write ``n`` scenes (PNG + heatmap + JSONL record) under ``out_dir``; returns the JSONL path.

    ``caption_style`` scenes hold a single square, so the question is unambiguous;
    they stand in for the caption/VQA pre-training corpora.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(COLORS)
    samples = []
    for i in range(n):
        sid = f"{split}-{seed}-{i:05d}"
        head = BoundingBox(0, 0, 4, 4) if i % 2 == 0 else BoundingBox(size - 4, 0, 4, 4)
        k = 1 if caption_style else objects
        boxes = _place_squares(rng, size, k, head)
        colors = list(rng.choice(names, size=k, replace=False))
        target = int(rng.integers(0, k))
        img = _render(rng, size, boxes, colors)
        rel = f"images/{sid}.png"
        Image.fromarray(img).save(out / rel)
        save_heatmap(_heatmap(boxes[target], size, rng.random() < miss_rate), out / f"images/{sid}.gvhm")
        answer = colors[target]
        answers = (answer,) if split != "test" else tuple([answer] * 7 + [answer + "色"] * 2 + [names[(names.index(answer) + 1) % len(names)]])
        tb = boxes[target]
        pool = (CAPTION_QUESTION,) + GAZE_QUESTIONS if caption_style else GAZE_QUESTIONS
        question = pool[int(rng.integers(0, len(pool)))]
        category = list(CATEGORIES)[i % len(CATEGORIES)]
        samples.append(
            GazeVQASample(
                sample_id=sid,
                image_ref=rel,
                image_size=(size, size),
                gaze=GazeAnnotation(
                    source=Point2D(head.x + 2, head.y + 2),
                    targets=(Point2D(tb.x + tb.w / 2, tb.y + tb.h / 2),),
                    head_box=head,
                ),
                gt_roi=tb,
                ambiguous_question=question,
                clarified_question=f"{CATEGORIES[category]}は何色ですか",
                answers=answers,
                category=category,
                split=split,
            )
        )
    path = out / filename
    save_dataset(samples, path)
    return path


def corpus_alphabet() -> str:
    """Every character the synthetic corpora can emit, plus the default prompts."""
    text = "".join(COLORS) + "色" + "".join(GAZE_QUESTIONS) + CAPTION_QUESTION + "Question:Answer:"
    return "".join(sorted(set(text)))


def write_manifest(out_dir: str | Path, declared: dict[str, int], notes: str = "synthetic") -> Path:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps({"declared_split_sizes": declared, "notes": notes}, ensure_ascii=False, indent=2))
    return path
