"""Turn dataset samples into model-ready features (images, RoIs, token ids)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import BoundingBox, Dataset, GazeVQASample, QuestionType, classify_question
from .decoder import assemble_input
from .errors import ValidationError
from .gaze_roi import crop, heatmap_to_roi, integer_box, load_heatmap
from .model_core import ClipCapModel


@dataclass(frozen=True)
class InputVariant:
    """Which inputs reach the model. The default feeds everything."""

    name: str = "full"
    drop_image_series: bool = False
    drop_question: bool = False
    image_roi: str | None = None  # replace I by its crop from "estimated" or "gt" RoI


_ROI_VARIANT = re.compile(r"^image_is_roi[:(](estimated|gt)\)?$")


def parse_variant(name: str) -> InputVariant:
    if name in ("full", "none"):
        return InputVariant()
    if name == "drop_image_series":
        return InputVariant(name, drop_image_series=True)
    if name == "drop_question":
        return InputVariant(name, drop_question=True)
    m = _ROI_VARIANT.match(name)
    if m:
        return InputVariant(f"image_is_roi:{m.group(1)}", image_roi=m.group(1))
    raise ValidationError(
        f"unknown ablation variant {name!r}; expected drop_image_series, drop_question, "
        "image_is_roi:estimated or image_is_roi:gt"
    )


@dataclass
class EncodedSample:
    sample_id: str
    question: str
    qtype: QuestionType
    question_ids: list[int]
    answer_ids: list[int]  # first gold answer followed by eos
    golds: tuple[str, ...]
    image_feat: torch.Tensor
    roi_feat: torch.Tensor | None


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def heatmap_path(dataset: Dataset, sample: GazeVQASample) -> Path:
    if sample.heatmap_ref:
        return dataset.resolve(sample.heatmap_ref)
    return dataset.resolve(str(Path(sample.image_ref).with_suffix(".gvhm")))


def roi_box(dataset: Dataset, sample: GazeVQASample, source: str) -> BoundingBox:
    """RoI for ``source``: the whole image, the box estimated from the heatmap, or the gold box."""
    W, H = sample.image_size
    if source == "image":
        return BoundingBox.full(W, H)
    if source == "gt":
        return integer_box(sample.gt_roi, (W, H))
    if source == "estimated":
        path = heatmap_path(dataset, sample)
        if not path.exists():
            raise ValidationError(f"heatmap not found at {path}", sample.sample_id, "heatmap")
        return heatmap_to_roi(load_heatmap(path), (W, H))
    raise ValidationError(f"unknown RoI source {source!r}")


def encode_dataset(
    model: ClipCapModel, dataset: Dataset, variant: InputVariant = InputVariant()
) -> list[EncodedSample]:
    tok = model.tokenizer
    out = []
    for sample in dataset:
        image = load_image(dataset.resolve(sample.image_ref))
        if image.shape[1] != sample.image_size[0] or image.shape[0] != sample.image_size[1]:
            raise ValidationError(
                f"image is {image.shape[1]}x{image.shape[0]}, record says {sample.image_size}",
                sample.sample_id,
                "image_size",
            )
        main = image
        if variant.image_roi is not None:
            main = crop(image, roi_box(dataset, sample, variant.image_roi))
        images = [main]
        if model.has_adapters:
            images.append(crop(image, roi_box(dataset, sample, model.config.adapter_source)))
        feats = model.encode_images(images)
        out.append(
            EncodedSample(
                sample_id=sample.sample_id,
                question=sample.ambiguous_question,
                qtype=classify_question(sample.ambiguous_question),
                question_ids=tok.encode(sample.ambiguous_question),
                answer_ids=tok.encode(sample.answers[0]) + [tok.eos_id],
                golds=sample.answers,
                image_feat=feats[0],
                roi_feat=feats[1] if model.has_adapters else None,
            )
        )
    return out


def build_prefixes(
    model: ClipCapModel, batch: list[EncodedSample], variant: InputVariant = InputVariant()
) -> list[torch.Tensor]:
    """Assembled decoder inputs for a batch, honouring the ablation flags."""
    image_feats = torch.stack([s.image_feat for s in batch])
    roi_feats = torch.stack([s.roi_feat for s in batch]) if model.has_adapters else None
    r = None if variant.drop_image_series else model.image_prefix(image_feats, roi_feats)
    prefixes = []
    for i, s in enumerate(batch):
        q = [] if variant.drop_question else s.question_ids
        prefixes.append(assemble_input(None if r is None else r[i], q, model.layout, model.decoder))
    return prefixes
