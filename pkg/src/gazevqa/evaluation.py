"""VQA accuracy, embedding similarity, run averaging, per-type breakdown and input ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .dataset import Dataset, QuestionType
from .decoder import GenerationConfig, generate
from .errors import ValidationError
from .model_core import ClipCapModel
from .pipeline import EncodedSample, InputVariant, build_prefixes, encode_dataset, parse_variant

_TRAILING_PUNCT = "。．."


def normalize_answer(text: str) -> str:
    s = unicodedata.normalize("NFKC", text).strip()
    # NFKC already folds "．" to "."; the full set is kept for clarity.
    while s and s[-1] in _TRAILING_PUNCT:
        s = s[:-1].rstrip()
    return s


def vqa_accuracy(prediction: str, golds: Sequence[str]) -> float:
    """min(#matching golds / 3, 1); the test protocol supplies ten golds."""
    if not golds:
        raise ValidationError("gold answer set is empty")
    pred = normalize_answer(prediction)
    matches = sum(normalize_answer(g) == pred for g in golds)
    return min(matches / 3.0, 1.0)


# --- sentence embedders ------------------------------------------------------------


class SentenceEmbedder:
    dim: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashNgramEmbedder(SentenceEmbedder):
    """Signed feature hashing of character n-grams; deterministic for a given seed."""

    def __init__(self, dim: int = 256, ngram: tuple[int, ...] = (1, 2, 3), seed: int = 0):
        self.dim = dim
        self.ngram = ngram
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        s = normalize_answer(text)
        v = np.zeros(self.dim)
        for n in self.ngram:
            for i in range(len(s) - n + 1):
                digest = hashlib.blake2b(f"{self.seed}\x00{s[i:i + n]}".encode(), digest_size=8).digest()
                h = int.from_bytes(digest, "little")
                v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return v


class HFSentenceEmbedder(SentenceEmbedder):
    """Mean-pooled last hidden states of a Hugging Face encoder (e.g. multilingual BERT)."""

    def __init__(self, model, tokenizer):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.dim = model.config.hidden_size

    @classmethod
    def from_pretrained(cls, name: str = "bert-base-multilingual-cased") -> "HFSentenceEmbedder":
        from transformers import AutoModel, AutoTokenizer

        return cls(AutoModel.from_pretrained(name), AutoTokenizer.from_pretrained(name))

    @torch.no_grad()
    def embed(self, text: str) -> np.ndarray:
        enc = self.tokenizer(text, return_tensors="pt")
        hidden = self.model(**enc).last_hidden_state[0]
        mask = enc["attention_mask"][0].unsqueeze(-1).to(hidden.dtype)
        return ((hidden * mask).sum(0) / mask.sum()).double().numpy()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


def similarity_score(prediction: str, golds: Sequence[str], embedder: SentenceEmbedder) -> float:
    """Mean cosine similarity between the prediction and each gold answer, in [-1, 1]."""
    if not golds:
        raise ValidationError("gold answer set is empty")
    p = embedder.embed(prediction)
    return float(np.mean([cosine(p, embedder.embed(g)) for g in golds]))


# --- reports ---------------------------------------------------------------------


@dataclass
class SampleScore:
    sample_id: str
    qtype: QuestionType
    predictions: tuple[str, ...]  # one per run
    acc: float  # in [0, 1], averaged over runs
    bs: float  # in [-1, 1], averaged over runs


@dataclass
class EvalReport:
    """Scores are stored on the 0-100 scale; ``per_sample`` keeps raw [0, 1] values."""

    acc: float
    bs: float
    per_type: dict[QuestionType, tuple[float, float, int]]
    per_sample: list[SampleScore]
    variant: str = "full"
    protocol: bool = True  # every sample had the ten-answer test protocol
    runs: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "protocol": self.protocol,
            "acc": self.acc,
            "bs": self.bs,
            "summary": {"acc": round(self.acc, 2), "bs": round(self.bs, 2)},
            "runs": self.runs,
            "per_type": [
                {"type": t.major, "subtype": t.minor, "count": c, "acc": a, "bs": b}
                for t, (a, b, c) in sorted(self.per_type.items())
            ],
            "per_sample": [
                {
                    "sample_id": s.sample_id,
                    "type": str(s.qtype),
                    "predictions": list(s.predictions),
                    "acc": s.acc,
                    "bs": s.bs,
                }
                for s in self.per_sample
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False, sort_keys=False) + "\n"

    def per_type_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["type", "subtype", "count", "acc", "bs"])
        for t, (a, b, c) in sorted(self.per_type.items()):
            w.writerow([t.major, t.minor, c, f"{a:.2f}", f"{b:.2f}"])
        return buf.getvalue()


def build_report(per_sample: list[SampleScore], variant: str = "full", protocol: bool = True) -> EvalReport:
    if not per_sample:
        raise ValidationError("cannot report on an empty test set")
    by_type: dict[QuestionType, list[SampleScore]] = {}
    for s in per_sample:
        by_type.setdefault(s.qtype, []).append(s)
    per_type = {
        t: (100.0 * float(np.mean([s.acc for s in ss])), 100.0 * float(np.mean([s.bs for s in ss])), len(ss))
        for t, ss in by_type.items()
    }
    return EvalReport(
        acc=100.0 * float(np.mean([s.acc for s in per_sample])),
        bs=100.0 * float(np.mean([s.bs for s in per_sample])),
        per_type=per_type,
        per_sample=per_sample,
        variant=variant,
        protocol=protocol,
    )


def score_predictions(
    samples: Sequence[EncodedSample],
    predictions: Sequence[str],
    embedder: SentenceEmbedder,
    variant: str = "full",
) -> EvalReport:
    scores = []
    for s, pred in zip(samples, predictions, strict=True):
        try:
            bs = similarity_score(pred, s.golds, embedder)
        except ValidationError:
            # An empty generation has no direction; count it as orthogonal to every gold.
            if normalize_answer(pred):
                raise
            bs = 0.0
        scores.append(SampleScore(s.sample_id, s.qtype, (pred,), vqa_accuracy(pred, s.golds), bs))
    protocol = all(len(s.golds) == 10 for s in samples)
    return build_report(scores, variant, protocol)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean over runs of per-sample scores; runs must cover the same samples in the same order."""
    if not reports:
        raise ValidationError("no run reports to average")
    ids = [s.sample_id for s in reports[0].per_sample]
    for r in reports[1:]:
        if [s.sample_id for s in r.per_sample] != ids:
            raise ValidationError("run reports cover different samples")
    merged = []
    for i, first in enumerate(reports[0].per_sample):
        rows = [r.per_sample[i] for r in reports]
        merged.append(
            SampleScore(
                first.sample_id,
                first.qtype,
                tuple(p for row in rows for p in row.predictions),
                float(np.mean([row.acc for row in rows])),
                float(np.mean([row.bs for row in rows])),
            )
        )
    out = build_report(merged, reports[0].variant, all(r.protocol for r in reports))
    out.runs = [{"acc": r.acc, "bs": r.bs} for r in reports]
    return out


# --- model evaluation ------------------------------------------------------------


def predict(
    model: ClipCapModel,
    samples: Sequence[EncodedSample],
    gen_config: GenerationConfig,
    variant: InputVariant = InputVariant(),
    jobs: int = 1,
) -> list[str]:
    model.eval()
    with torch.no_grad():
        prefixes = build_prefixes(model, list(samples), variant) if samples else []

    def one(prefix: torch.Tensor) -> str:
        return model.tokenizer.decode(generate(model.decoder, prefix, gen_config))

    if jobs <= 1:
        return [one(p) for p in prefixes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, prefixes))


def evaluate(
    models: ClipCapModel | Sequence[ClipCapModel],
    testset: Dataset,
    embedder: SentenceEmbedder | None = None,
    gen_config: GenerationConfig | None = None,
    variant: InputVariant | str = InputVariant(),
    jobs: int = 1,
) -> EvalReport:
    """Score one model, or average the reports of several independently trained runs."""
    if isinstance(models, ClipCapModel):
        models = [models]
    if not models:
        raise ValidationError("no trained models to evaluate")
    if isinstance(variant, str):
        variant = parse_variant(variant)
    embedder = embedder or HashNgramEmbedder()
    reports = []
    for model in models:
        cfg = gen_config or GenerationConfig(eos_id=model.eos_id)
        encoded = encode_dataset(model, testset, variant)
        preds = predict(model, encoded, cfg, variant, jobs)
        reports.append(score_predictions(encoded, preds, embedder, variant.name))
    return average_reports(reports)


def ablate(
    models: ClipCapModel | Sequence[ClipCapModel],
    testset: Dataset,
    variant: str,
    embedder: SentenceEmbedder | None = None,
    gen_config: GenerationConfig | None = None,
    jobs: int = 1,
) -> EvalReport:
    return evaluate(models, testset, embedder, gen_config, parse_variant(variant), jobs)

