"""Fine-tuning regimes, the training loop and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, FormatError, TrainingDivergence
from .model_core import (
    PARAM_GROUPS,
    REGIME_GROUPS,
    ClipCapModel,
    ModelConfig,
    Regime,
    build_model,
    group_of,
)
from .decoder import compute_loss
from .pipeline import EncodedSample, InputVariant, build_prefixes

__all__ = [
    "Regime",
    "TrainConfig",
    "TrainResult",
    "select_trainable",
    "num_steps",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
]


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    stage: str = "finetune"  # "pretrain" or "finetune"; picks the learning rate
    lr_pretrain: float = 2e-5
    lr_finetune: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rates must be positive and weight decay non-negative")
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigurationError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")

    @property
    def lr(self) -> float:
        return self.lr_pretrain if self.stage == "pretrain" else self.lr_finetune

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def select_trainable(model: ClipCapModel, regime: Regime | str) -> dict[str, list[str]]:
    """Set ``requires_grad`` per the regime; returns {"trainable": names, "frozen": names}."""
    regime = Regime(regime)
    if regime is Regime.ADAPTER_ONLY and not model.has_adapters:
        raise ConfigurationError("adapter_only regime needs a model with adapters")
    active = set(REGIME_GROUPS[regime])
    part: dict[str, list[str]] = {"trainable": [], "frozen": []}
    for name, p in model.named_parameters():
        on = group_of(name) in active
        p.requires_grad_(on)
        part["trainable" if on else "frozen"].append(name)
    return part


def num_steps(n_samples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_samples / batch_size)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0


def train(
    model: ClipCapModel,
    samples: Sequence[EncodedSample],
    config: TrainConfig,
    regime: Regime | str,
    variant: InputVariant = InputVariant(),
    on_epoch_end: Callable[[int, ClipCapModel], None] | None = None,
) -> TrainResult:
    """AdamW over the regime's trainable groups, one shuffled pass per epoch, no drop-last."""
    if not samples:
        raise ConfigurationError("training set is empty")
    part = select_trainable(model, regime)
    params = [p for n, p in model.named_parameters() if n in set(part["trainable"])]
    opt = torch.optim.AdamW(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    result = TrainResult()
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(samples), generator=gen).tolist()
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            prefixes = build_prefixes(model, batch, variant)
            loss = compute_loss(model.decoder, prefixes, [s.answer_ids for s in batch])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(result.steps, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.losses.append(value)
            result.steps += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    model.eval()
    return result


# --- checkpoints -------------------------------------------------------------------
#
# <dir>/manifest.json holds the model config, regime and per-group tensor names;
# <dir>/<group>.bin holds that group's tensors back to back:
#   b"GVTB", u32 count, then per tensor: u32 ndim, u32 dims[ndim], float32 LE data.

BLOB_MAGIC = b"GVTB"


def _write_blob(path: Path, tensors: Sequence[torch.Tensor]) -> None:
    with path.open("wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<I", len(tensors)))
        for t in tensors:
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_blob(path: Path) -> list[np.ndarray]:
    raw = path.read_bytes()
    if raw[:4] != BLOB_MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a tensor blob")
    (count,) = struct.unpack_from("<I", raw, 4)
    off, out = 8, []
    for _ in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated")
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = 4 * int(np.prod(shape, dtype=np.int64))
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated")
        out.append(np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy())
        off += size
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return out


def save_checkpoint(
    model: ClipCapModel,
    path: str | Path,
    regime: Regime | str | None = None,
    train_config: TrainConfig | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[dict]] = {}
    for g, named in model.parameter_groups().items():
        if not named:
            continue
        groups[g] = [{"name": n, "shape": list(p.shape)} for n, p in named]
        _write_blob(path / f"{g}.bin", [p for _, p in named])
    manifest = {
        "format": "gazevqa-checkpoint/1",
        "config": model.config.to_json(),
        "regime": Regime(regime).value if regime is not None else None,
        "train_config": train_config.to_json() if train_config else None,
        "groups": groups,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))


def load_into(model: ClipCapModel, path: str | Path) -> list[str]:
    """Copy every group stored at ``path`` into ``model``; returns the groups loaded.

    Groups absent from the checkpoint keep their current values, so a baseline
    checkpoint loaded into an adapter model leaves the adapters at identity.
    """
    path = Path(path)
    manifest = read_manifest(path)
    params = dict(model.named_parameters())
    loaded = []
    for g, entries in manifest["groups"].items():
        if g not in PARAM_GROUPS:
            raise FormatError(f"unknown parameter group {g!r}")
        arrays = _read_blob(path / f"{g}.bin")
        if len(arrays) != len(entries):
            raise FormatError(f"group {g}: manifest lists {len(entries)} tensors, blob has {len(arrays)}")
        for entry, arr in zip(entries, arrays):
            name = entry["name"]
            if name not in params:
                raise ConfigurationError(f"checkpoint tensor {name!r} has no counterpart in the model")
            p = params[name]
            if tuple(p.shape) != arr.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr).to(p.dtype))
        loaded.append(g)
    return loaded


def load_checkpoint(path: str | Path, **overrides) -> ClipCapModel:
    """Rebuild the model recorded at ``path``; ``overrides`` patch its config (e.g. adapters=True)."""
    manifest = read_manifest(path)
    cfg = dict(manifest["config"])
    cfg.update(overrides)
    model = build_model(ModelConfig.from_json(cfg))
    load_into(model, path)
    model.eval()
    return model
