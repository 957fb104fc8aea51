"""Image-series encoder, mapping network with FiLM adapters, and the assembled model.

Shapes: an image series is (n, d_e) per image, (B, n, d_e) batched, where d_e is the
decoder's token-embedding width.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .decoder import CharTokenizer, DecoderBackbone, HFCausalDecoder, HFTokenizer, PromptLayout, ToyDecoder
from .errors import ConfigurationError, ValidationError
from .layers import TransformerBlock

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class Regime(str, enum.Enum):
    FULL = "full"
    MAPPING = "mapping"
    ADAPTER_ONLY = "adapter_only"

    @classmethod
    def _missing_(cls, value):
        raise ConfigurationError(f"unknown regime {value!r}; expected one of {[r.value for r in cls]}")


# Which parameter groups each regime trains. The image encoder is always frozen.
REGIME_GROUPS = {
    Regime.FULL: ("decoder", "mapping", "adapters"),
    Regime.MAPPING: ("mapping", "adapters"),
    Regime.ADAPTER_ONLY: ("adapters",),
}
PARAM_GROUPS = ("encoder", "decoder", "mapping", "adapters")


# --- image encoders ----------------------------------------------------------


def to_float_image(image: np.ndarray, normalize: bool = True) -> torch.Tensor:
    """(H, W, 3) uint8 or float array -> (3, H, W) float tensor, CLIP-normalised if asked."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    x = torch.from_numpy(np.array(arr)).permute(2, 0, 1).float()
    if arr.dtype == np.uint8:
        x = x / 255.0
    if normalize:
        mean = torch.tensor(CLIP_MEAN).view(3, 1, 1)
        std = torch.tensor(CLIP_STD).view(3, 1, 1)
        x = (x - mean) / std
    return x


class EncoderBackbone(nn.Module):
    """Frozen image encoder: list of images -> (B, embed_dim)."""

    embed_dim: int

    def encode(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        raise NotImplementedError


class ToyImageEncoder(EncoderBackbone):
    """Parameter-free encoder: per-channel mean and max over a grid x grid block layout."""

    def __init__(self, grid: int = 2, normalize: bool = True):
        super().__init__()
        self.grid = grid
        self.normalize = normalize
        self.embed_dim = 2 * 3 * grid * grid

    @torch.no_grad()
    def encode(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        out = []
        for img in images:
            x = to_float_image(img, self.normalize).unsqueeze(0)
            mean = F.adaptive_avg_pool2d(x, self.grid).flatten()
            mx = F.adaptive_max_pool2d(x, self.grid).flatten()
            out.append(torch.cat([mean, mx]))
        return torch.stack(out)


class HFClipEncoder(EncoderBackbone):
    """CLIP vision tower with projection head from ``transformers``."""

    def __init__(self, model):
        super().__init__()
        self.model = model.eval()
        self.embed_dim = model.config.projection_dim
        self.image_size = model.config.image_size

    @classmethod
    def from_pretrained(cls, name: str) -> "HFClipEncoder":
        from transformers import CLIPVisionModelWithProjection

        return cls(CLIPVisionModelWithProjection.from_pretrained(name))

    @torch.no_grad()
    def encode(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        batch = []
        for img in images:
            x = to_float_image(img, normalize=False).unsqueeze(0)
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bicubic", align_corners=False)
            mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
            std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
            batch.append(((x.clamp(0, 1) - mean) / std)[0])
        pixel_values = torch.stack(batch).to(next(self.model.parameters()).dtype)
        return self.model(pixel_values=pixel_values).image_embeds


# --- image series --------------------------------------------------------------


def encode_series(image: np.ndarray, backbone: EncoderBackbone, projection: nn.Linear, n: int) -> torch.Tensor:
    """Single image -> (n, d_e) series via one linear layer on the encoder embedding."""
    if projection.in_features != backbone.embed_dim:
        raise ConfigurationError(
            f"projection expects {projection.in_features} inputs but encoder emits {backbone.embed_dim}"
        )
    if projection.out_features % n:
        raise ConfigurationError(f"projection width {projection.out_features} not divisible by n={n}")
    emb = backbone.encode([image]).to(projection.weight.dtype)
    return projection(emb).view(n, projection.out_features // n)


# --- adapters --------------------------------------------------------------------


class AdapterStack(nn.Module):
    """One (g_l, h_l) pair of d_e -> d_e linear maps per mapping-network layer.

    Initialised to the identity transform: g_l(s) = 1, h_l(s) = 0.
    """

    def __init__(self, num_layers: int, d_e: int):
        super().__init__()
        self.g = nn.ModuleList(nn.Linear(d_e, d_e) for _ in range(num_layers))
        self.h = nn.ModuleList(nn.Linear(d_e, d_e) for _ in range(num_layers))
        self.reset_identity()

    def reset_identity(self) -> None:
        with torch.no_grad():
            for g, h in zip(self.g, self.h):
                g.weight.zero_()
                g.bias.fill_(1.0)
                h.weight.zero_()
                h.bias.zero_()

    def __len__(self) -> int:
        return len(self.g)

    def forward(self, p: torch.Tensor, s: torch.Tensor, layer: int) -> torch.Tensor:
        return adapter_transform(p, s, layer, self)


def adapter_transform(p: torch.Tensor, s: torch.Tensor, layer: int, adapters: AdapterStack) -> torch.Tensor:
    """``g_l(s) * p + h_l(s)``, elementwise at every series position."""
    if p.shape != s.shape:
        raise ValidationError(f"adapter inputs differ in shape: {tuple(p.shape)} vs {tuple(s.shape)}")
    return adapters.g[layer](s) * p + adapters.h[layer](s)


def adapter_parameter_count(num_layers: int, d_e: int) -> int:
    return 2 * num_layers * (d_e * d_e + d_e)


# --- mapping network ----------------------------------------------------------------


@dataclass
class MappingConfig:
    num_layers: int = 8
    prefix_length: int = 10
    d_e: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    adapters_enabled: bool = False

    def __post_init__(self) -> None:
        if self.num_layers < 0:
            raise ConfigurationError("num_layers must be >= 0")
        if self.d_e % self.num_heads:
            raise ConfigurationError(f"d_e={self.d_e} not divisible by num_heads={self.num_heads}")


class MappingNetwork(nn.Module):
    def __init__(self, config: MappingConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_e, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers)
        )
        self.adapters = AdapterStack(config.num_layers, config.d_e) if config.adapters_enabled else None

    def forward(self, p: torch.Tensor, s: torch.Tensor | None = None) -> torch.Tensor:
        if s is not None and self.adapters is None:
            raise ConfigurationError("RoI series given but adapters are disabled")
        if s is None and self.adapters is not None:
            raise ConfigurationError("adapters enabled but no RoI series given")
        x = p
        for layer, block in enumerate(self.blocks):
            if s is not None:
                x = self.adapters(x, s, layer)
            x = block(x)
        return x


def mapping_forward(mapping: MappingNetwork, p: torch.Tensor, s: torch.Tensor | None = None) -> torch.Tensor:
    return mapping(p, s)


# --- full model ---------------------------------------------------------------------

ADAPTER_SOURCES = ("image", "estimated", "gt")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model; serialised into checkpoints."""

    prefix_length: int = 10
    mapping_layers: int = 8
    mapping_heads: int = 4
    mlp_ratio: int = 4
    adapters: bool = False
    adapter_source: str = "gt"
    share_projection: bool = True
    encoder: dict = field(default_factory=lambda: {"kind": "toy", "grid": 2})
    decoder: dict = field(default_factory=lambda: {"kind": "toy", "d_model": 32, "layers": 2, "heads": 4, "max_len": 128})
    tokenizer: dict = field(default_factory=lambda: {"kind": "char", "alphabet": ""})
    prompt: tuple[str, str] = ("Question:", "Answer:")
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.adapter_source not in ADAPTER_SOURCES:
            raise ConfigurationError(f"adapter_source must be one of {ADAPTER_SOURCES}")
        self.prompt = tuple(self.prompt)

    def to_json(self) -> dict:
        d = asdict(self)
        d["prompt"] = list(self.prompt)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ClipCapModel(nn.Module):
    """Frozen image encoder + projection + mapping network (+ adapters) + text decoder."""

    def __init__(self, config: ModelConfig, encoder: EncoderBackbone, decoder: DecoderBackbone, tokenizer):
        super().__init__()
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.tokenizer = tokenizer
        n, d_e = config.prefix_length, decoder.d_model
        self.projection = nn.Linear(encoder.embed_dim, n * d_e)
        self.roi_projection = None
        if config.adapters and not config.share_projection:
            self.roi_projection = nn.Linear(encoder.embed_dim, n * d_e)
        self.mapping = MappingNetwork(
            MappingConfig(config.mapping_layers, n, d_e, config.mapping_heads, config.mlp_ratio, config.adapters)
        )
        self.layout = PromptLayout.from_text(tokenizer, *config.prompt)
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    @property
    def has_adapters(self) -> bool:
        return self.mapping.adapters is not None

    @property
    def eos_id(self) -> int:
        return self.tokenizer.eos_id

    def encode_images(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder.encode(images)

    def series(self, feats: torch.Tensor, roi: bool = False) -> torch.Tensor:
        """(B, d_img) encoder features -> (B, n, d_e)."""
        proj = self.roi_projection if (roi and self.roi_projection is not None) else self.projection
        out = proj(feats.to(proj.weight.dtype))
        return out.view(feats.shape[0], self.config.prefix_length, -1)

    def image_prefix(self, image_feats: torch.Tensor, roi_feats: torch.Tensor | None = None) -> torch.Tensor:
        """Mapping-network output r for a batch of encoder features."""
        p = self.series(image_feats)
        s = self.series(roi_feats, roi=True) if self.has_adapters else None
        if self.has_adapters and roi_feats is None:
            raise ValidationError("adapter model needs RoI features")
        return self.mapping(p, s)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[group_of(name)].append((name, p))
        return groups


def group_of(param_name: str) -> str:
    if param_name.startswith("encoder."):
        return "encoder"
    if param_name.startswith("decoder."):
        return "decoder"
    if param_name.startswith("mapping.adapters."):
        return "adapters"
    return "mapping"


def count_parameters(model: ClipCapModel, regime: Regime | str | None = None) -> dict[str, int]:
    """Per-group parameter counts, plus ``trainable`` under ``regime`` when given."""
    counts = {g: sum(p.numel() for _, p in ps) for g, ps in model.parameter_groups().items()}
    if regime is not None:
        regime = Regime(regime)
        counts["trainable"] = sum(counts[g] for g in REGIME_GROUPS[regime])
    return counts


def build_tokenizer(cfg: dict):
    kind = cfg.get("kind", "char")
    if kind == "char":
        return CharTokenizer(cfg["alphabet"])
    if kind == "hf":
        return HFTokenizer.from_pretrained(cfg["name"])
    raise ConfigurationError(f"unknown tokenizer kind {kind!r}")


def build_encoder(cfg: dict) -> EncoderBackbone:
    kind = cfg.get("kind", "toy")
    if kind == "toy":
        return ToyImageEncoder(grid=cfg.get("grid", 2), normalize=cfg.get("normalize", True))
    if kind == "hf_clip":
        return HFClipEncoder.from_pretrained(cfg["name"])
    raise ConfigurationError(f"unknown encoder kind {kind!r}")


def build_decoder(cfg: dict, vocab_size: int) -> DecoderBackbone:
    kind = cfg.get("kind", "toy")
    if kind == "toy":
        return ToyDecoder(
            vocab_size,
            d_model=cfg.get("d_model", 32),
            num_layers=cfg.get("layers", 2),
            num_heads=cfg.get("heads", 4),
            max_len=cfg.get("max_len", 128),
        )
    if kind == "hf":
        return HFCausalDecoder.from_pretrained(cfg["name"])
    raise ConfigurationError(f"unknown decoder kind {kind!r}")


def build_model(config: ModelConfig) -> ClipCapModel:
    """Construct a freshly initialised model; weights depend only on ``config.init_seed``."""
    tokenizer = build_tokenizer(config.tokenizer)
    gen = torch.random.fork_rng()
    with gen:
        torch.manual_seed(config.init_seed)
        encoder = build_encoder(config.encoder)
        decoder = build_decoder(config.decoder, tokenizer.vocab_size)
        model = ClipCapModel(config, encoder, decoder, tokenizer)
    return model


def frozen_snapshot(model: ClipCapModel, groups: Iterable[str]) -> dict[str, torch.Tensor]:
    wanted = set(groups)
    return {n: p.detach().clone() for n, p in model.named_parameters() if group_of(n) in wanted}
