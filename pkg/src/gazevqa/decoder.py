"""Text side: tokenizers, decoder backbones, prompt assembly, answer loss and beam search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ValidationError
from .layers import TransformerBlock

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"


# --- tokenizers --------------------------------------------------------------


class CharTokenizer:
    """Character-level tokenizer over a declared alphabet.

    Ids 0..2 are reserved for pad, eos and unk; alphabet characters follow in order.
    """

    def __init__(self, alphabet: str):
        chars = list(dict.fromkeys(alphabet))
        self.alphabet = "".join(chars)
        self.itos = [PAD, EOS, UNK] + chars
        self.stoi = {c: i for i, c in enumerate(self.itos)}
        self.pad_id, self.eos_id, self.unk_id = 0, 1, 2

    @classmethod
    def from_texts(cls, texts: Sequence[str], extra: str = "") -> "CharTokenizer":
        seen = dict.fromkeys(extra)
        for t in texts:
            seen.update(dict.fromkeys(t))
        return cls("".join(sorted(seen)))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(c, self.unk_id) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            out.append(self.itos[i] if 2 < i < len(self.itos) else "")
        return "".join(out)

    def to_config(self) -> dict:
        return {"kind": "char", "alphabet": self.alphabet}


class HFTokenizer:
    """Adapter for a Hugging Face tokenizer with an eos token."""

    def __init__(self, tokenizer):
        self.tok = tokenizer
        if tokenizer.eos_token_id is None:
            raise ConfigurationError("tokenizer has no eos token")
        self.eos_id = tokenizer.eos_token_id
        self.pad_id = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else self.eos_id

    @classmethod
    def from_pretrained(cls, name: str) -> "HFTokenizer":
        from transformers import AutoTokenizer

        return cls(AutoTokenizer.from_pretrained(name))

    @property
    def vocab_size(self) -> int:
        return len(self.tok)

    def encode(self, text: str) -> list[int]:
        return list(self.tok(text, add_special_tokens=False)["input_ids"])

    def decode(self, ids: Sequence[int]) -> str:
        ids = list(ids)
        if self.eos_id in ids:
            ids = ids[: ids.index(self.eos_id)]
        return self.tok.decode(ids, skip_special_tokens=True)

    def to_config(self) -> dict:
        return {"kind": "hf", "name": self.tok.name_or_path}


# --- decoder backbones -------------------------------------------------------


class DecoderBackbone(nn.Module):
    """Causal LM that can be driven from input embeddings.

    Subclasses set ``vocab_size`` and ``d_model`` and implement ``embed`` and ``logits``.
    """

    vocab_size: int
    d_model: int

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def logits(self, embeds: torch.Tensor) -> torch.Tensor:
        """(B, T, d_model) -> (B, T, vocab_size); position t sees inputs 0..t only."""
        raise NotImplementedError

    def step(self, embeds: torch.Tensor) -> torch.Tensor:
        return self.logits(embeds)[:, -1]


class ToyDecoder(DecoderBackbone):
    """Small causal transformer trained from scratch at desk scale."""

    def __init__(self, vocab_size: int, d_model: int = 32, num_layers: int = 2, num_heads: int = 4, max_len: int = 128):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(TransformerBlock(d_model, num_heads, causal=True) for _ in range(num_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_size)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def logits(self, embeds: torch.Tensor) -> torch.Tensor:
        T = embeds.shape[1]
        if T > self.max_len:
            raise ValidationError(f"sequence length {T} exceeds max_len {self.max_len}")
        x = embeds + self.pos_emb(torch.arange(T, device=embeds.device))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


class HFCausalDecoder(DecoderBackbone):
    """Wraps a Hugging Face causal LM (e.g. a Japanese GPT-2) that accepts ``inputs_embeds``."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.vocab_size = model.config.vocab_size
        self.d_model = model.get_input_embeddings().embedding_dim

    @classmethod
    def from_pretrained(cls, name: str) -> "HFCausalDecoder":
        from transformers import AutoModelForCausalLM

        return cls(AutoModelForCausalLM.from_pretrained(name))

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.get_input_embeddings()(ids)

    def logits(self, embeds: torch.Tensor) -> torch.Tensor:
        return self.model(inputs_embeds=embeds).logits


# --- prompt assembly -----------------------------------------------------------


@dataclass(frozen=True)
class PromptLayout:
    sep1_tokens: tuple[int, ...]
    sep2_tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.sep1_tokens or not self.sep2_tokens:
            raise ConfigurationError("prompt separators must be nonempty")

    @classmethod
    def from_text(cls, tokenizer, sep1: str = "Question:", sep2: str = "Answer:") -> "PromptLayout":
        return cls(tuple(tokenizer.encode(sep1)), tuple(tokenizer.encode(sep2)))


def assemble_input(
    r: torch.Tensor | None,
    q_tokens: Sequence[int],
    layout: PromptLayout,
    decoder: DecoderBackbone,
) -> torch.Tensor:
    """Decoder input ``[r_1..r_n, SEP1, q_1..q_m, SEP2]`` as an (T, d_model) tensor.

    ``r=None`` drops the image series; an empty ``q_tokens`` drops the question.
    """
    device = r.device if r is not None else None
    ids = torch.tensor([*layout.sep1_tokens, *q_tokens, *layout.sep2_tokens], dtype=torch.long, device=device)
    text = decoder.embed(ids)
    n1 = len(layout.sep1_tokens)
    m = len(q_tokens)
    parts = [text[:n1], text[n1 : n1 + m], text[n1 + m :]]
    if r is not None:
        if r.dim() != 2 or r.shape[1] != decoder.d_model:
            raise ValidationError(f"image series width {tuple(r.shape)} does not match decoder width {decoder.d_model}")
        parts.insert(0, r.to(text.dtype))
    return torch.cat(parts, dim=0)


# --- loss ----------------------------------------------------------------------


def masked_answer_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true.

    ``logits[b, t]`` predicts ``targets[b, t]``; masked-out targets are never read.
    """
    if not mask.any():
        raise ValidationError("no answer positions to score")
    logp = F.log_softmax(logits, dim=-1)
    safe = torch.where(mask, targets, torch.zeros_like(targets))
    nll = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()


def build_teacher_forcing(
    decoder: DecoderBackbone, prefixes: Sequence[torch.Tensor], answers: Sequence[Sequence[int]]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-padded (embeds, targets, mask) for a batch of prefix/answer pairs.

    Input at position t is the prefix or the previous answer token; the target at
    the last prefix position is the first answer token.
    """
    if len(prefixes) != len(answers):
        raise ValidationError("prefixes and answers differ in length")
    rows, tgt_rows, spans = [], [], []
    for prefix, ans in zip(prefixes, answers):
        if len(ans) == 0:
            raise ValidationError("empty answer")
        ans_ids = torch.tensor(list(ans), dtype=torch.long, device=prefix.device)
        inp = torch.cat([prefix, decoder.embed(ans_ids[:-1]).to(prefix.dtype)], dim=0)
        rows.append(inp)
        tgt_rows.append(ans_ids)
        spans.append(prefix.shape[0] - 1)
    T = max(r.shape[0] for r in rows)
    B, D = len(rows), rows[0].shape[1]
    embeds = rows[0].new_zeros(B, T, D)
    targets = torch.zeros(B, T, dtype=torch.long, device=embeds.device)
    mask = torch.zeros(B, T, dtype=torch.bool, device=embeds.device)
    for b, (row, tgt, start) in enumerate(zip(rows, tgt_rows, spans)):
        embeds[b, : row.shape[0]] = row
        targets[b, start : start + len(tgt)] = tgt
        mask[b, start : start + len(tgt)] = True
    return embeds, targets, mask


def compute_loss(
    decoder: DecoderBackbone, prefixes: Sequence[torch.Tensor], answers: Sequence[Sequence[int]]
) -> torch.Tensor:
    """Mean cross-entropy over answer tokens only; answers should already end in eos."""
    embeds, targets, mask = build_teacher_forcing(decoder, prefixes, answers)
    return masked_answer_loss(decoder.logits(embeds), targets, mask)


# --- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class GenerationConfig:
    beam_width: int = 10
    max_new_tokens: int = 16
    eos_id: int = 1
    length_normalize: bool = False

    def __post_init__(self) -> None:
        if self.beam_width < 1:
            raise ConfigurationError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_new_tokens < 1:
            raise ConfigurationError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


def _rank(score: float, tokens: tuple[int, ...], normalize: bool) -> tuple[float, tuple[int, ...]]:
    s = score / max(1, len(tokens)) if normalize else score
    return (-s, tokens)


@torch.no_grad()
def generate(decoder: DecoderBackbone, prefix: torch.Tensor, config: GenerationConfig) -> list[int]:
    """Beam search from an assembled (T, d_model) prefix.

    Each step keeps the ``beam_width`` best extensions by summed log-probability;
    extensions ending in eos leave the beam as finished hypotheses. Hypotheses
    still alive after ``max_new_tokens`` steps finish as-is. Returns the best
    finished token sequence (eos stripped), preferring the lexicographically
    smaller sequence on exact score ties.
    """
    K, eos = config.beam_width, config.eos_id
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float, int]] = []  # (tokens, score, length incl. eos)
    for step in range(config.max_new_tokens):
        batch = []
        for toks, _ in alive:
            ids = torch.tensor(toks, dtype=torch.long, device=prefix.device)
            batch.append(torch.cat([prefix, decoder.embed(ids).to(prefix.dtype)], dim=0))
        logp = F.log_softmax(decoder.step(torch.stack(batch)).double(), dim=-1).cpu().tolist()
        cands = []
        for (toks, score), row in zip(alive, logp):
            for tok, lp in enumerate(row):
                if lp == float("-inf"):
                    continue
                cands.append((toks + (tok,), score + lp))
        cands.sort(key=lambda c: _rank(c[1], c[0], config.length_normalize))
        alive = []
        for toks, score in cands[:K]:
            if toks[-1] == eos:
                finished.append((toks[:-1], score, len(toks)))
            else:
                alive.append((toks, score))
        if not alive:
            break
    finished.extend((toks, score, len(toks)) for toks, score in alive)
    if not finished:
        return []

    def key(f):
        s = f[1] / f[2] if config.length_normalize else f[1]
        return (-s, f[0])

    return list(min(finished, key=key)[0])


def greedy_decode(decoder: DecoderBackbone, prefix: torch.Tensor, max_new_tokens: int, eos_id: int) -> list[int]:
    toks: list[int] = []
    with torch.no_grad():
        for _ in range(max_new_tokens):
            ids = torch.tensor(toks, dtype=torch.long, device=prefix.device)
            x = torch.cat([prefix, decoder.embed(ids).to(prefix.dtype)], dim=0)
            nxt = int(decoder.step(x.unsqueeze(0))[0].argmax())
            if nxt == eos_id:
                break
            toks.append(nxt)
    return toks


def sequence_log_prob(decoder: DecoderBackbone, prefix: torch.Tensor, tokens: Sequence[int]) -> float:
    """Summed log-probability of ``tokens`` after ``prefix`` (no length normalisation)."""
    if not tokens:
        return 0.0
    with torch.no_grad():
        ids = torch.tensor(list(tokens), dtype=torch.long, device=prefix.device)
        x = torch.cat([prefix, decoder.embed(ids[:-1]).to(prefix.dtype)], dim=0)
        logp = F.log_softmax(decoder.logits(x.unsqueeze(0))[0].double(), dim=-1)
        start = prefix.shape[0] - 1
        return float(sum(logp[start + i, t] for i, t in enumerate(tokens)))

