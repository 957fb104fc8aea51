"""Acceptance criteria, one test per criterion, each logging a PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, random_image, tiny_config
from gazevqa.dataset import QuestionType, classify_question
from gazevqa.decoder import GenerationConfig, PromptLayout, ToyDecoder, assemble_input, compute_loss, generate
from gazevqa.evaluation import SentenceEmbedder, predict, similarity_score, vqa_accuracy
from gazevqa.gaze_roi import Heatmap, heatmap_to_roi
from gazevqa.model_core import PARAM_GROUPS, REGIME_GROUPS, AdapterStack, Regime, build_model, count_parameters, frozen_snapshot
from gazevqa.pipeline import EncodedSample, build_prefixes, encode_dataset
from gazevqa.training import TrainConfig, load_into, save_checkpoint, train
from oracles import TableDecoder, exhaustive_best, flood_fill_components, roi_oracle


def log(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((n, title, bool(ok), detail))
    assert ok, detail


def random_encoded(model, rng, count):
    out = []
    V = model.tokenizer.vocab_size
    for i in range(count):
        img = random_image(rng)
        x, y = (int(v) for v in rng.integers(0, 16, size=2))
        roi = img[y : y + int(rng.integers(4, 16)), x : x + int(rng.integers(4, 16))]
        feats = model.encode_images([img, roi])
        q = rng.integers(3, V, size=int(rng.integers(0, 12))).tolist()
        out.append(EncodedSample(f"r{i}", "", QuestionType("Others"), q, [3, 1], ("x",), feats[0], feats[1]))
    return out


def all_logits(model, encoded):
    with torch.no_grad():
        return [model.decoder.logits(p.unsqueeze(0))[0] for p in build_prefixes(model, encoded)]


# 1 -------------------------------------------------------------------------


def test_c01_identity_equivalence(tmp_path, gaze_train):
    start = time.perf_counter()
    base = build_model(tiny_config(init_seed=0))
    train(base, encode_dataset(base, gaze_train), TrainConfig(batch_size=8, epochs=2, lr_finetune=1e-3), "full")
    save_checkpoint(base, tmp_path / "base", "full")
    adapted = build_model(tiny_config(adapters=True, init_seed=7))
    load_into(adapted, tmp_path / "base")

    enc = random_encoded(adapted, np.random.default_rng(0), 100)
    base_enc = [EncodedSample(**{**e.__dict__, "roi_feat": None}) for e in enc]
    diff = max(float((a - b).abs().max()) for a, b in zip(all_logits(base, base_enc), all_logits(adapted, enc)))
    elapsed = time.perf_counter() - start
    log(1, "identity equivalence", diff < 1e-6 and elapsed < 30,
        f"100 inputs, max |logit diff| = {diff:.3g} (< 1e-6), {elapsed:.1f}s (< 30s)")


# 2 -------------------------------------------------------------------------


def test_c02_adapter_gradients_finite_difference():
    start = time.perf_counter()
    cfg = tiny_config(
        prefix_length=4, mapping_layers=2, mapping_heads=2, adapters=True,
        decoder={"kind": "toy", "d_model": 8, "layers": 1, "heads": 2, "max_len": 64},
    )
    model = build_model(cfg).double()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.mapping.adapters.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    rng = np.random.default_rng(1)
    batch = random_encoded(model, rng, 3)
    for e in batch:
        e.image_feat, e.roi_feat = e.image_feat.double(), e.roi_feat.double()
        e.answer_ids = rng.integers(3, model.tokenizer.vocab_size, size=3).tolist() + [1]

    def loss_fn():
        return compute_loss(model.decoder, build_prefixes(model, batch), [e.answer_ids for e in batch])

    model.zero_grad()
    loss_fn().backward()
    # h ~ cbrt(float64 eps) balances O(h^2) truncation against O(u/h) round-off;
    # smaller steps drown the ~1e-6 gradients of some weights in round-off.
    eps, worst, checked = 1e-5, 0.0, 0
    with torch.no_grad():
        for _, p in model.mapping.adapters.named_parameters():
            flat = p.view(-1)
            analytic = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i].item()
                denom = max(abs(a), abs(numeric))
                rel = 0.0 if denom < 1e-10 else abs(a - numeric) / denom
                worst = max(worst, rel)
                checked += 1
    elapsed = time.perf_counter() - start
    expected = 2 * 2 * (8 * 8 + 8)
    log(2, "adapter gradient check", worst < 1e-4 and checked == expected and elapsed < 120,
        f"{checked} adapter parameters at float64, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------


def test_c03_freezing_contract(gaze_train):
    lines = []
    ok = True
    for regime in Regime:
        model = build_model(tiny_config(adapters=True))
        frozen_groups = [g for g in PARAM_GROUPS if g not in REGIME_GROUPS[regime]]
        trainable = frozen_snapshot(model, REGIME_GROUPS[regime])
        frozen = frozen_snapshot(model, frozen_groups)
        train(model, encode_dataset(model, gaze_train), TrainConfig(batch_size=8, epochs=10), regime)
        params = dict(model.named_parameters())
        same = all(torch.equal(params[n], t) for n, t in frozen.items())
        moved = any(not torch.equal(params[n], t) for n, t in trainable.items())
        ok &= same and moved
        lines.append(f"{regime.value}: {len(frozen)} frozen tensors identical={same}")
    log(3, "freezing contract", ok, "; ".join(lines))


# 4 -------------------------------------------------------------------------


def test_c04_parameter_formula():
    mismatches = []
    grid = list(itertools.product([1, 2, 4, 8], [4, 8, 16, 32]))
    for L, d_e in grid:
        model = build_model(tiny_config(
            mapping_layers=L, mapping_heads=2, adapters=True,
            decoder={"kind": "toy", "d_model": d_e, "layers": 1, "heads": 2, "max_len": 64},
        ))
        counts = count_parameters(model, Regime.ADAPTER_ONLY)
        if counts["adapters"] != 2 * L * (d_e * d_e + d_e) or counts["trainable"] != counts["adapters"]:
            mismatches.append((L, d_e))
    big = sum(p.numel() for p in AdapterStack(8, 1024).parameters())
    log(4, "adapter parameter formula", not mismatches and big == 16_793_600,
        f"{len(grid)} (L, d_e) configs match 2L(d_e^2+d_e); (8, 1024) -> {big:,}")


# 5 -------------------------------------------------------------------------


def exact_match(model, encoded):
    preds = predict(model, encoded, GenerationConfig(beam_width=1, max_new_tokens=4, eos_id=model.eos_id))
    return float(np.mean([p == e.golds[0] for p, e in zip(preds, encoded)]))


def test_c05_overfitting_smoke(tmp_path, caption_corpus, gaze_train):
    start = time.perf_counter()
    # Stage 1: caption-style pre-training of the baseline (one object per image).
    base = build_model(tiny_config())
    train(base, encode_dataset(base, caption_corpus),
          TrainConfig(batch_size=32, epochs=20, stage="pretrain", lr_pretrain=1e-3), Regime.FULL)
    save_checkpoint(base, tmp_path / "pretrained", "full")
    # Stage 2: adapter-only fine-tuning on 16 gaze scenes with several objects each.
    model = build_model(tiny_config(adapters=True, adapter_source="gt"))
    load_into(model, tmp_path / "pretrained")
    data = encode_dataset(model, gaze_train)
    before = exact_match(model, data)
    res = train(model, data, TrainConfig(batch_size=4, epochs=200, lr_finetune=3e-3), Regime.ADAPTER_ONLY)
    after = exact_match(model, data)
    elapsed = time.perf_counter() - start
    log(5, "adapter-only overfitting", after >= 0.9 and elapsed < 300,
        f"exact match {before:.0%} -> {after:.0%} (>= 90%) on 16 samples after 200 epochs "
        f"({res.steps} steps, final loss {res.losses[-1]:.4f}), {elapsed:.0f}s including pre-training")


# 6 -------------------------------------------------------------------------


def test_c06_roi_oracle():
    rng = np.random.default_rng(2024)
    agree, ties = 0, 0
    for i in range(200):
        if i % 2:
            v = rng.standard_normal((16, 16)) - rng.uniform(0.0, 1.5)
        else:
            # sparse blobs make equal-area components common
            v = np.where(rng.random((16, 16)) < 0.12, 1.0, -1.0)
        comps = flood_fill_components(v > 0)
        sizes = sorted((len(c) for c in comps), reverse=True)
        ties += len(sizes) > 1 and sizes[0] == sizes[1]
        box = heatmap_to_roi(Heatmap(v), (16, 16))
        agree += (box.x, box.y, box.w, box.h) == roi_oracle(v)
    fallback = heatmap_to_roi(Heatmap(-np.abs(rng.standard_normal((16, 16)))), (16, 16))
    zero = heatmap_to_roi(Heatmap(np.zeros((16, 16))), (16, 16))
    full = (0, 0, 16, 16)
    ok = agree == 200 and ties > 0 and fallback.as_list() == list(full) and zero.as_list() == list(full)
    log(6, "RoI oracle", ok, f"{agree}/200 agree ({ties} with tied largest components); non-positive map -> full image")


# 7 -------------------------------------------------------------------------


class FixedEmbedder(SentenceEmbedder):
    table = {
        "pred": [0.3, -1.2, 2.0, 0.5],
        "g1": [1.0, 0.0, 0.0, 0.0],
        "g2": [0.2, 0.4, -0.1, 3.0],
        "g3": [-1.0, 2.0, 1.0, 1.0],
    }
    dim = 4

    def embed(self, text):
        return np.array(self.table[text], dtype=float)


def test_c07_metric_oracles():
    acc_ok = all(
        vqa_accuracy("赤", ["赤"] * k + ["青"] * (10 - k)) == min(k / 3, 1.0) for k in range(11)
    )
    e = FixedEmbedder()
    p = np.array(e.table["pred"])
    manual = []
    for g in ("g1", "g2", "g3"):
        v = np.array(e.table[g])
        dot = sum(a * b for a, b in zip(p, v))
        manual.append(dot / (sum(a * a for a in p) ** 0.5 * sum(b * b for b in v) ** 0.5))
    err = abs(similarity_score("pred", ["g1", "g2", "g3"], e) - sum(manual) / 3)
    log(7, "metric oracles", acc_ok and err < 1e-12,
        f"vqa_accuracy = min(k/3, 1) for k = 0..10: {acc_ok}; similarity error {err:.1e} (< 1e-12)")


# 8 -------------------------------------------------------------------------


def test_c08_beam_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    agree = 0
    for i in range(50):
        V = int(rng.integers(3, 6))
        max_len = int(rng.integers(1, 4))
        dec = TableDecoder(V, seed=i)
        eos = int(rng.integers(0, V))
        got = generate(dec, dec.prefix(), GenerationConfig(beam_width=V, max_new_tokens=max_len, eos_id=eos))
        agree += tuple(got) == exhaustive_best(dec, eos, max_len)[0]
    log(8, "beam search vs exhaustive search", agree == 50, f"{agree}/50 toy decoders (width = vocab size, max length <= 3)")


# 9 -------------------------------------------------------------------------

W = QuestionType
TYPOLOGY_FIXTURE = [
    ("これは何色ですか", W("What", "color")),
    ("あれは何ですか", W("What", "is_are_do_does")),
    ("何をしていますか", W("What", "is_are_do_does")),
    ("どんな形をしていますか", W("What", "shape")),
    ("それはどんな種類の花ですか", W("What", "kind")),
    ("あの人はどんな様子ですか", W("What", "condition")),
    ("今どんな状態なのか", W("What", "condition")),
    ("なにが書いてあるの", W("What", "others")),
    ("どの本が好きなのか教えて", W("What", "others")),
    ("どこにありますか", W("Where")),
    ("それはどこで買ったのですか", W("Where")),
    ("どちらが大きいですか", W("Which")),
    ("どちらの色が好きですか", W("Which")),
    ("いくつありますか", W("How")),
    ("これはどれくらいの重さですか", W("How")),
    ("どれが一番高いのですか", W("How")),
    ("いつ使うものなんですか", W("Others")),
    ("だれが置いたのですか", W("Others")),
    ("誰のものなのでしょうか", W("Others")),
    ("なぜここに置いてあるの", W("Others")),
    ("これは美味しそうですね", W("Others")),
    ("あそこにあるものを取って", W("Others")),
    ("何の動物ですか", W("What", "is_are_do_does")),
    ("何色に見えますか", W("What", "color")),
    ("どこに何がありますか", W("Where")),
    ("何をするためのものなの", W("What", "is_are_do_does")),
    ("どんな模様がついているの", W("What", "others")),
    ("それは何でできているのかな", W("What", "others")),
    ("一体なにがあったの", W("What", "others")),
    ("いくつの種類がありますか", W("How")),
]


def test_c09_typology_fixture():
    wrong = [(q, str(t), str(classify_question(q))) for q, t in TYPOLOGY_FIXTURE if classify_question(q) != t]
    majors = {m for _, t in TYPOLOGY_FIXTURE for m in [t.major]}
    log(9, "question typology", not wrong and len(TYPOLOGY_FIXTURE) == 30 and len(majors) == 5,
        f"{30 - len(wrong)}/30 hand-labelled questions; published-corpus counts checked in "
        "test_dataset when GAZEVQA_DATA is set" + (f"; mismatches {wrong}" if wrong else ""))


# 10 ------------------------------------------------------------------------


def test_c10_prompt_structure():
    torch.manual_seed(0)
    dec = ToyDecoder(40, d_model=8, num_layers=1, num_heads=2)
    layout = PromptLayout((3, 4, 5), (6, 7))
    sep1, sep2 = dec.embed(torch.tensor(layout.sep1_tokens)), dec.embed(torch.tensor(layout.sep2_tokens))
    checked = 0
    for n, m in itertools.product([0, 1, 5, 10], [0, 1, 5, 17]):
        q = list(range(8, 8 + m))
        qe = dec.embed(torch.tensor(q, dtype=torch.long))
        for r in (torch.randn(n, 8), None):
            if r is None and n:
                continue
            out = assemble_input(r, q, layout, dec)
            n_r = 0 if r is None else n
            assert out.shape == (n_r + 3 + m + 2, 8)
            assert torch.equal(out[:n_r], r if r is not None else out[:0])
            assert torch.equal(out[n_r : n_r + 3], sep1)
            assert torch.equal(out[n_r + 3 : n_r + 3 + m], qe)
            assert torch.equal(out[n_r + 3 + m :], sep2)
            checked += 1
    r = torch.randn(10, 8)
    no_image = assemble_input(None, [8, 9], layout, dec)
    no_question = assemble_input(r, [], layout, dec)
    ablations = (
        torch.equal(no_image, torch.cat([sep1, dec.embed(torch.tensor([8, 9])), sep2]))
        and torch.equal(no_question, torch.cat([r, sep1, sep2]))
    )
    log(10, "prompt structure", checked == 20 and ablations,
        f"16 (n, m) pairs plus 4 image-free prefixes verified; both ablation layouts exact")
