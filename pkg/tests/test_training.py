import json
import math

import numpy as np
import pytest
import torch

from orthros.model import EOS, MASK, ModelConfig, OrthrosModel, build_model
from orthros.numerics import token_nll
from orthros.synthdata import TaskSpec, Triplet, conditional_entropy, generate
from orthros.training import (MaskedBatch, TrainConfig, TrainingAborted, ar_loss, cmlm_loss, cmlm_loss_from_logits,
                              collate, compute_losses, ctc_loss, distill_dataset, length_loss, mask_batch,
                              sample_mask, smart_loss, total_loss, train)

from conftest import random_frames, tiny_model
from oracles import all_targets, ctc_brute_force
from suites import GRADIENT_TOLERANCE, grad_check, gradient_suite, tiny_batch, tiny_triplets


# ------------------------------------------------------------------ masking

def test_sample_mask_single_token_and_consistency(rng):
    y_obs, mask = sample_mask([7], rng)
    assert mask.tolist() == [True] and y_obs.tolist() == [MASK]
    y = torch.arange(4, 14)
    for _ in range(50):
        y_obs, mask = sample_mask(y, rng)
        assert torch.equal(y_obs == MASK, mask)
        assert torch.equal(y_obs[~mask], y[~mask])
        assert 1 <= int(mask.sum()) <= 10
    with pytest.raises(ValueError):
        sample_mask([], rng)


def test_sample_mask_count_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.array([int(sample_mask(torch.arange(4, 14), rng)[1].sum()) for _ in range(100_000)])
    assert abs(counts.mean() - 5.5) < 0.05
    freq = np.bincount(counts, minlength=11)[1:] / len(counts)
    assert np.all(np.abs(freq - 0.1) < 0.01)


def test_sample_mask_positions_uniform_and_deterministic():
    rng = np.random.default_rng(1)
    hits = sum(sample_mask(torch.arange(4, 10), rng)[1].double() for _ in range(20_000)) / 20_000
    # P(position masked) = E[k]/N = 3.5/6
    assert torch.allclose(hits, torch.full((6,), 3.5 / 6, dtype=torch.float64), atol=0.02)
    a = sample_mask(torch.arange(4, 10), np.random.default_rng(5))
    b = sample_mask(torch.arange(4, 10), np.random.default_rng(5))
    assert torch.equal(a[1], b[1])


# ------------------------------------------------------------------ CMLM

def _single_row_batch(y, masked):
    y = torch.tensor([y])
    mask = torch.zeros_like(y, dtype=torch.bool)
    mask[0, masked] = True
    return MaskedBatch(y.masked_fill(mask, MASK), mask, y, torch.tensor([y.shape[1]]))


def test_cmlm_single_masked_position_is_neg_log_p():
    mb = _single_row_batch([4, 5, 6], [1])
    logits = torch.randn(1, 3, 8, dtype=torch.float64)
    p = torch.softmax(logits[0, 1], -1)[5].item()
    assert math.isclose(cmlm_loss_from_logits(logits, mb).item(), -math.log(p), rel_tol=1e-12)


def test_cmlm_invariant_to_observed_logits():
    mb = _single_row_batch([4, 5, 6, 7, 4], [0, 3])
    logits = torch.randn(1, 5, 8, dtype=torch.float64)
    base = cmlm_loss_from_logits(logits, mb)
    bumped = logits.clone()
    bumped[0, [1, 2, 4]] += torch.randn(3, 8, dtype=torch.float64) * 10 + 3.0
    assert cmlm_loss_from_logits(bumped, mb).item() - base.item() == 0.0


def test_cmlm_uniform_model_is_log_v(model64):
    with torch.no_grad():
        model64.nar_decoder.out.weight.zero_()
        model64.nar_decoder.out.bias.zero_()
    enc, _ = model64.encode(random_frames(16))
    mb = mask_batch(torch.tensor([[4, 5, 6, 7]]), torch.tensor([4]), np.random.default_rng(0))
    assert math.isclose(cmlm_loss(model64, mb, enc.unsqueeze(0)).item(), math.log(8), rel_tol=1e-12)
    empty = MaskedBatch(mb.y, torch.zeros_like(mb.mask), mb.y, mb.lengths)
    with pytest.raises(ValueError):
        cmlm_loss(model64, empty, enc.unsqueeze(0))


def test_cmlm_batch_row_averaging():
    y = torch.tensor([[4, 5, 6], [4, 5, 0]])
    mask = torch.tensor([[True, True, False], [True, False, False]])
    mb = MaskedBatch(y.masked_fill(mask, MASK), mask, y, torch.tensor([3, 2]))
    logits = torch.randn(2, 3, 8, dtype=torch.float64)
    nll = -torch.log_softmax(logits, -1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
    expected = ((nll[0, 0] + nll[0, 1]) / 2 + nll[1, 0]) / 2
    assert torch.allclose(cmlm_loss_from_logits(logits, mb), expected, atol=1e-14)


# ------------------------------------------------------------------ SMART

def _param_grads(model):
    return {n: (p.grad.clone() if p.grad is not None else None) for n, p in model.named_parameters()}


def test_smart_truncation_bitwise():
    model = tiny_model(seed=2)
    enc, enc_mask = model.encode(random_frames(24).unsqueeze(0))
    enc = enc.detach()
    y = torch.tensor([[4, 5, 6, 7, 5]])
    lens = torch.tensor([5])
    grads = []
    for in_graph in (False, True):
        model.zero_grad(set_to_none=True)
        smart_loss(model, y, lens, enc, enc_mask, np.random.default_rng(9), pass1_grad=in_graph).backward()
        grads.append(_param_grads(model))
    for name in grads[0]:
        a, b = grads[0][name], grads[1][name]
        assert (a is None and b is None) or torch.equal(a, b), name


class _PerfectNAR(OrthrosModel):
    """Predicts a fixed target at every position regardless of its input; records inputs."""

    def __init__(self, cfg, target):
        super().__init__(cfg)
        self.target = target
        self.seen = []

    def nar_forward(self, obs, enc, enc_mask=None, tok_mask=None):
        self.seen.append(obs.clone())
        logits = torch.zeros(*obs.shape, self.cfg.v_tgt, dtype=torch.float64)
        logits.scatter_(-1, self.target.unsqueeze(-1), 6.0)
        return logits + 0.0 * self.tgt_embed.weight.sum()


def test_smart_fixed_point_for_perfect_model():
    from conftest import tiny_config
    y = torch.tensor([[4, 6, 5, 7]])
    model = _PerfectNAR(tiny_config(), y)
    enc = torch.zeros(1, 3, 16, dtype=torch.float64)
    loss = smart_loss(model, y, torch.tensor([4]), enc, None, np.random.default_rng(3))
    pass2 = model.seen[1]
    is_mask = pass2 == MASK
    assert is_mask.any() and torch.equal(pass2[~is_mask], y[~is_mask])
    full = token_nll(model.nar_forward(y, enc), y).mean()
    assert torch.allclose(loss, full, atol=1e-14)


def test_smart_fuzz_finite_nonnegative():
    model = tiny_model(seed=1)
    enc, enc_mask = model.encode(random_frames(20).unsqueeze(0))
    y = torch.tensor([[4, 5, 6, 7, 4, 5]])
    for seed in range(100):
        loss = smart_loss(model, y, torch.tensor([6]), enc, enc_mask, np.random.default_rng(seed))
        assert math.isfinite(loss.item()) and loss.item() >= 0


def test_smart_pass1_loss_flag_adds_masked_term():
    model = tiny_model(seed=1)
    enc, enc_mask = model.encode(random_frames(20).unsqueeze(0))
    y, lens = torch.tensor([[4, 5, 6]]), torch.tensor([3])
    plain = smart_loss(model, y, lens, enc, enc_mask, np.random.default_rng(0))
    both = smart_loss(model, y, lens, enc, enc_mask, np.random.default_rng(0), pass1_loss=True)
    first = cmlm_loss(model, mask_batch(y, lens, np.random.default_rng(0)), enc, enc_mask)
    assert torch.allclose(both, plain + first, atol=1e-12)


# ------------------------------------------------------------------ AR, length, CTC

class _PerfectAR(OrthrosModel):
    """Teacher-forced oracle: puts a logit of ``scale`` on the true next token."""

    def __init__(self, cfg, target, scale):
        super().__init__(cfg)
        self.next = torch.cat([target, torch.tensor([EOS])])
        self.scale = scale

    def ar_forward(self, prefix, enc, enc_mask=None, tok_mask=None):
        B, L = prefix.shape
        logits = torch.zeros(B, L, self.cfg.v_tgt, dtype=torch.float64)
        logits[:, torch.arange(L), self.next[:L]] = self.scale
        return logits


def test_ar_loss_uniform_and_perfect(model64):
    enc, _ = model64.encode(random_frames(16))
    y = torch.tensor([4, 5, 6])
    with torch.no_grad():
        model64.ar_decoder.out.weight.zero_()
        model64.ar_decoder.out.bias.zero_()
    assert math.isclose(ar_loss(model64, y, None, enc, smoothing=0.0).item(), math.log(8), rel_tol=1e-12)
    from conftest import tiny_config
    losses = [ar_loss(_PerfectAR(tiny_config(), y, s), y, None, enc, smoothing=0.0).item() for s in (5, 10, 40)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15
    smoothed = ar_loss(_PerfectAR(tiny_config(), y, 40), y, None, enc, smoothing=0.1).item()
    assert smoothed > 0.1


def test_ar_loss_smoothing_floor():
    model = tiny_model()
    enc, _ = model.encode(random_frames(16))
    with torch.no_grad():
        model.ar_decoder.out.weight.zero_()
        model.ar_decoder.out.bias.copy_(torch.tensor([0, 0, 1e3, 0, 1e3, 0, 0, 0]))
    # the floor of smoothed CE is the entropy-like term eps*ln(V)-ish; anything > 0 is enough
    assert ar_loss(model, torch.tensor([4]), None, enc, smoothing=0.1).item() > 0.05
    with pytest.raises(ValueError):
        ar_loss(model, torch.zeros(1, 0, dtype=torch.long), torch.tensor([0]), enc.unsqueeze(0))


def test_length_loss_examples():
    assert math.isclose(length_loss(torch.zeros(64, dtype=torch.float64), 7).item(), math.log(64), rel_tol=1e-12)
    onehot = torch.full((64,), -50.0, dtype=torch.float64)
    onehot[6] = 50.0
    assert length_loss(onehot, 7).item() < 1e-12
    logits = torch.randn(64, dtype=torch.float64)
    up = logits.clone()
    up[6] += 1.0
    assert length_loss(up, 7) < length_loss(logits, 7)
    for bad in (0, 65):
        with pytest.raises(ValueError):
            length_loss(logits, bad)


def test_ctc_two_frame_example():
    logits = torch.zeros(2, 3, dtype=torch.float64)
    logits[:, 0] = -1e9   # only BLANK (1) and 'a' (2) carry mass
    assert math.isclose(ctc_loss(logits, [2], reduction="sum").item(), -math.log(0.75), rel_tol=1e-9)
    assert abs(-math.log(0.75) - 0.2877) < 1e-4


def test_ctc_certain_single_frame():
    logits = torch.full((1, 5), -1e4, dtype=torch.float64)
    logits[0, 3] = 0.0
    assert ctc_loss(logits, [3], reduction="sum").item() < 1e-12


def test_ctc_infeasible_errors():
    with pytest.raises(ValueError, match="target longer than input"):
        ctc_loss(torch.zeros(2, 4), [2, 2])
    with pytest.raises(ValueError, match="target longer than input"):
        ctc_loss(torch.zeros(2, 4), [2, 3, 2])


def test_ctc_matches_brute_force_exhaustively():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for V in (2, 3, 4):
        symbols = [s for s in range(V) if s != 1]
        for U in range(1, 7):
            logits = torch.randn(U, V, generator=gen, dtype=torch.float64)
            table = ctc_brute_force(torch.log_softmax(logits, -1), blank=1)
            targets = [list(t) for t in all_targets(symbols, 3)
                       if len(t) + sum(a == b for a, b in zip(t, t[1:])) <= U]
            dp = ctc_loss(logits.expand(len(targets), U, V), targets, reduction="none")
            for tgt, val in zip(targets, dp.tolist()):
                ref = -math.log(table[tuple(tgt)])
                worst = max(worst, abs(val - ref))
    assert worst < 1e-6


def test_ctc_agrees_with_torch_reference():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(3, 9, 6, generator=gen, dtype=torch.float64)
    targets = [[2, 3, 3], [4], [5, 2, 5, 4]]
    in_lens = torch.tensor([9, 7, 8])
    ours = ctc_loss(logits, targets, in_lens, reduction="none")
    ref = torch.nn.functional.ctc_loss(torch.log_softmax(logits, -1).transpose(0, 1),
                                       torch.cat([torch.tensor(t) for t in targets]), in_lens,
                                       torch.tensor([len(t) for t in targets]), blank=1, reduction="none")
    assert torch.allclose(ours, ref, atol=1e-9)
    mean_tok = ctc_loss(logits, targets, in_lens)
    assert torch.allclose(mean_tok, (ref / torch.tensor([3.0, 1.0, 4.0], dtype=torch.float64)).mean())


# ------------------------------------------------------------------ total loss

def test_total_loss_weighting():
    one = torch.tensor(1.0)
    comps = {k: one for k in ("cmlm", "ar", "lp", "asr")}
    assert math.isclose(total_loss(comps, TrainConfig()).item(), 1.4, rel_tol=1e-6)
    zero = TrainConfig(lambda_ar=0, lambda_lp=0, lambda_asr=0)
    c = {"cmlm": torch.tensor(2.5), "ar": torch.tensor(9.0), "lp": torch.tensor(7.0), "asr": torch.tensor(3.0)}
    assert total_loss(c, zero).item() == 2.5
    with pytest.raises(ValueError):
        TrainConfig(lambda_ar=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_asr=1.0)
    cfg = TrainConfig()
    object.__setattr__(cfg, "lambda_lp", -1.0)
    with pytest.raises(ValueError):
        total_loss(comps, cfg)


def test_total_gradient_is_weighted_sum():
    model = tiny_model(seed=6)
    batch = tiny_batch()
    cfg = TrainConfig()
    comps = compute_losses(model, batch, cfg, np.random.default_rng(0))
    grads = {}
    for name in ("cmlm", "ar", "lp", "asr"):
        model.zero_grad(set_to_none=True)
        comps[name].backward(retain_graph=True)
        grads[name] = {n: p.grad.clone() if p.grad is not None else torch.zeros_like(p)
                       for n, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    comps["total"].backward()
    w = {"cmlm": 0.7, "ar": 0.3, "lp": 0.1, "asr": 0.3}
    for n, p in model.named_parameters():
        expected = sum(w[k] * grads[k][n] for k in w)
        assert torch.allclose(p.grad, expected, atol=1e-6), n


def test_encoder_sharing_one_pass_and_gradient_sum():
    model = tiny_model(seed=8)
    batch = tiny_batch()
    cfg = TrainConfig()
    before = model.calls["encode"]
    comps = compute_losses(model, batch, cfg, np.random.default_rng(4))
    assert model.calls["encode"] - before == 1
    model.zero_grad(set_to_none=True)
    comps["total"].backward()
    joint = {n: p.grad.clone() for n, p in model.named_parameters() if n.startswith("encoder.")}

    # each head on its own fresh encoder pass, gradients summed
    from orthros.training import _ctc_inputs
    model.zero_grad(set_to_none=True)
    heads = [
        lambda e, m: 0.7 * cmlm_loss(model, mask_batch(batch.tgt, batch.tgt_lens, np.random.default_rng(4)), e, m),
        lambda e, m: 0.3 * ar_loss(model, batch.tgt, batch.tgt_lens, e, m, 0.1),
        lambda e, m: 0.1 * length_loss(model.length_logits(e, m), batch.tgt_lens),
        lambda e, m: 0.3 * _ctc_inputs(model, e, m, batch.src, batch.src_lens),
    ]
    for head in heads:
        enc, enc_mask = model.encode(batch.inputs, batch.input_mask)
        head(enc, enc_mask).backward()
    for n, g in joint.items():
        p = dict(model.named_parameters())[n]
        assert torch.allclose(g, p.grad, atol=1e-10), n


# ------------------------------------------------------------------ gradient checks

@pytest.mark.parametrize("case", range(7))
def test_gradients_match_finite_differences(case):
    name, fn, params = gradient_suite()[case]
    assert grad_check(fn, params) < GRADIENT_TOLERANCE, name


# ------------------------------------------------------------------ distillation

class _CopyTeacher(OrthrosModel):
    """Text-to-text stub whose AR decoder copies the source (shifted by ``offset``) and then ends."""

    def __init__(self, cfg, offset=0):
        super().__init__(cfg)
        self.offset = offset

    def encode(self, inputs, mask=None):
        src = torch.as_tensor(inputs).long()
        return torch.nn.functional.one_hot(src, self.cfg.v_src).double(), torch.ones(len(src), dtype=torch.bool)

    def ar_forward(self, prefix, enc, enc_mask=None, tok_mask=None):
        src = enc.reshape(-1, enc.shape[-1]).argmax(-1) + self.offset
        B, L = prefix.shape
        logits = torch.full((B, L, self.cfg.v_tgt), -20.0, dtype=torch.float64)
        for i in range(L):
            logits[:, i, src[i] if i < len(src) else EOS] = 0.0
        return logits


def test_distill_identity_teacher_and_cardinality():
    cfg = ModelConfig(v_tgt=12, v_src=12, d_model=8, d_ff=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                      n_max=12, frontend="embed", dropout=0.0)
    teacher = _CopyTeacher(cfg)
    data = [Triplet(np.ones((8, 2), np.float32) * i, np.array([4 + i, 5, 6 + i]), np.array([9, 9]), {"i": i})
            for i in range(4)]
    out = distill_dataset(teacher, data)
    assert len(out) == len(data)
    for a, b in zip(data, out):
        assert b.translation.tolist() == a.transcription.tolist()
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.transcription, b.transcription)
    assert [t.translation.tolist() for t in distill_dataset(teacher, data)] == [t.translation.tolist() for t in out]


def test_distill_lowers_conditional_entropy():
    spec = TaskSpec(v_src_core=3, v_tgt_core=16, len_min=2, len_max=2, d_min=6, d_max=6, synonyms=2,
                    input_dim=4, fertility2_prob=0.0, seed=1)
    data = generate(spec, 0, 300)
    raw = conditional_entropy([(t.transcription, t.translation) for t in data])
    cfg = ModelConfig(v_tgt=spec.v_tgt, v_src=spec.v_src, d_model=8, d_ff=8, n_heads=2, n_enc_layers=1,
                      n_dec_layers=1, n_max=spec.max_target_len, frontend="embed")
    distilled = distill_dataset(_CopyTeacher(cfg, offset=2), data, v_src=spec.v_src, v_tgt=spec.v_tgt)
    kd = conditional_entropy([(t.transcription, t.translation) for t in distilled])
    assert raw > 0.1 and kd < raw


def test_distill_vocab_mismatch_errors():
    teacher = build_model(ModelConfig(v_tgt=8, v_src=6, d_model=8, d_ff=8, n_heads=2, n_enc_layers=1,
                                      n_dec_layers=1, n_max=8, frontend="embed"), seed=0)
    data = tiny_triplets()
    with pytest.raises(ValueError, match="vocabulary"):
        distill_dataset(teacher, data, v_src=7, v_tgt=8)
    with pytest.raises(ValueError, match="vocabulary"):
        distill_dataset(teacher, [Triplet(data[0].frames, np.array([2, 9]), data[0].translation)])
    with pytest.raises(ValueError, match="text-to-text"):
        distill_dataset(tiny_model(), data)


# ------------------------------------------------------------------ training loop

def test_zero_steps_changes_nothing(tmp_path):
    model = tiny_model(double=False)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    res = train(model, tiny_triplets(), TrainConfig(max_steps=0))
    assert res.metrics == []
    assert all(torch.equal(before[n], p) for n, p in model.named_parameters())


def _run(tmp_path, tag, steps=6, **kw):
    model = build_model(ModelConfig(v_tgt=8, v_src=6, d_model=16, d_ff=32, n_heads=2, n_enc_layers=1,
                                    n_dec_layers=1, n_max=12, input_dim=4), seed=0)
    cfg = TrainConfig(max_steps=steps, batch_size=2, warmup_steps=4, eval_every=3, keep_best=2, **kw)
    data = tiny_triplets(6)
    return train(model, data, cfg, out_dir=tmp_path / tag, dev=data[:2], metrics_path=tmp_path / f"{tag}.jsonl")


def test_metrics_stream_checkpoints_and_determinism(tmp_path):
    a = _run(tmp_path, "a", use_smart=True)
    b = _run(tmp_path, "b", use_smart=True)
    strip = [[{k: v for k, v in r.items() if k != "wall_ms"} for r in res.metrics] for res in (a, b)]
    assert strip[0] == strip[1] and len(strip[0]) == 6
    lines = (tmp_path / "a.jsonl").read_text(encoding="utf-8").splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "lr", "loss_total", "loss_cmlm", "loss_ar", "loss_lp", "loss_asr", "wall_ms"}
    assert [json.loads(l)["step"] for l in lines] == list(range(1, 7))
    assert len(a.checkpoints) == 2 and a.averaged.exists() and (tmp_path / "a" / "last.ckpt").exists()
    vals = [v["valid_loss"] for v in a.valid]
    assert len(vals) == 2


def test_gradient_accumulation_runs(tmp_path):
    res = _run(tmp_path, "acc", steps=2, accum_steps=3)
    assert len(res.metrics) == 2


def test_non_finite_loss_aborts_with_record(tmp_path):
    model = tiny_model(double=False)
    with torch.no_grad():
        model.length_head.bias.fill_(float("nan"))
    path = tmp_path / "m.jsonl"
    with pytest.raises(TrainingAborted, match="non-finite"):
        train(model, tiny_triplets(), TrainConfig(max_steps=3, batch_size=2), metrics_path=path)
    rec = json.loads(path.read_text(encoding="utf-8").splitlines()[-1])
    assert rec["error"] == "non-finite loss" and rec["step"] == 1


def test_overfits_small_dataset():
    spec = TaskSpec(seed=5)
    data = generate(spec, 0, 16)
    model = build_model(ModelConfig(v_tgt=spec.v_tgt, v_src=spec.v_src, input_dim=spec.input_dim,
                                    n_max=max(64, spec.max_target_len)), seed=0)
    res = train(model, data, TrainConfig(max_steps=500, batch_size=16))
    first = np.mean([r["loss_total"] for r in res.metrics[:5]])
    last = np.mean([r["loss_total"] for r in res.metrics[-5:]])
    assert last <= 0.5 * first


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict({"use_smart": True, "max_steps": 3})
    assert cfg.use_smart and cfg.max_steps == 3
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(task="bogus")


def test_other_tasks_compute(tmp_path):
    batch = tiny_batch()
    for task in ("asr", "st-ar", "st-ctc"):
        model = tiny_model(ctc_vocab="tgt" if task == "st-ctc" else "src")
        comps = compute_losses(model, batch, TrainConfig(task=task), np.random.default_rng(0))
        assert math.isfinite(comps["total"].item())
    mt = tiny_model(frontend="embed")
    comps = compute_losses(mt, collate(tiny_triplets(), text_input=True), TrainConfig(task="mt"),
                           np.random.default_rng(0))
    assert comps["asr"] is None and math.isfinite(comps["total"].item())
