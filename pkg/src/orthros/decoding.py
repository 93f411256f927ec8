"""Inference: Mask-Predict, length candidates, candidate selection, AR beam search, CTC greedy."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .model import BLANK, BOS, EOS, MASK, N_TGT_SPECIALS, PAD, OrthrosModel
from .numerics import log_softmax, softmax

LENGTH_MODES = ("classifier", "ctc_scale")
MODES = ("nar", "ar", "ctc")


@dataclass
class Hypothesis:
    tokens: List[int]
    confidences: List[float]
    nar_score: Optional[float] = None
    ar_score: Optional[float] = None
    source: str = "nar"
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class DecodeConfig:
    mode: str = "nar"
    iterations: int = 10
    length_beam: int = 9
    beam: int = 4
    use_ar_selection: bool = True
    length_mode: str = "classifier"
    alpha: Optional[float] = None
    max_len: int = 64
    smart_updates: bool = False
    # AR selection averages over N+1 terms including the EOS transition
    ar_score_eos: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.iterations < 1 or self.length_beam < 1 or self.beam < 1:
            raise ValueError("iterations, length_beam and beam must be >= 1")
        if self.length_mode not in LENGTH_MODES:
            raise ValueError(f"unknown length mode {self.length_mode!r}")
        if self.length_mode == "ctc_scale" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("length_mode=ctc_scale requires alpha > 0")


def _selection_key(score: float, h: Hypothesis):
    # higher score first; then shorter; then lexicographically smaller tokens
    return (-score, h.length, h.tokens)


def mask_schedule(n: int, T: int, t: int) -> int:
    """Number of tokens to (re-)mask at iteration ``t`` of ``T`` (linear decay)."""
    if not 0 <= t < T:
        raise ValueError(f"iteration {t} outside [0, {T})")
    if t == 0:
        return n
    return (n * (T - t)) // T


def select_masked_positions(confidences, k: int) -> List[int]:
    conf = torch.as_tensor(confidences, dtype=torch.float64).reshape(-1)
    if not 0 <= k <= conf.numel():
        raise ValueError(f"cannot mask {k} of {conf.numel()} positions")
    order = torch.sort(conf, stable=True).indices[:k]
    return sorted(order.tolist())


def _ban(logits: Tensor, ids: Sequence[int]) -> Tensor:
    out = logits.clone()
    out[..., list(ids)] = float("-inf")
    return out


def _as_batch(enc: Tensor, enc_mask: Optional[Tensor]):
    if enc.dim() == 2:
        enc = enc.unsqueeze(0)
        enc_mask = None if enc_mask is None else enc_mask.unsqueeze(0)
    if enc_mask is None:
        enc_mask = torch.ones(enc.shape[:2], dtype=torch.bool)
    return enc, enc_mask


@torch.no_grad()
def mask_predict(model: OrthrosModel, enc: Tensor, lengths: Union[int, Sequence[int]], T: int,
                 use_smart_updates: bool = False, enc_mask: Optional[Tensor] = None,
                 max_len: Optional[int] = None, trace: Optional[list] = None):
    """Iterative refinement of all-MASK rows, one row per requested length.

    Returns a Hypothesis for an int ``lengths``, otherwise a list in input order.
    ``trace`` (optional) receives, per iteration, the number of changed tokens per row.
    """
    single = isinstance(lengths, int)
    lens = [lengths] if single else list(lengths)
    limit = max_len or model.cfg.n_max
    if T < 1:
        raise ValueError("T must be >= 1")
    for n in lens:
        if not 1 <= n <= limit:
            raise ValueError(f"length {n} outside [1, {limit}]")
    enc, enc_mask = _as_batch(enc, enc_mask)
    B, N = len(lens), max(lens)
    lens_t = torch.tensor(lens)
    valid = torch.arange(N).unsqueeze(0) < lens_t.unsqueeze(1)
    tokens = torch.full((B, N), MASK, dtype=torch.long).masked_fill(~valid, PAD)
    conf = torch.zeros(B, N, dtype=torch.float64)
    banned = list(range(N_TGT_SPECIALS))
    for t in range(T):
        before = tokens.clone()
        masked = valid.clone()
        if t > 0:
            masked.zero_()
            for b, n in enumerate(lens):
                pos = select_masked_positions(conf[b, :n], mask_schedule(n, T, t))
                masked[b, pos] = True
            tokens = tokens.masked_fill(masked, MASK)
        logits = model.nar_forward(tokens, enc, enc_mask, valid)
        probs = softmax(logits.double(), -1)
        probs[..., banned] = 0.0
        p, a = probs.max(-1)
        update = valid if use_smart_updates else masked
        tokens = torch.where(update, a, tokens)
        conf = torch.where(update, p, conf)
        if trace is not None:
            trace.append(((tokens != before) & valid).sum(1).tolist())
    hyps = []
    for b, n in enumerate(lens):
        c = conf[b, :n]
        hyps.append(Hypothesis(tokens=tokens[b, :n].tolist(), confidences=c.tolist(),
                               nar_score=float(c.log().mean()), source="nar"))
    return hyps[0] if single else hyps


def length_candidates(length_logits: Tensor, l: int) -> List[int]:
    n_max = length_logits.shape[-1]
    if not 1 <= l <= n_max:
        raise ValueError(f"length beam {l} outside [1, {n_max}]")
    order = torch.sort(length_logits.reshape(-1), descending=True, stable=True).indices
    return [int(i) + 1 for i in order[:l]]


def ctc_greedy(ctc_logits: Tensor, blank: int = BLANK) -> List[int]:
    best = ctc_logits.argmax(-1).tolist()
    out, prev = [], None
    for s in best:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def fan_out(center: int, l: int, n_max: int) -> List[int]:
    """``center`` then alternating -1, +1, -2, +2, ... offsets, clamped to [1, n_max], deduplicated."""
    out: List[int] = []
    offset = 0
    while len(out) < min(l, n_max):
        for cand in ((center,) if offset == 0 else (center - offset, center + offset)):
            c = min(max(cand, 1), n_max)
            if c not in out and len(out) < l:
                out.append(c)
        offset += 1
    return out


def ctc_length_estimate(ctc_logits: Tensor, alpha: float, l: int = 1, n_max: int = 64
                        ) -> Tuple[int, List[int]]:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    n_src = len(ctc_greedy(ctc_logits))
    center = min(max(int(np.floor(alpha * n_src)), 1), n_max)
    return center, fan_out(center, l, n_max)


@torch.no_grad()
def score_candidates_ar(model: OrthrosModel, enc: Tensor, candidates: Sequence[Hypothesis],
                        enc_mask: Optional[Tensor] = None, include_eos: bool = True) -> List[float]:
    """Mean teacher-forced AR log-probability of each candidate, all in one decoder pass."""
    if not candidates:
        raise ValueError("no candidates to score")
    enc, enc_mask = _as_batch(enc, enc_mask)
    B = len(candidates)
    n = torch.tensor([h.length for h in candidates])
    width = int(n.max()) + 1
    inp = torch.full((B, width), PAD, dtype=torch.long)
    tgt = torch.full((B, width), PAD, dtype=torch.long)
    for b, h in enumerate(candidates):
        inp[b, 0] = BOS
        inp[b, 1:h.length + 1] = torch.tensor(h.tokens, dtype=torch.long)
        tgt[b, :h.length] = torch.tensor(h.tokens, dtype=torch.long)
        tgt[b, h.length] = EOS
    tok_mask = torch.arange(width).unsqueeze(0) < (n + 1).unsqueeze(1)
    lp = log_softmax(model.ar_forward(inp, enc, enc_mask, tok_mask).double(), -1)
    picked = lp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    terms = n + 1 if include_eos else n
    keep = torch.arange(width).unsqueeze(0) < terms.unsqueeze(1)
    sums = (picked * keep).sum(1)
    return (sums / terms.clamp(min=1)).tolist()


def select_candidate_ar(model: OrthrosModel, enc: Tensor, candidates: Sequence[Hypothesis],
                        enc_mask: Optional[Tensor] = None, include_eos: bool = True) -> Hypothesis:
    scores = score_candidates_ar(model, enc, candidates, enc_mask, include_eos)
    scored = [replace(h, ar_score=s) for h, s in zip(candidates, scores)]
    return min(scored, key=lambda h: _selection_key(h.ar_score, h))


def select_candidate_nar(candidates: Sequence[Hypothesis]) -> Hypothesis:
    if not candidates:
        raise ValueError("no candidates to select from")
    return min(candidates, key=lambda h: _selection_key(h.nar_score, h))


@torch.no_grad()
def beam_search_ar(model: OrthrosModel, enc: Tensor, b: int, max_len: int,
                   enc_mask: Optional[Tensor] = None) -> Hypothesis:
    """Beam search scored by mean log-probability (EOS included); ``max_len`` counts decoder steps."""
    if b < 1:
        raise ValueError("beam width must be >= 1")
    enc, enc_mask = _as_batch(enc, enc_mask)
    banned = [PAD, BOS, MASK]
    beams: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Tuple[List[int], float]] = []
    for step in range(max_len):
        prefix = torch.tensor([[BOS] + toks for toks, _ in beams], dtype=torch.long)
        lp = log_softmax(model.ar_forward(prefix, enc, enc_mask)[:, -1].double(), -1)
        base = torch.tensor([s for _, s in beams], dtype=torch.float64)
        total = _ban(base.unsqueeze(1) + lp, banned)
        V = total.shape[1]
        order = torch.sort(total.reshape(-1), descending=True, stable=True).indices
        # EOS candidates ranked within the top b finish; the live beam is refilled to b from the
        # best non-EOS continuations, so finishing short hypotheses never starves longer ones
        new_beams = []
        for rank, idx in enumerate(order[:2 * b].tolist()):
            score = float(total.view(-1)[idx])
            if score == float("-inf") or len(new_beams) == b:
                break
            bi, tok = divmod(idx, V)
            toks = beams[bi][0]
            if tok != EOS:
                new_beams.append((toks + [tok], score))
            elif rank < b:
                finished.append((toks, score))
        beams = new_beams
        if not beams or len(finished) >= b:
            break
    if finished:
        hyps = [Hypothesis(t, [], ar_score=s / (len(t) + 1), source="ar") for t, s in finished]
        return min(hyps, key=lambda h: _selection_key(h.ar_score, h))
    hyps = [Hypothesis(t, [], ar_score=s / max(len(t), 1), source="ar", truncated=True)
            for t, s in beams]
    return min(hyps, key=lambda h: _selection_key(h.ar_score, h))


def decode_nar(model: OrthrosModel, enc: Tensor, enc_mask: Optional[Tensor], cfg: DecodeConfig
               ) -> Tuple[Hypothesis, List[Hypothesis]]:
    if cfg.length_mode == "classifier":
        lengths = length_candidates(model.length_logits(enc, enc_mask), min(cfg.length_beam, model.cfg.n_max))
    else:
        if model.cfg.ctc_vocab != "src":
            raise ValueError("ctc_scale length mode needs a transcription CTC head")
        _, lengths = ctc_length_estimate(model.ctc_logits(enc), cfg.alpha, cfg.length_beam, model.cfg.n_max)
    lengths = [min(n, cfg.max_len) for n in lengths]
    lengths = list(dict.fromkeys(lengths))
    cands = mask_predict(model, enc, lengths, cfg.iterations, cfg.smart_updates, enc_mask, cfg.max_len)
    if cfg.use_ar_selection and len(cands) > 1:
        best = select_candidate_ar(model, enc, cands, enc_mask, cfg.ar_score_eos)
    elif cfg.use_ar_selection:
        best = replace(cands[0], ar_score=score_candidates_ar(model, enc, cands, enc_mask, cfg.ar_score_eos)[0])
    else:
        best = select_candidate_nar(cands)
    return best, cands


@torch.no_grad()
def translate(model: OrthrosModel, frames, cfg: DecodeConfig) -> Hypothesis:
    """Speech frames ``[U, input_dim]`` (or source ids for a text model) to a translation."""
    x = torch.as_tensor(frames)
    if model.cfg.frontend == "conv":
        x = x.to(next(model.parameters()).dtype)
    else:
        x = x.long()
    enc, enc_mask = model.encode(x)
    if cfg.mode == "ar":
        return beam_search_ar(model, enc, cfg.beam, cfg.max_len, enc_mask)
    if cfg.mode == "ctc":
        if model.cfg.ctc_vocab != "tgt":
            raise ValueError("ctc mode needs a model with a translation-vocabulary CTC head")
        logits = model.ctc_logits(enc)
        toks = [s for s in ctc_greedy(logits) if s >= N_TGT_SPECIALS]
        return Hypothesis(toks, [1.0] * len(toks), source="ctc")
    best, _ = decode_nar(model, enc, enc_mask, cfg)
    return best
