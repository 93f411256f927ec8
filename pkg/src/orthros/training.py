"""Loss terms, the joint objective, sequence-level distillation and the training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import average_checkpoints, read_checkpoint, save_checkpoint
from .decoding import beam_search_ar
from .model import BLANK, BOS, EOS, MASK, N_TGT_SPECIALS, PAD, OrthrosModel
from .numerics import OptimizerState, adam_step, backward, log_softmax, token_nll
from .synthdata import Triplet, augment_frames, ctc_min_frames

log = logging.getLogger(__name__)

TASKS = ("asr", "mt", "st-ar", "st-orthros", "st-ctc")
# finite stand-in for log(0); keeps logsumexp gradients free of NaN
NEG = -1e30


@dataclass
class TrainConfig:
    task: str = "st-orthros"
    lambda_ar: float = 0.3
    lambda_lp: float = 0.1
    lambda_asr: float = 0.3
    use_smart: bool = False
    smart_pass1_loss: bool = False
    use_seq_kd: bool = False
    label_smoothing: float = 0.1
    cmlm_smoothing: float = 0.0
    batch_size: int = 64
    accum_steps: int = 1
    max_steps: int = 2000
    warmup_steps: int = 400
    lr_constant: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    keep_best: int = 5
    eval_every: int = 200
    max_eval: int = 256
    time_mask_len: int = 0
    n_time_masks: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("lambda_ar", "lambda_lp", "lambda_asr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_asr >= 1:
            raise ValueError("lambda_asr must be < 1")
        if self.batch_size < 1 or self.accum_steps < 1 or self.max_steps < 0:
            raise ValueError("batch_size/accum_steps must be >= 1 and max_steps >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    inputs: Tensor        # frames [B, U, D] or source ids [B, S] (text front-end)
    input_mask: Tensor    # [B, U]
    src: Tensor           # transcription ids [B, S], PAD padded
    src_lens: Tensor
    tgt: Tensor           # translation ids [B, N], PAD padded
    tgt_lens: Tensor

    def __len__(self) -> int:
        return self.tgt.shape[0]


def _pad(seqs: Sequence[np.ndarray], value: int = 0) -> tuple:
    lens = torch.tensor([len(s) for s in seqs])
    out = torch.full((len(seqs), max(int(lens.max()), 1)), value, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(np.asarray(s, dtype=np.int64))
    return out, lens


def collate(items: Sequence[Triplet], text_input: bool = False, dtype=None,
            rng: Optional[np.random.Generator] = None, time_mask_len: int = 0, n_time_masks: int = 0) -> Batch:
    src, src_lens = _pad([t.transcription for t in items])
    tgt, tgt_lens = _pad([t.translation for t in items])
    if text_input:
        inputs, lens = src, src_lens
    else:
        frames = [t.frames for t in items]
        if rng is not None and n_time_masks > 0:
            frames = [augment_frames(f, rng, time_mask_len, n_time_masks)
                      if f.shape[0] > time_mask_len else f for f in frames]
        lens = torch.tensor([f.shape[0] for f in frames])
        inputs = torch.zeros(len(items), int(lens.max()), frames[0].shape[1],
                             dtype=dtype or torch.get_default_dtype())
        for i, f in enumerate(frames):
            inputs[i, :len(f)] = torch.from_numpy(f)
    mask = torch.arange(inputs.shape[1]).unsqueeze(0) < lens.unsqueeze(1)
    return Batch(inputs, mask, src, src_lens, tgt, tgt_lens)


# ---------------------------------------------------------------- masking

@dataclass
class MaskedBatch:
    y_obs: Tensor     # [B, N] ground truth with MASK at sampled positions, PAD beyond length
    mask: Tensor      # [B, N] bool, sampled positions
    y: Tensor         # [B, N] ground truth
    lengths: Tensor   # [B]

    @property
    def valid(self) -> Tensor:
        return torch.arange(self.y.shape[1]).unsqueeze(0) < self.lengths.unsqueeze(1)


def sample_mask(y, rng: np.random.Generator):
    """Mask k ~ U{1..N} distinct positions of one row. Returns ``(y_obs, mask)``."""
    y = torch.as_tensor(y, dtype=torch.long)
    n = y.shape[0]
    if n < 1:
        raise ValueError("cannot mask an empty sequence")
    k = int(rng.integers(1, n + 1))
    pos = rng.choice(n, size=k, replace=False)
    mask = torch.zeros(n, dtype=torch.bool)
    mask[torch.as_tensor(pos)] = True
    return y.masked_fill(mask, MASK), mask


def mask_batch(y: Tensor, lengths: Tensor, rng: np.random.Generator) -> MaskedBatch:
    y_obs = y.clone()
    mask = torch.zeros_like(y, dtype=torch.bool)
    for b, n in enumerate(lengths.tolist()):
        y_obs[b, :n], mask[b, :n] = sample_mask(y[b, :n], rng)
    return MaskedBatch(y_obs, mask, y, lengths)


# ---------------------------------------------------------------- losses

def _row_mean(values: Tensor, keep: Tensor) -> Tensor:
    """Per-row mean over ``keep`` positions, then mean over rows."""
    counts = keep.sum(1)
    if (counts == 0).any():
        raise ValueError("empty loss")
    return ((values * keep).sum(1) / counts).mean()


def cmlm_loss_from_logits(logits: Tensor, mb: MaskedBatch, smoothing: float = 0.0) -> Tensor:
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    nll = token_nll(logits, mb.y, smoothing)
    return _row_mean(nll, mb.mask & mb.valid)


def cmlm_loss(model: OrthrosModel, mb: MaskedBatch, enc: Tensor, enc_mask: Optional[Tensor] = None,
              smoothing: float = 0.0) -> Tensor:
    if not mb.mask.any():
        raise ValueError("no masked positions")
    logits = model.nar_forward(mb.y_obs, enc, enc_mask, mb.valid)
    return cmlm_loss_from_logits(logits, mb, smoothing)


def smart_loss(model: OrthrosModel, y: Tensor, lengths: Tensor, enc: Tensor, enc_mask: Optional[Tensor],
               rng: np.random.Generator, pass1_loss: bool = False, pass1_grad: bool = False,
               smoothing: float = 0.0) -> Tensor:
    """Two-pass loss: re-mask the model's own argmax predictions and score every position of pass 2.

    Pass-1 predictions are constants. ``pass1_grad`` runs pass 1 inside the autograd
    graph (truncated at the argmax) instead of under ``no_grad``; both give the same
    gradients. ``pass1_loss`` adds the ordinary masked loss of pass 1.
    """
    mb1 = mask_batch(y, lengths, rng)
    valid = mb1.valid
    if pass1_loss or pass1_grad:
        logits1 = model.nar_forward(mb1.y_obs, enc, enc_mask, valid)
    else:
        with torch.no_grad():
            logits1 = model.nar_forward(mb1.y_obs, enc, enc_mask, valid)
    scores = logits1.detach().clone()
    scores[..., :N_TGT_SPECIALS] = float("-inf")
    y_hat = scores.argmax(-1).masked_fill(~valid, PAD)
    mb2 = mask_batch(y_hat, lengths, rng)
    logits2 = model.nar_forward(mb2.y_obs, enc, enc_mask, valid)
    loss = _row_mean(token_nll(logits2, y, smoothing), valid)
    if pass1_loss:
        loss = loss + cmlm_loss_from_logits(logits1, mb1, smoothing)
    return loss


def ar_io(y: Tensor, lengths: Tensor):
    """BOS-prefixed decoder input, EOS-suffixed target, and the mask over N+1 positions."""
    B, N = y.shape
    inp = torch.full((B, N + 1), PAD, dtype=torch.long)
    tgt = torch.full((B, N + 1), PAD, dtype=torch.long)
    inp[:, 0] = BOS
    for b, n in enumerate(lengths.tolist()):
        inp[b, 1:n + 1] = y[b, :n]
        tgt[b, :n] = y[b, :n]
        tgt[b, n] = EOS
    keep = torch.arange(N + 1).unsqueeze(0) < (lengths + 1).unsqueeze(1)
    return inp, tgt, keep


def ar_loss(model: OrthrosModel, y: Tensor, lengths: Tensor, enc: Tensor, enc_mask: Optional[Tensor] = None,
            smoothing: float = 0.1) -> Tensor:
    if y.dim() == 1:
        y, lengths = y.unsqueeze(0), torch.as_tensor([y.shape[0]])
    if (lengths < 1).any():
        raise ValueError("empty target sequence")
    inp, tgt, keep = ar_io(y, lengths)
    logits = model.ar_forward(inp, enc, enc_mask, keep)
    return _row_mean(token_nll(logits, tgt, smoothing), keep)


def length_loss(length_logits: Tensor, lengths) -> Tensor:
    if length_logits.dim() == 1:
        length_logits = length_logits.unsqueeze(0)
    lengths = torch.as_tensor(lengths, dtype=torch.long).reshape(-1)
    n_max = length_logits.shape[-1]
    if ((lengths < 1) | (lengths > n_max)).any():
        raise ValueError(f"target length outside [1, {n_max}]")
    return token_nll(length_logits, lengths - 1).mean()


def ctc_loss(logits: Tensor, targets, input_lengths=None, blank: int = BLANK,
             reduction: str = "mean_token") -> Tensor:
    """CTC negative log-likelihood by the log-space forward recursion.

    ``logits``: ``[T, V]`` or ``[B, T, V]``; ``targets``: one id sequence or a list of them.
    ``reduction``: "none" (per row), "sum", or "mean_token" (per-row NLL divided by
    target length, averaged over rows).
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        targets = [targets]
    B, T, V = logits.shape
    targets = [list(map(int, torch.as_tensor(t).reshape(-1).tolist())) for t in targets]
    if len(targets) != B:
        raise ValueError("one target sequence per batch row required")
    in_lens = [T] * B if input_lengths is None else [int(x) for x in torch.as_tensor(input_lengths).tolist()]
    for tgt, u in zip(targets, in_lens):
        if ctc_min_frames(tgt) > u:
            raise ValueError("target longer than input")
        if any(s == blank or not 0 <= s < V for s in tgt):
            raise ValueError("invalid CTC target id")
    L = max(max(len(t) for t in targets), 1)
    S = 2 * L + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool)
    for b, tgt in enumerate(targets):
        for i, s in enumerate(tgt):
            ext[b, 2 * i + 1] = s
            if i > 0 and tgt[i - 1] != s:
                skip[b, 2 * i + 1] = True
    lp = log_softmax(logits, -1)
    emit = lp.gather(2, ext.unsqueeze(1).expand(B, T, S))   # [B, T, S]
    neg = torch.full((B, S), NEG, dtype=lp.dtype)
    init_ok = torch.zeros(B, S, dtype=torch.bool)
    init_ok[:, 0] = True
    init_ok[:, 1] = torch.tensor([len(t) > 0 for t in targets])
    alpha = torch.where(init_ok, emit[:, 0], neg)
    neg1 = torch.full((B, 1), NEG, dtype=lp.dtype)
    neg2 = torch.full((B, 2), NEG, dtype=lp.dtype)
    in_lens_t = torch.tensor(in_lens)
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg1, alpha[:, :-1]], dim=1)
        jump = torch.where(skip, torch.cat([neg2, alpha[:, :-2]], dim=1), neg)
        nxt = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where((t < in_lens_t).unsqueeze(1), nxt, alpha)
    ends = []
    for b, tgt in enumerate(targets):
        last = 2 * len(tgt)
        if len(tgt) == 0:
            ends.append(alpha[b, 0])
        else:
            ends.append(torch.logsumexp(alpha[b, last - 1:last + 1], dim=0))
    nll = -torch.stack(ends)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean_token":
        norm = torch.tensor([max(len(t), 1) for t in targets], dtype=nll.dtype)
        return (nll / norm).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def total_loss(components: Dict[str, Tensor], cfg: TrainConfig) -> Tensor:
    """(1 - l_asr) L_cmlm + l_ar L_ar + l_lp L_lp + l_asr L_asr; absent components count as 0."""
    for name in ("lambda_ar", "lambda_lp", "lambda_asr"):
        if getattr(cfg, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    weights = {"cmlm": 1.0 - cfg.lambda_asr, "ar": cfg.lambda_ar, "lp": cfg.lambda_lp, "asr": cfg.lambda_asr}
    out = 0.0
    for name, w in weights.items():
        if name in components and components[name] is not None:
            out = out + w * components[name]
    return out


# ---------------------------------------------------------------- forward for one batch

def _ctc_inputs(model: OrthrosModel, enc: Tensor, enc_mask: Tensor, seqs: Tensor, lens: Tensor) -> Tensor:
    targets = [seqs[b, :n] for b, n in enumerate(lens.tolist())]
    return ctc_loss(model.ctc_logits(enc), targets, enc_mask.sum(1), reduction="mean_token")


def compute_losses(model: OrthrosModel, batch: Batch, cfg: TrainConfig, rng: np.random.Generator
                   ) -> Dict[str, Tensor]:
    """All component losses for ``cfg.task`` plus ``"total"``, sharing a single encoder pass."""
    enc, enc_mask = model.encode(batch.inputs, batch.input_mask)
    comps: Dict[str, Optional[Tensor]] = {"cmlm": None, "ar": None, "lp": None, "asr": None}
    if cfg.task == "st-orthros":
        if cfg.use_smart:
            comps["cmlm"] = smart_loss(model, batch.tgt, batch.tgt_lens, enc, enc_mask, rng,
                                       pass1_loss=cfg.smart_pass1_loss, smoothing=cfg.cmlm_smoothing)
        else:
            comps["cmlm"] = cmlm_loss(model, mask_batch(batch.tgt, batch.tgt_lens, rng), enc, enc_mask,
                                      cfg.cmlm_smoothing)
        if cfg.lambda_ar > 0:
            comps["ar"] = ar_loss(model, batch.tgt, batch.tgt_lens, enc, enc_mask, cfg.label_smoothing)
        if cfg.lambda_lp > 0:
            comps["lp"] = length_loss(model.length_logits(enc, enc_mask), batch.tgt_lens)
        if cfg.lambda_asr > 0:
            comps["asr"] = _ctc_inputs(model, enc, enc_mask, batch.src, batch.src_lens)
        total = total_loss(comps, cfg)
    elif cfg.task == "st-ar":
        comps["ar"] = ar_loss(model, batch.tgt, batch.tgt_lens, enc, enc_mask, cfg.label_smoothing)
        total = comps["ar"]
        if cfg.lambda_asr > 0:
            comps["asr"] = _ctc_inputs(model, enc, enc_mask, batch.src, batch.src_lens)
            total = (1 - cfg.lambda_asr) * comps["ar"] + cfg.lambda_asr * comps["asr"]
    elif cfg.task == "mt":
        comps["ar"] = ar_loss(model, batch.tgt, batch.tgt_lens, enc, enc_mask, cfg.label_smoothing)
        total = comps["ar"]
    elif cfg.task == "asr":
        comps["asr"] = _ctc_inputs(model, enc, enc_mask, batch.src, batch.src_lens)
        total = comps["asr"]
    else:  # st-ctc: a single CTC objective over the translation
        total = _ctc_inputs(model, enc, enc_mask, batch.tgt, batch.tgt_lens)
    comps["total"] = total
    return comps


# ---------------------------------------------------------------- distillation

@torch.no_grad()
def distill_dataset(teacher: OrthrosModel, data: Sequence[Triplet], beam: int = 4,
                    v_src: Optional[int] = None, v_tgt: Optional[int] = None,
                    max_len: Optional[int] = None) -> List[Triplet]:
    """Replace every translation with the teacher's beam-search output on the transcription."""
    if teacher.cfg.frontend != "embed":
        raise ValueError("teacher must be a text-to-text model")
    if (v_src is not None and v_src != teacher.cfg.v_src) or (v_tgt is not None and v_tgt != teacher.cfg.v_tgt):
        raise ValueError("teacher vocabulary does not match the dataset")
    teacher.eval()
    out = []
    for t in data:
        if t.transcription.size and int(t.transcription.max()) >= teacher.cfg.v_src:
            raise ValueError("teacher vocabulary does not match the dataset")
        enc, enc_mask = teacher.encode(torch.as_tensor(t.transcription, dtype=torch.long))
        hyp = beam_search_ar(teacher, enc, beam, max_len or teacher.cfg.n_max, enc_mask)
        # an empty teacher output would leave nothing to train the CMLM on
        tokens = hyp.tokens if hyp.tokens else t.translation.tolist()
        out.append(replace(t, translation=np.asarray(tokens, dtype=np.int64), metadata=dict(t.metadata)))
    return out


# ---------------------------------------------------------------- training loop

class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    metrics: List[dict]
    checkpoints: List[Path] = field(default_factory=list)
    averaged: Optional[Path] = None
    valid: List[dict] = field(default_factory=list)


def batches(data: Sequence[Triplet], batch_size: int, rng: np.random.Generator) -> Iterator[List[Triplet]]:
    while True:
        order = rng.permutation(len(data))
        for i in range(0, len(order), batch_size):
            yield [data[j] for j in order[i:i + batch_size]]


@torch.no_grad()
def evaluate_loss(model: OrthrosModel, data: Sequence[Triplet], cfg: TrainConfig, batch_size: int = 64) -> float:
    was = model.training
    model.eval()
    rng = np.random.default_rng([cfg.seed, 0xE7A1])
    text = model.cfg.frontend == "embed"
    total, count = 0.0, 0
    subset = list(data[:cfg.max_eval])
    for i in range(0, len(subset), batch_size):
        chunk = subset[i:i + batch_size]
        comps = compute_losses(model, collate(chunk, text), cfg, rng)
        total += float(comps["total"]) * len(chunk)
        count += len(chunk)
    model.train(was)
    return total / max(count, 1)


def init_from(model: OrthrosModel, path, prefixes: Sequence[str]) -> int:
    """Copy parameters under ``prefixes`` from a checkpoint; returns the number copied."""
    _, state = read_checkpoint(path)
    own = model.state_dict()
    n = 0
    with torch.no_grad():
        for name, value in state.items():
            if any(name.startswith(p) for p in prefixes):
                if name not in own or own[name].shape != value.shape:
                    raise ValueError(f"cannot initialise {name} from {path}: shape mismatch")
                own[name].copy_(value.to(own[name].dtype))
                n += 1
    if n == 0:
        raise ValueError(f"no parameters matching {list(prefixes)} in {path}")
    return n


def _metric(v) -> Optional[float]:
    return None if v is None else float(v.detach()) if torch.is_tensor(v) else float(v)


def train(model: OrthrosModel, data: Sequence[Triplet], cfg: TrainConfig, out_dir=None,
          dev: Optional[Sequence[Triplet]] = None, metrics_path=None, teacher: Optional[OrthrosModel] = None,
          init_encoder=None, init_ar_decoder=None) -> TrainResult:
    """Joint training loop; keeps the ``keep_best`` checkpoints by validation loss and averages them."""
    if not data:
        raise ValueError("empty training set")
    if cfg.use_seq_kd and teacher is not None:
        data = distill_dataset(teacher, data)
    if init_encoder is not None:
        init_from(model, init_encoder, ["encoder."])
    if init_ar_decoder is not None:
        init_from(model, init_ar_decoder, ["ar_decoder.", "tgt_embed."])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    aug_rng = np.random.default_rng([cfg.seed, 0xA06])
    state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, warmup_steps=cfg.warmup_steps,
                           lr_constant=cfg.lr_constant, d_model=model.cfg.d_model)
    params = [(n, p) for n, p in model.named_parameters()]
    text = model.cfg.frontend == "embed"
    stream = batches(data, cfg.batch_size, rng)
    result = TrainResult(metrics=[])
    best: List[tuple] = []   # (loss, step, path)
    mfile = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    model.train()
    try:
        for step in range(1, cfg.max_steps + 1):
            t0 = time.perf_counter()
            for p in model.parameters():
                p.grad = None
            sums = {"total": 0.0, "cmlm": None, "ar": None, "lp": None, "asr": None}
            for _ in range(cfg.accum_steps):
                batch = collate(next(stream), text, rng=aug_rng, time_mask_len=cfg.time_mask_len,
                                n_time_masks=cfg.n_time_masks)
                comps = compute_losses(model, batch, cfg, rng)
                if not torch.isfinite(comps["total"]):
                    rec = {"step": step, "error": "non-finite loss",
                           **{f"loss_{k}": _metric(v) for k, v in comps.items()}}
                    if mfile:
                        mfile.write(json.dumps(rec) + "\n")
                    raise TrainingAborted(json.dumps(rec))
                backward(comps["total"])
                for k, v in comps.items():
                    if v is not None:
                        sums[k] = (sums[k] or 0.0) + float(v.detach()) / cfg.accum_steps
            lr = state.lr()
            adam_step(params, state, lr)
            rec = {"step": step, "lr": lr, "loss_total": sums["total"], "loss_cmlm": sums["cmlm"],
                   "loss_ar": sums["ar"], "loss_lp": sums["lp"], "loss_asr": sums["asr"],
                   "wall_ms": (time.perf_counter() - t0) * 1000.0}
            result.metrics.append(rec)
            if mfile:
                mfile.write(json.dumps(rec) + "\n")
            if dev and (step % cfg.eval_every == 0 or step == cfg.max_steps):
                vloss = evaluate_loss(model, dev, cfg)
                result.valid.append({"step": step, "valid_loss": vloss})
                log.info("step %d valid %.4f", step, vloss)
                if out_dir is not None:
                    best = _keep_best(model, best, vloss, step, out_dir, cfg.keep_best)
    finally:
        if mfile:
            mfile.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model)
        if best:
            result.checkpoints = [p for _, _, p in sorted(best)]
            result.averaged = save_checkpoint(out_dir / "avg.ckpt", average_checkpoints(result.checkpoints))
    model.eval()
    return result


def _keep_best(model, best, vloss, step, out_dir: Path, k: int):
    if len(best) < k or vloss < max(best)[0]:
        path = save_checkpoint(out_dir / f"step{step:07d}.ckpt", model)
        best = sorted(best + [(vloss, step, path)])
        for _, _, p in best[k:]:
            p.unlink(missing_ok=True)
        best = best[:k]
    return best
