"""Shared speech encoder with NAR (CMLM) and AR decoders, a length classifier and a CTC head."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

# target-side reserved ids
PAD = 0
BOS = 1
EOS = 2
MASK = 3
N_TGT_SPECIALS = 4
# source/CTC-side reserved ids
SRC_PAD = 0
BLANK = 1
N_SRC_SPECIALS = 2


@dataclass
class ModelConfig:
    v_tgt: int
    v_src: int
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    n_max: int = 64
    input_dim: int = 16
    dropout: float = 0.1
    # "conv": speech frames through the 4x-downsampling front-end; "embed": source token ids (MT teacher)
    frontend: str = "conv"
    # "src": CTC over transcription vocabulary (auxiliary ASR); "tgt": over translation vocabulary (CTC baseline)
    ctc_vocab: str = "src"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.frontend not in ("conv", "embed"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.ctc_vocab not in ("src", "tgt"):
            raise ValueError(f"unknown ctc_vocab {self.ctc_vocab!r}")
        if self.v_tgt <= N_TGT_SPECIALS or self.v_src <= N_SRC_SPECIALS:
            raise ValueError("vocabulary too small for reserved ids")

    @classmethod
    def full_scale(cls, v_tgt: int, v_src: int, **kw) -> "ModelConfig":
        base = dict(d_model=256, d_ff=2048, n_heads=4, n_enc_layers=12, n_dec_layers=6)
        base.update(kw)
        return cls(v_tgt=v_tgt, v_src=v_src, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Vocabulary:
    """Bidirectional token <-> id map with fixed reserved ids."""

    def __init__(self, specials: Sequence[str], size: int, prefix: str):
        if size < len(specials):
            raise ValueError("vocabulary smaller than its reserved set")
        self.itos: List[str] = list(specials) + [f"{prefix}{i}" for i in range(size - len(specials))]
        self.stoi: Dict[str, int] = {s: i for i, s in enumerate(self.itos)}

    @classmethod
    def target(cls, size: int) -> "Vocabulary":
        return cls(["<pad>", "<s>", "</s>", "<mask>"], size, "y")

    @classmethod
    def source(cls, size: int) -> "Vocabulary":
        return cls(["<pad>", "<blank>"], size, "x")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]


def sinusoidal_positions(length: int, d_model: int, dtype=None) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe.to(dtype or torch.get_default_dtype())


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.h = n_heads
        self.dk = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, mem: Tensor, allowed: Tensor) -> Tensor:
        # allowed: bool, broadcastable to [B, Lq, Lk]; True where attention is permitted
        B, Lq, D = x.shape
        Lk = mem.shape[1]
        q = self.q(x).view(B, Lq, self.h, self.dk).transpose(1, 2)
        k = self.k(mem).view(B, Lk, self.h, self.dk).transpose(1, 2)
        v = self.v(mem).view(B, Lk, self.h, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        scores = scores.masked_fill(~allowed.unsqueeze(1), torch.finfo(scores.dtype).min)
        att = self.drop(torch.softmax(scores, dim=-1))
        out = (att @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.w2(self.drop(F.relu(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = self.norm1(x + self.drop(self.self_attn(x, x, mask.unsqueeze(1))))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y: Tensor, self_allowed: Tensor, enc: Tensor, enc_mask: Tensor) -> Tensor:
        y = self.norm1(y + self.drop(self.self_attn(y, y, self_allowed)))
        y = self.norm2(y + self.drop(self.cross_attn(y, enc, enc_mask.unsqueeze(1))))
        return self.norm3(y + self.drop(self.ffn(y)))


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.frontend == "conv":
            self.conv1 = nn.Conv1d(cfg.input_dim, cfg.d_model, kernel_size=3, stride=2, padding=1)
            self.conv2 = nn.Conv1d(cfg.d_model, cfg.d_model, kernel_size=3, stride=2, padding=1)
        else:
            self.embed = nn.Embedding(cfg.v_src, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.drop = nn.Dropout(cfg.dropout)

    def _subsample(self, frames: Tensor, mask: Tensor):
        x = frames.masked_fill(~mask.unsqueeze(-1), 0.0).transpose(1, 2)
        lengths = mask.sum(1)
        for conv in (self.conv1, self.conv2):
            x = F.relu(conv(x))
            lengths = (lengths + 1) // 2
            valid = torch.arange(x.shape[-1]).unsqueeze(0) < lengths.unsqueeze(1)
            x = x.masked_fill(~valid.unsqueeze(1), 0.0)
        return x.transpose(1, 2), valid

    def forward(self, inputs: Tensor, mask: Tensor):
        if self.cfg.frontend == "conv":
            if (mask.sum(1) < 4).any():
                raise ValueError("utterance too short")
            x, out_mask = self._subsample(inputs, mask)
            x = x * math.sqrt(self.cfg.d_model)
        else:
            if (mask.sum(1) < 1).any():
                raise ValueError("empty source sentence")
            x = self.embed(inputs) * math.sqrt(self.cfg.d_model)
            out_mask = mask
        x = self.drop(x + sinusoidal_positions(x.shape[1], self.cfg.d_model, x.dtype))
        for layer in self.layers:
            x = layer(x, out_mask)
        return x, out_mask


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, causal: bool):
        super().__init__()
        self.causal = causal
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.out = nn.Linear(cfg.d_model, cfg.v_tgt)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, emb: Tensor, tok_mask: Tensor, enc: Tensor, enc_mask: Tensor) -> Tensor:
        N = emb.shape[1]
        allowed = tok_mask.unsqueeze(1).expand(-1, N, -1)
        if self.causal:
            allowed = allowed & torch.ones(N, N, dtype=torch.bool).tril()
        y = self.drop(emb)
        for layer in self.layers:
            y = layer(y, allowed, enc, enc_mask)
        return self.out(y)


class OrthrosModel(nn.Module):
    """One encoder shared by four heads: CMLM decoder, AR decoder, length classifier, CTC."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SpeechEncoder(cfg)
        self.tgt_embed = nn.Embedding(cfg.v_tgt, cfg.d_model)
        self.nar_decoder = Decoder(cfg, causal=False)
        self.ar_decoder = Decoder(cfg, causal=True)
        self.length_head = nn.Linear(cfg.d_model, cfg.n_max)
        self.ctc_head = nn.Linear(cfg.d_model, cfg.v_tgt if cfg.ctc_vocab == "tgt" else cfg.v_src)
        self.calls: Counter = Counter()

    def _embed_targets(self, tokens: Tensor) -> Tensor:
        x = self.tgt_embed(tokens) * math.sqrt(self.cfg.d_model)
        return x + sinusoidal_positions(tokens.shape[1], self.cfg.d_model, x.dtype)

    @staticmethod
    def _batched(x: Tensor, mask: Optional[Tensor], ndim: int):
        single = x.dim() == ndim
        if single:
            x = x.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool)
        return x, mask, single

    def encode(self, inputs: Tensor, mask: Optional[Tensor] = None):
        """Encode frames ``[B, U, input_dim]`` (or token ids for the text front-end).

        Returns ``(states [B, U', d_model], valid mask [B, U'])``; an unbatched input
        gives unbatched outputs.
        """
        ndim = 2 if self.cfg.frontend == "conv" else 1
        inputs, mask, single = self._batched(inputs, mask, ndim)
        if self.cfg.frontend == "conv" and inputs.shape[1] < 4:
            raise ValueError("utterance too short")
        self.calls["encode"] += 1
        enc, enc_mask = self.encoder(inputs, mask)
        if single:
            return enc[0], enc_mask[0]
        return enc, enc_mask

    def _decode(self, decoder: Decoder, tokens, tok_mask, enc, enc_mask):
        tokens, tok_mask, single = self._batched(tokens, tok_mask, 1)
        if enc.dim() == 2:
            enc = enc.unsqueeze(0)
            enc_mask = None if enc_mask is None else enc_mask.unsqueeze(0)
        if enc_mask is None:
            enc_mask = torch.ones(enc.shape[:2], dtype=torch.bool)
        if enc.shape[0] == 1 and tokens.shape[0] > 1:
            enc = enc.expand(tokens.shape[0], -1, -1)
            enc_mask = enc_mask.expand(tokens.shape[0], -1)
        logits = decoder(self._embed_targets(tokens), tok_mask, enc, enc_mask)
        return logits[0] if single else logits

    def nar_forward(self, obs_tokens: Tensor, enc: Tensor, enc_mask: Optional[Tensor] = None,
                    tok_mask: Optional[Tensor] = None) -> Tensor:
        if obs_tokens.shape[-1] == 0:
            raise ValueError("empty target length")
        self.calls["nar"] += 1 if obs_tokens.dim() == 1 else obs_tokens.shape[0]
        return self._decode(self.nar_decoder, obs_tokens, tok_mask, enc, enc_mask)

    def ar_forward(self, prefix: Tensor, enc: Tensor, enc_mask: Optional[Tensor] = None,
                   tok_mask: Optional[Tensor] = None) -> Tensor:
        if prefix.shape[-1] == 0:
            raise ValueError("empty prefix")
        first = prefix[..., 0]
        if (first != BOS).any():
            raise ValueError("AR prefix must start with BOS")
        self.calls["ar"] += 1 if prefix.dim() == 1 else prefix.shape[0]
        return self._decode(self.ar_decoder, prefix, tok_mask, enc, enc_mask)

    def length_logits(self, enc: Tensor, enc_mask: Optional[Tensor] = None) -> Tensor:
        enc, enc_mask, single = self._batched(enc, enc_mask, 2)
        count = enc_mask.sum(1, keepdim=True)
        if (count == 0).any():
            raise ValueError("no valid encoder positions")
        mean = (enc * enc_mask.unsqueeze(-1)).sum(1) / count
        out = self.length_head(mean)
        return out[0] if single else out

    def ctc_logits(self, enc: Tensor) -> Tensor:
        if enc.shape[-1] != self.cfg.d_model:
            raise ValueError("encoder state width mismatch")
        return self.ctc_head(enc)

    def parameter_census(self) -> Dict[str, tuple]:
        return {n: tuple(p.shape) for n, p in self.named_parameters()}


def _fan_in_uniform_(t: Tensor, gen: torch.Generator) -> None:
    fan_in = t.shape[1] * (t[0][0].numel() if t.dim() > 2 else 1) if t.dim() > 1 else t.shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)


# std of a standard normal truncated to [-2, 2]
_TRUNC2_STD = 0.87962566103423978


def _bert_normal_(t: Tensor, gen: torch.Generator, std: float = 0.02) -> None:
    # resample out-of-range draws so the truncated distribution itself has the target std
    scale = std / _TRUNC2_STD
    x = torch.randn(t.shape, generator=gen, dtype=t.dtype)
    bad = x.abs() > 2.0
    while bad.any():
        x[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=t.dtype)
        bad = x.abs() > 2.0
    t.copy_(x * scale)


@torch.no_grad()
def init_parameters(model: OrthrosModel, seed: int, nar_init_mode: str = "bert") -> OrthrosModel:
    """BERT scheme for the NAR decoder, fan-in uniform elsewhere; biases 0, norm gains 1."""
    if nar_init_mode not in ("bert", "uniform"):
        raise ValueError(f"unknown nar_init_mode {nar_init_mode!r}")
    gen = torch.Generator().manual_seed(seed)
    norm_params = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, nn.LayerNorm):
            norm_params.add(f"{mod_name}.weight")
            norm_params.add(f"{mod_name}.bias")
    for name, p in model.named_parameters():
        if name in norm_params:
            p.fill_(1.0 if name.endswith("weight") else 0.0)
        elif name.endswith("bias"):
            p.zero_()
        elif name.startswith("nar_decoder.") and nar_init_mode == "bert":
            _bert_normal_(p, gen)
        else:
            _fan_in_uniform_(p, gen)
    return model


def build_model(cfg: ModelConfig, seed: int = 0, nar_init_mode: str = "bert") -> OrthrosModel:
    return init_parameters(OrthrosModel(cfg), seed, nar_init_mode)
