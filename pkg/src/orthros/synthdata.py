"""Synthetic speech-translation triplets.

A source sentence is a sequence of word ids. Each word is rendered as a run of
noisy copies of a fixed prototype frame (its "pronunciation"), with optional
silences in between. The translation maps every word to a lexicon phrase of one
or two target tokens (the word's fertility), picks one of ``synonyms`` phrase
variants uniformly per word, and reorders words by swapping neighbours inside
fixed windows.
"""
from __future__ import annotations

import io
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import N_SRC_SPECIALS, N_TGT_SPECIALS

MAGIC = b"OSTDATA1"
VERSION = 1
SPLITS = ("train", "dev", "test")


@dataclass
class TaskSpec:
    v_src_core: int = 16
    v_tgt_core: int = 64
    len_min: int = 3
    len_max: int = 6
    d_min: int = 6
    d_max: int = 10
    noise: float = 0.1
    reorder_window: int = 2
    fertility2_prob: float = 0.3
    synonyms: int = 1
    silence_prob: float = 0.1
    input_dim: int = 16
    # identical neighbouring words would merge into one unbroken run of frames
    distinct_neighbours: bool = True
    # rejection-sample until the transcription (and optionally the translation) is CTC-feasible
    ctc_feasible_transcription: bool = True
    ctc_feasible_translation: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_min < 2 or self.d_max < self.d_min:
            raise ValueError("need 2 <= d_min <= d_max")
        if self.synonyms < 1:
            raise ValueError("synonyms must be >= 1")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if self.distinct_neighbours and self.v_src_core < 2 and self.len_max > 1:
            raise ValueError("distinct_neighbours needs v_src_core >= 2")
        if self.reorder_window < 1:
            raise ValueError("reorder_window must be >= 1")
        if not 0.0 <= self.fertility2_prob <= 1.0 or not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def multimodal(self) -> bool:
        return self.synonyms > 1

    @property
    def v_src(self) -> int:
        return N_SRC_SPECIALS + self.v_src_core

    @property
    def v_tgt(self) -> int:
        return N_TGT_SPECIALS + self.v_tgt_core

    @property
    def max_target_len(self) -> int:
        return 2 * self.len_max

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Lexicon:
    prototypes: np.ndarray            # [v_src_core, input_dim]
    fertility: np.ndarray             # [v_src_core] in {1, 2}
    phrases: List[List[Tuple[int, ...]]]  # phrases[word][synonym] -> target ids

    @classmethod
    def build(cls, spec: TaskSpec) -> "Lexicon":
        rng = np.random.default_rng([spec.seed, 0x1E71C0])
        prototypes = rng.standard_normal((spec.v_src_core, spec.input_dim)).astype(np.float32)
        fertility = np.where(rng.random(spec.v_src_core) < spec.fertility2_prob, 2, 1)
        pool = rng.permutation(spec.v_tgt_core) + N_TGT_SPECIALS
        phrases, k = [], 0
        for w in range(spec.v_src_core):
            variants = []
            for _ in range(spec.synonyms):
                variants.append(tuple(int(pool[(k + i) % len(pool)]) for i in range(fertility[w])))
                k += fertility[w]
            phrases.append(variants)
        return cls(prototypes, fertility, phrases)


@dataclass
class Triplet:
    frames: np.ndarray               # float32 [U, input_dim]
    transcription: np.ndarray        # int64 ids over the source vocabulary
    translation: np.ndarray          # int64 ids over the target vocabulary
    metadata: Dict = field(default_factory=dict)

    def same_content(self, other: "Triplet") -> bool:
        return (self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.transcription, other.transcription)
                and np.array_equal(self.translation, other.translation))


def downsampled_length(U: int) -> int:
    return math.ceil(math.ceil(U / 2) / 2)


def ctc_min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can emit ``labels`` under CTC (one blank per adjacent repeat)."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def reorder(units: List, window: int) -> List:
    """Swap neighbours (2j, 2j+1) inside consecutive windows of ``window`` units."""
    out = list(units)
    for start in range(0, len(out), window):
        for j in range(start, min(start + window, len(out)) - 1, 2):
            out[j], out[j + 1] = out[j + 1], out[j]
    return out


def translate_words(words: Sequence[int], lex: Lexicon, spec: TaskSpec,
                    rng: Optional[np.random.Generator] = None) -> List[int]:
    """Target ids for core word indices; synonym 0 everywhere when ``rng`` is None."""
    units = []
    for w in words:
        j = 0 if rng is None or spec.synonyms == 1 else int(rng.integers(spec.synonyms))
        units.append(lex.phrases[w][j])
    return [t for unit in reorder(units, spec.reorder_window) for t in unit]


def generate_triplet(spec: TaskSpec, rng: np.random.Generator, lexicon: Optional[Lexicon] = None,
                     max_attempts: int = 1000) -> Triplet:
    lex = lexicon or Lexicon.build(spec)
    for _ in range(max_attempts):
        L = int(rng.integers(spec.len_min, spec.len_max + 1))
        if spec.distinct_neighbours:
            steps = rng.integers(1, spec.v_src_core, size=L - 1)
            words = np.cumsum(np.concatenate([rng.integers(0, spec.v_src_core, size=1), steps])) % spec.v_src_core
        else:
            words = rng.integers(0, spec.v_src_core, size=L)
        chunks, durations, silences = [], [], []
        for w in words:
            if spec.silence_prob > 0 and rng.random() < spec.silence_prob:
                sd = int(rng.integers(1, spec.d_max + 1))
                silences.append(sd)
                chunks.append(np.zeros((sd, spec.input_dim), dtype=np.float32))
            d = int(rng.integers(spec.d_min, spec.d_max + 1))
            durations.append(d)
            chunks.append(np.repeat(lex.prototypes[w][None, :], d, axis=0))
        frames = np.concatenate(chunks, axis=0)
        if spec.noise > 0:
            frames = frames + spec.noise * rng.standard_normal(frames.shape)
        frames = frames.astype(np.float32)
        transcription = (words + N_SRC_SPECIALS).astype(np.int64)
        translation = np.asarray(translate_words(words.tolist(), lex, spec, rng), dtype=np.int64)
        budget = downsampled_length(len(frames))
        if spec.ctc_feasible_transcription and budget < ctc_min_frames(transcription.tolist()):
            continue
        if spec.ctc_feasible_translation and budget < ctc_min_frames(translation.tolist()):
            continue
        return Triplet(frames, transcription, translation,
                       {"durations": durations, "silences": silences})
    raise RuntimeError("could not sample a CTC-feasible triplet; increase d_min")


def augment_frames(frames: np.ndarray, rng: np.random.Generator, time_mask_len: int, n_masks: int,
                   return_spans: bool = False):
    """Zero ``n_masks`` random time spans of width 1..time_mask_len (time masking only)."""
    U = frames.shape[0]
    if n_masks > 0 and time_mask_len >= U:
        raise ValueError("time mask longer than utterance")
    out = frames.copy()
    spans = []
    for _ in range(n_masks):
        width = int(rng.integers(1, time_mask_len + 1))
        start = int(rng.integers(0, U - width + 1))
        out[start:start + width] = 0.0
        spans.append((start, width))
    return (out, spans) if return_spans else out


def sample_rng(spec: TaskSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 0x5A4D, index])


def generate(spec: TaskSpec, start: int, count: int) -> List[Triplet]:
    lex = Lexicon.build(spec)
    return [generate_triplet(spec, sample_rng(spec, i), lex) for i in range(start, start + count)]


@dataclass
class Corpus:
    spec: TaskSpec
    train: List[Triplet]
    dev: List[Triplet]
    test: List[Triplet]

    def split(self, name: str) -> List[Triplet]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def build_corpus(spec: TaskSpec, n_train: int, n_dev: int, n_test: int,
                 out_dir: Optional[Path] = None) -> Corpus:
    if min(n_train, n_dev, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    corpus = Corpus(spec,
                    generate(spec, 0, n_train),
                    generate(spec, n_train, n_dev),
                    generate(spec, n_train + n_dev, n_test))
    if out_dir is not None:
        save_corpus(corpus, out_dir)
    return corpus


def dataset_bytes(spec: TaskSpec, records: Sequence[Triplet]) -> bytes:
    buf = io.BytesIO()
    sb = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sb)))
    buf.write(sb)
    buf.write(struct.pack("<I", len(records)))
    for t in records:
        U, D = t.frames.shape
        buf.write(struct.pack("<II", U, D))
        buf.write(np.ascontiguousarray(t.frames, dtype="<f4").tobytes())
        for seq in (t.transcription, t.translation):
            buf.write(struct.pack("<I", len(seq)))
            buf.write(np.asarray(seq, dtype="<u4").tobytes())
    return buf.getvalue()


def save_split(path: Path, spec: TaskSpec, records: Sequence[Triplet]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_bytes(spec, records))
    return path


def load_split(path: Path) -> Tuple[TaskSpec, List[Triplet]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"truncated dataset file {path}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path} is not a dataset container")
    version, slen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    spec = TaskSpec.from_dict(json.loads(take(slen).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(count):
        U, D = struct.unpack("<II", take(8))
        frames = np.frombuffer(take(4 * U * D), dtype="<f4").reshape(U, D).astype(np.float32)
        seqs = []
        for _ in range(2):
            (n,) = struct.unpack("<I", take(4))
            seqs.append(np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64))
        records.append(Triplet(frames, seqs[0], seqs[1]))
    if pos != len(data):
        raise ValueError(f"trailing bytes in {path}")
    return spec, records


def save_corpus(corpus: Corpus, out_dir: Path) -> None:
    for name in SPLITS:
        save_split(Path(out_dir) / f"{name}.bin", corpus.spec, corpus.split(name))


def load_corpus(directory: Path) -> Corpus:
    parts = {}
    spec = None
    for name in SPLITS:
        spec, parts[name] = load_split(Path(directory) / f"{name}.bin")
    return Corpus(spec, parts["train"], parts["dev"], parts["test"])


def conditional_entropy(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> float:
    """Plug-in estimate of H(Y | X) in nats from (x, y) samples."""
    by_src: Dict[tuple, Counter] = defaultdict(Counter)
    for x, y in pairs:
        by_src[tuple(int(v) for v in x)][tuple(int(v) for v in y)] += 1
    n = sum(sum(c.values()) for c in by_src.values())
    h = 0.0
    for c in by_src.values():
        tot = sum(c.values())
        for k in c.values():
            h -= (k / n) * math.log(k / tot)
    return h
