"""Latency benchmarking and the AR / CTC / Orthros comparison matrix."""
from __future__ import annotations

import gc
import itertools
import json
import re
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .bleu import corpus_bleu
from .checkpoint import load_checkpoint
from .config import parse_list, parse_scalar, read_kv
from .decoding import DecodeConfig, Hypothesis, translate
from .model import OrthrosModel
from .synthdata import Triplet, load_split


@dataclass
class BenchResult:
    label: str
    family: str
    settings: Dict
    bleu: float
    mean_ms: float
    std_ms: float
    speedup: Optional[float] = None
    n_sentences: int = 0
    runs: int = 0
    run_means_ms: List[float] = field(default_factory=list)

    def row(self) -> Dict:
        return asdict(self)


def settings_of(cfg: DecodeConfig) -> Dict:
    if cfg.mode == "ar":
        return {"mode": "ar", "b": cfg.beam}
    if cfg.mode == "ctc":
        return {"mode": "ctc"}
    return {"mode": "nar", "T": cfg.iterations, "l": cfg.length_beam, "ar_selection": cfg.use_ar_selection,
            "length_mode": cfg.length_mode, "smart_updates": cfg.smart_updates}


def _inputs(model: OrthrosModel, eval_set: Sequence[Triplet]):
    if model.cfg.frontend == "conv":
        dtype = next(model.parameters()).dtype
        return [torch.from_numpy(t.frames).to(dtype) for t in eval_set]
    return [torch.as_tensor(t.transcription, dtype=torch.long) for t in eval_set]


def bench_latency(model: OrthrosModel, eval_set: Sequence[Triplet], cfg: DecodeConfig, runs: int = 5,
                  warmup: int = 1, label: str = "", family: str = "") -> BenchResult:
    """Per-sentence decode latency at batch size 1 (decode only: no loading, no feature work).

    Each run decodes the whole set; a run's value is its mean per-sentence time.
    BLEU is computed from the first timed run's hypotheses.
    """
    return bench_latency_interleaved([(model, cfg, label, family)], eval_set, runs=runs, warmup=warmup)[0]


def bench_latency_interleaved(systems: Sequence[tuple], eval_set: Sequence[Triplet], runs: int = 5,
                              warmup: int = 1, per_sentence: bool = False) -> List[BenchResult]:
    """``bench_latency`` for several ``(model, cfg, label, family)`` systems at once.

    Runs are scheduled round-robin: run r of every system, back to back, before run r+1 of any.
    With ``per_sentence`` the systems also take turns on every sentence inside a run, so run r of
    each system is timed under the same machine conditions and per-run differences between systems
    stay meaningful even when the machine's speed drifts (an A/B design).
    """
    if not eval_set:
        raise ValueError("empty evaluation set")
    if runs < 1:
        raise ValueError("need at least one timed run")
    refs = [t.translation.tolist() for t in eval_set]
    prepared = []
    for model, cfg, *rest in systems:
        model.eval()
        prepared.append((model, cfg, _inputs(model, eval_set)))
    run_means: List[List[float]] = [[] for _ in prepared]
    hyps: List[List[Hypothesis]] = [[] for _ in prepared]
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    gc_was_enabled = gc.isenabled()
    gc.disable()   # as timeit does: collector pauses are not part of decoding
    try:
        for _ in range(warmup):
            for model, cfg, inputs in prepared:
                for x in inputs:
                    translate(model, x, cfg)
        n = len(eval_set)
        for r in range(runs):
            elapsed = [0.0] * len(prepared)
            schedule = ([(i, range(j, j + 1)) for j in range(n) for i in range(len(prepared))] if per_sentence
                        else [(i, range(n)) for i in range(len(prepared))])
            for i, span in schedule:
                model, cfg, inputs = prepared[i]
                t0 = time.perf_counter()
                out = [translate(model, inputs[j], cfg) for j in span]
                elapsed[i] += time.perf_counter() - t0
                if r == 0:
                    hyps[i].extend(out)
            for i in range(len(prepared)):
                run_means[i].append(elapsed[i] * 1000.0 / n)
    finally:
        torch.set_num_threads(threads)
        if gc_was_enabled:
            gc.enable()
    results = []
    for i, (model, cfg, *rest) in enumerate(systems):
        label, family = (list(rest) + ["", ""])[:2]
        results.append(BenchResult(
            label=label or json.dumps(settings_of(cfg)), family=family or cfg.mode, settings=settings_of(cfg),
            bleu=corpus_bleu([h.tokens for h in hyps[i]], refs),
            mean_ms=statistics.fmean(run_means[i]),
            std_ms=statistics.stdev(run_means[i]) if runs > 1 else 0.0,
            n_sentences=len(eval_set), runs=runs, run_means_ms=run_means[i]))
    return results


# ---------------------------------------------------------------- experiment matrix

_GLOBAL_KEYS = {"split": str, "runs": int, "warmup": int, "max_sentences": int, "reference": str}
_SYSTEM_KEYS = {"ckpt": str, "mode": str, "family": str, "beams": int, "iterations": int,
                "length_beams": int, "ar_selection": bool, "length_mode": str, "alpha": float,
                "smart_updates": bool, "max_len": int}
_LIST_KEYS = {"beams", "iterations", "length_beams", "ar_selection"}
_SYSTEM_RE = re.compile(r"^system\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")


@dataclass
class Cell:
    label: str
    system: str
    family: str
    ckpt: Optional[str]
    decode: DecodeConfig


@dataclass
class Matrix:
    cells: List[Cell]
    split: str = "test"
    runs: int = 5
    warmup: int = 1
    max_sentences: int = 0
    reference: Optional[str] = None


def parse_matrix(raw: Dict[str, str]) -> Matrix:
    glob: Dict = {}
    systems: Dict[str, Dict] = {}
    for key, value in raw.items():
        if key in _GLOBAL_KEYS:
            glob[key] = parse_scalar(value, _GLOBAL_KEYS[key])
            continue
        m = _SYSTEM_RE.match(key)
        if not m or m.group(2) not in _SYSTEM_KEYS:
            raise ValueError(f"unknown matrix key {key!r}")
        name, fld = m.groups()
        typ = _SYSTEM_KEYS[fld]
        if fld in _LIST_KEYS:
            systems.setdefault(name, {})[fld] = parse_list(value, typ)
        else:
            systems.setdefault(name, {})[fld] = parse_scalar(value, typ)
    cells: List[Cell] = []
    for name, s in systems.items():
        mode = s.get("mode")
        if mode not in ("ar", "nar", "ctc"):
            raise ValueError(f"system {name!r}: mode must be ar, nar or ctc")
        family = s.get("family", name)
        common = {k: s[k] for k in ("max_len", "alpha", "smart_updates", "length_mode") if k in s}
        if mode == "ar":
            for b in s.get("beams", [4]):
                cells.append(Cell(f"{name}[b={b}]", name, family, s.get("ckpt"),
                                  DecodeConfig(mode="ar", beam=b, **common)))
        elif mode == "ctc":
            cells.append(Cell(name, name, family, s.get("ckpt"), DecodeConfig(mode="ctc", **common)))
        else:
            grid = itertools.product(s.get("iterations", [10]), s.get("length_beams", [9]),
                                     s.get("ar_selection", [True]))
            for T, l, ar in grid:
                label = f"{name}(T={T},l={l}{',+AR' if ar else ''})"
                cells.append(Cell(label, name, family, s.get("ckpt"),
                                  DecodeConfig(mode="nar", iterations=T, length_beam=l, use_ar_selection=ar,
                                               **common)))
    if not cells:
        raise ValueError("matrix defines no cells")
    return Matrix(cells=cells, **glob)


def run_experiment_matrix(matrix, data_dir, default_ckpt=None, runs: Optional[int] = None,
                          out_path=None) -> List[BenchResult]:
    """Time every cell (one at a time, runs interleaved across cells) and attach speedups vs the reference."""
    if not isinstance(matrix, Matrix):
        matrix = parse_matrix(read_kv(matrix))
    runs = runs or matrix.runs
    _, eval_set = load_split(Path(data_dir) / f"{matrix.split}.bin")
    if matrix.max_sentences:
        eval_set = eval_set[:matrix.max_sentences]
    models: Dict[str, OrthrosModel] = {}
    for cell in matrix.cells:
        path = cell.ckpt or default_ckpt
        if path is None or not Path(path).exists():
            raise FileNotFoundError(f"cell {cell.label!r}: checkpoint {path!r} not found")
        if str(path) not in models:
            models[str(path)] = load_checkpoint(path)
    systems = [(models[str(cell.ckpt or default_ckpt)], cell.decode, cell.label, cell.family)
               for cell in matrix.cells]
    results = bench_latency_interleaved(systems, eval_set, runs=runs, warmup=matrix.warmup)
    ref_label = matrix.reference
    if ref_label is None:
        ref_label = next((c.label for c in matrix.cells if c.decode.mode == "ar" and c.decode.beam == 4), None)
    ref = next((r for r in results if r.label == ref_label), None)
    if ref_label is not None and matrix.reference is not None and ref is None:
        raise ValueError(f"reference cell {ref_label!r} not in matrix")
    for r in results:
        r.speedup = ref.mean_ms / r.mean_ms if ref is not None else None
    if out_path is not None:
        write_results(results, out_path)
    return results


def format_table(results: Sequence[BenchResult]) -> str:
    header = ("system", "BLEU", "latency_ms", "std_ms", "speedup")
    rows = [(r.label, f"{r.bleu:.2f}", f"{r.mean_ms:.2f}", f"{r.std_ms:.2f}",
             "-" if r.speedup is None else f"{r.speedup:.2f}x") for r in results]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [header, *rows]]
    return "\n".join(lines)


def write_results(results: Sequence[BenchResult], out_path) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.row()) + "\n")
    Path(str(out_path) + ".table.txt").write_text(format_table(results) + "\n", encoding="utf-8")
    with open(str(out_path) + ".tradeoff.tsv", "w", encoding="utf-8") as f:
        for family in dict.fromkeys(r.family for r in results):
            f.write(f"# {family}\nspeedup\tbleu\n")
            for r in results:
                if r.family == family:
                    sp = "nan" if r.speedup is None else f"{r.speedup:.4f}"
                    f.write(f"{sp}\t{r.bleu:.4f}\n")
            f.write("\n")
