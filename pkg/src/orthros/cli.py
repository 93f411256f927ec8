"""Command-line entry point: ``orthros <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as benchmod
from .bleu import corpus_bleu
from .checkpoint import average_to_file, load_checkpoint
from .config import coerce, read_kv, split_by_class
from .decoding import DecodeConfig, translate
from .model import ModelConfig, build_model
from .synthdata import SPLITS, TaskSpec, build_corpus, load_split, save_split
from .training import TrainConfig, distill_dataset, train

log = logging.getLogger("orthros")


def cmd_gen_data(args) -> int:
    raw = read_kv(args.spec) if args.spec else {}
    spec_kw = coerce(TaskSpec, raw)
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    spec = TaskSpec(**spec_kw)
    build_corpus(spec, args.train, args.dev, args.test, Path(args.out))
    print(f"wrote {args.train}/{args.dev}/{args.test} triplets to {args.out}")
    return 0


def _model_config_for(task: str, spec: TaskSpec, overrides: dict) -> ModelConfig:
    kw = dict(v_tgt=spec.v_tgt, v_src=spec.v_src, input_dim=spec.input_dim,
              n_max=max(64, spec.max_target_len))
    if task == "mt":
        kw["frontend"] = "embed"
    if task == "st-ctc":
        kw["ctc_vocab"] = "tgt"
    kw.update(overrides)
    return ModelConfig(**kw)


def cmd_train(args) -> int:
    raw = read_kv(args.config) if args.config else {}
    if raw.pop("task", args.task) != args.task:
        raise ValueError("config file task conflicts with --task")
    mkw, tkw = split_by_class(raw, [ModelConfig, TrainConfig])
    tkw["task"] = args.task
    if args.seed is not None:
        tkw["seed"] = args.seed
    tcfg = TrainConfig(**tkw)
    spec, train_set = load_split(Path(args.data) / "train.bin")
    _, dev_set = load_split(Path(args.data) / "dev.bin")
    mcfg = _model_config_for(args.task, spec, mkw)
    model = build_model(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    result = train(model, train_set, tcfg, out_dir=out, dev=dev_set, metrics_path=out / "metrics.jsonl",
                   init_encoder=args.init_encoder, init_ar_decoder=args.init_ar_decoder)
    with open(out / "valid.jsonl", "w", encoding="utf-8") as f:
        for rec in result.valid:
            f.write(json.dumps(rec) + "\n")
    print(f"trained {tcfg.max_steps} steps; averaged checkpoint: {result.averaged or out / 'last.ckpt'}")
    return 0


def cmd_distill(args) -> int:
    teacher = load_checkpoint(args.teacher)
    out = Path(args.out)
    for split in SPLITS:
        spec, data = load_split(Path(args.data) / f"{split}.bin")
        if split != "test":
            data = distill_dataset(teacher, data, beam=args.beam, v_src=spec.v_src, v_tgt=spec.v_tgt)
        save_split(out / f"{split}.bin", spec, data)
    print(f"distilled train/dev into {out} (test references kept)")
    return 0


def cmd_average(args) -> int:
    average_to_file(args.inputs, args.out)
    print(f"averaged {len(args.inputs)} checkpoints into {args.out}")
    return 0


def decode_config_from_args(args) -> DecodeConfig:
    return DecodeConfig(mode=args.mode, iterations=args.iterations, length_beam=args.length_beam,
                        beam=args.beam, use_ar_selection=args.ar_selection,
                        length_mode=args.length_mode.replace("-", "_"), alpha=args.alpha,
                        smart_updates=args.smart_updates)


def cmd_decode(args) -> int:
    model = load_checkpoint(args.ckpt)
    cfg = decode_config_from_args(args)
    _, data = load_split(Path(args.data) / f"{args.split}.bin")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        for t in data:
            x = t.frames if model.cfg.frontend == "conv" else t.transcription
            hyp = translate(model, x, cfg)
            f.write(" ".join(map(str, hyp.tokens)) + "\n")
    print(f"decoded {len(data)} sentences to {args.out}")
    return 0


def read_hypotheses(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    return [[int(x) for x in line.split()] for line in lines]


def cmd_eval_bleu(args) -> int:
    ref = Path(args.ref)
    ref_file = ref if ref.suffix == ".bin" else ref.with_name(ref.name + ".bin")
    _, data = load_split(ref_file)
    hyps = read_hypotheses(args.hyp)
    score = corpus_bleu(hyps, [t.translation.tolist() for t in data])
    print(f"BLEU = {score:.2f}")
    return 0


def cmd_bench(args) -> int:
    results = benchmod.run_experiment_matrix(args.matrix, args.data, default_ckpt=args.ckpt,
                                             runs=args.runs, out_path=args.out)
    print(benchmod.format_table(results))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthros", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic speech-translation corpus")
    g.add_argument("--spec", help="task spec (key = value)")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--dev", type=int, required=True)
    g.add_argument("--test", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--task", required=True, choices=["asr", "mt", "st-ar", "st-orthros", "st-ctc"])
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="model/training config (key = value)")
    t.add_argument("--out", required=True)
    t.add_argument("--init-encoder")
    t.add_argument("--init-ar-decoder")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="replace train/dev translations with teacher beam outputs")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--beam", type=int, default=4)
    d.set_defaults(func=cmd_distill)

    a = sub.add_parser("average", help="average checkpoints parameter-wise")
    a.add_argument("--inputs", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_average)

    dec = sub.add_parser("decode", help="translate a data split")
    dec.add_argument("--ckpt", required=True)
    dec.add_argument("--data", required=True)
    dec.add_argument("--split", choices=["dev", "test"], default="test")
    dec.add_argument("--mode", choices=["ar", "nar", "ctc"], required=True)
    dec.add_argument("--iterations", type=int, default=10)
    dec.add_argument("--length-beam", type=int, default=9)
    dec.add_argument("--beam", type=int, default=4)
    dec.add_argument("--ar-selection", action="store_true")
    dec.add_argument("--smart-updates", action="store_true")
    dec.add_argument("--length-mode", choices=["classifier", "ctc-scale"], default="classifier")
    dec.add_argument("--alpha", type=float)
    dec.add_argument("--out", required=True)
    dec.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval-bleu", help="corpus BLEU of a hypothesis file")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True, help="DIR/split")
    e.set_defaults(func=cmd_eval_bleu)

    b = sub.add_parser("bench", help="run the latency/BLEU experiment matrix")
    b.add_argument("--ckpt", help="default checkpoint for systems without one")
    b.add_argument("--data", required=True)
    b.add_argument("--matrix", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--runs", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
