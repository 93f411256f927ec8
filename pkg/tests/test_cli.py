import json

import pytest

from orthros.checkpoint import load_checkpoint
from orthros.cli import main
from orthros.synthdata import load_split


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text("v_src_core = 5\nv_tgt_core = 8\nlen_min = 2\nlen_max = 3\ninput_dim = 4\n"
                                   "synonyms = 2\n", encoding="utf-8")
    (root / "model.txt").write_text("d_model = 16\nd_ff = 32\nn_heads = 2\nn_enc_layers = 1\nn_dec_layers = 1\n"
                                    "max_steps = 4\nbatch_size = 4\nwarmup_steps = 2\neval_every = 2\n"
                                    "keep_best = 2\n", encoding="utf-8")
    assert main(["gen-data", "--spec", str(root / "spec.txt"), "--out", str(root / "data"),
                 "--train", "12", "--dev", "4", "--test", "5", "--seed", "3"]) == 0
    return root


def test_gen_data_is_seed_deterministic(workspace, tmp_path):
    assert main(["gen-data", "--spec", str(workspace / "spec.txt"), "--out", str(tmp_path / "d"),
                 "--train", "12", "--dev", "4", "--test", "5", "--seed", "3"]) == 0
    for split in ("train", "dev", "test"):
        assert (tmp_path / "d" / f"{split}.bin").read_bytes() == (workspace / "data" / f"{split}.bin").read_bytes()


def test_end_to_end_pipeline(workspace, capsys):
    root = workspace
    data = str(root / "data")
    cfg = str(root / "model.txt")
    assert main(["train", "--task", "mt", "--data", data, "--config", cfg, "--out", str(root / "mt"),
                 "--seed", "1"]) == 0
    assert main(["distill", "--teacher", str(root / "mt" / "last.ckpt"), "--data", data,
                 "--out", str(root / "kd"), "--beam", "2"]) == 0
    spec, kd_train = load_split(root / "kd" / "train.bin")
    _, raw_train = load_split(root / "data" / "train.bin")
    assert len(kd_train) == len(raw_train)
    _, kd_test = load_split(root / "kd" / "test.bin")
    _, raw_test = load_split(root / "data" / "test.bin")
    assert all(a.same_content(b) for a, b in zip(kd_test, raw_test))

    assert main(["train", "--task", "asr", "--data", data, "--config", cfg, "--out", str(root / "asr")]) == 0
    assert main(["train", "--task", "st-orthros", "--data", str(root / "kd"), "--config", cfg,
                 "--out", str(root / "st"), "--init-encoder", str(root / "asr" / "last.ckpt"), "--seed", "2"]) == 0
    lines = (root / "st" / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(l)["step"] for l in lines] == [1, 2, 3, 4]
    ckpts = sorted(str(p) for p in (root / "st").glob("step*.ckpt"))
    assert main(["average", "--inputs", *ckpts, "--out", str(root / "avg.ckpt")]) == 0
    load_checkpoint(root / "avg.ckpt")

    hyp = root / "hyp.txt"
    assert main(["decode", "--ckpt", str(root / "avg.ckpt"), "--data", data, "--split", "test", "--mode", "nar",
                 "--iterations", "2", "--length-beam", "3", "--ar-selection", "--out", str(hyp)]) == 0
    rows = hyp.read_text(encoding="utf-8").splitlines()
    assert len(rows) == 5 and all(all(int(t) >= 4 for t in r.split()) for r in rows)
    capsys.readouterr()
    assert main(["eval-bleu", "--hyp", str(hyp), "--ref", str(root / "data" / "test")]) == 0
    assert capsys.readouterr().out.startswith("BLEU = ")

    (root / "matrix.txt").write_text("runs = 1\nsystem.o.mode = nar\nsystem.o.iterations = 1, 2\n"
                                     "system.o.length_beams = 2\n", encoding="utf-8")
    assert main(["bench", "--ckpt", str(root / "avg.ckpt"), "--data", data, "--matrix", str(root / "matrix.txt"),
                 "--out", str(root / "bench.jsonl")]) == 0
    assert len((root / "bench.jsonl").read_text(encoding="utf-8").splitlines()) == 2


def test_train_is_seed_deterministic(workspace):
    root = workspace
    runs = []
    for tag in ("a", "b"):
        assert main(["train", "--task", "st-orthros", "--data", str(root / "data"), "--config",
                     str(root / "model.txt"), "--out", str(root / f"det{tag}"), "--seed", "7"]) == 0
        recs = [json.loads(l) for l in (root / f"det{tag}" / "metrics.jsonl").read_text().splitlines()]
        runs.append([{k: v for k, v in r.items() if k != "wall_ms"} for r in recs])
        assert (root / f"det{tag}" / "last.ckpt").exists()
    assert runs[0] == runs[1]
    assert (root / "deta" / "last.ckpt").read_bytes() == (root / "detb" / "last.ckpt").read_bytes()


def test_errors_exit_nonzero(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("not_a_key = 1\n", encoding="utf-8")
    assert main(["train", "--task", "st-ar", "--data", str(workspace / "data"), "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    conflict = tmp_path / "conflict.txt"
    conflict.write_text("task = mt\n", encoding="utf-8")
    assert main(["train", "--task", "st-ar", "--data", str(workspace / "data"), "--config", str(conflict),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["decode", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(workspace / "data"),
                 "--mode", "ar", "--out", str(tmp_path / "h.txt")]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--task", "nonsense", "--data", "x", "--out", "y"])
