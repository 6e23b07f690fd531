import csv

import pytest

from dcar import checkpoint
from dcar.cli import ABLATION_CSV, main, read_ablation

TINY = """\
n_meta = 3
n_base_meta = 1
n_sub = 2
per_sub = 8
shots = 2
Q = 2
k = 2
pretrain_epochs = 2
pretrain_batch_size = 8
epochs = 2
batch_size = 4
ablate_seeds = 0,1
ablate_shots = 1,2
"""


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    out.mkdir()
    args = ["--config", str(cfg), "--out", str(out)]
    for cmd in ("gen-data", "pretrain", "train", "eval"):
        assert main([cmd, *args]) == 0, cmd
    return cfg, out, args


def _csv_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.reader(lines[1:]))


def test_gen_data_counts_and_determinism(world, capsys, tmp_path):
    cfg, out, args = world
    other = tmp_path / "again"
    other.mkdir()
    assert main(["gen-data", "--config", str(cfg), "--out", str(other)]) == 0
    text = capsys.readouterr().out
    assert "pretrain_base=16, train=8, val=8, test=16, total=48" in text
    for name in ("manifest.jsonl", "vocab.txt", "negatives.jsonl"):
        assert (other / "data" / name).read_bytes() == (out / "data" / name).read_bytes()


def test_outputs_carry_hash_and_headers(world):
    _, out, _ = world
    assert _csv_rows(out / "metrics.csv")[0] == ["epoch", "lr", "loss_con", "loss_cate", "loss_total",
                                                  "val_r1_i2t", "val_r1_t2i"]
    rows = _csv_rows(out / "report.csv")
    assert rows[0] == ["direction", "K", "recall", "n_queries", "n_entries"]
    assert [(r[0], r[1]) for r in rows[1:]] == [("I2T", "1"), ("I2T", "5"), ("I2T", "10"),
                                                ("T2I", "1"), ("T2I", "5"), ("T2I", "10")]
    assert _csv_rows(out / "pretrain.csv")[0] == ["epoch", "loss"]


def test_weight_table(world):
    _, out, _ = world
    rows = _csv_rows(out / "weights.csv")
    assert rows[0] == ["caption_id", "position", "token", "raw", "normalized"]
    by_caption = {}
    for cid, pos, tok, raw, norm in rows[1:]:
        assert float(raw) >= 0 and tok not in ("<bos>", "<eos>")
        by_caption.setdefault(cid, []).append((int(pos), tok, float(norm)))
    assert len(by_caption) == 16
    for cid, words in by_caption.items():
        assert [p for p, _, _ in words] == list(range(len(words)))
        assert sum(n for _, _, n in words) == pytest.approx(1.0, abs=1e-5)
        assert words[0][1] == "a"


def test_missing_out_dir(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "nope")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_invalid_config_has_no_side_effects(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("tau = -1\n")
    out = tmp_path / "o"
    out.mkdir()
    assert main(["gen-data", "--config", str(bad), "--out", str(out)]) == 1
    assert list(out.iterdir()) == []
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg"), "--out", str(out)]) == 1
    assert main(["gen-data", "--set", "bogus=1", "--out", str(out)]) == 1
    assert main(["frobnicate"]) == 1


def test_missing_prerequisites(tmp_path, world, capsys):
    cfg, _, _ = world
    out = tmp_path / "fresh"
    out.mkdir()
    args = ["--config", str(cfg), "--out", str(out)]
    assert main(["train", *args]) == 1
    assert main(["gen-data", *args]) == 0
    assert main(["eval", *args]) == 1
    assert main(["ablate", *args]) == 1
    assert main(["report", *args]) == 1
    assert "missing" in capsys.readouterr().err


def test_checkpoint_mismatch_rejected(tmp_path, world):
    cfg, out, _ = world
    other = tmp_path / "mismatch"
    other.mkdir()
    args = ["--config", str(cfg), "--out", str(other)]
    assert main(["gen-data", *args, "--set", "n_meta=4", "--set", "n_base_meta=2"]) == 0
    (other / "checkpoints").mkdir()
    (other / "checkpoints" / "backbone.ckpt").write_bytes((out / "checkpoints" / "backbone.ckpt").read_bytes())
    assert main(["train", *args, "--set", "n_meta=4", "--set", "n_base_meta=2"]) == 1


def test_shots_mismatch_rejected(world):
    cfg, out, args = world
    assert main(["train", *args, "--set", "shots=3"]) == 1


def test_zero_epoch_all_off_eval_equals_zero_shot(world, tmp_path):
    cfg, out, args = world
    off = ["--set", "epochs=0", "--set", "use_dual_prompt=false", "--set", "use_token_weighting=false",
           "--set", "use_category_loss=false"]
    assert main(["train", *args, *off]) == 0
    assert "prompt.V" not in checkpoint.load(out / "checkpoints" / "adapted.ckpt")
    assert main(["eval", *args, *off]) == 0
    zero = _csv_rows(out / "report.csv")[1:]
    assert main(["ablate", *args]) == 0
    rows = read_ablation(out / ABLATION_CSV)
    none = {r["direction"]: r for r in rows if r["group"] == "toggle" and r["arm"] == "none"}
    assert float(none["I2T"]["mean_r1"]) == pytest.approx(float(zero[0][2]), abs=1e-6)
    assert float(none["T2I"]["mean_r1"]) == pytest.approx(float(zero[3][2]), abs=1e-6)
    assert none["I2T"]["std_r1"] == 0.0


def test_ablation_shape_and_report(world):
    cfg, out, args = world
    if not (out / ABLATION_CSV).exists():
        assert main(["ablate", *args]) == 0
    rows = read_ablation(out / ABLATION_CSV)
    toggle = [(r["arm"], r["direction"]) for r in rows if r["group"] == "toggle"]
    assert len(toggle) == 10
    assert {a for a, _ in toggle} == {"none", "DP", "DP+CA", "DP+TW", "DP+CA+TW"}
    lam = {r["arm"] for r in rows if r["group"] == "lambda"}
    assert lam == {"1/0", "0.8/0.2", "0.5/0.5", "0.2/0.8"}
    assert {r["shots"] for r in rows if r["group"] == "shots"} == {1, 2}
    assert all(r["n_seeds"] == 2 for r in rows)
    assert main(["report", *args]) == 0
    svg = (out / "shots.svg").read_bytes()
    assert svg.startswith(b"<?xml") and b"<svg" in svg
    assert main(["report", *args]) == 0
    assert (out / "shots.svg").read_bytes() == svg


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    assert "max_rel_err=" in capsys.readouterr().out


def test_seed_flag_changes_training(world):
    cfg, out, args = world
    assert main(["train", *args, "--seed", "1"]) == 0
    a = (out / "metrics.csv").read_text()
    assert main(["train", *args, "--seed", "2"]) == 0
    b = (out / "metrics.csv").read_text()
    assert a.splitlines()[0] != b.splitlines()[0]
    assert a.splitlines()[2:] != b.splitlines()[2:]
