import csv
import json

import numpy as np
import pytest

from automix import cli, metrics, selfcheck
from automix import tensor as T
from automix.tensor import Tensor

TINY_CONFIG = {
    "policy": "automix",
    "epochs": 2,
    "batch_size": 12,
    "base_lr": 0.05,
    "seed": 1,
    "feature_layer": 2,
    "encoder": {
        "input_channels": 1,
        "stage_channels": [2, 3, 4],
        "stage_strides": [2, 2, 2],
        "num_classes": 3,
    },
    "data": {
        "kind": "synthetic",
        "n_per_class": 8,
        "image_size": 16,
        "classes": 3,
        "eval_per_class": 6,
    },
}


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def run_dirs_under(root):
    return sorted(p for p in root.iterdir() if p.is_dir())


def latest_run(root):
    return run_dirs_under(root)[-1]


def train_once(tmp_path, tiny_config_path, extra=()):
    out = tmp_path / "runs"
    code = cli.main(["train", "--config", str(tiny_config_path), "--out-dir", str(out), *extra])
    assert code == 0
    return latest_run(out)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_happy_path_creates_run_dir(tmp_path, tiny_config_path, capsys):
    run = train_once(tmp_path, tiny_config_path)
    for name in ("manifest.json", "metrics.csv", "student.ckpt", "teacher.ckpt",
                 "mixblock.ckpt", "stats.json"):
        assert (run / name).exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert manifest["config"]["policy"] == "automix"
    assert "train" in manifest["dataset_fingerprint"]
    assert manifest["timings"]["train_seconds"] > 0
    assert "finished" in capsys.readouterr().out


def test_train_unknown_policy_exits_2(tmp_path, tiny_config_path, capsys):
    bad = json.loads(tiny_config_path.read_text())
    bad["policy"] = "foomix"
    path = tiny_config_path.parent / "bad.json"
    path.write_text(json.dumps(bad))
    code = cli.main(["train", "--config", str(path), "--out-dir", str(tmp_path / "r")])
    assert code == 2
    err = capsys.readouterr().err
    assert "vanilla" in err and "automix" in err


def test_train_unknown_config_field_exits_2(tmp_path, tiny_config_path, capsys):
    bad = json.loads(tiny_config_path.read_text())
    bad["learning_rate_typo"] = 3
    path = tiny_config_path.parent / "bad2.json"
    path.write_text(json.dumps(bad))
    code = cli.main(["train", "--config", str(path), "--out-dir", str(tmp_path / "r")])
    assert code == 2
    assert "learning_rate_typo" in capsys.readouterr().err


def test_train_determinism_bitwise(tmp_path, tiny_config_path):
    run_a = train_once(tmp_path, tiny_config_path)
    run_b = train_once(tmp_path, tiny_config_path)
    assert run_a != run_b  # never overwritten
    for name in ("metrics.csv", "student.ckpt", "teacher.ckpt", "mixblock.ckpt"):
        assert (run_a / name).read_bytes() == (run_b / name).read_bytes()


def test_flag_overrides_beat_file(tmp_path, tiny_config_path):
    run = train_once(tmp_path, tiny_config_path, extra=("--epochs", "1", "--policy", "vanilla"))
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 1
    assert manifest["config"]["policy"] == "vanilla"
    lines = (run / "metrics.csv").read_text().strip().split("\n")
    assert len(lines) == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_round_trip_matches_training_log(tmp_path, tiny_config_path, capsys):
    run = train_once(tmp_path, tiny_config_path)
    final_top1 = float((run / "metrics.csv").read_text().strip().split("\n")[-1].split(",")[6])
    code = cli.main(["eval", "--checkpoint", str(run)])
    assert code == 0
    out = capsys.readouterr().out
    printed = float(next(line for line in out.splitlines() if line.startswith("top1 ")).split()[1])
    assert abs(printed - final_top1) < 1e-12
    assert (run / "reliability.csv").exists()
    with open(run / "reliability.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_low", "bin_high", "count", "confidence", "accuracy"]


def test_eval_fgsm_zero_equals_clean(tmp_path, tiny_config_path, capsys):
    run = train_once(tmp_path, tiny_config_path)
    code = cli.main(["eval", "--checkpoint", str(run), "--fgsm", "0"])
    assert code == 0
    out = capsys.readouterr().out
    top1 = float(next(l for l in out.splitlines() if l.startswith("top1 ")).split()[1])
    fgsm = float(next(l for l in out.splitlines() if l.startswith("fgsm_error ")).split()[1])
    assert abs(fgsm - (1.0 - top1)) < 1e-12


def test_eval_missing_checkpoint_exits_2(tmp_path, capsys):
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope")])
    assert code == 2


def test_eval_corrupt_checkpoint_exits_2(tmp_path, tiny_config_path):
    run = train_once(tmp_path, tiny_config_path)
    blob = (run / "student.ckpt").read_bytes()
    (run / "student.ckpt").write_bytes(b"XX" + blob[2:])
    assert cli.main(["eval", "--checkpoint", str(run)]) == 2


def test_eval_mixed_metrics_csv(tmp_path, tiny_config_path):
    run = train_once(tmp_path, tiny_config_path)
    code = cli.main(["eval", "--checkpoint", str(run), "--mixed"])
    assert code == 0
    lines = (run / "mixed_metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "batch,top1_in_pair,top2_equals_pair"
    assert len(lines) >= 2
    for line in lines[1:]:
        _, a, b = line.split(",")
        assert float(a) >= float(b)


# ---------------------------------------------------------------------------
# gen-masks
# ---------------------------------------------------------------------------

def test_gen_masks_default_lambda_grid(tmp_path, tiny_config_path, capsys):
    run = train_once(tmp_path, tiny_config_path)
    code = cli.main(["gen-masks", "--checkpoint", str(run), "--pairs", "0:1"])
    assert code == 0
    masks = sorted((run / "masks").glob("mask_*.pgm"))
    mixes = sorted((run / "masks").glob("mix_*.pgm"))
    assert len(masks) == 4 and len(mixes) == 4  # lambda grid 0, 0.3, 0.7, 1
    out = capsys.readouterr().out
    assert out.count("mask mean") == 4


def test_gen_masks_identical_pair_reproduces_input(tmp_path, tiny_config_path):
    run = train_once(tmp_path, tiny_config_path)
    code = cli.main(["gen-masks", "--checkpoint", str(run), "--pairs", "2:2", "--lambdas", "0.3"])
    assert code == 0
    mix_file = next((run / "masks").glob("mix_pair2-2_*.pgm"))
    payload = mix_file.read_bytes().split(b"\n", 3)[3]
    from automix import data as data_mod
    cfg = json.loads((run / "manifest.json").read_text())["config"]["data"]
    eval_ds = data_mod.gen_synthetic_shapes(cfg["eval_per_class"], cfg["image_size"],
                                            k=cfg["classes"], seed=cfg["seed"] + 10007,
                                            noise=cfg["noise"], split="test")
    expect = np.clip(np.rint(eval_ds.images[2, 0] * 255), 0, 255).astype(np.uint8)
    got = np.frombuffer(payload, dtype=np.uint8).reshape(16, 16)
    # blending equal inputs reproduces the input up to standardization round trip
    assert np.max(np.abs(got.astype(int) - expect.astype(int))) <= 1


def test_gen_masks_mean_matches_mask_stats(tmp_path, tiny_config_path, capsys):
    run = train_once(tmp_path, tiny_config_path)
    code = cli.main(["gen-masks", "--checkpoint", str(run), "--pairs", "0:3", "--lambdas", "0.7"])
    assert code == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if "mask mean" in l)
    printed = float(line.rsplit(" ", 1)[1])
    mask_file = next((run / "masks").glob("mask_pair0-3_*.pgm"))
    payload = np.frombuffer(mask_file.read_bytes().split(b"\n", 3)[3], dtype=np.uint8)
    assert abs(payload.mean() / 255.0 - printed) < 2e-3  # quantization only


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def test_compare_summary_table(tmp_path, tiny_config_path, capsys):
    out_root = tmp_path / "cmp"
    code = cli.main(["compare", "--config", str(tiny_config_path),
                     "--policies", "vanilla,mixup,cutmix,automix",
                     "--seeds", "0,1", "--epochs", "1",
                     "--out-dir", str(out_root)])
    assert code == 0
    run = latest_run(out_root)
    lines = (run / "summary.csv").read_text().strip().split("\n")
    assert lines[0] == "policy,n_seeds,mean_top1,std_top1"
    assert len(lines) == 5
    # aggregation oracle: summary means recomputed from the per-run CSVs
    for line in lines[1:]:
        policy, n_seeds, mean, _ = line.split(",")
        medians = []
        for seed in (0, 1):
            cell = run / f"{policy}-seed{seed}"
            rows = (cell / "metrics.csv").read_text().strip().split("\n")[1:]
            top1s = [float(r.split(",")[6]) for r in rows]
            medians.append(float(np.median(top1s[-10:])))
        assert abs(float(mean) - np.mean(medians)) < 1e-12


def test_compare_single_epoch_well_formed(tmp_path, tiny_config_path):
    out_root = tmp_path / "cmp1"
    code = cli.main(["compare", "--config", str(tiny_config_path),
                     "--policies", "vanilla", "--seeds", "3", "--epochs", "1",
                     "--out-dir", str(out_root)])
    assert code == 0
    run = latest_run(out_root)
    assert (run / "summary.csv").read_text().count("\n") == 2


def test_compare_rejects_unknown_policy(tmp_path, tiny_config_path):
    code = cli.main(["compare", "--config", str(tiny_config_path),
                     "--policies", "nope", "--seeds", "0",
                     "--out-dir", str(tmp_path / "x")])
    assert code == 2


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------

def test_selfcheck_passes_on_pristine_build(capsys):
    assert cli.main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "selfcheck passed" in out
    assert out.count("[  ok]") == len(selfcheck.CHECKS)


def test_selfcheck_names_injected_sigmoid_fault(monkeypatch, capsys):
    original = T.sigmoid

    def broken_sigmoid(a):
        out = original(a)
        s = out.data
        if out.tape_node is not None:
            record = T._tape[out.tape_node[1]]
            record.backward_fn = lambda g: (-g * s * (1.0 - s),)  # sign error
        return out

    monkeypatch.setattr(T, "sigmoid", broken_sigmoid)
    code = cli.main(["selfcheck"])
    assert code == 1
    out = capsys.readouterr().out
    assert "[FAIL] sigmoid gradient" in out


def test_selfcheck_runtime_budget():
    import time
    start = time.perf_counter()
    results = selfcheck.run_selfcheck()
    elapsed = time.perf_counter() - start
    assert all(ok for _, ok, _ in results)
    assert elapsed < 120.0
