"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale comparison
grid (criterion 7) trains twelve 30-epoch models once per session and is
shared with the mixed-metric and robustness criteria.
"""

import json
import math
import time

import numpy as np
import pytest

from automix import cli, data, losses, metrics, mixblock, mix_policies, models, trainer
from automix import tensor as T
from automix.cli import DataConfig
from automix.models import EncoderConfig
from automix.tensor import Tensor
from automix.trainer import TrainConfig

GRID_POLICIES = ("vanilla", "mixup", "cutmix", "automix")
GRID_SEEDS = (0, 1, 2)


def report(criterion: int, text: str) -> None:
    print(f"[criterion {criterion:2d}] PASS: {text}", flush=True)


# ---------------------------------------------------------------------------
# criterion 1: gradient suite, every op plus the end-to-end generator chain
# ---------------------------------------------------------------------------

def op_checks(rng):
    """(name, function, probe) triples covering every differentiable op."""
    v23 = Tensor(rng.standard_normal((2, 3)))
    m34 = Tensor(rng.standard_normal((3, 4)))
    b1 = Tensor(rng.standard_normal((1, 3, 2)))
    w_conv = Tensor(rng.standard_normal((2, 2, 3, 3)))
    x_conv = Tensor(rng.standard_normal((1, 2, 5, 5)))
    v_up = Tensor(rng.standard_normal((1, 1, 6, 6)))
    side = Tensor(rng.standard_normal((1, 1, 3, 3)))
    w23 = Tensor(rng.standard_normal((2, 3)))
    w32 = Tensor(rng.standard_normal((3, 2)))
    w33 = Tensor(rng.standard_normal((3, 3)))
    w3 = Tensor(rng.standard_normal(3))
    w2 = Tensor(rng.standard_normal(2))
    positive = Tensor(np.abs(rng.standard_normal((2, 3))) + 0.5)
    idx = np.array([1, 1, 0])

    return [
        ("add", lambda t: (t + v23).sum(), v23),
        ("sub", lambda t: (t - 2.0 * v23).sum(), v23),
        ("mul", lambda t: (t * v23).sum(), v23),
        ("div", lambda t: (t / positive).sum(), v23),
        ("neg", lambda t: (-t).sum(), v23),
        ("power", lambda t: (t ** 2.0).sum(), v23),
        ("absolute", lambda t: abs(t).sum(), positive),
        ("exp", lambda t: T.exp(t).sum(), v23),
        ("log", lambda t: T.log(t).sum(), positive),
        ("relu", lambda t: T.relu(t - 0.1).sum(), positive),
        ("sigmoid", lambda t: T.sigmoid(t).sum(), v23),
        ("matmul", lambda t: T.matmul(t, m34).sum(), v23),
        ("bmm", lambda t: T.bmm(t.reshape(1, 2, 3), b1).sum(), v23),
        ("conv2d", lambda t: T.conv2d(t, w_conv, 2, 1).sum(), x_conv),
        ("conv2d_weights", lambda t: T.conv2d(x_conv, t, 2, 1).sum(), w_conv),
        ("upsample_bilinear", lambda t: (T.upsample_bilinear(t, 2) * v_up).sum(), side),
        ("concat_channels", lambda t: (T.concat_channels(t, side) * 0.7).sum(),
         Tensor(rng.standard_normal((1, 2, 3, 3)))),
        ("take", lambda t: (T.take(t, idx) * w33).sum(), v23),
        ("reshape", lambda t: (t.reshape(3, 2) * w32).sum(), v23),
        ("transpose", lambda t: (t.transpose((1, 0)) * w32).sum(), v23),
        ("sum_axis", lambda t: (t.sum(axis=0) * w3).sum(), v23),
        ("mean_axis", lambda t: (t.mean(axis=1) * w2).sum(), v23),
        ("softmax_rows", lambda t: (T.softmax_rows(t) * w23).sum(), v23),
        ("log_softmax", lambda t: (T.log_softmax(t) * w23).sum(), v23),
    ]


def generator_chain_check(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(input_channels=1, stage_channels=(2, 3), stage_strides=(2, 2),
                        num_classes=3)
    teacher = models.clone_params(models.init_params(cfg, seed=seed + 50))
    params = mixblock.init_mix_params(3, seed=seed)
    params.w_z = Tensor(rng.standard_normal(params.w_z.shape) * 0.3, requires_grad=True)
    x1 = Tensor(rng.random((2, 1, 8, 8)))
    x2 = Tensor(rng.random((2, 1, 8, 8)))
    z1 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    z2 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    y_i = data.one_hot(np.array([0, 1]), 3)
    y_j = data.one_hot(np.array([2, 0]), 3)

    def loss_wrt(name):
        def f(t):
            p = mixblock.MixBlockParams(w_p=t if name == "w_p" else params.w_p,
                                        w_z=t if name == "w_z" else params.w_z)
            mixed = mixblock.generate(x1, x2, z1, z2, 0.4, p)
            logits = models.forward_logits(teacher, mixed.x_mix, cfg)
            return losses.mixup_ce(logits, y_i, y_j, 0.4)
        return f

    errs = [T.grad_check(loss_wrt(n), t) for n, t in (("w_p", params.w_p), ("w_z", params.w_z))]
    return max(errs)


def test_criterion_1_gradient_suite():
    started = time.perf_counter()
    worst = {}
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        for name, fn, probe in op_checks(rng):
            T.reset_tape()
            err = T.grad_check(fn, probe, h=1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
            assert err < 1e-5, f"{name} gradient error {err:.2e} at seed {seed}"
        # stop_gradient: analytic gradient equals the finite differences of the
        # non-detached path (the detached factor held constant)
        T.reset_tape()
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        grads = T.backward((T.stop_gradient(x) * x).sum())
        frozen = Tensor(x.data.copy())
        fd_err = T.grad_check(lambda t: (frozen * t).sum(), x, h=1e-6)
        assert fd_err < 1e-6
        assert np.allclose(grads[x], x.data, atol=1e-12)
        worst["stop_gradient"] = max(worst.get("stop_gradient", 0.0), fd_err)
        err = generator_chain_check(seed)
        worst["generate->teacher->mixup_ce"] = max(worst.get("generate->teacher->mixup_ce", 0.0), err)
        assert err < 1e-5
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s"
    report(1, f"{len(worst)} op checks x 3 seeds, max rel err "
              f"{max(worst.values()):.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: attention and mask invariants on 1000 random instances
# ---------------------------------------------------------------------------

def test_criterion_2_attention_mask_invariants():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_row = 0.0
    worst_sum = 0.0
    for i in range(1000):
        c = int(rng.integers(2, 5))
        h = w = int(rng.integers(2, 4))
        params = mixblock.init_mix_params(c, seed=i)
        params.w_z = Tensor(rng.standard_normal(params.w_z.shape), requires_grad=True)
        lam = float(rng.uniform(0.0, 1.0))
        zi = mixblock.embed_lambda(Tensor(rng.standard_normal((1, c, h, w))), lam)
        zj = mixblock.embed_lambda(Tensor(rng.standard_normal((1, c, h, w))), 1.0 - lam)
        attn = mixblock.cross_attention(zi, zj, params)
        worst_row = max(worst_row, float(np.max(np.abs(attn.data.sum(axis=-1) - 1.0))))
        pair = mixblock.compute_mask(zi, zj, params, upsample_factor=2)
        s = pair.s_i.data
        assert np.all(s >= 0.0) and np.all(s <= 1.0)
        worst_sum = max(worst_sum, float(np.max(np.abs(s + pair.s_j.data - 1.0))))
        if i % 100 == 0:
            T.reset_tape()
    assert worst_row < 1e-9
    assert worst_sum < 1e-12
    for i in range(50):
        params = mixblock.init_mix_params(3, seed=i)
        zi = mixblock.embed_lambda(Tensor(rng.standard_normal((2, 3, 1, 1))), 0.3)
        zj = mixblock.embed_lambda(Tensor(rng.standard_normal((2, 3, 1, 1))), 0.7)
        attn = mixblock.cross_attention(zi, zj, params)
        assert np.all(attn.data == 1.0), "1x1 grid must give the trivial attention"
    T.reset_tape()
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"invariant sweep took {elapsed:.1f}s"
    report(2, f"1000 instances: max row-sum err {worst_row:.1e}, "
              f"max pair-sum err {worst_sum:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: zero value projection degenerates to the 0.5 blend
# ---------------------------------------------------------------------------

def test_criterion_3_constant_mask_degeneracy():
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(25):
        c = int(rng.integers(2, 6))
        params = mixblock.init_mix_params(c, seed=i)  # value projection zero-initialized
        x1 = rng.random((3, 1, 8, 8))
        x2 = rng.random((3, 1, 8, 8))
        z1 = rng.standard_normal((3, c, 4, 4))
        z2 = rng.standard_normal((3, c, 4, 4))
        lam = float(rng.uniform(0.0, 1.0))
        out = mixblock.generate(Tensor(x1), Tensor(x2), Tensor(z1), Tensor(z2), lam, params)
        expect = mix_policies.mixup_linear(x1, x2, 0.5)
        worst = max(worst, float(np.max(np.abs(out.x_mix.data - expect))))
    T.reset_tape()
    assert worst < 1e-12
    report(3, f"25 random batches: max |generate - 0.5 blend| = {worst:.1e}")


# ---------------------------------------------------------------------------
# criterion 4: ratio fidelity after 500 generator-only steps
# ---------------------------------------------------------------------------

def test_criterion_4_lambda_fidelity():
    started = time.perf_counter()
    cfg = TrainConfig(policy="automix", seed=0)
    ds = data.gen_synthetic_shapes(n_per_class=64, size=64, k=4, seed=11)
    std, _ = data.standardize(ds)
    frozen = models.init_params(cfg.encoder, seed=21)
    grid = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    mix = trainer.train_mask_generator(frozen, cfg, std.images, steps=500,
                                       lr=1.0, gamma=0.1, lam_grid=grid, seed=0)
    residuals = trainer.mask_lambda_residuals(frozen, mix, cfg, std.images, lam_grid=grid)
    mean_residual = float(np.mean(list(residuals.values())))
    elapsed = time.perf_counter() - started
    assert mean_residual <= 0.15, f"mean |mask mean - lambda| = {mean_residual:.3f}"
    assert elapsed < 300.0
    report(4, f"mean |mask mean - lambda| = {mean_residual:.3f} over "
              f"lambda grid {grid[0]}..{grid[-1]}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 5: per-bucket gradient isolation, exactly zero
# ---------------------------------------------------------------------------

def test_criterion_5_gradient_isolation():
    cfg = TrainConfig(policy="automix", epochs=1, batch_size=8, base_lr=0.05, seed=3,
                      feature_layer=2,
                      encoder=EncoderConfig(input_channels=1, stage_channels=(2, 3, 4),
                                            stage_strides=(2, 2, 2), num_classes=3),
                      augment=False)
    ds = data.gen_synthetic_shapes(n_per_class=4, size=16, k=3, seed=1)
    std, _ = data.standardize(ds)
    state = trainer.init_state(cfg, total_steps=20)
    for _ in range(3):
        state, _, step_metrics = trainer.train_step(state, std.images, std.labels)
        assert step_metrics["cls_grad_on_mix"] == 0.0
        assert step_metrics["gen_grad_on_student"] == 0.0
        assert step_metrics["gen_grad_on_teacher"] == 0.0
    report(5, "3 steps: classification bucket placed exactly 0.0 gradient on the "
              "generator, generation bucket exactly 0.0 on student and teacher")


# ---------------------------------------------------------------------------
# criterion 6: EMA contract
# ---------------------------------------------------------------------------

def test_criterion_6_ema_contract():
    encoder = EncoderConfig(input_channels=1, stage_channels=(2, 3), stage_strides=(2, 2),
                            num_classes=3)
    ds = data.gen_synthetic_shapes(n_per_class=4, size=16, k=3, seed=2)
    std, _ = data.standardize(ds)

    cfg_one = TrainConfig(policy="automix", epochs=1, batch_size=12, base_lr=0.05, seed=0,
                          feature_layer=2, encoder=encoder, augment=False,
                          ema_momentum_const=1.0)
    state = trainer.init_state(cfg_one, total_steps=200)
    frozen = {n: t.data.copy() for n, t in state.teacher.items()}
    for _ in range(100):
        state, _, _ = trainer.train_step(state, std.images, std.labels)
    for name in frozen:
        assert np.array_equal(state.teacher[name].data, frozen[name]), name

    cfg_zero = TrainConfig(policy="automix", epochs=1, batch_size=12, base_lr=0.05, seed=0,
                           feature_layer=2, encoder=encoder, augment=False,
                           ema_momentum_const=0.0)
    state = trainer.init_state(cfg_zero, total_steps=200)
    for _ in range(20):
        state, _, _ = trainer.train_step(state, std.images, std.labels)
        for name in state.student:
            assert np.array_equal(state.teacher[name].data, state.student[name].data), name

    assert trainer.momentum_schedule(0, 1000, 0.999) == 0.999
    assert trainer.momentum_schedule(1000, 1000, 0.999) == 1.0
    report(6, "m=1 teacher bitwise frozen over 100 steps; m=0 teacher bitwise "
              "equals student after every of 20 steps; schedule endpoints exact")


# ---------------------------------------------------------------------------
# criteria 7, 8, 10 share the trained comparison grid
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def comparison_grid(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("comparison")
    cfg = TrainConfig(policy="automix", epochs=30, batch_size=100, base_lr=0.03, seed=0)
    data_cfg = DataConfig(kind="synthetic", n_per_class=500, image_size=64,
                          classes=4, eval_per_class=100)
    started = time.perf_counter()
    summary = cli.run_comparison(cfg, data_cfg, list(GRID_POLICIES), list(GRID_SEEDS),
                                 out_dir, jobs=2)
    elapsed = time.perf_counter() - started
    return {"summary": summary, "out_dir": out_dir, "elapsed": elapsed, "data_cfg": data_cfg}


def test_criterion_7_desk_ordering_experiment(comparison_grid):
    summary = {row["policy"]: row for row in comparison_grid["summary"]}
    elapsed = comparison_grid["elapsed"]
    automix_mean = summary["automix"]["mean"]
    vanilla_mean = summary["vanilla"]["mean"]
    best_baseline = max(summary[p]["mean"] for p in ("vanilla", "mixup", "cutmix"))
    assert automix_mean >= vanilla_mean, (
        f"automix {automix_mean:.4f} < vanilla {vanilla_mean:.4f}")
    assert automix_mean >= best_baseline - 0.01, (
        f"automix {automix_mean:.4f} more than 1pt below best baseline {best_baseline:.4f}")
    assert elapsed < 1800.0, f"grid took {elapsed / 60:.1f} min"
    table = ", ".join(f"{p}={summary[p]['mean']:.4f}" for p in GRID_POLICIES)
    report(7, f"{table}; automix >= vanilla and within 1pt of best baseline; "
              f"{elapsed / 60:.1f} min total")


def test_criterion_8_mixed_pair_metric(comparison_grid, tmp_path):
    run_dir = comparison_grid["out_dir"] / "automix-seed0"
    rows = cli.mixed_pair_metric_rows(run_dir, lam=0.5)
    assert rows, "no evaluation batches produced"
    for top1_in_pair, top2_equals in rows:
        assert top1_in_pair >= top2_equals
    csv_path = tmp_path / "mixed_metrics.csv"
    with open(csv_path, "w") as fh:
        fh.write("batch,top1_in_pair,top2_equals_pair\n")
        for i, (a, b) in enumerate(rows):
            fh.write(f"{i},{a!r},{b!r}\n")
    text = csv_path.read_text().strip().split("\n")
    assert text[0] == "batch,top1_in_pair,top2_equals_pair" and len(text) == len(rows) + 1
    means = np.mean(rows, axis=0)
    report(8, f"{len(rows)} held-out batches at lambda=0.5: top1-in-pair "
              f">= top2-equals-pair on every batch (means {means[0]:.3f} >= {means[1]:.3f}); CSV emitted")


# ---------------------------------------------------------------------------
# criterion 9: metric implementations match brute-force loop oracles
# ---------------------------------------------------------------------------

def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(17)
    worst = 0.0

    for _ in range(100):
        n, k = int(rng.integers(3, 30)), int(rng.integers(2, 8))
        logits = rng.standard_normal((n, k))
        labels = rng.integers(0, k, size=n)
        loop = sum(1 for row, lab in zip(logits, labels) if int(np.argmax(row)) == lab) / n
        worst = max(worst, abs(metrics.top1_accuracy(logits, labels) - loop))

        y_i = rng.integers(0, k, size=n)
        y_j = rng.integers(0, k, size=n)
        got = metrics.mixed_topk_accuracy(logits, y_i, y_j)
        in_pair = equals = valid = 0
        for row, a, b in zip(logits, y_i, y_j):
            if a == b:
                continue
            valid += 1
            order = sorted(range(k), key=lambda c: (-row[c], c))
            in_pair += order[0] in (a, b)
            equals += {order[0], order[1]} == {a, b}
        expect = (in_pair / valid, equals / valid) if valid else (0.0, 0.0)
        worst = max(worst, abs(got[0] - expect[0]), abs(got[1] - expect[1]))

        conf = rng.random(n)
        correct = rng.integers(0, 2, size=n).astype(float)
        bins = 15
        total = 0.0
        idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
        for b in range(bins):
            member = idx == b
            if member.sum():
                total += (member.sum() / n) * abs(correct[member].mean() - conf[member].mean())
        worst = max(worst, abs(metrics.ece(conf, correct) - total))

        h, w = int(rng.integers(4, 24)), int(rng.integers(4, 24))
        lam = float(rng.uniform(0.0, 1.0))
        x_i = rng.random((1, 1, h, w))
        box = mix_policies.cutmix_box(x_i, rng.random((1, 1, h, w)), lam,
                                      np.random.default_rng(int(rng.integers(0, 1000))))
        area = int((box.mask.data[0, 0] == 0.0).sum())
        worst = max(worst, abs(box.lam[0] - (1.0 - area / (h * w))))

        masks = rng.random((4, 1, 5, 5))
        lam_vec = float(rng.uniform(0.0, 1.0))
        gamma = 0.1
        got_lam = losses.lambda_loss(Tensor(masks), lam_vec, gamma).item()
        per_sample = [gamma * max(abs(lam_vec - masks[i].mean()) - 0.1, 0.0) for i in range(4)]
        worst = max(worst, abs(got_lam - np.mean(per_sample)))
    T.reset_tape()
    assert worst < 1e-12
    report(9, f"100 random instances per metric: max |impl - loop oracle| = {worst:.1e}")


# ---------------------------------------------------------------------------
# criterion 10: sign-attack error is monotone in epsilon on the trained models
# ---------------------------------------------------------------------------

def test_criterion_10_fgsm_monotonicity(comparison_grid):
    started = time.perf_counter()
    data_cfg = comparison_grid["data_cfg"]
    _, eval_ds = cli.build_datasets(data_cfg)
    epsilons = (0.0, 2 / 255, 8 / 255)
    errors = {eps: [] for eps in epsilons}
    for seed in GRID_SEEDS:
        run_dir = comparison_grid["out_dir"] / f"automix-seed{seed}"
        train_cfg, _, params, stats = cli._load_eval_bundle(run_dir, "student")
        for eps in epsilons:
            errors[eps].append(metrics.fgsm_error(params, eval_ds.images, eval_ds.labels,
                                                  eps, train_cfg.encoder, stats=stats))
    means = [float(np.mean(errors[eps])) for eps in epsilons]
    elapsed = time.perf_counter() - started
    assert means[0] <= means[1] + 1e-12 and means[1] <= means[2] + 1e-12, means
    assert elapsed < 120.0, f"robustness sweep took {elapsed:.0f}s"
    report(10, f"mean error over 3 trained models at eps (0, 2/255, 8/255) = "
               f"{means[0]:.3f} <= {means[1]:.3f} <= {means[2]:.3f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 11: full command-line determinism
# ---------------------------------------------------------------------------

def test_criterion_11_cli_determinism(tmp_path):
    config = {
        "policy": "automix",
        "epochs": 2,
        "batch_size": 16,
        "base_lr": 0.05,
        "seed": 5,
        "feature_layer": 2,
        "encoder": {"input_channels": 1, "stage_channels": [2, 3, 4],
                    "stage_strides": [2, 2, 2], "num_classes": 3},
        "data": {"kind": "synthetic", "n_per_class": 10, "image_size": 16,
                 "classes": 3, "eval_per_class": 6},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    assert cli.main(["train", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    run_a, run_b = sorted(p for p in out.iterdir() if p.is_dir())
    compared = []
    for name in ("student.ckpt", "teacher.ckpt", "mixblock.ckpt", "metrics.csv"):
        assert (run_a / name).read_bytes() == (run_b / name).read_bytes(), name
        compared.append(name)
    report(11, f"two identical train invocations produced bitwise-equal {', '.join(compared)}")
