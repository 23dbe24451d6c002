"""Fast built-in verification: gradient checks for every op plus the core
invariants, runnable from the command line without the test suite."""

from __future__ import annotations

import numpy as np

from . import losses, metrics, mixblock, models, trainer
from . import tensor as T
from .data import one_hot
from .tensor import Tensor

GRAD_TOL = 1e-5


def _rng(seed=0):
    return np.random.default_rng(seed)


def check_matmul_gradient():
    rng = _rng(1)
    b = Tensor(rng.standard_normal((4, 2)))
    err = T.grad_check(lambda t: T.matmul(t, b).sum(), Tensor(rng.standard_normal((3, 4))))
    assert err < GRAD_TOL, f"matmul gradient error {err:.2e}"


def check_conv2d_gradient():
    rng = _rng(2)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    err = T.grad_check(lambda t: T.conv2d(t, w, 2, 1).sum(), x)
    assert err < GRAD_TOL, f"conv2d input gradient error {err:.2e}"
    err_w = T.grad_check(lambda t: T.conv2d(x, t, 2, 1).sum(), w)
    assert err_w < GRAD_TOL, f"conv2d weight gradient error {err_w:.2e}"


def check_sigmoid_gradient():
    rng = _rng(3)
    err = T.grad_check(lambda t: T.sigmoid(t).sum(), Tensor(rng.standard_normal(8)))
    assert err < 1e-6, f"sigmoid gradient error {err:.2e}"


def check_softmax_gradient_and_rows():
    rng = _rng(4)
    x = Tensor(rng.standard_normal((3, 5)))
    v = Tensor(rng.standard_normal((3, 5)))
    err = T.grad_check(lambda t: (T.softmax_rows(t) * v).sum(), x)
    assert err < GRAD_TOL, f"softmax gradient error {err:.2e}"
    rows = T.softmax_rows(Tensor(rng.standard_normal((20, 7)))).data.sum(axis=-1)
    assert np.max(np.abs(rows - 1.0)) < 1e-9, "softmax rows do not sum to one"


def check_upsample_and_concat_gradients():
    rng = _rng(5)
    v = Tensor(rng.standard_normal((1, 2, 6, 6)))
    err = T.grad_check(lambda t: (T.upsample_bilinear(t, 2) * v).sum(),
                       Tensor(rng.standard_normal((1, 2, 3, 3))))
    assert err < GRAD_TOL, f"upsample gradient error {err:.2e}"
    b = Tensor(rng.standard_normal((1, 1, 3, 3)))
    err2 = T.grad_check(lambda t: (T.concat_channels(t, b) * 1.5).sum(),
                        Tensor(rng.standard_normal((1, 2, 3, 3))))
    assert err2 < GRAD_TOL, f"concat gradient error {err2:.2e}"


def check_stop_gradient_semantics():
    rng = _rng(6)
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    out = T.stop_gradient(x)
    assert np.array_equal(out.data, x.data), "stop_gradient altered values"
    grads = T.backward((T.stop_gradient(x) * x).sum())
    assert np.allclose(grads[x], x.data, atol=1e-15), "stop_gradient leaked gradient"


def check_mask_invariants():
    rng = _rng(7)
    params = mixblock.init_mix_params(4, seed=0)
    params.w_z = Tensor(rng.standard_normal(params.w_z.shape) * 0.5, requires_grad=True)
    zi = mixblock.embed_lambda(Tensor(rng.standard_normal((2, 4, 3, 3))), 0.3)
    zj = mixblock.embed_lambda(Tensor(rng.standard_normal((2, 4, 3, 3))), 0.7)
    pair = mixblock.compute_mask(zi, zj, params, 2)
    assert np.all(pair.s_i.data >= 0) and np.all(pair.s_i.data <= 1), "mask left [0,1]"
    assert np.max(np.abs(pair.s_i.data + pair.s_j.data - 1.0)) < 1e-12, "mask pair sum broke"


def check_mixblock_degeneracy():
    rng = _rng(8)
    params = mixblock.init_mix_params(3, seed=1)  # zero value projection
    x1, x2 = rng.random((2, 2, 1, 8, 8))
    z1, z2 = rng.standard_normal((2, 2, 3, 4, 4))
    out = mixblock.generate(Tensor(x1), Tensor(x2), Tensor(z1), Tensor(z2), 0.7, params)
    expect = 0.5 * x1 + 0.5 * x2
    assert np.max(np.abs(out.x_mix.data - expect)) < 1e-12, "zero value projection is not 0.5 blend"


def check_end_to_end_generator_gradient():
    rng = _rng(9)
    cfg = models.EncoderConfig(input_channels=1, stage_channels=(2, 3), stage_strides=(2, 2),
                               num_classes=3)
    teacher = models.clone_params(models.init_params(cfg, seed=3))
    params = mixblock.init_mix_params(3, seed=2)
    x1 = Tensor(rng.random((2, 1, 8, 8)))
    x2 = Tensor(rng.random((2, 1, 8, 8)))
    z1 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    z2 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    y_i = one_hot(np.array([0, 1]), 3)
    y_j = one_hot(np.array([2, 0]), 3)

    def loss_wrt(name):
        def f(t):
            p = mixblock.MixBlockParams(w_p=t if name == "w_p" else params.w_p,
                                        w_z=t if name == "w_z" else params.w_z)
            mixed = mixblock.generate(x1, x2, z1, z2, 0.4, p)
            logits = models.forward_logits(teacher, mixed.x_mix, cfg)
            return losses.mixup_ce(logits, y_i, y_j, 0.4)
        return f

    for name, tensor in (("w_p", params.w_p), ("w_z", params.w_z)):
        err = T.grad_check(loss_wrt(name), tensor)
        assert err < GRAD_TOL, f"generator chain gradient error on {name}: {err:.2e}"


def check_ema_contract():
    teacher = {"w": Tensor(np.array([1.0, -1.0]))}
    student = {"w": Tensor(np.array([0.0, 0.0]))}
    assert np.array_equal(models.ema_update(teacher, student, 1.0)["w"].data, teacher["w"].data)
    assert np.array_equal(models.ema_update(teacher, student, 0.0)["w"].data, student["w"].data)
    assert trainer.momentum_schedule(0, 100, 0.999) == 0.999
    assert trainer.momentum_schedule(100, 100, 0.999) == 1.0


def check_metric_oracles():
    rng = _rng(10)
    logits = rng.standard_normal((50, 4))
    labels = rng.integers(0, 4, size=50)
    loop = sum(1 for row, lab in zip(logits, labels) if int(np.argmax(row)) == lab) / 50
    assert metrics.top1_accuracy(logits, labels) == loop, "top-1 disagrees with loop oracle"
    conf = rng.random(60)
    correct = rng.integers(0, 2, size=60).astype(float)
    report = metrics.calibration_report(conf, correct)
    assert sum(b.count for b in report.bins) == 60, "calibration bins lost predictions"
    assert 0.0 <= report.ece <= 1.0, "ece out of range"


CHECKS = [
    ("matmul gradient", check_matmul_gradient),
    ("conv2d gradient", check_conv2d_gradient),
    ("sigmoid gradient", check_sigmoid_gradient),
    ("softmax gradient and row sums", check_softmax_gradient_and_rows),
    ("upsample and concat gradients", check_upsample_and_concat_gradients),
    ("stop_gradient semantics", check_stop_gradient_semantics),
    ("mask invariants", check_mask_invariants),
    ("mixblock degeneracy", check_mixblock_degeneracy),
    ("generator chain gradient", check_end_to_end_generator_gradient),
    ("ema contract", check_ema_contract),
    ("metric oracles", check_metric_oracles),
]


def run_selfcheck() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        T.reset_tape()
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # report, never raise: callers decide the exit code
            results.append((name, False, str(exc)))
    T.reset_tape()
    return results
