"""Momentum training pipeline.

Each step mixes two independently permuted pairings: one batch feeds the
student classifier through a stop-gradient (so the classifier treats mixed
images as data), the other flows through the frozen teacher's activations so
that only the mask generator receives its gradient. Teacher weights follow the
student by exponential moving average on a cosine-increasing coefficient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses, mix_policies, mixblock, models
from .data import LabeledDataset, augment_batch, make_epoch_batches, one_hot, standardize
from .errors import NumericError, ParameterError
from .losses import GammaSchedule, LossBreakdown
from .metrics import mask_stats, top1_accuracy
from .tensor import Tensor, backward, reset_tape, stop_gradient

logger = logging.getLogger(__name__)

POLICIES = ("vanilla", "mixup", "cutmix", "automix")

CSV_HEADER = ("epoch,step,loss_ce,loss_mce_cls,loss_mce_gen,loss_lambda,"
              "top1,mask_mean,mask_std,lr,momentum_m")

MASK_COLLAPSE_STD = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    policy: str = "automix"
    epochs: int = 30
    batch_size: int = 100
    base_lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float | None = None          # None resolves per policy: 2 automix, 1 baselines
    feature_layer: int = 3
    ema_momentum0: float = 0.999
    ema_momentum_const: float | None = None  # fixed coefficient overriding the cosine schedule
    gamma0: float = 0.1
    seed: int = 0
    augment: bool = True
    encoder: models.EncoderConfig = field(default_factory=models.EncoderConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ParameterError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("need epochs >= 0 and batch_size >= 1")
        self.encoder.check_layer(self.feature_layer)
        if not 0.0 <= self.ema_momentum0 <= 1.0:
            raise ParameterError("ema_momentum0 must lie in [0, 1]")
        if self.ema_momentum_const is not None and not 0.0 <= self.ema_momentum_const <= 1.0:
            raise ParameterError("ema_momentum_const must lie in [0, 1]")
        if self.alpha is not None and self.alpha <= 0:
            raise ParameterError("alpha must be positive")

    @property
    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.0 if self.policy == "automix" else 1.0


@dataclass
class TrainState:
    config: TrainConfig
    student: models.ParamSet
    teacher: models.ParamSet
    mix_params: mixblock.MixBlockParams
    velocity_student: dict[str, np.ndarray]
    velocity_mix: dict[str, np.ndarray]
    gamma_schedule: GammaSchedule
    total_steps: int
    rng: np.random.Generator
    step: int = 0


def momentum_schedule(step: int, total_steps: int, m0: float) -> float:
    """Cosine increase from m0 at step 0 to 1 at the final step; clamps past the end."""
    if step < 0:
        raise ParameterError("step must be non-negative")
    if step >= total_steps:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr to zero."""
    if step < 0:
        raise ParameterError("step must be non-negative")
    t = min(step, total_steps)
    return base_lr * (math.cos(math.pi * t / total_steps) + 1.0) / 2.0


def sgd_update(params: models.ParamSet, grads: dict[str, np.ndarray],
               velocity: dict[str, np.ndarray], lr: float,
               momentum: float = 0.9, weight_decay: float = 1e-4) -> models.ParamSet:
    """v <- momentum v + g + wd p; p <- p - lr v. Mutates velocity, returns new params."""
    updated: models.ParamSet = {}
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if grad.shape != tensor.data.shape:
            raise ParameterError(f"gradient shape {grad.shape} mismatches {name} {tensor.data.shape}")
        v = velocity[name]
        v *= momentum
        v += grad + weight_decay * tensor.data
        updated[name] = Tensor(tensor.data - lr * v, requires_grad=tensor.requires_grad)
    return updated


def init_state(config: TrainConfig, total_steps: int) -> TrainState:
    student = models.init_params(config.encoder, seed=config.seed)
    teacher = models.clone_params(student)
    mix = mixblock.init_mix_params(
        config.encoder.feature_channels(config.feature_layer), seed=config.seed + 1)
    return TrainState(
        config=config,
        student=student,
        teacher=teacher,
        mix_params=mix,
        velocity_student={n: np.zeros_like(t.data) for n, t in student.items()},
        velocity_mix={n: np.zeros_like(t.data) for n, t in mix.named().items()},
        gamma_schedule=GammaSchedule(total_steps=max(total_steps, 1), gamma0=config.gamma0),
        total_steps=max(total_steps, 1),
        rng=np.random.default_rng(config.seed),
    )


@dataclass
class StepDraws:
    """Randomness consumed by one step, injectable for probing."""

    index_q: np.ndarray | None = None
    lam_q: float | None = None
    index_k: np.ndarray | None = None
    lam_k: float | None = None


def draw_step_randomness(config: TrainConfig, n: int, rng: np.random.Generator) -> StepDraws:
    if config.policy == "vanilla":
        return StepDraws()
    alpha = config.resolved_alpha
    index_q = mix_policies.pair_permutation(n, rng)
    lam_q = mix_policies.sample_lambda(alpha, rng).lam
    if config.policy != "automix":
        return StepDraws(index_q=index_q, lam_q=lam_q)
    index_k = mix_policies.pair_permutation(n, rng)
    lam_k = mix_policies.sample_lambda(alpha, rng).lam
    return StepDraws(index_q=index_q, lam_q=lam_q, index_k=index_k, lam_k=lam_k)


@dataclass
class StepLosses:
    loss_cls: Tensor
    loss_gen: Tensor | None
    breakdown: LossBreakdown
    clean_logits: np.ndarray
    mask_mean: float
    mask_std: float


def compute_step_losses(state: TrainState, x: np.ndarray, y: np.ndarray,
                        draws: StepDraws, gamma: float) -> StepLosses:
    """Forward passes and loss terms for one batch under the current draws."""
    config = state.config
    k = config.encoder.num_classes
    y_hot = one_hot(y, k)
    x_t = Tensor(x)

    if config.policy == "vanilla":
        logits = models.forward_logits(state.student, x_t, config.encoder)
        ce = losses.cross_entropy(logits, y_hot)
        breakdown = losses.split_losses((ce, 0.0), (0.0, 0.0))
        return StepLosses(loss_cls=ce, loss_gen=None, breakdown=breakdown,
                          clean_logits=logits.data, mask_mean=0.0, mask_std=0.0)

    if config.policy in ("mixup", "cutmix"):
        x_j = x[draws.index_q]
        if config.policy == "mixup":
            batch = mix_policies.mixup_batch(x, x_j, draws.lam_q)
        else:
            batch = mix_policies.cutmix_box(x, x_j, draws.lam_q, state.rng)
        logits = models.forward_logits(state.student, batch.x_mix, config.encoder)
        mce = losses.mixup_ce(logits, y_hot, y_hot[draws.index_q], batch.lam)
        breakdown = losses.split_losses((0.0, mce), (0.0, 0.0))
        mask_mean, mask_std = mask_stats(batch.mask, batch.lam)
        return StepLosses(loss_cls=mce, loss_gen=None, breakdown=breakdown,
                          clean_logits=logits.data,
                          mask_mean=mask_mean, mask_std=mask_std)

    # automix: teacher features are detached by construction (teacher weights
    # and raw inputs are both off the tape)
    layer = config.feature_layer
    z = models.forward_features(state.teacher, x_t, layer, config.encoder)
    z = stop_gradient(z)

    def paired(idx):
        return Tensor(x[idx]), Tensor(z.data[idx])

    x_jq, z_jq = paired(draws.index_q)
    x_jk, z_jk = paired(draws.index_k)

    mixed_q = mixblock.generate(x_t, x_jq, z, z_jq, draws.lam_q, state.mix_params)
    mixed_k = mixblock.generate(x_t, x_jk, z, z_jk, draws.lam_k, state.mix_params)

    # classification bucket: the student sees the mixed batch as plain data
    clean_logits = models.forward_logits(state.student, x_t, config.encoder)
    ce = losses.cross_entropy(clean_logits, y_hot)
    mix_q_input = stop_gradient(mixed_q.x_mix)
    logits_mix_q = models.forward_logits(state.student, mix_q_input, config.encoder)
    mce_cls = losses.mixup_ce(logits_mix_q, y_hot, y_hot[draws.index_q], draws.lam_q)
    loss_cls = ce + mce_cls

    # generation bucket: gradient flows through the frozen teacher's
    # activations into the mask and from there into the generator only
    logits_mix_k = models.forward_logits(state.teacher, mixed_k.x_mix, config.encoder)
    mce_gen = losses.mixup_ce(logits_mix_k, y_hot, y_hot[draws.index_k], draws.lam_k)
    lam_term = losses.lambda_loss(mixed_k.mask, draws.lam_k, gamma)
    loss_gen = mce_gen + lam_term

    breakdown = losses.split_losses((ce, mce_cls), (mce_gen, lam_term))
    mask_mean, mask_std = mask_stats(mixed_k.mask, draws.lam_k)
    return StepLosses(loss_cls=loss_cls, loss_gen=loss_gen, breakdown=breakdown,
                      clean_logits=clean_logits.data,
                      mask_mean=mask_mean, mask_std=mask_std)


def _named_grads(grad_map, named_params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in named_params.items():
        g = grad_map.get(tensor)
        if g is not None:
            out[name] = g
    return out


def _grad_leak(grad_map, named_params: dict[str, Tensor]) -> float:
    leak = 0.0
    for tensor in named_params.values():
        g = grad_map.get(tensor)
        if g is not None:
            leak = max(leak, float(np.max(np.abs(g))))
    return leak


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray,
               draws: StepDraws | None = None) -> tuple[TrainState, LossBreakdown, dict]:
    """One alternating update: classifier bucket, generator bucket, SGD, EMA."""
    config = state.config
    reset_tape()
    for t in state.student.values():
        t.grad = None
    for t in state.mix_params.named().values():
        t.grad = None

    if draws is None:
        draws = draw_step_randomness(config, x.shape[0], state.rng)
    gamma = state.gamma_schedule.gamma(state.step)
    out = compute_step_losses(state, x, y, draws, gamma)

    bd = out.breakdown
    if any(math.isnan(v) for v in (bd.ce, bd.mce_cls, bd.mce_gen, bd.lambda_loss)):
        raise NumericError(
            "NaN loss at step "
            f"{state.step}: {bd} (lam_q={draws.lam_q}, lam_k={draws.lam_k}, "
            f"mask_mean={out.mask_mean:.4f}, mask_std={out.mask_std:.4f})")

    cls_map = backward(out.loss_cls)
    gen_map = backward(out.loss_gen) if out.loss_gen is not None else {}

    mix_named = state.mix_params.named()
    metrics = {
        "top1": top1_accuracy(out.clean_logits, y),
        "mask_mean": out.mask_mean,
        "mask_std": out.mask_std,
        "cls_grad_on_mix": _grad_leak(cls_map, mix_named),
        "gen_grad_on_student": _grad_leak(gen_map, state.student),
        "gen_grad_on_teacher": _grad_leak(gen_map, state.teacher),
    }

    lr = lr_schedule(state.step, state.total_steps, config.base_lr)
    metrics["lr"] = lr

    student_grads = _named_grads(cls_map, state.student)
    for name, g in _named_grads(gen_map, state.student).items():
        student_grads[name] = student_grads.get(name, 0.0) + g
    state.student = sgd_update(state.student, student_grads, state.velocity_student,
                               lr, config.sgd_momentum, config.weight_decay)

    if config.policy == "automix":
        mix_grads = _named_grads(gen_map, mix_named)
        for name, g in _named_grads(cls_map, mix_named).items():
            mix_grads[name] = mix_grads.get(name, 0.0) + g
        new_named = sgd_update(mix_named, mix_grads, state.velocity_mix,
                               lr, config.sgd_momentum, config.weight_decay)
        state.mix_params = mixblock.params_from_named(new_named)

    if config.ema_momentum_const is not None:
        m = config.ema_momentum_const
    else:
        m = momentum_schedule(state.step, state.total_steps, config.ema_momentum0)
    metrics["momentum_m"] = m
    state.teacher = models.ema_update(state.teacher, state.student, m)

    state.step += 1
    reset_tape()
    return state, bd, metrics


def evaluate_top1(params: models.ParamSet, ds: LabeledDataset,
                  config: models.EncoderConfig) -> float:
    logits = models.predict_logits(params, ds.images, config)
    return top1_accuracy(logits, ds.labels)


def format_csv_row(row: dict) -> str:
    return ",".join([
        str(row["epoch"]), str(row["step"]),
        repr(row["loss_ce"]), repr(row["loss_mce_cls"]),
        repr(row["loss_mce_gen"]), repr(row["loss_lambda"]),
        repr(row["top1"]), repr(row["mask_mean"]), repr(row["mask_std"]),
        repr(row["lr"]), repr(row["momentum_m"]),
    ])


def fit(config: TrainConfig, train_ds: LabeledDataset,
        eval_ds: LabeledDataset | None = None,
        out_dir=None) -> tuple[TrainState, list[dict]]:
    """Epoch loop; deterministic given (config, data). Standardizes with
    training-split statistics, logs one CSV row per epoch, checkpoints at the end."""
    train_std, stats = standardize(train_ds)
    eval_std = None
    if eval_ds is not None:
        from .data import apply_standardization
        eval_std = apply_standardization(eval_ds, stats)

    batches_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = max(config.epochs * batches_per_epoch, 1)
    state = init_state(config, total_steps)

    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        sums = {"ce": 0.0, "mce_cls": 0.0, "mce_gen": 0.0, "lam": 0.0,
                "top1": 0.0, "mask_mean": 0.0, "mask_std": 0.0}
        last = {"lr": 0.0, "momentum_m": 1.0}
        max_mask_std = 0.0
        count = 0
        for xb, yb in make_epoch_batches(train_std, config.batch_size, state.rng):
            if config.augment:
                xb = augment_batch(xb, state.rng)
            state, bd, step_metrics = train_step(state, xb, yb)
            sums["ce"] += bd.ce
            sums["mce_cls"] += bd.mce_cls
            sums["mce_gen"] += bd.mce_gen
            sums["lam"] += bd.lambda_loss
            sums["top1"] += step_metrics["top1"]
            sums["mask_mean"] += step_metrics["mask_mean"]
            sums["mask_std"] += step_metrics["mask_std"]
            max_mask_std = max(max_mask_std, step_metrics["mask_std"])
            last["lr"] = step_metrics["lr"]
            last["momentum_m"] = step_metrics["momentum_m"]
            count += 1

        if config.policy == "automix" and max_mask_std < MASK_COLLAPSE_STD:
            logger.warning("mask spatial std stayed below %.0e for all of epoch %d: "
                           "the generator has collapsed to a constant mask",
                           MASK_COLLAPSE_STD, epoch)

        top1 = (evaluate_top1(state.student, eval_std, config.encoder)
                if eval_std is not None else sums["top1"] / count)
        history.append({
            "epoch": epoch,
            "step": state.step,
            "loss_ce": sums["ce"] / count,
            "loss_mce_cls": sums["mce_cls"] / count,
            "loss_mce_gen": sums["mce_gen"] / count,
            "loss_lambda": sums["lam"] / count,
            "top1": top1,
            "mask_mean": sums["mask_mean"] / count,
            "mask_std": sums["mask_std"] / count,
            "lr": last["lr"],
            "momentum_m": last["momentum_m"],
        })

    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in history:
                fh.write(format_csv_row(row) + "\n")
        models.save_params(out / "student.ckpt", state.student)
        models.save_params(out / "teacher.ckpt", state.teacher)
        models.save_params(out / "mixblock.ckpt", state.mix_params.named())
        (out / "stats.json").write_text(stats.to_json())
    return state, history


# ---------------------------------------------------------------------------
# generator-only training against a frozen encoder (ratio-fidelity runs)
# ---------------------------------------------------------------------------

def train_mask_generator(encoder_params: models.ParamSet, config: TrainConfig,
                         images: np.ndarray, steps: int = 500, lr: float = 1.0,
                         gamma: float = 0.1, batch_size: int = 32,
                         lam_grid=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                         seed: int = 0) -> mixblock.MixBlockParams:
    """Optimize only the mask generator under the ratio-fidelity hinge, with
    features from a frozen encoder; gamma stays fixed."""
    rng = np.random.default_rng(seed)
    layer = config.feature_layer
    feats = models.forward_features(encoder_params, Tensor(images), layer, config.encoder)
    pool = feats.data
    mix = mixblock.init_mix_params(config.encoder.feature_channels(layer), seed=seed)
    velocity = {n: np.zeros_like(t.data) for n, t in mix.named().items()}
    factor = config.encoder.cumulative_stride(layer)

    for _ in range(steps):
        reset_tape()
        pick = rng.integers(0, pool.shape[0], size=2 * batch_size)
        z_i = Tensor(pool[pick[:batch_size]])
        z_j = Tensor(pool[pick[batch_size:]])
        lam = float(rng.choice(lam_grid))
        pair = mixblock.compute_mask(mixblock.embed_lambda(z_i, lam),
                                     mixblock.embed_lambda(z_j, 1.0 - lam),
                                     mix, factor)
        loss = losses.lambda_loss(pair.s_i, lam, gamma)
        grad_map = backward(loss) if loss.tape_node is not None else {}
        named = mix.named()
        grads = _named_grads(grad_map, named)
        new_named = sgd_update(named, grads, velocity, lr, momentum=0.9, weight_decay=0.0)
        mix = mixblock.params_from_named(new_named)
    reset_tape()
    return mix


def mask_lambda_residuals(encoder_params: models.ParamSet, mix: mixblock.MixBlockParams,
                          config: TrainConfig, images: np.ndarray,
                          lam_grid=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                          pairs: int = 64, seed: int = 123) -> dict[float, float]:
    """Mean |mask mean - lambda| per grid ratio on random feature pairs."""
    from .tensor import no_grad
    rng = np.random.default_rng(seed)
    layer = config.feature_layer
    factor = config.encoder.cumulative_stride(layer)
    with no_grad():
        pool = models.forward_features(encoder_params, Tensor(images), layer, config.encoder).data
        residuals = {}
        for lam in lam_grid:
            pick = rng.integers(0, pool.shape[0], size=2 * pairs)
            pair = mixblock.compute_mask(
                mixblock.embed_lambda(Tensor(pool[pick[:pairs]]), lam),
                mixblock.embed_lambda(Tensor(pool[pick[pairs:]]), 1.0 - lam),
                mix, factor)
            residual, _ = mask_stats(pair.s_i, lam)
            residuals[lam] = residual
    return residuals
