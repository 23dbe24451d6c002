"""Command line entry point: train, eval, gen-masks, compare, selfcheck.

Configuration is a single JSON document mirroring the training config field
names, with nested "encoder" and "data" blocks; any scalar can be overridden
by a flag (flags > file > defaults). Run directories are timestamped and never
overwritten; each holds exactly one manifest sufficient to reproduce the run.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data, metrics, mixblock, models, ppm, selfcheck, trainer
from .errors import AutomixError, NumericError, ParameterError
from .models import EncoderConfig
from .tensor import Tensor, no_grad, reset_tape
from .trainer import POLICIES, TrainConfig

DATA_DIR_ENV = "AUTOMIX_DATA_DIR"

FIG_LAMBDA_GRID = (0.0, 0.3, 0.7, 1.0)


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"        # synthetic | cifar10
    n_per_class: int = 500
    image_size: int = 64
    classes: int = 4
    eval_per_class: int = 100
    seed: int = 0                  # dataset seed, fixed across training seeds
    noise: float = 0.1
    train_path: str = ""           # cifar10 record files, relative to AUTOMIX_DATA_DIR
    eval_path: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ParameterError(f"unknown dataset kind {self.kind!r}; choose synthetic or cifar10")


def _build_dataclass(cls, doc: dict, where: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - valid
    if unknown:
        raise ParameterError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    return cls(**doc)


def load_config(path: str | None, overrides: dict) -> tuple[TrainConfig, DataConfig]:
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ParameterError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config file is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ParameterError("config document must be a JSON object")

    encoder_doc = dict(doc.pop("encoder", {}))
    data_doc = dict(doc.pop("data", {}))
    train_doc = dict(doc)

    for key, value in overrides.items():
        if value is None:
            continue
        if key in {f.name for f in dataclasses.fields(DataConfig)} and key not in {"seed"}:
            data_doc[key] = value
        elif key == "data_seed":
            data_doc["seed"] = value
        else:
            train_doc[key] = value

    data_cfg = _build_dataclass(DataConfig, data_doc, "data")
    encoder = _build_dataclass(EncoderConfig, encoder_doc, "encoder")
    train_doc["encoder"] = encoder
    train_cfg = _build_dataclass(TrainConfig, train_doc, "config")
    return train_cfg, data_cfg


def resolve_data_path(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(os.environ.get(DATA_DIR_ENV, ".")) / p
    return p


def build_datasets(cfg: DataConfig) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    if cfg.kind == "synthetic":
        train = data.gen_synthetic_shapes(cfg.n_per_class, cfg.image_size, k=cfg.classes,
                                          seed=cfg.seed, noise=cfg.noise, split="train")
        test = data.gen_synthetic_shapes(cfg.eval_per_class, cfg.image_size, k=cfg.classes,
                                         seed=cfg.seed + 10007, noise=cfg.noise, split="test")
        return train, test
    train = data.read_cifar10_bin(resolve_data_path(cfg.train_path), split="train")
    test = data.read_cifar10_bin(resolve_data_path(cfg.eval_path), split="test")
    return train, test


def make_run_dir(root: Path, name: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{name}-{stamp}"
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = root / f"{name}-{stamp}-{suffix}"
    candidate.mkdir()
    return candidate


def write_manifest(run_dir: Path, train_cfg: TrainConfig, data_cfg: DataConfig,
                   fingerprints: dict, artifacts: dict, timings: dict) -> None:
    config_doc = dataclasses.asdict(train_cfg)
    config_doc["data"] = dataclasses.asdict(data_cfg)
    manifest = {
        "config": config_doc,
        "seed": train_cfg.seed,
        "dataset_fingerprint": fingerprints,
        "artifacts": artifacts,
        "timings": timings,
        "created": datetime.now().isoformat(timespec="seconds"),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_run(run_dir: Path) -> tuple[TrainConfig, DataConfig, dict]:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ParameterError(f"no manifest in {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    doc = dict(manifest["config"])
    data_doc = doc.pop("data")
    encoder_doc = doc.pop("encoder")
    data_cfg = _build_dataclass(DataConfig, data_doc, "data")
    doc["encoder"] = _build_dataclass(EncoderConfig, encoder_doc, "encoder")
    train_cfg = _build_dataclass(TrainConfig, doc, "config")
    return train_cfg, data_cfg, manifest


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("policy", "epochs", "batch_size", "base_lr", "alpha", "feature_layer",
                  "seed", "n_per_class", "image_size", "data_seed")}
    train_cfg, data_cfg = load_config(args.config, overrides)
    train_ds, eval_ds = build_datasets(data_cfg)
    run_dir = make_run_dir(Path(args.out_dir), train_cfg.policy)

    started = time.perf_counter()
    state, history = trainer.fit(train_cfg, train_ds, eval_ds, out_dir=run_dir)
    elapsed = time.perf_counter() - started

    write_manifest(
        run_dir, train_cfg, data_cfg,
        fingerprints={"train": data.fingerprint(train_ds), "eval": data.fingerprint(eval_ds)},
        artifacts={name: name for name in
                   ("metrics.csv", "student.ckpt", "teacher.ckpt", "mixblock.ckpt", "stats.json")},
        timings={"train_seconds": elapsed},
    )
    final = history[-1]["top1"] if history else float("nan")
    print(f"run {run_dir} finished: policy={train_cfg.policy} seed={train_cfg.seed} "
          f"epochs={train_cfg.epochs} final_top1={final:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_eval_bundle(run_dir: Path, which: str):
    train_cfg, data_cfg, _ = load_run(run_dir)
    params = models.load_params(run_dir / ("teacher.ckpt" if which == "teacher" else "student.ckpt"))
    stats = data.ChannelStats.from_json((run_dir / "stats.json").read_text())
    return train_cfg, data_cfg, params, stats


def cmd_eval(args) -> int:
    run_dir = Path(args.checkpoint)
    train_cfg, data_cfg, params, stats = _load_eval_bundle(run_dir, args.params)
    _, eval_ds = build_datasets(data_cfg)
    eval_std = data.apply_standardization(eval_ds, stats)

    logits = models.predict_logits(params, eval_std.images, train_cfg.encoder)
    top1 = metrics.top1_accuracy(logits, eval_std.labels)
    confidences, predictions = metrics.softmax_confidence(logits)
    report = metrics.calibration_report(confidences, (predictions == eval_std.labels).astype(float))
    print(f"top1 {top1!r}")
    print(f"ece {report.ece!r}")

    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_reliability_csv(report, out_dir / "reliability.csv")

    if args.fgsm is not None:
        error = metrics.fgsm_error(params, eval_ds.images, eval_ds.labels, args.fgsm,
                                   train_cfg.encoder, stats=stats)
        print(f"fgsm_error {error!r} (epsilon {args.fgsm!r})")

    if args.mixed:
        rows = mixed_pair_metric_rows(run_dir, lam=0.5)
        path = out_dir / "mixed_metrics.csv"
        with open(path, "w") as fh:
            fh.write("batch,top1_in_pair,top2_equals_pair\n")
            for i, (a, b) in enumerate(rows):
                fh.write(f"{i},{a!r},{b!r}\n")
        print(f"mixed-pair metrics over {len(rows)} batches written to {path}")
    return 0


def mixed_pair_metric_rows(run_dir: Path, lam: float = 0.5,
                           batch_size: int = 50) -> list[tuple[float, float]]:
    """Containment accuracies of the student on generator-mixed held-out pairs."""
    train_cfg, data_cfg, _, stats = _load_eval_bundle(run_dir, "student")
    student = models.load_params(run_dir / "student.ckpt")
    teacher = models.load_params(run_dir / "teacher.ckpt")
    mix = mixblock.params_from_named(models.load_params(run_dir / "mixblock.ckpt"))
    _, eval_ds = build_datasets(data_cfg)
    eval_std = data.apply_standardization(eval_ds, stats)

    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(len(eval_std))
    partner = rng.permutation(len(eval_std))
    rows = []
    with no_grad():
        for start in range(0, len(eval_std), batch_size):
            sel = order[start:start + batch_size]
            mate = partner[start:start + batch_size]
            x_i = Tensor(eval_std.images[sel])
            x_j = Tensor(eval_std.images[mate])
            z_i = models.forward_features(teacher, x_i, train_cfg.feature_layer, train_cfg.encoder)
            z_j = models.forward_features(teacher, x_j, train_cfg.feature_layer, train_cfg.encoder)
            mixed = mixblock.generate(x_i, x_j, z_i, z_j, lam, mix)
            logits = models.forward_logits(student, mixed.x_mix, train_cfg.encoder)
            rows.append(metrics.mixed_topk_accuracy(
                logits.data, eval_std.labels[sel], eval_std.labels[mate]))
    reset_tape()
    return rows


# ---------------------------------------------------------------------------
# mask export
# ---------------------------------------------------------------------------

def _parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        left, _, right = chunk.partition(":")
        pairs.append((int(left), int(right)))
    return pairs


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def cmd_gen_masks(args) -> int:
    run_dir = Path(args.checkpoint)
    train_cfg, data_cfg, _, stats = _load_eval_bundle(run_dir, "student")
    teacher = models.load_params(run_dir / "teacher.ckpt")
    mix = mixblock.params_from_named(models.load_params(run_dir / "mixblock.ckpt"))
    _, eval_ds = build_datasets(data_cfg)
    eval_std = data.apply_standardization(eval_ds, stats)

    pairs = _parse_pairs(args.pairs)
    lambdas = _parse_floats(args.lambdas)
    out_dir = Path(args.out) if args.out else run_dir / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)

    mean_arr = np.asarray(stats.mean).reshape(-1, 1, 1)
    std_arr = np.asarray(stats.std).reshape(-1, 1, 1)
    with no_grad():
        for i, j in pairs:
            x_i = Tensor(eval_std.images[i:i + 1])
            x_j = Tensor(eval_std.images[j:j + 1])
            z_i = models.forward_features(teacher, x_i, train_cfg.feature_layer, train_cfg.encoder)
            z_j = models.forward_features(teacher, x_j, train_cfg.feature_layer, train_cfg.encoder)
            for lam in lambdas:
                mixed = mixblock.generate(x_i, x_j, z_i, z_j, lam, mix)
                tag = f"pair{i}-{j}_lam{lam:g}"
                ppm.write_p5(out_dir / f"mask_{tag}.pgm", mixed.mask.data[0, 0])
                pixels = np.clip(mixed.x_mix.data[0] * std_arr + mean_arr, 0.0, 1.0)
                ppm.write_image(out_dir / f"mix_{tag}" f".{'ppm' if pixels.shape[0] == 3 else 'pgm'}",
                                pixels)
                print(f"pair ({i},{j}) lambda {lam:g}: mask mean {float(mixed.mask.data.mean())!r}")
    reset_tape()
    print(f"wrote {len(pairs) * len(lambdas)} mask/mix image pairs to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def median_of_last_epochs(history_top1: list[float], window: int = 10) -> float:
    tail = history_top1[-window:] if len(history_top1) > window else history_top1
    return float(np.median(tail))


def _comparison_cell(payload) -> float:
    cfg, data_cfg, train_ds, eval_ds, cell_dir = payload
    started = time.perf_counter()
    _, history = trainer.fit(cfg, train_ds, eval_ds, out_dir=cell_dir)
    write_manifest(
        cell_dir, cfg, data_cfg,
        fingerprints={"train": data.fingerprint(train_ds), "eval": data.fingerprint(eval_ds)},
        artifacts={name: name for name in
                   ("metrics.csv", "student.ckpt", "teacher.ckpt", "mixblock.ckpt", "stats.json")},
        timings={"train_seconds": time.perf_counter() - started},
    )
    return median_of_last_epochs([row["top1"] for row in history])


def run_comparison(train_cfg: TrainConfig, data_cfg: DataConfig, policies: list[str],
                   seeds: list[int], out_dir: Path, jobs: int = 1) -> list[dict]:
    """Train every (policy, seed) cell on the shared dataset and summarize.

    Cells are independent (own rng, own run directory), so jobs > 1 runs them
    in worker processes; per-cell results are identical either way.
    """
    for policy in policies:
        if policy not in POLICIES:
            raise ParameterError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    if not policies or not seeds:
        raise ParameterError("need at least one policy and one seed")
    train_ds, eval_ds = build_datasets(data_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = []
    for policy in policies:
        for seed in seeds:
            cfg = dataclasses.replace(train_cfg, policy=policy, seed=seed, alpha=train_cfg.alpha)
            cells.append((cfg, data_cfg, train_ds, eval_ds, out_dir / f"{policy}-seed{seed}"))

    if jobs > 1:
        import concurrent.futures
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            medians_flat = list(pool.map(_comparison_cell, cells))
    else:
        medians_flat = [_comparison_cell(cell) for cell in cells]

    summary = []
    for i, policy in enumerate(policies):
        medians = medians_flat[i * len(seeds):(i + 1) * len(seeds)]
        mean = float(np.mean(medians))
        std = float(np.std(medians, ddof=1)) if len(medians) > 1 else 0.0
        summary.append({"policy": policy, "seeds": list(seeds),
                        "medians": medians, "mean": mean, "std": std})
    with open(out_dir / "summary.csv", "w") as fh:
        fh.write("policy,n_seeds,mean_top1,std_top1\n")
        for row in summary:
            fh.write(f"{row['policy']},{len(row['seeds'])},{row['mean']!r},{row['std']!r}\n")
    return summary


def cmd_compare(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("epochs", "batch_size", "base_lr", "alpha", "feature_layer",
                  "n_per_class", "image_size", "data_seed")}
    train_cfg, data_cfg = load_config(args.config, overrides)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = make_run_dir(Path(args.out_dir), "compare")
    summary = run_comparison(train_cfg, data_cfg, policies, seeds, out_dir, jobs=args.jobs)
    print(f"{'policy':<10} {'mean':>8} {'std':>8}")
    for row in summary:
        print(f"{row['policy']:<10} {row['mean']:>8.4f} {row['std']:>8.4f}")
    print(f"summary written to {out_dir / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------------------
# selfcheck
# ---------------------------------------------------------------------------

def cmd_selfcheck(_args) -> int:
    results = selfcheck.run_selfcheck()
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, message in results:
        mark = "ok" if ok else "FAIL"
        suffix = f": {message}" if message else ""
        print(f"[{mark:>4}] {name}{suffix}")
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}")
        return 1
    print(f"selfcheck passed ({len(results)} checks)")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="automix",
                                     description="Learnable mixup training at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_train_flags(p, with_policy=True, with_seed=True):
        p.add_argument("--config", default=None, help="JSON config document")
        if with_policy:
            p.add_argument("--policy", default=None, choices=POLICIES)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--feature-layer", dest="feature_layer", type=int, default=None)
        if with_seed:
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--n-per-class", dest="n_per_class", type=int, default=None)
        p.add_argument("--image-size", dest="image_size", type=int, default=None)
        p.add_argument("--data-seed", dest="data_seed", type=int, default=None)
        p.add_argument("--out-dir", dest="out_dir", default="runs")

    p_train = sub.add_parser("train", help="train one policy, writing a run directory")
    add_common_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a finished run directory")
    p_eval.add_argument("--checkpoint", required=True, help="run directory containing the manifest")
    p_eval.add_argument("--params", default="student", choices=("student", "teacher"))
    p_eval.add_argument("--fgsm", type=float, default=None,
                        help="also report the sign-attack error at this epsilon (pixel units)")
    p_eval.add_argument("--mixed", action="store_true",
                        help="also emit mixed-pair containment metrics at lambda 0.5")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_masks = sub.add_parser("gen-masks", help="export masks and mixed samples for image pairs")
    p_masks.add_argument("--checkpoint", required=True)
    p_masks.add_argument("--pairs", default="0:1", help="comma list of i:j eval indices")
    p_masks.add_argument("--lambdas", default=",".join(str(v) for v in FIG_LAMBDA_GRID))
    p_masks.add_argument("--out", default=None)
    p_masks.set_defaults(func=cmd_gen_masks)

    p_cmp = sub.add_parser("compare", help="train a policy grid and summarize mean/std top-1")
    add_common_train_flags(p_cmp, with_policy=False, with_seed=False)
    p_cmp.add_argument("--policies", default=",".join(POLICIES))
    p_cmp.add_argument("--seeds", default="0,1,2")
    p_cmp.add_argument("--jobs", type=int, default=1,
                       help="worker processes for independent (policy, seed) cells")
    p_cmp.set_defaults(func=cmd_compare)

    p_check = sub.add_parser("selfcheck", help="run the built-in gradient and invariant suite")
    p_check.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (AutomixError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
