"""Command-line entry point: ``uvb {train,denoise,sample,eval,gen-data}``.

Exit codes: 0 success, 2 bad input (config, file format, dimensions,
incompatible sigma), 3 numerical divergence during training or sampling.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig

EXIT_INPUT = 2
EXIT_DIVERGED = 3

_DEFAULTS = TrainConfig()

# flags that override the config field of the same name
_OVERRIDES = ("seed", "sigma", "model", "dz", "k_samples", "lr", "batch", "epochs", "threads", "data")

# stream ids for counter-based seeding of the non-training commands
_STREAM_DENOISE_NOISE = 11
_STREAM_DENOISE_EPS = 12
_STREAM_SAMPLE = 21
_STREAM_EVAL = 31


class InputError(Exception):
    """Bad command-line input that maps to exit code 2."""


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (command line wins over --config)")
    g.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    g.add_argument("--seed", type=int, help=f"master seed (default: {_DEFAULTS.seed})")
    g.add_argument("--sigma", type=float, help=f"noise level (default: {_DEFAULTS.sigma})")
    g.add_argument("--model", choices=("uvb", "deen", "vae"),
                   help=f"model and objective (default: {_DEFAULTS.model})")
    g.add_argument("--dz", type=int, help=f"latent dimension (default: {_DEFAULTS.dz})")
    g.add_argument("--k-samples", dest="k_samples", type=int,
                   help=f"latent draws per energy evaluation (default: {_DEFAULTS.k_samples})")
    g.add_argument("--lr", type=float, help=f"Adam learning rate (default: {_DEFAULTS.lr})")
    g.add_argument("--batch", type=int, help=f"minibatch size (default: {_DEFAULTS.batch})")
    g.add_argument("--epochs", type=int, help=f"training epochs (default: {_DEFAULTS.epochs})")
    g.add_argument("--data", help=f"gmm:<name|file>, idx:<images>, csv:<file> (default: {_DEFAULTS.data})")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="fixed reduction order, zero wall-clock column (default: on)")
    g.add_argument("--threads", type=int, help=f"BLAS worker threads (default: {_DEFAULTS.threads})")
    g.add_argument("--out-dir", dest="out_dir", default=".", help="output directory (default: .)")
    return p


def _sampling_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("walk-jump sampling")
    g.add_argument("--delta", type=float, default=0.2, help="Langevin step size (default: 0.2)")
    g.add_argument("--period", type=int, default=10, help="walk steps between jumps (default: 10)")
    g.add_argument("--steps", type=int, default=1000, help="total walk steps per chain (default: 1000)")
    g.add_argument("--chains", type=int, default=1, help="independent chains (default: 1)")
    g.add_argument("--grid-cols", dest="grid_cols", type=int, default=10,
                   help="images per row in the PGM grid (default: 10)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvb", description="Denoising energy models: UVB and DEEN.")
    sub = parser.add_subparsers(dest="command", required=True)
    cfg = _config_flags()

    sub.add_parser("train", parents=[cfg], help="train a model; writes checkpoint.uvb and metrics.csv")

    p = sub.add_parser("denoise", parents=[cfg], help="x, y, x_hat(y), x_hat(x_hat(y)) for input rows")
    p.add_argument("checkpoint")
    p.add_argument("--input", help="CSV rows or IDX image file (default: the config's test split)")
    p.add_argument("--count", type=int, default=8, help="rows to denoise (default: 8)")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                   help="noise added to the inputs (default: the model's sigma)")

    sub.add_parser("sample", parents=[cfg, _sampling_flags()], help="walk-jump sampling").add_argument("checkpoint")

    p = sub.add_parser("eval", parents=[cfg], help="loss table, oracle score error, diagnostics")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--n-eval", dest="n_eval", type=int, default=20000,
                   help="fresh oracle draws for score error and risk gap (default: 20000)")
    p.add_argument("--oracle", action="store_true", help="also evaluate the exact mixture energy")

    sub.add_parser("gen-data", parents=[cfg], help="write a GMM train/test split as CSV")
    return parser


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else (base or TrainConfig())
    changes = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if getattr(args, "deterministic", None) is not None:
        changes["deterministic"] = args.deterministic
    return TrainConfig.from_mapping({**_as_mapping(config), **changes})


def _as_mapping(config: TrainConfig) -> dict:
    from dataclasses import fields

    return {f.name: getattr(config, f.name) for f in fields(config)}


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# data


def load_dataset(config: TrainConfig):
    import numpy as np

    from .data import Dataset, GmmSpec, benchmark, gmm_dataset, load_csv, mnist_load_idx, split_indices

    kind, _, arg = config.data.partition(":")
    if kind == "gmm":
        path = Path(arg)
        try:
            spec = GmmSpec.from_text(path.read_text()) if path.is_file() else benchmark(arg)
        except ValueError as exc:
            raise ConfigError("data", str(exc)) from None
        return gmm_dataset(spec, config.n_train, config.n_test, config.seed)
    if kind in ("idx", "csv"):
        if kind == "idx":
            images = config.idx_images or arg
            if not images:
                raise ConfigError("idx_images", "no IDX image file given")
            full = mnist_load_idx(images, config.idx_labels or None)
            x, labels, shape, vrange = full.train, full.train_labels, full.image_shape, full.value_range
        else:
            x, labels, shape, vrange = load_csv(arg), None, None, None
        x = x[: config.max_images]
        labels = labels[: config.max_images] if labels is not None else None
        tr, te = split_indices(len(x), config.split_fraction, config.seed)
        return Dataset(
            train=x[np.sort(tr)], test=x[np.sort(te)], value_range=vrange, image_shape=shape,
            train_labels=None if labels is None else labels[np.sort(tr)],
            test_labels=None if labels is None else labels[np.sort(te)],
        )
    raise ConfigError("data", f"expected gmm:, idx: or csv: source, got {config.data!r}")


def _image_shape(config: TrainConfig, d: int):
    from .imageio import square_shape

    return square_shape(d) if config.data.startswith("idx") else None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .train import train_loop

    config = resolve_config(args)
    _set_threads(config.threads)
    dataset = load_dataset(config)
    out = Path(args.out_dir)
    result = train_loop(config, dataset, out_dir=out)
    if result.rows:
        last = result.rows[-1]
        print(f"epoch {last['epoch']}: train loss {last['train_loss_total']:.6g} "
              f"({last['train_loss_per_dim']:.6g}/dim), test loss {last['test_loss_total']:.6g} "
              f"({last['test_loss_per_dim']:.6g}/dim)")
    print(f"wrote {out / 'checkpoint.uvb'} and {out / 'metrics.csv'}")
    return 0


def _load(path):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)


def _check_sigma(args, ckpt, path) -> None:
    if args.sigma is not None and abs(args.sigma - ckpt.model.sigma) > 1e-12:
        raise InputError(f"{path}: model trained at sigma={ckpt.model.sigma:g}, --sigma {args.sigma:g} requested")


def cmd_denoise(args) -> int:
    import numpy as np

    from .data import load_csv, read_idx, save_csv
    from .energy import bayes_estimate
    from .imageio import square_shape, write_image_grid

    ckpt = _load(args.checkpoint)
    _check_sigma(args, ckpt, args.checkpoint)
    model = ckpt.model
    config = resolve_config(args, ckpt.config)
    _set_threads(config.threads)
    shape = None
    if args.input:
        if args.input.endswith(".csv"):
            x = load_csv(args.input)
        else:
            raw = read_idx(args.input)
            if raw.ndim != 3:
                raise InputError(f"{args.input}: expected a 3-D IDX image file")
            shape = raw.shape[1:]
            x = raw.reshape(raw.shape[0], -1).astype(float) / 255.0
    else:
        ds = load_dataset(config)
        x = ds.test if len(ds.test) else ds.train
        shape = ds.image_shape
    x = np.atleast_2d(x)[: args.count]
    if x.shape[1] != model.d:
        raise InputError(f"input rows have {x.shape[1]} columns, model expects {model.d}")
    noise_sigma = model.sigma if args.noise_sigma is None else args.noise_sigma
    if noise_sigma < 0:
        raise ConfigError("noise_sigma", "must be >= 0")
    noise_rng = np.random.default_rng([config.seed, _STREAM_DENOISE_NOISE])
    eps_rng = np.random.default_rng([config.seed, _STREAM_DENOISE_EPS])
    y = x + noise_sigma * noise_rng.standard_normal(x.shape)
    x1 = bayes_estimate(model, y, model.draw_eps(len(y), eps_rng))
    x2 = bayes_estimate(model, x1, model.draw_eps(len(y), eps_rng))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = model.d
    header = [f"{p}{i}" for p in ("x", "y", "xhat", "xhat2_") for i in range(d)]
    save_csv(out / "denoise.csv", np.hstack([x, y, x1, x2]), header)
    print(f"wrote {out / 'denoise.csv'}")
    shape = shape or _image_shape(config, d) or (square_shape(d) if d >= 64 else None)
    if shape is not None:
        write_image_grid(out / "denoise.pgm", [x, y, x1, x2], tuple(shape))
        print(f"wrote {out / 'denoise.pgm'}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from .data import save_csv
    from .imageio import square_shape, write_image_grid
    from .sample import WalkJumpSchedule, walk_jump

    ckpt = _load(args.checkpoint)
    _check_sigma(args, ckpt, args.checkpoint)
    model = ckpt.model
    config = resolve_config(args, ckpt.config)
    _set_threads(config.threads)
    if args.delta < 0 or args.period < 1 or args.steps < 0 or args.chains < 1:
        raise InputError("need --delta >= 0, --period >= 1, --steps >= 0, --chains >= 1")
    schedule = WalkJumpSchedule(steps=args.steps, period=args.period)
    rows, jumps = [], []
    for chain in range(args.chains):
        rng = np.random.default_rng([config.seed, _STREAM_SAMPLE, chain])
        res = walk_jump(model, schedule, rng, delta=args.delta)
        for t, y, xh in zip(res.steps, res.y, res.x_hat):
            rows.append(np.concatenate([[chain, t], y, xh]))
            jumps.append(xh)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = model.d
    header = ["chain", "step"] + [f"y{i}" for i in range(d)] + [f"xhat{i}" for i in range(d)]
    save_csv(out / "samples.csv", np.array(rows).reshape(-1, 2 + 2 * d), header, int_columns=2)
    print(f"wrote {len(rows)} jump samples to {out / 'samples.csv'}")
    shape = _image_shape(config, d) or (square_shape(d) if d >= 64 else None)
    if shape is not None:
        jumps = np.array(jumps)
        cols = max(1, args.grid_cols)
        n_rows = -(-len(jumps) // cols)
        padded = np.vstack([jumps, np.zeros((n_rows * cols - len(jumps), d))])
        write_image_grid(out / "samples.pgm", list(padded.reshape(n_rows, cols, d)), shape)
        print(f"wrote {out / 'samples.pgm'}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import metrics
    from .energy import UVB, OracleEnergy

    ckpts = [(path, _load(path)) for path in args.checkpoints]
    for path, ckpt in ckpts:
        _check_sigma(args, ckpt, path)
    config = resolve_config(args, ckpts[0][1].config)
    _set_threads(config.threads)
    dataset = load_dataset(config)
    for path, ckpt in ckpts:
        if ckpt.model.d != dataset.dim:
            raise InputError(f"{path}: model dimension {ckpt.model.d} does not match data dimension {dataset.dim}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = []

    # loss table over sigma for UVB/DEEN pairs (denoising-trained models only)
    by_sigma: dict[float, dict] = {}
    for _, ckpt in ckpts:
        if ckpt.config.model in ("uvb", "deen"):
            by_sigma.setdefault(ckpt.model.sigma, {}).setdefault(ckpt.config.model, ckpt.model)
    paired = {s: pair for s, pair in by_sigma.items() if len(pair) == 2}
    for sigma, pair in sorted(paired.items()):
        try:
            metrics.check_matched(len(pair["uvb"].params), len(pair["deen"].params))
        except ValueError as exc:
            warning = f"warning: sigma={sigma:g}: {exc}; the comparison is not capacity-matched"
            print(warning, file=sys.stderr)
            report.append(f"# {warning}\n")
    if paired:
        rows = metrics.loss_table(paired, dataset, seed=config.seed)
        (out / "loss_table.csv").write_text(metrics.table_csv(rows, metrics.LOSS_TABLE_COLUMNS))
        report += ["# denoising loss, per-example total", metrics.loss_table_text(rows),
                   "# denoising loss, per dimension", metrics.loss_table_text(rows, per_dim=True)]
    else:
        report.append("# loss table needs a UVB and a DEEN checkpoint at the same sigma; skipped\n")

    # oracle comparisons
    models = [(f"{ckpt.config.model}:{Path(path).name}", ckpt.model) for path, ckpt in ckpts]
    if dataset.gmm is None:
        report.append("# no closed-form oracle for this dataset; score error and risk gap skipped\n")
    else:
        if args.oracle:
            for sigma in sorted({m.sigma for _, m in models}):
                models.append((f"oracle:sigma={sigma:g}", OracleEnergy(sigma=sigma, gmm=dataset.gmm)))
        cols = ["sigma", "score_mse", "score_rel_mse", "risk_gap", "risk_gap_se", "model_risk", "oracle_risk"]
        lines = ["model," + ",".join(cols)]
        for label, model in models:
            rng = np.random.default_rng([config.seed, _STREAM_EVAL, 0])
            mse, rel = metrics.score_error(model, dataset.gmm, model.sigma, args.n_eval, rng)
            rng = np.random.default_rng([config.seed, _STREAM_EVAL, 1])
            gap = metrics.bayes_risk_gap(model, dataset.gmm, model.sigma, args.n_eval, rng)
            vals = [model.sigma, mse, rel, gap.gap, gap.stderr, gap.model_risk, gap.oracle_risk]
            lines.append(label + "," + ",".join(repr(float(v)) for v in vals))
            report.append(f"{label}: relative score MSE {rel:.4g}, risk gap {gap.gap:.4g} "
                          f"+/- {gap.stderr:.2g} ({gap.relative:.2%} of Bayes risk {gap.oracle_risk:.4g})")
        (out / "oracle_metrics.csv").write_text("\n".join(lines) + "\n")
        report.append("")

    # encoder / decoder diagnostics for UVB-architecture models
    rng_seed = [config.seed, _STREAM_EVAL, 2]
    diag: dict[float, dict] = {}
    for _, ckpt in ckpts:
        if isinstance(ckpt.model, UVB):
            x = dataset.test if len(dataset.test) else dataset.train
            rng = np.random.default_rng(rng_seed)
            y = x + ckpt.model.sigma * rng.standard_normal(x.shape)
            kind = "vae" if ckpt.config.model == "vae" else "uvb"
            diag.setdefault(ckpt.model.sigma, {}).setdefault(kind, metrics.vae_diagnostics(ckpt.model, y, rng))
    for sigma, entry in sorted(diag.items()):
        nan = (float("nan"), float("nan"))
        report.append(metrics.diagnostics_tables(sigma, entry.get("uvb", nan), entry.get("vae", nan)))

    text = "\n".join(report)
    (out / "eval_report.txt").write_text(text)
    print(text, end="" if text.endswith("\n") else "\n")
    return 0


def cmd_gen_data(args) -> int:
    from .data import save_csv

    config = resolve_config(args)
    ds = load_dataset(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"x{i}" for i in range(ds.dim)]
    save_csv(out / "train.csv", ds.train, header)
    save_csv(out / "test.csv", ds.test, header)
    if ds.gmm is not None:
        (out / "gmm.txt").write_text(ds.gmm.to_text())
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test rows to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "denoise": cmd_denoise,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from .checkpoint import CheckpointError
    from .data import IdxError

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, IdxError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ArithmeticError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
