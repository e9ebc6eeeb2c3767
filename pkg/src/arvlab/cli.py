"""Experiment runner: dataset generation, training, evaluation, generation,
cascade verification, sweeps, and benchmarks from a YAML config.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O failure.
Every output embeds the config hash; existing outputs are never overwritten
without --force.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import cascade as casc
from . import evalharness as ev
from . import reports
from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .corpus import Dataset, make_dataset
from .inference import SamplingConfig, generate_full, generate_iterative, save_records
from .model import TransformerLM
from .optim import AdamW
from .strategies import TRAIN_LOG_COLUMNS, STRATEGIES, StrategyConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    m = {"config_hash": cfg.config_hash(), "master_seed": cfg.master_seed}
    m.update(extra)
    return m


def _ensure_out(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _dataset_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, f"dataset_{cfg.config_hash()}.npz")


def _checkpoint_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, f"ckpt_{cfg.strategy.name}_{cfg.config_hash()}.npz")


def _guard(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")


def _build_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(cfg.corpus, cfg.n_sequences, cfg.seed_for("corpus"))


def _load_or_build_dataset(cfg: ExperimentConfig) -> Dataset:
    path = _dataset_path(cfg)
    if os.path.exists(path):
        return Dataset.load(path)
    return _build_dataset(cfg)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    path = _dataset_path(cfg)
    _guard(path, args.force)
    ds = _build_dataset(cfg)
    ds.extra_meta["config_hash"] = cfg.config_hash()
    ds.save(path)
    print(f"wrote {path} ({ds.n_sequences} sequences, {cfg.corpus.tokens_per_sequence} tokens each)")
    return EXIT_OK


def _rng_state_blob(rng: np.random.Generator) -> np.ndarray:
    return np.frombuffer(json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8)


def _restore_rng(blob: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(bytes(blob.tobytes()).decode())
    return rng


def cmd_train(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    ds = _load_or_build_dataset(cfg)
    csv_path = os.path.join(cfg.out_dir, f"train_{cfg.strategy.name}_{cfg.config_hash()}.csv")
    ckpt_path = _checkpoint_path(cfg)
    _guard(csv_path, args.force)
    _guard(ckpt_path, args.force)

    start_step = 0
    if args.resume:
        model, extra = TransformerLM.load_checkpoint(args.resume)
        optimizer = AdamW(
            model.params,
            lr=cfg.strategy.lr,
            betas=(cfg.strategy.beta1, cfg.strategy.beta2),
            weight_decay=cfg.strategy.weight_decay,
        )
        optimizer.load_state_dict({k[len("opt/"):]: v for k, v in extra.items() if k.startswith("opt/")})
        rng = _restore_rng(extra["rng_state"])
        start_step = int(extra["step"])
    else:
        model = TransformerLM(cfg.model, seed=cfg.seed_for("model-init"))
        optimizer = None
        rng = np.random.default_rng(cfg.seed_for("train"))

    result = train(
        model, ds, cfg.strategy, cfg.train_steps,
        optimizer=optimizer, rng=rng, start_step=start_step,
    )
    reports.write_csv(
        csv_path, TRAIN_LOG_COLUMNS, result.log_rows,
        meta=_meta(cfg, strategy=cfg.strategy.name), force=args.force,
    )
    extra = {"step": np.array(start_step + cfg.train_steps), "rng_state": _rng_state_blob(result.rng)}
    for k, v in result.optimizer.state_dict().items():
        extra[f"opt/{k}"] = np.asarray(v)
    if os.path.exists(ckpt_path) and args.force:
        os.remove(ckpt_path)
    model.save_checkpoint(ckpt_path, extra=extra)
    final_ce = np.mean([r["ce"] for r in result.log_rows[-20:]])
    print(f"wrote {csv_path} and {ckpt_path} (final ce {final_ce:.4f})")
    return EXIT_OK


def _curve_rows(run: str, curve: ev.LossCurve) -> list[dict]:
    return [
        {"run": run, "mode": curve.mode, "position": i, "value": float(v)}
        for i, v in enumerate(curve.values)
    ]


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    ds = _load_or_build_dataset(cfg)
    ckpts = args.checkpoint or [_checkpoint_path(cfg)]
    curves_path = os.path.join(cfg.out_dir, f"eval_curves_{cfg.config_hash()}.csv")
    diag_path = os.path.join(cfg.out_dir, f"eval_diagnostics_{cfg.config_hash()}.csv")
    _guard(curves_path, args.force)
    _guard(diag_path, args.force)

    curve_rows: list[dict] = []
    diag_rows: list[dict] = []
    for ckpt in ckpts:
        model, _ = TransformerLM.load_checkpoint(ckpt)
        run = os.path.splitext(os.path.basename(ckpt))[0]
        seed = cfg.seed_for("eval", run)
        tf = ev.per_position_loss(model, ds, "teacher_forced")
        fr = ev.per_position_loss(model, ds, "free_running", cfg.sampling, cfg.eval_generations, seed)
        ffa = ev.first_frame_augmented_eval(model, ds, cfg.sampling, seed)
        for curve in (tf, fr, ffa):
            curve_rows.extend(_curve_rows(run, curve))

        i0 = int(ds.eval_idx[0])
        trace = ev.error_propagation_trace(model, ds.tokens[i0], int(ds.conditions[i0]), seed=seed)
        for t, v in enumerate(trace):
            diag_rows.append({"run": run, "metric": "error_trace", "index": t, "value": float(v)})

        rng = np.random.default_rng(seed)
        rec = generate_full(model, int(ds.conditions[i0]), cfg.corpus.tokens_per_sequence, cfg.sampling, rng)
        prof = ev.continuity_profile(rec.hidden)
        for t, v in enumerate(prof):
            diag_rows.append({"run": run, "metric": "continuity", "index": t, "value": float(v)})
        flow = ev.flow_profile(rec.tokens, ds.codebook, cfg.corpus.n_blocks, cfg.corpus.b_spatial)
        for d, v in zip(flow.deltas, flow.flow):
            diag_rows.append({"run": run, "metric": "flow", "index": int(d), "value": float(v)})
        psnr = ev.psnr_proxy(
            rec.tokens, ds.tokens[i0], ds.codebook,
            cfg.corpus.amplitude, cfg.corpus.n_blocks, cfg.corpus.b_spatial,
        )
        for d, v in zip(psnr.deltas, psnr.psnr):
            diag_rows.append({"run": run, "metric": "psnr", "index": int(d), "value": float(v)})

    reports.write_csv(curves_path, ["run", "mode", "position", "value"], curve_rows,
                      meta=_meta(cfg), force=args.force)
    reports.write_csv(diag_path, ["run", "metric", "index", "value"], diag_rows,
                      meta=_meta(cfg), force=args.force)
    if cfg.emit_svg:
        series: dict[str, list[tuple[float, float]]] = {}
        for row in curve_rows:
            series.setdefault(f"{row['run']}:{row['mode']}", []).append((row["position"], row["value"]))
        svg_path = os.path.join(cfg.out_dir, f"eval_curves_{cfg.config_hash()}.svg")
        reports.svg_line_plot(series, svg_path, title="per-position loss", force=args.force)
    print(f"wrote {curves_path} and {diag_path}")
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    ds = _load_or_build_dataset(cfg)
    ckpt = args.checkpoint[0] if args.checkpoint else _checkpoint_path(cfg)
    model, _ = TransformerLM.load_checkpoint(ckpt)
    length = cfg.gen_length or cfg.corpus.tokens_per_sequence
    rng = np.random.default_rng(cfg.seed_for("generate"))
    records = []
    for i in range(cfg.eval_generations):
        cond = int(ds.conditions[ds.eval_idx[i % len(ds.eval_idx)]])
        if args.iterative:
            wgen = args.wgen or cfg.corpus.tokens_per_sequence
            slide = args.slide or wgen // 2
            rec = generate_iterative(model, cond, wgen, slide, length, cfg.sampling, rng)
        else:
            rec = generate_full(model, cond, length, cfg.sampling, rng)
        records.append(rec)
    npz_path = os.path.join(cfg.out_dir, f"generations_{cfg.config_hash()}.npz")
    csv_path = os.path.join(cfg.out_dir, f"generations_{cfg.config_hash()}.csv")
    _guard(npz_path, args.force)
    _guard(csv_path, args.force)
    if os.path.exists(npz_path) and args.force:
        os.remove(npz_path)
    save_records(npz_path, records, cfg.sampling, meta=_meta(cfg))
    rows = [
        {
            "record": i,
            "condition": r.condition,
            "length": len(r.tokens),
            "iterations": r.n_iterations,
            "mean_surprisal": float(-r.logprobs.mean()),
        }
        for i, r in enumerate(records)
    ]
    reports.write_csv(csv_path, ["record", "condition", "length", "iterations", "mean_surprisal"],
                      rows, meta=_meta(cfg), force=args.force)
    print(f"wrote {npz_path} and {csv_path}")
    return EXIT_OK


def cmd_cascade(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    path = os.path.join(cfg.out_dir, f"cascade_{cfg.config_hash()}.csv")
    _guard(path, args.force)
    rows: list[dict] = []
    seed = cfg.seed_for("cascade")

    # Lipschitz bound over seeded linear systems
    rng = np.random.default_rng(seed)
    n_violations = 0
    for i in range(100):
        d = 6
        A = rng.normal(size=(d, d)) * 0.4
        sys_ = casc.LinearSystem(A)
        deltas = rng.normal(size=(20, d)) * 0.01
        trace = casc.simulate_error(sys_, 20, deltas, seed=i)
        n_violations += len(casc.check_bound(trace, sys_.lipschitz))
    rows.append({"experiment": "bound_check", "key": "violations", "value": float(n_violations)})

    # conditioning comparison, regime-bearing vs memoryless
    for mode in ("first_block", "memoryless"):
        system = casc.RegimeSystem(regime_observability=mode, structure_seed=seed)
        summary = casc.compare_conditioning(system, horizon=8, trials=1000, seed=seed)
        rows.append({"experiment": f"conditioning_{mode}", "key": "ratio", "value": summary.ratio})
        rows.append({"experiment": f"conditioning_{mode}", "key": "ci_lo", "value": summary.ratio_ci[0]})
        rows.append({"experiment": f"conditioning_{mode}", "key": "ci_hi", "value": summary.ratio_ci[1]})

    # terminal error vs transition constant
    for row in casc.reco_effect([0.5, 0.8, 1.0, 1.2, 1.5], horizon=20, trials=200, seed=seed):
        rows.append({"experiment": "lipschitz_sweep", "key": f"L={row.L:g}", "value": row.mean_terminal_error})

    reports.write_csv(path, ["experiment", "key", "value"], rows, meta=_meta(cfg), force=args.force)
    print(f"wrote {path}")
    return EXIT_OK


# -- sweep -------------------------------------------------------------------


def _sweep_points(cfg: ExperimentConfig) -> list[tuple[str, float]]:
    sw = cfg.sweep
    grids = {
        "lam": sw.lam_grid,
        "overlap": sw.overlap_grid,
        "horizon": sw.horizon_grid,
        "motion": sw.motion_grid,
    }
    return [(sw.axis, float(v)) for v in grids[sw.axis]]


def _sweep_point(cfg_dict: dict, axis: str, value: float) -> dict:
    """One sweep point: train a model for the adjusted config, report summary."""
    cfg = from_dict(cfg_dict)
    if axis == "lam":
        cfg.strategy.name = "reco"
        cfg.strategy.lam = value
    elif axis == "overlap":
        if not cfg.strategy.name.startswith("local_opt") and cfg.strategy.name != "reco":
            cfg.strategy.name = "local_opt_balanced"
        stride = max(1, round(cfg.strategy.window_blocks * (1.0 - value)))
        cfg.strategy.stride_blocks = stride
    elif axis == "motion":
        cfg.corpus.motion_scale = value
    # horizon leaves training untouched; it changes the generation length below

    ds = make_dataset(cfg.corpus, cfg.n_sequences, cfg.seed_for("corpus"))
    model = TransformerLM(cfg.model, seed=cfg.seed_for("model-init"))
    rng = np.random.default_rng(cfg.seed_for("train"))
    result = train(model, ds, cfg.strategy, cfg.train_steps, rng=rng)
    final_ce = float(np.mean([r["ce"] for r in result.log_rows[-20:]]))

    seed = cfg.seed_for("sweep-eval", axis, value)
    tf = ev.per_position_loss(model, ds, "teacher_forced")
    n = cfg.corpus.tokens_per_sequence
    gen_rng = np.random.default_rng(seed)
    if axis == "horizon":
        total = int(round(n * value))
        rec = generate_iterative(model, 0, min(n, cfg.model.max_positions - 1), n // 2, total,
                                 cfg.sampling, gen_rng)
        fr_mean = float(-rec.logprobs[-n:].mean())
        continuity = float("nan") if rec.hidden is None else float(ev.continuity_profile(rec.hidden).mean())
    else:
        rec = generate_full(model, 0, n, cfg.sampling, gen_rng)
        fr_mean = float(-rec.logprobs.mean())
        continuity = float(ev.continuity_profile(rec.hidden).mean())
    return {
        "axis": axis,
        "value": value,
        "strategy": cfg.strategy.name,
        "final_ce": final_ce,
        "eval_tf_mean": float(tf.values.mean()),
        "free_running_mean": fr_mean,
        "continuity_mean": continuity,
    }


SWEEP_COLUMNS = ["axis", "value", "strategy", "final_ce", "eval_tf_mean", "free_running_mean", "continuity_mean"]


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    path = os.path.join(cfg.out_dir, f"sweep_{cfg.sweep.axis}_{cfg.config_hash()}.csv")
    _guard(path, args.force)
    points = _sweep_points(cfg)
    cfg_dict = cfg.to_dict()
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, [cfg_dict] * len(points),
                                 [a for a, _ in points], [v for _, v in points]))
    else:
        rows = [_sweep_point(cfg_dict, a, v) for a, v in points]
    rows.sort(key=lambda r: r["value"])
    reports.write_csv(path, SWEEP_COLUMNS, rows, meta=_meta(cfg, axis=cfg.sweep.axis), force=args.force)
    print(f"wrote {path} ({len(rows)} points)")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    _ensure_out(cfg)
    path = os.path.join(cfg.out_dir, f"bench_{cfg.config_hash()}.csv")
    _guard(path, args.force)
    ds = _load_or_build_dataset(cfg)
    strat_cfgs = [StrategyConfig(name=n, **{
        f: getattr(cfg.strategy, f)
        for f in ("window_blocks", "stride_blocks", "k_blocks", "p_first", "lam",
                  "lr", "beta1", "beta2", "weight_decay", "batch_size")
    }) for n in STRATEGIES]
    reps = ev.bench_step(cfg.model, ds, strat_cfgs, seed=cfg.seed_for("bench"))
    rows = [
        {
            "strategy": r.strategy,
            "mean_step_ms": r.mean_step_ms,
            "std_step_ms": r.std_step_ms,
            "activation_scalars": r.activation_scalars,
            "activation_bytes": r.activation_bytes,
            "param_count": r.param_count,
            "threads": int(os.environ.get("OMP_NUM_THREADS", "0")),
        }
        for r in reps
    ]
    reports.write_csv(
        path,
        ["strategy", "mean_step_ms", "std_step_ms", "activation_scalars",
         "activation_bytes", "param_count", "threads"],
        rows, meta=_meta(cfg), force=args.force,
    )
    print(f"wrote {path}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "cascade": cmd_cascade,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arvlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out-dir", default=None, help="override output directory")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("eval", "generate"):
            p.add_argument("--checkpoint", action="append", default=None)
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
        if name == "generate":
            p.add_argument("--iterative", action="store_true")
            p.add_argument("--wgen", type=int, default=0)
            p.add_argument("--slide", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.master_seed = args.seed
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileExistsError, FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
