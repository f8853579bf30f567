"""Command-line front end.

Subcommands: train, sample, eval, bench, oracle-check. Exit codes are fixed:
0 success, 2 configuration problem, 3 numeric abort during training,
4 checkpoint version mismatch, 5 tolerance violation.

Heavy imports happen inside the command handlers so the ELASTICFLOW_THREADS
cap can be applied to the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERSION = 4
EXIT_TOLERANCE = 5

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("ELASTICFLOW_THREADS")
    if not cap:
        return
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, cap)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_chunk_csv(path: str, chunks) -> None:
    """One row per action step: 'step,dim0,...'; chunks follow one another."""
    import numpy as np

    chunks = np.asarray(chunks)
    if chunks.ndim == 2:
        chunks = chunks[None]
    header = "step," + ",".join(f"dim{j}" for j in range(chunks.shape[2]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + "\n")
        for chunk in chunks:
            for step, row in enumerate(chunk):
                f.write(str(step) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _build_dataset(run_cfg, seed: int):
    """Dataset arrays + conditions + chunk geometry from a run config."""
    import numpy as np

    from . import tasks
    from .network import Condition

    rng = np.random.default_rng(seed)
    ds = run_cfg.dataset
    kind = ds["kind"]
    if kind == "chunks":
        n_per = int(ds.get("n_per_horizon", 1024))
        chunks, conds = tasks.gen_chunk_dataset(
            [tasks.SHORT_HORIZON, tasks.LONG_HORIZON], n_per, rng)
        return chunks, conds, chunks.shape[1], chunks.shape[2]
    n = int(ds.get("n", 4096))
    points, _ = tasks.gen_2d_dataset(kind, n, rng)
    chunks = points[:, None, :]
    conds = [Condition.null(2) for _ in range(n)]
    return chunks, conds, 1, 2


def cmd_train(args) -> int:
    from . import checkpoint as ckpt
    from . import training
    from .network import NetworkConfig

    run_cfg = ckpt.load_run_config(args.config)
    train_cfg = run_cfg.train
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.objective is not None:
        train_cfg.objective = args.objective
    train_cfg.validate()

    chunks, conds, th, d = _build_dataset(run_cfg, train_cfg.seed)
    net_cfg = NetworkConfig(input_dim=th * d, **run_cfg.network)
    dataset = training.make_training_set(chunks, conds, net_cfg)

    try:
        model, report = training.train(train_cfg, dataset, net_cfg,
                                        log_every=args.log_every)
    except training.NumericalAbort as abort:
        print(f"numeric abort: {abort}", file=sys.stderr)
        if abort.last_good is not None:
            from .network import init_velocity_model
            recov = init_velocity_model(net_cfg, seed=train_cfg.seed)
            recov.params.load_state(abort.last_good)
            ckpt.save_checkpoint(args.out + ".lastgood", recov,
                                 {"train": train_cfg.to_dict(), "aborted_at": abort.step})
            print(f"last finite parameters written to {args.out}.lastgood",
                  file=sys.stderr)
        return EXIT_NUMERIC

    extra = {
        "train": train_cfg.to_dict(),
        "dataset": run_cfg.dataset,
        "guidance": run_cfg.guidance,
        "chunk": {"horizon_steps": th, "action_dim": d},
    }
    ckpt.save_checkpoint(args.out, model, extra)
    report_path = args.report or args.out + ".report.json"
    _write_json(report_path, report.artifact_dict())
    print(f"trained {train_cfg.objective} for {train_cfg.steps} steps "
          f"in {report.wall_time_s:.1f}s; final loss "
          f"{report.losses[-1] if report.losses else float('nan'):.6f}")
    print(f"checkpoint: {args.out}")
    print(f"report: {report_path}")
    return EXIT_OK


def _load_model(path):
    from . import checkpoint as ckpt

    return ckpt.load_checkpoint(path)


def cmd_sample(args) -> int:
    import numpy as np

    from . import sampling
    from .network import Condition

    model, config = _load_model(args.ckpt)
    chunk_meta = config.get("chunk", {})
    th = int(chunk_meta.get("horizon_steps", 1))
    d = int(chunk_meta.get("action_dim", model.config.input_dim))

    conditional = args.goal is not None or args.task is not None
    if conditional:
        goal = np.zeros(model.config.cond_dim)
        if args.goal is not None:
            goal = np.array([float(v) for v in args.goal.split(",")])
        cond = Condition(goal=goal, task_id=args.task or 0,
                         horizon_seconds=args.horizon)
        use_cfg = not args.no_cfg
    else:
        cond = Condition.null(model.config.cond_dim)
        use_cfg = False
    guidance = sampling.GuidanceConfig(w=args.w, use_cfg=use_cfg)

    rng = np.random.default_rng(args.seed)
    field = sampling.model_field(model)
    if args.n > 0:
        chunks, nfe = sampling.one_step_sample(field, cond, guidance, rng,
                                               n=args.n, chunk_shape=(th, d))
    else:
        chunks, nfe = np.zeros((0, th, d)), 0
    _write_chunk_csv(args.out, chunks)
    print(f"wrote {args.n} chunks to {args.out}")
    print(f"nfe: {nfe} field evaluations "
          f"({'guided, 2 branches' if use_cfg else 'single branch'})")
    return EXIT_OK


METRIC_NAMES = ("jerk", "energy", "spectral", "success")


def cmd_eval(args) -> int:
    import numpy as np

    from . import sampling, tasks
    from .network import Condition

    metrics = [m for m in args.metrics.split(",") if m] if args.metrics else []
    for m in metrics:
        if m not in METRIC_NAMES:
            print(f"unknown metric {m!r} (choose from {METRIC_NAMES})", file=sys.stderr)
            return EXIT_CONFIG

    model, config = _load_model(args.ckpt)
    spec = {"short": tasks.SHORT_HORIZON, "long": tasks.LONG_HORIZON}[args.task]
    rng = np.random.default_rng(args.seed)
    ref_chunks, ref_conds = tasks.gen_chunk_dataset([spec], args.n, rng)
    th, d = ref_chunks.shape[1], ref_chunks.shape[2]

    forced = args.force_horizon
    if forced:
        fspec = {"short": tasks.SHORT_HORIZON, "long": tasks.LONG_HORIZON}[forced]
        eval_conds = [Condition(goal=c.goal, task_id=tasks.TASK_IDS[fspec.label],
                                horizon_seconds=fspec.horizon_seconds)
                      for c in ref_conds]
    else:
        eval_conds = ref_conds

    field = sampling.model_field(model)
    guidance = sampling.GuidanceConfig(w=args.w, use_cfg=args.cfg)
    samples = np.empty_like(ref_chunks)
    for i, cond in enumerate(eval_conds):
        out, _ = sampling.one_step_sample(field, cond, guidance, rng, n=1,
                                          chunk_shape=(th, d))
        samples[i] = out[0]

    results: dict = {}
    if "jerk" in metrics:
        vals = []
        for chunk in samples:
            seq = sampling.chunk_discretize(chunk, spec.horizon_seconds, th)
            vals.append(tasks.jerk(seq.values, seq.dt))
        results["jerk"] = float(np.mean(vals))
    if "energy" in metrics:
        results["energy"] = tasks.energy_distance(
            samples.reshape(len(samples), -1), ref_chunks.reshape(len(ref_chunks), -1))
    if "spectral" in metrics:
        results["spectral"] = float(np.mean(
            [tasks.spectral_energy_ratio(c, args.cutoff_bin) for c in samples]))
    if "success" in metrics:
        flags = [tasks.reach_success(c, cond, args.tol)
                 for c, cond in zip(samples, ref_conds)]
        results["success"] = float(np.mean(flags))

    report = {
        "task": args.task,
        "force_horizon": forced,
        "n": args.n,
        "seed": args.seed,
        "tol": args.tol,
        "cutoff_bin": args.cutoff_bin,
        "metrics": results,
    }
    _write_json(args.report, report)
    print(json.dumps(report["metrics"], sort_keys=True))
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import tasks

    model, _ = _load_model(args.ckpt)
    nfe_list = [int(v) for v in args.nfe.split(",")]
    report = tasks.bench_latency(model, nfe_list, trials=args.trials)
    for e in report.entries:
        print(f"nfe={e['nfe']:>3} cfg={str(e['use_cfg']):5} "
              f"median {e['median_ms']:8.3f} ms  {e['hz']:8.1f} Hz")
    if args.report:
        _write_json(args.report, report.to_dict())
        print(f"report: {args.report}")
    return EXIT_OK


ORACLE_CASES = ("delta", "gaussian", "gmm")


def cmd_oracle_check(args) -> int:
    from . import oracle

    if args.case == "delta":
        spec = oracle.GMMSpec.dirac([0.0])
        field = oracle.dirac_average_field([0.0])
    elif args.case == "gaussian":
        spec = oracle.GMMSpec.gaussian([0.0], 1.0)
        field = oracle.oracle_field(spec, n_steps=args.steps)
    else:
        spec = oracle.GMMSpec.mixture([0.5, 0.5], [[1.0], [-1.0]], [0.04, 0.04])
        field = oracle.oracle_field(spec, n_steps=args.steps)

    result = oracle.identity_grid_check(field, spec, n_grid=args.grid, h=args.h)
    runtime = result.pop("runtime_s")
    report = {"case": args.case, "tol": args.tol, "n_steps": args.steps, **result,
              "pass": result["max_residual"] <= args.tol}
    if args.report:
        _write_json(args.report, report)
    print(f"case={args.case} max residual {result['max_residual']:.3e} "
          f"(tol {args.tol:.1e}) in {runtime:.2f}s")
    if not report["pass"]:
        wp = result["worst_point"]
        print(f"tolerance exceeded at z={wp['z']:.3f} r={wp['r']:.3f} t={wp['t']:.3f}",
              file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="elasticflow",
        description="Average-velocity-field policy learning: train, sample, "
                    "evaluate, benchmark, and verify against the analytic oracle.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True, help="run config JSON path")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--objective", choices=("meanflow", "cfm"), default=None,
                   help="override train.objective")
    t.add_argument("--report", default=None, help="training report JSON path")
    t.add_argument("--log-every", type=int, default=0, help="print loss every N steps")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate chunks with one call per branch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True, help="number of chunks")
    s.add_argument("--out", required=True, help="CSV output path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--w", type=float, default=2.0, help="guidance scale")
    s.add_argument("--task", type=int, default=None, help="task id for conditioning")
    s.add_argument("--goal", default=None, help="goal vector, e.g. 0.5,0.5")
    s.add_argument("--horizon", type=float, default=1.0, help="physical horizon seconds")
    s.add_argument("--no-cfg", action="store_true", help="conditional branch only")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="evaluate generation metrics on a task regime")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=("short", "long"), required=True)
    e.add_argument("--metrics", default="jerk,energy,spectral,success",
                   help="comma list of " + ",".join(METRIC_NAMES))
    e.add_argument("--report", required=True, help="report JSON path")
    e.add_argument("--n", type=int, default=256, help="evaluation trials")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--force-horizon", choices=("short", "long"), default=None,
                   help="override the horizon conditioning (mismatch test)")
    e.add_argument("--tol", type=float, default=0.35, help="reach-success tolerance")
    e.add_argument("--cutoff-bin", type=int, default=3)
    e.add_argument("--w", type=float, default=1.0, help="guidance scale")
    e.add_argument("--cfg", action="store_true", help="enable guidance at eval")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="latency benchmark: median ms and Hz per budget")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--nfe", default="1,10", help="comma list of evaluation budgets")
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--report", default=None)
    b.set_defaults(fn=cmd_bench)

    o = sub.add_parser("oracle-check",
                       help="verify the average-velocity identity on analytic flows")
    o.add_argument("--case", choices=ORACLE_CASES, required=True)
    o.add_argument("--tol", type=float, required=True)
    o.add_argument("--grid", type=int, default=10)
    o.add_argument("--h", type=float, default=1e-4)
    o.add_argument("--steps", type=int, default=256)
    o.add_argument("--report", default=None)
    o.set_defaults(fn=cmd_oracle_check)

    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .checkpoint import CheckpointError, CheckpointVersionError, ConfigError
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointVersionError as e:
        print(f"checkpoint version error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
