"""Command-line entry point: ``cmanp {train,eval,bench-memory,bench-update,verify}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .checkpoint import ContainerError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_config
from .model import init_params
from .trainer import TrainingDiverged, constant_gaussian_baseline, eval_batches, evaluate, train

log = logging.getLogger("cmanp")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. model.K=3 (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    p.add_argument("--seed", type=int, help="seed for initialisation, tasks and sampling")
    p.add_argument("--checkpoint", type=Path, help="checkpoint to load (train resumes from it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmanp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "meta-train on GP tasks; writes metrics.csv, checkpoint.bin, summary.json"),
        ("eval", "evaluate a checkpoint on held-out RBF and Matern-5/2 tasks"),
        ("bench-memory", "peak tensor bytes of conditioning over a context-size sweep"),
        ("bench-update", "operation counts of updates over prior-size and update-size sweeps"),
        ("verify", "run the randomized equivalence and stability suites"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "train":
            p.add_argument("--checkpoint-every", type=int, default=0,
                           help="also write checkpoint.bin every N steps (0: only at the end)")
        if name == "eval":
            p.add_argument("--block-sizes", default="1,5,M",
                           help="AND block sizes to evaluate; M means all targets in one block")
            p.add_argument("--feedback", default="sample", choices=("sample", "mean", "observed"),
                           help="what AND feeds back between blocks: a sample, the mean, or the observed targets")
        if name == "verify":
            p.add_argument("--instances", type=int, default=20, help="random instances per suite")
            p.add_argument("--inject-fault", choices=["unstable-update"],
                           help="replace the log-space update with the naive one (mutation check)")
    return parser


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _model(args, cfg: RunConfig):
    if args.checkpoint is not None:
        ck = load_checkpoint(args.checkpoint)
        return ck.config, ck.params, ck
    return cfg.model, init_params(cfg.model, seed=cfg.train.seed), None


def cmd_train(args, cfg: RunConfig) -> int:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    mcfg, params, ck = _model(args, cfg)
    start, adam = (ck.step, ck.adam) if ck is not None else (0, None)
    if start >= cfg.train.steps:
        print(f"checkpoint is already at step {start} >= train.steps={cfg.train.steps}", file=sys.stderr)
        return 2
    ckpt = out / "checkpoint.bin"
    meta = {"train": asdict(cfg.train), "tasks": cfg.tasks.to_dict()}

    def on_record(rec, adam_state):
        if args.checkpoint_every and rec.step % args.checkpoint_every == 0:
            save_checkpoint(ckpt, mcfg, params, rec.step, adam_state, meta)

    _, records, adam = train(params, mcfg, cfg.train, cfg.tasks, out_dir=out, adam=adam,
                             start_step=start, on_record=on_record)
    save_checkpoint(ckpt, mcfg, params, cfg.train.steps, adam, meta)
    last = records[-1]
    summary = {"command": "train", "steps": cfg.train.steps, "resumed_from": start,
               "final_train_nll": last.train_nll, "eval_rbf": last.eval_rbf, "eval_matern": last.eval_matern,
               "config": cfg.to_dict() | {"model": mcfg.to_dict()}}
    _write_json(out / "summary.json", summary)
    print(f"trained {cfg.train.steps - start} steps; final train NLL {last.train_nll:.4f}, "
          f"eval rbf {last.eval_rbf:.4f}, matern {last.eval_matern:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    mcfg, params, _ = _model(args, cfg)
    results = {}
    for kernel in ("rbf", "matern52"):
        res = {"diagonal": evaluate(params, mcfg, cfg.tasks, cfg.train, kernel, mode="diagonal").as_dict()}
        if mcfg.variant == "and":
            res["joint"] = evaluate(params, mcfg, cfg.tasks, cfg.train, kernel, mode="joint").as_dict()
            for tok in args.block_sizes.split(","):
                bs = 0 if tok.strip().upper() == "M" else int(tok)
                res[f"and_bq_{tok.strip()}"] = evaluate(params, mcfg, cfg.tasks, cfg.train, kernel, mode="and",
                                                         block_size=bs, feedback=args.feedback).as_dict()
        base = constant_gaussian_baseline(eval_batches(cfg.tasks, cfg.train, kernel))
        res["constant_baseline"] = {k: v.as_dict() for k, v in base.items()}
        results[kernel] = res
        flat = {k: v for k, v in res.items() if k != "constant_baseline"}
        flat.update({f"constant_{k}": v for k, v in res["constant_baseline"].items()})
        for name, r in flat.items():
            print(f"{kernel:9s} {name:16s} {r['mean']:+.4f} +- {r['stderr']:.4f}")
    _write_json(args.out / "summary.json", {"command": "eval", "variant": mcfg.variant, "feedback": args.feedback,
                                            "results": results})
    return 0


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_bench_memory(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    mcfg, params, _ = _model(args, cfg)
    b = cfg.bench
    rows = bench.memory_sweep(params, mcfg, b.n_sweep, seed=cfg.train.seed, chunked=b.chunked)
    _write_csv(args.out / "bench_memory.csv", ["n", "peak_bytes", "ops", "allocations", "wall_ms"],
               [[r.n, r.peak_bytes, r.ops, r.allocations, f"{r.wall_ms:.3f}"] for r in rows])
    ok = bench.memory_verdict(rows)
    for r in rows:
        print(f"N={r.n:6d} peak_bytes={r.peak_bytes:10d} ops={r.ops}")
    print(f"constant peak memory ({'chunked' if b.chunked else 'unchunked'}): {'PASS' if ok else 'FAIL'}")
    _write_json(args.out / "summary.json", {"command": "bench-memory", "chunked": b.chunked, "pass": ok,
                                            "rows": [asdict(r) for r in rows]})
    return 0 if ok else 1


def _fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def cmd_bench_update(args, cfg: RunConfig) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    mcfg, params, _ = _model(args, cfg)
    b = cfg.bench
    if b.u_fixed < 1 or min(b.u_sweep) < 1:
        print("error: update size must be >= 1 (an empty update is rejected)", file=sys.stderr)
        return 2
    by_prior, by_u = bench.update_sweep(params, mcfg, b.prior_n, b.u_fixed, b.u_sweep, seed=cfg.train.seed)
    verdict = bench.update_verdict(by_prior, by_u)
    _write_csv(args.out / "bench_update.csv",
               ["sweep", "prior_n", "u", "ops", "absorb_ops", "replay_ops", "wall_ms"],
               [[s, r.prior_n, r.u, r.ops, r.absorb_ops, r.replay_ops, f"{r.wall_ms:.3f}"]
                for s, rs in (("prior_n", by_prior), ("u", by_u)) for r in rs])
    for r in by_prior + by_u:
        print(f"prior_n={r.prior_n:6d} u={r.u:5d} ops={r.ops} (absorb {r.absorb_ops}, replay {r.replay_ops})")
    print(f"ops independent of prior N: {verdict['independent_of_prior_n']}; "
          f"doubling ratios absorb {_fmt(verdict['absorb_doubling_ratios'])} "
          f"total {_fmt(verdict['total_doubling_ratios'])}; verdict {'PASS' if verdict['pass'] else 'FAIL'}")
    _write_json(args.out / "summary.json", {"command": "bench-update", **verdict,
                                            "rows": [asdict(r) for r in by_prior + by_u]})
    return 0 if verdict["pass"] else 1


def cmd_verify(args, cfg: RunConfig) -> int:
    from .verify import run_suites

    results = run_suites(seed=cfg.train.seed, instances=args.instances,
                         fault=args.inject_fault)
    ok = True
    for r in results:
        ok &= r.passed == r.total
        print(f"{r.name:28s} {r.passed}/{r.total} {'PASS' if r.passed == r.total else 'FAIL'}"
              + (f"  ({r.detail})" if r.detail else ""))
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "summary.json", {"command": "verify", "seed": cfg.train.seed, "fault": args.inject_fault,
                                            "suites": [asdict(r) for r in results], "pass": ok})
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-memory": cmd_bench_memory,
    "bench-update": cmd_bench_update,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = build_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
