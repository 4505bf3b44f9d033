"""Command-line front end.

    dosm generate --seed 1 --vehicles 100 --horizon 750 --out trace.csv
    dosm train gru --epochs 150 --out ckpt/
    dosm train critic --episodes 150 --out ckpt/
    dosm run --policies NM,AM,DRL,DOSM --seed 1,2 --checkpoint ckpt/ --out results/
    dosm compare results/*_summary.json --out table.csv

Exit status: 0 success, 1 invalid input, 2 runtime failure, 3 when more than
half of some run's solves were infeasible.  ``DOSM_LOG`` sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .catalog import CatalogError
from .critic import ValueNetwork
from .nn import TrainingDivergedError
from .predictor import GruForecaster
from .sim import (POLICIES, Models, build_scenario, default_scenario_text, parse_scenario,
                  read_summary, run_scenario, summarize, train_critic_model,
                  train_forecasters, write_run)
from .trace import TraceError, generate_trace, read_trace, write_trace

log = logging.getLogger("dosm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None


def _policies(text):
    names = [p.strip().upper() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in POLICIES]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown policy {bad[0] if bad else text!r}; choose from {','.join(POLICIES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dosm", description="Online service lifecycle management simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic random-waypoint trace")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--vehicles", type=_positive_int, default=500)
    g.add_argument("--horizon", type=_positive_float, default=750.0)
    g.add_argument("--out", required=True, help="trace file to write (xy_csv)")

    t = sub.add_parser("train", help="train the forecasters or the critic")
    t.add_argument("component", choices=["gru", "critic"])
    t.add_argument("--scenario", help="scenario INI (bundled default if omitted)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=_positive_int, help="GRU epochs (at most 150)")
    t.add_argument("--episodes", type=_positive_int, help="critic episodes (at most 1500)")
    t.add_argument("--out", required=True, help="checkpoint directory")

    r = sub.add_parser("run", help="simulate policies and export metrics")
    r.add_argument("--scenario")
    r.add_argument("--trace", help="xy_csv trace to replay instead of the synthetic fleet")
    r.add_argument("--policies", type=_policies, default=list(POLICIES))
    r.add_argument("--seed", type=_seeds, default=[1])
    r.add_argument("--checkpoint", help="directory written by `train`")
    r.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="tabulate run summaries")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--out", help="CSV file for the table")
    return p


def _spec(path):
    return parse_scenario(path if path else default_scenario_text())


def cmd_generate(args) -> int:
    records = generate_trace(args.seed, args.vehicles, args.horizon)
    try:
        write_trace(records, args.out)
    except OSError as exc:
        raise OSError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    print(f"wrote {args.out}: {args.vehicles} vehicles, {len(records)} records")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs is not None and args.epochs > 150:
        raise UsageError("--epochs is capped at 150")
    if args.episodes is not None and args.episodes > 1500:
        raise UsageError("--episodes is capped at 1500")
    spec = _spec(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario(spec, seed=args.seed)
    if args.component == "gru":
        models = train_forecasters(scenario, epochs=args.epochs, seed=args.seed)
        for s, est in models.items():
            est.save(out / f"gru_s{s}.npz", {"service": s, "scenario": spec.name})
        curves = [models[s].loss_curve_ for s in sorted(models)]
        with open(out / "gru_loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + [f"service_{s}" for s in sorted(models)])
            for k in range(len(curves[0])):
                w.writerow([k + 1] + [repr(c[k]) for c in curves])
        print(f"trained {len(models)} forecasters for {len(curves[0])} epochs -> {out}")
    else:
        est = train_critic_model(scenario, episodes=args.episodes, seed=args.seed)
        est.save(out / "critic.npz", {"scenario": spec.name})
        with open(out / "critic_loss.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "loss"])
            for k, loss in enumerate(est.loss_curve_):
                w.writerow([k + 1, repr(loss)])
        print(f"trained critic for {len(est.loss_curve_)} episodes -> {out}")
    return EXIT_OK


def load_models(checkpoint, policies, n_services) -> Models:
    """Checkpoints for the learning policies; a missing file names the policy needing it."""
    if checkpoint is None:
        if any(p in ("DRL", "DOSM") for p in policies):
            log.warning("no --checkpoint: DRL/DOSM start from an untrained critic "
                        "and persistence forecasts")
        return Models()
    ckpt = Path(checkpoint)
    if not ckpt.is_dir():
        raise UsageError(f"checkpoint directory {ckpt} does not exist")
    models = Models()
    needs = {"DRL": ["critic.npz"],
             "DOSM": ["critic.npz"] + [f"gru_s{s}.npz" for s in range(n_services)]}
    for policy in policies:
        for name in needs.get(policy, []):
            if not (ckpt / name).exists():
                raise UsageError(f"policy {policy} needs checkpoint {ckpt / name}, "
                                 f"which is missing")
    if "DRL" in policies or "DOSM" in policies:
        models.critic = ValueNetwork.load(ckpt / "critic.npz")
    if "DOSM" in policies:
        models.forecasters = {s: GruForecaster.load(ckpt / f"gru_s{s}.npz")
                              for s in range(n_services)}
    return models


def cmd_run(args) -> int:
    spec = _spec(args.scenario)
    records = read_trace(args.trace) if args.trace else None
    out = Path(args.out)
    status = EXIT_OK
    models = None
    for seed in args.seed:
        scenario = build_scenario(spec, seed=seed, records=records)
        if models is None:
            models = load_models(args.checkpoint, args.policies, len(scenario.services))
        for policy in args.policies:
            run = run_scenario(policy, scenario, seed=seed, models=models)
            write_run(run, out)
            s = summarize(run)
            print(f"{policy:5s} seed {seed}: delay {s['mean_service_delay_s'] * 1e3:.3f} ms, "
                  f"migrations {s['migrations']}, computation load "
                  f"{s['computation_load_pct']:.1f}%, migration load "
                  f"{s['migration_load_pct']:.1f}%")
            if s["optimization_runs"] and 2 * s["infeasible_runs"] > s["optimization_runs"]:
                log.error("%s seed %d: %d of %d solves infeasible", policy, seed,
                          s["infeasible_runs"], s["optimization_runs"])
                status = EXIT_INFEASIBLE
    return status


COMPARE_FIELDS = ["optimization_runs", "migrations", "computation_load_pct",
                  "migration_load_pct", "mean_service_delay_s", "total_migration_delay_s",
                  "impacted_vehicles", "scale_outs", "scale_ins", "infeasible_runs"]


def cmd_compare(args) -> int:
    if len(args.summaries) < 2:
        raise UsageError("compare needs at least two summaries")
    try:
        runs = [read_summary(p) for p in args.summaries]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    headers = [f"{r['policy']}/{r['seed']}" for r in runs]
    rows = [[f] + [r[f] for r in runs] for f in COMPARE_FIELDS]
    width = max(len(f) for f in COMPARE_FIELDS)
    print(" " * width + "".join(f"{h:>16s}" for h in headers))
    for row in rows:
        cells = "".join(f"{v:>16.6g}" if isinstance(v, float) else f"{v:>16}" for v in row[1:])
        print(f"{row[0]:<{width}s}{cells}")
    by_policy: dict[tuple, dict] = {}
    for r in runs:
        by_policy.setdefault(r["seed"], {})[r["policy"]] = r
    for seed, group in sorted(by_policy.items()):
        if "DOSM" in group and "AM" in group and \
                group["DOSM"]["migrations"] > group["AM"]["migrations"]:
            print(f"ANOMALY seed {seed}: DOSM migrations {group['DOSM']['migrations']} "
                  f"exceed AM's {group['AM']['migrations']}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["field"] + headers)
            w.writerows(rows)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DOSM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"generate": cmd_generate, "train": cmd_train, "run": cmd_run,
                "compare": cmd_compare}
    try:
        return handlers[args.command](args)
    except (UsageError, CatalogError, TraceError) as exc:
        print(f"dosm: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as exc:
        print(f"dosm: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"dosm: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
