"""Command-line entry point.

Exit codes: 0 success, 1 error (bad input, failed check, aborted mission),
2 mission ran out of its step budget.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from geomagnav import talstm
from geomagnav.config import ConfigError, Scenario, bundled_scenarios, load_scenario
from geomagnav.field import FieldDomainError, GeoPosition
from geomagnav.nav import POLICIES, PolicyError

log = logging.getLogger("geomagnav")

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _scenario(path: str) -> Scenario:
    try:
        return load_scenario(path)
    except ConfigError as exc:
        raise CliError(str(exc)) from None


def _load_model(scenario: Scenario, override: Optional[str]) -> Optional[talstm.TaLstmModel]:
    """Model for the scenario's policy, or None for the analytic policy."""
    if scenario.policy.kind == "analytic":
        return None
    path = Path(override) if override else scenario.resolve(scenario.policy.model)
    if path is None:
        raise CliError(f"policy {scenario.policy.kind!r} needs a model: pass --model")
    if not path.is_file():
        raise CliError(f"policy {scenario.policy.kind!r} needs a model, but {path} does not exist")
    try:
        return talstm.load_model(path, expected_T=scenario.nav.window)
    except (talstm.ModelFormatError, OSError) as exc:
        raise CliError(str(exc)) from None


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _with_policy(scenario: Scenario, kind: Optional[str], max_steps: Optional[int]) -> Scenario:
    if kind:
        scenario = replace(scenario, policy=replace(scenario.policy, kind=kind))
    if max_steps:
        scenario = replace(scenario, mission=replace(scenario.mission, max_steps=max_steps))
    return scenario


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    from geomagnav.experiment import generate_training_windows, train_from_scenario, write_csv

    scenario = _scenario(args.config)
    if args.epochs is not None:
        try:
            cfg = replace(scenario.training.train, epochs=args.epochs)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        scenario = replace(scenario, training=replace(scenario.training, train=cfg))
    if args.trajectories is not None:
        scenario = replace(scenario, training=replace(scenario.training, trajectories=args.trajectories))
    out = _out_dir(args.out)

    log.info("generating %d training flights", scenario.training.trajectories)
    windows = generate_training_windows(scenario, seed=args.seed)
    if args.save_dataset:
        talstm.save_dataset(windows, out / "dataset.csv")
    log.info("training on %d windows", len(windows))
    try:
        model = train_from_scenario(scenario, seed=args.seed, windows=windows)
    except talstm.TrainingError as exc:
        raise CliError(f"training failed: {exc}") from None

    train_loss = model.meta["loss_trace"]
    val_loss = model.meta["val_trace"]
    talstm.save_model(model, out / "model.talstm")
    rows = [(i + 1, tl, float("nan") if vl is None else vl) for i, (tl, vl) in enumerate(zip(train_loss, val_loss))]
    write_csv(out / "training_loss.csv", ("epoch", "train_loss", "val_loss"), rows)
    if args.svg:
        from geomagnav.plotting import plot_loss
        plot_loss(train_loss, None if all(v is None for v in val_loss) else val_loss, out / "training_loss.svg")
    print(f"trained {len(train_loss)} epochs: final train loss {train_loss[-1]:.6g}; model -> {out / 'model.talstm'}")
    return EXIT_OK


def cmd_run(args) -> int:
    from geomagnav.experiment import export_convergence, export_trajectory, run_scenario

    scenario = _with_policy(_scenario(args.config), args.policy, args.max_steps)
    model = _load_model(scenario, args.model)
    out = _out_dir(args.out)

    try:
        result = run_scenario(scenario, model)
    except (PolicyError, FieldDomainError) as exc:
        raise CliError(str(exc)) from None
    if result.metrics is None:
        raise CliError(f"mission aborted before the first step: {result.message}")
    export_trajectory(result, out / "trajectory.csv")
    export_convergence(result, out / "convergence.csv", out / "convergence.svg" if args.svg else None)
    if args.svg:
        from geomagnav.plotting import plot_trajectory
        plot_trajectory(result, out / "trajectory.svg")

    m = result.metrics
    print(f"{scenario.name} [{result.policy}]: {result.outcome} after {result.steps} steps, "
          f"{m.travelled_km:.1f} km, deviation {m.deviation:.4f}")
    if result.message:
        print(result.message, file=sys.stderr)
    return {"success": EXIT_OK, "budget-exhausted": EXIT_BUDGET}.get(result.outcome, EXIT_ERROR)


def cmd_suite(args) -> int:
    from geomagnav.experiment import export_suite, run_scenario_suite

    scenario = _with_policy(_scenario(args.config), args.policy, args.max_steps)
    model = _load_model(scenario, args.model)
    out = _out_dir(args.out)
    report = run_scenario_suite(scenario, repetitions=args.repetitions, seed=args.seed, model=model,
                                workers=args.workers)
    export_suite(report, out, prefix=args.prefix)
    if args.svg:
        from geomagnav.plotting import plot_convergence
        for rec in (r for r in report.runs if r.result.metrics is not None):
            plot_convergence(rec.result, out / f"{args.prefix}_run{rec.run_id:03d}_convergence.svg")
    agg = report.aggregate
    print(f"{scenario.name} [{scenario.policy.kind}]: {agg['n_success']}/{agg['runs']} succeeded, "
          f"mean distance {agg['travelled_km_mean']:.1f} km, mean deviation {agg['deviation_mean']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model, episode = talstm.gradient_check_fixture(seed=args.seed)
    corrupt = {name: 1.01 for name in talstm.PARAM_NAMES} if args.corrupt_gradient else None
    err = talstm.gradient_check(model, episode, n_coords=args.coords, seed=args.seed, corrupt=corrupt)
    ok = err <= GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.6e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_fieldinfo(args) -> int:
    scenario = _scenario(args.config)
    try:
        p = GeoPosition(args.lat, args.lon)
        total = scenario.world.field_at(p)
        base = scenario.world.without_anomalies().field_at(p)
    except (ValueError, FieldDomainError) as exc:
        raise CliError(str(exc)) from None
    print(f"position      {p.lat_deg:.6f} N, {p.lon_deg:.6f} E")
    print(f"{'element':<12}{'total':>16}{'background':>16}")
    for label, attr, unit in (("B_X", "bx_nt", "nT"), ("B_Y", "by_nt", "nT"), ("B_Z", "bz_nt", "nT"),
                              ("F", "f_nt", "nT"), ("H", "h_nt", "nT"), ("I", "incl_deg", "deg"),
                              ("D", "decl_deg", "deg")):
        print(f"{label + ' [' + unit + ']':<12}{getattr(total, attr):16.6f}{getattr(base, attr):16.6f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomagnav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    scen_help = f"scenario JSON file or bundled name ({', '.join(bundled_scenarios())})"

    p = sub.add_parser("train", help="generate flights and train a TA-LSTM heading model")
    p.add_argument("--config", default="train", help=scen_help)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--trajectories", type=_positive, help="override the number of training flights")
    p.add_argument("--save-dataset", action="store_true", help="also write the window dataset CSV")
    p.add_argument("--svg", action="store_true", help="plot the loss curve")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("run", cmd_run, "fly one mission"),
                                 ("suite", cmd_suite, "repeat a mission with seeded variation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default="anomaly_free", help=scen_help)
        p.add_argument("--model", help="trained model file (overrides the scenario's)")
        p.add_argument("--policy", choices=POLICIES, help="override the scenario's policy")
        p.add_argument("--max-steps", type=_positive, help="override the per-leg step budget")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--svg", action="store_true", help="render charts next to the CSV files")
        p.set_defaults(func=func)
        if name == "suite":
            p.add_argument("--repetitions", type=_positive)
            p.add_argument("--workers", type=_positive)
            p.add_argument("--prefix", default="suite", help="file name prefix")

    p = sub.add_parser("gradcheck", help="compare backprop gradients to finite differences")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--coords", type=_positive, default=216, help="number of sampled coordinates")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fieldinfo", help="print the geomagnetic elements at a position")
    p.add_argument("--config", default="anomaly_free", help=scen_help)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.set_defaults(func=cmd_fieldinfo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"geomagnav: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
