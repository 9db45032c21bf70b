"""Subcommands of the lab command line."""

import argparse
import logging
import os

from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from averaging.density import density_operator, sample_initial, stability_distances
from averaging.experiments import (
    Scenario,
    counterexample_ensemble,
    counterexample_run,
    delta_rate_check,
    load_scenario,
    lq_summary,
    predicted_delta_exponent,
    reference_density_gap,
    run_scenario,
)
from averaging.fastslow import iterate_fast_slow
from averaging.inducing import (
    expansion_check,
    induced_moment_growth,
    return_time_moment,
    tail_estimate,
)
from averaging.orderfn import moment_scaling_check, order_function, shift_bound_check
from averaging.secondorder import verify_appendix
from averaging.suspension import (
    continuous_averaging_check,
    estimate_k2,
    flow,
    flow_from_config,
    induced_lipschitz_check,
    rollover_counts,
    ssflow_check,
    vw_comparison,
)
from averaging.utils.checks import LabError
from averaging.utils.io import path_table, write_json, write_table
from averaging.utils.utils import get_logger, make_rng
from averaging.utils.verdicts import Verdict, all_hold, compare

logger = logging.getLogger()

Handler = Callable[[Scenario], list[Verdict]]


def _out(s: Scenario, name: str) -> Path:
    return s.out / name


def simulate(s: Scenario) -> list[Verdict]:
    """Runs the ensemble and writes summaries, orbit records and a sample path."""
    res = run_scenario(s)
    write_table(res.summary, _out(s, "summary.csv"), seed=s.seed)
    write_table(res.orbits, _out(s, "orbits.csv"), seed=s.seed)
    if res.rates:
        write_table(
            [r for series in res.rates for r in series.to_records()],
            _out(s, "rates.csv"),
            seed=s.seed,
        )

    eps = s.eps[-1]
    rng = make_rng(s.seed, 0)
    y0 = sample_initial(s.family, eps, rng, 1, law="lebesgue")
    path, _ = iterate_fast_slow(s.field, s.family, eps, y0, rng=rng)
    write_table(path_table(path.times, path.samples[:, 0]), _out(s, "path.csv"), s.seed)

    return res.verdicts


def orderfn(s: Scenario) -> list[Verdict]:
    """Order function samples, their norms and the moment and shift checks."""
    verdicts = []
    records, summary = [], []
    for i, eps in enumerate(s.eps):
        rng = make_rng(s.seed, i)
        op = density_operator(s.family, eps, s.ulam_bins)
        y0 = sample_initial(s.family, eps, rng, s.size, law=s.law, op=op)
        sample = order_function(
            s.field, s.family, eps, y0, op=op, rng=rng, refine=s.refine
        )
        records.extend(sample.to_records())
        for q, val in lq_summary(sample.relaxed_delta, s.q).items():
            summary.append({"epsilon": eps, "q": float(q[1:]), "Lq_norm_delta": val})
    write_json(records, _out(s, "orderfn_samples.json"))
    write_table(summary, _out(s, "orderfn_summary.csv"), seed=s.seed)

    moments = s.table("moments")
    if moments and len(s.eps) >= 3:
        series = moment_scaling_check(
            s.field,
            s.family,
            s.eps,
            p=float(moments.get("p", 2.0)),
            samples=int(moments.get("samples", s.size)),
            seed=s.seed,
            form=str(moments.get("form", "sup-inside")),
            law=s.law,
            refine=s.refine,
        )
        write_table(series.to_records(), _out(s, "moment_ratio.csv"), seed=s.seed)
        if series.fitted:
            verdicts.append(
                compare("moment ratio bounded", -series.slope, 0.25, slope=series.slope)
            )

    shift = s.table("shift")
    if shift:
        eps = s.eps[-1]
        rng = make_rng(s.seed, len(s.eps))
        op = density_operator(s.family, eps, s.ulam_bins)
        y0 = sample_initial(s.family, eps, rng, int(shift.get("size", 20)), op=op)
        shifts = tuple(int(v) for v in shift.get("shifts", (1, 2, 5, 10)))
        verdicts.append(
            shift_bound_check(s.field, s.family, eps, y0, shifts=shifts, rng=rng)
        )

    return verdicts


def density(s: Scenario) -> list[Verdict]:
    """Invariant densities, their closed-form gaps and the stability distances."""
    table = s.table("density")
    k = table.get("bins", s.ulam_bins)
    method = table.get("method")
    L1 = s.field.L1

    def build(eps: float):
        return density_operator(
            s.family,
            eps,
            k,
            method=method,
            rng=make_rng(s.seed, int(1e6 * eps)),
            n_steps=int(table.get("orbit_steps", 100_000)),
        )

    op_zero = build(0.0)
    write_table(op_zero.to_frame(), _out(s, "density_0.csv"))
    if table.get("dump_matrix") and op_zero.matrix is not None:
        write_table(op_zero.matrix_frame(), _out(s, "matrix_0.csv"))

    verdicts = []
    reference = table.get("reference")
    if reference:
        gap = reference_density_gap(op_zero, reference)
        tol = float(table.get("tolerance", 1e-10 if reference == "uniform" else 0.05))
        verdicts.append(
            compare(
                f"{reference} density gap", gap, tol, atol=0.0, method=op_zero.method
            )
        )

    rows = []
    for eps in s.eps:
        op = build(eps)
        write_table(op.to_frame(), _out(s, f"density_{eps:g}.csv"))
        r_eps, s_eps = stability_distances(
            s.family, s.field, eps, op_eps=op, op_zero=op_zero
        )
        rows.append(
            {"epsilon": eps, "R_eps": r_eps, "S_eps": s_eps, "method": op.method}
        )
        verdicts.append(
            compare(
                "stability by densities",
                s_eps,
                L1 * r_eps + eps,
                eps=eps,
                method=op.method,
            )
        )
    write_table(rows, _out(s, "stability.csv"), seed=s.seed)
    if len(rows) >= 2:
        verdicts.append(
            compare(
                "stability trend",
                rows[-1]["S_eps"],
                rows[0]["S_eps"],
                asserted=False,
            )
        )

    return verdicts


def induce(s: Scenario) -> list[Verdict]:
    """Return time tails, induced growth and the expansion checks."""
    verdicts = []
    tail = s.table("tail")
    if tail:
        eps = float(tail.get("eps", 0.0))
        est = tail_estimate(
            s.family,
            eps,
            n_max=int(tail.get("n_max", 1000)),
            samples=int(tail.get("samples", 100_000)),
            seed=s.seed,
            n_min=int(tail.get("n_min", 10)),
        )
        frame = pd.DataFrame(
            {"n": est.n, "survival": est.survival, "count": est.counts}
        )
        if est.exact is not None:
            frame["exact"] = est.exact
        frame["fitted_slope"] = est.slope
        write_table(frame, _out(s, "tail.csv"), seed=s.seed)
        a = s.family.schedule(eps)["a"]
        verdicts.append(
            compare(
                "tail exponent",
                abs(est.slope + 1.0 / a),
                float(tail.get("rel_tol", 0.15)) / a,
                atol=0.0,
                slope=est.slope,
                a=a,
            )
        )

    growth = s.table("growth")
    if growth:
        eps = float(growth.get("eps", 0.0))
        n_list = [int(n) for n in growth.get("n", [2**j for j in range(4, 11)])]
        series = induced_moment_growth(
            lambda y: np.cos(2.0 * np.pi * y),
            s.family,
            eps,
            n_list,
            p=float(growth.get("p", 4.0)),
            samples=int(growth.get("samples", 10_000)),
            seed=s.seed,
        )
        write_table(
            [{"n": n, "p_norm": v} for n, v in series.points],
            _out(s, "induced_growth.csv"),
            seed=s.seed,
        )
        low, high = growth.get("slope_range", (0.4, 0.65))
        if series.fitted:
            slope = series.slope
            verdicts.append(compare("induced growth lower", low, slope, atol=0.0))
            verdicts.append(compare("induced growth upper", slope, high, atol=0.0))

    expansion = s.table("expansion")
    if expansion:
        eps = float(expansion.get("eps", 0.0))
        samples = int(expansion.get("samples", 10_000))
        verdicts.append(expansion_check(s.family, eps, samples, s.seed))
        if "p" in expansion:
            verdicts.append(
                return_time_moment(
                    s.family, eps, float(expansion["p"]), samples, s.seed
                )
            )

    return verdicts


def suspend(s: Scenario) -> list[Verdict]:
    """Semiflow checks, the induced comparison and continuous averaging runs."""
    table = s.table("suspension")
    fs = flow_from_config(table, s.family)
    q = float(table.get("q", 2.0))
    size = int(table.get("samples", 1000))
    flow_size = int(table.get("flow_samples", 100))
    verdicts = []

    rng = make_rng(s.seed, 0)
    eps = s.eps[0]
    ps = s.family.phase_space
    y = ps.low + ps.length * rng.random(size)
    u = fs.height(y) * rng.random(size)
    t1, t2 = fs.K1 * rng.random(size), fs.K1 * rng.random(size)
    ya, ua = flow(fs, eps, y, u, t1 + t2)
    ym, um = flow(fs, eps, y, u, t1)
    yb, ub = flow(fs, eps, ym, um, t2)
    dy = np.abs(ya - yb)
    if ps.name == "circle":
        dy = np.minimum(dy, 1.0 - dy)
    gap = np.maximum(dy, np.abs(ua - ub))
    verdicts.append(compare("semiflow additivity", gap, 1e-12, atol=0.0))
    laps = rollover_counts(fs, eps, y, u, t1)
    verdicts.append(compare("rollover count", laps, 1.0 + fs.K1 * t1, atol=0.0))

    rows, runs = [], []
    for i, eps in enumerate(s.eps):
        rng = make_rng(s.seed, i + 1)
        cmp = vw_comparison(field=s.field, fs=fs, eps=eps, rng=rng, size=size, q=q)
        verdicts.append(cmp.verdict)
        rows.append(
            {
                "epsilon": eps,
                "q": q,
                "delta_norm": cmp.delta_norm,
                "induced_norm": cmp.induced_norm,
                "margin": cmp.margin,
                "k2_estimate": estimate_k2(fs, eps, rng),
            }
        )
        verdicts.append(induced_lipschitz_check(s.field, fs, eps, rng))
        verdicts.append(ssflow_check(s.field, fs, eps))
        run = continuous_averaging_check(
            s.field, fs, eps, rng, flow_size, h_max=s.h_max, refine=s.refine
        )
        verdicts.append(run.verdict)
        runs.append(pd.DataFrame({"epsilon": eps, "z": run.z, "delta": run.delta}))
        write_table(
            run.paths[0].to_frame(eps), _out(s, f"flow_trace_{eps:g}.csv"), seed=s.seed
        )

    write_table(rows, _out(s, "vw_comparison.csv"), seed=s.seed)
    write_table(pd.concat(runs, ignore_index=True), _out(s, "flow_runs.csv"), s.seed)

    return verdicts


def appendix_verify(s: Scenario) -> list[Verdict]:
    """The u, w and z traces of an ensemble and their inequalities."""
    table = s.table("appendix")
    eps = float(table.get("eps", s.eps[-1]))
    rng = make_rng(s.seed, 0)
    y0 = sample_initial(s.family.frozen(), eps, rng, s.size, law=s.law)
    res = verify_appendix(
        s.field,
        s.family,
        eps,
        y0,
        rng=rng,
        freeze=bool(table.get("freeze", True)),
        h_max=s.h_max,
        refine=s.refine,
    )
    rows = [
        {
            "orbit": i,
            "delta": tr.delta,
            "u_max": tr.u_max,
            "max_residual": float(tr.residuals.max(initial=0.0)),
            "degenerate": tr.degenerate,
        }
        for i, tr in enumerate(res.traces)
    ]
    write_table(rows, _out(s, "appendix_orbits.csv"), seed=s.seed)
    for i, tr in enumerate(res.traces[: int(table.get("dump", 1))]):
        write_table(tr.to_frame(), _out(s, f"trace_{i}.csv"), seed=s.seed)

    return res.verdicts


def counterexample(s: Scenario) -> list[Verdict]:
    """Constructed eps against Lebesgue-random initial conditions."""
    table = s.table("counterexample")
    beta = float(table.get("beta", 1.0))
    deltas = [float(d) for d in table.get("deltas", (1e-2, 1e-3, 1e-4))]
    starts = table.get("y0", (0.1, 0.3, 0.7))
    verdicts, rows = [], []

    for y0 in starts:
        for rec in counterexample_run(beta, deltas, y0):
            rows.append(
                {
                    "y0": y0,
                    "delta": rec.delta,
                    "N": rec.N,
                    "k": rec.k,
                    "epsilon": rec.eps,
                    "x_hat_1": rec.x_end,
                    "frozen_from": rec.frozen_from,
                }
            )
            lower = 1.0 - 5.0 * (rec.eps**0.5 + rec.eps)
            verdicts.append(compare("constructed endpoint", lower, rec.x_end, atol=0.0))
            verdicts.append(compare("constructed eps", rec.eps, rec.delta, atol=0.0))
            frozen = np.inf if rec.frozen_from is None else rec.frozen_from
            verdicts.append(compare("frozen orbit", frozen, rec.N, atol=0.0))
    write_table(rows, _out(s, "counterexample.csv"), seed=s.seed)

    target = float(table.get("random_delta", deltas[-1]))
    rec = counterexample_run(beta, [target], starts[0])[0]
    size = int(table.get("random_size", 1000))
    z = counterexample_ensemble(beta, rec.eps, rec.drift, size, make_rng(s.seed, 0))
    write_table(
        pd.DataFrame({"epsilon": rec.eps, "z": z}), _out(s, "random_y0.csv"), s.seed
    )
    verdicts.append(
        compare(
            "random initial conditions",
            float(np.mean(z)),
            float(table.get("random_bound", 0.1)),
            atol=0.0,
            eps=rec.eps,
        )
    )

    return verdicts


def rates(s: Scenario) -> list[Verdict]:
    """Rate fits of the ensemble norms, with the predicted exponents when known."""
    table = s.table("rates")
    res = run_scenario(s)
    verdicts = list(res.verdicts)
    rows = [r for series in res.rates for r in series.to_records()]
    if "p" in table:
        p = float(table["p"])
        for row in rows:
            if row["label"].startswith("delta_norm"):
                q = float(row["label"].split("L")[-1])
                row["predicted"] = predicted_delta_exponent(p, q, s.field.d)
    write_table(rows, _out(s, "rates.csv"), seed=s.seed)
    write_table(res.summary, _out(s, "summary.csv"), seed=s.seed)

    low, high = table.get("z_slope", (0.4, 0.6))
    for series in res.rates:
        if series.label.startswith("z_norm") and series.fitted:
            verdicts.append(
                compare(f"{series.label} slope lower", low, series.slope, atol=0.0)
            )
            verdicts.append(
                compare(f"{series.label} slope upper", series.slope, high, atol=0.0)
            )

    if table.get("delta_moment") and "p" in table:
        series, verdict = delta_rate_check(
            s.field, s.family, s.eps, float(table["p"]), s.size, s.seed, law=s.law
        )
        write_table(series.to_records(), _out(s, "delta_moment.csv"), seed=s.seed)
        verdicts.append(verdict)

    return verdicts


HANDLERS: dict[str, Handler] = {
    "simulate": simulate,
    "orderfn": orderfn,
    "density": density,
    "induce": induce,
    "suspend": suspend,
    "appendix-verify": appendix_verify,
    "counterexample": counterexample,
    "rates": rates,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Scenario TOML file.")
    common.add_argument("--seed", type=int, default=None, help="Master seed.")
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument("--threads", type=int, default=None, help="Worker threads.")

    parser = argparse.ArgumentParser(
        prog="lab.py", description="Averaging experiments for fast-slow skew products."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in HANDLERS.items():
        sub.add_parser(name, parents=[common], help=handler.__doc__)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one subcommand.

    Args:
        argv: The arguments, sys.argv when None.

    Returns:
        0 when every asserted inequality holds, 1 when one fails and 2 on errors.
    """
    args = build_parser().parse_args(argv)
    if not logger.handlers:
        get_logger(logfile=os.getenv("LAB_LOGFILE"))
    try:
        s = load_scenario(
            args.config, seed=args.seed, out=args.out, threads=args.threads
        )
        logger.info(f"Running {args.command} on {s.name}, writing to {s.out}.")
        verdicts = HANDLERS[args.command](s)
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2

    write_json(
        {
            "scenario": s.name,
            "command": args.command,
            "seed": s.seed,
            "verdicts": verdicts,
        },
        _out(s, "verdicts.json"),
    )
    failed = [v.name for v in verdicts if v.asserted and not v.holds]
    if failed:
        names = ", ".join(failed)
        logger.warning(f"{len(failed)} asserted inequalities failed: {names}")
    else:
        logger.info(f"All {len(verdicts)} inequalities hold.")

    return 0 if all_hold(verdicts) else 1
