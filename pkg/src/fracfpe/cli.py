"""Command line entry point: simulate, solve-fpe, compare, kernel-table, sweep.

Exit codes: 0 ok, 2 configuration or contract error, 3 numerical failure,
4 acceptance threshold breached by ``compare`` or ``sweep``.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (CONFIG_PREFIX, canonical_json, coefficient_field, finite_variance,
                     load_config, noise_spec, set_path, subordinator_spec, validate)
from .density import (DensityEstimate, Grid, empirical_moment, estimate_density,
                      grid_moment, ks_distance, l1_distance, l1_standard_error)
from .errors import (ConfigError, ContractError, DomainError, FracFpeError,
                     NumericalFailure, RangeError, ResourceError)
from .fpe import (GENERAL_SERIES, NO_JUMP, STABLE_JUMP, SYMMETRIC_JUMP,
                  SpatialOperatorConfig, solve_fpe)
from .kernels import (GRUNWALD_LETNIKOV, PRODUCT, DiscreteMemoryOperator,
                      MemoryKernel, kernel_table)
from .exprparse import constant_value
from .paths import run_monte_carlo

log = logging.getLogger("fracfpe")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4


class ThresholdBreach(FracFpeError):
    pass


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path: Path, cfg: dict, columns, rows, meta=()):
    """Header comments (tool version, canonical config, metadata), then data."""
    lines = [f"# fracfpe {__version__}", CONFIG_PREFIX + canonical_json(cfg)]
    lines += [f"# {k}: {_fmt(v)}" for k, v in meta]
    lines.append(",".join(columns))
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    """(meta dict, column names, float array) of a file written by :func:`write_csv`."""
    meta, header, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[2:]
                if ": " in body:
                    k, v = body.split(": ", 1)
                    meta[k] = v
                continue
            if header is None:
                header = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
    return meta, header, np.array(rows, dtype=float).reshape(-1, len(header or []))


def _tag(t: float) -> str:
    return repr(float(t))


def density_rows(est: DensityEstimate):
    return zip(est.x, est.values)


def density_meta(est: DensityEstimate, t):
    return [("t", float(t)), ("x_min", est.grid.x_min), ("x_max", est.grid.x_max),
            ("n_x", est.grid.n_x), ("n_samples", est.n_samples), ("method", est.method),
            ("bandwidth", "none" if est.bandwidth is None else est.bandwidth),
            ("out_of_range", est.out_of_range)]


def read_density(path) -> DensityEstimate:
    meta, cols, data = read_csv(path)
    if cols[:2] != ["x", "q"]:
        raise ContractError(f"{path} is not a density file (columns {cols})")
    grid = Grid(float(meta["x_min"]), float(meta["x_max"]), int(meta["n_x"]))
    if data.shape[0] != grid.n_x:
        raise ContractError(f"{path}: row count does not match n_x")
    return DensityEstimate(grid, data[:, 1].copy(), meta.get("method", "unknown"),
                           int(meta.get("n_samples", 0)), None,
                           float(meta.get("out_of_range", 0.0)))


# ---------------------------------------------------------------------------
# experiment pieces


def grid_of(cfg) -> Grid:
    g = cfg["grid"]
    return Grid(g["x_min"], g["x_max"], g["n_x"])


def resolve_variant(cfg) -> str:
    v = cfg["solver"]["variant"]
    if v != "auto":
        return v
    noise = cfg["noise"]
    if noise is None or constant_value(coefficient_field(cfg).h) == 0.0:
        return NO_JUMP
    fam = noise["family"]
    if fam == "symmetric_stable":
        return STABLE_JUMP
    if fam == "truncated_symmetric_stable":
        return SYMMETRIC_JUMP
    return GENERAL_SERIES


def operator_config(cfg) -> SpatialOperatorConfig:
    variant = resolve_variant(cfg)
    noise = noise_spec(cfg)
    s = cfg["solver"]
    if variant == NO_JUMP:
        return SpatialOperatorConfig(NO_JUMP)
    if variant == STABLE_JUMP:
        return SpatialOperatorConfig(STABLE_JUMP, alpha=noise.levy_measure.alpha,
                                     stable_sign=s["stable_sign"])
    return SpatialOperatorConfig(variant, measure=noise.levy_measure,
                                 series_order=s["series_order"], jump_cutoff=noise.jump_cutoff,
                                 jump_form=s["jump_form"])


def memory_operator(cfg) -> DiscreteMemoryOperator:
    sub = subordinator_spec(cfg)
    dt = cfg["grid"]["dt"]
    kind = cfg["solver"]["memory"]
    if kind == "auto":
        kind = GRUNWALD_LETNIKOV if sub.is_identity else PRODUCT
    if kind == GRUNWALD_LETNIKOV or sub.is_identity:
        return DiscreteMemoryOperator.for_subordinator(sub, dt, kind)
    stable = sub.levy_measure.family == "one_sided_stable"
    kernel = (MemoryKernel.closed_form_stable(sub.alpha) if stable
              else MemoryKernel.numeric(sub, cfg["solver"]["talbot_nodes"]))
    if kind == PRODUCT:
        return DiscreteMemoryOperator.product_integration(kernel, dt)
    return DiscreteMemoryOperator.convolution(kernel, dt)


def monte_carlo(cfg, threads=1):
    g, mc = cfg["grid"], cfg["monte_carlo"]
    eps = cfg["noise"]["small_jump_cutoff"] if cfg["noise"] else None
    return run_monte_carlo(subordinator_spec(cfg), noise_spec(cfg), coefficient_field(cfg),
                           g["times"], mc["n_paths"], mc["seed"], g["dgamma"],
                           threads=threads, eps=eps)


def densities(cfg, res):
    grid = grid_of(cfg)
    mc = cfg["monte_carlo"]
    return [estimate_density(res.samples[:, k], grid, mc["density"], mc["bandwidth"])
            for k in range(res.times.size)]


def solve(cfg):
    g = cfg["grid"]
    return solve_fpe(operator_config(cfg), coefficient_field(cfg), memory_operator(cfg),
                     grid_of(cfg), g["t_end"], g["times"], cfg["solver"]["scheme"],
                     cfg["solver"]["initial"])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out: Path, threads=1):
    t0 = time.perf_counter()
    res = monte_carlo(cfg, threads)
    times = res.times
    write_csv(out / "samples.csv", cfg, ["path"] + [f"t={_tag(t)}" for t in times],
              _kept_ids(res),
              [("n_requested", res.n_requested), ("n_failed", res.n_failed)])
    rows = []
    for k, t in enumerate(times):
        m1, s1 = empirical_moment(res.samples[:, k], 1)
        m2, s2 = empirical_moment(res.samples[:, k], 2)
        ms, ss = empirical_moment(res.inverse[:, k], 1)
        rows.append((t, m1, s1, m2, s2, ms, ss, res.samples.shape[0]))
    write_csv(out / "moments.csv", cfg,
              ["t", "mean_x", "se_mean_x", "mean_x2", "se_mean_x2", "mean_s", "se_mean_s", "n"], rows)
    ests = densities(cfg, res)
    for t, est in zip(times, ests):
        write_csv(out / f"density_t{_tag(t)}.csv", cfg, ["x", "q"], density_rows(est),
                  density_meta(est, t))
    log.info("simulate: %d paths in %.1fs", res.n_requested, time.perf_counter() - t0)
    return res, ests


def _kept_ids(res):
    keep = np.setdiff1d(np.arange(res.n_requested), res.failed)
    for idx, row in zip(keep, res.samples):
        yield [int(idx)] + list(row)


def cmd_solve(cfg, out: Path):
    t0 = time.perf_counter()
    state = solve(cfg)
    for t in state.times:
        est = state.density(t)
        write_csv(out / f"fpe_t{_tag(t)}.csv", cfg, ["x", "q"], density_rows(est),
                  density_meta(est, t))
    write_csv(out / "mass_ledger.csv", cfg, ["step", "t", "interior", "outflow", "total"],
              ([int(r[0])] + list(r[1:]) for r in state.ledger))
    log.info("solve-fpe: %d steps in %.1fs", state.ledger.shape[0] - 1, time.perf_counter() - t0)
    return state


def compare_rows(cfg, res, ests, state):
    th = cfg["thresholds"]
    finite = finite_variance(cfg)
    rows, breach = [], []
    for k, t in enumerate(res.times):
        ref = state.density(t)
        mc_est = ests[k]
        l1 = l1_distance(mc_est, ref)
        se = l1_standard_error(mc_est, ref)
        ks = ks_distance(res.samples[:, k], ref)
        if finite:
            m_mc, m_se = empirical_moment(res.samples[:, k], 2)
            m_fpe = grid_moment(ref, 2)
            gap = abs(m_mc - m_fpe) / m_fpe if m_fpe > 0 else math.inf
        else:
            # E X**2 is infinite; the sample value means nothing
            m_mc = m_se = m_fpe = gap = math.nan
        ok = ((th["l1"] is None or l1 <= th["l1"]) and (th["ks"] is None or ks <= th["ks"])
              and (th["moment"] is None or gap <= th["moment"]))
        if not ok:
            breach.append(float(t))
        rows.append((t, l1, se, ks, m_mc, m_se, m_fpe, gap, ok))
    return rows, breach


REPORT_COLUMNS = ["t", "l1", "l1_mc_se", "ks", "mean_x2_mc", "se_mean_x2_mc", "mean_x2_fpe",
                  "moment_rel_gap", "pass"]


def cmd_compare(cfg, out: Path, threads=1):
    res, ests = cmd_simulate(cfg, out, threads)
    state = cmd_solve(cfg, out)
    rows, breach = compare_rows(cfg, res, ests, state)
    write_csv(out / "report.csv", cfg, REPORT_COLUMNS, rows)
    if breach:
        raise ThresholdBreach(f"acceptance thresholds breached at t={breach}")
    return rows


def compare_files(a_path, b_path, out: Path):
    a, b = read_density(a_path), read_density(b_path)
    l1 = l1_distance(a, b)
    ca = np.cumsum(a.values) * a.grid.dx
    cb = np.cumsum(b.values) * b.grid.dx
    sup = float(np.max(np.abs(ca - cb)))
    m2a, m2b = grid_moment(a, 2), grid_moment(b, 2)
    out.mkdir(parents=True, exist_ok=True)
    text = "a,b,l1,cdf_sup,mean_x2_a,mean_x2_b\n" + ",".join(
        [str(a_path), str(b_path)] + [_fmt(v) for v in (l1, sup, m2a, m2b)]) + "\n"
    with open(out / "report.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return l1, sup


def cmd_kernel_table(cfg, out: Path):
    sub = subordinator_spec(cfg)
    g = cfg["grid"]
    t = np.arange(1, int(round(g["t_end"] / g["dt"])) + 1) * g["dt"]
    table = kernel_table(sub, t)
    write_csv(out / "kernel_table.csv", cfg, ["t", "M", "G"], table)
    return table


def sweep_cells(cfg):
    keys = sorted(cfg["sweep"])
    for combo in itertools.product(*(cfg["sweep"][k] for k in keys)):
        cell = copy.deepcopy(cfg)
        cell["sweep"] = {}
        for k, v in zip(keys, combo):
            cell = set_path(cell, k, v)
        yield dict(zip(keys, combo)), cell


def cmd_sweep(cfg, out: Path, threads=1):
    keys = sorted(cfg["sweep"])
    if not keys:
        raise ConfigError("sweep needs a non-empty 'sweep' section", [("sweep", "empty")])
    rows, breached = [], False
    for i, (params, cell) in enumerate(sweep_cells(cfg)):
        res = monte_carlo(cell, threads)
        ests = densities(cell, res)
        state = solve(cell)
        crow, breach = compare_rows(cell, res, ests, state)
        breached |= bool(breach)
        for r in crow:
            rows.append([i] + [params[k] for k in keys] + list(r))
    write_csv(out / "sweep.csv", cfg, ["cell"] + keys + REPORT_COLUMNS, rows)
    if breached:
        raise ThresholdBreach("acceptance thresholds breached in at least one sweep cell")
    return rows


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="fracfpe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fracfpe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve-fpe", "compare", "kernel-table", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=(name != "compare"),
                        help="JSON config, or a CSV written by this tool")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (output is unaffected)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            sp.add_argument("densities", nargs="*", help="two density CSVs to compare directly")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare" and args.densities:
            if len(args.densities) != 2:
                raise ContractError("compare takes exactly two density files")
            out = Path(args.out or ".")
            compare_files(args.densities[0], args.densities[1], out)
            return EXIT_OK
        if not args.config:
            raise ConfigError("--config is required", [("--config", "missing")])
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must fit in 64 unsigned bits", [("--seed", "out of range")])
            cfg["monte_carlo"]["seed"] = args.seed
            cfg = validate(cfg)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1", [("--threads", "must be >= 1")])
        out = Path(args.out or cfg["output_dir"])
        if args.command == "simulate":
            cmd_simulate(cfg, out, args.threads)
        elif args.command == "solve-fpe":
            cmd_solve(cfg, out)
        elif args.command == "compare":
            cmd_compare(cfg, out, args.threads)
        elif args.command == "kernel-table":
            cmd_kernel_table(cfg, out)
        else:
            cmd_sweep(cfg, out, args.threads)
        return EXIT_OK
    except ThresholdBreach as exc:
        print(f"fracfpe: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, ContractError, DomainError) as exc:
        print(f"fracfpe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ResourceError, RangeError) as exc:
        print(f"fracfpe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
