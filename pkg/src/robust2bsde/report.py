"""Run artifacts: JSON and markdown reports, CSV tables and PNG figures."""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .pipeline import RunResult


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def surface_rows(result: RunResult, time_stride: int = 10):
    """Rows t, x1[, x2], Y, Z1[, Z2][, pi1[, pi2]] of the robust solution."""
    rs = result.artifacts.get("robust")
    if rs is None:
        return [], []
    rv = result.artifacts.get("valuation")
    d = rs.lattice.dim
    header = ["t"] + [f"x{i + 1}" for i in range(d)] + ["Y"] + [f"Z{i + 1}" for i in range(d)]
    if rv is not None:
        header += [f"pi{i + 1}" for i in range(d)]
    pts = rs.lattice.points
    N = rs.grid.n_steps
    steps = sorted(set(range(0, N + 1, max(1, time_stride))) | {N})
    rows = []
    for k in steps:
        t = rs.grid.times[k]
        Y = rs.V[k].ravel()
        Z = rs.Z[k].reshape(-1, d)
        P = rv.strategy_surface[k].reshape(-1, d) if rv is not None else None
        for j in range(pts.shape[0]):
            row = [_fmt(t)] + [_fmt(v) for v in pts[j]] + [_fmt(Y[j])] + [_fmt(v) for v in Z[j]]
            if P is not None:
                row += [_fmt(v) for v in P[j]]
            rows.append(row)
    return header, rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def table_rows(records: list, columns: list):
    out = []
    for r in records:
        row = []
        for c in columns:
            v = r.get(c)
            if isinstance(v, (float, int, np.floating)) and not isinstance(v, bool):
                row.append(_fmt(v))
            elif isinstance(v, list):
                row.append(json.dumps(v))
            else:
                row.append(str(v))
        out.append(row)
    return out


def markdown(result: RunResult) -> str:
    r = result.report
    lines = [f"# Run report ({r['verb']})", "", f"version {r['version']}, seed {r['seed']}", ""]
    if "robust" in r:
        rb = r["robust"]
        lines += ["## Robust solution", "", f"- V(0, x0) = {rb['v0']:.6f}",
                  f"- max over scenarios of y(0, x0) = {rb['y0_sup']:.6f}",
                  f"- worst scenario index {rb['root_argmax']}: {rb['worst_scenario']}", ""]
    if "valuation" in r:
        v = r["valuation"]
        lines += ["## Valuation", "", f"- kind: {v['kind']}, wealth {v['wealth']}", f"- Y0 = {v['Y0']:.6f}",
                  f"- value = {v['value']:.6f}", f"- strategy at the origin: {v['strategy_at_origin']}",
                  f"- optimality residual = {v['optimality_residual']:.3e}", ""]
    if "simulation" in r:
        s = r["simulation"]
        lines += ["## Simulation", "", "| scenario | estimate | s.e. |", "|---|---|---|"]
        for row in s["table"]:
            lines.append(f"| {row['scenario_index']} | {row['estimate']:.6f} | {row['se']:.2e} |")
        lines.append("")
    lines += ["## Checks", "", "| check | module | passed | measured | limit |", "|---|---|---|---|---|"]
    for c in r["checks"]:
        lines.append(f"| {c['name']} | {c['module']} | {'yes' if c['passed'] else 'NO'} | {c['measured']} | {c['limit']} |")
    lines += ["", f"overall: {'PASS' if r['passed'] else 'FAIL'}", ""]
    return "\n".join(lines)


def figures(result: RunResult, outdir: Path) -> list:
    """PNG figures of the value surface, strategy, per-scenario values and simulation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rs = result.artifacts.get("robust")
    if rs is None:
        return []
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    lat, grid = rs.lattice, rs.grid
    x = lat.axes[0]
    o = lat.origin_index
    sl = (slice(None),) + tuple(o[1:])  # first axis through the origin
    sd = float(np.sqrt(rs.family.a_hi.entries[0, 0]))
    keep = np.abs(x) <= 3 * sd
    N = grid.n_steps
    ks = sorted({0, N // 4, N // 2, 3 * N // 4, N})

    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    for k in ks:
        ax[0].plot(x[keep], rs.V[k][sl][keep], label=f"t={grid.times[k]:.2f}")
        ax[1].plot(x[keep], rs.Z[k][sl + (0,)][keep], label=f"t={grid.times[k]:.2f}")
    ax[0].set_xlabel("x")
    ax[0].set_ylabel("V(t, x)")
    ax[1].set_xlabel("x")
    ax[1].set_ylabel("Z(t, x)")
    ax[0].legend(fontsize=8)
    fig.tight_layout()
    p = outdir / "value_surface.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(5, 4))
    idx = np.arange(len(rs.family))
    ax.plot(idx, rs.y0_per_scenario, "o-", label="constant scenario y(0, x0)")
    ax.axhline(rs.v0, color="k", ls="--", label="robust V(0, x0)")
    ax.set_xlabel("scenario index")
    ax.set_ylabel("value at the origin")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = outdir / "scenario_values.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(rs.argmax[(slice(None),) + sl][:, keep].T, aspect="auto", origin="lower",
                   extent=[0, 1, x[keep][0], x[keep][-1]], cmap="viridis")
    fig.colorbar(im, ax=ax, label="maximising scenario index")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    fig.tight_layout()
    p = outdir / "argmax_scenario.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    rv = result.artifacts.get("valuation")
    if rv is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        for k in ks:
            ax.plot(x[keep], rv.strategy_surface[k][sl + (0,)][keep], label=f"t={grid.times[k]:.2f}")
        ax.set_xlabel("x")
        ax.set_ylabel("optimal strategy (first coordinate)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        p = outdir / "strategy.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    sim = result.artifacts.get("simulation")
    if sim is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        est = np.array([r["estimate"] for r in sim.table])
        se = np.array([r["se"] for r in sim.table])
        ax.errorbar(np.arange(est.size), est, yerr=3 * se, fmt="o", ms=3, label="optimal strategy, 3 s.e.")
        ax.axhline(sim.value, color="k", ls="--", label="reported value")
        ax.set_xlabel("scenario index")
        ax.set_ylabel("expected utility")
        ax.legend(fontsize=8)
        fig.tight_layout()
        p = outdir / "simulation.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written


def write_all(result: RunResult, outdir, csv_out: bool = True, figs: bool = True, time_stride: int = 10) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    write_json(outdir / "report.json", result.report)
    files["report"] = outdir / "report.json"
    (outdir / "report.md").write_text(markdown(result))
    files["markdown"] = outdir / "report.md"
    write_json(outdir / "timings.json", {k: round(v, 6) for k, v in result.timings.items()})
    files["timings"] = outdir / "timings.json"
    if csv_out:
        header, rows = surface_rows(result, time_stride)
        if rows:
            write_csv(outdir / "surfaces.csv", header, rows)
            files["surfaces"] = outdir / "surfaces.csv"
        r = result.report
        if "scenarios" in r:
            cols = ["index", "a", "y0"]
            write_csv(outdir / "scenarios.csv", cols, table_rows(r["scenarios"], cols))
            files["scenarios"] = outdir / "scenarios.csv"
        if "k_statistics" in r:
            cols = ["scenario_index", "n_paths", "mean_k1", "se_k1", "max_k1", "min_k1", "negative_fraction",
                    "tol_mono", "escape_fraction"]
            write_csv(outdir / "k_statistics.csv", cols, table_rows(r["k_statistics"], cols))
            files["k_statistics"] = outdir / "k_statistics.csv"
        if "simulation" in r:
            cols = ["scenario_index", "scenario", "estimate", "se"]
            write_csv(outdir / "simulation.csv", cols, table_rows(r["simulation"]["table"], cols))
            files["simulation"] = outdir / "simulation.csv"
        cols = ["name", "module", "passed", "measured", "limit"]
        write_csv(outdir / "checks.csv", cols, table_rows(r["checks"], cols))
        files["checks"] = outdir / "checks.csv"
    if figs:
        for p in figures(result, outdir / "figures"):
            files[p.stem] = p
    return {k: os.fspath(v) for k, v in files.items()}
