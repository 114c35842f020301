"""Batch command-line interface: run scenarios, validate configs, plot logs.

Exit codes: 0 success, 1 configuration or input error, 2 emergency stop.
Every behavior reachable here is a thin shell over the library API.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import data_path

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_EMERGENCY = 2

MODE_BAND_COLORS = {
    "waiting": "#b5e7b0",
    "recovery": "#f5e483",
    "scanning": "#f2a29b",
    "human_guided": "#a9c8f5",
}

PLOT_PANELS = ["a_h", "a_p", "a_f", "kd1", "xerr_norm", "xd_p", "f_z"]


def resolve_scenario(arg: str) -> Path:
    """Accept a path or the bare name of a bundled scenario."""
    p = Path(arg)
    if p.exists():
        return p
    bundled = data_path("scenarios", f"{arg.removesuffix('.json')}.json")
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"scenario not found: {arg}")


def resolve_robot(arg: str | None) -> Path:
    if arg is None:
        return data_path("reference_7dof.json")
    p = Path(arg)
    if p.exists():
        return p
    raise FileNotFoundError(f"robot model not found: {arg}")


def cmd_run(args: argparse.Namespace):
    """Run a scenario; writes run.csv and summary.json to the output dir."""
    from . import config, sim

    try:
        model = config.load_robot(resolve_robot(args.robot))
        cfg = config.load_scenario(resolve_scenario(args.scenario), model.n)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    if args.dt is not None:
        cfg.dt = args.dt
    if args.duration is not None:
        cfg.duration = args.duration
    if args.seed is not None:
        cfg.seed = args.seed

    result = sim.run_scenario(model, cfg)
    out = Path(args.out)
    result.write(out, extended=args.extended_csv)
    with open(out / "transitions.json", "w") as fh:
        json.dump([{"t": t, "from": a, "to": b} for t, a, b in result.transitions],
                  fh, indent=2)
    s = result.summary
    print(f"run finished: t={s['t_final']:.3f}s ticks={s['ticks']} "
          f"t_p={s['t_p_final']:.3f}s modes={s['mode_first_visit_order']}")
    if s["emergency_stop"]:
        print(f"EMERGENCY STOP at t={s['emergency_stop_t']:.3f}s "
              f"(|f_e| exceeded its limit)", file=sys.stderr)
        return EXIT_EMERGENCY, result
    return EXIT_OK, result


def cmd_check(args: argparse.Namespace):
    """Validate config files and print the control-parameter table."""
    from . import config

    try:
        model = config.load_robot(resolve_robot(args.robot))
        cfg = config.load_scenario(resolve_scenario(args.scenario), model.n)
    except Exception as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    print(f"robot: {model.name} (n={model.n})")
    print(f"{'parameter':<12}{'value'}")
    for name, value in config.parameter_table(cfg):
        print(f"{name:<12}{value}")
    print("configuration OK")
    return EXIT_OK, None


def cmd_plot(args: argparse.Namespace):
    """Render the log panels as SVG files with mode-colored backgrounds."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np
    import pandas as pd

    try:
        df = pd.read_csv(args.csv)
    except Exception as exc:
        print(f"error reading CSV: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    required = {"t", "mode", "a_h", "a_p", "a_f", "kd1", "f_z",
                "xerr1", "xerr2", "xerr3", "xd_p1", "xd_p2", "xd_p3"}
    if df.empty or not required.issubset(df.columns):
        print("error: CSV is empty or missing expected columns", file=sys.stderr)
        return EXIT_CONFIG, None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = df["t"].to_numpy()
    modes = df["mode"].astype(str).to_numpy()

    # contiguous mode segments for the background bands
    segments = []
    start = 0
    for i in range(1, len(modes) + 1):
        if i == len(modes) or modes[i] != modes[start]:
            segments.append((t[start], t[i - 1], modes[start]))
            start = i

    def band(ax):
        for t0, t1, name in segments:
            ax.axvspan(t0, max(t1, t0 + 1e-9),
                       color=MODE_BAND_COLORS.get(name, "#dddddd"),
                       alpha=0.45, linewidth=0)

    series = {
        "a_h": (df["a_h"], "a_h"),
        "a_p": (df["a_p"], "a_p"),
        "a_f": (df["a_f"], "a_f"),
        "kd1": (df["kd1"], "k_d1 [N/m]"),
        "xerr_norm": (np.linalg.norm(df[["xerr1", "xerr2", "xerr3"]].to_numpy(), axis=1),
                      "||x err|| [m]"),
        "xd_p": (df[["xd_p1", "xd_p2", "xd_p3"]], "x_d [m]"),
        "f_z": (df["f_z"], "f_z in {E} [N]"),
    }
    for i, key in enumerate(PLOT_PANELS, start=1):
        fig, ax = plt.subplots(figsize=(9, 2.2))
        band(ax)
        values, label = series[key]
        if hasattr(values, "columns"):
            for col, lbl in zip(values.columns, ("x", "y", "z")):
                ax.plot(t, values[col], linewidth=0.9, label=lbl)
            ax.legend(loc="upper right", fontsize=7)
        else:
            ax.plot(t, values, linewidth=0.9, color="#333333")
        ax.set_ylabel(label, fontsize=8)
        ax.set_xlabel("t [s]", fontsize=8)
        ax.tick_params(labelsize=7)
        fig.tight_layout()
        fig.savefig(out / f"fig_{i}_{key}.svg")
        plt.close(fig)
    print(f"wrote {len(PLOT_PANELS)} SVG panels to {out}")
    return EXIT_OK, None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scanbot",
        description="Multi-modal scanning-manipulator simulator and control library")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write logs")
    p_run.add_argument("--robot", default=None, help="robot model JSON (default: bundled)")
    p_run.add_argument("--scenario", required=True,
                       help="scenario JSON path or bundled name (e.g. full_experiment)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--dt", type=float, default=None, help="override tick length (s)")
    p_run.add_argument("--duration", type=float, default=None, help="override duration cap (s)")
    p_run.add_argument("--seed", type=int, default=None, help="override RNG seed")
    p_run.add_argument("--extended-csv", action="store_true",
                       help="include joint-state columns in run.csv")

    p_check = sub.add_parser("check", help="validate config files")
    p_check.add_argument("--robot", default=None)
    p_check.add_argument("--scenario", required=True)

    p_plot = sub.add_parser("plot", help="render SVG panels from run.csv")
    p_plot.add_argument("--csv", required=True, help="run.csv from a previous run")
    p_plot.add_argument("--out", required=True, help="output directory for SVGs")
    return parser


def run_command(argv: list[str] | None = None):
    """Parse argv and execute; returns (exit_code, RunResult-or-None)."""
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "check":
        return cmd_check(args)
    if args.command == "plot":
        return cmd_plot(args)
    raise AssertionError("unreachable")


def main(argv: list[str] | None = None) -> int:
    code, _ = run_command(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
