"""Command-line driver: convergence runs, SVG plots, stability constants and scan flow.

Exit codes are 0 on success, 2 for usage errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import cases
from .adapt import adaptive_loop, write_summary
from .assembly import SolverError
from .constants import compute_extension_constants, compute_trace_constant, nondecreasing
from .hmesh import write_vtk

log = logging.getLogger("adaptiga")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    case: str = "unit-square"
    k: int = 1
    mode: str = "adaptive"
    steps: int = 4
    lam: float = 0.8
    beta: float | None = None
    gamma_g: float | None = None
    gamma_s: float | None = None
    rho_max: int | None = None
    theta: float | None = None
    output: str = "runs"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.case not in cases.CASE_NAMES:
            raise UsageError(f"unknown case {self.case!r}; choose from {', '.join(cases.CASE_NAMES)}")
        if self.k not in (1, 2, 3):
            raise UsageError("k must be 1, 2 or 3")
        if self.mode not in ("uniform", "adaptive"):
            raise UsageError("mode must be uniform or adaptive")
        if self.steps < 0:
            raise UsageError("steps must be non-negative")
        if not 0 < self.lam <= 1:
            raise UsageError("lam must lie in (0, 1]")
        for name in ("beta", "gamma_g", "gamma_s"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise UsageError(f"{name} must be non-negative")
        if self.beta is not None and self.beta == 0:
            raise UsageError("beta must be positive")
        if self.rho_max is not None and self.rho_max < 0:
            raise UsageError("rho_max must be non-negative")
        return self

    def resolved(self) -> dict:
        """Every parameter with the case defaults filled in."""
        case = cases.make_case(self.case, self.theta, self.rho_max)
        prm = case.params(self.beta, self.gamma_g, self.gamma_s).resolve(self.k)
        return {"case": self.case, "k": self.k, "mode": self.mode, "steps": self.steps, "lam": self.lam,
                "beta": prm.beta, "gamma_g": prm.gamma_g, "gamma_s": prm.gamma_s, "rho_max": case.rho0,
                "theta": case.angle, "seed": self.seed}


def _coerce(name: str, text: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise UsageError(f"unknown config key {name!r}")
    t = types[name]
    if text.strip().lower() in ("", "none", "default"):
        return None
    try:
        if "int" in t:
            return int(text)
        if "float" in t:
            return float(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {text!r}") from exc
    return text.strip()


def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(key.replace("-", "_"), value)
    return out


def config_hash(resolved: dict) -> str:
    text = "\n".join(f"{k}={resolved[k]!r}" for k in sorted(resolved))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _setup_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("adaptiga")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


# ---------------------------------------------------------------- run

def cmd_run(cfg: RunConfig) -> int:
    cfg.validate()
    resolved = cfg.resolved()
    outdir = Path(cfg.output) / f"run-{config_hash(resolved)}"
    outdir.mkdir(parents=True, exist_ok=True)
    handler = _setup_log(outdir / "run.log")
    try:
        for key in sorted(resolved):
            log.info("config %s = %r", key, resolved[key])
        case = cases.make_case(cfg.case, cfg.theta, cfg.rho_max)
        sim = case.simulation(cfg.k, beta=resolved["beta"], gamma_g=resolved["gamma_g"],
                              gamma_s=resolved["gamma_s"])

        def dump(rec, res):
            write_vtk(res.mesh, outdir / f"mesh-{rec.step:03d}.vtk", {"eta": res.indicators.eta})

        res = adaptive_loop(sim, cfg.steps, cfg.lam, mode=cfg.mode, on_step=dump)
        record = cases.ConvergenceRecord(cfg.case, cfg.k, cfg.mode, res.records, res.stop_reason)
        record.write_csv(outdir / "convergence.csv")
        write_summary(res.records, outdir / "summary.csv")
        log.info("stopped: %s", res.stop_reason)
        if len(res.records) >= 2:
            for col in ("err_L2", "err_H1", "err_energy", "estimator"):
                log.info("rate %s = %.4f", col, record.rate(col))
    finally:
        logging.getLogger("adaptiga").removeHandler(handler)
        handler.close()
    print(outdir)
    return EXIT_OK


# ---------------------------------------------------------------- constants

def parse_degree_range(text: str) -> list[int]:
    """``"1:3"``, ``"1-3"``, ``"2"`` or ``"0,1,3"``."""
    text = text.strip()
    try:
        if "," in text:
            ks = [int(t) for t in text.split(",")]
        elif ":" in text or "-" in text:
            a, b = text.replace(":", "-").split("-")
            ks = list(range(int(a), int(b) + 1))
        else:
            ks = [int(text)]
    except ValueError as exc:
        raise UsageError(f"malformed degree range {text!r}") from exc
    if not ks or min(ks) < 0 or max(ks) > 3:
        raise UsageError("degrees must lie in 0..3")
    return ks


def constants_rows(ks, size_ratio: float = 1.0) -> list[dict]:
    rows = []
    for k in ks:
        row = {"k": k, "C_T": compute_trace_constant(k), "C_Q": math.nan, "C_F": math.nan}
        if k >= 1:
            row["C_Q"], row["C_F"] = compute_extension_constants(k, size_ratio)
        rows.append(row)
    return rows


def cmd_constants(ks, out=None, size_ratio: float = 1.0) -> int:
    rows = constants_rows(ks, size_ratio)
    flags = {}
    for name in ("C_T", "C_Q", "C_F"):
        vals = [r[name] for r in rows if not math.isnan(r[name])]
        flags[name] = nondecreasing(vals) if len(vals) > 1 else True
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "C_T", "C_Q", "C_F"])
        for r in rows:
            w.writerow([r["k"]] + ["" if math.isnan(r[c]) else f"{r[c]:.12g}" for c in ("C_T", "C_Q", "C_F")])
        w.writerow(["nondecreasing"] + [str(flags[c]).lower() for c in ("C_T", "C_Q", "C_F")])
    finally:
        if out:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------- plot

PLOT_W, PLOT_H, MARGIN = 640, 480, 70
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    label: str
    k: int
    n: np.ndarray
    err: np.ndarray


def read_series(paths, column: str = "err_energy") -> list[Series]:
    out = []
    for path in paths:
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}") from exc
        if not rows:
            raise UsageError(f"{path}: empty CSV")
        if column not in rows[0]:
            raise UsageError(f"{path}: no column {column!r}")
        groups: dict = {}
        for r in rows:
            groups.setdefault((r["case"], r["k"], r["mode"]), []).append(r)
        for (case, k, mode), rs in groups.items():
            n = np.array([float(r["n_dofs"]) for r in rs])
            e = np.array([float(r[column]) for r in rs])
            keep = (n > 0) & (e > 0) & np.isfinite(e)
            if keep.any():
                out.append(Series(f"{case} k={k} {mode}", int(k), n[keep], e[keep]))
    if not out:
        raise UsageError("no plottable data")
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(series: list[Series], column: str = "err_energy") -> str:
    """Self-contained log-log plot with slope triangles for ``k/2`` and ``(k+1)/2``."""
    lx = np.log10(np.concatenate([s.n for s in series]))
    ly = np.log10(np.concatenate([s.err for s in series]))
    x0, x1 = math.floor(lx.min()), math.ceil(lx.max())
    y0, y1 = math.floor(ly.min()), math.ceil(ly.max())
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
    pw, ph = PLOT_W - 2 * MARGIN, PLOT_H - 2 * MARGIN

    def px(v):
        return MARGIN + (v - x0) / (x1 - x0) * pw

    def py(v):
        return PLOT_H - MARGIN - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" '
           f'viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="12">',
           f'<rect class="frame" x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for d in range(x0, x1 + 1):
        out.append(f'<line class="grid" x1="{_fmt(px(d))}" y1="{MARGIN}" x2="{_fmt(px(d))}" '
                   f'y2="{PLOT_H - MARGIN}" stroke="#ddd"/>')
        out.append(f'<text class="tick" x="{_fmt(px(d))}" y="{PLOT_H - MARGIN + 18}" '
                   f'text-anchor="middle">1e{d}</text>')
    for d in range(y0, y1 + 1):
        out.append(f'<line class="grid" x1="{MARGIN}" y1="{_fmt(py(d))}" x2="{PLOT_W - MARGIN}" '
                   f'y2="{_fmt(py(d))}" stroke="#ddd"/>')
        out.append(f'<text class="tick" x="{MARGIN - 8}" y="{_fmt(py(d) + 4)}" text-anchor="end">1e{d}</text>')
    out.append(f'<text class="xlabel" x="{PLOT_W / 2:.2f}" y="{PLOT_H - 20}" text-anchor="middle">n_dofs</text>')
    out.append(f'<text class="ylabel" x="18" y="{PLOT_H / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {PLOT_H / 2:.2f})">{column}</text>')
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(np.log10(s.n), np.log10(s.err)))
        out.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in zip(np.log10(s.n), np.log10(s.err)):
            out.append(f'<circle class="marker" cx="{_fmt(px(a))}" cy="{_fmt(py(b))}" r="3" fill="{color}"/>')
        ly_ = MARGIN + 16 + 16 * i
        out.append(f'<line class="legend-key" x1="{PLOT_W - MARGIN - 170}" y1="{ly_ - 4}" '
                   f'x2="{PLOT_W - MARGIN - 150}" y2="{ly_ - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{PLOT_W - MARGIN - 145}" y="{ly_}">{s.label}</text>')
    # slope triangles anchored at the lower left, one pair per degree
    for j, k in enumerate(sorted({s.k for s in series})):
        for m, slope in enumerate((0.5 * k, 0.5 * (k + 1))):
            ax = x0 + 0.15 * (x1 - x0) + 0.3 * m * (x1 - x0) / 2
            ay = y0 + 0.1 * (y1 - y0) + 0.12 * j * (y1 - y0)
            run = 0.5
            tri = [(ax, ay + slope * run), (ax + run, ay), (ax, ay)]
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in tri)
            out.append(f'<polygon class="slope-triangle" data-slope="{-slope:g}" points="{pts}" '
                       f'fill="none" stroke="#555" stroke-dasharray="3,2"/>')
            out.append(f'<text class="slope-label" x="{_fmt(px(ax) - 4)}" y="{_fmt(py(ay + slope * run / 2))}" '
                       f'text-anchor="end">{-slope:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(paths, out: str, column: str = "err_energy") -> int:
    svg = render_svg(read_series(paths, column), column)
    Path(out).write_text(svg)
    return EXIT_OK


# ---------------------------------------------------------------- scan flow

def cmd_scan_flow(args) -> int:
    path = args.image or cases.sample_image_path()
    try:
        img = cases.load_voxels(path, 1.0 / 32 if args.pixel_size is None else args.pixel_size)
    except (OSError, cases.VoxelError) as exc:
        raise UsageError(str(exc)) from exc
    if args.pixel_size is None:
        img = cases.VoxelImage(img.values, 1.0 / max(img.width, img.height))
    ls = cases.smooth_levelset(img, args.threshold)
    flow = cases.scan_flow_case(ls, cases.scan_grid(img, args.divisions), k=args.k, rho0=args.rho_max,
                                p_bar=args.p_bar, mu=args.mu, beta=args.beta)
    rows = []

    def record(rec, res):
        fl = flow.fluxes(res)
        rows.append([rec.step, rec.n_dofs, rec.estimator, fl["left"], fl["right"], fl["in"]])
        log.info("step %d: dofs=%d left=%.6e right=%.6e", rec.step, rec.n_dofs, fl["left"], fl["right"])

    res = flow.run(args.steps, args.mode, args.lam, on_step=record)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "scan_flux.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "n_dofs", "estimator", "flux_left", "flux_right", "flux_in"])
        for r in rows:
            w.writerow(r[:2] + [f"{v:.17g}" for v in r[2:]])
    write_vtk(res.final.mesh, outdir / "scan_mesh.vtk", {"eta": res.final.indicators.eta})
    print(outdir / "scan_flux.csv")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptiga", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="uniform or adaptive convergence run on a catalog case")
    r.add_argument("--config", help="key=value file; flags override it")
    r.add_argument("--case")
    r.add_argument("--k", type=int)
    r.add_argument("--mode", choices=("uniform", "adaptive"))
    r.add_argument("--steps", type=int)
    r.add_argument("--lam", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--gamma-g", dest="gamma_g", type=float)
    r.add_argument("--gamma-s", dest="gamma_s", type=float)
    r.add_argument("--rho-max", dest="rho_max", type=int)
    r.add_argument("--theta", type=float)
    r.add_argument("--output")
    r.add_argument("--seed", type=int)

    c = sub.add_parser("constants", help="table of the stability constants")
    c.add_argument("--k-range", default="1:3")
    c.add_argument("--size-ratio", type=float, default=1.0)
    c.add_argument("--out")

    pl = sub.add_parser("plot", help="log-log SVG of convergence CSVs")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", default="convergence.svg")
    pl.add_argument("--column", default="err_energy")

    s = sub.add_parser("scan-flow", help="Stokes flow through a voxel image channel")
    s.add_argument("--image")
    s.add_argument("--pixel-size", type=float)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--divisions", type=int, default=8)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--rho-max", dest="rho_max", type=int, default=8)
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--mode", choices=("uniform", "adaptive"), default="adaptive")
    s.add_argument("--lam", type=float, default=0.8)
    s.add_argument("--p-bar", dest="p_bar", type=float, default=1.0)
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=100.0)
    s.add_argument("--output", default="scan")
    return p


def run_config_from_args(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values = {k: v for k, v in values.items() if v is not None}
    return RunConfig(**values)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for h in logging.getLogger().handlers:
        h.setLevel(level)
    try:
        if args.command == "run":
            return cmd_run(run_config_from_args(args))
        if args.command == "constants":
            return cmd_constants(parse_degree_range(args.k_range), args.out, args.size_ratio)
        if args.command == "plot":
            return cmd_plot(args.csv, args.out, args.column)
        if args.command == "scan-flow":
            return cmd_scan_flow(args)
    except (UsageError, cases.CaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
