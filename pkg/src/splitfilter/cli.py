"""Command line entry point: ``splitfilter run | compare | oracle``.

Run directory layout::

    config.txt               replayable config snapshot (seed included)
    observations.csv         t, y, dy, signal
    diagnostics.csv          one row per step
    posteriors/step_NNN.csv  x, prior, likelihood, posterior on the export grid
    training/step_NNN.csv    epoch, loss, lr, l2_ref
    checkpoints/step_NNN.sfnn
    oracle-<kind>/...        oracle output in the same posterior format
    plots/*.png              with --plots
    ERROR                    present only if the run aborted
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import ExperimentConfig
from .diagnostics import density_moments, l2_grid_error, write_diagnostics
from .filter import FilterAborted, StepResult, exact_solution, run_filter, simulate
from .model import ConfigurationError
from .nn import save_checkpoint
from .reference import fk_pointwise_reference, reference_points
from .sde import ObservationPath, SignalPath

log = logging.getLogger("splitfilter")

POSTERIOR_COLUMNS = ["x", "prior", "likelihood", "posterior"]


# -- writers ----------------------------------------------------------------

def _r(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_grid_csv(path: Path, x: np.ndarray, prior, likelihood, posterior) -> None:
    cols = [np.full(x.size, np.nan) if c is None else np.asarray(c, dtype=float)
            for c in (prior, likelihood, posterior)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSTERIOR_COLUMNS)
        for i in range(x.size):
            w.writerow([repr(float(x[i]))] + [_r(c[i]) for c in cols])


def read_grid_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) if r[c] else np.nan for r in rows]) for c in POSTERIOR_COLUMNS}


def write_observations(path: Path, obs: ObservationPath, signal: Optional[SignalPath]) -> None:
    sig = signal.at_observation_times()[:, 0] if signal is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "dy", "signal"])
        for n, t in enumerate(obs.times):
            dy = obs.increment(n)[0] if n > 0 else math.nan
            w.writerow([repr(float(t)), repr(float(obs.values[n, 0])), _r(dy),
                        _r(None if sig is None else sig[n])])


class RunWriter:
    """Streams per-step artifacts so an aborted run leaves its finished steps."""

    def __init__(self, out: Path, plots: bool):
        self.out = out
        self.plots = plots
        for sub in ("posteriors", "training", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        if plots:
            (out / "plots").mkdir(exist_ok=True)

    def step(self, s: StepResult) -> None:
        n = s.diagnostics.step
        x = s.grid
        write_grid_csv(self.out / "posteriors" / f"step_{n:03d}.csv", x, s.prior_values,
                       s.posterior.likelihood(x[:, None]), s.posterior_values)
        s.report.to_csv(self.out / "training" / f"step_{n:03d}.csv")
        save_checkpoint(self.out / "checkpoints" / f"step_{n:03d}.sfnn", s.posterior.prior)

    def finish(self, result, oracle_values: Optional[list[np.ndarray]] = None) -> None:
        write_diagnostics(self.out / "diagnostics.csv", result.diagnostics)
        if not self.plots or not result.steps:
            return
        from . import plotting

        rows = result.diagnostics
        x = result.steps[0].grid
        times = np.array([r.time for r in rows])
        dens = np.array([s.posterior_values for s in result.steps])
        em = np.array([np.nan if r.exact_mean is None else r.exact_mean for r in rows])
        es = np.array([np.nan if r.exact_std is None else r.exact_std for r in rows])
        plotting.evolution_heatstrip(times, x, dens, self.out / "plots" / "evolution.png",
                                     signal=np.array([r.signal for r in rows]),
                                     exact_mean=em, exact_std=es, title=result.config.preset)
        plotting.diagnostics_panel(rows, self.out / "plots" / "diagnostics.png",
                                   title=result.config.preset)
        for i, s in enumerate(result.steps):
            ref = None if s.reference is None else (s.reference.points, s.reference.values)
            exact = None if oracle_values is None else oracle_values[i + 1]
            plotting.step_snapshot(x, s.prior_values, s.posterior_values,
                                   self.out / "plots" / f"step_{s.diagnostics.step:03d}.png",
                                   reference=ref, exact=exact, signal=s.diagnostics.signal,
                                   title=f"t = {s.diagnostics.time:.3f}")


def oracle_grids(cfg: ExperimentConfig, kind: str, obs: ObservationPath,
                 result_steps: Optional[Sequence[StepResult]] = None
                 ) -> list[tuple[Optional[np.ndarray], Optional[np.ndarray]]]:
    """Per-time (prior, posterior) values on the export grid, index 0 = initial."""
    x = cfg.domain.grid(cfg.export_points)
    if kind == "kalman":
        if cfg.model != "linear":
            raise ConfigurationError("the Kalman-Bucy oracle needs the linear model")
        states, _ = exact_solution(cfg, obs)
        out = []
        for st in states:
            m, s = float(st.mean[0]), float(st.std[0])
            out.append((None, np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))))
        return out
    if kind == "grid":
        from .reference import grid_splitting_filter

        dens = grid_splitting_filter(cfg.build_model(), cfg.domain, obs, cfg.init_mean,
                                     cfg.init_std, cfg.oracle_dx)
        return [(None, d.on(x)) for d in dens]
    if kind == "fk":
        # Prior at each step from the previous neural posterior (or the initial density).
        from .filter import GaussianDensity

        model = cfg.build_model()
        psi = GaussianDensity(cfg.init_mean, cfg.init_std, cfg.domain)
        pts = reference_points(cfg.domain, cfg.reference_points)
        out = [(None, None)]
        paths = max(cfg.reference_paths, 100)
        last = 1 if not result_steps else len(result_steps)
        for n in range(1, min(obs.times.size - 1, last) + 1):
            if n > 1:
                psi = result_steps[n - 2].posterior
            vals, _ = fk_pointwise_reference(model, psi, pts, (obs.times[n - 1], obs.times[n]),
                                             paths, cfg.seed, cfg.substeps, step=n)
            out.append((np.interp(x, pts[:, 0], vals), None))
        return out
    raise ConfigurationError(f"unknown oracle {kind!r}")


def write_oracle(out: Path, cfg: ExperimentConfig, kind: str, grids) -> Path:
    d = out / f"oracle-{kind}"
    (d / "posteriors").mkdir(parents=True, exist_ok=True)
    x = cfg.domain.grid(cfg.export_points)
    for n, (prior, post) in enumerate(grids):
        if n == 0:
            continue
        write_grid_csv(d / "posteriors" / f"step_{n:03d}.csv", x, prior, None, post)
    return d


# -- subcommands ------------------------------------------------------------

def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    elif args.preset:
        cfg = cfgmod.preset(args.preset)
    else:
        raise ConfigurationError("give --preset or --config")
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        kw["steps"] = args.steps
    cfg = cfg.with_overrides(**kw)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.with_budget(args.epochs)
    return cfg


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ERROR").unlink(missing_ok=True)
    cfgmod.dump(cfg, out / "config.txt")
    signal, obs = simulate(cfg)
    write_observations(out / "observations.csv", obs, signal)
    writer = RunWriter(out, args.plots)
    status = 0
    try:
        result = run_filter(cfg, obs, signal, on_step=writer.step)
    except FilterAborted as exc:
        result = exc.result
        (out / "ERROR").write_text(str(exc) + "\n")
        log.error("run aborted: %s", exc)
        status = 3
    oracle_post = None
    if args.oracle:
        grids = oracle_grids(cfg, args.oracle, obs, result.steps)
        write_oracle(out, cfg, args.oracle, grids)
        if args.oracle != "fk":
            oracle_post = [g[1] for g in grids]
    writer.finish(result, oracle_post)
    print(f"{len(result.steps)} steps written to {out}")
    return status


def cmd_oracle(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "fk":
        raise ConfigurationError("the fk oracle needs a neural run; use 'run --oracle fk'")
    signal, obs = simulate(cfg)
    write_observations(out / "observations.csv", obs, signal)
    d = write_oracle(out, cfg, args.kind, oracle_grids(cfg, args.kind, obs))
    print(f"oracle output written to {d}")
    return 0


def _step_files(run_dir: Path) -> dict[int, Path]:
    files = sorted((run_dir / "posteriors").glob("step_*.csv"))
    return {int(p.stem.split("_")[1]): p for p in files}


def compare_runs(a: Path, b: Path) -> list[dict]:
    fa, fb = _step_files(a), _step_files(b)
    if not fa or not fb:
        raise ConfigurationError("both directories need posteriors/step_*.csv")
    rows = []
    for n in sorted(set(fa) & set(fb)):
        ga, gb = read_grid_csv(fa[n]), read_grid_csv(fb[n])
        if ga["x"].shape != gb["x"].shape or not np.allclose(ga["x"], gb["x"], rtol=0, atol=1e-12):
            raise ConfigurationError(f"step {n}: incompatible grids")
        dx = float(ga["x"][1] - ga["x"][0])
        ma = density_moments(ga["posterior"], dx, float(ga["x"][0]))
        mb = density_moments(gb["posterior"], dx, float(gb["x"][0]))
        rows.append({
            "step": n,
            "l2": l2_grid_error(ga["posterior"], gb["posterior"], dx),
            "mean_diff": abs(ma[1] - mb[1]),
            "std_diff": abs(ma[2] - mb[2]),
        })
    return rows


def cmd_compare(args) -> int:
    rows = compare_runs(Path(args.run_a), Path(args.run_b))
    w = csv.writer(sys.stdout)
    w.writerow(["step", "l2", "mean_diff", "std_diff"])
    for r in rows:
        w.writerow([r["step"], repr(r["l2"]), repr(r["mean_diff"]), repr(r["std_diff"])])
    if not args.criteria:
        return 0
    limits = {}
    for lineno, line in enumerate(Path(args.criteria).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, _, raw = (s.strip() for s in body.partition("="))
        if key not in ("max_l2", "max_mean_diff", "max_std_diff"):
            raise ConfigurationError(f"{args.criteria}:{lineno}: unknown key {key!r}")
        limits[key[4:]] = float(raw)
    failed = [(r["step"], k, r[k], lim) for r in rows for k, lim in limits.items() if r[k] > lim]
    for step, k, v, lim in failed:
        print(f"step {step}: {k} = {v:.4g} exceeds {lim:.4g}", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitfilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--steps", type=int, help="truncate to the first N observation steps")

    run = sub.add_parser("run", help="run the neural filter")
    common(run)
    run.add_argument("--epochs", type=int,
                     help="training budget per step (learning-rate cutoffs scale with it)")
    run.add_argument("--oracle", choices=("kalman", "grid", "fk"))
    run.add_argument("--plots", action="store_true", help="write PNG figures")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="run a reference filter only")
    common(orc)
    orc.add_argument("--kind", choices=("kalman", "grid"), default="grid")
    orc.set_defaults(func=cmd_oracle)

    cmp_ = sub.add_parser("compare", help="compare posterior grids of two run directories")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--criteria", help="file with max_l2 / max_mean_diff / max_std_diff")
    cmp_.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
