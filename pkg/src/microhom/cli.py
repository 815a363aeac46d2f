"""Command line front-end.

Exit codes: 0 success, 2 precondition or usage failure, 3 a numerical
acceptance check failed (the failing check is named on stderr).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels
from .config import StudyConfig, field_callable, load_config, parse_list, two_scale_callable
from .errors import ConvergenceError, MicrohomError, PreconditionError, ShiftSelectionError
from .fields import Grid, VectorField, write_field

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("microhom")


class NumericalFailure(Exception):
    pass


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([fmt(v) for v in r])


def _setup_log(out: Path, name):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(out / f"{name}.log", mode="w", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)


def build_input(cfg: StudyConfig):
    """RecoveryInput from the config: built-in scenario or field files."""
    from .geometry import build_cell
    from .recovery import RecoveryInput
    from .scenarios import scenario

    if cfg.m_tilde_path:
        from .fields import read_field
        from .unfolding import read_two_scale

        mt = read_field(cfg.m_tilde_path)
        cell = build_cell(cfg.holes, cfg.micro_n)
        if cfg.w_path:
            w = two_scale_callable(read_two_scale(cfg.w_path))
        else:
            w = lambda x, z: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(z)))
        from .fields import gradient

        g = gradient(mt, interior=True)
        jac = field_callable(VectorField(mt.grid, g.data))
        inp = RecoveryInput(field_callable(mt), w, cell, None, True,
                            lambda x: jac(x).reshape(np.shape(x)[:-1] + (3, 3)), "files")
        return inp, {}
    sc = scenario(cfg.scenario, cfg.holes, cfg.micro_n, **cfg.scenario_params)
    return sc.input, sc.params


# ---------------------------------------------------------------------------
# subcommands


def cmd_unfold_check(cfg, out, args):
    from .geometry import build_cell, build_composite, unfold_mask_check
    from .unfolding import gradient_commutation_residual, isometry_residual

    omega = Grid.unit(cfg.macro_n)
    cell = build_cell(cfg.holes, cfg.micro_n)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    rows, bad = [], []
    for eps in cfg.eps:
        u = VectorField(omega, rng.standard_normal(tuple(omega.n) + (3,)))
        iso = isometry_residual(u, eps, relative=True)
        try:
            mask = unfold_mask_check(build_composite(cell, eps, omega))
        except PreconditionError as exc:
            log.info("mask check skipped at eps=%s: %s", eps, exc)
            mask = float("nan")
        x = omega.points()
        aff = VectorField(omega, x @ np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0], [-2.0, 1.0, 0.25]]))
        gc = gradient_commutation_residual(aff, eps)
        rows.append([eps, iso, mask, gc])
        if iso > 1e-12 or gc > 1e-10 or mask > 0:
            bad.append(f"eps={eps}")
    write_csv(out / "unfold_check.csv", ["eps", "isometry_rel", "mask_dev", "grad_commutation"], rows)
    if bad:
        raise NumericalFailure("unfolding identities violated at " + ", ".join(bad))


def cmd_cell_solve(cfg, out, args):
    from .cellsolve import cell_tensor, solve_cell_poisson
    from .geometry import build_cell

    rows = []
    n = cfg.fhom_n if cfg.fhom_n else cfg.micro_n
    for nn in sorted({n, cfg.micro_n}):
        cell = build_cell(cfg.holes, nn)
        for disc in ("fd", "spectral"):
            try:
                t = cell_tensor(cell, disc)
            except ConvergenceError as exc:
                # the collocation scheme is poorly conditioned on fine grids;
                # it is an alternative, so report instead of failing
                log.warning("%s tensor at n=%d: %s", disc, nn, exc)
                rows.append([disc, nn] + [float("nan")] * 12 + [len(exc.residual_history) - 1])
                continue
            rows.append([disc, nn, *t.A.ravel(), *t.q, t.iterations])
    write_csv(out / "cell_tensor.csv", ["discretization", "n"] + [f"A{i}{j}" for i in range(1, 4) for j in range(1, 4)]
              + ["q1", "q2", "q3", "iterations"], rows)
    # manufactured Poisson solution
    g = Grid.unit(32)
    z = g.points()
    r = np.sin(2 * np.pi * z[..., 0]) * np.sin(4 * np.pi * z[..., 1])
    rhs = VectorField(g, (20 * np.pi**2 * r)[..., None])
    sol = solve_cell_poisson(rhs)
    err = float(np.linalg.norm(sol.data[..., 0] - r) / np.linalg.norm(r))
    write_csv(out / "poisson.csv", ["n", "relative_error"], [[32, err]])
    if err > 1e-10:
        raise NumericalFailure(f"manufactured Poisson error {err:.3e} > 1e-10")


def cmd_fhom(cfg, out, args):
    from .cellsolve import fhom, fhom_closed_form, fhom_dense_oracle
    from .geometry import build_cell

    cell = build_cell(cfg.holes, cfg.fhom_n)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    cases = []
    if cfg.fhom_s is not None and cfg.fhom_xi is not None:
        cases.append((np.asarray(cfg.fhom_s), np.asarray(cfg.fhom_xi).reshape(3, 3)))
    for _ in range(cfg.fhom_samples):
        s = rng.standard_normal(3)
        cases.append((s / np.linalg.norm(s), rng.standard_normal((3, 3))))
    rows, worst = [], 0.0
    for s, xi in cases:
        s = s / np.linalg.norm(s)
        cg = fhom(s, xi, cell)
        dense, _ = fhom_dense_oracle(s, xi, cell)
        cf = fhom_closed_form(s, xi, cell)
        rel = abs(cg.value - dense) / max(1.0, abs(dense))
        worst = max(worst, rel)
        rows.append([*s, *np.ravel(xi), cg.value, dense, rel, cg.iterations, cf.value, cf.discrepancy, cf.status])
    write_csv(out / "fhom.csv", ["s1", "s2", "s3"] + [f"xi{i}{j}" for i in range(1, 4) for j in range(1, 4)]
              + ["fhom_cg", "fhom_dense", "rel_diff", "iterations", "closed_form", "closed_form_discrepancy", "closed_form_status"], rows)
    if worst > 1e-8:
        raise NumericalFailure(f"CG and dense oracle differ by {worst:.3e} > 1e-8")


def cmd_demag(cfg, out, args):
    from .demag import ball_magnetisation, hd, maxwell_residuals, self_energy

    g = Grid.unit(cfg.demag_n)
    m = ball_magnetisation(g, radius=cfg.demag_radius)
    sol = hd(m, cfg.pad)
    h = sol.restrict().data
    x = g.points()
    core = np.sum((x - 0.5) ** 2, axis=-1) < (0.5 * cfg.demag_radius) ** 2
    hz = float(np.mean(h[core][:, 2]))
    rel = float(np.max(np.linalg.norm(h[core] - [0.0, 0.0, -1.0 / 3.0], axis=-1))) * 3.0
    e_f, e_p = self_energy(m, sol)
    div, curl = maxwell_residuals(m, sol)
    ident = abs(e_f - e_p)
    write_csv(out / "demag.csv", ["n", "pad", "radius", "hz_core", "max_rel_dev_core", "energy_field", "energy_pairing",
                                  "identity_residual", "div_residual", "curl_residual"],
              [[cfg.demag_n, cfg.pad, cfg.demag_radius, hz, rel, e_f, e_p, ident, div, curl]])
    if rel > 0.03:
        raise NumericalFailure(f"ball core field deviates by {rel:.2%} (> 3%)")
    if ident > 1e-6 * max(1.0, e_f):
        raise NumericalFailure(f"energy identity residual {ident:.3e}")


def cmd_recover(cfg, out, args):
    from .recovery import run_recovery
    from .unfolding import write_two_scale

    inp, _ = build_input(cfg)
    omega = Grid.unit(cfg.macro_n)
    seq = run_recovery(inp, cfg.eps, omega, cfg.delta, cfg.seed, cfg.j_max, trials=cfg.trials)
    rows = []
    for k, st in enumerate(seq.steps):
        rows.append([st.eps, st.j, st.d1, st.d2, st.d3, st.target_norm, st.sphere_residual, st.singular_count,
                     st.shift.margin, st.vol_V, st.vol_A, st.vol_W, st.projected_mass, st.projection.grad_ratio])
        if cfg.dump:
            write_field(out / f"m_{k}.tsf1", st.m)
    write_csv(out / "recover.csv", ["eps", "j", "d1", "d2", "d3", "target_norm", "sphere_residual", "singular_count",
                                    "shift_margin", "vol_V", "vol_A", "vol_W", "projected_mass", "grad_ratio"], rows)
    for name in ("d1", "d2", "d3"):
        col = seq.column(name)
        if any(b >= a for a, b in zip(col, col[1:])):
            raise NumericalFailure(f"distance {name} not strictly decreasing: {col}")
    if max(seq.column("sphere_residual")) > 1e-12:
        raise NumericalFailure("unit-norm constraint violated")


def cmd_gamma_study(cfg, out, args):
    from .energies import STUDY_COLUMNS, gamma_study

    inp, params = build_input(cfg)
    omega = Grid.unit(cfg.macro_n)
    st = gamma_study(inp, cfg.eps, omega, cfg.delta, cfg.seed, cfg.pad, cfg.j_max, cfg.limit_micro_n,
                     cfg.limit_quad_eps, cfg.trials)
    write_csv(out / "gamma_study.csv", STUDY_COLUMNS, [r.values() for r in st.rows])
    write_csv(out / "pairings.csv", ["eps", "test_function", "unfolded", "limit"], st.pairings)
    L = st.limit
    write_csv(out / "limit.csv", ["F0", "F1", "W_macro", "W_micro", "orthogonality", "G"],
              [[L.F0, L.F1, L.W_macro, L.W_micro, L.orthogonality, L.total]])
    if not st.claim:
        log.info("input not saturated: no gap claim")
        return
    gap = st.column("gap")
    if any(b >= a for a, b in zip(gap, gap[1:])):
        raise NumericalFailure(f"gap column not decreasing: {list(gap)}")
    if gap[-1] > cfg.gap_tol * abs(L.total):
        raise NumericalFailure(f"final relative gap {gap[-1] / abs(L.total):.3%} above {cfg.gap_tol:.0%}")


def cmd_scenario_dump(cfg, out, args):
    from .scenarios import scenario
    from .unfolding import sample_two_scale, write_two_scale

    sc = scenario(cfg.scenario, cfg.holes, cfg.micro_n, **cfg.scenario_params)
    omega = Grid.unit(cfg.macro_n)
    write_field(out / "m_tilde.tsf1", VectorField.from_function(omega, sc.input.m_tilde))
    rows = []
    for k, eps in enumerate(cfg.eps):
        w = sample_two_scale(lambda x, z: sc.cell.indicator(z)[..., None] * np.asarray(sc.input.w(x, z)), omega, eps)
        write_two_scale(out / f"w_{k}.ts2f", w)
        tgt = sample_two_scale(sc.input.target, omega, eps)
        chi = sc.cell.resample(w.micro_n).chi0
        dev = np.abs(np.linalg.norm(tgt.data, axis=-1) - 1.0) * chi
        cw = tgt.cell_weights()[..., None, None, None] / np.prod(w.micro_n)
        rows.append([eps, float(np.sqrt(np.sum(cw * dev**2))), float(dev.max())])
    write_csv(out / "scenario.csv", ["eps", "saturation_defect_l2", "saturation_defect_max"], rows)
    with open(out / "scenario.json", "w", encoding="utf-8") as fh:
        json.dump({"name": sc.name, "params": {k: v for k, v in sc.params.items() if isinstance(v, (int, float, bool, str, tuple))}},
                  fh, indent=1, sort_keys=True)


COMMANDS = {
    "unfold-check": cmd_unfold_check,
    "cell-solve": cmd_cell_solve,
    "fhom": cmd_fhom,
    "demag": cmd_demag,
    "recover": cmd_recover,
    "gamma-study": cmd_gamma_study,
    "scenario-dump": cmd_scenario_dump,
}


def make_parser():
    p = argparse.ArgumentParser(prog="microhom", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI study configuration")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="numba worker threads")
    p.add_argument("--pad", type=float, help="stray-field padding factor (>= 2)")
    p.add_argument("--delta", type=float, help="projection threshold delta in (0, 1/2)")
    p.add_argument("--eps-list", help="comma separated eps values, e.g. 1/4,1/8")
    return p


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PRECONDITION
    try:
        cfg = load_config(args.config) if args.config else StudyConfig()
        for name in ("seed", "pad", "delta", "out"):
            v = getattr(args, name)
            if v is not None:
                setattr(cfg, name, v)
        if args.eps_list:
            cfg.eps = parse_list(args.eps_list)
        cfg.validate()
        _kernels.set_threads(args.threads)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _setup_log(out, args.command.replace("-", "_"))
        log.info("start %s config=%s backend=%s", args.command, cfg.source, _kernels.BACKEND)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, out, args)
        log.info("done in %.2f s", time.perf_counter() - t0)
        return EXIT_OK
    except (NumericalFailure, ConvergenceError, ShiftSelectionError) as exc:
        log.error("numerical check failed: %s", exc)
        print(f"microhom {args.command}: numerical check failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PreconditionError, MicrohomError, OSError) as exc:
        print(f"microhom {args.command}: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
