"""Acceptance checks, one per criterion.

Each ``check_cN`` returns ``(passed, detail)``. Under pytest every check
logs one ``[PASS]``/``[FAIL]`` line (collected in the terminal summary) and
asserts. Run the file directly to print the lines without pytest.
"""

import functools
import math
import sys

import numpy as np
import pytest

from icl_align.alignment import ruhe_bounds
from icl_align.covariance import (
    CovarianceSpec,
    from_matrix,
    make_isotropic,
    make_lowrank,
    make_powerlaw,
    make_spike,
    make_uniform_linear,
    random_rotation,
)
from icl_align.exceptions import BoundaryError
from icl_align.simulator import (
    SimConfig,
    empirical_test_error,
    fit_gamma,
    sample_batch,
    sample_tasks,
    simulate_many,
    substream,
)
from icl_align.theory import (
    ModelParams,
    errors_from_solution,
    gamma_equivalent_diag,
    icl_error_limit,
    isotropic_stieltjes,
    k_spectrum,
    solve_lambda_tilde,
    solve_self_consistent,
    stieltjes_m,
    theory_errors,
)

# tolerances, as stated in the criteria
C1_SE_FACTOR, C1_REL = 3.0, 0.05
C2_ABS = 1e-10
C3_REL = 0.01
C4_RESIDUAL = 1e-10
C5_EXACT = 1e-12
C8_REL = 1e-2
C9_CONST = 1e-10
C10_SE_FACTOR = 3.0
C11_DIAG_REL, C11_RMS_RATIO = 0.05, 0.10

FIG1 = dict(alpha=2.0, tau=4.0, rho=0.01)
FIG1_D = 60
FIG1_KAPPAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _fig1_tests(d):
    train = make_uniform_linear(d)
    return train, [("train", train), ("spike 1", make_spike(d, 1)), (f"spike {d}", make_spike(d, d))]


@functools.lru_cache(maxsize=None)
def _figure1_run(kappa):
    """20 replicates at d=60; the kappa=1 run keeps the mean Gamma for C11."""
    d = FIG1_D
    train, tests = _fig1_tests(d)
    p = ModelParams(kappa=kappa, **FIG1)
    cfg = SimConfig(d, p, train, train, n_test_contexts=2000, replicates=20, seed=0, ridge=1e-5)
    run = simulate_many(cfg, [("ICL", t) for _, t in tests], keep_gamma=kappa == 1.0)
    sol = solve_self_consistent(p, train)
    theory = [errors_from_solution(sol, p, train, t).e_icl for _, t in tests]
    return run, theory, sol


def check_c1(kappas=FIG1_KAPPAS):
    _, tests = _fig1_tests(FIG1_D)
    bad, worst = [], 0.0
    for kappa in kappas:
        run, theory, _ = _figure1_run(kappa)
        for i, (name, _) in enumerate(tests):
            r = run.results[i]
            gap = abs(r.mse_mean - theory[i])
            tol = max(C1_SE_FACTOR * r.mse_stderr, C1_REL * theory[i])
            worst = max(worst, gap / tol)
            if gap > tol:
                bad.append(f"kappa={kappa} {name}: sim {r.mse_mean:.4g}+-{r.mse_stderr:.2g} "
                           f"theory {theory[i]:.4g}")
    n = len(kappas) * len(tests)
    detail = f"{n - len(bad)}/{n} cells within max(3 SE, 5%); worst gap/tol {worst:.2f}"
    if bad:
        detail += "; failing: " + "; ".join(bad)
    return not bad, detail


def check_c2():
    worst = 0.0
    for kappa in (0.25, 0.5, 1.0, 2.0, 4.0):
        for sigma in (0.01, 0.1, 1.0, 10.0):
            m, _ = stieltjes_m(np.ones(16), kappa, sigma)
            worst = max(worst, abs(m - isotropic_stieltjes(1.0, kappa, sigma)))
    return worst <= C2_ABS, f"20 grid points, max |dM| = {worst:.2e}"


def _resolvent_trace(tasks, d, sigma):
    k = tasks.shape[0]
    if k >= d:
        ev = np.linalg.eigvalsh(tasks.T @ tasks / k)
    else:
        ev = np.concatenate([np.linalg.eigvalsh(tasks @ tasks.T / k), np.zeros(d - k)])
    return np.mean(1.0 / (ev + sigma))


def check_c3(d=400, draws=200):
    worst, lines = 0.0, []
    for name, train in (("powerlaw 0.9", make_powerlaw(d, 0.9)), ("isotropic", make_isotropic(d))):
        for kappa in (0.5, 1.0, 2.0):
            k = int(round(kappa * d))
            acc = {0.3: 0.0, 1.0: 0.0}
            for j in range(draws):
                tasks = sample_tasks(train, k, substream(3, j, 0))
                for sigma in acc:
                    acc[sigma] += _resolvent_trace(tasks, d, sigma) / draws
            for sigma, emp in acc.items():
                rel = abs(emp / stieltjes_m(train.spectrum, kappa, sigma)[0] - 1)
                worst = max(worst, rel)
                if rel > C3_REL:
                    lines.append(f"{name} kappa={kappa} sigma={sigma}: {rel:.3%}")
    detail = f"12 cells, worst relative gap {worst:.3%}"
    if lines:
        detail += "; failing: " + "; ".join(lines)
    return not lines, detail


def _random_train(rng, d):
    choice = rng.integers(3)
    if choice == 0:
        return make_powerlaw(d, rng.uniform(0, 2))
    if choice == 1:
        return make_uniform_linear(d)
    return CovarianceSpec(np.sort(rng.uniform(0.01, 3, d))[::-1])


def check_c4(sets=100):
    rng = np.random.default_rng(4)
    nonzero, worst = 0, 0.0
    for _ in range(sets):
        train = _random_train(rng, int(rng.integers(5, 60)))
        p = ModelParams(alpha=rng.uniform(0.2, 8), tau=rng.uniform(1.01, 20),
                        kappa=rng.uniform(0.05, 8), rho=rng.uniform(0, 1))
        if solve_lambda_tilde(p, train) != 0.0:
            nonzero += 1
    for _ in range(sets):
        train = _random_train(rng, int(rng.integers(5, 60)))
        p = ModelParams(alpha=rng.uniform(0.2, 8), tau=rng.uniform(0.02, 0.99),
                        kappa=rng.uniform(0.05, 8), rho=rng.uniform(0, 1))
        sol = solve_self_consistent(p, train)
        m, _ = stieltjes_m(train.spectrum, p.kappa, sol.sigma)
        worst = max(worst, abs(sol.lambda_tilde * m - (1 - p.tau)))
    ok = nonzero == 0 and worst <= C4_RESIDUAL
    return ok, (f"tau>1: {sets - nonzero}/{sets} exact zeros; tau<1: max residual {worst:.2e}")


def check_c5(pairs=1000, d=30):
    rng = np.random.default_rng(5)
    viol, worst_eq = 0, 0.0
    for _ in range(pairs):
        x, y = rng.standard_normal((2, d, d))
        a, b = (x + x.T) / 2, (y + y.T) / 2
        lo, hi = ruhe_bounds(np.linalg.eigvalsh(a)[::-1], np.linalg.eigvalsh(b)[::-1])
        val = np.trace(a @ b) / d
        if not lo - 1e-12 <= val <= hi + 1e-12:
            viol += 1
        sa = np.sort(rng.standard_normal(d))[::-1]
        sb = np.sort(rng.standard_normal(d))[::-1]
        u = random_rotation(make_isotropic(d), rng).basis
        lo, hi = ruhe_bounds(sa, sb)
        same = np.trace(u @ np.diag(sa) @ u.T @ u @ np.diag(sb) @ u.T) / d
        rev = np.trace(u @ np.diag(sa) @ u.T @ u @ np.diag(sb[::-1]) @ u.T) / d
        worst_eq = max(worst_eq, abs(same - hi), abs(rev - lo))
    ok = viol == 0 and worst_eq <= C5_EXACT
    return ok, f"{pairs - viol}/{pairs} pairs inside bounds; codiagonal max gap {worst_eq:.1e}"


def _non_decreasing(k):
    return bool(np.all(np.diff(k) >= -1e-12 * np.max(np.abs(k))))


def check_c6(spectra=1000):
    rng = np.random.default_rng(6)
    hard_fail = 0
    for _ in range(spectra):
        d = int(rng.integers(2, 40))
        lam = np.sort(rng.uniform(0.01, 5, d))[::-1]
        while np.any(np.diff(lam) >= 0):
            lam = np.sort(rng.uniform(0.01, 5, d))[::-1]
        p = ModelParams(alpha=rng.uniform(0.2, 8), tau=rng.uniform(1 + 1e-6, 10),
                        kappa=rng.uniform(0.05, 8), rho=rng.uniform(0, 1))
        if not _non_decreasing(k_spectrum(solve_self_consistent(p, CovarianceSpec(lam)))):
            hard_fail += 1
    grid_fail = []
    grid = [(name, train, kappa, alpha, tau)
            for name, train in (("uniform_linear", make_uniform_linear(60)),
                                ("powerlaw 0.9", make_powerlaw(60, 0.9)))
            for kappa in (0.5, 1.0, 2.0, 4.0) for alpha in (0.5, 1.0, 2.0)
            for tau in (0.25, 0.5, 0.75)]
    for name, train, kappa, alpha, tau in grid:
        p = ModelParams(alpha=alpha, tau=tau, kappa=kappa, rho=0.01)
        if not _non_decreasing(k_spectrum(solve_self_consistent(p, train))):
            grid_fail.append(f"{name} kappa={kappa} alpha={alpha} tau={tau}")
    detail = (f"tau>1: {spectra - hard_fail}/{spectra} non-decreasing; "
              f"tau<1 grid: {len(grid) - len(grid_fail)}/{len(grid)} non-decreasing")
    if grid_fail:
        detail += " (exceptions: " + "; ".join(grid_fail) + ")"
    return hard_fail == 0 and not grid_fail, detail


def check_c7(d=50, interior=100):
    p = ModelParams(alpha=2.0, tau=4.0, kappa=1.0, rho=0.01)
    train = make_powerlaw(d, 0.9)
    sol = solve_self_consistent(p, train)
    vals = np.array([errors_from_solution(sol, p, train, make_spike(d, i)).e_icl
                     for i in range(1, d + 1)])
    best = int(np.argmin(vals))
    rng = np.random.default_rng(7)
    below = 0
    for _ in range(interior):
        g = rng.standard_normal((d, int(rng.integers(1, 2 * d))))
        m = g @ g.T
        test = from_matrix(m * d / np.trace(m))
        if errors_from_solution(sol, p, train, test).e_icl < vals[best] - 1e-12:
            below += 1
    ok = best == 0 and below == 0
    return ok, (f"argmin over {d} spikes = index {best + 1}; "
                f"{interior - below}/{interior} interior points >= min {vals[best]:.6g}")


def _phase_curve(train, test, kappas, a=1e3):
    full, lim = [], []
    for kappa in kappas:
        p = ModelParams(alpha=a, tau=a, kappa=kappa, rho=0.01)
        full.append(theory_errors(p, train, test).e_icl)
        try:
            lim.append(icl_error_limit(1.0, kappa, train, test, 0.01))
        except BoundaryError as exc:
            lim.append(exc.below)
    return np.array(full), np.array(lim)


def check_c8(d=80):
    kappas = np.round(np.arange(0.1, 2.0 + 1e-9, 0.05), 10)
    step = 0.05
    parts, ok = [], True
    for name, train in (("full-rank", make_uniform_linear(d)), ("half-rank", make_lowrank(d, d // 2))):
        r = train.rank() / d
        for tname, test in (("same", train), ("isotropic", make_isotropic(d))):
            full, lim = _phase_curve(train, test, kappas)
            rel = np.abs(full - lim) / lim
            curv = np.abs(np.diff(full, 2))
            kink = kappas[1 + int(np.argmax(curv))]
            good = rel.max() <= C8_REL and abs(kink - r) <= step + 1e-12
            ok &= good
            away = rel[np.abs(kappas - r) > step + 1e-12]
            parts.append(f"{name}/{tname}: max rel {rel.max():.3g} at kappa="
                         f"{kappas[int(np.argmax(rel))]:g} ({away.max():.3g} away from the kink), "
                         f"kink {kink:g} (r={r:g})")
    return ok, "; ".join(parts)


def check_c9(draws=20):
    rng = np.random.default_rng(9)
    grid = np.logspace(np.log2(0.25), 4, 25, base=2)
    mono_fail, worst = 0, 0.0
    for _ in range(draws):
        d = int(rng.integers(10, 80))
        train = _random_train(rng, d)
        test = random_rotation(make_powerlaw(d, rng.uniform(0, 2)), rng)
        tau = rng.uniform(0.1, 10)
        if abs(tau - 1) < 0.05:
            tau += 0.1
        p = ModelParams(alpha=rng.uniform(0.2, 8), tau=tau, kappa=rng.uniform(0.05, 8),
                        rho=rng.uniform(0, 1))
        sol = solve_self_consistent(p, train)
        errs = [errors_from_solution(sol, p.replace(alpha_test=a), train, test) for a in grid]
        e = np.array([x.e_icl for x in errs])
        if np.any(np.diff(e) > 1e-12 * np.abs(e[:-1])):
            mono_fail += 1
        scaled = np.array([(x.e_scalar - p.rho) * a for x, a in zip(errs, grid)])
        worst = max(worst, float(scaled.max() - scaled.min()))
    ok = mono_fail == 0 and worst <= C9_CONST
    return ok, (f"{draws - mono_fail}/{draws} curves non-increasing; "
                f"max spread of (e_scalar - rho) * alpha_test {worst:.1e}")


def check_c10(d=40, n_test=100_000):
    train = make_uniform_linear(d)
    p = ModelParams(kappa=1.0, **FIG1)
    cfg = SimConfig(d, p, train, train, n_test_contexts=n_test, replicates=1, seed=10)
    batch = sample_batch(cfg)
    gamma = fit_gamma(batch, d, cfg.n, cfg.lambda_used)
    parts, ok = [], True
    for mode in ("ICL", "IDG"):
        r = empirical_test_error(gamma, cfg, mode, batch.tasks)
        z = abs(r.mse_mean - r.population_mse) / r.mse_stderr
        ok &= z <= C10_SE_FACTOR
        parts.append(f"{mode}: population {r.population_mse:.5g} vs empirical "
                     f"{r.mse_mean:.5g} ({z:.2f} SE)")
    return ok, "; ".join(parts)


def check_c11():
    run, _, sol = _figure1_run(1.0)
    d = FIG1_D
    train = make_uniform_linear(d)
    u = np.eye(d) if train.basis is None else train.basis
    g = run.mean_gamma
    first = u.T @ g[:, :d] @ u
    last = u.T @ g[:, d]
    target = gamma_equivalent_diag(sol)
    rel = np.abs(np.diag(first) / target - 1)
    ratio = math.sqrt(np.mean(last ** 2)) / math.sqrt(np.mean(first ** 2))
    ok = rel.max() <= C11_DIAG_REL and ratio <= C11_RMS_RATIO
    return ok, (f"diagonal: {int(np.sum(rel <= C11_DIAG_REL))}/{d} entries within 5%, "
                f"max rel {rel.max():.3g} (entry {int(np.argmax(rel)) + 1}), "
                f"median {np.median(rel):.3g}; last-column RMS / first-block RMS {ratio:.3g}")


C12_REASON = ("nonlinear-transformer Spearman values are out of scope at desk scale; "
              "covered by C1, C6 and the alignment invariant tests")

CHECKS = {
    "C1": ("Figure-1 theory vs simulation", check_c1),
    "C2": ("isotropic closed form", check_c2),
    "C3": ("finite-d resolvent oracle", check_c3),
    "C4": ("ridgeless branch", check_c4),
    "C5": ("Ruhe bounds", check_c5),
    "C6": ("K-spectrum ordering", check_c6),
    "C7": ("optimal test vertex", check_c7),
    "C8": ("phase transition limit", check_c8),
    "C9": ("context-length monotonicity", check_c9),
    "C10": ("population risk", check_c10),
    "C11": ("deterministic equivalent of Gamma", check_c11),
}


def _line(cid, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] {cid} {CHECKS[cid][0]}: {detail}"


def _run(cid, log):
    ok, detail = CHECKS[cid][1]()
    line = _line(cid, ok, detail)
    log(line)
    print(line)
    assert ok, line


@pytest.mark.slow
def test_c1_theory_matches_simulation(acceptance_log):
    _run("C1", acceptance_log)


def test_c2_isotropic_closed_form(acceptance_log):
    _run("C2", acceptance_log)


@pytest.mark.slow
def test_c3_finite_d_resolvent(acceptance_log):
    _run("C3", acceptance_log)


def test_c4_ridgeless_branch(acceptance_log):
    _run("C4", acceptance_log)


def test_c5_ruhe_bounds(acceptance_log):
    _run("C5", acceptance_log)


def test_c6_k_ordering(acceptance_log):
    _run("C6", acceptance_log)


def test_c7_optimal_vertex(acceptance_log):
    _run("C7", acceptance_log)


def test_c8_phase_transition(acceptance_log):
    _run("C8", acceptance_log)


def test_c9_context_length(acceptance_log):
    _run("C9", acceptance_log)


def test_c10_population_risk(acceptance_log):
    _run("C10", acceptance_log)


@pytest.mark.slow
def test_c11_gamma_equivalent(acceptance_log):
    _run("C11", acceptance_log)


def test_c12_out_of_scope(acceptance_log):
    acceptance_log(f"[SKIP] C12 {C12_REASON}")
    pytest.skip(C12_REASON)


if __name__ == "__main__":
    failed = 0
    for cid, (_, fn) in CHECKS.items():
        ok, detail = fn()
        failed += not ok
        print(_line(cid, ok, detail), flush=True)
    print(f"[SKIP] C12 {C12_REASON}")
    sys.exit(1 if failed else 0)
