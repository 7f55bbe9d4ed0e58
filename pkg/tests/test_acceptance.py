"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from dpmnl import dpm_em, evaluate, lc_em, simgen
from dpmnl.choice_data import AttributeSpec
from dpmnl.mnl import UtilitySpec, fit_mnl
from dpmnl.stick_breaking import (ConcentrationPrior, GDParams, component_prior_probs,
                                  expected_occupied_components, gdm_log_marginal,
                                  sample_crp_partition, sample_stick_dp)

from cli_pipeline import run_pipeline, snapshot
from test_dpm_em import q_ascent_violations
from test_lc_em import loglik_drops
from test_mnl import gradient_relative_error

SPEC = simgen.wtp_spec()
GX = np.arange(-5.0, 35.0 + 1e-9, 0.25)
GY = np.arange(-5.0, 40.0 + 1e-9, 0.25)


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nAC{number:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def desk_fit(exp, seed=1):
    sim = simgen.simulate(simgen.experiment(exp), simgen.SimConfig(1000, 8, 3, seed))
    model = dpm_em.fit(sim.dataset, SPEC, dpm_em.DPMConfig(K=30, seed=seed))
    return sim, model


def kde_of_fit(model, seed=0):
    draws = evaluate.sample_mixture(evaluate.mixture_of(model), 2000,
                                    np.random.default_rng(seed))[:, :2]
    return evaluate.kde(draws, (GX, GY), evaluate.DEFAULT_BANDWIDTH)


def test_ac01_information_criteria(capsys):
    rows = [(6, -1457.6, 2985.2, 3129.4), (14, -1384.2, 2934.3, 3276.3)]
    bad = []
    for K, ll, aic, bic in rows:
        a, b, _ = lc_em.information_criteria_from(ll, K, 5, 455)
        if abs(a - aic) > 0.05 or abs(b - bic) > 0.05:
            bad.append(f"K={K}: AIC {a:.2f} vs {aic}, BIC {b:.2f} vs {bic}")
    verdict(capsys, 1, not bad, "; ".join(bad) or "both table rows reproduced")


def test_ac02_expected_occupied(capsys):
    e = expected_occupied_components(11.7, 455)
    verdict(capsys, 2, round(e) == 44, f"expected occupied components {e:.3f}")


def test_ac03_error_rates(capsys):
    rates = {}
    for exp in ("I", "II", "III", "IV"):
        sim = simgen.simulate(simgen.experiment(exp), simgen.SimConfig(2000, 8, 3, 1))
        rates[exp] = simgen.measure_error_rate(sim.utility, sim.chosen)
    ok = all(0.05 <= r <= 0.09 for r in rates.values())
    verdict(capsys, 3, ok, ", ".join(f"{k}={v:.4f}" for k, v in rates.items()))


def test_ac04_recovery_experiment_one(capsys):
    sim, model = desk_fit("I")
    dens = kde_of_fit(model)
    i, j = np.unravel_index(np.argmax(dens), dens.shape)
    dist = math.hypot(GX[i] - 10.0, GY[j] - 15.0)
    ll_mix = evaluate.predictive_loglik(model, sim.dataset)
    ll_mnl = fit_mnl(SPEC, sim.dataset).objective
    ok = dist <= 2.5 and ll_mix > ll_mnl and model.occupied < model.K
    verdict(capsys, 4, ok, f"mode ({GX[i]:.2f}, {GY[j]:.2f}) at distance {dist:.2f}; "
            f"mixture LL {ll_mix:.1f} vs MNL {ll_mnl:.1f}; occupied {model.occupied}/{model.K}")


def test_ac05_recovery_experiment_three(capsys):
    _, model = desk_fit("III")
    peaks = [(GX[i], GY[j]) for i, j in evaluate.local_maxima_2d(kde_of_fit(model))]
    near = [any(math.hypot(x - cx, y - cy) <= 3.0 for x, y in peaks)
            for cx, cy in ((12.0, 16.0), (6.0, 10.0))]
    verdict(capsys, 5, all(near), f"KDE local modes {[(float(x), float(y)) for x, y in peaks]}")


def test_ac06_cross_validated_ordering(capsys):
    sim = simgen.simulate(simgen.experiment("I"), simgen.SimConfig(1000, 8, 3, 1))
    data = sim.dataset
    table, _ = lc_em.sweep(data, SPEC, 1, 6, lc_em.LCConfig(seed=1))
    K_lc = lc_em.best_k(table, "bic")
    recipes = {"dpm": evaluate.ModelRecipe("dpm", SPEC, config=dpm_em.DPMConfig(K=30, seed=1)),
               "lc": evaluate.ModelRecipe("lc", SPEC, K_lc, lc_em.LCConfig(seed=1)),
               "mnl": evaluate.ModelRecipe("mnl", SPEC)}
    rep = {k: evaluate.cross_validate(data, r, 10, seed=3) for k, r in recipes.items()}

    def gap(a, b):
        d = rep[a].fold_loglik - rep[b].fold_loglik
        return d.mean(), d.std(ddof=1) / math.sqrt(len(d))

    (g1, s1), (g2, s2) = gap("dpm", "lc"), gap("lc", "mnl")
    ok = all(r.complete for r in rep.values()) and g1 >= -s1 and g2 >= -s2
    verdict(capsys, 6, ok, f"mean fold LL dpm {rep['dpm'].mean:.2f}, lc(K={K_lc}) "
            f"{rep['lc'].mean:.2f}, mnl {rep['mnl'].mean:.2f}; gaps {g1:.2f}±{s1:.2f}, "
            f"{g2:.2f}±{s2:.2f}")


def test_ac07_gradients(capsys):
    errs = [gradient_relative_error(seed) for seed in range(20)]
    verdict(capsys, 7, max(errs) < 1e-6, f"worst relative error {max(errs):.2e} over 20 instances")


def test_ac08_em_ascent(capsys):
    worst_q, worst_ll = -math.inf, -math.inf
    for seed in range(5):
        sim = simgen.simulate(simgen.experiment("III"), simgen.SimConfig(120, 6, 3, 10 + seed))
        worst_q = max(worst_q, q_ascent_violations(sim.dataset, SPEC, 4, seed, 4))
        m = lc_em.fit_lc(sim.dataset, SPEC, 3, lc_em.LCConfig(seed=seed, rel_tol=1e-6))
        worst_ll = max(worst_ll, loglik_drops(m).max())
    ok = worst_q <= 1e-8 and worst_ll <= 1e-9
    verdict(capsys, 8, ok, f"largest relative Q decrease {worst_q:.2e}, "
            f"largest relative LC log-likelihood decrease {worst_ll:.2e}")


def test_ac09_analytic_oracles(capsys):
    a = dpm_em.m_step_alpha(np.zeros((10, 6)), ConcentrationPrior(), alpha_init=0.5).alpha
    g = gdm_log_marginal([1, 1], GDParams.gem(1.0, 2))
    p = component_prior_probs(1.0, 3)
    ok = abs(a - 2.0) <= 1e-3 and abs(g - math.log(1 / 3)) <= 1e-10 and p.tolist() == [0.5, 0.25, 0.25]
    verdict(capsys, 9, ok, f"alpha {a:.6f}, gdm {g:.12f}, probs {p.tolist()}")


def test_ac10_dp_laws(capsys):
    rng = np.random.default_rng(2024)
    base = lambda n, r: r.standard_normal(n)
    parts = []
    ok = True
    for alpha in (1.0, 10.0):
        g = np.array([np.mean(sample_stick_dp(alpha, base, 150, 10_000, rng) <= 0)
                      for _ in range(200)])
        se = g.std(ddof=1) / math.sqrt(len(g))
        ratio = g.var(ddof=1) / (0.25 / (alpha + 1))
        ok &= abs(g.mean() - 0.5) <= 3 * se and abs(ratio - 1) <= 0.25
        parts.append(f"alpha={alpha:g}: mean {g.mean():.4f}±{se:.4f}, variance ratio {ratio:.3f}")
    for alpha, N in ((1.0, 100), (10.0, 100)):
        c = np.array([sample_crp_partition(alpha, N, rng).max() + 1 for _ in range(2000)])
        e = expected_occupied_components(alpha, N)
        se = c.std(ddof=1) / math.sqrt(len(c))
        ok &= abs(c.mean() - e) <= 3 * se
        parts.append(f"CRP alpha={alpha:g}: {c.mean():.3f} vs {e:.3f}±{se:.3f}")
    verdict(capsys, 10, bool(ok), "; ".join(parts))


def test_ac11_degenerate_models(capsys, exp1_small):
    data = exp1_small.dataset
    lc = lc_em.fit_lc(data, SPEC, 1)
    ref = fit_mnl(SPEC, data, tol=1e-9)
    d_lc = np.max(np.abs(lc.betas[0].values - ref.params.values))
    attrs = tuple(AttributeSpec(a.name) for a in SPEC.attributes)
    pref = UtilitySpec("preference", attrs)
    pdata = data.with_attributes(data.X, attrs)
    pref_ref = fit_mnl(pref, pdata, tol=1e-9)
    dpm = dpm_em.fit(pdata, pref, dpm_em.DPMConfig(K=1, prior_scale=1e6))
    d_dpm = np.max(np.abs(dpm.betas[0].values - pref_ref.params.values))
    verdict(capsys, 11, d_lc <= 1e-6 and d_dpm <= 1e-3,
            f"K=1 LC vs MNL {d_lc:.2e}; K=1 DPM vs MNL {d_dpm:.2e}")


def test_ac12_cli_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    a = run_pipeline(tmp_path / "a", threads=1)
    b = run_pipeline(tmp_path / "b", threads=4)
    fa, fb = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    diff = sorted(set(fa) ^ set(fb)) + [k for k in fa if k in fb and fa[k] != fb[k]]
    ok = a == b and not diff
    verdict(capsys, 12, ok, f"{len(fa)} files compared across thread counts 1 and 4, "
            f"{len(diff)} differ ({time.perf_counter() - t0:.0f}s)")
