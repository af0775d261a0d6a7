import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import Z, gaussian_mi, single_link_heterodyne_chi
from ptmpqkd.errors import DomainError
from ptmpqkd.gaussian import ALICE, CovMatrix, bob
from ptmpqkd.keyrate import (
    ProtocolParams,
    holevo_bound,
    key_rate,
    mutual_info_alice_bob,
    mutual_info_bobs,
    network_key_rates,
    per_adversary_rates,
    reconciliation_beta,
    syndrome_length,
    template_key_rate,
    worst_case_over_ratio,
)
from ptmpqkd.network import (
    ChannelParams,
    DetectorModel,
    NetworkTopology,
    NoiseBudget,
    PONTemplate,
    Segment,
    build_network_cov,
)

DET = DetectorModel(0.6, 0.15)
PARAMS = ProtocolParams(4.0, 0.956)
TEMPLATE = PONTemplate(8, NoiseBudget(0.0383, 0.004), DET)

# (I_AB, chi, I_BB_max, K) for N = 8 from an independent closed-form implementation
REFERENCE = {
    0.0: (0.17667010638997763, 0.028956776151760594, 0.019332409310652172, 0.13993984555705802),
    10.0: (0.11401244862742861, 0.08082193987361741, 0.008370710415175156, 0.028173961014204343),
    50.0: (0.018693774082735752, 0.016434751576561712, 0.00023960857129297513, 0.0014364964465336666),
    100.0: (0.0018805264902678654, 0.0017193034650122563, 2.452939647521436e-06, 7.847985968382283e-05),
}


def two_mode(v_m, t, eps):
    v = v_m + 1.0
    c = math.sqrt(t * (v * v - 1.0))
    g = np.block([[v * np.eye(2), c * Z], [c * Z, (t * (v - 1.0 + eps) + 1.0) * np.eye(2)]])
    return CovMatrix(g, (ALICE, bob(1)))


class TestProtocolParams:
    def test_beta_t(self):
        assert ProtocolParams(4.0, 0.95, p_f=0.1).beta_t == pytest.approx(0.855)

    @pytest.mark.parametrize("kw", [dict(v_m=0.0), dict(beta=1.2), dict(p_f=1.0), dict(rep_rate_hz=0)])
    def test_ranges(self, kw):
        args = dict(v_m=4.0, beta=0.9)
        args.update(kw)
        with pytest.raises(DomainError):
            ProtocolParams(**args)


class TestMutualInformation:
    def test_uncorrelated(self):
        g = CovMatrix(np.diag([5.0, 5.0, 2.0, 2.0]), (ALICE, bob(1)))
        assert mutual_info_alice_bob(g, bob(1)) == 0.0

    def test_ideal_lossless(self):
        assert mutual_info_alice_bob(two_mode(4.0, 1.0, 0.0), bob(1)) == pytest.approx(math.log2(3), abs=1e-12)

    def test_zero_km_fixture(self):
        b = template_key_rate(TEMPLATE, 0.0, PARAMS)
        assert b.I_AB == pytest.approx(REFERENCE[0.0][0], rel=1e-10)

    def test_bobs_uncorrelated(self):
        g = CovMatrix(np.diag([5.0, 5.0, 2.0, 2.0, 3.0, 3.0]), (ALICE, bob(1), bob(2)))
        assert mutual_info_bobs(g, bob(1), bob(2)) == 0.0

    def test_bobs_against_bivariate_oracle(self):
        # thermal signal of variance V split 50:50, ideal detectors, no drop noise
        v = 3.7
        g = np.eye(6)
        g[0:2, 0:2] *= 5.0
        bob_var, cov = (v + 1) / 2, (v - 1) / 2
        g[2:4, 2:4] = g[4:6, 4:6] = bob_var * np.eye(2)
        g[2:4, 4:6] = g[4:6, 2:4] = cov * np.eye(2)
        gamma = CovMatrix(g, (ALICE, bob(1), bob(2)))
        # measured data add one vacuum unit; both quadratures count once each
        expect = 2 * gaussian_mi(bob_var + 1, bob_var + 1, cov)
        assert mutual_info_bobs(gamma, bob(1), bob(2)) == pytest.approx(expect, abs=1e-12)


class TestHolevo:
    @pytest.mark.parametrize("v_m,t,eps,eta,vel", [
        (4.0, 0.3, 0.01, 0.6, 0.15), (2.5, 0.7, 0.05, 0.8, 0.01), (10.0, 0.05, 0.02, 0.5, 0.3),
        (4.0, 0.999, 0.0, 0.6, 0.15),
    ])
    def test_single_link_closed_form(self, v_m, t, eps, eta, vel):
        got = holevo_bound(two_mode(v_m, t, eps), bob(1), DetectorModel(eta, vel))
        assert got == pytest.approx(single_link_heterodyne_chi(v_m, t, eps, eta, vel), abs=1e-9)

    def test_pure_lossless_ideal_detection_zero(self):
        assert holevo_bound(two_mode(4.0, 1.0, 0.0), bob(1)) == pytest.approx(0.0, abs=1e-9)

    def test_dark_feeder(self):
        topo = NetworkTopology(Segment(ChannelParams(1e-12, 0.0)), (Segment(ChannelParams(1.0)),) * 2)
        b = key_rate(build_network_cov(topo, 4.0), bob(2), PARAMS, DET)
        assert b.chi_BE < 1e-9 and b.K_bit_per_pulse == pytest.approx(0.0, abs=1e-9)


class TestKeyRate:
    @pytest.mark.parametrize("d", sorted(REFERENCE))
    def test_independent_reference(self, d):
        b = template_key_rate(TEMPLATE, d, PARAMS)
        got = (b.I_AB, b.chi_BE, b.I_BB_max, b.K_bit_per_pulse)
        assert np.allclose(got, REFERENCE[d], rtol=1e-8, atol=1e-14)

    def test_10km_threshold(self):
        assert template_key_rate(TEMPLATE, 10.0, PARAMS).K_bit_per_pulse >= 1e-3

    def test_clamped_eve_binding(self):
        b = template_key_rate(TEMPLATE, 300.0, PARAMS)
        assert b.K_bit_per_pulse == 0.0 and b.binding_adversary == "Eve"

    def test_p_f_zero_is_plain_rate(self):
        b = template_key_rate(TEMPLATE, 10.0, PARAMS)
        assert b.K_bit_per_pulse == pytest.approx(0.956 * b.I_AB - max(b.chi_BE, b.I_BB_max), abs=1e-15)

    def test_failure_probability_scales_beta(self):
        b = template_key_rate(TEMPLATE, 10.0, ProtocolParams(4.0, 0.956, p_f=0.1))
        assert b.K_bit_per_pulse == pytest.approx(0.9 * 0.956 * b.I_AB - b.chi_BE, abs=1e-15)

    def test_aggregate(self):
        b = template_key_rate(TEMPLATE, 10.0, PARAMS)
        assert b.aggregate_bps == pytest.approx(8 * b.K_bps)
        assert b.K_bps == pytest.approx(b.K_bit_per_pulse * 5e9)

    def test_network_sum_symmetric(self):
        g = build_network_cov(PONTemplate(4, NoiseBudget(0.0383, 0.004), DET).topology(10.0), 4.0)
        rows, total = network_key_rates(g, PARAMS, DET)
        assert total == pytest.approx(4 * rows[0].K_bps, rel=1e-9)

    def test_max_rule_is_min_over_adversaries(self):
        for d in (0.0, 5.0, 20.0, 60.0):
            g = build_network_cov(PONTemplate(4, NoiseBudget(0.0383, 0.004), DET).topology(d), 4.0)
            b = key_rate(g, bob(4), PARAMS, DET)
            per = per_adversary_rates(b, g, bob(4), DET)
            assert b.K_bit_per_pulse == pytest.approx(max(0.0, min(per.values())), abs=1e-15)

    def test_full_equals_reduced_symmetric(self):
        g = build_network_cov(TEMPLATE.topology(30.0), 4.0)
        full = key_rate(g, bob(8), PARAMS, DET).K_bit_per_pulse
        red = key_rate(g, bob(8), PARAMS, DET, reduce=True).K_bit_per_pulse
        assert abs(full - red) < 1e-9

    def test_chi_above_bob_bob_on_grid(self):
        for d in range(0, 221, 5):
            b = template_key_rate(TEMPLATE, float(d), PARAMS)
            if b.K_bit_per_pulse > 0:
                assert b.chi_BE > b.I_BB_max

    def test_breakdown_dict(self):
        d = template_key_rate(TEMPLATE, 10.0, PARAMS).to_dict()
        for key in ("I_AB", "chi_BE", "I_BB_max", "K_bit_per_pulse", "K_bps", "aggregate_bps", "binding_adversary"):
            assert key in d


class TestMonotonicity:
    def test_distance(self):
        ks = [template_key_rate(TEMPLATE, float(d), PARAMS).K_bit_per_pulse for d in range(0, 221, 4)]
        assert all(b <= a + 1e-15 for a, b in zip(ks, ks[1:]))

    def test_noise(self):
        for d in (10.0, 60.0):
            ks = [template_key_rate(PONTemplate(8, NoiseBudget(e, 0.004), DET), d, PARAMS).K_bit_per_pulse
                  for e in (0.004, 0.02, 0.0383, 0.06)]
            assert all(b <= a + 1e-15 for a, b in zip(ks, ks[1:]))

    def test_users(self):
        for d in (10.0, 60.0):
            ks = [template_key_rate(PONTemplate(n, NoiseBudget(0.0383, 0.004), DET), d, PARAMS).K_bit_per_pulse
                  for n in (2, 4, 8, 16)]
            assert all(b <= a + 1e-15 for a, b in zip(ks, ks[1:]))


class TestReconciliation:
    def test_all_leaked(self):
        assert reconciliation_beta(2.0, 2.0, 1.5) == 0.0

    def test_value(self):
        assert reconciliation_beta(2.0, 0.5, 1.5) == pytest.approx(1.0)

    def test_roundtrip(self):
        beta = 0.9321
        ls = syndrome_length(3.1, beta, 0.7)
        assert reconciliation_beta(3.1, ls, 0.7) == pytest.approx(beta, abs=1e-12)

    def test_requires_information(self):
        with pytest.raises(DomainError):
            reconciliation_beta(2.0, 0.5, 0.0)


class TestWorstCase:
    def test_single_ratio_is_key_rate(self):
        pts = worst_case_over_ratio(TEMPLATE, PARAMS, [10.0, 50.0], [0.25])
        for p, d in zip(pts, (10.0, 50.0)):
            direct = template_key_rate(TEMPLATE.with_ratio(0.25), d, PARAMS)
            assert p.breakdown.K_bit_per_pulse == direct.K_bit_per_pulse

    def test_receiver_noise_hurts_long_distance(self):
        pts = worst_case_over_ratio(TEMPLATE, PARAMS, [150.0], [0.0, 1.0])
        k0, k1 = (b.K_bit_per_pulse for b in pts[0].family)
        assert k0 < k1
        assert pts[0].ratio == 0.0

    def test_n8_beyond_180(self):
        ratios = [0.1 * k for k in range(11)]
        pts = worst_case_over_ratio(TEMPLATE, PARAMS, [180.0], ratios)
        assert pts[0].breakdown.K_bit_per_pulse > 0.0


@settings(max_examples=30, deadline=None)
@given(d=st.floats(0.0, 250.0), p_f=st.floats(0.0, 0.5))
def test_rate_clamp_invariant(d, p_f):
    b = template_key_rate(TEMPLATE, d, ProtocolParams(4.0, 0.956, p_f=p_f))
    assert b.K_bit_per_pulse >= 0.0
    assert (b.K_bit_per_pulse == 0.0) == (b.beta_t * b.I_AB <= max(b.I_BB_max, b.chi_BE))
