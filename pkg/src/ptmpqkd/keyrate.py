"""
Information quantities and secret key rates under reverse reconciliation.

All mutual informations count both heterodyne quadratures (a single log2,
no factor 1/2). Bob-side quantities are evaluated in the measured domain:
the trusted detector maps a modal variance V to eta_d V + (1 - eta_d) v and
heterodyne adds one vacuum unit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, NumericalError
from .gaussian import (
    ALICE,
    REST,
    CovMatrix,
    ModeLabel,
    Role,
    heterodyne_condition,
    von_neumann_entropy,
)
from .network import DetectorModel, PONTemplate, build_network_cov, detector_dilation
from .reduction import reduce_to_three_modes


@dataclass(frozen=True)
class ProtocolParams:
    v_m: float
    beta: float
    p_f: float = 0.0
    rep_rate_hz: float = 5e9
    block_size: int = 10**6

    def __post_init__(self):
        if self.v_m <= 0:
            raise DomainError(f"modulation variance must be > 0, got {self.v_m}")
        if not 0.0 < self.beta <= 1.0:
            raise DomainError(f"reconciliation efficiency must be in (0, 1], got {self.beta}")
        if not 0.0 <= self.p_f < 1.0:
            raise DomainError(f"failure probability must be in [0, 1), got {self.p_f}")
        if self.rep_rate_hz <= 0:
            raise DomainError("repetition rate must be positive")
        if self.block_size < 1:
            raise DomainError("block size must be a positive integer")

    @property
    def beta_t(self) -> float:
        return (1.0 - self.p_f) * self.beta


@dataclass(frozen=True)
class KeyRateBreakdown:
    I_AB: float
    chi_BE: float
    I_BB_max: float
    K_bit_per_pulse: float
    K_bps: float
    aggregate_bps: float
    binding_adversary: str
    target: str = ""
    n_bobs: int = 0
    beta: float = 1.0
    beta_t: float = 1.0
    p_f: float = 0.0
    rep_rate_hz: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def _measured_variance(v: np.ndarray | float, det: Optional[DetectorModel]) -> np.ndarray | float:
    if det is None:
        return v + 1.0
    return det.efficiency * v + det.added_noise + 1.0


def _gain(det: Optional[DetectorModel]) -> float:
    return 1.0 if det is None else math.sqrt(det.efficiency)


def mutual_info_alice_bob(gamma: CovMatrix, target: ModeLabel,
                          det: Optional[DetectorModel] = None) -> float:
    """log2((V_A + 1) / (V_{A|B} + 1)) from x-quadrature entries."""
    a, b = gamma.index(ALICE), gamma.index(target)
    g = gamma.entries
    v_a = g[2 * a, 2 * a]
    c = _gain(det) * g[2 * a, 2 * b]
    v_b = _measured_variance(g[2 * b, 2 * b], det)
    v_cond = v_a - c * c / v_b
    if v_cond + 1.0 <= 0.0:
        raise NumericalError(f"conditional variance V_A|B = {v_cond} is not physical")
    return float(math.log2((v_a + 1.0) / (v_cond + 1.0)))


def mutual_info_bobs(gamma: CovMatrix, i: ModeLabel, j: ModeLabel,
                     det_i: Optional[DetectorModel] = None,
                     det_j: Optional[DetectorModel] = None) -> float:
    """log2(V_i / V_{i|j}) between the measured x data of two receivers."""
    g = gamma.entries
    pi, pj = gamma.index(i), gamma.index(j)
    v_i = _measured_variance(g[2 * pi, 2 * pi], det_i)
    v_j = _measured_variance(g[2 * pj, 2 * pj], det_j)
    c = _gain(det_i) * _gain(det_j) * g[2 * pi, 2 * pj]
    v_cond = v_i - c * c / v_j
    if v_cond <= 0.0:
        raise NumericalError(f"conditional variance {v_cond} is not positive")
    return float(math.log2(v_i / v_cond))


def max_mutual_info_bobs(gamma: CovMatrix, target: ModeLabel,
                         detectors: Mapping[ModeLabel, Optional[DetectorModel]]) -> tuple[float, Optional[ModeLabel]]:
    """Largest I(B_target : B_i) over the individual Bob modes present."""
    others = [l for l in gamma.bobs() if l != target]
    if not others:
        others = [l for l in gamma.labels if l.role is Role.COMBINED_REST]
    if not others:
        return 0.0, None
    g = gamma.entries
    t = gamma.index(target)
    det_t = detectors.get(target)
    v_t = _measured_variance(g[2 * t, 2 * t], det_t)
    pos = np.array([gamma.index(l) for l in others])
    dets = [detectors.get(l) for l in others]
    if all(d == dets[0] for d in dets):
        v_o = _measured_variance(g[2 * pos, 2 * pos], dets[0])
        gains = np.full(len(pos), _gain(dets[0]))
    else:
        v_o = np.array([_measured_variance(g[2 * p, 2 * p], d) for p, d in zip(pos, dets)])
        gains = np.array([_gain(d) for d in dets])
    c = _gain(det_t) * gains * g[2 * t, 2 * pos]
    v_cond = v_t - c * c / v_o
    if np.any(v_cond <= 0.0):
        raise NumericalError("non-positive conditional variance between Bobs")
    info = np.log2(v_t / v_cond)
    k = int(np.argmax(info))
    return float(info[k]), others[k]


def holevo_bound(gamma: CovMatrix, target: ModeLabel, det: Optional[DetectorModel] = None,
                 clamp_tol: float = 1e-6) -> float:
    """Eve's Holevo information on the heterodyne outcome of ``target``.

    S(all trusted modes incl. detector ancillas) minus the entropy left
    after heterodyning the detected target mode.
    """
    full = gamma if det is None else detector_dilation(gamma, target, det)
    s_full = von_neumann_entropy(full, clamp_tol)
    s_cond = von_neumann_entropy(heterodyne_condition(full, target), clamp_tol)
    return max(s_full - s_cond, 0.0)


def combine_rate(i_ab: float, chi: float, i_bb_max: float, i_bb_arg: Optional[ModeLabel],
                 params: ProtocolParams, n_bobs: int, target: ModeLabel) -> KeyRateBreakdown:
    bound = max(i_bb_max, chi)
    k = max(0.0, params.beta_t * i_ab - bound)
    binding = "Eve" if chi >= i_bb_max or i_bb_arg is None else str(i_bb_arg)
    k_bps = k * params.rep_rate_hz
    return KeyRateBreakdown(
        I_AB=i_ab, chi_BE=chi, I_BB_max=i_bb_max, K_bit_per_pulse=k, K_bps=k_bps,
        aggregate_bps=n_bobs * k_bps, binding_adversary=binding, target=str(target),
        n_bobs=n_bobs, beta=params.beta, beta_t=params.beta_t, p_f=params.p_f,
        rep_rate_hz=params.rep_rate_hz)


def _detector_map(gamma: CovMatrix, det, detectors) -> dict:
    if detectors is not None:
        return dict(detectors)
    return {l: det for l in gamma.labels if l.role in (Role.BOB, Role.COMBINED_REST)}


def key_rate(gamma: CovMatrix, target: ModeLabel, params: ProtocolParams,
             det: Optional[DetectorModel] = None, *, reduce: bool = False,
             order: Optional[Sequence[ModeLabel]] = None,
             detectors: Optional[Mapping[ModeLabel, Optional[DetectorModel]]] = None,
             clamp_tol: float = 1e-6, n_bobs: Optional[int] = None) -> KeyRateBreakdown:
    """K = beta_t I(A:B) - max(max_i I(B:B_i), chi_BE), clamped at zero.

    ``gamma`` is the modal network matrix over A and the Bobs (or an already
    reduced A, B_R, B matrix). With ``reduce`` the Holevo bound is evaluated
    on the three-mode reduction; the Bob-Bob term always uses the individual
    Bob modes of ``gamma``. ``aggregate_bps`` assumes all Bobs share this
    rate; use :func:`network_key_rates` for the exact sum.
    """
    dmap = _detector_map(gamma, det, detectors)
    det_t = dmap.get(target, det)
    i_ab = mutual_info_alice_bob(gamma, target, det_t)
    i_bb, arg = max_mutual_info_bobs(gamma, target, dmap)
    g3 = gamma
    if reduce and REST not in gamma.labels:
        g3 = reduce_to_three_modes(gamma, target, order).gamma3
    chi = holevo_bound(g3, target, det_t, clamp_tol)
    n_bobs = n_bobs or len(gamma.bobs())
    return combine_rate(i_ab, chi, i_bb, arg, params, n_bobs, target)


def per_adversary_rates(breakdown: KeyRateBreakdown, gamma: CovMatrix, target: ModeLabel,
                        det: Optional[DetectorModel] = None) -> dict:
    """beta_t I(A:B) minus each adversary's information, one entry per adversary."""
    base = breakdown.beta_t * breakdown.I_AB
    out = {"Eve": base - breakdown.chi_BE}
    for other in gamma.bobs():
        if other != target:
            out[str(other)] = base - mutual_info_bobs(gamma, target, other, det, det)
    return out


def network_key_rates(gamma: CovMatrix, params: ProtocolParams, det: Optional[DetectorModel] = None,
                      *, reduce: bool = True,
                      detectors: Optional[Mapping[ModeLabel, Optional[DetectorModel]]] = None
                      ) -> tuple[list[KeyRateBreakdown], float]:
    """Per-Bob breakdowns and the exact aggregate rate in bits per second."""
    rows = [key_rate(gamma, b, params, det, reduce=reduce, detectors=detectors) for b in gamma.bobs()]
    return rows, float(sum(r.K_bps for r in rows))


def reconciliation_beta(h_bn: float, l_s: float, i_ab: float) -> float:
    """Efficiency when the syndrome of length l_s is sent under a one-time pad."""
    if i_ab <= 0:
        raise DomainError("mutual information must be positive")
    if not 0.0 <= l_s <= h_bn:
        raise DomainError(f"syndrome length {l_s} must lie in [0, H = {h_bn}]")
    return (h_bn - l_s) / i_ab


def syndrome_length(h_bn: float, beta: float, i_ab: float) -> float:
    """Inverse of :func:`reconciliation_beta`."""
    if i_ab <= 0:
        raise DomainError("mutual information must be positive")
    return h_bn - beta * i_ab


def template_key_rate(template: PONTemplate, distance_km: float, params: ProtocolParams,
                      *, reduce: bool = True, target: Optional[ModeLabel] = None) -> KeyRateBreakdown:
    topo = template.topology(distance_km)
    gamma = build_network_cov(topo, params.v_m)
    target = target or ModeLabel(Role.BOB, topo.n_bobs)
    return key_rate(gamma, target, params, template.detector, reduce=reduce)


@dataclass(frozen=True)
class WorstCasePoint:
    distance_km: float
    ratio: float
    breakdown: KeyRateBreakdown
    family: tuple = field(default=(), repr=False)


def worst_case_over_ratio(template: PONTemplate, params: ProtocolParams,
                          distances: Sequence[float], ratio_grid: Sequence[float],
                          *, reduce: bool = True) -> list[WorstCasePoint]:
    """Pointwise minimum of the key rate over eps_a = r eps_tot for r on the grid.

    Ties go to the first ratio on the grid.
    """
    if len(ratio_grid) == 0:
        raise ContractViolation("ratio grid must not be empty")
    out = []
    for d in distances:
        fam = tuple(template_key_rate(template.with_ratio(r), d, params, reduce=reduce)
                    for r in ratio_grid)
        k = int(np.argmin([b.K_bit_per_pulse for b in fam]))
        out.append(WorstCasePoint(float(d), float(ratio_grid[k]), fam[k], fam))
    return out
