"""
Folding the N receiver modes of a network covariance matrix into three.

Each step mixes two non-target receiver modes on a beam splitter chosen so
that one output loses all covariance with Alice, then discards that output.
Discarding a mode can only help Eve, so the reduced matrix yields a key rate
no larger than the full one; for identical drops the discarded modes are
product with everything kept and nothing is lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, DomainError
from .gaussian import ALICE, REST, SIGMA_Z, I2, CovMatrix, ModeLabel, Role, beamsplitter_inplace
from .network import ChannelParams, NetworkTopology


@dataclass(frozen=True)
class ReductionStep:
    pair: tuple
    eta_s: float
    dropped: ModeLabel
    residual_coupling: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "pair": [str(p) for p in self.pair],
            "eta_s": self.eta_s,
            "dropped": str(self.dropped),
            "residual_coupling": self.residual_coupling,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class EquivalentChannel:
    transmittance: float
    excess_noise: float

    def __post_init__(self):
        if not 0.0 < self.transmittance <= 1.0 + 1e-15:
            raise DomainError(f"equivalent transmittance out of range: {self.transmittance}")
        if self.excess_noise < -1e-15:
            raise DomainError(f"equivalent excess noise negative: {self.excess_noise}")


def pairwise_eta_s_cov(c_a1: float, c_a2: float) -> tuple[float, bool]:
    """Splitter transmittance that decouples one output from Alice.

    For the splitter acting on (mode 2, mode 1) the first output is
    decoupled when the covariances share a sign, the second otherwise.
    Returns (eta_s, degenerate); both covariances zero gives (0.5, True).
    """
    s = c_a1 * c_a1 + c_a2 * c_a2
    if s == 0.0:
        return 0.5, True
    if c_a1 * c_a2 >= 0.0:
        return c_a1 * c_a1 / s, False
    return c_a2 * c_a2 / s, False


def pairwise_eta_s_channels(eta: float, t1: float, t2: float) -> float:
    """Decoupling transmittance for two branches of a splitter eta with channels T1, T2."""
    den = eta * t1 + (1.0 - eta) * t2
    if den <= 0.0:
        raise DomainError("eta*T1 + (1-eta)*T2 must be positive")
    return (1.0 - eta) * t2 / den


def equivalent_one_way(eta: float, ch1: ChannelParams, ch2: ChannelParams) -> EquivalentChannel:
    """Single channel equivalent to two splitter branches recombined after decoupling."""
    t, tp = ch1.transmittance, ch2.transmittance
    tt = eta * t + (1.0 - eta) * tp
    if tt <= 0.0:
        raise DomainError("equivalent transmittance is zero")
    eps = (eta * t * t * ch1.excess_noise + (1.0 - eta) * tp * tp * ch2.excess_noise) / (tt * tt)
    return EquivalentChannel(tt, eps)


def alice_coupling(g: np.ndarray, a: int, k: int) -> float:
    """Scalar C with gamma_{A,k} ~ C sigma_z (averaged over the two quadratures)."""
    block = g[2 * a:2 * a + 2, 2 * k:2 * k + 2]
    return 0.5 * float(np.trace(block @ SIGMA_Z))


def _reduce_inplace(g: np.ndarray, a: int, i: int, j: int) -> tuple[float, int, int, float, bool]:
    c_i, c_j = alice_coupling(g, a, i), alice_coupling(g, a, j)
    eta, degenerate = pairwise_eta_s_cov(c_j, c_i)
    beamsplitter_inplace(g, i, j, eta)
    dropped, kept = (i, j) if (c_i * c_j >= 0.0 or degenerate) else (j, i)
    residual = float(np.max(np.abs(g[2 * a:2 * a + 2, 2 * dropped:2 * dropped + 2])))
    return eta, kept, dropped, residual, degenerate


def reduce_pair(gamma: CovMatrix, i: ModeLabel, j: ModeLabel,
                kept_label: ModeLabel = REST) -> tuple[CovMatrix, ReductionStep]:
    """Mix modes i and j, drop the output decoupled from Alice, label the survivor."""
    for lab in (i, j):
        if lab.role not in (Role.BOB, Role.COMBINED_REST):
            raise ContractViolation(f"cannot fold non-receiver mode {lab}")
    if i == j:
        raise ContractViolation("reduce_pair needs two distinct modes")
    pi, pj = gamma.index(i), gamma.index(j)
    g = np.array(gamma.entries)
    eta, kept, dropped, residual, degenerate = _reduce_inplace(g, gamma.index(ALICE), pi, pj)
    labels = list(gamma.labels)
    dropped_label = labels[dropped]
    labels[kept] = kept_label
    keep = [k for k in range(gamma.n_modes) if k != dropped]
    idx = [q for k in keep for q in (2 * k, 2 * k + 1)]
    reduced = CovMatrix(g[np.ix_(idx, idx)], tuple(labels[k] for k in keep))
    return reduced, ReductionStep((i, j), eta, dropped_label, residual, degenerate)


def default_pairing_order(gamma: CovMatrix, target: ModeLabel) -> list[ModeLabel]:
    """Non-target Bobs sorted by |C_{A,B_i}| ascending (ties by index)."""
    a = gamma.index(ALICE)
    others = [l for l in gamma.bobs() if l != target]
    return sorted(others, key=lambda l: (abs(alice_coupling(gamma.entries, a, gamma.index(l))), l.index))


@dataclass
class ReductionResult:
    gamma3: CovMatrix
    steps: list
    intermediates: Optional[list] = None

    def trace(self) -> list[dict]:
        return [s.to_dict() for s in self.steps]


def reduce_to_three_modes(gamma: CovMatrix, target: ModeLabel,
                          order: Optional[Sequence[ModeLabel]] = None,
                          keep_intermediates: bool = False) -> ReductionResult:
    """Fold every Bob except ``target`` into one mode B_R; result ordered (A, B_R, target).

    The survivor's phase is rotated by pi if needed so that C_{A,B_R} <= 0;
    a local rotation leaves every information quantity unchanged.
    """
    bobs = gamma.bobs()
    if len(bobs) < 2:
        raise ContractViolation("reduction needs at least two Bobs")
    if target not in bobs:
        raise ContractViolation(f"target {target} is not a Bob of this matrix")
    order = list(order) if order is not None else default_pairing_order(gamma, target)
    if sorted(order) != sorted(l for l in bobs if l != target):
        raise ContractViolation("pairing order must list every non-target Bob exactly once")

    g = np.array(gamma.entries)
    labels = list(gamma.labels)
    a = gamma.index(ALICE)
    alive = [True] * gamma.n_modes
    steps: list[ReductionStep] = []
    inter: list[CovMatrix] = []

    def snapshot():
        keep = [k for k in range(len(labels)) if alive[k]]
        idx = [q for k in keep for q in (2 * k, 2 * k + 1)]
        return CovMatrix(g[np.ix_(idx, idx)], tuple(labels[k] for k in keep))

    rest = gamma.index(order[0])
    for nxt in order[1:]:
        j = gamma.index(nxt)
        pair = (labels[rest], labels[j])
        eta, kept, dropped, residual, degenerate = _reduce_inplace(g, a, rest, j)
        alive[dropped] = False
        steps.append(ReductionStep(pair, eta, labels[dropped], residual, degenerate))
        labels[kept] = REST
        # the dropped position keeps its old label; it is excluded below
        if labels[dropped] == REST:
            labels[dropped] = ModeLabel(Role.ENVIRONMENT, len(steps))
        rest = kept
        if keep_intermediates:
            inter.append(snapshot())
    labels[rest] = REST

    t = gamma.index(target)
    idx = [2 * a, 2 * a + 1, 2 * rest, 2 * rest + 1, 2 * t, 2 * t + 1]
    g3 = g[np.ix_(idx, idx)].copy()
    if alice_coupling(g3, 0, 1) > 0.0:
        flip = np.diag([1.0, 1.0, -1.0, -1.0, 1.0, 1.0])
        g3 = flip @ g3 @ flip
    return ReductionResult(CovMatrix(g3, (ALICE, REST, target)), steps,
                           inter if keep_intermediates else None)


def closed_form_three_mode(topo: NetworkTopology, v_m: float) -> CovMatrix:
    """gamma_{A B_R B_N} for identical drops, straight from the block formulas."""
    if not topo.is_symmetric():
        raise ContractViolation("closed-form three-mode matrix needs a symmetric topology")
    n = topo.n_bobs
    extra = topo.extra_transmittance
    t1 = topo.feeder.channel.transmittance * (extra if topo.extra_loss_location == "feeder" else 1.0)
    t2 = topo.drops[0].channel.transmittance * (extra if topo.extra_loss_location == "drop" else 1.0)
    eps1 = topo.feeder.channel.excess_noise
    eps2 = topo.drops[0].channel.excess_noise
    t_t, eps_t = t2, eps2
    v_a = v_m + 1.0
    c = math.sqrt(v_a * v_a - 1.0)
    eps_tot = eps1 + n / t1 * eps2
    eps_tot_r = eps1 + eps_t / ((1.0 - 1.0 / n) * t1)
    v_bn = t1 * t2 / n * (v_m + eps_tot) + 1.0
    v_br = (1.0 - 1.0 / n) * t1 * t_t * (v_m + eps_tot_r) + 1.0
    c_abn = math.sqrt(t1 * t2 / n) * c
    c_abr = -math.sqrt(t1 * t_t * (1.0 - 1.0 / n)) * c
    c_brbn = -t1 / n * math.sqrt(t2 * t_t * (n - 1)) * (v_m + eps1)
    g = np.block([
        [v_a * I2, c_abr * SIGMA_Z, c_abn * SIGMA_Z],
        [c_abr * SIGMA_Z, v_br * I2, c_brbn * I2],
        [c_abn * SIGMA_Z, c_brbn * I2, v_bn * I2],
    ])
    return CovMatrix(g, (ALICE, REST, ModeLabel(Role.BOB, n)))
