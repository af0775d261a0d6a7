"""
Entanglement-based covariance matrix of a passive optical network.

Alice's EPR source feeds one fibre (the feeder) into a cascade of beam
splitters that fans the signal out to N drop fibres, one per Bob.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, DomainError
from .gaussian import (
    ALICE,
    DET_F,
    DET_G,
    CovMatrix,
    ModeLabel,
    SymplecticOp,
    beamsplitter_inplace,
    bob,
    direct_sum,
    lossy_inplace,
    two_mode_squeezed,
)

DEFAULT_ATTEN_DB_PER_KM = 0.2
EXTRA_LOSS_LOCATIONS = ("feeder", "drop")


@dataclass(frozen=True)
class ChannelParams:
    transmittance: float
    excess_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.transmittance <= 1.0:
            raise DomainError(f"transmittance must be in (0, 1], got {self.transmittance}")
        if self.excess_noise < 0.0:
            raise DomainError(f"excess noise must be >= 0, got {self.excess_noise}")


@dataclass(frozen=True)
class DetectorModel:
    """Trusted heterodyne detector with efficiency and electronic noise (SNU)."""

    efficiency: float
    electronic_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.efficiency < 1.0:
            raise DomainError(f"detector efficiency must be in (0, 1), got {self.efficiency}")
        if self.electronic_noise < 0.0:
            raise DomainError(f"electronic noise must be >= 0, got {self.electronic_noise}")

    @property
    def ancilla_variance(self) -> float:
        return 1.0 + 2.0 * self.electronic_noise / (1.0 - self.efficiency)

    @property
    def added_noise(self) -> float:
        """Variance added to eta * V by the trusted noise, before heterodyne vacuum."""
        return (1.0 - self.efficiency) * self.ancilla_variance


@dataclass(frozen=True)
class Segment:
    channel: ChannelParams
    length_km: float = 0.0


@dataclass(frozen=True)
class NoiseBudget:
    """Split of the feeder-input-referred excess noise into source and receiver parts."""

    eps_tot: float
    eps_a: float

    def __post_init__(self):
        if self.eps_tot < 0.0 or self.eps_a < 0.0:
            raise DomainError("noise budget entries must be non-negative")
        if self.eps_a > self.eps_tot * (1.0 + 1e-12):
            raise DomainError(f"eps_a = {self.eps_a} exceeds eps_tot = {self.eps_tot}")

    @property
    def eps_b_prime(self) -> float:
        return max(self.eps_tot - self.eps_a, 0.0)

    @classmethod
    def from_ratio(cls, eps_tot: float, ratio: float) -> "NoiseBudget":
        if not 0.0 <= ratio <= 1.0:
            raise DomainError(f"noise ratio must be in [0, 1], got {ratio}")
        return cls(eps_tot, ratio * eps_tot)


@dataclass(frozen=True)
class NetworkTopology:
    """Feeder, splitter cascade and drops of a PON with N Bobs.

    ``splitter`` holds the cascade transmittances: step k sends the fraction
    eta_k of the remaining trunk to Bob k. ``detectors`` holds one model per
    Bob (None means an ideal detector).
    """

    feeder: Segment
    drops: tuple
    splitter: tuple = ()
    detectors: tuple = ()
    extra_loss_db: float = 0.0
    extra_loss_location: str = "drop"

    def __post_init__(self):
        n = len(self.drops)
        if n < 2:
            raise ContractViolation(f"need at least 2 Bobs, got {n}")
        drops = tuple(d if isinstance(d, Segment) else Segment(d) for d in self.drops)
        object.__setattr__(self, "drops", drops)
        if not self.splitter:
            object.__setattr__(self, "splitter", tuple(eta for _, eta in splitter_cascade(n)))
        if len(self.splitter) != n - 1:
            raise ContractViolation(f"splitter needs {n - 1} cascade ratios, got {len(self.splitter)}")
        if any(not 0.0 <= eta <= 1.0 for eta in self.splitter):
            raise ContractViolation("splitter ratios must lie in [0, 1]")
        total = sum(cascade_fractions(self.splitter))
        if abs(total - 1.0) > 1e-12:
            raise ContractViolation(f"splitter power fractions sum to {total}")
        dets = tuple(self.detectors) if self.detectors else (None,) * n
        if len(dets) == 1 and n > 1:
            dets = dets * n
        if len(dets) != n:
            raise ContractViolation(f"{len(dets)} detectors for {n} Bobs")
        object.__setattr__(self, "detectors", dets)
        if self.extra_loss_db < 0.0:
            raise DomainError("extra loss must be >= 0 dB")
        if self.extra_loss_location not in EXTRA_LOSS_LOCATIONS:
            raise ContractViolation(
                f"extra_loss_location must be one of {EXTRA_LOSS_LOCATIONS}, "
                f"got {self.extra_loss_location!r}")

    @property
    def n_bobs(self) -> int:
        return len(self.drops)

    @property
    def extra_transmittance(self) -> float:
        return 10.0 ** (-self.extra_loss_db / 10.0)

    def detector(self, i: int) -> Optional[DetectorModel]:
        return self.detectors[i - 1]

    def is_symmetric(self) -> bool:
        first = self.drops[0].channel
        fr = cascade_fractions(self.splitter)
        return (all(d.channel == first for d in self.drops)
                and np.allclose(fr, 1.0 / self.n_bobs, rtol=0, atol=1e-12)
                and all(d == self.detectors[0] for d in self.detectors))

    def permuted(self, order: Sequence[int]) -> "NetworkTopology":
        """Topology with drop k taking the parameters of drop order[k] (1-based)."""
        return replace(self, drops=tuple(self.drops[i - 1] for i in order),
                       detectors=tuple(self.detectors[i - 1] for i in order))


def epr_cov(v: float) -> CovMatrix:
    """EPR state over (A, B1) where the second mode stands for Alice's sent mode."""
    if v < 1.0:
        raise DomainError(f"EPR variance must be >= 1, got {v}")
    return two_mode_squeezed(v, (ALICE, bob(1)))


def beamsplitter_op(n: int, i: int, j: int, eta: float) -> SymplecticOp:
    """Full 2n x 2n beam-splitter symplectic on mode positions (i, j)."""
    if i == j:
        raise ContractViolation("beam splitter needs two distinct modes")
    if not 0 <= i < n or not 0 <= j < n:
        raise ContractViolation(f"mode positions ({i}, {j}) out of range for {n} modes")
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"beam splitter transmittance must be in [0, 1], got {eta}")
    s = np.eye(2 * n)
    t, r = math.sqrt(eta), math.sqrt(1.0 - eta)
    ii, jj = slice(2 * i, 2 * i + 2), slice(2 * j, 2 * j + 2)
    s[ii, ii] = t * np.eye(2)
    s[ii, jj] = -r * np.eye(2)
    s[jj, ii] = r * np.eye(2)
    s[jj, jj] = t * np.eye(2)
    return SymplecticOp(s, f"BS({i},{j}; eta={eta:g})")


def beamsplitter_between(gamma: CovMatrix, a: ModeLabel, b: ModeLabel, eta: float) -> SymplecticOp:
    return beamsplitter_op(gamma.n_modes, gamma.index(a), gamma.index(b), eta)


def lossy_channel(gamma: CovMatrix, mode: ModeLabel, ch: ChannelParams) -> CovMatrix:
    g = np.array(gamma.entries)
    lossy_inplace(g, gamma.index(mode), ch.transmittance, ch.excess_noise)
    return CovMatrix(g, gamma.labels)


def splitter_cascade(n: int) -> list[tuple[tuple[int, int], float]]:
    """Uniform 1-to-N cascade as ((bob_k, trunk) slots, eta) steps, 1-based Bob slots.

    Step k peels 1/(N - k + 1) of the remaining trunk off to Bob k; the
    trunk moves on to slot k + 1 and finally becomes Bob N.
    """
    if n < 2:
        raise ContractViolation(f"splitter needs N >= 2, got {n}")
    return [((k, k + 1), 1.0 / (n - k + 1)) for k in range(1, n)]


def cascade_fractions(etas: Sequence[float]) -> list[float]:
    """Power fraction reaching each output of a trunk-peeling cascade."""
    out, trunk = [], 1.0
    for eta in etas:
        out.append(trunk * eta)
        trunk *= 1.0 - eta
    out.append(trunk)
    return out


def detector_dilation(gamma: CovMatrix, target: ModeLabel, det: DetectorModel) -> CovMatrix:
    """Model a trusted detector on ``target`` as a beam splitter with an EPR ancilla.

    Appends (F0, G) in an EPR state of variance v = 1 + 2 v_el / (1 - eta_d)
    and mixes F0 with the target at transmittance eta_d. The target keeps its
    label and now holds the detected mode; F0's output is labelled F.
    """
    if not isinstance(det, DetectorModel):
        raise ContractViolation("detector_dilation needs a DetectorModel")
    anc = two_mode_squeezed(det.ancilla_variance, (DET_F, DET_G))
    full = direct_sum(gamma, anc)
    g = np.array(full.entries)
    beamsplitter_inplace(g, full.index(target), full.index(DET_F), det.efficiency)
    return CovMatrix(g, full.labels)


def noise_budget_to_channels(budget: NoiseBudget, t1: float, n: int) -> tuple[float, float]:
    """Feeder excess noise and the common per-drop excess noise eps_b' T1 / N."""
    if not 0.0 < t1 <= 1.0:
        raise DomainError(f"feeder transmittance must be in (0, 1], got {t1}")
    if n < 1:
        raise ContractViolation("need at least one drop")
    return budget.eps_a, budget.eps_b_prime * t1 / n


def length_to_transmittance(length_km: float, atten_db_per_km: float = DEFAULT_ATTEN_DB_PER_KM,
                            extra_db: float = 0.0) -> float:
    if length_km < 0 or atten_db_per_km < 0 or extra_db < 0:
        raise DomainError("lengths and losses must be non-negative")
    return 10.0 ** (-(length_km * atten_db_per_km + extra_db) / 10.0)


def build_network_array(topo: NetworkTopology, v_m: float) -> np.ndarray:
    """Raw modal covariance over (A, B1..BN) before any detector."""
    if v_m < 0:
        raise DomainError(f"modulation variance must be >= 0, got {v_m}")
    n = topo.n_bobs
    g = np.eye(2 * (n + 1))
    g[0:4, 0:4] = two_mode_squeezed(v_m + 1.0, (ALICE, bob(1))).entries
    feeder = topo.feeder.channel
    lossy_inplace(g, 1, feeder.transmittance, feeder.excess_noise)
    if topo.extra_loss_db and topo.extra_loss_location == "feeder":
        lossy_inplace(g, 1, topo.extra_transmittance, 0.0)
    for k, eta in enumerate(topo.splitter, start=1):
        beamsplitter_inplace(g, k, k + 1, eta)
    for k, seg in enumerate(topo.drops, start=1):
        lossy_inplace(g, k, seg.channel.transmittance, seg.channel.excess_noise)
        if topo.extra_loss_db and topo.extra_loss_location == "drop":
            lossy_inplace(g, k, topo.extra_transmittance, 0.0)
    return 0.5 * (g + g.T)


def build_network_cov(topo: NetworkTopology, v_m: float, check: bool = True) -> CovMatrix:
    """Modal covariance matrix gamma_{A B1 ... BN} of the whole network."""
    gamma = CovMatrix(build_network_array(topo, v_m), (ALICE,) + tuple(bob(k) for k in range(1, topo.n_bobs + 1)))
    if check:
        gamma.require_physical()
    return gamma


@dataclass(frozen=True)
class PONTemplate:
    """Symmetric PON whose geometry is fixed except for the total fibre length.

    ``feeder_fraction`` of the Alice-to-Bob fibre sits before the splitter.
    The drop excess noise follows eps_b = eps_b' T1 / N with T1 the feeder
    transmittance including any extra loss placed there.
    """

    n_bobs: int
    budget: NoiseBudget
    detector: Optional[DetectorModel] = None
    atten_db_per_km: float = DEFAULT_ATTEN_DB_PER_KM
    feeder_fraction: float = 1.0
    extra_loss_db: float = 0.0
    extra_loss_location: str = "drop"

    def __post_init__(self):
        if self.n_bobs < 2:
            raise ContractViolation(f"need at least 2 Bobs, got {self.n_bobs}")
        if not 0.0 <= self.feeder_fraction <= 1.0:
            raise DomainError("feeder_fraction must be in [0, 1]")

    def with_ratio(self, ratio: float) -> "PONTemplate":
        return replace(self, budget=NoiseBudget.from_ratio(self.budget.eps_tot, ratio))

    def topology(self, distance_km: float) -> NetworkTopology:
        feeder_km = distance_km * self.feeder_fraction
        drop_km = distance_km - feeder_km
        t1 = length_to_transmittance(feeder_km, self.atten_db_per_km)
        t2 = length_to_transmittance(drop_km, self.atten_db_per_km)
        t1_noise = t1 * (10.0 ** (-self.extra_loss_db / 10.0) if self.extra_loss_location == "feeder" else 1.0)
        eps_a, eps_b = noise_budget_to_channels(self.budget, t1_noise, self.n_bobs)
        drop = Segment(ChannelParams(t2, eps_b), drop_km)
        return NetworkTopology(
            feeder=Segment(ChannelParams(t1, eps_a), feeder_km),
            drops=(drop,) * self.n_bobs,
            detectors=(self.detector,) * self.n_bobs,
            extra_loss_db=self.extra_loss_db,
            extra_loss_location=self.extra_loss_location,
        )


def topology_to_dict(topo: NetworkTopology) -> dict:
    def seg(s: Segment) -> dict:
        return {"transmittance": s.channel.transmittance, "excess_noise": s.channel.excess_noise,
                "length_km": s.length_km}

    def det(d: Optional[DetectorModel]):
        return None if d is None else {"efficiency": d.efficiency, "electronic_noise": d.electronic_noise}

    return {
        "feeder": seg(topo.feeder),
        "drops": [seg(s) for s in topo.drops],
        "splitter": list(topo.splitter),
        "detectors": [det(d) for d in topo.detectors],
        "extra_loss_db": topo.extra_loss_db,
        "extra_loss_location": topo.extra_loss_location,
    }


def topology_from_dict(data: dict) -> NetworkTopology:
    def seg(d: dict) -> Segment:
        return Segment(ChannelParams(d["transmittance"], d.get("excess_noise", 0.0)), d.get("length_km", 0.0))

    return NetworkTopology(
        feeder=seg(data["feeder"]),
        drops=tuple(seg(d) for d in data["drops"]),
        splitter=tuple(data.get("splitter", ())),
        detectors=tuple(None if d is None else DetectorModel(d["efficiency"], d.get("electronic_noise", 0.0))
                        for d in data.get("detectors", ())),
        extra_loss_db=data.get("extra_loss_db", 0.0),
        extra_loss_location=data.get("extra_loss_location", "drop"),
    )
