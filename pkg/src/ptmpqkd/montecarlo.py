"""
Sample-level simulation of state preparation, propagation and heterodyne
readout, plus covariance estimation from the simulated data.

Each Bob's measured quadrature is a fixed linear combination of independent
Gaussian sources: Alice's modulation, one feeder noise, the splitter vacua,
per-drop noise, trusted detector noise and the heterodyne vacuum. Every
source draws from its own Philox substream keyed by (block, source), so the
data only depend on (seed, topology, M) and blocks can be produced in any
order.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractViolation, DomainError
from .gaussian import ALICE, CovMatrix, bob
from .network import DetectorModel, NetworkTopology, topology_from_dict, topology_to_dict

BLOCK = 1 << 16
MIN_SAMPLES = 100
DISCLOSE_STREAM = 1 << 20
RAW_MAGIC = b"PTMPRAW\x00"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<8sIQIQ")


@dataclass(frozen=True)
class SourceModel:
    """Linear map from independent unit sources to the measured data.

    ``coeffs[k]`` gives Bob k+1's measured quadrature as a combination of
    the sources; source 0 is Alice's modulation.
    """

    stds: np.ndarray
    coeffs: np.ndarray
    names: tuple

    @property
    def n_sources(self) -> int:
        return len(self.stds)


def source_model(topo: NetworkTopology, v_m: float, noise: bool = True) -> SourceModel:
    """Coefficients of each Bob's measured quadrature in terms of the sources."""
    if v_m < 0:
        raise DomainError(f"modulation variance must be >= 0, got {v_m}")
    n = topo.n_bobs
    extra = topo.extra_transmittance if topo.extra_loss_db else 1.0
    t_feed = topo.feeder.channel.transmittance * (extra if topo.extra_loss_location == "feeder" else 1.0)
    t_extra_drop = extra if topo.extra_loss_location == "drop" else 1.0

    names = ["alice", "feeder"] + [f"splitter{k}" for k in range(1, n)]
    names += [f"drop{k}" for k in range(1, n + 1)]
    names += [f"detector{k}" for k in range(1, n + 1)]
    names += [f"heterodyne{k}" for k in range(1, n + 1)]
    s = len(names)
    var = np.zeros(s)
    var[0] = v_m
    # the coherent state's own vacuum (variance T after the feeder) merged
    # with the feeder loss and excess noise (1 - T + T eps)
    f = topo.feeder.channel
    var[1] = 1.0 + t_feed * f.excess_noise

    coeffs = np.zeros((n, s))
    trunk = np.zeros(s)
    trunk[0] = math.sqrt(t_feed)
    trunk[1] = 1.0
    for k, eta in enumerate(topo.splitter, start=1):
        vac = 1 + k
        var[vac] = 1.0
        coeffs[k - 1] = math.sqrt(eta) * trunk
        coeffs[k - 1, vac] -= math.sqrt(1.0 - eta)
        trunk = math.sqrt(1.0 - eta) * trunk
        trunk[vac] += math.sqrt(eta)
    coeffs[n - 1] = trunk

    drop0, det0, het0 = n + 1, 2 * n + 1, 3 * n + 1
    for k in range(n):
        ch = topo.drops[k].channel
        t = ch.transmittance * t_extra_drop
        coeffs[k] *= math.sqrt(t)
        coeffs[k, drop0 + k] = 1.0
        var[drop0 + k] = 1.0 - t + t * ch.excess_noise
        d = topo.detectors[k]
        if d is not None:
            coeffs[k] *= math.sqrt(d.efficiency)
            var[det0 + k] = d.added_noise
        coeffs[k, det0 + k] = 1.0
        coeffs[k, het0 + k] = 1.0
        var[het0 + k] = 1.0
    if not noise:
        var[1:] = 0.0
    return SourceModel(np.sqrt(var), coeffs, tuple(names))


def measured_cov(model: SourceModel) -> np.ndarray:
    """Exact second moments of (x_A, p_A, x_B1, p_B1, ...) under the source model."""
    n = model.coeffs.shape[0]
    full = np.zeros((n + 1, model.n_sources))
    full[0, 0] = 1.0
    full[1:] = model.coeffs
    one = full @ np.diag(model.stds ** 2) @ full.T
    return np.kron(one, np.eye(2))


def _block_ranges(m: int):
    return [(b, b * BLOCK, min(m, (b + 1) * BLOCK)) for b in range((m + BLOCK - 1) // BLOCK)]


def _stream(seed: int, block: int, source: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(block, source))
    return np.random.Generator(np.random.Philox(ss))


def _block_data(model: SourceModel, seed: int, block: int, count: int) -> np.ndarray:
    """Rows (x_A, p_A, x_B1, p_B1, ...) by columns over ``count`` pulses."""
    n = model.coeffs.shape[0]
    out = np.zeros((2 * (n + 1), count))
    bobs_x, bobs_p = out[2::2], out[3::2]
    for s in range(model.n_sources):
        sd = model.stds[s]
        if sd == 0.0:
            continue
        z = _stream(seed, block, s).standard_normal((2, count))
        z *= sd
        if s == 0:
            out[0], out[1] = z[0], z[1]
        col = model.coeffs[:, s]
        nz = np.nonzero(col)[0]
        bobs_x[nz] += col[nz, None] * z[0]
        bobs_p[nz] += col[nz, None] * z[1]
    return out


def _disclosed_mask(seed: int, block: int, count: int, fraction: float) -> np.ndarray:
    k = int(round(fraction * count))
    perm = _stream(seed, block, DISCLOSE_STREAM).permutation(count)
    mask = np.zeros(count, dtype=bool)
    mask[perm[:k]] = True
    return mask


@dataclass(frozen=True)
class SampleBatch:
    M: int
    alice_quadratures: np.ndarray
    bob_quadratures: np.ndarray
    seed: int
    topology: NetworkTopology
    v_m: float
    noise: bool = True

    @property
    def n_bobs(self) -> int:
        return self.bob_quadratures.shape[0]

    def stacked(self) -> np.ndarray:
        """(2N + 2) x M rows in quadrature order."""
        rows = [self.alice_quadratures[:, 0], self.alice_quadratures[:, 1]]
        for k in range(self.n_bobs):
            rows += [self.bob_quadratures[k, :, 0], self.bob_quadratures[k, :, 1]]
        return np.vstack(rows)

    def subset(self, mask: np.ndarray) -> "SampleBatch":
        return SampleBatch(int(mask.sum()), self.alice_quadratures[mask], self.bob_quadratures[:, mask],
                           self.seed, self.topology, self.v_m, self.noise)


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def simulate_samples(topo: NetworkTopology, v_m: float, m: int, seed: int, *,
                     noise: bool = True) -> SampleBatch:
    """Simulated Alice modulation and Bob heterodyne data for ``m`` pulses.

    With ``noise=False`` every source except Alice's modulation is forced
    to zero, which makes the channel coefficients directly readable.
    """
    if m < 1:
        raise ContractViolation(f"need at least one pulse, got M = {m}")
    seed = _check_seed(seed)
    model = source_model(topo, v_m, noise)
    data = np.empty((2 * (topo.n_bobs + 1), m))
    for b, lo, hi in _block_ranges(m):
        data[:, lo:hi] = _block_data(model, seed, b, hi - lo)
    alice = np.ascontiguousarray(data[0:2].T)
    bobs = np.ascontiguousarray(data[2:].reshape(topo.n_bobs, 2, m).transpose(0, 2, 1))
    return SampleBatch(m, alice, bobs, seed, topo, float(v_m), noise)


def disclosure_split(batch: SampleBatch, fraction: float = 0.5) -> tuple[SampleBatch, SampleBatch]:
    """Split into (disclosed estimation subset, key subset); seeded by the batch seed."""
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"disclosed fraction must be in (0, 1), got {fraction}")
    mask = np.concatenate([_disclosed_mask(batch.seed, b, hi - lo, fraction)
                           for b, lo, hi in _block_ranges(batch.M)])
    return batch.subset(mask), batch.subset(~mask)


@dataclass(frozen=True)
class MomentSums:
    """Raw second-moment sums over the pulses used for estimation."""

    sums: np.ndarray
    count: int

    def __add__(self, other: "MomentSums") -> "MomentSums":
        return MomentSums(self.sums + other.sums, self.count + other.count)

    @property
    def second_moments(self) -> np.ndarray:
        return self.sums / self.count


def batch_moments(batch: SampleBatch) -> MomentSums:
    x = batch.stacked()
    return MomentSums(x @ x.T, batch.M)


def stream_moments(topo: NetworkTopology, v_m: float, m: int, seed: int, *,
                   fraction: Optional[float] = None, noise: bool = True,
                   threads: int = 1) -> MomentSums:
    """Moment sums of the data ``simulate_samples`` would return, without storing it.

    With ``fraction`` only the disclosed subset of ``disclosure_split``
    enters the sums. Blocks may run on several threads; the partial sums
    are always added in block order.
    """
    if m < 1:
        raise ContractViolation(f"need at least one pulse, got M = {m}")
    if fraction is not None and not 0.0 < fraction < 1.0:
        raise DomainError(f"disclosed fraction must be in (0, 1), got {fraction}")
    seed = _check_seed(seed)
    model = source_model(topo, v_m, noise)

    def one(rng):
        b, lo, hi = rng
        x = _block_data(model, seed, b, hi - lo)
        if fraction is not None:
            x = x[:, _disclosed_mask(seed, b, hi - lo, fraction)]
        return MomentSums(x @ x.T, x.shape[1])

    ranges = _block_ranges(m)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, ranges))
    else:
        parts = [one(r) for r in ranges]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


@dataclass(frozen=True)
class EstimatedCov:
    gamma_hat: CovMatrix
    standard_errors: np.ndarray
    M: int
    moments: np.ndarray = field(repr=False, default=None)

    def z_scores(self, reference: CovMatrix) -> np.ndarray:
        ref = reference.reorder(self.gamma_hat.labels).entries
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.gamma_hat.entries - ref) / self.standard_errors
        return np.where(self.standard_errors > 0, z, 0.0)


def estimate_from_moments(moments: MomentSums, detectors) -> EstimatedCov:
    """Modal covariance matrix and its standard errors from measured second moments.

    Alice's data are mapped to the entanglement-based mode A (V_A = V_M + 1,
    p quadrature conjugated, Alice-Bob terms scaled by sqrt((V_M + 2) / V_M)).
    Bob data have the heterodyne vacuum and trusted detector noise removed
    and are unscaled by sqrt(eta_d). Errors use the Gaussian fourth-moment
    formula Cov(S_ij, S_kl) = (S_ik S_jl + S_il S_jk) / M, with the delta
    method for the dependence on the estimated V_M.
    """
    m = moments.count
    if m < MIN_SAMPLES:
        raise ContractViolation(f"need at least {MIN_SAMPLES} samples to estimate, got {m}")
    s = moments.second_moments
    s = 0.5 * (s + s.T)
    dim = s.shape[0]
    n = dim // 2 - 1
    dets = list(detectors)
    if len(dets) == 1:
        dets = dets * n
    if len(dets) != n:
        raise ContractViolation(f"{len(dets)} detectors for {n} Bobs")

    def cov_s(i, j, k, l):
        return (s[i, k] * s[j, l] + s[i, l] * s[j, k]) / m

    gain = np.ones(dim)
    sign = np.ones(dim)
    sign[1] = -1.0
    offset = np.zeros(dim)
    offset[0:2] = -1.0
    for k, d in enumerate(dets):
        gain[2 + 2 * k:4 + 2 * k] = 1.0 if d is None else math.sqrt(d.efficiency)
        offset[2 + 2 * k:4 + 2 * k] = 1.0 + (0.0 if d is None else d.added_noise)

    v_hat = 0.5 * (s[0, 0] + s[1, 1])
    if v_hat <= 0.0:
        raise DomainError("estimated modulation variance is zero; Alice-Bob terms undefined")
    kfac = math.sqrt((v_hat + 2.0) / v_hat)
    dk = -1.0 / (v_hat * v_hat * kfac)  # d kfac / d v_hat

    g = np.empty_like(s)
    se = np.empty_like(s)
    for i in range(dim):
        for j in range(i, dim):
            a_side, b_side = i < 2, j < 2
            if a_side == b_side:
                # Alice-Alice or Bob-Bob: affine in one moment
                scale = sign[i] * sign[j] / (gain[i] * gain[j])
                val = scale * (s[i, j] - (offset[i] if i == j else 0.0))
                var = scale * scale * cov_s(i, j, i, j)
            else:
                scale = sign[i] / gain[j]
                val = scale * kfac * s[i, j]
                a = scale * kfac
                b = scale * s[i, j] * dk * 0.5
                var_vv = cov_s(0, 0, 0, 0) + cov_s(1, 1, 1, 1) + 2.0 * cov_s(0, 0, 1, 1)
                cov_cv = cov_s(i, j, 0, 0) + cov_s(i, j, 1, 1)
                var = a * a * cov_s(i, j, i, j) + b * b * var_vv + 2.0 * a * b * cov_cv
            g[i, j] = g[j, i] = val
            se[i, j] = se[j, i] = math.sqrt(max(var, 0.0))
    labels = (ALICE,) + tuple(bob(k) for k in range(1, n + 1))
    return EstimatedCov(CovMatrix(g, labels), se, m, s)


def estimate_cov(batch: SampleBatch, det: Optional[DetectorModel] = None) -> EstimatedCov:
    """Estimate from a batch; ``det`` overrides the topology's detectors for every Bob."""
    if batch.M < MIN_SAMPLES:
        raise ContractViolation(f"need at least {MIN_SAMPLES} samples to estimate, got {batch.M}")
    dets = (det,) if det is not None else batch.topology.detectors
    return estimate_from_moments(batch_moments(batch), dets)


def write_raw(batch: SampleBatch, path) -> tuple[Path, Path]:
    """Column dump: header then each of the 2N + 2 rows as little-endian float64."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, batch.M, batch.n_bobs, batch.seed))
        fh.write(batch.stacked().astype("<f8").tobytes())
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({"topology": topology_to_dict(batch.topology), "v_m": batch.v_m,
                                "noise": batch.noise}, indent=2))
    return path, side


def read_raw(path) -> SampleBatch:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, m, n, seed = _RAW_HEADER.unpack_from(raw)
    if magic != RAW_MAGIC:
        raise ContractViolation(f"{path} is not a raw sample dump")
    if version != RAW_VERSION:
        raise ContractViolation(f"unsupported raw dump version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_RAW_HEADER.size).reshape(2 * (n + 1), m)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    topo = topology_from_dict(side["topology"])
    alice = np.ascontiguousarray(data[0:2].T)
    bobs = np.ascontiguousarray(data[2:].reshape(n, 2, m).transpose(0, 2, 1))
    return SampleBatch(m, alice, bobs, seed, topo, side["v_m"], side.get("noise", True))


def fit_network_model(gamma_hat: CovMatrix) -> CovMatrix:
    """Least-squares projection of an estimate onto single-feeder passive networks.

    Any such network gives V_A = V_M + 1, C_{A,Bk} = alpha_k sqrt(V_M (V_M + 2)),
    W_ij = kappa alpha_i alpha_j for i != j and W_kk = kappa alpha_k^2 + 1 + delta_k,
    all phase insensitive. The x and p estimates are averaged, kappa is
    fitted to the Bob-Bob covariances and delta_k absorbs the rest of each
    Bob variance. The result is the usual channel-parameter estimate
    written back as a covariance matrix.
    """
    g = gamma_hat.reorder((ALICE,) + tuple(gamma_hat.bobs())).entries
    n = g.shape[0] // 2 - 1
    if n < 2:
        raise ContractViolation("network fit needs at least two Bobs")
    v_m = 0.5 * (g[0, 0] + g[1, 1]) - 1.0
    if v_m <= 0.0:
        raise DomainError("estimated modulation variance is not positive")
    c = np.array([0.5 * (g[0, 2 + 2 * k] - g[1, 3 + 2 * k]) for k in range(n)])
    w = 0.5 * (g[2::2, 2::2] + g[3::2, 3::2])
    alpha = c / math.sqrt(v_m * (v_m + 2.0))
    aa = np.outer(alpha, alpha)
    iu = np.triu_indices(n, 1)
    den = float(np.sum(aa[iu] ** 2))
    if den == 0.0:
        raise DomainError("no Alice-Bob correlation to fit the feeder against")
    kappa = float(np.sum(w[iu] * aa[iu])) / den
    delta = np.diag(w) - 1.0 - alpha * alpha * kappa
    bobs_w = kappa * aa + np.diag(1.0 + delta)
    out = np.zeros_like(g)
    out[0:2, 0:2] = (v_m + 1.0) * np.eye(2)
    out[0, 2::2] = out[2::2, 0] = c
    out[1, 3::2] = out[3::2, 1] = -c
    out[2::2, 2::2] = bobs_w
    out[3::2, 3::2] = bobs_w
    return CovMatrix(out, (ALICE,) + tuple(gamma_hat.bobs()))


@dataclass
class ValidationReport:
    topology: dict
    v_m: float
    M: int
    estimation_samples: int
    seed: int
    target: str
    max_abs_z: float
    z_scores: np.ndarray
    gamma_analytic: np.ndarray
    gamma_hat: np.ndarray
    standard_errors: np.ndarray
    K_analytic: float
    K_estimated: float
    rate_gap: float
    min_eig_gamma_hat: float
    insufficient_precision: bool
    z_threshold: float = 5.0
    gap_threshold: float = 0.05
    error: str = ""

    @property
    def covariance_ok(self) -> bool:
        return self.max_abs_z < self.z_threshold

    @property
    def rate_ok(self) -> bool:
        return not self.error and self.rate_gap < self.gap_threshold

    @property
    def passed(self) -> bool:
        return self.covariance_ok and self.rate_ok

    def to_dict(self) -> dict:
        return {
            "topology": self.topology, "v_m": self.v_m, "M": self.M,
            "estimation_samples": self.estimation_samples, "seed": self.seed,
            "target": self.target, "max_abs_z": self.max_abs_z,
            "z_scores": self.z_scores.tolist(),
            "gamma_analytic": self.gamma_analytic.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "standard_errors": self.standard_errors.tolist(),
            "K_analytic": self.K_analytic, "K_estimated": self.K_estimated,
            "rate_gap": self.rate_gap, "min_eig_gamma_hat": self.min_eig_gamma_hat,
            "insufficient_precision": self.insufficient_precision,
            "covariance_ok": self.covariance_ok, "rate_ok": self.rate_ok,
            "passed": self.passed, "error": self.error,
        }


PRECISION_FLOOR = 10**6


def validate(topo: NetworkTopology, params, m: int, seed: int, *, fraction: Optional[float] = 0.5,
             threads: int = 1, target=None, reduce: bool = True) -> ValidationReport:
    """Simulate, estimate and compare against the analytic matrix and key rate.

    The estimated rate comes from :func:`fit_network_model` applied to the
    estimate; the raw estimate's physicality is reported, never clamped.
    Runs with fewer than 10^6 pulses are flagged as lacking precision.
    """
    from .gaussian import is_physical
    from .keyrate import key_rate
    from .network import build_network_cov

    target = target or bob(topo.n_bobs)
    analytic = build_network_cov(topo, params.v_m)
    det_map = {bob(k): topo.detector(k) for k in range(1, topo.n_bobs + 1)}
    k_ref = key_rate(analytic, target, params, detectors=det_map, reduce=reduce).K_bit_per_pulse
    mom = stream_moments(topo, params.v_m, m, seed, fraction=fraction, threads=threads)
    est = estimate_from_moments(mom, topo.detectors)
    z = est.z_scores(analytic)
    _, worst = is_physical(est.gamma_hat, tol=np.inf)
    err, k_hat = "", float("nan")
    try:
        fitted = fit_network_model(est.gamma_hat)
        k_hat = key_rate(fitted, target, params, detectors=det_map, reduce=reduce).K_bit_per_pulse
    except (ArithmeticError, ValueError) as exc:
        err = f"{type(exc).__name__}: {exc}"
    gap = abs(k_hat - k_ref) / k_ref if k_ref > 0 else abs(k_hat - k_ref)
    return ValidationReport(
        topology=topology_to_dict(topo), v_m=params.v_m, M=m, estimation_samples=est.M, seed=seed,
        target=str(target), max_abs_z=float(np.max(np.abs(z))), z_scores=z,
        gamma_analytic=np.array(analytic.entries), gamma_hat=np.array(est.gamma_hat.entries),
        standard_errors=est.standard_errors, K_analytic=k_ref, K_estimated=k_hat,
        rate_gap=float(gap), min_eig_gamma_hat=float(worst),
        insufficient_precision=m < PRECISION_FLOOR, error=err)
