"""
Covariance-matrix algebra for Gaussian states in shot-noise units.

Quadratures are ordered (x1, p1, x2, p2, ...), so every mode owns one 2x2
block and the vacuum is the identity.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, NumericalError

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
PHYSICALITY_TOL = 1e-9
SYMPLECTIC_TOL = 1e-10
CLAMP_TOL = 1e-6

I2 = np.eye(2)
SIGMA_Z = np.diag([1.0, -1.0])


class Role(enum.Enum):
    ALICE = "A"
    BOB = "B"
    COMBINED_REST = "BR"
    DETECTOR_F = "F"
    DETECTOR_G = "G"
    ENVIRONMENT = "E"


@dataclass(frozen=True, order=True)
class ModeLabel:
    role: Role = field(compare=False)
    index: int = field(default=0, compare=False)
    # sort key keeps Alice first, then Bobs by index, then the rest
    _key: tuple = field(init=False, repr=False, compare=True)

    def __post_init__(self):
        order = list(Role).index(self.role)
        object.__setattr__(self, "_key", (order, self.index))

    def __str__(self) -> str:
        if self.role in (Role.BOB, Role.ENVIRONMENT):
            return f"{self.role.value}{self.index}"
        return self.role.value

    @classmethod
    def parse(cls, text: str) -> "ModeLabel":
        text = text.strip()
        for role in (Role.COMBINED_REST, Role.ALICE, Role.DETECTOR_F, Role.DETECTOR_G):
            if text == role.value:
                return cls(role)
        for role in (Role.BOB, Role.ENVIRONMENT):
            if text.startswith(role.value) and text[1:].isdigit():
                return cls(role, int(text[1:]))
        raise ContractViolation(f"cannot parse mode label {text!r}")


ALICE = ModeLabel(Role.ALICE)
REST = ModeLabel(Role.COMBINED_REST)
DET_F = ModeLabel(Role.DETECTOR_F)
DET_G = ModeLabel(Role.DETECTOR_G)


def bob(i: int) -> ModeLabel:
    return ModeLabel(Role.BOB, i)


def symplectic_form(n: int) -> np.ndarray:
    """Block-diagonal symplectic form with n copies of [[0, 1], [-1, 0]]."""
    if n < 1:
        raise ContractViolation(f"need at least one mode, got {n}")
    return np.kron(np.eye(n), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True, eq=False)
class CovMatrix:
    """Labelled 2n x 2n covariance matrix.

    Construction checks shape, symmetry and label uniqueness. Physicality is
    checked explicitly through :func:`is_physical` / :meth:`require_physical`
    because estimated matrices are only physical up to statistical error.
    """

    entries: np.ndarray
    labels: tuple

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        labels = tuple(self.labels)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2:
            raise ContractViolation(f"covariance matrix must be 2n x 2n, got {m.shape}")
        if len(labels) != m.shape[0] // 2:
            raise ContractViolation(
                f"{len(labels)} labels for a {m.shape[0] // 2}-mode matrix")
        if len(set(labels)) != len(labels):
            raise ContractViolation(f"duplicate mode labels: {[str(l) for l in labels]}")
        scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > SYMMETRY_RTOL * scale:
            raise ContractViolation(f"covariance matrix not symmetric (max asymmetry {asym:.3e})")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_pos", {l: k for k, l in enumerate(labels)})

    @property
    def n_modes(self) -> int:
        return len(self.labels)

    def index(self, label: ModeLabel) -> int:
        try:
            return self._pos[label]
        except KeyError:
            raise ContractViolation(f"mode {label} not present in {self.label_names()}") from None

    def label_names(self) -> list[str]:
        return [str(l) for l in self.labels]

    def block(self, a: ModeLabel, b: ModeLabel | None = None) -> np.ndarray:
        i = self.index(a)
        j = i if b is None else self.index(b)
        return self.entries[2 * i:2 * i + 2, 2 * j:2 * j + 2].copy()

    def bobs(self) -> list[ModeLabel]:
        return [l for l in self.labels if l.role is Role.BOB]

    def reorder(self, labels: Sequence[ModeLabel]) -> "CovMatrix":
        """Return the same state with modes permuted into ``labels`` order."""
        labels = tuple(labels)
        if sorted(labels) != sorted(self.labels):
            raise ContractViolation("reorder must be a permutation of the existing labels")
        idx = _quadrature_indices([self.index(l) for l in labels])
        return CovMatrix(self.entries[np.ix_(idx, idx)], labels)

    def relabel(self, mapping: dict) -> "CovMatrix":
        return CovMatrix(self.entries, tuple(mapping.get(l, l) for l in self.labels))

    def require_physical(self, tol: float = PHYSICALITY_TOL) -> "CovMatrix":
        ok, worst = is_physical(self, tol)
        if not ok:
            raise NumericalError(
                f"non-physical covariance matrix: min eig(gamma + i Omega) = {worst:.3e}")
        return self

    def to_dict(self) -> dict:
        return {"labels": self.label_names(), "entries": self.entries.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "CovMatrix":
        return cls(np.asarray(data["entries"], dtype=float),
                   tuple(ModeLabel.parse(s) for s in data["labels"]))


def _quadrature_indices(modes: Iterable[int]) -> list[int]:
    out = []
    for k in modes:
        out.extend((2 * k, 2 * k + 1))
    return out


@dataclass(frozen=True, eq=False)
class SymplecticOp:
    matrix: np.ndarray
    description: str = ""

    def __post_init__(self):
        s = np.array(self.matrix, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] % 2:
            raise ContractViolation(f"symplectic matrix must be 2n x 2n, got {s.shape}")
        omega = symplectic_form(s.shape[0] // 2)
        err = float(np.max(np.abs(s @ omega @ s.T - omega)))
        if err > SYMPLECTIC_TOL:
            raise ContractViolation(f"matrix is not symplectic (|S Omega S^T - Omega| = {err:.3e})")
        s.setflags(write=False)
        object.__setattr__(self, "matrix", s)


def is_physical(gamma: CovMatrix, tol: float = PHYSICALITY_TOL) -> tuple[bool, float]:
    """Check the uncertainty principle gamma + i Omega >= 0.

    Returns the verdict and the smallest eigenvalue of gamma + i Omega.
    """
    m = gamma.entries if isinstance(gamma, CovMatrix) else np.asarray(gamma, dtype=float)
    if not np.allclose(m, m.T, rtol=0, atol=SYMMETRY_RTOL * max(1.0, np.max(np.abs(m)))):
        raise ContractViolation("is_physical requires a symmetric matrix")
    herm = m + 1j * symplectic_form(m.shape[0] // 2)
    worst = float(np.linalg.eigvalsh(herm)[0])
    return worst >= -tol, worst


def apply_symplectic(gamma: CovMatrix, s: SymplecticOp) -> CovMatrix:
    """Return S gamma S^T."""
    if s.matrix.shape != gamma.entries.shape:
        raise ContractViolation(
            f"symplectic of shape {s.matrix.shape} cannot act on {gamma.entries.shape}")
    return CovMatrix(s.matrix @ gamma.entries @ s.matrix.T, gamma.labels)


def symplectic_eigenvalues(gamma: CovMatrix | np.ndarray, clamp_tol: float = CLAMP_TOL) -> np.ndarray:
    """Sorted symplectic spectrum (n values).

    With gamma = L L^T, the real antisymmetric matrix L^T Omega L is similar
    to Omega gamma, so its eigenvalues are +/- i nu; the Hermitian solver on
    i L^T Omega L returns them accurately. Values less than ``clamp_tol``
    below one are clamped to one; anything lower raises.
    """
    m = gamma.entries if isinstance(gamma, CovMatrix) else np.asarray(gamma, dtype=float)
    n = m.shape[0] // 2
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(m)
        raise NumericalError(
            f"covariance matrix is not positive definite (min eigenvalue {eig[0]:.3e}, "
            f"condition {abs(eig[-1] / eig[0]) if eig[0] else np.inf:.3e})") from None
    anti = chol.T @ symplectic_form(n) @ chol
    ev = np.linalg.eigvalsh(1j * anti)
    nu = np.sort(ev[n:])
    low = float(nu[0]) if n else 1.0
    if low < 1.0 - clamp_tol:
        raise NumericalError(
            f"symplectic eigenvalue {low:.9f} below 1 by more than {clamp_tol:g}; state not physical")
    if low < 1.0:
        logger.debug("clamped symplectic eigenvalue %.3e below 1", 1.0 - low)
    return np.maximum(nu, 1.0)


def g_function(x: float) -> float:
    """Bosonic entropy function (x+1) log2(x+1) - x log2 x, in bits."""
    if x < -1e-12:
        raise DomainError(f"g_function undefined for x = {x}")
    if x <= 0.0:
        return 0.0
    return float((x + 1.0) * np.log2(x + 1.0) - x * np.log2(x))


def von_neumann_entropy(gamma: CovMatrix | np.ndarray, clamp_tol: float = CLAMP_TOL) -> float:
    nu = symplectic_eigenvalues(gamma, clamp_tol)
    return float(sum(g_function((v - 1.0) / 2.0) for v in nu))


def heterodyne_condition(gamma: CovMatrix, measured_mode: ModeLabel) -> CovMatrix:
    """State of the remaining modes after heterodyning ``measured_mode``.

    gamma_rest - sigma^T (gamma_m + I)^-1 sigma.
    """
    k = gamma.index(measured_mode)
    keep = [i for i in range(gamma.n_modes) if i != k]
    m_idx = [2 * k, 2 * k + 1]
    r_idx = _quadrature_indices(keep)
    g = gamma.entries
    gm = g[np.ix_(m_idx, m_idx)] + I2
    if abs(np.linalg.det(gm)) < 1e-300 or np.linalg.cond(gm) > 1e14:
        raise NumericalError(f"heterodyne conditioning matrix for {measured_mode} is singular")
    sigma = g[np.ix_(m_idx, r_idx)]
    cond = g[np.ix_(r_idx, r_idx)] - sigma.T @ np.linalg.solve(gm, sigma)
    return CovMatrix(0.5 * (cond + cond.T), tuple(gamma.labels[i] for i in keep))


def drop_modes(gamma: CovMatrix, modes: Iterable[ModeLabel]) -> CovMatrix:
    """Partial trace over ``modes``."""
    drop = {gamma.index(l) for l in modes}
    keep = [i for i in range(gamma.n_modes) if i not in drop]
    idx = _quadrature_indices(keep)
    return CovMatrix(gamma.entries[np.ix_(idx, idx)], tuple(gamma.labels[i] for i in keep))


def direct_sum(a: CovMatrix, b: CovMatrix) -> CovMatrix:
    n, m = a.entries.shape[0], b.entries.shape[0]
    out = np.zeros((n + m, n + m))
    out[:n, :n] = a.entries
    out[n:, n:] = b.entries
    return CovMatrix(out, a.labels + b.labels)


def two_mode_squeezed(v: float, labels: Sequence[ModeLabel]) -> CovMatrix:
    """Two-mode squeezed vacuum (EPR state) with local variance v."""
    if v < 1.0:
        raise DomainError(f"EPR variance must be >= 1, got {v}")
    c = np.sqrt(max(v * v - 1.0, 0.0))
    g = np.block([[v * I2, c * SIGMA_Z], [c * SIGMA_Z, v * I2]])
    return CovMatrix(g, tuple(labels))


def beamsplitter_inplace(g: np.ndarray, i: int, j: int, eta: float) -> None:
    """Apply the beam splitter between mode positions i and j to a raw array.

    Output i = sqrt(eta) a_i - sqrt(1 - eta) a_j,
    output j = sqrt(1 - eta) a_i + sqrt(eta) a_j.
    Only rows and columns of the two modes are touched.
    """
    t, r = np.sqrt(eta), np.sqrt(1.0 - eta)
    ii, jj = slice(2 * i, 2 * i + 2), slice(2 * j, 2 * j + 2)
    ri, rj = g[ii, :].copy(), g[jj, :].copy()
    g[ii, :] = t * ri - r * rj
    g[jj, :] = r * ri + t * rj
    ci, cj = g[:, ii].copy(), g[:, jj].copy()
    g[:, ii] = t * ci - r * cj
    g[:, jj] = r * ci + t * cj


def lossy_inplace(g: np.ndarray, k: int, transmittance: float, excess_noise: float) -> None:
    """Thermal-loss channel on mode position k with input-referred excess noise."""
    kk = slice(2 * k, 2 * k + 2)
    s = np.sqrt(transmittance)
    g[kk, :] *= s
    g[:, kk] *= s
    g[kk, kk] += (1.0 - transmittance + transmittance * excess_noise) * I2
