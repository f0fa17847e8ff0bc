"""Dense symmetric-matrix utilities and the deterministic RNG contract.

Everything downstream works in float64. Random numbers come from counter-based
Philox streams keyed by (master_seed, stream_id); standard normals are produced
by the inverse-CDF transform of the raw uniform stream (see RngStream.normal),
so identical keys reproduce identical draws on any platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

# Relative symmetry tolerance for inputs, and the clamping threshold for
# near-zero eigenvalues (relative to the largest eigenvalue).
SYMMETRY_TOL = 1e-12
EIG_CLAMP_REL = 1e-12
# Smallest eigenvalue allowed when inverting.
INV_MIN_EIG = 1e-10


class SingularMatrixError(ValueError):
    """Inversion of a (near-)singular symmetric PSD matrix was requested."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a float64 2-D array and demand finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def check_symmetric(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate squareness and symmetry within SYMMETRY_TOL (relative)."""
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    scale = np.maximum(1.0, np.abs(m))
    if not np.all(np.abs(m - m.T) <= SYMMETRY_TOL * scale):
        raise ValueError(f"{name} is not symmetric within {SYMMETRY_TOL}")
    return m


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as orthonormal columns, so a = U diag(w) U^T.
    """
    m = check_symmetric(a)
    w, u = np.linalg.eigh(m)
    return w[::-1].copy(), u[:, ::-1].copy()


def _clamped_eig(a) -> tuple[np.ndarray, np.ndarray]:
    # Eigenvalues below EIG_CLAMP_REL * lambda_max clamp to exactly 0; an
    # inversion that later hits a clamped eigenvalue is an error, never an
    # implicit pseudo-inverse.
    w, u = sym_eig(a)
    lam_max = max(w[0], 0.0)
    w = np.where(w > EIG_CLAMP_REL * lam_max, w, 0.0)
    return w, u


@dataclass(frozen=True)
class SpdMatrix:
    """A symmetric PSD matrix together with its clamped eigendecomposition."""

    base: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def from_array(cls, a) -> "SpdMatrix":
        m = check_symmetric(a, "SPD candidate")
        w, u = _clamped_eig(m)
        if w[-1] < 0:
            raise ValueError("matrix has a negative eigenvalue beyond clamping")
        return cls(base=m, eigenvalues=w, eigenvectors=u)

    def _apply(self, f) -> np.ndarray:
        u = self.eigenvectors
        return (u * f(self.eigenvalues)) @ u.T

    def sqrt(self) -> np.ndarray:
        return self._apply(np.sqrt)

    def inv_sqrt(self) -> np.ndarray:
        lam_min = self.eigenvalues[-1]
        if lam_min < INV_MIN_EIG:
            raise SingularMatrixError(
                f"cannot invert: smallest eigenvalue {lam_min:.3e} < {INV_MIN_EIG}",
                eigenvalue=float(lam_min),
            )
        return self._apply(lambda w: 1.0 / np.sqrt(w))

    def inv(self) -> np.ndarray:
        lam_min = self.eigenvalues[-1]
        if lam_min < INV_MIN_EIG:
            raise SingularMatrixError(
                f"cannot invert: smallest eigenvalue {lam_min:.3e} < {INV_MIN_EIG}",
                eigenvalue=float(lam_min),
            )
        return self._apply(lambda w: 1.0 / w)


def spd_sqrt(a) -> np.ndarray:
    """Symmetric PSD square root: spd_sqrt(a) @ spd_sqrt(a) == a."""
    return SpdMatrix.from_array(a).sqrt()


def spd_inv_sqrt(a) -> np.ndarray:
    """Inverse symmetric square root; requires smallest eigenvalue >= 1e-10."""
    return SpdMatrix.from_array(a).inv_sqrt()


def _hash_to_u64(text: str) -> int:
    # Documented stream-id derivation: first 8 bytes (big-endian) of the
    # SHA-256 of the UTF-8 label.
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class RngStream:
    """Deterministic random stream keyed by (master_seed, stream_id).

    Backed by Philox4x64 with key = [master_seed, stream_id]; distinct stream
    ids are independent by construction. Standard normals use the inverse-CDF
    transform z = ndtri((r + 0.5) * 2**-64) of raw 64-bit uniforms r, which is
    platform independent and documented here so runs reproduce across machines.
    """

    master_seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = np.array(
            [self.master_seed % 2**64, self.stream_id % 2**64], dtype=np.uint64
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *parts) -> "RngStream":
        """Child stream with id = sha256("<id>:<part>/<part>/...")[:8]."""
        label = f"{self.stream_id}:" + "/".join(str(p) for p in parts)
        return RngStream(self.master_seed, _hash_to_u64(label))

    def uniform(self, size=None) -> np.ndarray:
        """Uniforms in (0, 1) as (r + 0.5) * 2**-64 of raw 64-bit draws."""
        raw = self._gen.integers(0, 2**64, size=size, dtype=np.uint64)
        return (raw.astype(np.float64) + 0.5) * 2.0**-64

    def normal(self, size=None) -> np.ndarray:
        """Standard normals via the inverse normal CDF of uniform()."""
        return ndtri(self.uniform(size=size))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)
