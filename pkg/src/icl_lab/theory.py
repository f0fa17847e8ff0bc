"""Closed-form optima, risks, Gaussian moment identities, and their oracles.

Every identity here has an independent Monte-Carlo oracle (mc_moment_oracle),
so agreement is a measured quantity, never an assumption. That matters: the
fourth cross-moment identity implemented below is kept verbatim even though
the oracles contradict it (see cross_quartic_moment), and every quantity
downstream of it is reported against a numeric optimum rather than asserted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .designs import DesignSpec, sample_batch
from .numerics import RngStream, SpdMatrix, as_matrix


@dataclass(frozen=True)
class TheoryResult:
    """An optimal weight (full matrix or c * I) with its optimal risk."""

    risk: float
    d: int
    weight: np.ndarray | None = None
    c: float | None = None

    @property
    def normalized_risk(self) -> float:
        return self.risk / self.d

    def weight_matrix(self) -> np.ndarray:
        if self.weight is not None:
            return self.weight
        return self.c * np.eye(self.d)


def fused_covariance(sigma_x, sigma_beta) -> np.ndarray:
    """S = S_x^{1/2} S_beta S_x^{1/2}, the covariance every risk depends on."""
    sqrt_x = SpdMatrix.from_array(sigma_x).sqrt()
    return sqrt_x @ as_matrix(sigma_beta, "sigma_beta") @ sqrt_x


def population_loss(w, sigma_x, sigma_beta, noise_std: float, n: int) -> float:
    """Exact population risk of the one-step preconditioned predictor.

    With Wb = S_x^{1/2} W S_x^{1/2}, S the fused covariance and
    M = tr(S) + noise^2:

        L(W) = M - 2n tr(S Wb) + n(n+1) tr(S Wb' Wb) + n M tr(Wb Wb')
    """
    w = as_matrix(w, "w")
    sqrt_x = SpdMatrix.from_array(sigma_x).sqrt()
    sig = fused_covariance(sigma_x, sigma_beta)
    wb = sqrt_x @ w @ sqrt_x
    m_const = float(np.trace(sig)) + noise_std**2
    return float(
        m_const
        - 2.0 * n * np.trace(sig @ wb)
        + n * (n + 1.0) * np.einsum("jk,ik,ij->", sig, wb, wb)
        + n * m_const * np.sum(wb * wb)
    )


def optimal_independent(sigma_x, sigma_beta, noise_std: float, n: int) -> TheoryResult:
    """Optimal preconditioner and risk for the independent design.

    W* = S_x^{-1/2} ((n+1) I + M S^{-1})^{-1} S_x^{-1/2} and
    L* = M - n tr(S Wb*).
    """
    sx = SpdMatrix.from_array(sigma_x)
    inv_sqrt_x = sx.inv_sqrt()
    sig = SpdMatrix.from_array(fused_covariance(sigma_x, sigma_beta))
    if sig.eigenvalues[-1] <= 0.0:
        raise ValueError("fused covariance must be full rank")
    d = sig.base.shape[0]
    m_const = float(np.sum(sig.eigenvalues)) + noise_std**2
    lam = sig.eigenvalues
    wb_eigs = lam / ((n + 1.0) * lam + m_const)
    wb = (sig.eigenvectors * wb_eigs) @ sig.eigenvectors.T
    risk = m_const - n * float(np.sum(lam * lam / ((n + 1.0) * lam + m_const)))
    return TheoryResult(risk=risk, d=d, weight=inv_sqrt_x @ wb @ inv_sqrt_x)


# ---------------------------------------------------------------------------
# Correlated designs: scalar-times-identity optima
# ---------------------------------------------------------------------------

def rag_exact(alpha: float, noise_std: float, d: int, n: int,
              gamma_sq: float | None = None) -> TheoryResult:
    """Exact optimum for query-correlated demonstrations, x_i = alpha x + gamma g_i.

    gamma_sq defaults to 1 - alpha^2 (the marginal-preserving normalisation).
    The optimum is W* = c I with

        c = (a(d+2) + g) / (a^2 n (d+2)(d+4) + a g (d+2)(d+2n+3)
                            + g^2 (d+n+1) + s^2 (a(d+2) + g))

    writing a = alpha^2, g = gamma^2, s^2 the noise variance, and

        L* = d + s^2 - c n d (a(d+2) + g).
    """
    a = alpha * alpha
    g = (1.0 - a) if gamma_sq is None else gamma_sq
    s2 = noise_std**2
    num = a * (d + 2) + g
    den = (
        a * a * n * (d + 2) * (d + 4)
        + a * g * (d + 2) * (d + 2 * n + 3)
        + g * g * (d + n + 1)
        + s2 * num
    )
    c = num / den
    risk = d + s2 - c * n * d * num
    return TheoryResult(risk=risk, d=d, c=c)


def rag_scalar_loss(c: float, alpha: float, noise_std: float, d: int, n: int,
                    gamma_sq: float | None = None) -> float:
    """Population risk of W = c I under the query-correlated design."""
    a = alpha * alpha
    g = (1.0 - a) if gamma_sq is None else gamma_sq
    s2 = noise_std**2
    num = a * (d + 2) + g
    den = (
        a * a * n * (d + 2) * (d + 4)
        + a * g * (d + 2) * (d + 2 * n + 3)
        + g * g * (d + n + 1)
        + s2 * num
    )
    return d + s2 - 2.0 * n * d * num * c + n * d * den * c * c


def rag_approx(alpha: float, noise_std: float, d: int, n: int) -> TheoryResult:
    """Large-d approximation: effective sample size kappa n, kappa = alpha^2 d + 1."""
    kappa = alpha * alpha * d + 1.0
    s2 = noise_std**2
    c = 1.0 / (kappa * n + d + s2)
    risk = d + s2 - kappa * n * d / (kappa * n + d + s2)
    return TheoryResult(risk=risk, d=d, c=c)


def _task_feature_coefficients(d: int, n: int) -> tuple[int, int, int, int, int]:
    # Integer arithmetic until the final division avoids cancellation in the
    # polynomial coefficients.
    d0 = d + 2
    d1 = (d + 2) * (d + 4)
    d2 = (d + 2) * (d + 4) * (d + 6) * n
    d3 = (d + 2) * (d + 4) * (3 * n + 4)
    d4 = (d + 2) * (3 * n + d + 3) + (d + 8)
    return d0, d1, d2, d3, d4


def task_feature_exact(alpha: float, noise_std: float, d: int, n: int,
                       gamma_sq: float | None = None) -> TheoryResult:
    """Exact optimum for task-correlated features, x_i = alpha beta + g_i.

    gamma_sq is the squared label scale, defaulting to 1/kappa. W* = c I with
    c a ratio of degree-six polynomials in alpha whose integer coefficients are
    returned by _task_feature_coefficients, and

        L* = d gamma^2 ((d+2) alpha^2 + 1) + s^2
             - c n d gamma^2 ((d+2)(d+4) alpha^4 + 2 (d+2) alpha^2 + 1).

    The constant inherits the fourth cross-moment identity; treat its
    alpha > 0 values as reported, not certified (compare against the numeric
    scalar oracle).
    """
    a = alpha * alpha
    kappa = a * d + 1.0
    g2 = (1.0 / kappa) if gamma_sq is None else gamma_sq
    s2 = noise_std**2
    d0, d1, d2, d3, d4 = _task_feature_coefficients(d, n)
    num = d1 * a * a + 2 * d0 * a + 1.0
    den = (
        d2 * a**3
        + d3 * a * a
        + d4 * a
        + (d + n + 1)
        + s2 * (d0 * a * a + 2 * a + 1.0) / g2
    )
    c = num / den
    risk = d * g2 * (d0 * a + 1.0) + s2 - c * n * d * g2 * num
    return TheoryResult(risk=risk, d=d, c=c)


def task_feature_scalar_loss(c: float, alpha: float, noise_std: float, d: int,
                             n: int, gamma_sq: float | None = None) -> float:
    """Population risk of W = c I under the task-correlated design."""
    a = alpha * alpha
    kappa = a * d + 1.0
    g2 = (1.0 / kappa) if gamma_sq is None else gamma_sq
    s2 = noise_std**2
    d0, d1, d2, d3, d4 = _task_feature_coefficients(d, n)
    num = d1 * a * a + 2 * d0 * a + 1.0
    den = (
        d2 * a**3
        + d3 * a * a
        + d4 * a
        + (d + n + 1)
        + s2 * (d0 * a * a + 2 * a + 1.0) / g2
    )
    base = d * g2 * (d0 * a + 1.0) + s2
    return base - 2.0 * n * d * g2 * num * c + n * d * g2 * den * c * c


def task_feature_approx(alpha: float, noise_std: float, d: int, n: int) -> TheoryResult:
    """Large-d approximation with kappa-amplified samples and 1/kappa label scale."""
    kappa = alpha * alpha * d + 1.0
    s2 = noise_std**2
    c = 1.0 / (kappa * n + (d + s2) / kappa)
    risk = d + s2 - kappa * n * d / (kappa * n + (d + s2) / kappa)
    return TheoryResult(risk=risk, d=d, c=c)


# ---------------------------------------------------------------------------
# Low-rank preconditioners and spectrum adaptation
# ---------------------------------------------------------------------------

def low_rank_risk(sigma_x, sigma_beta, noise_std: float, n: int,
                  r: int) -> tuple[TheoryResult, np.ndarray]:
    """Optimal symmetric rank-r preconditioner and its risk.

        L_r = M - sum_{i<=r} n lam_i^2 / ((n+1) lam_i + M)

    over the descending eigenvalues lam_i of the fused covariance. The optimal
    weight keeps the top-r eigenvectors U and solves the restricted quadratic,
    E* = (M I + (n+1) Sbar)^{-1} Sbar, mapped back through S_x^{-1/2}.
    """
    sx = SpdMatrix.from_array(sigma_x)
    inv_sqrt_x = sx.inv_sqrt()
    sig = SpdMatrix.from_array(fused_covariance(sigma_x, sigma_beta))
    d = sig.base.shape[0]
    if not 1 <= r <= d:
        raise ValueError(f"rank must be in [1, {d}], got {r}")
    lam = sig.eigenvalues
    m_const = float(np.sum(lam)) + noise_std**2
    top = lam[:r]
    risk = m_const - n * float(np.sum(top * top / ((n + 1.0) * top + m_const)))
    u = sig.eigenvectors[:, :r]
    e_star = top / (m_const + (n + 1.0) * top)
    wb = (u * e_star) @ u.T
    w = inv_sqrt_x @ wb @ inv_sqrt_x
    return TheoryResult(risk=risk, d=d, weight=w), w


@dataclass(frozen=True)
class SpectrumPair:
    """Jointly diagonalisable pre- and post-shift eigenvalues with equal trace."""

    lambda_old: np.ndarray
    lambda_new: np.ndarray
    m_const: float
    n: int

    @classmethod
    def create(cls, lambda_old, lambda_new, m_const: float, n: int) -> "SpectrumPair":
        old = np.asarray(lambda_old, dtype=np.float64)
        new = np.asarray(lambda_new, dtype=np.float64)
        if old.shape != new.shape or old.ndim != 1:
            raise ValueError("spectra must be 1-D and of equal length")
        if np.any(np.diff(old) > 0):
            raise ValueError("lambda_old must be descending")
        # lambda_new is paired with lambda_old by shared eigenvector, so its
        # ordering is free; only positivity and the trace normalisation bind.
        for name, lam in (("lambda_old", old), ("lambda_new", new)):
            if np.any(lam <= 0):
                raise ValueError(f"{name} must be positive")
            if abs(float(np.sum(lam)) - m_const) > 1e-8 * max(1.0, abs(m_const)):
                raise ValueError(f"{name} must sum to M = {m_const}")
        return cls(old, new, m_const, n)


def _per_index_risk(lam: np.ndarray, m_const: float, n: int) -> np.ndarray:
    return (lam + m_const) / (n + 1.0 + m_const / lam)


def lora_bound(s: SpectrumPair, r: int) -> tuple[float, tuple[int, ...]]:
    """Subset adaptation bound: best subset of at most r indices to re-solve.

        min_{|I| <= r} sum_{i not in I} (li + M)/(n+1+M/li)
                     + sum_{i in I} (li_new + M)/(n+1+M/li_new)

    The objective is index-separable, so the exact minimiser keeps the r
    indices with the largest positive improvement old_i - new_i (ties broken
    by lower index).
    """
    d = s.lambda_old.shape[0]
    if not 0 <= r <= d:
        raise ValueError(f"rank must be in [0, {d}], got {r}")
    old_terms = _per_index_risk(s.lambda_old, s.m_const, s.n)
    new_terms = _per_index_risk(s.lambda_new, s.m_const, s.n)
    improvement = old_terms - new_terms
    order = sorted(range(d), key=lambda i: (-improvement[i], i))
    chosen = tuple(sorted(i for i in order[:r] if improvement[i] > 0))
    bound = float(np.sum(old_terms) - sum(improvement[i] for i in chosen))
    return bound, chosen


def lora_frozen_adapted_risk(s: SpectrumPair, r: int,
                             base_diag: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Exact post-shift risk of a frozen diagonal weight with r indices re-solved.

    base_diag holds the frozen per-index weights (in the fused eigenbasis).
    All indices pay their exact post-shift quadratic cost; the best r indices
    switch to the per-index optimum under lambda_new. This is the achievable
    counterpart of lora_bound under the joint-diagonalisability assumption.
    """
    lam = s.lambda_new
    m_const, n = s.m_const, s.n
    w = np.asarray(base_diag, dtype=np.float64)
    frozen = lam - 2.0 * n * lam * w + (n * (n + 1.0) * lam + n * m_const) * w * w
    adapted = _per_index_risk(lam, m_const, n)
    improvement = frozen - adapted
    order = sorted(range(lam.shape[0]), key=lambda i: (-improvement[i], i))
    chosen = tuple(sorted(i for i in order[:r] if improvement[i] > 0))
    risk = float(np.sum(frozen) - sum(improvement[i] for i in chosen))
    return risk, chosen


# ---------------------------------------------------------------------------
# Gaussian moment identities and their Monte-Carlo oracles
# ---------------------------------------------------------------------------

def gaussian_even_moment(sigma: float, order: int) -> float:
    """E[u^order] for scalar u ~ N(0, sigma^2): sigma^order (order-1)!!."""
    if order < 0 or order % 2 != 0:
        raise ValueError(f"order must be even and >= 0, got {order}")
    double_fact = 1
    for k in range(order - 1, 0, -2):
        double_fact *= k
    return sigma**order * double_fact


def quartic_moment(w, w2) -> float:
    """E[(u'Wu)(u'W2u)] = tr(W)tr(W2) + tr(W2 W') + tr(W W2), u ~ N(0, I)."""
    w = as_matrix(w, "w")
    w2 = as_matrix(w2, "w2")
    return float(
        np.trace(w) * np.trace(w2) + np.sum(w * w2) + np.trace(w @ w2)
    )


def cross_quartic_moment(w) -> float:
    """Closed form for E[(u'W v v'u)^2], u, v ~ N(0, I) independent:

        3 tr(Lam_W^2) + (d+4) tr(W W') + tr(W^2),   Lam_W = W o I.

    At W = I, d = 2 this evaluates to 20 while both the Monte-Carlo oracle and
    the conditioning identity E[(u'v)^4] = 3 d (d+2) give 24; the identity is
    kept verbatim and the discrepancy is surfaced, not resolved, by the oracle
    suite.
    """
    w = as_matrix(w, "w")
    d = w.shape[0]
    diag = np.diag(w)
    return float(
        3.0 * np.sum(diag * diag) + (d + 4.0) * np.sum(w * w) + np.trace(w @ w)
    )


def sextic_moment(w, w2) -> float:
    """E[(u'Wu)(u'W2u)||u||^2] = (d+4) * quartic_moment(w, w2)."""
    d = as_matrix(w, "w").shape[0]
    return (d + 4.0) * quartic_moment(w, w2)


def octic_moment(w, w2) -> float:
    """E[(u'Wu)(u'W2u)||u||^4] = (d+4)(d+6) * quartic_moment(w, w2)."""
    d = as_matrix(w, "w").shape[0]
    return (d + 4.0) * (d + 6.0) * quartic_moment(w, w2)


MOMENT_KINDS = ("even_scalar", "quartic", "cross_quartic", "sextic", "octic")


def moment_identity(kind: str, w=None, w2=None, sigma: float = 1.0,
                    order: int | None = None) -> float:
    """Dispatch to the closed form for the requested identity."""
    if kind == "even_scalar":
        if order is None:
            raise ValueError("even_scalar needs an order")
        return gaussian_even_moment(sigma, order)
    if kind == "quartic":
        return quartic_moment(w, w if w2 is None else w2)
    if kind == "cross_quartic":
        return cross_quartic_moment(w)
    if kind == "sextic":
        return sextic_moment(w, w if w2 is None else w2)
    if kind == "octic":
        return octic_moment(w, w if w2 is None else w2)
    raise ValueError(f"unknown moment kind: {kind!r}")


def mc_moment_oracle(kind: str, samples: int, rng: RngStream, w=None, w2=None,
                     sigma: float = 1.0, order: int | None = None,
                     shard: int = 200_000) -> tuple[float, float]:
    """Direct Monte-Carlo estimate of a moment's defining expectation.

    Returns (mean, stderr of the mean). Sharded so memory stays bounded; the
    shard size does not affect the draws.
    """
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for a usable oracle")
    if kind not in MOMENT_KINDS:
        raise ValueError(f"unknown moment kind: {kind!r}")
    if kind != "even_scalar":
        w = as_matrix(w, "w")
        if w2 is None:
            w2 = w
        d = w.shape[0]
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        b = min(shard, samples - done)
        if kind == "even_scalar":
            if order is None:
                raise ValueError("even_scalar needs an order")
            vals = (sigma * rng.normal(b)) ** order
        elif kind == "cross_quartic":
            u = rng.normal((b, d))
            v = rng.normal((b, d))
            vals = (np.einsum("bi,bi->b", u @ w, v) * np.einsum("bi,bi->b", u, v)) ** 2
        else:
            u = rng.normal((b, d))
            q1 = np.einsum("bi,bi->b", u @ w, u)
            q2 = np.einsum("bi,bi->b", u @ w2, u)
            vals = q1 * q2
            if kind == "sextic":
                vals = vals * np.einsum("bi,bi->b", u, u)
            elif kind == "octic":
                vals = vals * np.einsum("bi,bi->b", u, u) ** 2
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
        done += b
    mean = total / samples
    var = max(0.0, (total_sq - samples * mean * mean) / (samples - 1))
    return mean, float(np.sqrt(var / samples))


# ---------------------------------------------------------------------------
# Strong convexity via the Monte-Carlo Hessian
# ---------------------------------------------------------------------------

def check_strong_convexity(spec: DesignSpec, probes: int, rng: RngStream,
                           shard: int = 100_000) -> float:
    """Smallest eigenvalue of the (constant) Hessian of the population loss.

    The loss is an exact quadratic in W, so its Hessian over vec(W) is
    2 E[vv'] with v = x_query (X'y)' flattened; a positive estimate certifies
    strong convexity numerically. Restricted to d <= 4 (the Hessian has d^4
    entries).
    """
    d = spec.d
    if d > 4:
        raise ValueError("Hessian check is restricted to d <= 4")
    h = np.zeros((d * d, d * d))
    done = 0
    while done < probes:
        b = min(shard, probes - done)
        pb = sample_batch(spec, rng, b)
        proj = np.einsum("bnd,bn->bd", pb.X, pb.y)
        v = np.einsum("bi,bj->bij", pb.x_query, proj).reshape(b, d * d)
        h += 2.0 * v.T @ v
        done += b
    h /= probes
    return float(np.linalg.eigvalsh(h)[0])
