"""One-step gradient-descent predictors, Monte-Carlo risk, numeric argmins.

Predictors expose both a single-prompt form (the contract surface) and a
batched form used by the Monte-Carlo machinery. Risk estimates always carry a
standard error; tolerances downstream are phrased in stderr multiples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .designs import DesignSpec, Prompt, sample_batch
from .numerics import RngStream, SpdMatrix, as_matrix
from .theory import fused_covariance


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    stderr: float
    trials: int

    def normalized(self, d: int) -> float:
        return self.mean / d


def _check_w(w, d: int) -> np.ndarray:
    w = as_matrix(w, "w")
    if w.shape != (d, d):
        raise ValueError(f"w must be {d}x{d}, got {w.shape}")
    return w


class PgdPredictor:
    """y_hat = x' W X' y, one step of preconditioned gradient descent."""

    def __init__(self, w):
        self.w = as_matrix(w, "w")

    def predict_batch(self, X, y, x_query) -> np.ndarray:
        w = _check_w(self.w, X.shape[2])
        grad = np.einsum("bnd,bn->bd", X, y)
        return np.einsum("bd,de,be->b", x_query, w, grad)


class WpgdPredictor:
    """y_hat = x' W X' (omega o y), sample-weighted gradient descent."""

    def __init__(self, w, omega):
        self.w = as_matrix(w, "w")
        self.omega = np.asarray(omega, dtype=np.float64)
        if self.omega.ndim != 1:
            raise ValueError("omega must be a vector")

    def predict_batch(self, X, y, x_query) -> np.ndarray:
        w = _check_w(self.w, X.shape[2])
        if self.omega.shape[0] != X.shape[1]:
            raise ValueError(
                f"omega length {self.omega.shape[0]} != context length {X.shape[1]}"
            )
        grad = np.einsum("bnd,bn->bd", X, self.omega[None, :] * y)
        return np.einsum("bd,de,be->b", x_query, w, grad)


def pgd_predict(w, p: Prompt) -> float:
    return float(PgdPredictor(w).predict_batch(p.X[None], p.y[None], p.x_query[None])[0])


def wpgd_predict(w, omega, p: Prompt) -> float:
    return float(
        WpgdPredictor(w, omega).predict_batch(p.X[None], p.y[None], p.x_query[None])[0]
    )


def mc_risk(predictor, spec: DesignSpec, trials: int, rng: RngStream,
            batch_size: int = 50_000) -> RiskEstimate:
    """Mean squared prediction error over freshly sampled prompts."""
    if trials < 1_000:
        raise ValueError("need at least 1e3 trials")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        b = min(batch_size, trials - done)
        pb = sample_batch(spec, rng, b)
        pred = predictor.predict_batch(pb.X, pb.y, pb.x_query)
        err = (pb.y_query - pred) ** 2
        total += float(np.sum(err))
        total_sq += float(np.sum(err * err))
        done += b
    mean = total / trials
    var = max(0.0, (total_sq - trials * mean * mean) / (trials - 1))
    return RiskEstimate(mean=mean, stderr=float(np.sqrt(var / trials)), trials=trials)


@dataclass(frozen=True)
class ScalarFit:
    """Quadratic fit of the risk restricted to W = c I."""

    c: float                # vertex (the numeric optimum)
    c_stderr: float         # delta-method stderr of the vertex (0 on closed path)
    loss_at_c: float        # fitted quadratic evaluated at the vertex
    loss_stderr: float      # delta-method stderr of loss_at_c
    curvature: float        # leading coefficient of the fitted quadratic


def _fit_three_points(c_grid, losses) -> tuple[float, float, float]:
    # Exact interpolation of a quadratic q0 + q1 c + q2 c^2 through 3 points.
    v = np.vander(np.asarray(c_grid, dtype=np.float64), 3, increasing=True)
    q0, q1, q2 = np.linalg.solve(v, np.asarray(losses, dtype=np.float64))
    return float(q0), float(q1), float(q2)


def numeric_optimal_scalar(spec: DesignSpec | None, c_grid, rng: RngStream | None = None,
                           closed_loss=None, trials: int = 1_000_000,
                           batch_size: int = 100_000) -> ScalarFit:
    """Vertex of the quadratic risk c -> L(c I), fitted from three points.

    With `closed_loss` the three evaluations are exact and the fit has zero
    error. Otherwise the three points are Monte-Carlo estimates sharing the
    same prompts (common random numbers), which makes the fitted quadratic the
    exact sample quadratic; the vertex stderr comes from the delta method on
    the sample moments.
    """
    c_grid = [float(c) for c in c_grid]
    if len(c_grid) != 3 or len(set(c_grid)) != 3:
        raise ValueError("c_grid must hold three distinct values")
    if closed_loss is not None:
        losses = [closed_loss(c) for c in c_grid]
        q0, q1, q2 = _fit_three_points(c_grid, losses)
        if q2 <= 0:
            raise RuntimeError(f"non-convex closed-form fit: curvature {q2}")
        c_star = -q1 / (2.0 * q2)
        return ScalarFit(c=c_star, c_stderr=0.0,
                         loss_at_c=q0 - q1 * q1 / (4.0 * q2),
                         loss_stderr=0.0, curvature=q2)
    if rng is None or spec is None:
        raise ValueError("need either closed_loss or (spec, rng)")
    # Per prompt the squared error at W = cI is p0 - 2 c p1 + c^2 p2 with
    # p0 = yq^2, p1 = yq * s, p2 = s^2, s = x' X' y. Accumulate first and
    # second moments of (p0, p1, p2) for the fit and its stderrs.
    sums = np.zeros(3)
    prods = np.zeros((3, 3))
    done = 0
    while done < trials:
        b = min(batch_size, trials - done)
        pb = sample_batch(spec, rng, b)
        grad = np.einsum("bnd,bn->bd", pb.X, pb.y)
        s = np.einsum("bd,bd->b", pb.x_query, grad)
        p = np.stack([pb.y_query**2, pb.y_query * s, s * s])
        sums += p.sum(axis=1)
        prods += p @ p.T
        done += b
    e = sums / trials
    cov = (prods / trials - np.outer(e, e)) / (trials - 1)
    losses = [e[0] - 2.0 * c * e[1] + c * c * e[2] for c in c_grid]
    q0, q1, q2 = _fit_three_points(c_grid, losses)
    # By CRN construction q0 = e0, q1 = -2 e1, q2 = e2 up to rounding.
    q2_stderr = float(np.sqrt(max(cov[2, 2], 0.0)))
    if q2 < -3.0 * q2_stderr or q2 <= 0.0:
        raise RuntimeError(
            f"non-convex fit: curvature {q2:.3e} (stderr {q2_stderr:.3e})"
        )
    c_star = -q1 / (2.0 * q2)
    # Delta method: c* = e1/e2 and L(c*) = e0 - e1^2/e2.
    g_c = np.array([0.0, 1.0 / e[2], -e[1] / e[2] ** 2])
    c_var = float(g_c @ cov @ g_c)
    g_l = np.array([1.0, -2.0 * e[1] / e[2], (e[1] / e[2]) ** 2])
    l_var = float(g_l @ cov @ g_l)
    return ScalarFit(
        c=c_star,
        c_stderr=float(np.sqrt(max(c_var, 0.0))),
        loss_at_c=q0 - q1 * q1 / (4.0 * q2),
        loss_stderr=float(np.sqrt(max(l_var, 0.0))),
        curvature=q2,
    )


def numeric_optimal_W(sigma_x, sigma_beta, noise_std: float, n: int,
                      grad_tol: float = 1e-10, max_iters: int = 100_000) -> np.ndarray:
    """Minimise the exact quadratic population loss by line-searched descent.

    Steepest descent with exact line search (the loss is quadratic, so the
    optimal step along the gradient is closed form). Stops when the gradient
    Frobenius norm drops below grad_tol; raises if max_iters is exhausted.
    """
    sx = SpdMatrix.from_array(sigma_x)
    sqrt_x = sx.sqrt()
    sx.inv_sqrt()  # surfaces the singularity error before iterating
    sig = fused_covariance(sigma_x, sigma_beta)
    d = sig.shape[0]
    m_const = float(np.trace(sig)) + noise_std**2

    def grad(w: np.ndarray) -> np.ndarray:
        wb = sqrt_x @ w @ sqrt_x
        gb = -2.0 * n * sig + 2.0 * n * (n + 1.0) * wb @ sig + 2.0 * n * m_const * wb
        return sqrt_x @ gb @ sqrt_x

    def hess_action(v: np.ndarray) -> np.ndarray:
        vb = sqrt_x @ v @ sqrt_x
        hb = 2.0 * n * (n + 1.0) * vb @ sig + 2.0 * n * m_const * vb
        return sqrt_x @ hb @ sqrt_x

    w = np.zeros((d, d))
    for _ in range(max_iters):
        g = grad(w)
        gnorm = float(np.sqrt(np.sum(g * g)))
        if gnorm <= grad_tol:
            return w
        hg = hess_action(g)
        step = float(np.sum(g * g) / np.sum(g * hg))
        w = w - step * g
    raise RuntimeError(
        f"gradient descent did not reach |grad| <= {grad_tol} in {max_iters} steps"
    )
