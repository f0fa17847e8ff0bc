"""Prompt distributions and token assembly.

Four generative designs produce (X, y, x_query, y_query) regression prompts:

* independent     beta ~ N(0, S_beta), x_i ~ N(0, S_x), y = x'beta + noise
* rag             query drawn first, demonstrations alpha-correlated with it:
                  x_i | x ~ N(alpha x, (1 - alpha^2) I); marginally x_i ~ N(0, I)
* task_feature    x_i | beta ~ N(alpha beta, I) for all positions including the
                  query; labels scaled by kappa^{-1/2}, kappa = alpha^2 d + 1
* evolving        per-position tasks beta_i = (i/n) b1 + (1 - i/n) b2 drifting
                  from b2 to b1; the query is labelled by b1; noiseless

Sampling is vectorised over a batch; the draw order within each variant is
fixed, so a (spec, stream) pair is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, SpdMatrix, as_matrix


@dataclass(eq=False)
class Independent:
    sigma_x: np.ndarray
    sigma_beta: np.ndarray
    noise_std: float = 0.0

    kind = "independent"


@dataclass(frozen=True)
class Rag:
    alpha: float
    noise_std: float = 0.0

    kind = "rag"


@dataclass(frozen=True)
class TaskFeature:
    alpha: float
    noise_std: float = 0.0

    kind = "task_feature"


@dataclass(frozen=True)
class EvolvingTask:
    kind = "evolving"


Variant = Independent | Rag | TaskFeature | EvolvingTask


@dataclass(eq=False)
class DesignSpec:
    variant: Variant
    d: int
    n: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        # n == 0 (empty context) is allowed so degenerate-context checks can
        # exercise the loss surface; all experiment presets use n >= 1.
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        v = self.variant
        if isinstance(v, (Rag, TaskFeature)):
            if not 0.0 <= v.alpha <= 1.0:
                raise ValueError(f"alpha must be in [0, 1], got {v.alpha}")
        if isinstance(v, (Independent, Rag, TaskFeature)) and v.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {v.noise_std}")
        if isinstance(v, Independent):
            for name in ("sigma_x", "sigma_beta"):
                m = SpdMatrix.from_array(getattr(v, name))
                if m.base.shape != (self.d, self.d):
                    raise ValueError(f"{name} must be {self.d}x{self.d}")
                if m.eigenvalues[-1] <= 0.0:
                    raise ValueError(f"{name} must be full rank")
                setattr(v, name, m.base)

    @property
    def noise_std(self) -> float:
        return getattr(self.variant, "noise_std", 0.0)

    @property
    def alpha(self) -> float | None:
        return getattr(self.variant, "alpha", None)

    def to_config(self) -> dict[str, str]:
        """Flat key-value form used by the CLI config format."""
        cfg = {"design": self.variant.kind, "d": str(self.d), "n": str(self.n)}
        v = self.variant
        if isinstance(v, Independent):
            cfg["sigma_x"] = _encode_matrix(v.sigma_x)
            cfg["sigma_beta"] = _encode_matrix(v.sigma_beta)
            cfg["sigma"] = repr(v.noise_std)
        elif isinstance(v, (Rag, TaskFeature)):
            cfg["alpha"] = repr(v.alpha)
            cfg["sigma"] = repr(v.noise_std)
        return cfg

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "DesignSpec":
        kind = cfg["design"]
        d = int(cfg["d"])
        n = int(cfg["n"])
        sigma = float(cfg.get("sigma", "0"))
        if kind == "independent":
            sx = _decode_matrix(cfg.get("sigma_x", "isotropic"), d)
            sb = _decode_matrix(cfg.get("sigma_beta", "isotropic"), d)
            variant: Variant = Independent(sx, sb, sigma)
        elif kind == "rag":
            variant = Rag(float(cfg["alpha"]), sigma)
        elif kind == "task_feature":
            variant = TaskFeature(float(cfg["alpha"]), sigma)
        elif kind == "evolving":
            variant = EvolvingTask()
        else:
            raise ValueError(f"unknown design kind: {kind!r}")
        return cls(variant, d=d, n=n)


def _encode_matrix(m: np.ndarray) -> str:
    if np.array_equal(m, np.eye(m.shape[0])):
        return "isotropic"
    if np.array_equal(m, np.diag(np.diag(m))):
        return "diag:" + ",".join(repr(float(x)) for x in np.diag(m))
    return ";".join(",".join(repr(float(x)) for x in row) for row in m)


def _decode_matrix(text: str, d: int) -> np.ndarray:
    if text == "isotropic":
        return np.eye(d)
    if text.startswith("diag:"):
        return np.diag([float(x) for x in text[5:].split(",")])
    rows = [[float(x) for x in row.split(",")] for row in text.split(";")]
    return as_matrix(rows, "sigma")


def task_feature_label_scale(alpha: float, d: int) -> float:
    """Label normalisation kappa^{-1/2} with kappa = alpha^2 d + 1."""
    return (alpha * alpha * d + 1.0) ** -0.5


@dataclass
class PromptBatch:
    """A batch of prompts as stacked arrays (first axis = batch)."""

    X: np.ndarray        # (B, n, d)
    y: np.ndarray        # (B, n)
    x_query: np.ndarray  # (B, d)
    y_query: np.ndarray  # (B,)
    beta: np.ndarray     # (B, d)
    noises: np.ndarray   # (B, n + 1), query noise last
    beta_start: np.ndarray | None = None  # evolving design only

    @property
    def size(self) -> int:
        return self.X.shape[0]


@dataclass
class Prompt:
    """One in-context regression instance."""

    X: np.ndarray        # (n, d)
    y: np.ndarray        # (n,)
    x_query: np.ndarray  # (d,)
    y_query: float
    beta: np.ndarray     # (d,)
    noises: np.ndarray   # (n + 1,), query noise last
    beta_start: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def sample_batch(spec: DesignSpec, rng: RngStream, size: int) -> PromptBatch:
    """Draw `size` prompts obeying the design's generative equations."""
    d, n = spec.d, spec.n
    v = spec.variant
    if isinstance(v, Independent):
        sqrt_x = SpdMatrix.from_array(v.sigma_x).sqrt()
        sqrt_b = SpdMatrix.from_array(v.sigma_beta).sqrt()
        beta = rng.normal((size, d)) @ sqrt_b
        X = rng.normal((size, n, d)) @ sqrt_x
        x_query = rng.normal((size, d)) @ sqrt_x
        noises = v.noise_std * rng.normal((size, n + 1))
        y = np.einsum("bnd,bd->bn", X, beta) + noises[:, :n]
        y_query = np.einsum("bd,bd->b", x_query, beta) + noises[:, n]
        return PromptBatch(X, y, x_query, y_query, beta, noises)
    if isinstance(v, Rag):
        gamma = np.sqrt(max(0.0, 1.0 - v.alpha**2))
        beta = rng.normal((size, d))
        x_query = rng.normal((size, d))
        X = v.alpha * x_query[:, None, :] + gamma * rng.normal((size, n, d))
        noises = v.noise_std * rng.normal((size, n + 1))
        y = np.einsum("bnd,bd->bn", X, beta) + noises[:, :n]
        y_query = np.einsum("bd,bd->b", x_query, beta) + noises[:, n]
        return PromptBatch(X, y, x_query, y_query, beta, noises)
    if isinstance(v, TaskFeature):
        scale = task_feature_label_scale(v.alpha, d)
        beta = rng.normal((size, d))
        X = v.alpha * beta[:, None, :] + rng.normal((size, n, d))
        x_query = v.alpha * beta + rng.normal((size, d))
        noises = v.noise_std * rng.normal((size, n + 1))
        y = scale * np.einsum("bnd,bd->bn", X, beta) + noises[:, :n]
        y_query = scale * np.einsum("bd,bd->b", x_query, beta) + noises[:, n]
        return PromptBatch(X, y, x_query, y_query, beta, noises)
    if isinstance(v, EvolvingTask):
        if n < 1:
            raise ValueError("evolving design needs n >= 1")
        beta_end = rng.normal((size, d))
        beta_start = rng.normal((size, d))
        X = rng.normal((size, n, d))
        x_query = rng.normal((size, d))
        lam = np.arange(1, n + 1) / n
        betas = lam[None, :, None] * beta_end[:, None, :] \
            + (1.0 - lam)[None, :, None] * beta_start[:, None, :]
        y = np.einsum("bnd,bnd->bn", X, betas)
        y_query = np.einsum("bd,bd->b", x_query, beta_end)
        noises = np.zeros((size, n + 1))
        return PromptBatch(X, y, x_query, y_query, beta_end, noises, beta_start)
    raise TypeError(f"unknown design variant: {v!r}")


def sample(spec: DesignSpec, rng: RngStream) -> Prompt:
    """Draw a single prompt (the size-1 slice of sample_batch)."""
    b = sample_batch(spec, rng, 1)
    return Prompt(
        X=b.X[0],
        y=b.y[0],
        x_query=b.x_query[0],
        y_query=float(b.y_query[0]),
        beta=b.beta[0],
        noises=b.noises[0],
        beta_start=None if b.beta_start is None else b.beta_start[0],
    )


def assemble_tokens(p: Prompt) -> np.ndarray:
    """Token matrix Z: rows (x_i, y_i) for i <= n, then (x_query, 0)."""
    n, d = p.X.shape
    z = np.zeros((n + 1, d + 1))
    z[:n, :d] = p.X
    z[:n, d] = p.y
    z[n, :d] = p.x_query
    return z


def masked_tokens(p: Prompt) -> np.ndarray:
    """Causally masked tokens Z0: Z with the entire query row zeroed."""
    z = assemble_tokens(p)
    z[-1, :] = 0.0
    return z


def tokens_batch(pb: PromptBatch) -> np.ndarray:
    """Batched token matrices, query row last with a zero label slot."""
    bsz, n, d = pb.X.shape
    z = np.zeros((bsz, n + 1, d + 1))
    z[:, :n, :d] = pb.X
    z[:, :n, d] = pb.y
    z[:, n, :d] = pb.x_query
    return z
