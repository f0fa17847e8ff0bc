"""One-layer linear attention and gated-convolution sequence models.

Both models consume the (n+1) x (d+1) token matrix and predict the query
label. The causal mask zeroes the entire row of the position being predicted
(and everything after it), so a prediction at position t sees demonstrations
1..t-1 only and never its own label.

Prediction forms, writing z for the query token and Z0 for the masked tokens:

    attention:   y_hat = (z' Wq Wk' Z0') Z0 Wv v
    gated conv:  y_hat = ((Wq' z) o ((Z0 Wk o Z0 Wv) * f)_t)' v

with o the elementwise product and * the causal convolution
(a * f)_t = sum_{j<=t} f_{t-j} a_j.

Checkpoints use a flat binary layout documented at save_params.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .designs import Prompt, PromptBatch, tokens_batch
from .numerics import as_matrix


@dataclass
class AttnParams:
    """Linear-attention weights; wq/wk are (d+1) x r in low-rank mode."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    v: np.ndarray

    @property
    def width(self) -> int:
        return self.wv.shape[0]

    @property
    def rank(self) -> int | None:
        r = self.wq.shape[1]
        return None if r == self.width else r

    def validate(self):
        p = self.width
        if self.wv.shape != (p, p) or self.v.shape != (p,):
            raise ValueError("wv must be square and v of matching length")
        if self.wq.shape[0] != p or self.wk.shape != self.wq.shape:
            raise ValueError("wq and wk must be (d+1) x r with matching shapes")
        return self

    def names(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "v": self.v}


@dataclass
class SsmParams:
    """Gated-convolution weights with a free filter f of length n_max + 1."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    v: np.ndarray
    f: np.ndarray

    @property
    def width(self) -> int:
        return self.wv.shape[0]

    def validate(self):
        p = self.width
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (p, p):
                raise ValueError(f"{name} must be (d+1) x (d+1)")
        if self.v.shape != (p,) or self.f.ndim != 1:
            raise ValueError("v must be length d+1 and f a vector")
        return self

    def names(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "v": self.v, "f": self.f}


@dataclass
class LoraParams:
    """Additive low-rank score update w_up @ w_down'."""

    w_up: np.ndarray
    w_down: np.ndarray

    def validate(self):
        if self.w_up.shape != self.w_down.shape:
            raise ValueError("w_up and w_down must share (d+1) x r shape")
        return self

    def names(self):
        return {"w_up": self.w_up, "w_down": self.w_down}


# ---------------------------------------------------------------------------
# Batched forward passes
# ---------------------------------------------------------------------------

def attn_forward_last(params: AttnParams, context: np.ndarray, z: np.ndarray,
                      score_extra: np.ndarray | None = None) -> np.ndarray:
    """Query-position attention output for context rows (B, n, d+1)."""
    gram = np.einsum("bjp,bjq->bpq", context, context)
    m = gram @ (params.wv @ params.v)
    if score_extra is None:
        a = z @ params.wq
        t = m @ params.wk
        return np.einsum("br,br->b", a, t)
    score = params.wq @ params.wk.T + score_extra
    return np.einsum("bp,pq,bq->b", z, score, m)


def ssm_forward_last(params: SsmParams, context: np.ndarray,
                     z: np.ndarray) -> np.ndarray:
    """Query-position gated-convolution output; needs len(f) >= n + 1."""
    n = context.shape[1]
    if params.f.shape[0] < n + 1:
        raise ValueError(f"filter length {params.f.shape[0]} < context {n} + 1")
    u = (context @ params.wk) * (context @ params.wv)
    lag_weights = params.f[1:n + 1][::-1]  # demo j (0-based) sits at lag n - j
    h = np.einsum("j,bjp->bp", lag_weights, u)
    a = z @ params.wq
    return np.einsum("p,bp,bp->b", params.v, a, h)


def _query_tokens(tokens: np.ndarray) -> np.ndarray:
    # Token seen as a query: its own label slot zeroed.
    q = tokens.copy()
    q[..., -1] = 0.0
    return q


def attn_positions_batch(params: AttnParams, tokens: np.ndarray, positions,
                         score_extra: np.ndarray | None = None) -> np.ndarray:
    """Predictions at 1-based positions t, each from demonstrations 1..t-1."""
    queries = _query_tokens(tokens)
    out = np.empty((tokens.shape[0], len(positions)))
    for k, t in enumerate(positions):
        out[:, k] = attn_forward_last(
            params, tokens[:, : t - 1, :], queries[:, t - 1, :], score_extra
        )
    return out


def ssm_positions_batch(params: SsmParams, tokens: np.ndarray,
                        positions) -> np.ndarray:
    queries = _query_tokens(tokens)
    out = np.empty((tokens.shape[0], len(positions)))
    for k, t in enumerate(positions):
        out[:, k] = ssm_forward_last(params, tokens[:, : t - 1, :], queries[:, t - 1, :])
    return out


class AttnPredictor:
    """Batch predictor for Monte-Carlo risk of a (possibly LoRA'd) attention model."""

    def __init__(self, params: AttnParams, lora: LoraParams | None = None):
        self.params = params.validate()
        self.score_extra = None if lora is None else lora.w_up @ lora.w_down.T

    def predict_batch(self, X, y, x_query) -> np.ndarray:
        b, n, d = X.shape
        context = np.zeros((b, n, d + 1))
        context[:, :, :d] = X
        context[:, :, d] = y
        z = np.zeros((b, d + 1))
        z[:, :d] = x_query
        return attn_forward_last(self.params, context, z, self.score_extra)


class SsmPredictor:
    def __init__(self, params: SsmParams):
        self.params = params.validate()

    def predict_batch(self, X, y, x_query) -> np.ndarray:
        b, n, d = X.shape
        context = np.zeros((b, n, d + 1))
        context[:, :, :d] = X
        context[:, :, d] = y
        z = np.zeros((b, d + 1))
        z[:, :d] = x_query
        return ssm_forward_last(self.params, context, z)


# ---------------------------------------------------------------------------
# Single-prompt surfaces
# ---------------------------------------------------------------------------

def _single(pred, p: Prompt) -> float:
    return float(pred.predict_batch(p.X[None], p.y[None], p.x_query[None])[0])


def attn_predict(params: AttnParams, p: Prompt) -> float:
    return _single(AttnPredictor(params), p)


def ssm_predict(params: SsmParams, p: Prompt) -> float:
    return _single(SsmPredictor(params), p)


def lora_attn_predict(base: AttnParams, lora: LoraParams, p: Prompt) -> float:
    return _single(AttnPredictor(base, lora.validate()), p)


def attn_predict_positions(params: AttnParams, p: Prompt, positions) -> np.ndarray:
    """Per-position predictions on one prompt; position n+1 is the query."""
    positions = list(positions)
    if any(not 1 <= t <= p.n + 1 for t in positions):
        raise ValueError(f"positions must lie in 1..{p.n + 1}")
    pb = PromptBatch(p.X[None], p.y[None], p.x_query[None],
                     np.array([p.y_query]), p.beta[None], p.noises[None])
    return attn_positions_batch(params.validate(), tokens_batch(pb), positions)[0]


def ssm_predict_positions(params: SsmParams, p: Prompt, positions) -> np.ndarray:
    positions = list(positions)
    if any(not 1 <= t <= p.n + 1 for t in positions):
        raise ValueError(f"positions must lie in 1..{p.n + 1}")
    pb = PromptBatch(p.X[None], p.y[None], p.x_query[None],
                     np.array([p.y_query]), p.beta[None], p.noises[None])
    return ssm_positions_batch(params.validate(), tokens_batch(pb), positions)[0]


# ---------------------------------------------------------------------------
# Equivalence constructions
# ---------------------------------------------------------------------------

def construct_attn_from_pgd(w) -> AttnParams:
    """Attention weights whose prediction equals x' W X' y exactly.

    Keys and values pass tokens through unchanged; the query projection embeds
    W in the feature block; the head reads the label coordinate.
    """
    w = as_matrix(w, "w")
    d = w.shape[0]
    wq = np.zeros((d + 1, d + 1))
    wq[:d, :d] = w
    v = np.zeros(d + 1)
    v[d] = 1.0
    return AttnParams(wq=wq, wk=np.eye(d + 1), wv=np.eye(d + 1), v=v)


def construct_ssm_from_wpgd(w, omega) -> SsmParams:
    """Gated-convolution weights realising x' W X' (omega o y) exactly.

    Keys carry W' x_i, values broadcast y_i across feature channels, the
    filter holds the sample weights in reverse order with lag 0 zeroed.
    """
    w = as_matrix(w, "w")
    omega = np.asarray(omega, dtype=np.float64)
    d = w.shape[0]
    wk = np.zeros((d + 1, d + 1))
    wk[:d, :d] = w.T
    wv = np.zeros((d + 1, d + 1))
    wv[d, :d] = 1.0
    v = np.zeros(d + 1)
    v[:d] = 1.0
    f = np.zeros(omega.shape[0] + 1)
    f[1:] = omega[::-1]
    return SsmParams(wq=np.eye(d + 1), wk=wk, wv=wv, v=v, f=f)


def exponential_filter(rho: float, length: int) -> np.ndarray:
    """Geometric filter: lag-k weight rho^{k-1}, lag 0 zeroed for the mask.

    rho = 1 gives the all-ones filter over lags; rho = 0 keeps only the most
    recent demonstration.
    """
    if abs(rho) > 1.0:
        raise ValueError(f"|rho| must be <= 1, got {rho}")
    if length < 1:
        raise ValueError("length must be >= 1")
    f = np.zeros(length)
    if length > 1:
        f[1:] = rho ** np.arange(length - 1)
    return f


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"ICLCKPT1"
_KINDS = {"attn": AttnParams, "ssm": SsmParams, "lora": LoraParams}


def save_params(path, params) -> None:
    """Write parameters in the flat binary checkpoint layout.

    Layout (little endian): magic "ICLCKPT1"; u16 kind length + kind string
    ("attn" | "ssm" | "lora"); u32 tensor count; then per tensor u16 name
    length + name, u8 ndim, ndim x u64 dims, float64 row-major entries.
    """
    kind = next((k for k, cls in _KINDS.items() if isinstance(params, cls)), None)
    if kind is None:
        raise ValueError(f"unsupported parameter bundle: {type(params)}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", len(kind)))
        fh.write(kind.encode("ascii"))
        tensors = params.names()
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path):
    """Read a checkpoint written by save_params."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        (kind_len,) = struct.unpack("<H", fh.read(2))
        kind = fh.read(kind_len).decode("ascii")
        if kind not in _KINDS:
            raise ValueError(f"unknown checkpoint kind: {kind!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)
    return _KINDS[kind](**tensors).validate()
