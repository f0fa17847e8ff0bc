"""Losses, exact gradients, Adam, and the multi-restart training protocol.

Gradients are derived in closed form by reverse accumulation through the
bilinear (attention) and gated-convolution computation graphs; the test suite
checks every tensor against central differences. Training draws a fresh batch
of prompts per iteration, repeats from `restarts` independent initialisations,
and keeps the restart with the smallest test risk on fresh prompts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .designs import DesignSpec, sample_batch, tokens_batch
from .estimators import RiskEstimate, mc_risk
from .models import (
    AttnParams,
    AttnPredictor,
    LoraParams,
    SsmParams,
    SsmPredictor,
    attn_positions_batch,
    ssm_positions_batch,
)
from .numerics import RngStream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_MODES = ("last_position", "averaged_positions")


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    restarts: int = 20
    init_scale: float = 0.02
    loss_mode: str = "last_position"
    seed: int = 0
    eval_trials: int = 10_000
    trace_every: int = 0

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.restarts) < 1:
            raise ValueError("iterations, batch_size and restarts must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, tensors: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in tensors.items()},
            v={k: np.zeros_like(a) for k, a in tensors.items()},
        )


def adam_step(state: AdamState, tensors: dict, grads: dict,
              learning_rate: float) -> AdamState:
    """Standard first/second-moment update with bias correction, in place."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for key, g in grads.items():
        state.m[key] = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
        state.v[key] = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        tensors[key] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return state


# ---------------------------------------------------------------------------
# Loss and exact gradients
# ---------------------------------------------------------------------------

def _context_and_query(pb) -> tuple[np.ndarray, np.ndarray]:
    b, n, d = pb.X.shape
    context = np.zeros((b, n, d + 1))
    context[:, :, :d] = pb.X
    context[:, :, d] = pb.y
    z = np.zeros((b, d + 1))
    z[:, :d] = pb.x_query
    return context, z


def attn_loss_grad_last(p: AttnParams, context, z, targets):
    gram = np.einsum("bjp,bjq->bpq", context, context)
    head = p.wv @ p.v
    m = gram @ head
    a = z @ p.wq
    t = m @ p.wk
    pred = np.einsum("br,br->b", a, t)
    resid = pred - targets
    bsz = targets.shape[0]
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / bsz
    e = np.einsum("bpq,bq->bp", gram, a @ p.wk.T)
    grads = {
        "wq": np.einsum("b,bp,br->pr", g, z, t),
        "wk": np.einsum("b,bp,br->pr", g, m, a),
        "wv": np.einsum("b,bp,q->pq", g, e, p.v),
        "v": np.einsum("b,bp->p", g, e @ p.wv),
    }
    return loss, grads


def attn_loss_grad_avg(p: AttnParams, tokens, targets):
    # Positions 1..n, each predicting its own label from the strict prefix.
    bsz, n, width = tokens.shape
    queries = tokens.copy()
    queries[:, :, -1] = 0.0
    outers = np.einsum("bjp,bjq->bjpq", tokens, tokens)
    grams = np.zeros((bsz, n, width, width))
    grams[:, 1:] = np.cumsum(outers, axis=1)[:, :-1]
    head = p.wv @ p.v
    m = grams @ head
    a = queries @ p.wq
    t = m @ p.wk
    pred = np.einsum("btr,btr->bt", a, t)
    resid = pred - targets
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / resid.size
    e = np.einsum("btpq,btq->btp", grams, a @ p.wk.T)
    grads = {
        "wq": np.einsum("bt,btp,btr->pr", g, queries, t),
        "wk": np.einsum("bt,btp,btr->pr", g, m, a),
        "wv": np.einsum("bt,btp,q->pq", g, e, p.v),
        "v": np.einsum("bt,btp->p", g, e @ p.wv),
    }
    return loss, grads


def ssm_loss_grad_last(p: SsmParams, context, z, targets):
    bsz, n, _ = context.shape
    kk = context @ p.wk
    vv = context @ p.wv
    u = kk * vv
    lag_w = p.f[1:n + 1][::-1]
    h = np.einsum("j,bjp->bp", lag_w, u)
    a = z @ p.wq
    pred = np.einsum("p,bp,bp->b", p.v, a, h)
    resid = pred - targets
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / bsz
    q = a * p.v[None, :]
    r = g[:, None] * q
    s = np.einsum("bp,bjp->j", r, u)
    gf = np.zeros_like(p.f)
    gf[1:n + 1] = s[::-1]
    weighted = lag_w[None, :, None]
    grads = {
        "wq": np.einsum("b,bp,bq->pq", g, z, p.v[None, :] * h),
        "wk": np.einsum("bjp,bjq->pq", context, (r[:, None, :] * vv) * weighted),
        "wv": np.einsum("bjp,bjq->pq", context, (r[:, None, :] * kk) * weighted),
        "v": np.einsum("b,bp->p", g, a * h),
        "f": gf,
    }
    return loss, grads


def ssm_loss_grad_avg(p: SsmParams, tokens, targets):
    bsz, n, _ = tokens.shape
    queries = tokens.copy()
    queries[:, :, -1] = 0.0
    kk = tokens @ p.wk
    vv = tokens @ p.wv
    u = kk * vv
    fmat = np.zeros((n, n))
    for lag in range(1, n):
        fmat += np.diag(np.full(n - lag, p.f[lag]), -lag)
    h = np.einsum("tj,bjp->btp", fmat, u)
    a = queries @ p.wq
    pred = np.einsum("p,btp,btp->bt", p.v, a, h)
    resid = pred - targets
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / resid.size
    q = g[:, :, None] * (a * p.v[None, None, :])
    c = np.einsum("btp,bjp->tj", q, u)
    gf = np.zeros_like(p.f)
    for lag in range(1, n):
        gf[lag] = np.trace(c, offset=-lag)
    s = np.einsum("tj,btp->bjp", fmat, q)
    grads = {
        "wq": np.einsum("bt,btp,btq->pq", g, queries, p.v[None, None, :] * h),
        "wk": np.einsum("bjp,bjq->pq", tokens, s * vv),
        "wv": np.einsum("bjp,bjq->pq", tokens, s * kk),
        "v": np.einsum("bt,btp->p", g, a * h),
        "f": gf,
    }
    return loss, grads


def lora_loss_grad_last(base: AttnParams, lora: LoraParams, context, z, targets):
    gram = np.einsum("bjp,bjq->bpq", context, context)
    m = gram @ (base.wv @ base.v)
    score = base.wq @ base.wk.T + lora.w_up @ lora.w_down.T
    pred = np.einsum("bp,pq,bq->b", z, score, m)
    resid = pred - targets
    bsz = targets.shape[0]
    loss = float(np.mean(resid**2))
    g = 2.0 * resid / bsz
    grads = {
        "w_up": np.einsum("b,bp,br->pr", g, z, m @ lora.w_down),
        "w_down": np.einsum("b,bp,br->pr", g, m, z @ lora.w_up),
    }
    return loss, grads


def batch_loss_and_grad(params, pb, loss_mode: str, lora: LoraParams | None = None):
    """Batch mean squared error and exact gradients for every trainable tensor."""
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
    if lora is not None:
        if loss_mode != "last_position":
            raise ValueError("adapter training supports last_position only")
        context, z = _context_and_query(pb)
        return lora_loss_grad_last(params, lora, context, z, pb.y_query)
    if isinstance(params, AttnParams):
        if loss_mode == "last_position":
            context, z = _context_and_query(pb)
            return attn_loss_grad_last(params, context, z, pb.y_query)
        tokens = tokens_batch(pb)[:, :-1, :]
        return attn_loss_grad_avg(params, tokens, pb.y)
    if isinstance(params, SsmParams):
        if loss_mode == "last_position":
            context, z = _context_and_query(pb)
            return ssm_loss_grad_last(params, context, z, pb.y_query)
        tokens = tokens_batch(pb)[:, :-1, :]
        return ssm_loss_grad_avg(params, tokens, pb.y)
    raise TypeError(f"unsupported parameter bundle: {type(params)}")


# ---------------------------------------------------------------------------
# Initialisation and evaluation
# ---------------------------------------------------------------------------

def init_attn(d: int, rng: RngStream, init_scale: float,
              rank: int | None = None) -> AttnParams:
    width = d + 1
    r = width if rank is None else rank
    return AttnParams(
        wq=init_scale * rng.normal((width, r)),
        wk=init_scale * rng.normal((width, r)),
        wv=init_scale * rng.normal((width, width)),
        v=init_scale * rng.normal(width),
    ).validate()


def init_ssm(d: int, n_max: int, rng: RngStream, init_scale: float) -> SsmParams:
    width = d + 1
    return SsmParams(
        wq=init_scale * rng.normal((width, width)),
        wk=init_scale * rng.normal((width, width)),
        wv=init_scale * rng.normal((width, width)),
        v=init_scale * rng.normal(width),
        f=init_scale * rng.normal(n_max + 1),
    ).validate()


def init_lora(d: int, rank: int, rng: RngStream, init_scale: float) -> LoraParams:
    width = d + 1
    return LoraParams(
        w_up=init_scale * rng.normal((width, rank)),
        w_down=init_scale * rng.normal((width, rank)),
    ).validate()


def evaluate_test_risk(predictor, spec: DesignSpec, trials: int,
                       rng: RngStream) -> RiskEstimate:
    """Query-position risk of any batch predictor on fresh prompts."""
    return mc_risk(predictor, spec, trials, rng)


def evaluate_position_risks(params, spec: DesignSpec, positions, trials: int,
                            rng: RngStream, lora: LoraParams | None = None,
                            batch_size: int = 10_000) -> list[RiskEstimate]:
    """Per-position risks; position t targets y_t (t <= n) or y_query (t = n+1)."""
    positions = list(positions)
    sums = np.zeros(len(positions))
    sums_sq = np.zeros(len(positions))
    done = 0
    while done < trials:
        b = min(batch_size, trials - done)
        pb = sample_batch(spec, rng, b)
        tokens = tokens_batch(pb)
        if isinstance(params, SsmParams):
            preds = ssm_positions_batch(params, tokens, positions)
        else:
            extra = None if lora is None else lora.w_up @ lora.w_down.T
            preds = attn_positions_batch(params, tokens, positions, extra)
        targets = np.concatenate([pb.y, pb.y_query[:, None]], axis=1)
        idx = [t - 1 for t in positions]
        err = (preds - targets[:, idx]) ** 2
        sums += err.sum(axis=0)
        sums_sq += (err * err).sum(axis=0)
        done += b
    means = sums / trials
    variances = np.maximum(0.0, (sums_sq - trials * means * means) / (trials - 1))
    return [
        RiskEstimate(float(m), float(np.sqrt(v / trials)), trials)
        for m, v in zip(means, variances)
    ]


def _averaged_risk(params, spec: DesignSpec, trials: int, rng: RngStream,
                   batch_size: int = 5_000) -> RiskEstimate:
    # Mean over positions 1..n of per-position squared error; the per-prompt
    # position average is the sampling unit for the stderr.
    total = 0.0
    total_sq = 0.0
    done = 0
    positions = list(range(1, spec.n + 1))
    while done < trials:
        b = min(batch_size, trials - done)
        pb = sample_batch(spec, rng, b)
        tokens = tokens_batch(pb)
        if isinstance(params, SsmParams):
            preds = ssm_positions_batch(params, tokens, positions)
        else:
            preds = attn_positions_batch(params, tokens, positions)
        per_prompt = np.mean((preds - pb.y) ** 2, axis=1)
        total += float(np.sum(per_prompt))
        total_sq += float(np.sum(per_prompt**2))
        done += b
    mean = total / trials
    var = max(0.0, (total_sq - trials * mean * mean) / (trials - 1))
    return RiskEstimate(mean, float(np.sqrt(var / trials)), trials)


# ---------------------------------------------------------------------------
# Multi-restart training
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    params: AttnParams | SsmParams
    final_test_risk: float
    final_test_stderr: float
    restart_index: int
    restart_risks: list
    lora: LoraParams | None = None
    trace: list = field(default_factory=list)


def _run_restarts(spec: DesignSpec, config: TrainConfig, make_params, make_eval):
    root = RngStream(config.seed)
    best = None
    restart_risks = []
    for k in range(config.restarts):
        rs = root.derive("restart", k)
        bundle = make_params(rs)
        params, lora = bundle if isinstance(bundle, tuple) else (bundle, None)
        trainable = lora.names() if lora is not None else params.names()
        adam = AdamState.init(trainable)
        trace = []
        failed = False
        for it in range(config.iterations):
            pb = sample_batch(spec, rs, config.batch_size)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = batch_loss_and_grad(params, pb, config.loss_mode, lora)
                if not np.isfinite(loss):
                    failed = True
                    break
                adam_step(adam, trainable, grads, config.learning_rate)
            if config.trace_every and (it + 1) % config.trace_every == 0:
                est = make_eval(params, lora, root.derive("trace", k, it), 2_000)
                trace.append((it + 1, est.mean))
        if not failed:
            with np.errstate(over="ignore", invalid="ignore"):
                est = make_eval(params, lora, root.derive("eval", k),
                                config.eval_trials)
            failed = not np.isfinite(est.mean)
        if failed:
            restart_risks.append(float("nan"))
            continue
        restart_risks.append(est.mean)
        if best is None or est.mean < best[1].mean:
            best = (k, est, params, lora, trace)
    if best is None:
        raise RuntimeError("all restarts diverged")
    k, est, params, lora, trace = best
    return TrainedModel(
        params=params,
        final_test_risk=est.mean,
        final_test_stderr=est.stderr,
        restart_index=k,
        restart_risks=restart_risks,
        lora=lora,
        trace=trace,
    )


def train(model_kind: str, spec: DesignSpec, config: TrainConfig,
          rank: int | None = None, warm_start=None) -> TrainedModel:
    """Train a model, keeping the restart with minimal test risk.

    `warm_start` (e.g. loaded from a checkpoint) seeds restart 0; remaining
    restarts initialise randomly as usual.
    """
    if model_kind in ("attn", "attention"):
        def fresh(rs):
            return init_attn(spec.d, rs, config.init_scale, rank)
    elif model_kind in ("h3", "ssm"):
        if rank is not None:
            raise ValueError("low-rank mode applies to attention only")

        def fresh(rs):
            return init_ssm(spec.d, spec.n, rs, config.init_scale)
    else:
        raise ValueError(f"unknown model kind: {model_kind!r}")

    seeded = {"used": False}

    def make_params(rs):
        if warm_start is not None and not seeded["used"]:
            seeded["used"] = True
            names = warm_start.validate().names()
            copy = type(warm_start)(**{k: v.copy() for k, v in names.items()})
            return copy
        return fresh(rs)

    def make_eval(params, lora, rng, trials):
        if config.loss_mode == "averaged_positions":
            return _averaged_risk(params, spec, trials, rng)
        pred = SsmPredictor(params) if isinstance(params, SsmParams) \
            else AttnPredictor(params)
        return mc_risk(pred, spec, trials, rng)

    return _run_restarts(spec, config, make_params, make_eval)


def train_lora(base: AttnParams, spec: DesignSpec, config: TrainConfig,
               rank: int) -> TrainedModel:
    """Phase-2 adapter training: base weights frozen, rank-r score update trained."""
    base = base.validate()

    def make_params(rs):
        return base, init_lora(spec.d, rank, rs, config.init_scale)

    def make_eval(params, lora, rng, trials):
        return mc_risk(AttnPredictor(params, lora), spec, trials, rng)

    return _run_restarts(spec, config, make_params, make_eval)


def worker_count() -> int:
    """Worker pool size for sweeps; the only environment knob."""
    raw = os.environ.get("ICL_LAB_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
