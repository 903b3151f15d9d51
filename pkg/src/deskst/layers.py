"""Neural building blocks: LSTM/BLSTM, temporal max pooling, additive
attention with alignment feedback, output projection, dropout, and
label-smoothed cross entropy.

All layers are pure functions over (inputs, parameters). Sequence inputs are
batched as (B, T, D) with a float 0/1 ``mask`` of shape (B, T); padded steps
are no-ops so a padded batch reproduces per-example results exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "LstmParams",
    "AttentionParams",
    "EncoderStates",
    "AttentionState",
    "DecoderState",
    "SmoothingClampWarning",
    "lstm_step",
    "lstm_sequence",
    "blstm",
    "max_pool_time",
    "pooled_length",
    "additive_attention",
    "precompute_attention_keys",
    "output_layer",
    "label_smoothed_ce",
    "dropout",
    "embed",
]


class SmoothingClampWarning(UserWarning):
    """A smoothed cross-entropy support point had (near-)zero probability."""


@dataclass(frozen=True)
class LstmParams:
    """Fused-gate LSTM weights; gate order along columns is [i | f | g | o]."""

    w_ih: Tensor  # (D_in, 4H)
    w_hh: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]


@dataclass(frozen=True)
class AttentionParams:
    w_query: Tensor  # (D_dec, A)
    w_keys: Tensor  # (D_mem, A)
    v: Tensor  # (A,)
    b: Tensor  # (A,)
    u: Tensor  # (A,) weight of the accumulated-attention feedback


@dataclass
class EncoderStates:
    """Pooled encoder representation h_1..h_T' with its validity mask."""

    states: Tensor  # (B, T', D_mem)
    mask: np.ndarray  # (B, T') float 0/1
    input_lengths: np.ndarray  # (B,) original frame counts

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)


@dataclass
class AttentionState:
    weights: Tensor  # (B, T') rows sum to 1 over valid positions
    context: Tensor  # (B, D_mem)
    feedback: Tensor  # (B, T') accumulated weights including this step


@dataclass
class DecoderState:
    """Per-layer (h, c) pairs; layer -1 is the topmost hidden state."""

    layers: list[tuple[Tensor, Tensor]]

    @property
    def top(self) -> Tensor:
        return self.layers[-1][0]


def lstm_step(
    x: Tensor,
    state: tuple[Tensor, Tensor],
    params: LstmParams,
    step_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update on a (B, D_in) input.

    With ``step_mask`` (B,), masked-out rows carry (h, c) through unchanged.
    """
    h, c = state
    if x.shape[-1] != params.w_ih.shape[0]:
        raise ShapeError(f"lstm_step: input dim {x.shape[-1]} != {params.w_ih.shape[0]}")
    z = x @ params.w_ih + h @ params.w_hh + params.b
    hdim = params.hidden
    i = tz.sigmoid(z[..., 0 * hdim : 1 * hdim])
    f = tz.sigmoid(z[..., 1 * hdim : 2 * hdim])
    g = tz.tanh(z[..., 2 * hdim : 3 * hdim])
    o = tz.sigmoid(z[..., 3 * hdim : 4 * hdim])
    c_new = f * c + i * g
    h_new = o * tz.tanh(c_new)
    if step_mask is not None:
        m = np.asarray(step_mask, dtype=np.float64)[:, None]
        h_new = m * h_new + (1.0 - m) * h
        c_new = m * c_new + (1.0 - m) * c
    return h_new, c_new


def lstm_sequence(
    xs: Tensor,
    mask: np.ndarray,
    params: LstmParams,
    reverse: bool = False,
) -> Tensor:
    """Run an LSTM over (B, T, D_in), returning (B, T, H).

    Fused op with a hand-derived BPTT backward: one graph node per layer
    direction instead of ~15 per time step. Outputs at padded steps are zero;
    the recurrent state carries through padding unchanged, so a reversed pass
    over right-padded input matches the per-example computation.
    """
    xs = as_tensor(xs)
    B, T, _ = xs.shape
    if T == 0:
        raise ShapeError("lstm_sequence: empty sequence")
    H = params.hidden
    m = np.asarray(mask, dtype=np.float64)
    xd = xs.data
    w_ih, w_hh, b = params.w_ih.data, params.w_hh.data, params.b.data

    order = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    cache = {}
    for t in order:
        z = xd[:, t] @ w_ih + h @ w_hh + b
        i = 1.0 / (1.0 + np.exp(-z[:, 0 * H : 1 * H]))
        f = 1.0 / (1.0 + np.exp(-z[:, 1 * H : 2 * H]))
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = 1.0 / (1.0 + np.exp(-z[:, 3 * H : 4 * H]))
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        mt = m[:, t : t + 1]
        cache[t] = (i, f, g, o, c, tc, h)
        out[:, t] = mt * (o * tc)
        h = mt * (o * tc) + (1.0 - mt) * h
        c = mt * c_new + (1.0 - mt) * c

    def backward(gout):
        dW_ih = np.zeros_like(w_ih)
        dW_hh = np.zeros_like(w_hh)
        db = np.zeros_like(b)
        dxs = np.zeros_like(xd)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(list(order)):
            i, f, g, o, c_prev, tc, h_prev = cache[t]
            mt = m[:, t : t + 1]
            dh_new = mt * (gout[:, t] + dh)
            dh_skip = (1.0 - mt) * dh
            dc_new = mt * dc
            dc_skip = (1.0 - mt) * dc
            do = dh_new * tc
            dc_total = dc_new + dh_new * o * (1.0 - tc * tc)
            di = dc_total * g
            dg = dc_total * i
            df = dc_total * c_prev
            dc = dc_total * f + dc_skip
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
                axis=1,
            )
            dW_ih += xd[:, t].T @ dz
            dW_hh += h_prev.T @ dz
            db += dz.sum(axis=0)
            dxs[:, t] = dz @ w_ih.T
            dh = dz @ w_hh.T + dh_skip
        return dxs, dW_ih, dW_hh, db

    return tz._node(out, (xs, params.w_ih, params.w_hh, params.b), backward)


def blstm(xs: Tensor, mask: np.ndarray, fwd: LstmParams, bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM: concat of forward and reversed passes, (B, T, 2H)."""
    return tz.concat([lstm_sequence(xs, mask, fwd), lstm_sequence(xs, mask, bwd, reverse=True)], axis=-1)


def pooled_length(length: int, pool: int) -> int:
    return -(-length // pool)  # ceil division


def max_pool_time(xs: Tensor, mask: np.ndarray, pool: int) -> tuple[Tensor, np.ndarray]:
    """Elementwise max over non-overlapping windows of ``pool`` time steps.

    A trailing partial window is kept (ceil semantics). Padded positions never
    win the max; fully-padded windows produce zeros and a 0 mask entry.
    Returns (pooled (B, T2, D), pooled_mask (B, T2)).
    """
    xs = as_tensor(xs)
    B, T, D = xs.shape
    if pool <= 1:
        return xs, np.asarray(mask, dtype=np.float64)
    T2 = pooled_length(T, pool)
    pad = T2 * pool - T
    m = np.asarray(mask, dtype=np.float64)
    mp = np.pad(m, ((0, 0), (0, pad)))
    xp = np.pad(xs.data, ((0, 0), (0, pad), (0, 0)))
    shifted = xp + (mp[:, :, None] - 1.0) * 1e300  # pads lose every comparison
    windows = shifted.reshape(B, T2, pool, D)
    arg = windows.argmax(axis=2)  # (B, T2, D) index within window
    vals = np.take_along_axis(xp.reshape(B, T2, pool, D), arg[:, :, None, :], axis=2)[:, :, 0, :]
    pooled_mask = (mp.reshape(B, T2, pool).max(axis=2) > 0).astype(np.float64)
    out = vals * pooled_mask[:, :, None]

    def backward(g):
        gm = g * pooled_mask[:, :, None]
        gw = np.zeros((B, T2, pool, D))
        np.put_along_axis(gw, arg[:, :, None, :], gm[:, :, None, :], axis=2)
        gx = gw.reshape(B, T2 * pool, D)[:, :T, :]
        return (gx,)

    return tz._node(out, (xs,), backward), pooled_mask


def precompute_attention_keys(memory: Tensor, params: AttentionParams) -> Tensor:
    """Project memory states once per sequence: (B, T, D_mem) -> (B, T, A)."""
    return memory @ params.w_keys


def additive_attention(
    s_prev: Tensor,
    enc: EncoderStates,
    feedback: Tensor,
    params: AttentionParams,
    keys: Tensor | None = None,
) -> AttentionState:
    """Single-head additive attention with accumulated-weight feedback.

    Energy per position t: v . tanh(W s_prev + V h_t + u * feedback_t + b).
    Weights are a masked softmax over valid positions; the context is their
    weighted sum of memory states; the returned feedback adds these weights.
    """
    if keys is None:
        keys = precompute_attention_keys(enc.states, params)
    query = s_prev @ params.w_query  # (B, A)
    fb = tz.reshape(feedback, (*feedback.shape, 1))  # (B, T, 1)
    pre = tz.tanh(keys + tz.reshape(query, (query.shape[0], 1, query.shape[1])) + fb * params.u + params.b)
    energies = pre @ params.v  # (B, T)
    weights = tz.masked_softmax(energies, enc.mask, axis=-1)
    context = tz.reshape(
        tz.matmul(tz.reshape(weights, (weights.shape[0], 1, weights.shape[1])), enc.states),
        (weights.shape[0], enc.states.shape[-1]),
    )
    return AttentionState(weights=weights, context=context, feedback=feedback + weights)


def output_layer(e_prev: Tensor, s_prev: Tensor, context: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """softmax(linear(e_prev, s_prev, context)) -> (B, V) probabilities."""
    joint = tz.concat([e_prev, s_prev, context], axis=-1)
    return tz.softmax(joint @ w + b, axis=-1)


def label_smoothed_ce(
    pred: Tensor,
    target_id: np.ndarray | int,
    eps: float,
    step_mask: np.ndarray | None = None,
) -> Tensor:
    """-sum_v q_v log pred_v with q = (1-eps) one-hot + eps/V, summed over rows.

    ``pred`` rows must be probability distributions. Zero probabilities at
    support points are clamped to a large finite loss and flagged with a
    SmoothingClampWarning.
    """
    pred = as_tensor(pred)
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing ratio must be in [0, 1), got {eps}")
    ids = np.atleast_1d(np.asarray(target_id, dtype=np.int64))
    rows = pred if pred.ndim == 2 else tz.reshape(pred, (1, pred.shape[-1]))
    V = rows.shape[-1]
    tiny = rows.data < 1e-300
    if tiny.any() and (eps > 0.0 or np.take_along_axis(tiny, ids[:, None], axis=-1).any()):
        warnings.warn("clamped zero probability in smoothed cross entropy", SmoothingClampWarning)
    logp = tz.safe_log(rows)
    picked = tz.gather_last(logp, ids)  # (B,)
    per_row = -((1.0 - eps) * picked + (eps / V) * tz.tsum(logp, axis=-1))
    if step_mask is not None:
        per_row = per_row * np.asarray(step_mask, dtype=np.float64)
    return tz.tsum(per_row)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout during training; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * keep


def embed(token_id: np.ndarray | int, table: Tensor) -> Tensor:
    """Look up embedding rows for integer ids (scalar or any id array)."""
    return tz.embedding(table, np.asarray(token_id, dtype=np.int64))
