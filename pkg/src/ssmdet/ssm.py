"""Selective state-space scan kernels.

A diagonal linear system h' = A h + B x, y = P h + Q x is discretized with
a per-channel timescale delta and evaluated as the recurrence

    h_t = Abar_t * h_{t-1} + Bbar_t * x_t,    y_t = sum_n P_t h_t + Q x_t

with h_0 = 0. ``selective_scan_seq`` is the transparent step-by-step
reference; ``selective_scan_blocked`` batches the discretization and the
output contraction per chunk while carrying the state across chunk
boundaries, and must match the reference within dtype tolerance on every
instance. ``ssm_scan`` is the taped, batched variant used inside the
vision blocks, with a hand-derived adjoint recurrence for backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, accumulate, make_op

__all__ = [
    "SSMParams",
    "ScanResult",
    "cross_merge",
    "cross_scan",
    "discretize_taylor",
    "discretize_zoh",
    "selective_scan_blocked",
    "selective_scan_seq",
    "ssm_scan",
]

# Below this magnitude the (exp(dA) - 1)/A factor switches to its dA limit.
_A_SINGULAR = 1e-8


def discretize_zoh(A: np.ndarray, B: np.ndarray, delta: np.ndarray):
    """Zero-order-hold discretization of a diagonal system.

    Abar = exp(delta*A); Bbar = (exp(delta*A) - 1)/A * B, with the A->0
    limit delta*B substituted where |A| < 1e-8. ``delta`` may carry
    leading axes (per-timestep); it broadcasts against A's [D, N].
    """
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize_zoh: delta must be strictly positive")
    dA = delta[..., None] * A
    abar = np.exp(dA)
    small = np.abs(A) < _A_SINGULAR
    a_safe = np.where(small, 1.0, A)
    bbar = np.where(small, delta[..., None] * B, (abar - 1.0) / a_safe * B)
    return abar, bbar


def discretize_taylor(A: np.ndarray, B: np.ndarray, delta: np.ndarray):
    """First-order approximation: Abar = exp(delta*A), Bbar = delta*B."""
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize_taylor: delta must be strictly positive")
    abar = np.exp(delta[..., None] * A)
    bbar = delta[..., None] * B
    return abar, bbar


_DISCRETIZERS = {"zoh": discretize_zoh, "taylor": discretize_taylor}


@dataclass
class SSMParams:
    """Continuous diagonal SSM parameters and their discretization choice.

    Shapes: A [D, N]; B and P either [D, N] (time-invariant) or [L, D, N]
    (input-dependent); Q [D]; delta [D] or [L, D], strictly positive.
    """

    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    delta: np.ndarray
    method: str = "zoh"

    def __post_init__(self):
        self.A = np.asarray(self.A)
        self.B = np.asarray(self.B)
        self.P = np.asarray(self.P)
        self.Q = np.asarray(self.Q)
        self.delta = np.asarray(self.delta)
        if self.A.ndim != 2:
            raise ShapeError(f"SSMParams: A must be [channels, states], got {self.A.shape}")
        if self.method not in _DISCRETIZERS:
            raise ValueError(f"SSMParams: unknown discretization {self.method!r}")
        if np.any(self.delta <= 0):
            raise ValueError("SSMParams: delta must be strictly positive")

    def step_arrays(self, num_steps: int):
        """Expand delta/B/P to per-step indexable forms for a scan of length L."""
        d = self.delta if self.delta.ndim == 2 else np.broadcast_to(self.delta, (num_steps,) + self.delta.shape)
        b = self.B if self.B.ndim == 3 else np.broadcast_to(self.B, (num_steps,) + self.B.shape)
        p = self.P if self.P.ndim == 3 else np.broadcast_to(self.P, (num_steps,) + self.P.shape)
        return d, b, p


@dataclass
class ScanResult:
    y: np.ndarray        # [L, D]
    h_final: np.ndarray  # [D, N]


def selective_scan_seq(x: np.ndarray, params: SSMParams) -> ScanResult:
    """Ground-truth sequential recurrence over a single [L, D] sequence."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"selective_scan_seq: x must be [length, channels], got {x.shape}")
    length, d = x.shape
    if length < 1:
        raise ShapeError("selective_scan_seq: empty sequence")
    n = params.A.shape[1]
    disc = _DISCRETIZERS[params.method]
    deltas, bs, ps = params.step_arrays(length)
    h = np.zeros((d, n), dtype=x.dtype)
    y = np.empty((length, d), dtype=x.dtype)
    for t in range(length):
        abar, bbar = disc(params.A, bs[t], deltas[t])
        bx = bbar * x[t][:, None]
        h = abar * h + bx
        y[t] = (ps[t] * h).sum(axis=-1) + params.Q * x[t]
    return ScanResult(y=y, h_final=h)


def selective_scan_blocked(x: np.ndarray, params: SSMParams, block_len: int) -> ScanResult:
    """Chunked scan: vectorized discretization and output contraction per block.

    The state recurrence itself stays strictly sequential, so results are
    identical to ``selective_scan_seq`` up to dtype rounding for every
    block length.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"selective_scan_blocked: x must be [length, channels], got {x.shape}")
    if block_len < 1:
        raise ShapeError(f"selective_scan_blocked: block_len {block_len} must be >= 1")
    length, d = x.shape
    n = params.A.shape[1]
    disc = _DISCRETIZERS[params.method]
    deltas, bs, ps = params.step_arrays(length)
    h = np.zeros((d, n), dtype=x.dtype)
    y = np.empty((length, d), dtype=x.dtype)
    for t0 in range(0, length, block_len):
        t1 = min(t0 + block_len, length)
        abar, bbar = disc(params.A, bs[t0:t1], deltas[t0:t1])
        bx = bbar * x[t0:t1, :, None]
        hbuf = np.empty((t1 - t0, d, n), dtype=x.dtype)
        for i in range(t1 - t0):
            h = abar[i] * h + bx[i]
            hbuf[i] = h
        y[t0:t1] = (ps[t0:t1] * hbuf).sum(axis=-1) + params.Q * x[t0:t1]
    return ScanResult(y=y, h_final=h)


# ---- taped batched scan ----------------------------------------------------

def _scan_forward(xd, dd, a_diag, bd, pd, qd, block_len, keep_states):
    bt, length, d = xd.shape
    n = a_diag.shape[-1]
    h = np.zeros((bt, d, n), dtype=xd.dtype)
    y = np.empty((bt, length, d), dtype=xd.dtype)
    hs = np.empty((bt, length, d, n), dtype=xd.dtype) if keep_states else None
    for t0 in range(0, length, block_len):
        t1 = min(t0 + block_len, length)
        dch = dd[:, t0:t1]
        abar = np.exp(dch[..., None] * a_diag)
        bx = (dch * xd[:, t0:t1])[..., None] * bd[:, t0:t1, None, :]
        hbuf = np.empty((bt, t1 - t0, d, n), dtype=xd.dtype)
        for i in range(t1 - t0):
            h = abar[:, i] * h + bx[:, i]
            hbuf[:, i] = h
        y[:, t0:t1] = (pd[:, t0:t1, None, :] * hbuf).sum(-1) + qd * xd[:, t0:t1]
        if keep_states:
            hs[:, t0:t1] = hbuf
    return y, hs


def _scan_backward(g, xd, dd, a_diag, bd, pd, qd, hs, block_len):
    """Adjoint of the recurrence: lam_t = g_t P_t + Abar_{t+1} lam_{t+1}."""
    bt, length, d = xd.shape
    lam = np.zeros((bt, d, a_diag.shape[-1]), dtype=g.dtype)
    # terms with no time recurrence, vectorized over the whole sequence
    gp = (g[..., None] * hs).sum(axis=2)
    gq = (g * xd).sum(axis=(0, 1))
    gx = g * qd
    dx_prod = dd * xd
    gdelta = np.empty_like(dd)
    ga_diag = np.zeros_like(a_diag)
    gb = np.empty_like(bd)
    for t0 in reversed(range(0, length, block_len)):
        t1 = min(t0 + block_len, length)
        dch = dd[:, t0:t1]
        abar = np.exp(dch[..., None] * a_diag)
        for i in range(t1 - t0 - 1, -1, -1):
            t = t0 + i
            lam += g[:, t, :, None] * pd[:, t, None, :]
            hprev = hs[:, t - 1] if t > 0 else 0.0
            a_t = abar[:, i]
            grad_abar_a = lam * hprev * a_t
            ga_diag += (grad_abar_a * dch[:, i, :, None]).sum(axis=0)
            lam_dot_b = (lam * bd[:, t, None, :]).sum(-1)
            gdelta[:, t] = (grad_abar_a * a_diag).sum(-1) + lam_dot_b * xd[:, t]
            gx[:, t] += lam_dot_b * dd[:, t]
            gb[:, t] = (lam * dx_prod[:, t, :, None]).sum(axis=1)
            lam = lam * a_t
    return gx, gdelta, ga_diag, gb, gp, gq


def ssm_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, P: Tensor, Q: Tensor,
             block_len: int = 64) -> Tensor:
    """Batched selective scan with input-dependent delta/B/P.

    Shapes: x and delta [batch, L, D]; B and P [batch, L, N] (shared over
    channels); A [D, N] diagonal; Q [D]. Discretization is exp for the
    state factor and delta*B for the input factor. Returns y [batch, L, D].
    """
    bt, length, d = x.shape
    n = A.shape[1]
    if delta.shape != (bt, length, d):
        raise ShapeError(f"ssm_scan: delta shape {delta.shape} != x shape {x.shape}")
    if B.shape != (bt, length, n) or P.shape != (bt, length, n):
        raise ShapeError(f"ssm_scan: B/P must be [batch, L, {n}], got {B.shape} / {P.shape}")
    if Q.shape != (d,):
        raise ShapeError(f"ssm_scan: Q must be [{d}], got {Q.shape}")
    keep = T.active_tape() is not None and any(
        t.requires_grad for t in (x, delta, A, B, P, Q)
    )
    y, hs = _scan_forward(x.data, delta.data, A.data, B.data, P.data, Q.data,
                          block_len, keep_states=keep)

    def rule(g):
        gx, gdelta, ga, gb, gp, gq = _scan_backward(
            g, x.data, delta.data, A.data, B.data, P.data, Q.data, hs, block_len)
        accumulate(x, gx)
        accumulate(delta, gdelta)
        accumulate(A, ga)
        accumulate(B, gb)
        accumulate(P, gp)
        accumulate(Q, gq)

    return make_op(y, rule, x, delta, A, B, P, Q)


# ---- 2D cross-scan ---------------------------------------------------------

def cross_scan(fmap: Tensor) -> list[Tensor]:
    """Flatten [N, D, H, W] into four traversal orders, each [N, H*W, D].

    Orders: row-major, column-major, and their reverses, so a 1D scan
    sees every spatial position from four directions.
    """
    n, d, h, w = fmap.shape
    seq = fmap.reshape(n, d, h * w).transpose(0, 2, 1)
    seq_t = fmap.transpose(0, 1, 3, 2).reshape(n, d, h * w).transpose(0, 2, 1)
    return [seq, seq_t, T.flip(seq, 1), T.flip(seq_t, 1)]


def cross_merge(seqs, height: int, width: int) -> Tensor:
    """Undo each traversal of :func:`cross_scan` and sum the four maps."""
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge: expected 4 sequences, got {len(seqs)}")
    n, length, d = seqs[0].shape
    if length != height * width:
        raise ShapeError(f"cross_merge: sequence length {length} != {height}x{width}")

    def undo_rows(s):
        return s.transpose(0, 2, 1).reshape(n, d, height, width)

    def undo_cols(s):
        return s.transpose(0, 2, 1).reshape(n, d, width, height).transpose(0, 1, 3, 2)

    return (undo_rows(seqs[0]) + undo_cols(seqs[1])
            + undo_rows(T.flip(seqs[2], 1)) + undo_cols(T.flip(seqs[3], 1)))
