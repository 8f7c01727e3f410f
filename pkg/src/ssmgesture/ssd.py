"""Scalar-decay state space kernels in their three equivalent forms.

For decays ``a`` (length T, values in [0, 1]), input projections ``B`` and
output projections ``C`` (both ``T x S``) and values ``V`` (``T x P``):

* quadratic: ``Y = (L o (C B^T)) V`` with the 1-semiseparable mask
  ``L[i, j] = a[j+1] * ... * a[i]`` for ``i >= j`` and 0 above the diagonal;
* linear: ``h_t = a_t h_{t-1} + b_t v_t^T``, ``y_t = h_t^T c_t``;
* chunked: quadratic inside chunks, recurrent state carried across chunks.

Multi-head variants take ``a`` as ``T x H`` and ``V`` as ``T x H x P`` and
share ``B``/``C`` across heads. Accumulation is always float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, TensorError, active_tape, make_result


@dataclass(frozen=True)
class SSDParams:
    a: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        a, B, C = (np.asarray(v) for v in (self.a, self.B, self.C))
        if B.ndim != 2 or C.shape != B.shape:
            raise TensorError(f"B and C must share shape T x S, got {B.shape} and {C.shape}")
        if a.shape[0] != B.shape[0]:
            raise TensorError(f"decay length {a.shape[0]} != T={B.shape[0]}")
        _check_decay(a)

    @property
    def T(self) -> int:
        return self.B.shape[0]

    @property
    def S(self) -> int:
        return self.B.shape[1]


def _check_decay(a: np.ndarray) -> None:
    if np.any(a < 0.0) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
        raise TensorError("decay scalars must lie in [0, 1]")


def segsum(log_a: np.ndarray, dtype=np.float64) -> np.ndarray:
    """``out[i, j] = sum(log_a[j+1..i])`` for ``i >= j``, ``-inf`` above the diagonal.

    Built from a cumulative sum so it costs one T x T buffer; ``log_a`` may
    contain ``-inf`` (zero decay) without producing NaNs below the diagonal.
    """
    T = log_a.shape[0]
    x = np.repeat(log_a[None, :].astype(dtype), T, axis=0).T  # x[i, j] = log_a[i]
    x[np.triu_indices(T)] = 0.0
    out = np.cumsum(x, axis=0)  # out[i, j] = sum_{k=j+1..i} log_a[k]
    out[np.triu_indices(T, 1)] = -np.inf
    return out


def build_1ss_mask(a) -> np.ndarray:
    """Lower-triangular mask with ``L[i, j] = prod(a[j+1..i])``; ``L[i, i] = 1``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise TensorError("decays must be a vector")
    _check_decay(a)
    with np.errstate(divide="ignore"):
        return np.exp(segsum(np.log(a)))


def smasked_attention_quadratic(p: SSDParams, V) -> np.ndarray:
    """Single-head dual form with an explicit T x T mask and score matrix."""
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != p.T:
        raise TensorError(f"V must be T x P with T={p.T}, got {V.shape}")
    M = build_1ss_mask(p.a) * (np.asarray(p.C, np.float64) @ np.asarray(p.B, np.float64).T)
    return M @ V.astype(np.float64)


def ssm_scan_linear(p: SSDParams, V) -> np.ndarray:
    """Single-head recurrent form; O(T) time, state is S x P."""
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] != p.T:
        raise TensorError(f"V must be T x P with T={p.T}, got {V.shape}")
    a = np.asarray(p.a, np.float64)
    B = np.asarray(p.B, np.float64)
    C = np.asarray(p.C, np.float64)
    T, P = V.shape
    h = np.zeros((p.S, P))
    y = np.empty((T, P))
    for t in range(T):
        h *= a[t]
        h += np.outer(B[t], V[t])
        y[t] = C[t] @ h
    return y


def ssm_scan_chunked(p: SSDParams, V, chunk: int = 64) -> np.ndarray:
    """Block form: quadratic within chunks of ``chunk`` steps, recurrence across them."""
    if chunk < 1:
        raise TensorError("chunk must be >= 1")
    y = scan_heads(
        np.asarray(p.a, np.float64)[:, None], p.B, p.C,
        np.asarray(V, np.float64)[:, None, :], form="chunked", chunk=chunk,
    )
    return y[:, 0, :]


# multi-head kernels -------------------------------------------------------

def _scan_linear_heads(a, B, C, V, keep_states: bool = False):
    T, H, P = V.shape
    S = B.shape[1]
    h = np.zeros((H, S, P))
    y = np.empty((T, H, P))
    states = np.empty((T, H, S, P)) if keep_states else None
    for t in range(T):
        h *= a[t][:, None, None]
        h += B[t][None, :, None] * V[t][:, None, :]
        y[t] = np.einsum("s,hsp->hp", C[t], h)
        if keep_states:
            states[t] = h
    return y, states


def _scan_quadratic_heads(a, B, C, V, block: int = 1024):
    """Dual form with the full T x T matrix materialized per head.

    The mask and scores are filled in row blocks so that the only T x T
    allocation is the structured matrix itself.
    """
    T, H, P = V.shape
    cs = np.cumsum(np.log(a), axis=0)  # T x H; callers guarantee a > 0
    scores = None
    y = np.empty((T, H, P))
    for h in range(H):
        if scores is None:
            scores = np.empty((T, T))
        for r0 in range(0, T, block):
            r1 = min(T, r0 + block)
            rows = scores[r0:r1]
            np.subtract(cs[r0:r1, h, None], cs[None, :, h], out=rows)
            with np.errstate(over="ignore"):
                np.exp(rows, out=rows)
            i = np.arange(r0, r1)[:, None]
            rows[np.arange(T)[None, :] > i] = 0.0
            rows *= C[r0:r1] @ B.T
        y[:, h, :] = scores @ V[:, h, :]
    return y


def _exact_quadratic_heads(a, B, C, V):
    # segsum path: exact for zero decays, used for small T and inside chunks
    T, H, P = V.shape
    G = C @ B.T
    y = np.empty((T, H, P))
    with np.errstate(divide="ignore"):
        la = np.log(a)
    for h in range(H):
        y[:, h, :] = (np.exp(segsum(la[:, h])) * G) @ V[:, h, :]
    return y


def _scan_chunked_heads(a, B, C, V, chunk: int):
    T, H, P = V.shape
    S = B.shape[1]
    y = np.empty((T, H, P))
    state = np.zeros((H, S, P))  # state after the previous chunk
    with np.errstate(divide="ignore"):
        la = np.log(a)
    for s0 in range(0, T, chunk):
        s1 = min(T, s0 + chunk)
        la_c = la[s0:s1]
        Bc, Cc, Vc = B[s0:s1], C[s0:s1], V[s0:s1]
        y_diag = _exact_quadratic_heads(a[s0:s1], Bc, Cc, Vc)
        # decay from chunk start through position i (inclusive)
        into = np.exp(np.cumsum(la_c, axis=0))  # Q x H
        y_off = into[:, :, None] * np.einsum("qs,hsp->qhp", Cc, state)
        y[s0:s1] = y_diag + y_off
        # decay from position j (exclusive) to chunk end
        rev = np.cumsum(la_c[::-1], axis=0)[::-1]
        out_of = np.exp(np.vstack([rev[1:], np.zeros((1, H))]))  # Q x H
        chunk_state = np.einsum("qh,qs,qhp->hsp", out_of, Bc, Vc)
        state = np.exp(la_c.sum(axis=0))[:, None, None] * state + chunk_state
    return y


def scan_heads(a, B, C, V, form: str = "linear", chunk: int = 64) -> np.ndarray:
    """Evaluate ``H`` independent heads; ``a: T x H``, ``V: T x H x P``."""
    a = np.asarray(a, np.float64)
    B = np.asarray(B, np.float64)
    C = np.asarray(C, np.float64)
    V = np.asarray(V, np.float64)
    if a.ndim != 2 or V.ndim != 3 or V.shape[:2] != a.shape or B.shape[0] != a.shape[0]:
        raise TensorError(f"scan_heads: shapes a={a.shape} B={B.shape} C={C.shape} V={V.shape}")
    _check_decay(a)
    if form == "linear":
        return _scan_linear_heads(a, B, C, V)[0]
    if form == "quadratic":
        if np.any(a == 0.0):
            return _exact_quadratic_heads(a, B, C, V)
        return _scan_quadratic_heads(a, B, C, V)
    if form == "chunked":
        return _scan_chunked_heads(a, B, C, V, chunk)
    raise TensorError(f"unknown scan form {form!r}")


def ssd(a: Tensor, B: Tensor, C: Tensor, V: Tensor, n_heads: int,
        form: str = "linear", chunk: int = 64) -> Tensor:
    """Differentiable multi-head scan; ``V`` and the result are ``T x (H*P)``.

    The reverse pass runs the adjoint recurrence, whichever form computed the
    forward value.
    """
    T = a.shape[0]
    if a.shape != (T, n_heads) or V.shape[0] != T or V.shape[1] % n_heads:
        raise TensorError(f"ssd: shapes a={a.shape} V={V.shape} heads={n_heads}")
    P = V.shape[1] // n_heads
    Vh = V.data.reshape(T, n_heads, P).astype(np.float64)
    a_d = a.data.astype(np.float64)
    B_d = B.data.astype(np.float64)
    C_d = C.data.astype(np.float64)
    _check_decay(a_d)
    recording = active_tape() is not None and any(t.requires_grad for t in (a, B, C, V))
    if form == "linear":
        y, states = _scan_linear_heads(a_d, B_d, C_d, Vh, keep_states=recording)
    else:
        y = scan_heads(a_d, B_d, C_d, Vh, form=form, chunk=chunk)
        states = None

    def bw(g):
        nonlocal states
        if states is None:
            _, states = _scan_linear_heads(a_d, B_d, C_d, Vh, keep_states=True)
        gy = g.reshape(T, n_heads, P)
        S = B_d.shape[1]
        ga = np.zeros((T, n_heads))
        gB = np.zeros_like(B_d)
        gC = np.zeros_like(C_d)
        gV = np.zeros_like(Vh)
        gh = np.zeros((n_heads, S, P))
        for t in range(T - 1, -1, -1):
            gC[t] = np.einsum("hsp,hp->s", states[t], gy[t])
            gh += C_d[t][None, :, None] * gy[t][:, None, :]
            gB[t] = np.einsum("hsp,hp->s", gh, Vh[t])
            gV[t] = np.einsum("hsp,s->hp", gh, B_d[t])
            if t > 0:
                ga[t] = np.einsum("hsp,hsp->h", gh, states[t - 1])
            gh *= a_d[t][:, None, None]
        return (ga.astype(a.dtype), gB.astype(B.dtype), gC.astype(C.dtype),
                gV.reshape(T, n_heads * P).astype(V.dtype))

    return make_result(y.reshape(T, n_heads * P).astype(V.dtype), [a, B, C, V], bw, "ssd")
