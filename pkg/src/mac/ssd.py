"""Selective state-space kernels: discretization and three equivalent scans.

The underlying transform, per head, is the linear recurrence

    h_t = abar_t * h_{t-1} + bbar_t (x) x_t        (outer product over N x P)
    y_t = C_t . h_t

with per-token step sizes ``dt`` (positive), a per-head negative decay rate
``a`` (scalar-times-identity state matrix), and input-dependent coupling
rows B_t / readout rows C_t shared across heads within a group.

Three computation modes produce identical outputs:

- ``scan_recurrent``      step-by-step recurrence; supports streaming state
- ``scan_convolutional``  materializes the full lower-triangular
                          semiseparable operator (zero initial state only)
- ``scan_chunked``        semiseparable matmul inside fixed-length chunks,
                          recurrence across chunk boundaries

Shapes are written unbatched ([T, ...]) below; every function also accepts
one extra leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ContractError, ShapeError, Tensor

DEFAULT_CHUNK = 16

# Finite stand-in for -inf in masked log-decay entries: exp() underflows to
# exactly 0.0 without tripping the debug finiteness checks.
_MASK_FILL = -1e9


@dataclass
class SelectiveParams:
    """Per-layer inputs of the selective scan.

    dt: [T, H]     step sizes, strictly positive (softplus output)
    a:  [H]        continuous-time decay rates, strictly negative
    B:  [T, G, N]  input coupling, one row per parameter group
    C:  [T, G, N]  output readout, one row per parameter group
    x:  [T, H, P]  head inputs
    """

    dt: Tensor
    a: Tensor
    B: Tensor
    C: Tensor
    x: Tensor

    @property
    def batched(self) -> bool:
        return self.dt.ndim == 3

    def dims(self) -> tuple[int, int, int, int, int]:
        """(T, H, P, G, N) after shape validation."""
        off = 1 if self.batched else 0
        if self.dt.ndim != 2 + off or self.B.ndim != 3 + off or self.x.ndim != 3 + off:
            raise ShapeError(
                f"inconsistent ranks: dt {self.dt.shape}, B {self.B.shape}, x {self.x.shape}"
            )
        t, h = self.dt.shape[off], self.dt.shape[off + 1]
        g, n = self.B.shape[off + 1], self.B.shape[off + 2]
        p = self.x.shape[off + 2]
        if self.a.shape != (h,):
            raise ShapeError(f"a has shape {self.a.shape}, expected ({h},)")
        if self.B.shape[off] != t or self.C.shape != self.B.shape:
            raise ShapeError(f"B/C shapes {self.B.shape}/{self.C.shape} disagree with T={t}")
        if self.x.shape[off] != t or self.x.shape[off + 1] != h:
            raise ShapeError(f"x shape {self.x.shape} disagrees with (T,H)=({t},{h})")
        if h % g != 0:
            raise ShapeError(f"heads {h} not divisible by groups {g}")
        return t, h, p, g, n

    def validate(self) -> None:
        self.dims()
        if np.any(self.dt.data <= 0):
            raise ContractError("dt must be strictly positive")
        if np.any(self.a.data >= 0):
            raise ContractError("a must be strictly negative")


@dataclass
class ScanState:
    """Carried hidden state: h [H, P, N] (or [B, H, P, N]) plus step counter."""

    h: Tensor
    step_index: int = 0

    @staticmethod
    def zeros(h_heads: int, p: int, n: int, batch: int | None = None, dtype=None) -> "ScanState":
        shape = (h_heads, p, n) if batch is None else (batch, h_heads, p, n)
        return ScanState(tz.zeros(shape, dtype=dtype), 0)

    def is_zero(self) -> bool:
        return not np.any(self.h.data)


def discretize_zoh(dt: Tensor, a: Tensor, B: Tensor, exact: bool = False):
    """Zero-order-hold discretization of (a, B) with step sizes dt.

    Returns (abar, bbar) where abar = exp(dt*a) has dt's shape [.., T, H] and
    bbar [.., T, H, N] couples inputs into the state. The default uses the
    Mamba-2 simplification bbar = dt * B; ``exact=True`` applies the full
    scalar ZOH rule bbar = ((dt*a)^-1 (exp(dt*a) - 1)) * dt * B, with a
    series fallback near dt*a = 0 where the closed form cancels.
    """
    dt, a, B = tz._ensure(dt), tz._ensure(a), tz._ensure(B)
    z = tz.mul(dt, a)
    abar = tz.exp(z)
    coef = _input_coef(dt, z, exact)
    bbar = _expand_groups(coef, B)
    return abar, bbar


def _input_coef(dt: Tensor, z: Tensor, exact: bool) -> Tensor:
    """Per-head scalar multiplying B_t: dt (simplified) or phi(z)*dt (exact ZOH)."""
    if not exact:
        return dt
    zd = z.data
    small = np.abs(zd) < 1e-6
    # phi(z) = (e^z - 1)/z, with a Taylor branch where cancellation bites
    phi_exact = tz.div(tz.add(tz.exp(tz.where_mask(z, ~small, 1.0)), -1.0),
                       tz.where_mask(z, ~small, 1.0))
    phi_taylor = tz.add(tz.add(1.0, tz.mul(z, 0.5)), tz.mul(tz.mul(z, z), 1.0 / 6.0))
    keep = Tensor(np.where(small, 0.0, 1.0).astype(zd.dtype))
    phi = tz.add(tz.mul(phi_exact, keep), tz.mul(phi_taylor, tz.add(1.0, tz.neg(keep))))
    return tz.mul(phi, dt)


def _expand_groups(coef: Tensor, B: Tensor) -> Tensor:
    """coef [.., T, H] times group rows B [.., T, G, N] -> per-head [.., T, H, N]."""
    off = coef.ndim - 2
    t, h = coef.shape[off], coef.shape[off + 1]
    g, n = B.shape[off + 1], B.shape[off + 2]
    lead = coef.shape[:off]
    c = tz.reshape(coef, lead + (t, g, h // g, 1))
    b = tz.reshape(B, lead + (t, g, 1, n))
    return tz.reshape(tz.mul(c, b), lead + (t, h, n))


def _as_batched(params: SelectiveParams) -> tuple[SelectiveParams, bool]:
    if params.batched:
        return params, True
    return (
        SelectiveParams(
            dt=tz.reshape(params.dt, (1,) + params.dt.shape),
            a=params.a,
            B=tz.reshape(params.B, (1,) + params.B.shape),
            C=tz.reshape(params.C, (1,) + params.C.shape),
            x=tz.reshape(params.x, (1,) + params.x.shape),
        ),
        False,
    )


def _state_as_batched(state: ScanState | None, b: int, h: int, p: int, n: int, was_batched: bool, dtype) -> Tensor:
    if state is None:
        return tz.zeros((b, h, p, n), dtype=dtype)
    hs = state.h
    if hs.ndim == 3 and not was_batched:
        hs = tz.reshape(hs, (1,) + hs.shape)
    if hs.shape != (b, h, p, n):
        raise ShapeError(f"initial state shape {state.h.shape}, expected {(b, h, p, n)}")
    return hs


def scan_recurrent(
    params: SelectiveParams,
    initial: ScanState | None = None,
    exact_zoh: bool = False,
    collect_states: bool = False,
):
    """Step-by-step evaluation of the recurrence.

    Returns (y, final_state) with y [.., T, H, P]; with ``collect_states``
    also returns the per-step hidden states stacked as [.., T, H, P, N].
    Feeding ``final_state`` back as ``initial`` of a subsequent call equals
    one uninterrupted scan (streaming contract).
    """
    params.validate()
    p_, was_batched = _as_batched(params)
    bsz, t, h = p_.dt.shape
    n = p_.B.shape[3]
    p = p_.x.shape[3]

    z = tz.mul(p_.dt, p_.a)
    abar = tz.exp(z)  # [B, T, H]
    rb = _expand_groups(_input_coef(p_.dt, z, exact_zoh), p_.B)  # [B, T, H, N]
    c_head = _expand_groups(tz.ones((bsz, t, h)), p_.C)  # [B, T, H, N]

    hstate = _state_as_batched(initial, bsz, h, p, n, was_batched, p_.x.dtype)
    ys = []
    states = []
    for step in range(t):
        decay = tz.reshape(abar[:, step, :], (bsz, h, 1, 1))
        inject = tz.mul(
            tz.reshape(rb[:, step, :, :], (bsz, h, 1, n)),
            tz.reshape(p_.x[:, step, :, :], (bsz, h, p, 1)),
        )
        hstate = tz.add(tz.mul(decay, hstate), inject)
        y_t = tz.tsum(
            tz.mul(tz.reshape(c_head[:, step, :, :], (bsz, h, 1, n)), hstate), axis=-1
        )
        ys.append(tz.reshape(y_t, (bsz, 1, h, p)))
        if collect_states:
            states.append(tz.reshape(hstate, (bsz, 1, h, p, n)))

    y = tz.concat(ys, axis=1)
    start = initial.step_index if initial is not None else 0
    final = ScanState(hstate if was_batched else tz.reshape(hstate, (h, p, n)), start + t)
    if not was_batched:
        y = tz.reshape(y, (t, h, p))
    if collect_states:
        traj = tz.concat(states, axis=1)
        if not was_batched:
            traj = tz.reshape(traj, (t, h, p, n))
        return y, final, traj
    return y, final


def scan_convolutional(
    params: SelectiveParams,
    initial: ScanState | None = None,
    exact_zoh: bool = False,
) -> Tensor:
    """Whole-sequence evaluation through the semiseparable operator.

    For time-invariant parameters this is convolution by the kernel
    (C bbar, C abar bbar, C abar^2 bbar, ...); with selective parameters the
    kernel generalizes to the lower-triangular operator
    y_t = sum_{s<=t} C_t . (prod_{r=s+1..t} abar_r) bbar_s x_s.
    Requires a zero initial state.
    """
    if initial is not None and not initial.is_zero():
        raise ContractError("convolution mode requires a zero initial state")
    params.validate()
    p_, was_batched = _as_batched(params)
    t, h = p_.dt.shape[1], p_.dt.shape[2]
    p = p_.x.shape[3]

    y, _ = _semiseparable_block(p_, h_in=None, exact_zoh=exact_zoh)
    if not was_batched:
        y = tz.reshape(y, (t, h, p))
    return y


def scan_chunked(
    params: SelectiveParams,
    chunk_len: int = DEFAULT_CHUNK,
    initial: ScanState | None = None,
    exact_zoh: bool = False,
):
    """Chunked evaluation: semiseparable matmuls inside each chunk, state
    carried across chunk boundaries by the recurrence.

    The carried state is held in float64 even when inputs are float32 so
    cross-chunk roundoff does not compound. ``chunk_len == 1`` degenerates
    to the recurrent path and is dispatched there.
    """
    if chunk_len < 1:
        raise ContractError(f"chunk_len must be >= 1, got {chunk_len}")
    if chunk_len == 1:
        return scan_recurrent(params, initial=initial, exact_zoh=exact_zoh)
    params.validate()
    p_, was_batched = _as_batched(params)
    bsz, t, h = p_.dt.shape
    p = p_.x.shape[3]
    n = p_.B.shape[3]

    hstate = _state_as_batched(initial, bsz, h, p, n, was_batched, p_.x.dtype)
    in_dtype = p_.x.dtype
    ys = []
    for lo in range(0, t, chunk_len):
        hi = min(lo + chunk_len, t)
        piece = SelectiveParams(
            dt=p_.dt[:, lo:hi, :],
            a=p_.a,
            B=p_.B[:, lo:hi, :, :],
            C=p_.C[:, lo:hi, :, :],
            x=p_.x[:, lo:hi, :, :],
        )
        y_c, hstate = _semiseparable_block(piece, h_in=hstate, exact_zoh=exact_zoh)
        hstate = tz.cast(hstate, np.float64)  # cross-chunk carry at full width
        if y_c.dtype != in_dtype:
            y_c = tz.cast(y_c, in_dtype)
        ys.append(y_c)
    y = tz.concat(ys, axis=1)
    if hstate.dtype != in_dtype:
        hstate = tz.cast(hstate, in_dtype)
    start = initial.step_index if initial is not None else 0
    final = ScanState(hstate if was_batched else tz.reshape(hstate, (h, p, n)), start + t)
    if not was_batched:
        y = tz.reshape(y, (t, h, p))
    return y, final


def _semiseparable_block(p_: SelectiveParams, h_in: Tensor | None, exact_zoh: bool):
    """One dense lower-triangular block over a full (sub)sequence.

    p_ is batched: dt [B,L,H], B/C [B,L,G,N], x [B,L,H,P]; h_in [B,H,P,N]
    or None for a zero start. Returns (y [B,L,H,P], h_out [B,H,P,N]).
    """
    bsz, L, h = p_.dt.shape
    g, n = p_.B.shape[2], p_.B.shape[3]
    p = p_.x.shape[3]
    hpg = h // g

    z = tz.mul(p_.dt, p_.a)  # [B,L,H] log decay per step
    cum = tz.cumsum(z, axis=1)  # [B,L,H] inclusive log decay from block start
    coef_in = _input_coef(p_.dt, z, exact_zoh)  # [B,L,H]

    # pairwise decay factors: prod_{r=s+1..t} abar_r = exp(cum_t - cum_s), s <= t
    seg = tz.add(
        tz.reshape(cum, (bsz, L, 1, h)), tz.neg(tz.reshape(cum, (bsz, 1, L, h)))
    )  # [B, t, s, H]
    keep = np.tril(np.ones((L, L), dtype=bool)).reshape(1, L, L, 1)
    decay = tz.exp(tz.where_mask(seg, keep, _MASK_FILL))  # 0 above the diagonal

    # readout-coupling grams per group: gram[b,g,t,s] = C_t . B_s
    c_g = tz.transpose(p_.C, (0, 2, 1, 3))  # [B,G,L,N]
    b_g = tz.transpose(p_.B, (0, 2, 3, 1))  # [B,G,N,L]
    gram = tz.matmul(c_g, b_g)  # [B,G,L,L]

    # combine (expanding groups to heads): coef[b,h,t,s]
    decay_h = tz.transpose(decay, (0, 3, 1, 2))  # [B,H,t,s]
    scale_s = tz.reshape(tz.transpose(coef_in, (0, 2, 1)), (bsz, h, 1, L))
    mixed = tz.mul(
        tz.reshape(gram, (bsz, g, 1, L, L)),
        tz.reshape(tz.mul(decay_h, scale_s), (bsz, g, hpg, L, L)),
    )
    coef = tz.reshape(mixed, (bsz, h, L, L))

    x_h = tz.transpose(p_.x, (0, 2, 1, 3))  # [B,H,L,P]
    y = tz.matmul(coef, x_h)  # [B,H,L,P] intra-block contributions

    cum_last = cum[:, L - 1, :]  # [B,H]

    if h_in is not None:
        # y_state[b,h,t,p] = sum_n C_head[b,t,h,n] exp(cum_t) h_in[b,h,p,n]
        expcum = tz.exp(cum)  # [B,L,H], <= 1
        ce = tz.reshape(
            tz.mul(
                tz.reshape(p_.C, (bsz, L, g, 1, n)),
                tz.reshape(expcum, (bsz, L, g, hpg, 1)),
            ),
            (bsz, L, h, n),
        )
        y_state = tz.matmul(
            tz.transpose(ce, (0, 2, 1, 3)),  # [B,H,L,N]
            tz.transpose(h_in, (0, 1, 3, 2)),  # [B,H,N,P]
        )
        y = tz.add(y, y_state)

    # block-final state: h_out = exp(cum_last) h_in + sum_s decay(L-1,s) bbar_s (x) x_s
    tail = tz.exp(
        tz.add(tz.reshape(cum_last, (bsz, 1, h)), tz.neg(cum))
    )  # [B,L,H], prod_{r=s+1..L-1}
    w = tz.reshape(
        tz.mul(
            tz.reshape(p_.B, (bsz, L, g, 1, n)),
            tz.reshape(tz.mul(tail, coef_in), (bsz, L, g, hpg, 1)),
        ),
        (bsz, L, h, n),
    )
    h_out = tz.matmul(
        tz.transpose(p_.x, (0, 2, 3, 1)),  # [B,H,P,L]
        tz.transpose(w, (0, 2, 1, 3)),  # [B,H,L,N]
    )  # [B,H,P,N]
    if h_in is not None:
        h_out = tz.add(h_out, tz.mul(tz.reshape(tz.exp(cum_last), (bsz, h, 1, 1)), h_in))

    return tz.transpose(y, (0, 2, 1, 3)), h_out


def count_flops(
    t: int,
    n: int,
    h: int,
    p: int,
    mode: str,
    g: int = 1,
    chunk_len: int = DEFAULT_CHUNK,
) -> int:
    """Analytic floating-point operation count of one forward scan.

    Counts multiplies and adds of the dominant terms of each mode as
    implemented above (exp counted as one op). The recurrent count is exactly
    linear in T; the chunked count is linear whenever chunk_len divides T.
    """
    if min(t, n, h, p, g) < 1:
        raise ContractError("dimensions must be positive")
    if mode == "recurrent":
        per_step = 5 * h * p * n + h * n + 2 * h
        return t * per_step
    if mode == "chunked":
        if chunk_len < 1:
            raise ContractError("chunk_len must be >= 1")
        if chunk_len == 1:
            return count_flops(t, n, h, p, "recurrent", g)
        total = 0
        lo = 0
        while lo < t:
            length = min(chunk_len, t - lo)
            total += _block_flops(length, n, h, p, g, with_state=True)
            lo += length
        return total
    if mode == "convolutional":
        return _block_flops(t, n, h, p, g, with_state=False)
    raise ContractError(f"unknown mode {mode!r}")


def _block_flops(length: int, n: int, h: int, p: int, g: int, with_state: bool) -> int:
    pairwise = length * length * (2 * g * n + 5 * h + 2 * h * p)
    linear = length * (2 * h + 2 * h * n + 2 * h * n * p)
    state = length * (2 * h * n * p + h * n + 2 * h) + h * p * n + h if with_state else 0
    return pairwise + linear + state
