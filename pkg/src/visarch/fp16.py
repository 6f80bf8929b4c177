"""Software emulation of IEEE binary16 attention-score arithmetic.

Why: half precision stores at most 65504, and the raw q.k dot products of
wide heads overflow it long before the softmax would saturate. This module
reproduces half-precision behavior exactly (round-to-nearest-even on every
intermediate, sequential accumulation in ascending index order) so the four
score scalings can be compared without half-precision hardware.

The scalar encoder f16_round works on the bit level; the array pipeline uses
the same rounding via a vectorized routine, and the two are cross-checked in
the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import DEFAULT_PB_RELAX_ALPHA, SCORE_MODES

F16_MAX = 65504.0
_MIN_SUBNORMAL = 2.0 ** -24


@dataclass(frozen=True)
class F16Sample:
    """One value pushed through binary16: its bits and what happened to it."""

    bits: int
    value: float
    overflowed: bool
    underflowed: bool


def f16_round(x: float) -> F16Sample:
    """Round a finite float to the nearest binary16 (ties to even), bit by bit.

    Values at or beyond 65520 (the midpoint above the largest finite half)
    become infinity with the overflow flag; nonzero values rounding to zero
    set the underflow flag.
    """
    x = float(x)
    if np.isnan(x):
        return F16Sample(0x7E00, float("nan"), False, False)
    sign = 0x8000 if (x < 0 or (x == 0 and np.signbit(x))) else 0
    a = abs(x)
    if np.isinf(a):
        return F16Sample(sign | 0x7C00, np.copysign(np.inf, x), False, False)
    if a == 0.0:
        return F16Sample(sign, np.copysign(0.0, x), False, False)

    mant, exp = np.frexp(a)  # a = mant * 2**exp with mant in [0.5, 1)
    exp = int(exp)
    if exp > 16:  # a >= 2**16 > 65520
        return F16Sample(sign | 0x7C00, np.copysign(np.inf, x), True, False)
    if exp >= -13:
        # normal candidate: 10 fractional mantissa bits
        scaled = float(mant) * 2048.0  # mant * 2**11, in [1024, 2048)
        q = _round_half_even(scaled)
        if q == 2048:
            q, exp = 1024, exp + 1
        if exp > 16 or (exp == 16 and q > 2047):
            return F16Sample(sign | 0x7C00, np.copysign(np.inf, x), True, False)
        value = q * 2.0 ** (exp - 11)
        if value > F16_MAX:
            return F16Sample(sign | 0x7C00, np.copysign(np.inf, x), True, False)
        bits = sign | ((exp + 14) << 10) | (q - 1024)
        return F16Sample(bits, np.copysign(value, x), False, False)
    # subnormal candidate: quantum is 2**-24
    q = _round_half_even(a / _MIN_SUBNORMAL)
    if q == 0:
        return F16Sample(sign, np.copysign(0.0, x), False, True)
    if q >= 1024:
        bits = sign | (1 << 10) | (q - 1024)  # rounded up into the normal range
    else:
        bits = sign | q
    return F16Sample(bits, np.copysign(q * _MIN_SUBNORMAL, x), False, False)


def _round_half_even(v: float) -> int:
    lo = int(np.floor(v))
    frac = v - lo
    if frac > 0.5:
        return lo + 1
    if frac < 0.5:
        return lo
    return lo if lo % 2 == 0 else lo + 1


def f16_decode(bits: int) -> float:
    """Value of a binary16 bit pattern."""
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    mant = bits & 0x3FF
    if exp == 0x1F:
        return sign * (float("nan") if mant else float("inf"))
    if exp == 0:
        return sign * mant * _MIN_SUBNORMAL
    return sign * (1024 + mant) * 2.0 ** (exp - 25)


def _rne16(arr: np.ndarray) -> np.ndarray:
    """Vectorized round-to-nearest binary16, returned as float64 (inf on overflow)."""
    with np.errstate(over="ignore"):
        return np.float16(arr).astype(np.float64)


@dataclass
class OverflowReport:
    mode: str
    d: int
    tokens: int
    max_abs_input: float
    max_abs_logit: float  # over finite logits; 0.0 if none finite
    overflow_count: int
    softmax_valid: bool

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "d": self.d, "tokens": self.tokens,
            "max_abs_input": self.max_abs_input, "max_abs_logit": self.max_abs_logit,
            "overflow_count": self.overflow_count, "softmax_valid": self.softmax_valid,
        }


def _dot_f16(q: np.ndarray, kt: np.ndarray) -> np.ndarray:
    """(..., T, d) x (..., d, T) matmul with every product and partial sum
    rounded to binary16, accumulating in ascending index order."""
    d = q.shape[-1]
    acc = np.zeros(q.shape[:-1] + (kt.shape[-1],))
    with np.errstate(invalid="ignore", over="ignore"):
        for i in range(d):
            prod = _rne16(q[..., i, None] * kt[..., i, :])
            acc = _rne16(acc + prod)
    return acc


def _softmax_f16(logits: np.ndarray) -> np.ndarray:
    """Row softmax with every intermediate rounded to binary16."""
    m = logits.max(axis=-1, keepdims=True)
    z = _rne16(logits - m)
    e = _rne16(np.exp(z))
    s = np.zeros(e.shape[:-1] + (1,))
    for i in range(e.shape[-1]):
        s = _rne16(s + e[..., i, None])
    return _rne16(e / s)


def scores_f16(q: np.ndarray, k: np.ndarray, mode: str = "standard",
               alpha: float = DEFAULT_PB_RELAX_ALPHA):
    """Emulated half-precision attention scores for (T, d) queries/keys.

    Returns (logits, softmax_or_None, OverflowReport). Logits are float64
    values exactly representable in binary16, infinite where the pipeline
    overflowed. softmax_valid is False iff any logit is non-finite.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode '{mode}'")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"expected matching (T, d) arrays, got {q.shape} and {k.shape}")
    t, d = q.shape
    if mode == "standard":
        qs, ks = _rne16(q), _rne16(k)
        logits = _rne16(_dot_f16(qs, ks.T) * _rne16(np.float64(1.0 / np.sqrt(d))))
    elif mode == "prenorm":
        s = d ** -0.25
        logits = _dot_f16(_rne16(q * s), _rne16(k * s).T)
    elif mode == "fullnorm":
        s = d ** -0.5
        logits = _dot_f16(_rne16(q * s), _rne16(k * s).T)
    else:  # pb_relax
        qs = _rne16(q / (alpha * np.sqrt(d)))
        raw = _dot_f16(qs, _rne16(k).T)
        shifted = _rne16(raw - raw.max(axis=-1, keepdims=True))
        logits = _rne16(shifted * alpha)
    finite = np.isfinite(logits)
    report = OverflowReport(
        mode=mode, d=d, tokens=t,
        max_abs_input=float(np.abs([q, k]).max()),
        max_abs_logit=float(np.abs(logits[finite]).max()) if finite.any() else 0.0,
        overflow_count=int((~finite).sum()),
        softmax_valid=bool(finite.all()),
    )
    probs = _softmax_f16(logits) if report.softmax_valid else None
    return logits, probs, report


def _exact_softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def exact_logits(q: np.ndarray, k: np.ndarray, mode: str,
                 alpha: float = DEFAULT_PB_RELAX_ALPHA) -> np.ndarray:
    """Float64 reference logits for a score mode (no rounding anywhere)."""
    d = q.shape[-1]
    if mode == "standard" or mode == "prenorm":
        return q @ k.T / np.sqrt(d)
    if mode == "fullnorm":
        return q @ k.T / d
    if mode == "pb_relax":
        p = q @ k.T / (alpha * np.sqrt(d))
        return (p - p.max(axis=-1, keepdims=True)) * alpha
    raise ValueError(f"unknown score mode '{mode}'")


def compare_modes(q: np.ndarray, k: np.ndarray,
                  alpha: float = DEFAULT_PB_RELAX_ALPHA) -> dict:
    """Run every score mode on the same inputs. Divergence is the max absolute
    difference between the emulated softmax and the exact float64 softmax of
    that mode's logits (None when the emulation overflowed)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    out = {}
    for mode in SCORE_MODES:
        _, probs, report = scores_f16(q, k, mode, alpha)
        divergence = None
        if probs is not None:
            ref = _exact_softmax(exact_logits(q, k, mode, alpha))
            divergence = float(np.abs(probs - ref).max())
        out[mode] = {"report": report, "softmax_divergence": divergence}
    return out
