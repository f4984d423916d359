"""Dense compensation network with rational activations and hand-written backprop.

The network maps ``R^d -> R^d``::

    Q[x] = W_h a(... a(W_2 a(W_1 x)))  (+ offset)  (+ x if skip)

``a`` is a learnable rational function ``P(z) / D(z)`` of type (3, 2) shared by
all neurons of a layer. There are no biases; the optional ``offset`` vector is
only used by the multiplicative step variant, where the network has to start
out as the all-ones vector.
"""

from __future__ import annotations

import functools
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    ActivationSingularityError,
    BadMagicError,
    ContractViolation,
    TruncatedFileError,
    VersionMismatchError,
)

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the declared deps
    numba = None

DENOMINATOR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# rational activation
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _relu_fit() -> tuple[tuple[float, ...], tuple[float, ...], float]:
    x = np.linspace(-3.0, 3.0, 2001)
    y = np.maximum(x, 0.0)

    def residual(c):
        p = c[0] + x * (c[1] + x * (c[2] + x * c[3]))
        q = 1.0 + x * (c[4] + x * c[5])
        return p / q - y

    # linearised problem P - y * D = 0 (with D(0) = 1) gives the starting point
    design = np.stack([np.ones_like(x), x, x**2, x**3, -y * x, -y * x**2], axis=1)
    c, *_ = np.linalg.lstsq(design, y, rcond=None)
    # continuation towards the uniform norm through L2, L4, L8 fits
    for power in (2, 4, 8):
        half = power / 2.0
        c = least_squares(
            lambda c: np.abs(residual(c)) ** half * np.sign(residual(c)),
            c, method="lm", xtol=1e-15, ftol=1e-15,
        ).x
    err = float(np.max(np.abs(residual(c))))
    return tuple(c[:4].tolist()), (1.0, float(c[4]), float(c[5])), err


def relu_fit_coefficients():
    """Numerator, denominator and max error of the (3, 2) ReLU fit on [-3, 3]."""
    num, den, err = _relu_fit()
    return np.array(num), np.array(den), err


@dataclass
class RationalActivation:
    """Elementwise ``(a0 + a1 z + a2 z^2 + a3 z^3) / (b0 + b1 z + b2 z^2)``."""

    num: np.ndarray
    den: np.ndarray
    learnable: bool = True

    @classmethod
    def relu_like(cls, learnable: bool = True) -> "RationalActivation":
        num, den, _ = relu_fit_coefficients()
        return cls(num, den, learnable)

    @classmethod
    def identity(cls, learnable: bool = False) -> "RationalActivation":
        return cls(np.array([0.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), learnable)

    def has_real_poles(self) -> bool:
        return _min_abs_denominator(self.den) == 0.0

    def __call__(self, z) -> np.ndarray:
        return rational_forward(z, self)

    def copy(self) -> "RationalActivation":
        return RationalActivation(self.num.copy(), self.den.copy(), self.learnable)


def _min_abs_denominator(den) -> float:
    """Infimum of ``|D(z)|`` over the real line (0 when D has a real root)."""
    b0, b1, b2 = (float(v) for v in den)
    if b2 == 0.0:
        return abs(b0) if b1 == 0.0 else 0.0
    disc = b1 * b1 - 4.0 * b0 * b2
    return 0.0 if disc >= 0 else abs(b0 - b1 * b1 / (4.0 * b2))


def _forward_numpy(z, num, den, out):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p = num[0] + z * (num[1] + z * (num[2] + z * num[3]))
        q = den[0] + z * (den[1] + z * den[2])
        r = 1.0 / z
        # z * P(1/r)/(z^3) over Q(1/r)/z^2 keeps large inputs from overflowing
        big = z * (num[3] + r * (num[2] + r * (num[1] + r * num[0]))) / (den[2] + r * (den[1] + r * den[0]))
        out[...] = np.where(np.abs(z) > 1.0, big, p / q)


def _backward_numpy(z, gy, num, den, gz):
    p = num[0] + z * (num[1] + z * (num[2] + z * num[3]))
    q = den[0] + z * (den[1] + z * den[2])
    dp = num[1] + z * (2.0 * num[2] + 3.0 * z * num[3])
    dq = den[1] + 2.0 * z * den[2]
    inv = 1.0 / q
    ratio = p * inv
    gz[...] = gy * (dp - ratio * dq) * inv
    gp = gy * inv
    gq = -gp * ratio
    dnum = np.array([gp.sum(), (gp * z).sum(), (gp * z**2).sum(), (gp * z**3).sum()])
    dden = np.array([gq.sum(), (gq * z).sum(), (gq * z**2).sum()])
    return dnum, dden


if numba is not None:

    @numba.njit(cache=True)
    def _forward_kernel(z, num, den, out):
        zf = z.ravel()
        of = out.ravel()
        for i in range(zf.size):
            x = zf[i]
            if abs(x) > 1.0:
                # divide through by x^2 so large inputs do not overflow
                r = 1.0 / x
                of[i] = x * (num[3] + r * (num[2] + r * (num[1] + r * num[0]))) / (den[2] + r * (den[1] + r * den[0]))
            else:
                of[i] = (num[0] + x * (num[1] + x * (num[2] + x * num[3]))) / (den[0] + x * (den[1] + x * den[2]))

    # reassociation only reorders the seven coefficient reductions
    @numba.njit(cache=True, fastmath={"reassoc", "contract"})
    def _backward_kernel(z, gy, num, den, gz):
        zf = z.ravel()
        gf = gy.ravel()
        of = gz.ravel()
        s0 = s1 = s2 = s3 = 0.0
        t0 = t1 = t2 = 0.0
        for i in range(zf.size):
            x = zf[i]
            g = gf[i]
            p = num[0] + x * (num[1] + x * (num[2] + x * num[3]))
            q = den[0] + x * (den[1] + x * den[2])
            dp = num[1] + x * (2.0 * num[2] + 3.0 * x * num[3])
            dq = den[1] + 2.0 * x * den[2]
            inv = 1.0 / q
            ratio = p * inv
            of[i] = g * (dp - ratio * dq) * inv
            gp = g * inv
            gq = -gp * ratio
            x2 = x * x
            s0 += gp
            s1 += gp * x
            s2 += gp * x2
            s3 += gp * x2 * x
            t0 += gq
            t1 += gq * x
            t2 += gq * x2
        return np.array([s0, s1, s2, s3]), np.array([t0, t1, t2])

else:  # pragma: no cover
    _forward_kernel = _forward_numpy
    _backward_kernel = _backward_numpy


def rational_forward(z, act: RationalActivation) -> np.ndarray:
    """Apply ``act`` elementwise; raises if any denominator is below 1e-12 in magnitude."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if _min_abs_denominator(act.den) < DENOMINATOR_FLOOR:
        b0, b1, b2 = act.den
        q = b0 + z * (b1 + z * b2)
        bad = np.flatnonzero(~(np.abs(q) >= DENOMINATOR_FLOOR) & np.isfinite(z))
        if bad.size:
            index = np.unravel_index(bad[0], z.shape)
            raise ActivationSingularityError(
                f"rational activation denominator vanishes at coordinate {index} (input {z[index]!r})",
                index=index,
            )
    out = np.empty_like(z)
    _forward_kernel(z, act.num, act.den, out)
    return out


def rational_backward(z, gy, act: RationalActivation):
    """Return ``(dL/dz, dL/dnum, dL/dden)`` for upstream gradient ``gy``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    gz = np.empty_like(z)
    dnum, dden = _backward_kernel(z, gy, act.num, act.den, gz)
    return gz, dnum, dden


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

INPUT_FORMS = ("s", "s_dt")


@dataclass
class GradientSet:
    """Gradient buffers congruent with an :class:`AttentionModule`."""

    weights: list
    num: list
    den: list
    offset: np.ndarray

    @classmethod
    def zeros_like(cls, module: "AttentionModule") -> "GradientSet":
        return cls(
            [np.zeros_like(w) for w in module.weights],
            [np.zeros(4) for _ in module.activations],
            [np.zeros(3) for _ in module.activations],
            np.zeros_like(module.offset),
        )

    def arrays(self, module: "AttentionModule") -> list:
        """Buffers aligned with ``module.parameters()``."""
        out = list(self.weights)
        for i, act in enumerate(module.activations):
            if act.learnable:
                out += [self.num[i], self.den[i]]
        if module.offset_learnable:
            out.append(self.offset)
        return out

    def all_arrays(self) -> list:
        return [*self.weights, *self.num, *self.den, self.offset]

    def add_(self, other: "GradientSet") -> "GradientSet":
        for mine, theirs in zip(self.all_arrays(), other.all_arrays()):
            mine += theirs
        return self

    def scale_(self, factor: float) -> "GradientSet":
        for arr in self.all_arrays():
            arr *= factor
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.all_arrays())


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


@dataclass
class AttentionModule:
    """Stack ``W_h o a o ... o a o W_1``; ``weights[i]`` maps layer i to i+1."""

    weights: list
    activations: list
    offset: np.ndarray
    offset_learnable: bool = False
    skip: bool = False
    input_form: str = "s"

    def __post_init__(self):
        if len(self.activations) != max(len(self.weights) - 1, 0):
            raise ContractViolation("need exactly one activation between consecutive layers")
        if self.input_form not in INPUT_FORMS:
            raise ContractViolation(f"input_form must be one of {INPUT_FORMS}")

    @property
    def d(self) -> int:
        return self.weights[0].shape[1]

    @property
    def h(self) -> int:
        return len(self.weights)

    @property
    def d1(self) -> int:
        return self.weights[0].shape[0] if self.h > 1 else self.d

    def parameters(self) -> list:
        """Trainable arrays in a fixed order (updated in place by optimizers)."""
        out = list(self.weights)
        for act in self.activations:
            if act.learnable:
                out += [act.num, act.den]
        if self.offset_learnable:
            out.append(self.offset)
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "AttentionModule":
        return AttentionModule(
            [w.copy() for w in self.weights],
            [a.copy() for a in self.activations],
            self.offset.copy(),
            self.offset_learnable,
            self.skip,
            self.input_form,
        )

    def __call__(self, x) -> np.ndarray:
        return self.forward(x, keep_cache=False)[0]

    def forward(self, x, keep_cache: bool = True):
        """Evaluate the network on a state or a ``(B, d)`` batch.

        Returns ``(output, cache)``; the cache feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.d:
            raise ContractViolation(f"network input has shape {x.shape}, expected (..., {self.d})")
        lead = x.shape[:-1]
        y = x.reshape(-1, self.d)
        cache = ForwardCache(x=y)
        for w, act in zip(self.weights[:-1], self.activations):
            z = y @ w.T
            y = rational_forward(z, act)
            if keep_cache:
                cache.pre.append(z)
                cache.post.append(y)
        out = y @ self.weights[-1].T + self.offset
        if self.skip:
            out = out + cache.x
        return out.reshape(lead + (self.d,)), (cache if keep_cache else None)

    def backward(self, upstream, cache: ForwardCache, grads: GradientSet | None = None) -> GradientSet:
        """Accumulate parameter gradients of ``sum(upstream * output)`` into ``grads``."""
        if cache is None:
            raise ContractViolation("backward needs the cache of a forward(keep_cache=True) call")
        g = np.asarray(upstream, dtype=np.float64).reshape(-1, self.d)
        if g.shape[0] != cache.x.shape[0] or len(cache.pre) != self.h - 1:
            raise ContractViolation("upstream gradient does not match the forward cache")
        if grads is None:
            grads = GradientSet.zeros_like(self)
        if self.offset_learnable:
            grads.offset += g.sum(axis=0)
        inputs = [cache.x, *cache.post]
        for layer in range(self.h - 1, -1, -1):
            grads.weights[layer] += g.T @ inputs[layer]
            if layer == 0:
                break
            gy = g @ self.weights[layer]
            act = self.activations[layer - 1]
            g, dnum, dden = rational_backward(cache.pre[layer - 1], gy, act)
            if act.learnable:
                grads.num[layer - 1] += dnum
                grads.den[layer - 1] += dden
        return grads


def init_module(d: int, d1: int = 1024, h: int = 2, seed: int = 0, *, offset: float = 0.0,
                offset_learnable: bool = False, learnable_activation: bool = True,
                skip: bool = False, input_form: str = "s") -> AttentionModule:
    """Glorot-uniform hidden layers, all-zero output layer, ReLU-fit activations.

    With the zero output layer the freshly built network returns ``offset`` for
    every input, so an additive solver starts out as the classical one.
    """
    if min(d, d1, h) < 1:
        raise ContractViolation("d, d1 and h must be at least 1")
    rng = np.random.default_rng(seed)
    widths = [d] + [d1] * (h - 1) + [d]
    weights = []
    for i in range(h):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == h - 1:
            weights.append(np.zeros((fan_out, fan_in)))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    acts = [RationalActivation.relu_like(learnable_activation) for _ in range(h - 1)]
    return AttentionModule(weights, acts, np.full(d, float(offset)), offset_learnable, skip, input_form)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ATTW"
CHECKPOINT_VERSION = 1
_FLAG_SKIP = 1
_FLAG_INPUT_S_DT = 2
_FLAG_OFFSET_LEARNABLE = 4
_FLAG_ACT_LEARNABLE = 8


def encode_module(module: AttentionModule) -> bytes:
    flags = 0
    if module.skip:
        flags |= _FLAG_SKIP
    if module.input_form == "s_dt":
        flags |= _FLAG_INPUT_S_DT
    if module.offset_learnable:
        flags |= _FLAG_OFFSET_LEARNABLE
    if any(a.learnable for a in module.activations):
        flags |= _FLAG_ACT_LEARNABLE
    parts = [CHECKPOINT_MAGIC, struct.pack("<5I", CHECKPOINT_VERSION, module.d, module.d1, module.h, flags)]
    for arr in [*module.weights, module.offset]:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for act in module.activations:
        parts.append(np.ascontiguousarray(act.num, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(act.den, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_module(blob: bytes) -> AttentionModule:
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError("not an ATTW checkpoint")
    if len(blob) < 24:
        raise TruncatedFileError("checkpoint header is truncated")
    version, d, d1, h, flags = struct.unpack_from("<5I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    widths = [d] + [d1] * (h - 1) + [d]
    shapes = [(widths[i + 1], widths[i]) for i in range(h)] + [(d,)]
    n_values = sum(int(np.prod(s)) for s in shapes) + 7 * (h - 1)
    if len(blob) < 24 + 8 * n_values:
        raise TruncatedFileError(f"checkpoint declares {n_values} values but payload is {len(blob) - 24} bytes")
    values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=24).astype(np.float64)
    pos = 0
    tensors = []
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(values[pos : pos + size].reshape(shape).copy())
        pos += size
    learnable = bool(flags & _FLAG_ACT_LEARNABLE)
    acts = []
    for _ in range(h - 1):
        acts.append(RationalActivation(values[pos : pos + 4].copy(), values[pos + 4 : pos + 7].copy(), learnable))
        pos += 7
    return AttentionModule(
        tensors[:-1], acts, tensors[-1],
        offset_learnable=bool(flags & _FLAG_OFFSET_LEARNABLE),
        skip=bool(flags & _FLAG_SKIP),
        input_form="s_dt" if flags & _FLAG_INPUT_S_DT else "s",
    )


def save_module(path, module: AttentionModule) -> None:
    """Write an ATTW checkpoint atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_module(module))
    os.replace(tmp, path)


def load_module(path) -> AttentionModule:
    with open(path, "rb") as fh:
        return decode_module(fh.read())


def modules_equal(a: AttentionModule, b: AttentionModule) -> bool:
    """Bitwise equality of all tensors and flags."""
    if (a.h, a.d, a.d1, a.skip, a.input_form, a.offset_learnable) != (b.h, b.d, b.d1, b.skip, b.input_form, b.offset_learnable):
        return False
    pairs = list(zip(a.weights, b.weights)) + [(a.offset, b.offset)]
    for x, y in zip(a.activations, b.activations):
        if x.learnable != y.learnable:
            return False
        pairs += [(x.num, y.num), (x.den, y.den)]
    return all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs)
