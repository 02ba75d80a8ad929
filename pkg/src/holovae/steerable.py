"""Steerable tensors: value type, rotation action, CG algebra and losses.

Storage layout is degree-major, then channel-major, then ``m`` from ``-l`` to
``+l``. A :class:`SteerableTensor` may carry leading batch dimensions; every
operation here broadcasts over them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, NumericError, ParseError, ShapeError, ValidationError
from .so3 import CGCache, as_rotation, default_cg_cache, wigner_d_list


@dataclass(frozen=True)
class Signature:
    """Ordered ``(degree, channels)`` pairs with strictly increasing degrees."""

    parts: tuple

    def __post_init__(self):
        parts = tuple((int(l), int(c)) for l, c in self.parts)
        degrees = [l for l, _ in parts]
        if any(l < 0 for l in degrees) or any(b <= a for a, b in zip(degrees, degrees[1:])):
            raise ShapeError(f"degrees must be non-negative and strictly increasing: {degrees}")
        if any(c < 1 for _, c in parts):
            raise ShapeError(f"channel counts must be >= 1: {parts}")
        object.__setattr__(self, "parts", parts)

    @classmethod
    def uniform(cls, lmax: int, channels: int) -> "Signature":
        return cls(tuple((l, channels) for l in range(lmax + 1)))

    @classmethod
    def parse(cls, text: str) -> "Signature":
        """Parse ``"44x0 + 40x1 + 40x2"`` notation."""
        parts = []
        for tok in text.replace(" ", "").split("+"):
            c, l = tok.split("x")
            parts.append((int(l), int(c)))
        return cls(tuple(sorted(parts)))

    def __str__(self):
        return " + ".join(f"{c}x{l}" for l, c in self.parts)

    def __iter__(self):
        return iter(self.parts)

    def __len__(self):
        return len(self.parts)

    @cached_property
    def degrees(self) -> tuple:
        return tuple(l for l, _ in self.parts)

    @property
    def lmax(self) -> int:
        return self.degrees[-1] if self.parts else -1

    def channels(self, l: int) -> int:
        return dict(self.parts).get(l, 0)

    @cached_property
    def size(self) -> int:
        return sum(c * (2 * l + 1) for l, c in self.parts)

    @cached_property
    def offsets(self) -> dict:
        out, off = {}, 0
        for l, c in self.parts:
            out[l] = slice(off, off + c * (2 * l + 1))
            off += c * (2 * l + 1)
        return out

    def to_list(self) -> list:
        return [list(p) for p in self.parts]


def as_signature(sig) -> Signature:
    if isinstance(sig, Signature):
        return sig
    if isinstance(sig, str):
        return Signature.parse(sig)
    return Signature(tuple(tuple(p) for p in sig))


def split_blocks(data, sig: Signature) -> dict:
    """Flat ``(..., size)`` coefficients to ``{l: (..., C, 2l+1)}`` views."""
    data = np.asarray(data)
    if data.shape[-1] != sig.size:
        raise ShapeError(f"expected {sig.size} coefficients for signature {sig}, got {data.shape[-1]}")
    lead = data.shape[:-1]
    return {l: data[..., sig.offsets[l]].reshape(lead + (c, 2 * l + 1)) for l, c in sig.parts}


def join_blocks(blocks: dict, sig: Signature | None = None) -> tuple[np.ndarray, Signature]:
    """Inverse of :func:`split_blocks`; signature inferred if not given."""
    if sig is None:
        sig = Signature(tuple((l, blocks[l].shape[-2]) for l in sorted(blocks)))
    arrays = []
    for l, c in sig.parts:
        b = np.asarray(blocks[l])
        if b.shape[-2:] != (c, 2 * l + 1):
            raise ShapeError(f"block for degree {l} has shape {b.shape[-2:]}, expected {(c, 2 * l + 1)}")
        arrays.append(b.reshape(b.shape[:-2] + (-1,)))
    return np.concatenate(arrays, axis=-1), sig


class SteerableTensor:
    """Immutable steerable tensor (or batch of them, via leading dimensions)."""

    __slots__ = ("signature", "data", "__weakref__")

    def __init__(self, signature, data):
        sig = as_signature(signature)
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0 or arr.shape[-1] != sig.size:
            raise ShapeError(f"expected trailing dimension {sig.size} for {sig}, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("steerable tensor entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "signature", sig)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, key, value):
        raise AttributeError("SteerableTensor is immutable")

    @classmethod
    def from_blocks(cls, blocks: dict, signature=None) -> "SteerableTensor":
        data, sig = join_blocks(blocks, as_signature(signature) if signature is not None else None)
        return cls(sig, data)

    @classmethod
    def zeros(cls, signature, batch_shape=()) -> "SteerableTensor":
        sig = as_signature(signature)
        return cls(sig, np.zeros(tuple(batch_shape) + (sig.size,)))

    @classmethod
    def random(cls, signature, rng=None, batch_shape=()) -> "SteerableTensor":
        sig = as_signature(signature)
        rng = np.random.default_rng(rng)
        return cls(sig, rng.normal(size=tuple(batch_shape) + (sig.size,)))

    @property
    def batch_shape(self) -> tuple:
        return self.data.shape[:-1]

    @property
    def blocks(self) -> dict:
        return split_blocks(self.data, self.signature)

    def block(self, l: int) -> np.ndarray:
        return self.blocks[l]

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("unbatched tensor has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "SteerableTensor":
        if not self.batch_shape:
            raise TypeError("unbatched tensor cannot be indexed")
        return SteerableTensor(self.signature, self.data[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __add__(self, other):
        _check_same(self, other)
        return SteerableTensor(self.signature, self.data + other.data)

    def __sub__(self, other):
        _check_same(self, other)
        return SteerableTensor(self.signature, self.data - other.data)

    def __mul__(self, scalar):
        return SteerableTensor(self.signature, self.data * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return SteerableTensor(self.signature, self.data / scalar)

    def __repr__(self):
        return f"SteerableTensor({self.signature}, batch_shape={self.batch_shape})"

    def rotate(self, R) -> "SteerableTensor":
        return rotate(self, R)

    # ---- serialization -------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({"signature": self.signature.to_list(), "batch_shape": list(self.batch_shape), "data": self.data.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SteerableTensor":
        try:
            obj = json.loads(text)
            sig = as_signature(obj["signature"])
            data = np.array(obj["data"], dtype=np.float64).reshape(tuple(obj.get("batch_shape", [])) + (sig.size,))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"invalid tensor JSON: {exc}") from exc
        return cls(sig, data)


def stack(tensors) -> SteerableTensor:
    tensors = list(tensors)
    if not tensors:
        raise ValidationError("cannot stack an empty list")
    sig = tensors[0].signature
    for t in tensors[1:]:
        _check_same(tensors[0], t)
    return SteerableTensor(sig, np.stack([t.data for t in tensors]))


def _check_same(x: SteerableTensor, y: SteerableTensor):
    if x.signature != y.signature:
        raise ShapeError(f"signature mismatch: {x.signature} vs {y.signature}")


# ---------------------------------------------------------------------------
# rotation and algebra
# ---------------------------------------------------------------------------


def rotate(x: SteerableTensor, R) -> SteerableTensor:
    """Apply ``D_l(R)`` to every degree-l feature (rows are features)."""
    R = as_rotation(R)
    Ds = wigner_d_list(x.signature.lmax, R)
    out = {l: b @ Ds[l].T for l, b in x.blocks.items()}
    return SteerableTensor.from_blocks(out, x.signature)


def cg_tensor_product_full(x: SteerableTensor, y: SteerableTensor, l_out_max: int, cache: CGCache | None = None) -> SteerableTensor:
    """All channel pairs times all admissible degree pairs.

    Fragments for each output degree are concatenated in lexicographic order
    of ``(l1, l2, c1, c2)``.
    """
    if x.batch_shape != y.batch_shape:
        raise ShapeError("batch shapes differ")
    cache = cache if cache is not None else default_cg_cache(max(x.signature.lmax, y.signature.lmax, l_out_max))
    xb, yb = x.blocks, y.blocks
    frags = {}
    for l1, c1 in x.signature:
        for l2, c2 in y.signature:
            for l3 in range(abs(l1 - l2), min(l1 + l2, l_out_max) + 1):
                C = cache[(l1, l2, l3)]
                f = np.einsum("...ia,...jb,abc->...ijc", xb[l1], yb[l2], C)
                frags.setdefault(l3, []).append(f.reshape(f.shape[:-3] + (c1 * c2, 2 * l3 + 1)))
    if not frags:
        raise ShapeError("no admissible degree triples for this product")
    out = {l: np.concatenate(v, axis=-2) for l, v in sorted(frags.items())}
    return SteerableTensor.from_blocks(out)


def generalized_dot(x: SteerableTensor, y: SteerableTensor, cache: CGCache | None = None) -> np.ndarray:
    """Sum over degrees and channels of the degree-0 part of ``x_l ⊗ y_l``."""
    _check_same(x, y)
    cache = cache if cache is not None else default_cg_cache(x.signature.lmax)
    xb, yb = x.blocks, y.blocks
    total = 0.0
    for l, _ in x.signature:
        C = cache[(l, l, 0)][:, :, 0]
        total = total + np.einsum("...ca,...cb,ab->...", xb[l], yb[l], C)
    return total


def cosine_loss(x: SteerableTensor, y: SteerableTensor, cache: CGCache | None = None) -> np.ndarray:
    """``1 - (x ⊙ y) / sqrt((x ⊙ x)(y ⊙ y))``."""
    xx = generalized_dot(x, x, cache)
    yy = generalized_dot(y, y, cache)
    if np.any(np.asarray(xx) <= 0) or np.any(np.asarray(yy) <= 0):
        raise NumericError("cosine loss undefined for a zero-norm tensor")
    return 1.0 - generalized_dot(x, y, cache) / np.sqrt(xx * yy)


def mse(x: SteerableTensor, y: SteerableTensor) -> np.ndarray:
    """Mean squared coefficient difference (per tensor over leading dims)."""
    _check_same(x, y)
    return np.mean((x.data - y.data) ** 2, axis=-1)


def total_norm(x: SteerableTensor) -> np.ndarray:
    """``sum_l sum_{c,m} h^2 / (2l+1)``."""
    return sum(np.sum(b**2, axis=(-2, -1)) / (2 * l + 1) for l, b in x.blocks.items())


def per_degree_mse(x: SteerableTensor, y: SteerableTensor) -> dict:
    """MSE restricted to the coefficients of each degree."""
    _check_same(x, y)
    xb, yb = x.blocks, y.blocks
    return {l: np.mean((xb[l] - yb[l]) ** 2, axis=(-2, -1)) for l in xb}


class DatasetNormalizer(TransformerMixin, BaseEstimator):
    """Divide tensors by the mean square-root total norm of the training set.

    Accepts a batched :class:`SteerableTensor` or a flat ``(n, size)`` array
    together with ``signature``.
    """

    def __init__(self, signature=None):
        self.signature = signature

    def _as_tensor(self, X):
        if isinstance(X, SteerableTensor):
            return X
        if self.signature is None:
            raise ConfigError("signature is required for array input")
        return SteerableTensor(self.signature, np.atleast_2d(X))

    def fit(self, X, y=None):
        t = self._as_tensor(X)
        if t.data.ndim < 2 or t.data.shape[0] == 0:
            raise ValidationError("training set is empty")
        scale = float(np.mean(np.sqrt(total_norm(t))))
        if not scale > 0:
            raise NumericError("all-zero training set has no normalization scale")
        self.scale_ = scale
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        if isinstance(X, SteerableTensor):
            return X / self.scale_
        return self._as_tensor(X).data / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        if isinstance(X, SteerableTensor):
            return X * self.scale_
        return np.asarray(X) * self.scale_


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

_MAGIC = b"HVST"


def write_tensor_file(path, tensors: SteerableTensor, ids=None):
    """Write a batch of tensors to the little-endian binary container.

    Layout: ``b"HVST"``, uint32 version (1), uint32 number of parts, per part
    uint32 degree and uint32 channels, uint64 sample count, float64
    coefficients (samples x size), then uint32 id flag and, when set, one
    uint32-length-prefixed UTF-8 id per sample.
    """
    data = tensors.data if tensors.data.ndim == 2 else tensors.data.reshape(1, -1)
    sig = tensors.signature
    parts = [_MAGIC, struct.pack("<II", 1, len(sig))]
    parts += [struct.pack("<II", l, c) for l, c in sig.parts]
    parts.append(struct.pack("<Q", data.shape[0]))
    parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    if ids is None:
        parts.append(struct.pack("<I", 0))
    else:
        ids = [str(i) for i in ids]
        if len(ids) != data.shape[0]:
            raise ShapeError("one id per sample is required")
        parts.append(struct.pack("<I", 1))
        for i in ids:
            raw = i.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_tensor_file(path) -> tuple[SteerableTensor, list | None]:
    """Inverse of :func:`write_tensor_file`; returns ``(batch, ids)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if raw[:4] != _MAGIC:
            raise ParseError(f"{path}: not a tensor container")
        version, nparts = struct.unpack_from("<II", raw, 4)
        if version != 1:
            raise ParseError(f"{path}: unsupported version {version}")
        off = 12
        parts = []
        for _ in range(nparts):
            parts.append(struct.unpack_from("<II", raw, off))
            off += 8
        sig = Signature(tuple(parts))
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        data = np.frombuffer(raw, dtype="<f8", count=n * sig.size, offset=off).reshape(n, sig.size)
        off += 8 * n * sig.size
        (flag,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids = None
        if flag:
            ids = []
            for _ in range(n):
                (k,) = struct.unpack_from("<I", raw, off)
                ids.append(raw[off + 4 : off + 4 + k].decode("utf-8"))
                off += 4 + k
        if off != len(raw):
            raise ParseError(f"{path}: trailing bytes")
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated tensor file") from exc
    return SteerableTensor(sig, data.astype(np.float64)), ids
