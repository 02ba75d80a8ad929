"""Zernike and spherical Fourier transforms.

The Zernike radial functions are evaluated as

    R^n_l(r) = sqrt(2n + 3) * r^l * P_k^{(0, l + 1/2)}(2 r^2 - 1),   k = (n - l) / 2

with ``P`` a Jacobi polynomial computed by its three-term recurrence. This is
the terminating hypergeometric form (first argument ``-(n - l)/2``) rewritten
in a numerically stable way; the family is orthonormal under
``int_0^1 R R' r^2 dr``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import AliasingError, ConfigError, DomainError, ParseError, ShapeError, ValidationError
from .so3 import cartesian_to_spherical, real_spherical_harmonics
from .steerable import Signature, SteerableTensor

# ---------------------------------------------------------------------------
# Zernike radial polynomials
# ---------------------------------------------------------------------------


def _jacobi(k: int, alpha: float, beta: float, x):
    x = np.asarray(x, dtype=np.float64)
    p0 = np.ones_like(x)
    if k == 0:
        return p0
    p1 = (alpha + 1) + (alpha + beta + 2) * (x - 1) / 2
    for n in range(2, k + 1):
        s = 2 * n + alpha + beta
        a1 = 2 * n * (n + alpha + beta) * (s - 2)
        a2 = (s - 1) * (alpha * alpha - beta * beta)
        a3 = (s - 2) * (s - 1) * s
        a4 = 2 * (n + alpha - 1) * (n + beta - 1) * s
        p0, p1 = p1, ((a2 + a3 * x) * p1 - a4 * p0) / a1
    return p1


def zernike_radial(n: int, l: int, r):
    """3D Zernike radial function; zero unless ``n - l`` is even and >= 0."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1):
        raise DomainError("Zernike radius must lie in [0, 1]")
    if n < l or (n - l) % 2:
        return np.zeros_like(r)
    k = (n - l) // 2
    return math.sqrt(2 * n + 3) * r**l * _jacobi(k, 0.0, l + 0.5, 2 * r * r - 1)


def radial_frequencies(l: int, N: int) -> list[int]:
    return list(range(l, N + 1, 2))


# ---------------------------------------------------------------------------
# point clouds and ZFT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZftConfig:
    """Truncation of the Zernike transform: max degree, max radial frequency, ball radius."""

    L: int
    N: int
    r_max: float = 1.0

    def __post_init__(self):
        if self.L < 0 or self.N < 0:
            raise ConfigError("L and N must be non-negative")
        if self.N < self.L:
            raise ConfigError(f"N={self.N} < L={self.L} leaves degree {self.L} without radial functions")
        if not self.r_max > 0:
            raise ConfigError("r_max must be positive")

    def channels_per_label(self, l: int) -> int:
        return len(radial_frequencies(l, self.N))

    def signature(self, n_labels: int = 1) -> Signature:
        return Signature(tuple((l, n_labels * self.channels_per_label(l)) for l in range(self.L + 1)))


@dataclass
class PointCloud:
    """Points in spherical coordinates with channel labels and weights.

    ``labels`` fixes the declared label set and its order; it determines how
    per-label ZFT features are concatenated within each degree.
    """

    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    channel: np.ndarray
    labels: tuple
    weight: np.ndarray = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)
        self.channel = np.asarray(self.channel, dtype=object).reshape(-1)
        self.labels = tuple(self.labels)
        n = self.r.shape[0]
        if self.weight is None:
            self.weight = np.ones(n)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not (self.theta.shape[0] == self.phi.shape[0] == self.channel.shape[0] == self.weight.shape[0] == n):
            raise ShapeError("point cloud fields have different lengths")
        if np.any(self.r < 0) or np.any(self.theta < 0) or np.any(self.theta > math.pi):
            raise ValidationError("point cloud requires r >= 0 and 0 <= theta <= pi")
        unknown = set(self.channel.tolist()) - set(self.labels)
        if unknown:
            raise ValidationError(f"channel labels {sorted(map(str, unknown))} not in declared set {self.labels}")

    @classmethod
    def from_cartesian(cls, xyz, channel, labels, weight=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        r, theta, phi = cartesian_to_spherical(xyz)
        return cls(r, theta, phi, channel, labels, weight)

    def __len__(self):
        return self.r.shape[0]

    def cartesian(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.stack([self.r * st * np.cos(self.phi), self.r * st * np.sin(self.phi), self.r * np.cos(self.theta)], axis=-1)

    def rotated(self, R) -> "PointCloud":
        from .so3 import as_rotation

        xyz = as_rotation(R).apply(self.cartesian())
        return PointCloud.from_cartesian(xyz, self.channel, self.labels, self.weight)


def _radial_table(cfg: ZftConfig, rr):
    """``{l: (points, n_count)}`` radial values for all admissible n."""
    return {l: np.stack([zernike_radial(n, l, rr) for n in radial_frequencies(l, cfg.N)], axis=-1) for l in range(cfg.L + 1)}


def zft_point_cloud(cloud: PointCloud, cfg: ZftConfig) -> SteerableTensor:
    """Closed-form ZFT of a weighted sum of Dirac deltas.

    Within each degree the channels are ordered label-major (declared label
    order), then by increasing radial frequency ``n``.
    """
    sig = cfg.signature(len(cloud.labels))
    if len(cloud) == 0:
        return SteerableTensor.zeros(sig)
    if np.any(cloud.r > cfg.r_max * (1 + 1e-12)):
        bad = int(np.argmax(cloud.r > cfg.r_max * (1 + 1e-12)))
        raise DomainError(f"point {bad} at radius {cloud.r[bad]:.6g} lies outside r_max={cfg.r_max}")
    rr = np.clip(cloud.r / cfg.r_max, 0.0, 1.0)
    Y = real_spherical_harmonics(cfg.L, cloud.theta, cloud.phi)
    radial = _radial_table(cfg, rr)
    blocks = {}
    for l in range(cfg.L + 1):
        Yl = Y[:, l * l : (l + 1) ** 2]
        per_label = []
        for lab in cloud.labels:
            w = np.where(cloud.channel == lab, cloud.weight, 0.0)
            per_label.append(np.einsum("p,pn,pm->nm", w, radial[l], Yl))
        blocks[l] = np.concatenate(per_label, axis=0)
    return SteerableTensor.from_blocks(blocks, sig)


def inverse_zft(x: SteerableTensor, r, theta, phi, cfg: ZftConfig) -> np.ndarray:
    """Truncated reconstruction at query points; returns ``(points, labels)``.

    ``r`` is in the same length units as ``cfg.r_max``.
    """
    n_per = [cfg.channels_per_label(l) for l in range(cfg.L + 1)]
    if x.signature.degrees != tuple(range(cfg.L + 1)) or any(c % n for (_, c), n in zip(x.signature, n_per)):
        raise ShapeError(f"tensor signature {x.signature} does not match config {cfg}")
    n_labels = x.signature.parts[0][1] // n_per[0]
    if x.signature != cfg.signature(n_labels):
        raise ShapeError(f"tensor signature {x.signature} does not match config {cfg}")
    r, theta, phi = (np.asarray(a, dtype=np.float64).reshape(-1) for a in np.broadcast_arrays(r, theta, phi))
    if np.any(r > cfg.r_max * (1 + 1e-12)):
        raise DomainError("query point outside r_max")
    rr = np.clip(r / cfg.r_max, 0.0, 1.0)
    Y = real_spherical_harmonics(cfg.L, theta, phi)
    radial = _radial_table(cfg, rr)
    out = np.zeros(x.batch_shape + (r.shape[0], n_labels))
    for l, block in x.blocks.items():
        Yl = Y[:, l * l : (l + 1) ** 2]
        b = block.reshape(x.batch_shape + (n_labels, n_per[l], 2 * l + 1))
        out += np.einsum("...knm,pn,pm->...pk", b, radial[l], Yl)
    return out


class ZernikeTransformer(TransformerMixin, BaseEstimator):
    """Map point clouds to flat ZFT coefficient rows (stateless)."""

    def __init__(self, L=4, N=20, r_max=1.0, labels=("0",)):
        self.L = L
        self.N = N
        self.r_max = r_max
        self.labels = labels

    @property
    def config(self) -> ZftConfig:
        return ZftConfig(self.L, self.N, self.r_max)

    @property
    def signature_(self) -> Signature:
        return self.config.signature(len(self.labels))

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        cfg = self.config
        rows = []
        for cloud in X:
            if tuple(cloud.labels) != tuple(self.labels):
                raise ConfigError(f"cloud labels {cloud.labels} differ from transformer labels {tuple(self.labels)}")
            rows.append(zft_point_cloud(cloud, cfg).data)
        return np.stack(rows) if rows else np.zeros((0, self.signature_.size))


# ---------------------------------------------------------------------------
# spherical signals and SFT
# ---------------------------------------------------------------------------


def dh_grid(bw: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar and azimuthal sample angles of the ``2bw x 2bw`` grid."""
    j = np.arange(2 * bw)
    return np.pi * (2 * j + 1) / (4 * bw), 2 * np.pi * j / (2 * bw)


def dh_weights(bw: int) -> np.ndarray:
    """Quadrature weights in theta; exact for polynomials in cos(theta) of degree < 2bw."""
    theta, _ = dh_grid(bw)
    k = np.arange(bw)
    return (2.0 / bw) * np.sin(theta) * np.sum(np.sin(np.outer(theta, 2 * k + 1)) / (2 * k + 1), axis=1)


@dataclass
class SphericalSignal:
    """Real signal sampled on the grid, shape ``(channels, 2bw, 2bw)`` indexed (theta, phi)."""

    bw: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != (2 * self.bw, 2 * self.bw):
            raise ShapeError(f"grid must have shape (C, {2 * self.bw}, {2 * self.bw}), got {v.shape}")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_function(cls, bw: int, fn) -> "SphericalSignal":
        """Sample ``fn(theta, phi) -> (C, ...)`` or scalar-valued on the grid."""
        theta, phi = dh_grid(bw)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        return cls(bw, fn(T, P))


def sft_signature(L: int, channels: int = 1) -> Signature:
    return Signature.uniform(L, channels)


def sft_grid(sig: SphericalSignal, L: int) -> SteerableTensor:
    """Spherical Fourier coefficients by grid quadrature; one channel per signal channel."""
    if L >= sig.bw:
        raise AliasingError(f"L={L} requires bandwidth > {L}, got bw={sig.bw}")
    theta, phi = dh_grid(sig.bw)
    w = dh_weights(sig.bw) * (2 * np.pi / (2 * sig.bw))
    T, P = np.meshgrid(theta, phi, indexing="ij")
    Y = real_spherical_harmonics(L, T, P)
    coeffs = np.einsum("ctp,t,tpk->ck", sig.values, w, Y)
    blocks = {l: coeffs[:, l * l : (l + 1) ** 2] for l in range(L + 1)}
    return SteerableTensor.from_blocks(blocks, sft_signature(L, sig.channels))


def inverse_sft(x: SteerableTensor, bw: int) -> SphericalSignal:
    """Synthesize grid values from coefficients of degrees ``0..L`` (equal channels)."""
    sig = x.signature
    if sig.lmax >= bw:
        raise AliasingError(f"degree {sig.lmax} cannot be represented at bw={bw}")
    chans = {c for _, c in sig}
    if len(chans) != 1:
        raise ShapeError("inverse SFT needs the same channel count for every degree")
    theta, phi = dh_grid(bw)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    Y = real_spherical_harmonics(sig.lmax, T, P)
    vals = np.zeros((chans.pop(), 2 * bw, 2 * bw))
    for l, b in x.blocks.items():
        vals += np.einsum("cm,tpm->ctp", b, Y[..., l * l : (l + 1) ** 2])
    return SphericalSignal(bw, vals)


class SphericalTransformer(TransformerMixin, BaseEstimator):
    """Map spherical signals to flat SFT coefficient rows (stateless)."""

    def __init__(self, L=10):
        self.L = L

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        rows = [sft_grid(s, self.L).data for s in X]
        if not rows:
            return np.zeros((0, (self.L + 1) ** 2))
        return np.stack(rows)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_point_clouds(path, labels) -> list[tuple[str, PointCloud, str | None]]:
    """Parse the line-delimited point-cloud text format.

    ``> id [class]`` starts a new cloud; data lines are ``x y z label
    [weight]``; ``#`` starts a comment. A file without headers is a single
    cloud with id ``"0"``. Returns ``(id, cloud, class)`` triples.
    """
    labels = tuple(labels)
    clouds = []
    current = None

    def flush():
        if current is None:
            return
        cid, cls, pts = current
        xyz = np.array([p[0] for p in pts], dtype=np.float64).reshape(-1, 3)
        clouds.append((cid, PointCloud.from_cartesian(xyz, [p[1] for p in pts], labels, [p[2] for p in pts]), cls))

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith(">"):
                flush()
                head = text[1:].split()
                if not head:
                    raise ParseError(f"{path}:{lineno}: cloud header needs an id")
                current = (head[0], head[1] if len(head) > 1 else None, [])
                continue
            fields = text.split()
            if len(fields) not in (4, 5):
                raise ParseError(f"{path}:{lineno}: expected 'x y z label [weight]', got {len(fields)} fields")
            try:
                xyz = [float(v) for v in fields[:3]]
                w = float(fields[4]) if len(fields) == 5 else 1.0
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if fields[3] not in labels:
                raise ParseError(f"{path}:{lineno}: unknown channel label {fields[3]!r}")
            if current is None:
                current = ("0", None, [])
            current[2].append((xyz, fields[3], w))
    flush()
    return clouds


_GRID_MAGIC = b"HVSG"


def write_signal_file(path, signals: list[SphericalSignal]):
    """``b"HVSG"``, uint32 bw, uint32 channels, uint64 count, float64 grids (little-endian)."""
    if not signals:
        raise ValidationError("no signals to write")
    bw, ch = signals[0].bw, signals[0].channels
    if any(s.bw != bw or s.channels != ch for s in signals):
        raise ShapeError("all signals in a file must share bandwidth and channel count")
    body = np.stack([s.values for s in signals]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC + struct.pack("<IIQ", bw, ch, len(signals)) + body)


def read_signal_file(path) -> list[SphericalSignal]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _GRID_MAGIC:
        raise ParseError(f"{path}: not a spherical grid file")
    try:
        bw, ch, n = struct.unpack_from("<IIQ", raw, 4)
    except struct.error as exc:
        raise ParseError(f"{path}: truncated header") from exc
    expected = 20 + 8 * n * ch * 4 * bw * bw
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=20).reshape(n, ch, 2 * bw, 2 * bw)
    return [SphericalSignal(bw, v.astype(np.float64)) for v in vals]


__all__ = [
    "ZftConfig",
    "PointCloud",
    "SphericalSignal",
    "zernike_radial",
    "zft_point_cloud",
    "inverse_zft",
    "sft_grid",
    "inverse_sft",
    "dh_grid",
    "dh_weights",
    "ZernikeTransformer",
    "SphericalTransformer",
    "read_point_clouds",
    "write_signal_file",
    "read_signal_file",
]
