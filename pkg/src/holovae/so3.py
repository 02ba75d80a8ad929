"""Special functions and representations of SO(3) in the real basis.

Conventions (inherited by every other module):

* Spherical coordinates: ``theta`` is the polar angle from +z, ``phi`` the
  azimuth from +x.
* Associated Legendre functions carry the Condon-Shortley phase
  ``(-1)^m``.
* Real harmonics are obtained from the complex ones by the unitary map
  ``Y_real = U @ Y_complex`` with, for ``m > 0``::

      Y_real[ m] = ((-1)^m Y[m] + Y[-m]) / sqrt(2)          (cosine type)
      Y_real[-m] = i (Y[-m] - (-1)^m Y[m]) / sqrt(2)         (sine type)

  which gives ``Y_1 = sqrt(3/4pi) * (y, z, x)`` for ``m = -1, 0, 1``.
* Wigner-D matrices act on coefficient vectors so that
  ``Y_l(R @ x) = D_l(R) @ Y_l(x)``; ``R -> D_l(R)`` is a homomorphism.
* Real Clebsch-Gordan blocks ``C[m1, m2, m3]`` are orthonormal isometries
  (``sum_{m1,m2} C[m1,m2,m3] C[m1,m2,m3'] = delta``) and are fixed in sign by
  making the first nonzero entry in C order positive. With this choice the
  ``(l, l, 0)`` block is ``+delta_{m1 m2} / sqrt(2l+1)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .exceptions import DegenerateFrameError, ParseError, SelectionRuleError, ValidationError

FRAME_EPS = 1e-8

# rows m = -1, 0, 1 pick the Cartesian axes y, z, x
_L1_PERM = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def cartesian_to_l1(v):
    """Map Cartesian (x, y, z) components to the real degree-1 order (y, z, x)."""
    v = np.asarray(v)
    return v[..., [1, 2, 0]]


def l1_to_cartesian(v):
    """Inverse of :func:`cartesian_to_l1`."""
    v = np.asarray(v)
    return v[..., [2, 0, 1]]


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True, eq=False)
class Rotation:
    """A proper rotation stored as a 3x3 orthogonal matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValidationError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(m), 1.0, atol=1e-9):
            raise ValidationError("matrix is not a proper rotation")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_euler_zyz(cls, alpha: float, beta: float, gamma: float) -> "Rotation":
        """``Rz(alpha) @ Ry(beta) @ Rz(gamma)``, angles in radians."""
        return cls(_rz(alpha) @ _ry(beta) @ _rz(gamma))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValidationError("rotation axis must be nonzero")
        k = axis / n
        kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        return cls(np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx)

    @classmethod
    def random(cls, rng=None) -> "Rotation":
        """Haar-uniform rotation from a normalized Gaussian quaternion."""
        rng = np.random.default_rng(rng)
        w, x, y, z = rng.normal(size=4)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / n, x / n, y / n, z / n
        return cls(
            np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                    [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                    [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
                ]
            )
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        """Rotate Cartesian points of shape ``(..., 3)``."""
        return np.asarray(points, dtype=np.float64) @ self.matrix.T


def as_rotation(R) -> Rotation:
    return R if isinstance(R, Rotation) else Rotation(np.asarray(R))


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def lm_index(l: int, m: int) -> int:
    return l * l + l + m


def _normalized_legendre(lmax, x):
    """Fully normalized associated Legendre values with Condon-Shortley phase.

    Returns ``P[l, m]`` (``0 <= m <= l``) such that
    ``Y_lm^complex = P[l, m] * exp(i m phi)``. Uses the stable recurrence in
    increasing ``l``.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((lmax + 1, lmax + 1) + x.shape)
    P[0, 0] = 1.0 / math.sqrt(4.0 * math.pi)
    for m in range(1, lmax + 1):
        P[m, m] = -math.sqrt((2 * m + 1) / (2 * m)) * s * P[m - 1, m - 1]
    for m in range(0, lmax):
        P[m + 1, m] = math.sqrt(2 * m + 3) * x * P[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    return P


def real_spherical_harmonics(lmax: int, theta, phi) -> np.ndarray:
    """Real spherical harmonics for all ``l <= lmax``.

    Output has shape ``broadcast(theta, phi).shape + ((lmax+1)**2,)`` and is
    indexed by ``l*l + l + m``.
    """
    if lmax < 0:
        raise ValidationError(f"lmax must be non-negative, got {lmax}")
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    P = _normalized_legendre(lmax, np.cos(theta))
    out = np.empty(theta.shape + ((lmax + 1) ** 2,))
    sqrt2 = math.sqrt(2.0)
    for l in range(lmax + 1):
        out[..., lm_index(l, 0)] = P[l, 0]
        for m in range(1, l + 1):
            base = sqrt2 * (-1) ** m * P[l, m]
            out[..., lm_index(l, m)] = base * np.cos(m * phi)
            out[..., lm_index(l, -m)] = base * np.sin(m * phi)
    return out


def cartesian_to_spherical(xyz):
    """Return ``(r, theta, phi)`` with theta the polar angle from +z."""
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.linalg.norm(xyz, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    theta = np.arccos(np.clip(xyz[..., 2] / safe, -1.0, 1.0))
    theta = np.where(r > 0, theta, 0.0)
    phi = np.arctan2(xyz[..., 1], xyz[..., 0])
    return r, theta, phi


def spherical_to_cartesian(r, theta, phi):
    r, theta, phi = np.broadcast_arrays(r, theta, phi)
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


def real_spherical_harmonics_xyz(lmax: int, xyz) -> np.ndarray:
    """Real harmonics evaluated at the directions of Cartesian vectors."""
    _, theta, phi = cartesian_to_spherical(xyz)
    return real_spherical_harmonics(lmax, theta, phi)


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def complex_to_real_matrix(l: int) -> np.ndarray:
    """Unitary ``U`` with ``Y_real = U @ Y_complex`` (index ``m + l``)."""
    U = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    r2 = 1.0 / math.sqrt(2.0)
    U[l, l] = 1.0
    for m in range(1, l + 1):
        U[l + m, l + m] = (-1) ** m * r2
        U[l + m, l - m] = r2
        U[l - m, l - m] = 1j * r2
        U[l - m, l + m] = -1j * (-1) ** m * r2
    return U


def _check_triangle(l1, l2, l3):
    if min(l1, l2, l3) < 0 or not abs(l1 - l2) <= l3 <= l1 + l2:
        raise SelectionRuleError(f"degrees ({l1}, {l2}, {l3}) violate |l1-l2| <= l3 <= l1+l2")


def clebsch_gordan_complex(l1: int, m1: int, l2: int, m2: int, l3: int, m3: int) -> float:
    """``<l1 m1 l2 m2 | l3 m3>`` from the Racah formula in exact arithmetic."""
    _check_triangle(l1, l2, l3)
    if m1 + m2 != m3 or abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        return 0.0
    f = math.factorial
    pre = Fraction(
        (2 * l3 + 1) * f(l3 + l1 - l2) * f(l3 - l1 + l2) * f(l1 + l2 - l3),
        f(l1 + l2 + l3 + 1),
    ) * (f(l3 + m3) * f(l3 - m3) * f(l1 - m1) * f(l1 + m1) * f(l2 - m2) * f(l2 + m2))
    total = Fraction(0)
    kmin = max(0, l2 - l3 - m1, l1 - l3 + m2)
    kmax = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    for k in range(kmin, kmax + 1):
        denom = f(k) * f(l1 + l2 - l3 - k) * f(l1 - m1 - k) * f(l2 + m2 - k) * f(l3 - l2 + m1 + k) * f(l3 - l1 - m2 + k)
        total += Fraction((-1) ** k, denom)
    if total == 0:
        return 0.0
    sq = total * total * pre
    val = math.sqrt(sq.numerator / sq.denominator) if sq < 10**300 else math.sqrt(float(sq))
    return math.copysign(val, total)


@lru_cache(maxsize=None)
def _cg_complex_block(l1, l2, l3):
    C = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                C[m1 + l1, m2 + l2, m3 + l3] = clebsch_gordan_complex(l1, m1, l2, m2, l3, m3)
    C.setflags(write=False)
    return C


@lru_cache(maxsize=None)
def _cg_real_block(l1, l2, l3):
    Cc = _cg_complex_block(l1, l2, l3)
    U1, U2, U3 = (complex_to_real_matrix(l) for l in (l1, l2, l3))
    Cr = np.einsum("ck,ijk,ai,bj->abc", U3, Cc, U1.conj(), U2.conj())
    block = Cr.real if (l1 + l2 + l3) % 2 == 0 else Cr.imag
    block = np.where(np.abs(block) < 1e-15, 0.0, block)
    flat = block.ravel()
    first = flat[np.flatnonzero(np.abs(flat) > 1e-12)[0]]
    if first < 0:
        block = -block
    block = np.ascontiguousarray(block)
    block.setflags(write=False)
    return block


def clebsch_gordan_real(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis CG block of shape ``(2l1+1, 2l2+1, 2l3+1)``.

    ``(x ⊗ y)[m3] = sum C[m1, m2, m3] x[m1] y[m2]`` is equivariant for real
    coefficient vectors ``x``, ``y``.
    """
    _check_triangle(l1, l2, l3)
    return _cg_real_block(int(l1), int(l2), int(l3))


class CGCache:
    """Immutable table of real CG blocks for all admissible triples up to ``lmax``.

    Blocks can be replaced at construction time through ``entries``, which is
    how tests build deliberately corrupted tables.
    """

    _MAGIC = b"HVCG"

    def __init__(self, lmax: int, entries: dict | None = None):
        if lmax < 0:
            raise ValidationError("lmax must be non-negative")
        self.lmax = int(lmax)
        if entries is None:
            entries = {}
            for l1 in range(lmax + 1):
                for l2 in range(lmax + 1):
                    for l3 in range(abs(l1 - l2), min(l1 + l2, lmax) + 1):
                        entries[(l1, l2, l3)] = clebsch_gordan_real(l1, l2, l3)
        frozen = {}
        for key, block in entries.items():
            _check_triangle(*key)
            arr = np.array(block, dtype=np.float64)
            arr.setflags(write=False)
            frozen[tuple(int(k) for k in key)] = arr
        self._entries = frozen

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self._entries[tuple(key)]
        except KeyError:
            from .exceptions import ConfigError

            raise ConfigError(f"CG triple {tuple(key)} not in cache (lmax={self.lmax})") from None

    def __contains__(self, key) -> bool:
        return tuple(key) in self._entries

    def keys(self):
        return sorted(self._entries)

    def items(self):
        return [(k, self._entries[k]) for k in self.keys()]

    def __len__(self):
        return len(self._entries)

    def with_entry(self, key, block) -> "CGCache":
        """Copy of the cache with one block replaced."""
        entries = dict(self._entries)
        entries[tuple(key)] = block
        return CGCache(self.lmax, entries)

    def to_bytes(self) -> bytes:
        """Binary layout: ``b"HVCG"``, uint16 lmax, uint32 count, then per
        triple three uint16 degrees and the dense float64 block (C order),
        all little-endian."""
        parts = [self._MAGIC, struct.pack("<HI", self.lmax, len(self._entries))]
        for key in self.keys():
            parts.append(struct.pack("<3H", *key))
            parts.append(self._entries[key].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CGCache":
        if data[:4] != cls._MAGIC:
            raise ParseError("not a CG cache file")
        lmax, count = struct.unpack_from("<HI", data, 4)
        off = 10
        entries = {}
        for _ in range(count):
            l1, l2, l3 = struct.unpack_from("<3H", data, off)
            off += 6
            n = (2 * l1 + 1) * (2 * l2 + 1) * (2 * l3 + 1)
            block = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
            off += 8 * n
            entries[(l1, l2, l3)] = block.astype(np.float64)
        if off != len(data):
            raise ParseError("trailing bytes in CG cache file")
        return cls(lmax, entries)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CGCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@lru_cache(maxsize=8)
def default_cg_cache(lmax: int) -> CGCache:
    return CGCache(lmax)


# ---------------------------------------------------------------------------
# Wigner-D
# ---------------------------------------------------------------------------


def wigner_d_real(l: int, R) -> np.ndarray:
    """Real Wigner-D matrix of degree ``l``.

    ``D_1`` is the rotation matrix in the (y, z, x) ordering; higher degrees
    are obtained by coupling ``D_{l-1} ⊗ D_1`` down to degree ``l`` with the
    orthonormal real CG block.
    """
    if l < 0:
        raise ValidationError("degree must be non-negative")
    R = as_rotation(R)
    D = np.ones((1, 1))
    if l == 0:
        return D
    D1 = _L1_PERM @ R.matrix @ _L1_PERM.T
    D = D1
    for k in range(2, l + 1):
        C = clebsch_gordan_real(k - 1, 1, k)
        D = np.einsum("abc,ai,bj,ijk->ck", C, D, D1, C, optimize=True)
    return D


def wigner_d_list(lmax: int, R) -> list[np.ndarray]:
    """``[D_0, ..., D_lmax]`` sharing the recursion."""
    R = as_rotation(R)
    out = [np.ones((1, 1))]
    if lmax == 0:
        return out
    D1 = _L1_PERM @ R.matrix @ _L1_PERM.T
    out.append(D1)
    for k in range(2, lmax + 1):
        C = clebsch_gordan_real(k - 1, 1, k)
        out.append(np.einsum("abc,ai,bj,ijk->ck", C, out[-1], D1, C, optimize=True))
    return out


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Frame:
    """Orthonormal right-handed triad; ``matrix`` holds e1, e2, e3 as columns.

    Read as a rotation, ``matrix`` maps the canonical axes onto the frame,
    so rotating the data by ``R`` maps the frame matrix ``F`` to ``R @ F``.
    """

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([self.e1, self.e2, self.e3], axis=1)

    def as_rotation(self) -> Rotation:
        return Rotation(self.matrix)

    @classmethod
    def identity(cls) -> "Frame":
        e = np.eye(3)
        return cls(e[0], e[1], e[2])


def gram_schmidt_frame(v1, v2, eps: float = FRAME_EPS) -> Frame:
    """Orthonormalize two Cartesian vectors and complete with their cross product."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = np.linalg.norm(v1)
    if n1 < eps:
        raise DegenerateFrameError(f"first frame vector has norm {n1:.3g}")
    e1 = v1 / n1
    u2 = v2 - np.dot(e1, v2) * e1
    n2 = np.linalg.norm(u2)
    if n2 < eps:
        raise DegenerateFrameError(f"second frame vector is collinear with the first (residual {n2:.3g})")
    e2 = u2 / n2
    return Frame(e1, e2, np.cross(e1, e2))
