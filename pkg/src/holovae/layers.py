"""Equivariant layers and Clebsch-Gordan blocks.

Features inside the network are dicts ``{l: array (B, C, 2l+1)}`` whose values
may be numpy arrays or :class:`~holovae.autodiff.Var` handles. Parameters are
plain name -> array mappings so the same functions serve inference (numpy) and
training (taped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import NumericError, ShapeError, ValidationError
from .so3 import CGCache, default_cg_cache

NORM_EPS = 1e-12
BN_MOMENTUM = 0.1


def _channels(x, l):
    return ad.value_of(x[l]).shape[-2]


# ---------------------------------------------------------------------------
# MST degree-pair selection
# ---------------------------------------------------------------------------


def _admissible(l1, l2, l3):
    return abs(l1 - l2) <= l3 <= l1 + l2


def mst_pairs_for_degree(lmax_in: int, l3: int) -> list[tuple[int, int]]:
    """Minimum spanning forest over mixed-degree pairs producing ``l3``, plus same-degree pairs."""
    edges = sorted(
        ((2 * a + 1) * (2 * b + 1), a, b)
        for a in range(lmax_in + 1)
        for b in range(a + 1, lmax_in + 1)
        if _admissible(a, b, l3)
    )
    parent = list(range(lmax_in + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    chosen = []
    for _, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            chosen.append((a, b))
    chosen.extend((l, l) for l in range(lmax_in + 1) if l3 <= 2 * l)
    return sorted(chosen)


def mst_pair_set(lmax_in: int, lmax_out: int) -> dict[int, list[tuple[int, int]]]:
    if lmax_in < 0 or lmax_out < 0:
        raise ValidationError("degrees must be non-negative")
    out = {}
    for l3 in range(min(lmax_out, 2 * lmax_in) + 1):
        pairs = mst_pairs_for_degree(lmax_in, l3)
        if pairs:
            out[l3] = pairs
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear_forward(x: dict, W: dict) -> dict:
    """Per-degree channel mixing ``h_l -> W_l^T h_l``; degrees absent from ``W`` are dropped."""
    out = {}
    for l, w in W.items():
        if l not in x:
            raise ShapeError(f"linear layer expects degree {l}")
        cin = _channels(x, l)
        if ad.value_of(w).shape[0] != cin:
            raise ShapeError(f"degree {l}: weight has {ad.value_of(w).shape[0]} inputs, features have {cin} channels")
        out[l] = ad.einsum("bcm,ck->bkm", x[l], w)
    return out


def etp_forward(x: dict, y: dict, pairs: dict, cache: CGCache | None = None) -> dict:
    """Channel-wise CG products over the selected degree pairs.

    Output degree ``l3`` stacks fragments pair-major: channel ``p * C + c``
    holds channel ``c`` of the product for ``pairs[l3][p]``.
    """
    chans = {_channels(x, l) for l in x} | {_channels(y, l) for l in y}
    if len(chans) != 1:
        raise ShapeError(f"channel-wise product needs equal channel counts, got {sorted(chans)}")
    if cache is None:
        cache = default_cg_cache(max(max(x), max(y), max(pairs, default=0)))
    out = {}
    for l3, plist in pairs.items():
        frags = []
        for l1, l2 in plist:
            if l1 not in x or l2 not in y:
                raise ShapeError(f"pair ({l1},{l2}) needs degrees missing from the input")
            frags.append(ad.einsum("bci,bcj,ijk->bck", x[l1], y[l2], cache[(l1, l2, l3)]))
        out[l3] = ad.concatenate(frags, axis=1)
    return out


def batch_norms(x: dict) -> dict:
    """Batch-averaged per-degree, per-channel norms, shape ``(C,)`` each."""
    return {l: ad.mean(h * h, axis=(0, 2)) for l, h in x.items()}


def batch_norm_forward(x: dict, w: dict, running: dict, mode: str = "train", momentum: float = BN_MOMENTUM):
    """Returns ``(features, updated running norms)``; eval mode leaves the norms untouched."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = {}
    if mode == "train":
        if any(ad.value_of(h).shape[0] == 0 for h in x.values()):
            raise ValidationError("batch norm needs a nonempty batch")
        norms = batch_norms(x)
        new_running = {}
        for l, h in x.items():
            out[l] = h / ad.reshape(ad.sqrt(norms[l] + NORM_EPS), (1, -1, 1)) * ad.reshape(w[l], (1, -1, 1))
            new_running[l] = momentum * np.asarray(ad.value_of(norms[l])) + (1.0 - momentum) * running[l]
        return out, new_running
    for l, h in x.items():
        out[l] = h * ad.reshape(w[l] / np.sqrt(running[l] + NORM_EPS), (1, -1, 1))
    return out, running


def total_norms(x: dict):
    """Per-sample total norm, shape ``(B,)``."""
    terms = [ad.sum_(h * h, axis=(1, 2)) * (1.0 / (2 * l + 1)) for l, h in x.items()]
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def signal_norm_forward(x: dict, w: dict) -> dict:
    n = total_norms(x)
    nv = ad.value_of(n)
    if np.any(nv <= NORM_EPS):
        bad = np.flatnonzero(nv <= NORM_EPS).tolist()
        raise NumericError(f"signal norm of a (near) zero tensor at batch positions {bad}")
    # n > NORM_EPS is enforced above, so no guard inside the root
    scale = ad.reshape(1.0 / ad.sqrt(n), (-1, 1, 1))
    return {l: h * scale * w[l] for l, h in x.items()}


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    lmax_in: int
    c_in: int
    lmax_out: int
    c_out: int

    @property
    def pairs(self) -> dict:
        return mst_pair_set(self.lmax_in, self.lmax_out)

    @property
    def out_degrees(self) -> list[int]:
        return sorted(self.pairs)

    def param_shapes(self, prefix: str) -> dict:
        shapes = {}
        for l in range(self.lmax_in + 1):
            shapes[f"{prefix}.bn.{l}"] = (self.c_in,)
        for l3, plist in self.pairs.items():
            shapes[f"{prefix}.sn.{l3}"] = (1,)
            shapes[f"{prefix}.lin.{l3}"] = (self.c_in * len(plist), self.c_out)
        return shapes

    def buffer_shapes(self, prefix: str) -> dict:
        return {f"{prefix}.bn_running.{l}": (self.c_in,) for l in range(self.lmax_in + 1)}


def init_linear(rng, c_in: int, c_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, c_out))


def init_block(spec: BlockSpec, prefix: str, rng) -> tuple[dict, dict]:
    params = {}
    for name, shape in spec.param_shapes(prefix).items():
        params[name] = init_linear(rng, *shape) if ".lin." in name else np.ones(shape)
    buffers = {name: np.ones(shape) for name, shape in spec.buffer_shapes(prefix).items()}
    return params, buffers


def skip_connection(x: dict, out: dict) -> dict:
    """Add ``x`` to ``out`` where degrees overlap, padding or truncating channels."""
    res = dict(out)
    for l, h in out.items():
        if l not in x:
            continue
        cx, co = _channels(x, l), _channels(out, l)
        s = x[l]
        if cx > co:
            s = s[:, :co, :]
        elif cx < co:
            pad = np.zeros((ad.value_of(s).shape[0], co - cx, 2 * l + 1))
            s = ad.concatenate([s, pad], axis=1)
        res[l] = h + s
    return res


def cg_block_forward(x: dict, params: dict, buffers: dict, spec: BlockSpec, prefix: str, mode: str = "eval", cache: CGCache | None = None):
    """BN -> ETP(x, x) -> SN -> Lin, plus skip. Returns ``(features, updated buffers)``."""
    degrees = sorted(x)
    if degrees != list(range(spec.lmax_in + 1)):
        raise ShapeError(f"block {prefix} expects degrees 0..{spec.lmax_in}, got {degrees}")
    for l in degrees:
        if _channels(x, l) != spec.c_in:
            raise ShapeError(f"block {prefix} expects {spec.c_in} channels at degree {l}")
    bn_w = {l: params[f"{prefix}.bn.{l}"] for l in degrees}
    running = {l: buffers[f"{prefix}.bn_running.{l}"] for l in degrees}
    h, running = batch_norm_forward(x, bn_w, running, mode)
    pairs = spec.pairs
    h = etp_forward(h, h, pairs, cache)
    h = signal_norm_forward(h, {l: params[f"{prefix}.sn.{l}"] for l in pairs})
    h = linear_forward(h, {l: params[f"{prefix}.lin.{l}"] for l in pairs})
    new_buffers = {f"{prefix}.bn_running.{l}": running[l] for l in degrees}
    return skip_connection(x, h), new_buffers
