"""Holographic (variational) autoencoder.

The encoder maps a steerable tensor to rotation-invariant scalars plus an
equivariant frame; the decoder rebuilds the tensor from both. Frames are
3x3 matrices whose columns are ``e1, e2, e3`` in Cartesian coordinates, i.e.
the rotation taking the canonical orientation to the data orientation, so
rotating the input by ``R`` turns the frame ``F`` into ``R @ F``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .exceptions import ConfigError, DegenerateFrameError, ModeError, NumericError, ParseError, ShapeError
from .layers import BlockSpec, cg_block_forward, init_block, init_linear, linear_forward
from .so3 import FRAME_EPS, Frame, as_rotation, default_cg_cache
from .steerable import DatasetNormalizer, Signature, SteerableTensor, join_blocks, split_blocks

_L1_FROM_XYZ = [1, 2, 0]
_XYZ_FROM_L1 = [2, 0, 1]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def decoder_degree_schedule(n_blocks: int, L: int) -> list[int]:
    return [min(2**b, L) for b in range(1, n_blocks + 1)]


def check_decoder_degrees(degrees, L: int):
    """Reject decoder degree lists that a stack of CG blocks cannot produce."""
    for b, d in enumerate(degrees, start=1):
        if d > 2**b:
            raise ConfigError(
                f"decoder block {b} asks for degree {d}, but block b can reach at most 2^b = {2**b} "
                "starting from the degree-1 latent (l_max,b <= 2^b)"
            )
    if not degrees or degrees[-1] < L:
        B = len(degrees)
        raise ConfigError(
            f"decoder ends at degree {degrees[-1] if degrees else 0} < L = {L}: the last block must satisfy "
            f"l_max,B >= L, so B >= log2(L) = {math.log2(L) if L > 0 else 0:.3g} blocks are needed (got B = {B})"
        )


@dataclass
class ModelConfig:
    input_signature: str
    degrees: list
    channels: list
    z: int
    c_init: int | None = None
    variational: bool = False
    alpha: float = 1.0
    beta: float = 0.0
    e_rec: int = 0
    e_warmup: int = 0
    B: int | None = None
    decoder_degrees: list | None = None
    lr: float = 1e-3
    lr_decay_orders: float = 1.0
    lr_decay_epochs: float = 25.0
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        try:
            self.signature = Signature.parse(self.input_signature) if isinstance(self.input_signature, str) else Signature(tuple(map(tuple, self.input_signature)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad input_signature: {exc}") from exc
        self.input_signature = str(self.signature)
        self.degrees = [int(d) for d in self.degrees]
        self.channels = [int(c) for c in self.channels]
        if self.B is None:
            self.B = len(self.degrees)
        self._validate()

    def _validate(self):
        sig = self.signature
        L = sig.lmax
        if list(sig.degrees) != list(range(L + 1)):
            raise ConfigError(f"input signature must cover degrees 0..{L} without gaps, got {sig.degrees}")
        if L < 1:
            raise ConfigError("input must contain degrees up to at least 1")
        if not (len(self.degrees) == len(self.channels) == self.B) or self.B < 1:
            raise ConfigError(f"B = {self.B} but degrees has {len(self.degrees)} and channels {len(self.channels)} entries")
        if self.degrees[-1] != 1:
            raise ConfigError(f"the encoder must end at l_max = 1 to expose the frame, got {self.degrees[-1]}")
        if min(self.channels) < 1 or self.z < 1:
            raise ConfigError("channel counts and z must be positive")
        if self.c_init is None and len({c for _, c in sig}) != 1:
            raise ConfigError("input channels differ across degrees; set c_init so the channel-wise product applies")
        prev = L
        for b, d in enumerate(self.degrees, start=1):
            if d < 1 or d > 2 * prev:
                raise ConfigError(f"encoder block {b}: degree {d} not reachable from degree {prev}")
            prev = d
        if self.decoder_degrees is not None:
            self.decoder_degrees = [int(d) for d in self.decoder_degrees]
            if len(self.decoder_degrees) != self.B:
                raise ConfigError("decoder_degrees must have B entries")
        check_decoder_degrees(self.decoder_schedule, L)
        if min(self.decoder_schedule) < 1 or max(self.decoder_schedule) > L:
            raise ConfigError(f"decoder degrees must lie in 1..{L}")
        for name in ("e_rec", "e_warmup", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")

    @property
    def L(self) -> int:
        return self.signature.lmax

    @property
    def decoder_schedule(self) -> list[int]:
        if self.decoder_degrees is not None:
            return list(self.decoder_degrees)
        return decoder_degree_schedule(self.B, self.L)

    @property
    def c0(self) -> int:
        return self.c_init if self.c_init is not None else self.signature.parts[0][1]

    def encoder_specs(self) -> list[BlockSpec]:
        degs = [self.L] + self.degrees
        chans = [self.c0] + self.channels
        return [BlockSpec(degs[i], chans[i], degs[i + 1], chans[i + 1]) for i in range(self.B)]

    def decoder_specs(self) -> list[BlockSpec]:
        degs = [1] + self.decoder_schedule
        # channel list mirrored around the latent space
        chans = ([self.c0] + self.channels)[::-1]
        return [BlockSpec(degs[i], chans[i], degs[i + 1], chans[i + 1]) for i in range(self.B)]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["degrees"] = list(self.degrees)
        d["channels"] = list(self.channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def config_hash(self) -> str:
        """Digest of every field that shapes the trajectory.

        The epoch budget is left out so a run can be resumed and extended.
        """
        d = self.to_dict()
        del d["epochs"]
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------


def beta_schedule(epoch: int, beta: float, e_rec: int, e_warmup: int) -> float:
    if e_rec < 0 or e_warmup < 0:
        raise ConfigError("e_rec and e_warmup must be >= 0")
    if epoch < e_rec:
        return 0.0
    if e_warmup == 0:
        return float(beta)
    return float(beta) * min(1.0, (epoch - e_rec) / e_warmup)


def kl_divergence(means, logvars):
    """Per-sample KL of a diagonal Gaussian from the standard normal."""
    return ad.sum_(means * means + ad.exp(logvars) - 1.0 - logvars, axis=-1) * 0.5


def reparameterize(means, logvars, rng):
    eps = rng.standard_normal(np.shape(ad.value_of(means)))
    return means + ad.exp(logvars * 0.5) * eps


def _sq_error(x: dict, y: dict, size: int):
    terms = [ad.sum_((x[l] - y[l]) * (x[l] - y[l]), axis=(1, 2)) for l in y]
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / size)


def objective(x, x_rec, means=None, logvars=None, alpha: float = 1.0, beta: float = 0.0):
    """``alpha * mse + beta * KL`` averaged over the batch.

    ``x`` and ``x_rec`` are block dicts or :class:`SteerableTensor` batches.
    Returns ``(total, {"rec": ..., "kl": ...})``.
    """
    if isinstance(x, SteerableTensor):
        size = x.signature.size
        x = {l: b.reshape((-1,) + b.shape[-2:]) for l, b in x.blocks.items()}
    else:
        size = sum(ad.value_of(h).shape[1] * ad.value_of(h).shape[2] for h in x.values())
    if isinstance(x_rec, SteerableTensor):
        x_rec = {l: b.reshape((-1,) + b.shape[-2:]) for l, b in x_rec.blocks.items()}
    rec = ad.mean(_sq_error(x_rec, x, size))
    if means is None:
        kl = 0.0
    else:
        kl = ad.mean(kl_divergence(means, logvars))
    total = rec * alpha + kl * beta
    return total, {"rec": rec, "kl": kl}


# ---------------------------------------------------------------------------
# latent code
# ---------------------------------------------------------------------------


@dataclass
class LatentCode:
    invariants: np.ndarray  # (n, z) means
    frames: np.ndarray  # (n, 3, 3), columns e1, e2, e3
    logvars: np.ndarray | None = None

    def __len__(self):
        return len(self.invariants)

    def __post_init__(self):
        self.invariants = np.atleast_2d(np.asarray(self.invariants, dtype=np.float64))
        self.frames = np.asarray(self.frames, dtype=np.float64).reshape(-1, 3, 3)
        if len(self.frames) != len(self.invariants):
            raise ShapeError("invariants and frames disagree in length")
        if not np.all(np.isfinite(self.invariants)):
            raise NumericError("non-finite invariants")

    def frame(self, i: int) -> Frame:
        F = self.frames[i]
        return Frame(F[:, 0], F[:, 1], F[:, 2])


def gram_schmidt_batch(v1, v2, eps: float = FRAME_EPS):
    """Differentiable batched Gram-Schmidt on ``(B, 3)`` vectors -> ``e1, e2, e3``."""
    n1 = ad.sqrt(ad.sum_(v1 * v1, axis=1, keepdims=True))
    bad = np.flatnonzero(ad.value_of(n1)[:, 0] < eps)
    if bad.size:
        raise DegenerateFrameError(f"first frame vector vanishes for samples {bad.tolist()}")
    e1 = v1 / n1
    u2 = v2 - ad.sum_(e1 * v2, axis=1, keepdims=True) * e1
    n2 = ad.sqrt(ad.sum_(u2 * u2, axis=1, keepdims=True))
    bad = np.flatnonzero(ad.value_of(n2)[:, 0] < eps)
    if bad.size:
        raise DegenerateFrameError(f"frame vectors collinear for samples {bad.tolist()}")
    e2 = u2 / n2
    return e1, e2, ad.cross(e1, e2)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    if cfg.c_init is not None:
        for l, c in cfg.signature:
            shapes[f"enc.init.{l}"] = (c, cfg.c_init)
    for b, spec in enumerate(cfg.encoder_specs()):
        shapes.update(spec.param_shapes(f"enc.{b}"))
    cB = cfg.channels[-1]
    shapes["lat.inv"] = (cB, cfg.z)
    if cfg.variational:
        shapes["lat.logvar"] = (cB, cfg.z)
    shapes["lat.frame"] = (cB, 2)
    shapes["dec.init.0"] = (cfg.z, cB)
    shapes["dec.init.1"] = (2, cB)
    for b, spec in enumerate(cfg.decoder_specs()):
        shapes.update(spec.param_shapes(f"dec.{b}"))
    if cfg.c_init is not None:
        for l, c in cfg.signature:
            shapes[f"dec.final.{l}"] = (cfg.c0, c)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_parameters(cfg: ModelConfig, seed: int) -> tuple[dict, dict]:
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    shapes = param_shapes(cfg)
    for b, spec in enumerate(cfg.encoder_specs()):
        p, bf = init_block(spec, f"enc.{b}", rng)
        params.update(p)
        buffers.update(bf)
    for b, spec in enumerate(cfg.decoder_specs()):
        p, bf = init_block(spec, f"dec.{b}", rng)
        params.update(p)
        buffers.update(bf)
    for name, shape in shapes.items():
        if name not in params:
            params[name] = init_linear(rng, *shape)
    return {k: params[k] for k in shapes}, buffers


def _encode_graph(cfg, p, buffers, x: dict, mode, cache):
    h = x
    if cfg.c_init is not None:
        h = linear_forward(h, {l: p[f"enc.init.{l}"] for l in x})
    new_buf = {}
    for b, spec in enumerate(cfg.encoder_specs()):
        h, nb = cg_block_forward(h, p, buffers, spec, f"enc.{b}", mode, cache)
        new_buf.update(nb)
    h0 = h[0][:, :, 0]
    means = ad.einsum("bc,cz->bz", h0, p["lat.inv"])
    logvars = ad.einsum("bc,cz->bz", h0, p["lat.logvar"]) if cfg.variational else None
    v = ad.einsum("bcm,ck->bkm", h[1], p["lat.frame"])[:, :, _XYZ_FROM_L1]
    return means, logvars, v[:, 0, :], v[:, 1, :], new_buf


def _decode_graph(cfg, p, buffers, z, e1, e2, mode, cache):
    n = ad.value_of(z).shape[0]
    vecs = ad.concatenate([ad.reshape(e1, (n, 1, 3)), ad.reshape(e2, (n, 1, 3))], axis=1)[:, :, _L1_FROM_XYZ]
    h = {
        0: ad.einsum("bz,zc->bc", z, p["dec.init.0"]),
        1: ad.einsum("bkm,kc->bcm", vecs, p["dec.init.1"]),
    }
    h[0] = ad.reshape(h[0], (n, -1, 1))
    new_buf = {}
    for b, spec in enumerate(cfg.decoder_specs()):
        h, nb = cg_block_forward(h, p, buffers, spec, f"dec.{b}", mode, cache)
        new_buf.update(nb)
    if cfg.c_init is not None:
        h = linear_forward(h, {l: p[f"dec.final.{l}"] for l, _ in cfg.signature})
    return {l: h[l] for l, _ in cfg.signature}, new_buf


class HolographicVAE:
    """Parameters, running statistics and normalization scale of one model.

    Public ``encode``/``decode`` work in data units; the network itself sees
    tensors divided by ``scale``.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, buffers: dict | None = None, scale: float = 1.0):
        self.config = config
        if params is None or buffers is None:
            p0, b0 = init_parameters(config, config.seed)
            params = p0 if params is None else params
            buffers = b0 if buffers is None else buffers
        shapes = param_shapes(config)
        for k, s in shapes.items():
            if k not in params or tuple(np.shape(params[k])) != tuple(s):
                raise ShapeError(f"parameter {k!r} missing or of wrong shape (expected {s})")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}
        self.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in buffers.items()}
        self.scale = float(scale)
        self.cache = default_cg_cache(max(config.L, 2))

    @property
    def n_parameters(self) -> int:
        return count_parameters(self.config)

    def copy(self) -> "HolographicVAE":
        return HolographicVAE(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers), self.scale)

    def _as_batch(self, x) -> SteerableTensor:
        if not isinstance(x, SteerableTensor):
            x = SteerableTensor(self.config.signature, x)
        if x.signature != self.config.signature:
            raise ShapeError(f"input signature {x.signature} does not match model signature {self.config.signature}")
        if x.data.ndim == 1:
            x = SteerableTensor(x.signature, x.data[None])
        return x

    def _chunks(self, n, size=256):
        for s in range(0, n, size):
            yield slice(s, min(n, s + size))

    def encode(self, x) -> LatentCode:
        x = self._as_batch(x)
        inv, lv, frames = [], [], []
        for sl in self._chunks(len(x)):
            blocks = split_blocks(x.data[sl] / self.scale, x.signature)
            means, logvars, v1, v2, _ = _encode_graph(self.config, self.params, self.buffers, blocks, "eval", self.cache)
            try:
                e1, e2, e3 = gram_schmidt_batch(v1, v2)
            except DegenerateFrameError as exc:
                raise DegenerateFrameError(f"{exc} (offset {sl.start})") from None
            inv.append(means)
            lv.append(logvars)
            frames.append(np.stack([e1, e2, e3], axis=-1))
        if not inv:
            return LatentCode(np.zeros((0, self.config.z)), np.zeros((0, 3, 3)), np.zeros((0, self.config.z)) if self.config.variational else None)
        return LatentCode(np.concatenate(inv), np.concatenate(frames), np.concatenate(lv) if self.config.variational else None)

    def decode(self, code: LatentCode) -> SteerableTensor:
        z = np.asarray(code.invariants, dtype=np.float64)
        F = np.asarray(code.frames, dtype=np.float64)
        if z.shape[1:] != (self.config.z,):
            raise ShapeError(f"expected {self.config.z} invariants, got {z.shape[1:]}")
        out = []
        for sl in self._chunks(len(z)):
            blocks, _ = _decode_graph(self.config, self.params, self.buffers, z[sl], F[sl, :, 0], F[sl, :, 1], "eval", self.cache)
            data, _ = join_blocks(blocks, self.config.signature)
            out.append(data * self.scale)
        data = np.concatenate(out) if out else np.zeros((0, self.config.signature.size))
        return SteerableTensor(self.config.signature, data)

    def reconstruct(self, x) -> SteerableTensor:
        return self.decode(self.encode(x))

    def sample_prior(self, n: int, seed: int = 0) -> SteerableTensor:
        if not self.config.variational:
            raise ModeError("sampling from the prior needs a variational model")
        if n < 0:
            raise ConfigError("n must be >= 0")
        z = np.random.default_rng(seed).standard_normal((n, self.config.z))
        return self.decode(LatentCode(z, np.broadcast_to(np.eye(3), (n, 3, 3))))

    def interpolate(self, a, b, steps: int) -> tuple[SteerableTensor, np.ndarray]:
        """Decode the path from ``a`` to ``b`` in the canonical frame.

        ``steps`` interior points are placed evenly between the two endpoints,
        so ``steps + 2`` tensors are returned.
        """
        if steps < 0:
            raise ConfigError("steps must be >= 0")
        za = self.encode(a).invariants[0]
        zb = self.encode(b).invariants[0]
        t = np.linspace(0.0, 1.0, steps + 2)[:, None]
        z = (1.0 - t) * za + t * zb
        return self.decode(LatentCode(z, np.broadcast_to(np.eye(3), (len(z), 3, 3)))), z

    def rotate_to_canonical(self, x) -> SteerableTensor:
        x = self._as_batch(x)
        code = self.encode(x)
        out = [x[i].rotate(as_rotation(code.frames[i].T)).data for i in range(len(x))]
        return SteerableTensor(x.signature, np.stack(out) if out else np.zeros((0, x.signature.size)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    params: dict
    buffers: dict
    adam: ad.AdamState
    rng_state: dict
    history: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    best_buffers: dict | None = None


def _batch_loss(cfg, p, buffers, blocks, size, beta, rng, mode, cache, sample=True):
    means, logvars, v1, v2, nb1 = _encode_graph(cfg, p, buffers, blocks, mode, cache)
    e1, e2, _ = gram_schmidt_batch(v1, v2)
    if cfg.variational and sample:
        z = reparameterize(means, logvars, rng)
    else:
        z = means
    rec_blocks, nb2 = _decode_graph(cfg, p, buffers, z, e1, e2, mode, cache)
    rec = ad.mean(_sq_error(rec_blocks, blocks, size))
    kl = ad.mean(kl_divergence(means, logvars)) if cfg.variational else 0.0
    total = rec * cfg.alpha + kl * beta
    return total, rec, kl, {**nb1, **nb2}


def evaluate_loss(model: HolographicVAE, x: SteerableTensor, beta: float) -> dict:
    """Deterministic objective (means, eval-mode norms) over a dataset, in normalized units."""
    cfg = model.config
    tot = rec = kl = 0.0
    n = len(x)
    for sl in model._chunks(n):
        blocks = split_blocks(x.data[sl] / model.scale, x.signature)
        t, r, k, _ = _batch_loss(cfg, model.params, model.buffers, blocks, cfg.signature.size, beta, None, "eval", model.cache, sample=False)
        w = (sl.stop - sl.start) / n
        tot += float(t) * w
        rec += float(r) * w
        kl += float(k) * w
    return {"loss": tot, "rec": rec, "kl": kl}


def initial_state(model: HolographicVAE) -> TrainState:
    rng = np.random.default_rng(model.config.seed + 1)
    return TrainState(0, copy.deepcopy(model.params), copy.deepcopy(model.buffers), ad.AdamState.zeros_like(model.params), rng.bit_generator.state)


def train(model: HolographicVAE, train_x: SteerableTensor, val_x: SteerableTensor | None = None, state: TrainState | None = None,
          callback=None, fit_scale: bool = True):
    """Mini-batch Adam with exponential LR decay and validation-based selection.

    Returns ``(best_model, last_model, state)``; ``state.history`` holds one
    dict per epoch. ``callback(state, last_model)`` runs after every epoch and
    may return ``False`` to stop early.
    """
    cfg = model.config
    train_x = model._as_batch(train_x)
    if len(train_x) == 0:
        raise ConfigError("empty training set")
    if val_x is not None:
        val_x = model._as_batch(val_x)
    if state is None:
        if fit_scale:
            model.scale = float(DatasetNormalizer(cfg.signature).fit(train_x).scale_)
        state = initial_state(model)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    size = cfg.signature.size
    select_from = cfg.e_rec + cfg.e_warmup if cfg.variational else 0
    last = model.copy()
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = ad.exponential_lr(epoch, cfg.lr, cfg.lr_decay_orders, cfg.lr_decay_epochs)
        beta = beta_schedule(epoch, cfg.beta, cfg.e_rec, cfg.e_warmup)
        order = rng.permutation(len(train_x))
        sums = np.zeros(3)
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[s : s + cfg.batch_size])
            blocks = split_blocks(train_x.data[idx] / model.scale, cfg.signature)
            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in state.params.items()}
            total, rec, kl, new_buf = _batch_loss(cfg, leaves, state.buffers, blocks, size, beta, rng, "train", model.cache)
            val = float(ad.value_of(total))
            if not math.isfinite(val):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = tape.backward(total)
            g = {k: grads[v] for k, v in leaves.items()}
            try:
                state.params, state.adam = ad.adam_step(state.params, g, state.adam, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from None
            state.buffers = {**state.buffers, **new_buf}
            sums += np.array([val, float(ad.value_of(rec)), float(ad.value_of(kl))]) * len(idx)
        sums /= len(train_x)
        last = HolographicVAE(cfg, state.params, state.buffers, model.scale)
        row = {"epoch": epoch, "lr": lr, "beta": beta, "train_loss": sums[0], "train_rec": sums[1], "train_kl": sums[2]}
        if val_x is not None and len(val_x):
            ev = evaluate_loss(last, val_x, beta)
            row.update(val_loss=ev["loss"], val_rec=ev["rec"], val_kl=ev["kl"])
            score = ev["loss"]
        else:
            score = sums[0]
        row["seconds"] = time.perf_counter() - t0
        state.history.append(row)
        if epoch >= select_from and score < state.best_val:
            state.best_val, state.best_epoch = float(score), epoch
            state.best_params = copy.deepcopy(state.params)
            state.best_buffers = copy.deepcopy(state.buffers)
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        if callback is not None and callback(state, last) is False:
            break
    if state.best_params is None:
        best = last.copy()
    else:
        best = HolographicVAE(cfg, state.best_params, state.best_buffers, model.scale)
    return best, last, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"HVCK"
_CKPT_VERSION = 1


def save_checkpoint(path, model: HolographicVAE, state: TrainState | None = None, epoch: int | None = None, val_loss: float | None = None):
    """Binary checkpoint: magic, header length, JSON header, raw float64 buffers."""
    tensors = [(f"param/{k}", v) for k, v in model.params.items()]
    tensors += [(f"buffer/{k}", v) for k, v in sorted(model.buffers.items())]
    header = {
        "version": _CKPT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "epoch": epoch if epoch is not None else (state.epoch if state is not None else None),
        "val_loss": val_loss,
        "scale": model.scale,
    }
    if state is not None:
        tensors += [(f"state_param/{k}", v) for k, v in state.params.items()]
        tensors += [(f"state_buffer/{k}", v) for k, v in sorted(state.buffers.items())]
        tensors += [(f"adam_m/{k}", v) for k, v in state.adam.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in state.adam.v.items()]
        if state.best_params is not None:
            tensors += [(f"best_param/{k}", v) for k, v in state.best_params.items()]
            tensors += [(f"best_buffer/{k}", v) for k, v in sorted(state.best_buffers.items())]
        header["state"] = {
            "epoch": state.epoch,
            "adam_t": state.adam.t,
            "rng_state": state.rng_state,
            "history": state.history,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "best_epoch": state.best_epoch,
        }
    header["tensors"] = [[name, list(np.shape(v))] for name, v in tensors]
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> tuple[HolographicVAE, TrainState | None, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    try:
        (n,) = struct.unpack_from("<Q", raw, 4)
        header = json.loads(raw[12 : 12 + n])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header") from exc
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    off = 12 + n
    groups: dict = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise ParseError(f"{path}: truncated tensor data")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        kind, key = name.split("/", 1)
        groups.setdefault(kind, {})[key] = arr
    model = HolographicVAE(cfg, groups["param"], groups.get("buffer", {}), header["scale"])
    state = None
    if "state" in header:
        st = header["state"]
        state = TrainState(
            epoch=st["epoch"],
            params=groups["state_param"],
            buffers=groups["state_buffer"],
            adam=ad.AdamState(groups["adam_m"], groups["adam_v"], st["adam_t"]),
            rng_state=st["rng_state"],
            history=st["history"],
            best_val=st["best_val"] if st["best_val"] is not None else math.inf,
            best_epoch=st["best_epoch"],
            best_params=groups.get("best_param"),
            best_buffers=groups.get("best_buffer"),
        )
    return model, state, header


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------


class HolographicAE(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains, ``transform`` returns invariant embeddings.

    ``X`` is a :class:`SteerableTensor` batch or a 2-D array laid out per
    ``signature``.
    """

    def __init__(self, signature=None, degrees=(4, 4, 2, 1), channels=(8, 8, 8, 8), z=2, c_init=None, variational=False,
                 alpha=1.0, beta=0.0, e_rec=0, e_warmup=0, lr=1e-3, lr_decay_orders=1.0, lr_decay_epochs=25.0,
                 batch_size=100, epochs=10, seed=0):
        self.signature = signature
        self.degrees = degrees
        self.channels = channels
        self.z = z
        self.c_init = c_init
        self.variational = variational
        self.alpha = alpha
        self.beta = beta
        self.e_rec = e_rec
        self.e_warmup = e_warmup
        self.lr = lr
        self.lr_decay_orders = lr_decay_orders
        self.lr_decay_epochs = lr_decay_epochs
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _tensor(self, X, sig=None):
        if isinstance(X, SteerableTensor):
            return X
        sig = sig if sig is not None else self.signature
        if sig is None:
            raise ConfigError("signature is required when X is a plain array")
        sig = Signature.parse(sig) if isinstance(sig, str) else sig
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != sig.size:
            raise ShapeError(f"X has {X.shape[1]} columns, signature {sig} needs {sig.size}")
        return SteerableTensor(sig, X)

    def make_config(self, signature) -> ModelConfig:
        return ModelConfig(
            input_signature=str(signature), degrees=list(self.degrees), channels=list(self.channels), z=self.z,
            c_init=self.c_init, variational=self.variational, alpha=self.alpha, beta=self.beta, e_rec=self.e_rec,
            e_warmup=self.e_warmup, lr=self.lr, lr_decay_orders=self.lr_decay_orders, lr_decay_epochs=self.lr_decay_epochs,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
        )

    def fit(self, X, y=None, X_val=None):
        X = self._tensor(X)
        cfg = self.make_config(X.signature)
        model = HolographicVAE(cfg)
        val = self._tensor(X_val, X.signature) if X_val is not None else None
        self.model_, self.last_model_, state = train(model, X, val)
        self.history_ = state.history
        self.signature_ = X.signature
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encode(self._tensor(X, self.signature_)).invariants

    def encode(self, X) -> LatentCode:
        check_is_fitted(self, "model_")
        return self.model_.encode(self._tensor(X, self.signature_))

    def decode(self, code: LatentCode) -> SteerableTensor:
        check_is_fitted(self, "model_")
        return self.model_.decode(code)
