"""Networks of the spatially hierarchical agent.

* :class:`RelationEncoder` - one cross-attention decoder layer; ego is the
  target token, surrounding vehicles are the source tokens.
* :class:`MultiModalEncoder` - fuses goal, vehicle encoding, rays, the
  current IVR and the IVR in mind under a behavior mode, either by indexed
  selection of per-mode outputs or by a sigmoid gate computed from the
  one-hot mode.
* :class:`Actor` - squashed Gaussian over a normalized 2-D goal, fed with the
  encoding copied and divided by the outline length and widths.
* two structurally identical :class:`Critic` heads.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, _sigmoid, concat, layer_norm, no_grad, parameter, softmax
from .perception import BehaviorMode, InterVehicleRegion, Observation

N_MODES = len(BehaviorMode)
VEHICLE_DIM = 11
GOAL_DIM = 4
POS_SCALE = 100.0
SPEED_SCALE = 10.0
WIDTH_SCALE = 4.0


@dataclass(frozen=True)
class NetConfig:
    embed: int = 64
    d: int = 64
    heads: int = 4
    ff: int = 128
    hidden: int = 128
    n_samples: int = 8
    n_rays: int = 25
    design: str = "attention"  # or "indexed"
    sigmoid_coef: float = 1.0
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.embed % self.heads:
            raise ValueError("embedding size must be divisible by the head count")
        if self.design not in ("attention", "indexed"):
            raise ValueError(f"unknown encoder design {self.design!r}")

    @property
    def ivr_dim(self) -> int:
        n = self.n_samples
        return 4 * (n + 1) + 1 + n + 2

    @property
    def ray_dim(self) -> int:
        return 2 * (self.n_rays + 1)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- layers

class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / math.sqrt(n_in)
        self.w = parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        self.b = parameter(rng.uniform(-bound, bound, n_out) if scale == 1.0 else np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0):
        self.layers = [Linear(a, b, rng, out_scale if i == len(sizes) - 2 else 1.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        return self.layers[-1](x)


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gain = parameter(np.ones(n))
        self.bias = parameter(np.zeros(n))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------- encoders

class RelationEncoder(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        e = cfg.embed
        self.heads = cfg.heads
        self.embed_target = Linear(VEHICLE_DIM, e, rng)
        self.embed_source = Linear(VEHICLE_DIM, e, rng)
        self.wq = Linear(e, e, rng)
        self.wk = Linear(e, e, rng)
        self.wv = Linear(e, e, rng)
        self.wo = Linear(e, e, rng)
        self.norm1 = LayerNorm(e)
        self.ff = MLP([e, cfg.ff, e], rng)
        self.norm2 = LayerNorm(e)

    def attend(self, ego: Tensor, src: Tensor, mask: np.ndarray):
        """Multi-head attention of ego ``(B, e)`` over sources ``(B, K, e)``.

        Returns the per-ego context ``(B, e)`` and the weights ``(B, H, K)``.
        """
        B, K, E = src.shape
        H, dh = self.heads, E // self.heads
        q = self.wq(ego).reshape(B, H, 1, dh)
        k = self.wk(src).reshape(B, K, H, dh).transpose(0, 2, 3, 1)  # B,H,dh,K
        v = self.wv(src).reshape(B, K, H, dh).transpose(0, 2, 1, 3)  # B,H,K,dh
        scores = (q @ k) * (1.0 / math.sqrt(dh))  # B,H,1,K
        bias = np.where(mask, 0.0, -1e9)[:, None, None, :]
        w = softmax(scores + bias, axis=-1)
        ctx = (w @ v).reshape(B, E)
        return self.wo(ctx), w.data[:, :, 0, :]

    def __call__(self, ego: np.ndarray, src: np.ndarray, mask: np.ndarray, return_weights: bool = False):
        """``ego`` (B, 11); ``src`` (B, K, 11) padded; ``mask`` (B, K) bool."""
        t = self.embed_target(Tensor(ego)).tanh()
        weights = None
        if src.shape[1] > 0:
            s = self.embed_source(Tensor(src)).tanh()
            ctx, weights = self.attend(t, s, mask)
            has_any = mask.any(axis=1, keepdims=True).astype(float)
            x = self.norm1(t + ctx * has_any)
        else:
            x = self.norm1(t)
        out = self.norm2(x + self.ff(x))
        return (out, weights) if return_weights else out


class MultiModalEncoder(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        e, d = cfg.embed, cfg.d
        self.design = cfg.design
        self.d = d
        self.embed_goal = Linear(GOAL_DIM, e, rng)
        self.embed_rays = Linear(cfg.ray_dim, e, rng)
        self.embed_current = Linear(cfg.ivr_dim, e, rng)
        self.embed_mind = Linear(cfg.ivr_dim, e, rng)
        self.abstract1 = Linear(5 * e, d, rng)
        if cfg.design == "indexed":
            self.table = Linear(d, N_MODES * d, rng)
        else:
            self.attend1 = Linear(N_MODES, d, rng)
            self.abstract2 = Linear(d, d, rng)

    def trunk(self, l, v: Tensor, r, c, m) -> Tensor:
        parts = [self.embed_goal(Tensor(l)).tanh(), v, self.embed_rays(Tensor(r)).tanh(),
                 self.embed_current(Tensor(c)).tanh(), self.embed_mind(Tensor(m)).tanh()]
        return self.abstract1(concat(parts, axis=-1)).tanh()

    def gate(self, b: np.ndarray) -> Tensor:
        return self.attend1(Tensor(b)).sigmoid()

    def __call__(self, l, v: Tensor, r, c, m, b: np.ndarray, gate: Tensor | None = None) -> Tensor:
        h = self.trunk(l, v, r, c, m)
        if self.design == "indexed":
            rows = self.table(h).reshape(h.shape[0], N_MODES, self.d).tanh()
            return (rows * Tensor(b[:, :, None])).sum(axis=1)
        a = self.gate(b) if gate is None else gate
        return self.abstract2(h * a).tanh()


def newtro_normalize(e: Tensor, length, widths) -> Tensor:
    """Copy the encoding ``N + 1`` times, dividing by the outline length and
    each sampled width.  ``length`` is ``(B,)``, ``widths`` ``(B, N)``."""
    length = np.asarray(length, dtype=float).reshape(-1, 1)
    widths = np.asarray(widths, dtype=float)
    if widths.ndim == 1:
        widths = widths[None, :]
    if np.any(length <= 0) or np.any(widths <= 0):
        raise ValueError("outline length and widths must be positive")
    divisors = np.concatenate([length, widths], axis=1)  # B, N+1
    B, d = e.shape
    tiled = e.reshape(B, 1, d) / Tensor(divisors[:, :, None])
    return tiled.reshape(B, d * divisors.shape[1])


class Actor(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.net = MLP([cfg.d * (cfg.n_samples + 1), cfg.hidden, cfg.hidden, 2], rng, out_scale=0.01)
        self.log_std = parameter(np.full(2, cfg.log_std_init))
        self.coef = cfg.sigmoid_coef

    def __call__(self, e_norm: Tensor) -> Tensor:
        return self.net(e_norm)


class Critic(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.net = MLP([cfg.d, cfg.hidden, cfg.hidden, 1], rng)

    def __call__(self, e: Tensor) -> Tensor:
        return self.net(e).reshape(e.shape[0])


LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(mu: Tensor, log_std: Tensor, z) -> Tensor:
    """Log density of the pre-squash sample, summed over the two axes."""
    zt = Tensor(z) if not isinstance(z, Tensor) else z
    std = log_std.exp()
    t = (zt - mu) / std
    return (t * t * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def squash_log_det(z: np.ndarray, coef: float) -> np.ndarray:
    """``sum log |d a / d z|`` for ``a = sigmoid(coef * z)``."""
    a = _sigmoid(coef * np.asarray(z))
    return np.sum(np.log(coef * a * (1.0 - a)), axis=-1)


def squashed_log_prob(mu: Tensor, log_std: Tensor, z, coef: float) -> Tensor:
    return gaussian_log_prob(mu, log_std, z) - Tensor(squash_log_det(z, coef))


def density_of_action(mu: np.ndarray, log_std: np.ndarray, a: np.ndarray, coef: float) -> np.ndarray:
    """Density of the squashed policy at actions ``a`` in ``(0, 1)^2``."""
    z = np.log(a / (1.0 - a)) / coef
    with no_grad():
        lp = squashed_log_prob(Tensor(np.broadcast_to(mu, z.shape)), Tensor(log_std), z, coef)
    return np.exp(lp.data)


def entropy(log_std: Tensor) -> Tensor:
    return (log_std + 0.5 * (1.0 + LOG_2PI)).sum()


# ---------------------------------------------------------------- features

def vehicle_vec(f) -> np.ndarray:
    a = f.as_array()
    out = np.empty(VEHICLE_DIM)
    out[:8] = a[:8] / POS_SCALE
    out[8:10] = a[8:10] / SPEED_SCALE
    out[10] = a[10]
    return out


def ivr_vec(r: InterVehicleRegion) -> np.ndarray:
    return np.concatenate([r.samples.reshape(-1) / POS_SCALE, [r.length / POS_SCALE], r.widths / WIDTH_SCALE,
                           [r.v_rear / SPEED_SCALE, r.v_front / SPEED_SCALE]])


def goal_vec(box) -> np.ndarray:
    return np.asarray(box, dtype=float) / POS_SCALE


def ray_vec(scan) -> np.ndarray:
    return np.concatenate([np.asarray(scan.r0), scan.ends.reshape(-1)]) / POS_SCALE


def mode_onehot(b: int) -> np.ndarray:
    v = np.zeros(N_MODES)
    v[int(b)] = 1.0
    return v


@dataclass
class StateFeatures:
    """Candidate-independent part of an observation, as network inputs."""

    l: np.ndarray
    ego: np.ndarray
    src: np.ndarray  # (K, 11)
    r: np.ndarray
    c: np.ndarray

    @classmethod
    def from_observation(cls, obs: Observation) -> "StateFeatures":
        src = np.array([vehicle_vec(f) for _, f in obs.surrounding]).reshape(-1, VEHICLE_DIM)
        return cls(goal_vec(obs.goal_box), vehicle_vec(obs.ego), src, ray_vec(obs.scan), ivr_vec(obs.current))


@dataclass
class CandidateFeatures:
    m: np.ndarray
    b: int
    outline_length: float
    outline_widths: np.ndarray
    rear_station: float = 0.0


def candidate_features(obs: Observation) -> list[CandidateFeatures]:
    return [CandidateFeatures(ivr_vec(c.m), int(c.b), c.o.length, c.o.widths.copy(), c.m.s_rear) for c in obs.candidates]


def pad_sources(srcs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    k = max((len(s) for s in srcs), default=0)
    out = np.zeros((len(srcs), k, VEHICLE_DIM))
    mask = np.zeros((len(srcs), k), dtype=bool)
    for i, s in enumerate(srcs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


# ---------------------------------------------------------------- full model

class SHRLNet(Module):
    def __init__(self, cfg: NetConfig = NetConfig(), seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.relation = RelationEncoder(cfg, rng)
        self.encoder = MultiModalEncoder(cfg, rng)
        self.actor = Actor(cfg, rng)
        self.critic1 = Critic(cfg, rng)
        self.critic2 = Critic(cfg, rng)

    def encode(self, states: list[StateFeatures], cands: list[CandidateFeatures]) -> Tensor:
        """Encoding ``e`` for aligned lists of states and candidates."""
        src, mask = pad_sources([s.src for s in states])
        v = self.relation(np.stack([s.ego for s in states]), src, mask)
        return self.encoder(np.stack([s.l for s in states]), v, np.stack([s.r for s in states]),
                            np.stack([s.c for s in states]), np.stack([c.m for c in cands]),
                            np.stack([mode_onehot(c.b) for c in cands]))

    def encode_candidates(self, state: StateFeatures, cands: list[CandidateFeatures]) -> Tensor:
        """Encodings of every candidate of one state, sharing one relation pass."""
        src, mask = pad_sources([state.src])
        v = self.relation(state.ego[None], src, mask)
        n = len(cands)
        v = v[np.zeros(n, dtype=int)]
        rep = lambda x: np.repeat(x[None], n, axis=0)
        return self.encoder(rep(state.l), v, rep(state.r), rep(state.c),
                            np.stack([c.m for c in cands]), np.stack([mode_onehot(c.b) for c in cands]))

    def values(self, e: Tensor) -> tuple[Tensor, Tensor]:
        return self.critic1(e), self.critic2(e)

    def actor_mean(self, e: Tensor, cands: list[CandidateFeatures]) -> Tensor:
        e_norm = newtro_normalize(e, [c.outline_length for c in cands], np.stack([c.outline_widths for c in cands]))
        return self.actor(e_norm)

    def sample_action(self, e: Tensor, cand: CandidateFeatures, rng: np.random.Generator, greedy: bool = False):
        """Returns ``(a, z, log_prob)`` for a single encoding row."""
        with no_grad():
            mu = self.actor_mean(e, [cand]).data[0]
        std = np.exp(self.actor.log_std.data)
        z = mu if greedy else mu + std * rng.standard_normal(2)
        a = _sigmoid(self.cfg.sigmoid_coef * z)
        with no_grad():
            lp = squashed_log_prob(Tensor(mu[None]), self.actor.log_std, z[None], self.cfg.sigmoid_coef)
        return a, z, float(lp.data[0])


def actor_sample(mu: np.ndarray, log_std: np.ndarray, coef: float, rng: np.random.Generator):
    """Sample ``a = sigmoid(coef * z)``, ``z ~ N(mu, exp(log_std))``."""
    z = mu + np.exp(log_std) * rng.standard_normal(np.shape(mu))
    a = _sigmoid(coef * z)
    with no_grad():
        lp = squashed_log_prob(Tensor(np.atleast_2d(mu)), Tensor(log_std), np.atleast_2d(z), coef)
    return a, z, lp.data


# ---------------------------------------------------------------- goal transform

def transform_goal(a, outline: InterVehicleRegion) -> tuple[np.ndarray, float]:
    """Map a normalized goal ``a = (lateral, longitudinal)`` onto the outline.

    The longitudinal fraction selects a station between two sampled side
    pairs; the two pairs form a convex quad that is interpolated bilinearly.
    The heading is the direction of the outline center polyline there.
    """
    u, frac = float(a[0]), float(a[1])
    n = len(outline.samples) - 1
    t = frac * n
    i = min(int(math.floor(t)), n - 1)
    v = t - i
    (pl0, pr0), (pl1, pr1) = outline.samples[i], outline.samples[i + 1]
    left = pl0 + v * (pl1 - pl0)
    right = pr0 + v * (pr1 - pr0)
    g = left + u * (right - left)
    mid = outline.centerline()
    d = mid[i + 1] - mid[i]
    return g, math.atan2(d[1], d[0])


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"SHRLCKPT"


def save_checkpoint(path: str | Path, params: dict[str, Tensor], config_hash: str):
    """Binary checkpoint: magic, config hash, then named float64-LE tensors."""
    out = bytearray(_MAGIC)
    h = config_hash.encode()
    out += struct.pack("<I", len(h)) + h
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    buf = Path(path).read_bytes()
    if not buf.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hl,) = take("<I")
    config_hash = buf[pos:pos + hl].decode()
    pos += hl
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nl,) = take("<I")
        name = buf[pos:pos + nl].decode()
        pos += nl
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return params, config_hash


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_into(net: SHRLNet, path: str | Path, strict_hash: bool = True):
    params, h = load_checkpoint(path)
    if strict_hash and h != net.cfg.hash():
        raise ValueError(f"checkpoint config hash {h} does not match network config hash {net.cfg.hash()}")
    own = net.parameters()
    if set(own) != set(params):
        raise ValueError("checkpoint parameter names do not match the network")
    for name, t in own.items():
        if t.data.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data = params[name].copy()
