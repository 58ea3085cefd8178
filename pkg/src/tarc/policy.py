"""Two-headed MLP policy and value network with hand-written backprop.

The actor shares a tanh trunk between a Gaussian action head (with a
state-independent log-std) and a categorical head over durations
``1..max_repeat``.  The critic is a separate tanh MLP.  All parameters live
in one flat float64 vector; the named arrays are views into it, which keeps
Adam and finite-difference checks trivial.

For mirror-symmetric tasks the spec can carry sign vectors ``obs_mirror`` and
``action_mirror``.  The networks are then evaluated on both the observation
and its mirror image and averaged, so the action mean is equivariant and the
duration logits and value are invariant under the reflection.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)

CHECKPOINT_MAGIC = b"TARCPOL1\n"


@dataclass(frozen=True)
class PolicySpec:
    obs_dim: int
    action_dim: int
    max_repeat: int
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    # +-1 per observation / action component; None disables symmetrisation
    obs_mirror: tuple[float, ...] | None = None
    action_mirror: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.obs_mirror is None) != (self.action_mirror is None):
            raise ValueError("obs_mirror and action_mirror must be given together")
        if self.obs_mirror is not None:
            if len(self.obs_mirror) != self.obs_dim or len(self.action_mirror) != self.action_dim:
                raise ValueError("mirror sign vectors must match obs_dim / action_dim")
            if any(v not in (-1, 1) for v in (*self.obs_mirror, *self.action_mirror)):
                raise ValueError("mirror entries must be +1 or -1")

    @property
    def symmetric(self) -> bool:
        return self.obs_mirror is not None

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        width = self.obs_dim
        for k, h in enumerate(self.hidden):
            shapes += [(f"trunk.{k}.W", (width, h)), (f"trunk.{k}.b", (h,))]
            width = h
        shapes += [
            ("mean.W", (width, self.action_dim)),
            ("mean.b", (self.action_dim,)),
            ("log_std", (self.action_dim,)),
            ("duration.W", (width, self.max_repeat)),
            ("duration.b", (self.max_repeat,)),
        ]
        width = self.obs_dim
        for k, h in enumerate(self.hidden):
            shapes += [(f"value.{k}.W", (width, h)), (f"value.{k}.b", (h,))]
            width = h
        shapes += [("value.out.W", (width, 1)), ("value.out.b", (1,))]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("hidden", "obs_mirror", "action_mirror"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        d = dict(d)
        for key in ("hidden", "obs_mirror", "action_mirror"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class PolicyParams:
    """Flat parameter vector plus named views."""

    def __init__(self, spec: PolicySpec, flat: np.ndarray | None = None):
        self.spec = spec
        shapes = spec.layer_shapes()
        size = sum(int(np.prod(s)) for _, s in shapes)
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat
        self.arrays: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            self.arrays[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.spec, self.flat.copy())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(self.spec, np.zeros_like(self.flat))

    def clamp_log_std(self):
        np.clip(self.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=self.arrays["log_std"])


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal(shape if shape[0] >= shape[1] else shape[::-1])
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q


def init_params(spec: PolicySpec, seed) -> PolicyParams:
    rng = np.random.default_rng(seed)
    params = PolicyParams(spec)
    for name, shape in spec.layer_shapes():
        if not name.endswith(".W"):
            continue
        if name.startswith("mean") or name.startswith("duration"):
            gain = 0.01
        elif name == "value.out.W":
            gain = 1.0
        else:
            gain = math.sqrt(2.0)
        params[name][...] = _orthogonal(rng, shape, gain)
    params["log_std"][...] = spec.init_log_std
    return params


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    logits: np.ndarray
    log_probs: np.ndarray
    value: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class _Cache:
    obs: np.ndarray
    trunk: list[np.ndarray]
    value: list[np.ndarray]
    log_std_active: np.ndarray


def _mlp(x, params, prefix, n_layers):
    acts = []
    h = x
    for k in range(n_layers):
        h = np.tanh(h @ params[f"{prefix}.{k}.W"] + params[f"{prefix}.{k}.b"])
        acts.append(h)
    return acts


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, obs: np.ndarray, return_cache: bool = False):
    """Evaluate both heads and the critic on a batch (or a single observation)."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    if single:
        obs = obs[None, :]
    if obs.shape[1] != params.spec.obs_dim:
        raise ValueError(f"observation width {obs.shape[1]} != {params.spec.obs_dim}")
    spec = params.spec
    n = obs.shape[0]
    # symmetric specs stack the mirrored batch under the original one
    net_in = np.concatenate([obs, obs * np.asarray(spec.obs_mirror)]) if spec.symmetric else obs
    n_layers = len(spec.hidden)
    trunk = _mlp(net_in, params, "trunk", n_layers)
    h = trunk[-1] if trunk else net_in
    mean = h @ params["mean.W"] + params["mean.b"]
    logits = h @ params["duration.W"] + params["duration.b"]
    vacts = _mlp(net_in, params, "value", n_layers)
    vh = vacts[-1] if vacts else net_in
    value = (vh @ params["value.out.W"] + params["value.out.b"])[:, 0]
    if spec.symmetric:
        mean = 0.5 * (mean[:n] + mean[n:] * np.asarray(spec.action_mirror))
        logits = 0.5 * (logits[:n] + logits[n:])
        value = 0.5 * (value[:n] + value[n:])
    raw_ls = params["log_std"]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    out = PolicyOutput(mean, np.broadcast_to(log_std, mean.shape).copy(), logits, log_softmax(logits), value)
    if single:
        out = PolicyOutput(out.mean[0], out.log_std[0], out.logits[0], out.log_probs[0], out.value[0])
    if return_cache:
        active = ((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)).astype(float)
        return out, _Cache(net_in, trunk, vacts, active)
    return out


def gaussian_log_prob(mean, log_std, action):
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=-1)


def sample(output: PolicyOutput, rng: np.random.Generator):
    """Draw ``(action, raw_action, duration, log_prob)`` for a batch.

    ``action`` is clamped to [-1, 1]; ``log_prob`` is taken on the raw
    Gaussian draw.  With a single duration no random number is consumed.
    """
    mean = np.atleast_2d(output.mean)
    log_std = np.atleast_2d(output.log_std)
    log_probs = np.atleast_2d(output.log_probs)
    n, n_dur = log_probs.shape
    raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    if n_dur == 1:
        idx = np.zeros(n, dtype=int)
    else:
        cdf = np.cumsum(np.exp(log_probs), axis=1)
        u = rng.random(n)
        idx = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), n_dur - 1)
    logp = gaussian_log_prob(mean, log_std, raw) + log_probs[np.arange(n), idx]
    return np.clip(raw, -1.0, 1.0), raw, idx + 1, logp


def deterministic_action(output: PolicyOutput):
    """Mean action and most likely duration."""
    return np.clip(output.mean, -1.0, 1.0), np.argmax(output.log_probs, axis=-1) + 1


def log_prob_and_entropy(params: PolicyParams, obs, raw_action, duration, return_cache: bool = False):
    """Joint log-probability of ``(raw_action, duration)`` and the joint entropy."""
    out, cache = forward(params, np.atleast_2d(obs), return_cache=True)
    duration = np.atleast_1d(np.asarray(duration))
    if np.any(duration < 1) or np.any(duration > params.spec.max_repeat):
        raise ValueError(f"duration outside 1..{params.spec.max_repeat}")
    n = out.mean.shape[0]
    idx = duration.astype(int) - 1
    raw_action = np.asarray(raw_action, dtype=float).reshape(out.mean.shape)
    logp = gaussian_log_prob(out.mean, out.log_std, raw_action) + out.log_probs[np.arange(n), idx]
    probs = np.exp(out.log_probs)
    cat_entropy = -np.sum(probs * out.log_probs, axis=1)
    entropy = np.sum(out.log_std + _HALF_LOG_2PIE, axis=1) + cat_entropy
    if return_cache:
        return logp, entropy, out, cache
    return logp, entropy


def backward(params: PolicyParams, out: PolicyOutput, cache: _Cache, raw_action, duration,
             d_logp=None, d_entropy=None, d_value=None) -> PolicyParams:
    """Gradient of ``sum(d_logp*logp + d_entropy*entropy + d_value*value)``.

    The per-sample weights are the upstream derivatives of any scalar loss
    built from the joint log-prob, entropy and value outputs.
    """
    n = out.mean.shape[0]
    zeros = np.zeros(n)
    d_logp = zeros if d_logp is None else np.asarray(d_logp, dtype=float)
    d_entropy = zeros if d_entropy is None else np.asarray(d_entropy, dtype=float)
    d_value = zeros if d_value is None else np.asarray(d_value, dtype=float)
    grads = params.zeros_like()

    # action head
    inv_var = np.exp(-2.0 * out.log_std)
    raw_action = np.asarray(raw_action, dtype=float).reshape(out.mean.shape)
    diff = raw_action - out.mean
    g_mean = d_logp[:, None] * diff * inv_var
    g_log_std = d_logp[:, None] * (diff * diff * inv_var - 1.0) + d_entropy[:, None]
    grads["log_std"][...] = g_log_std.sum(axis=0) * cache.log_std_active

    # duration head: d logp / d logits = onehot - p ; dH / d logits = -p (log p + H)
    probs = np.exp(out.log_probs)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), np.atleast_1d(duration).astype(int) - 1] = 1.0
    cat_entropy = -np.sum(probs * out.log_probs, axis=1)
    g_logits = d_logp[:, None] * (onehot - probs) - d_entropy[:, None] * probs * (out.log_probs + cat_entropy[:, None])

    g_v = d_value[:, None]
    if params.spec.symmetric:
        # each output is the average of the direct and the mirrored evaluation
        g_mean = 0.5 * np.concatenate([g_mean, g_mean * np.asarray(params.spec.action_mirror)])
        g_logits = 0.5 * np.concatenate([g_logits, g_logits])
        g_v = 0.5 * np.concatenate([g_v, g_v])

    h = cache.trunk[-1] if cache.trunk else cache.obs
    grads["mean.W"][...] = h.T @ g_mean
    grads["mean.b"][...] = g_mean.sum(axis=0)
    grads["duration.W"][...] = h.T @ g_logits
    grads["duration.b"][...] = g_logits.sum(axis=0)
    g_h = g_mean @ params["mean.W"].T + g_logits @ params["duration.W"].T
    _mlp_backward(params, grads, "trunk", cache.obs, cache.trunk, g_h)

    vh = cache.value[-1] if cache.value else cache.obs
    grads["value.out.W"][...] = vh.T @ g_v
    grads["value.out.b"][...] = g_v.sum(axis=0)
    _mlp_backward(params, grads, "value", cache.obs, cache.value, g_v @ params["value.out.W"].T)
    return grads


def _mlp_backward(params, grads, prefix, x, acts, g_out):
    g = g_out
    for k in reversed(range(len(acts))):
        g = g * (1.0 - acts[k] * acts[k])
        inp = acts[k - 1] if k > 0 else x
        grads[f"{prefix}.{k}.W"][...] = inp.T @ g
        grads[f"{prefix}.{k}.b"][...] = g.sum(axis=0)
        if k > 0:
            g = g @ params[f"{prefix}.{k}.W"].T


class Actor:
    """Callable ``obs -> (action, duration)`` for env-core rollouts."""

    def __init__(self, params: PolicyParams, deterministic: bool = True, rng: np.random.Generator | None = None):
        self.params = params
        self.deterministic = deterministic
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def max_repeat(self) -> int:
        return self.params.spec.max_repeat

    def __call__(self, obs):
        out = forward(self.params, np.atleast_2d(obs))
        if self.deterministic:
            action, duration = deterministic_action(out)
        else:
            action, _, duration, _ = sample(out, self.rng)
        return action[0], int(duration[0])


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: PolicyParams, config_hash: str, extra: dict | None = None):
    """Write ``magic``, one JSON header line, then the raw little-endian float64 vector."""
    header = {
        "format_version": 1,
        "spec": params.spec.to_dict(),
        "layers": [[name, list(shape)] for name, shape in params.spec.layer_shapes()],
        "n_params": int(params.flat.size),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a policy checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    spec = PolicySpec.from_dict(header["spec"])
    flat = np.frombuffer(rest[nl + 1:], dtype="<f8").astype(float)
    if flat.size != header["n_params"]:
        raise ValueError("checkpoint is truncated")
    return PolicyParams(spec, flat), header
