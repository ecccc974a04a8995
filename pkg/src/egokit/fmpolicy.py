"""Conditional flow-matching motion generator.

Probability path ``H^tau = tau * H + (1 - tau) * eps``; the learned field follows
the path derivative ``H - eps`` and sampling integrates it with forward Euler
from ``tau = 0`` (noise) to ``tau = 1`` (data).

The MLP is read as a data predictor ``D``: the velocity it induces is
``(D - H^tau) / max(1 - tau, min_gap)``. The subtraction acts as a skip
connection, so every input noise direction can be cancelled regardless of the
hidden width (a plain linear velocity head of width 512 cannot span the
1744-dim chunk space and leaves residual noise after integration).

All network-facing arrays live in normalized model space; ``Normalizer``
objects on the net map raw hand parameters in and out.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import context as ctx
from . import handmodel as hm
from . import rotmath
from .errors import NonFinite, ShapeMismatch, ValidationError
from .nn import MLP, AdamW, AdamWConfig, clip_by_global_norm

MAGIC = b"FMCK"


@dataclass
class FlowConfig:
    delta: float = 0.1
    n_steps: int = 10
    tau_alpha: float = 1.0
    tau_beta: float = 1.5
    min_gap: float = 0.05
    chunk_len: int = 16

    def __post_init__(self):
        if self.n_steps < 1 or abs(self.delta * self.n_steps - 1.0) > 1e-9:
            raise ValidationError(f"delta * n_steps must equal 1 (got {self.delta} * {self.n_steps})")
        if not 0 < self.min_gap <= self.delta:
            raise ValidationError("min_gap must lie in (0, delta]")

    @classmethod
    def from_steps(cls, n_steps: int, **kw) -> "FlowConfig":
        return cls(delta=1.0 / n_steps, n_steps=n_steps, **kw)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n: int, dtype=np.float32) -> "Normalizer":
        return cls(np.zeros(n, dtype), np.ones(n, dtype))

    @classmethod
    def fit(cls, x, floor: float = 1e-3, dtype=np.float32) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        return cls(x.mean(axis=0).astype(dtype), np.maximum(x.std(axis=0), floor).astype(dtype))

    def encode(self, x):
        return ((np.asarray(x) - self.mean) / self.std).astype(self.mean.dtype)

    def decode(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def sample_tau(rng: np.random.Generator, size=None, cfg: FlowConfig | None = None):
    cfg = cfg or FlowConfig()
    return rng.beta(cfg.tau_alpha, cfg.tau_beta, size)


def make_noisy(h_chunk, eps, tau):
    """``tau * H + (1 - tau) * eps``; ``tau`` is a scalar or one value per batch row."""
    h_chunk = np.asarray(h_chunk)
    eps = np.asarray(eps)
    if h_chunk.shape != eps.shape:
        raise ShapeMismatch(f"chunk {h_chunk.shape} and noise {eps.shape} differ")
    tau = np.asarray(tau, dtype=h_chunk.dtype)
    if tau.ndim:
        tau = tau.reshape(tau.shape + (1,) * (h_chunk.ndim - tau.ndim))
    return tau * h_chunk + (1 - tau) * eps


class VectorFieldNet:
    """Velocity field over flattened motion chunks conditioned on (h_k, z, tau)."""

    def __init__(self, rng: np.random.Generator, chunk_len: int = 16, z_dim: int = 64, hidden=(512, 512, 512),
                 min_gap: float = 0.05, dtype=np.float32):
        self.chunk_len, self.z_dim, self.hidden, self.min_gap = chunk_len, z_dim, tuple(hidden), min_gap
        self.chunk_dim = chunk_len * hm.N_PARAMS
        n_in = self.chunk_dim + hm.N_PARAMS + z_dim + 1
        self.mlp = MLP((n_in, *self.hidden, self.chunk_dim), rng, dtype)
        self.chunk_norm = Normalizer.identity(self.chunk_dim, dtype)
        self.h_norm = Normalizer.identity(hm.N_PARAMS, dtype)

    @property
    def params(self):
        return self.mlp.params

    def config(self) -> dict:
        return {"chunk_len": self.chunk_len, "z_dim": self.z_dim, "hidden": list(self.hidden),
                "min_gap": self.min_gap, "layer_sizes": list(self.mlp.sizes)}

    def forward(self, x, h, z, tau):
        x = np.asarray(x)
        b = x.shape[0]
        tau = np.broadcast_to(np.asarray(tau, dtype=x.dtype).reshape(-1, 1), (b, 1))
        inp = np.concatenate([x, h, z, tau], axis=1)
        d, acts = self.mlp.forward(inp)
        scale = (1.0 / np.maximum(1.0 - tau, self.min_gap)).astype(x.dtype)
        return (d - x) * scale, (acts, scale)

    def velocity(self, x, h, z, tau):
        return self.forward(x, h, z, tau)[0]

    def backward(self, cache, gv):
        """Returns (parameter grads, grad wrt h, grad wrt z); the input-x path is not needed."""
        acts, scale = cache
        g_in, grads = self.mlp.backward(acts, gv * scale)
        c = self.chunk_dim
        return grads, g_in[:, c:c + hm.N_PARAMS], g_in[:, c + hm.N_PARAMS:c + hm.N_PARAMS + self.z_dim]


def _check_finite(step, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite(f"non-finite loss or gradient at step {step}", step=step)


def cfm_loss(net, h_chunk, h_k, z, eps, tau, with_grads: bool = True, step=None):
    """MSE between the predicted velocity and the path derivative ``H - eps``.

    Inputs are normalized, batched: ``h_chunk`` and ``eps`` (B, l*109), ``h_k`` (B, 109),
    ``z`` (B, z_dim), ``tau`` (B,). Returns ``(loss, grads)`` with
    ``grads = {"net": [...], "z": (B, z_dim)}`` (None when ``with_grads`` is false).
    """
    h_chunk = np.asarray(h_chunk)
    x_tau = make_noisy(h_chunk, eps, tau)
    v, cache = net.forward(x_tau, h_k, z, tau)
    resid = v - (h_chunk - eps)
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    if not with_grads:
        _check_finite(step, loss)
        return loss, None
    gv = (2.0 / resid.size) * resid
    grads, _, gz = net.backward(cache, gv.astype(resid.dtype))
    _check_finite(step, loss, *grads, gz)
    return loss, {"net": grads, "z": gz}


def _rot6d_project(six):
    """Nearest valid 6D rotation encoding via SVD projection of [a1, a2, a1 x a2]."""
    a1, a2 = six[..., :3], six[..., 3:]
    m = np.stack([a1, a2, np.cross(a1, a2)], axis=-1)
    return rotmath.matrix_to_rot6d(rotmath.project_to_so3(m), check=False)


def postprocess_chunk(chunk, h_k):
    """Re-orthonormalize every rotation segment and repeat h_k's shape parameters."""
    out = np.array(chunk, dtype=float, copy=True)
    lead = out.shape[:-1]
    theta = out[..., hm.THETA].reshape(lead + (hm.N_FINGER_JOINTS, 6))
    out[..., hm.THETA] = _rot6d_project(theta).reshape(lead + (90,))
    out[..., hm.ROT] = _rot6d_project(out[..., hm.ROT])
    beta = np.asarray(h_k, dtype=float)[..., hm.BETA]
    out[..., hm.BETA] = beta[..., None, :] if beta.ndim > 1 else beta
    return out


def integrate(net, x0, h_norm, z, cfg: FlowConfig):
    """Exactly ``cfg.n_steps`` forward-Euler updates from ``tau = 0``."""
    x = np.array(x0, copy=True)
    for i in range(cfg.n_steps):
        tau = np.full(x.shape[0], i * cfg.delta, dtype=x.dtype)
        v = net.velocity(x, h_norm, z, tau)
        x = x + x.dtype.type(cfg.delta) * v
        if not np.all(np.isfinite(x)):
            raise NonFinite(f"non-finite state at integration step {i}", step=i)
    return x


def generate(net, h_k, z, cfg: FlowConfig, rng: np.random.Generator, postprocess: bool = True, noise=None):
    """Sample motion chunks for raw hand states ``h_k`` (109,) or (B, 109).

    Returns raw-space chunks of shape (l, 109) or (B, l, 109).
    """
    h_k = np.asarray(h_k, dtype=float)
    single = h_k.ndim == 1
    hb = np.atleast_2d(h_k)
    zb = np.atleast_2d(np.asarray(z))
    l = net.chunk_len
    d = l * hm.N_PARAMS
    chunk_norm = getattr(net, "chunk_norm", None) or Normalizer.identity(d)
    h_norm_obj = getattr(net, "h_norm", None) or Normalizer.identity(hm.N_PARAMS)
    dtype = chunk_norm.mean.dtype
    if noise is None:
        noise = rng.standard_normal((hb.shape[0], d))
    x0 = np.asarray(noise, dtype=dtype).reshape(hb.shape[0], d)
    x1 = integrate(net, x0, h_norm_obj.encode(hb), zb.astype(dtype), cfg)
    out = chunk_norm.decode(x1).reshape(hb.shape[0], l, hm.N_PARAMS)
    if postprocess:
        out = postprocess_chunk(out, hb)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# policy bundle and training


class FlowPolicy:
    """Context encoder + vector field, callable by the trajectory decoder."""

    def __init__(self, net: VectorFieldNet, encoder: ctx.ContextEncoder, cfg: FlowConfig | None = None):
        self.net, self.encoder, self.cfg = net, encoder, cfg or FlowConfig(chunk_len=net.chunk_len)

    @classmethod
    def create(cls, seed: int = 0, cfg: FlowConfig | None = None, z_dim: int = 64, hidden=(512, 512, 512),
               dtype=np.float32) -> "FlowPolicy":
        cfg = cfg or FlowConfig()
        rng = np.random.default_rng(seed)
        net = VectorFieldNet(rng, cfg.chunk_len, z_dim, hidden, cfg.min_gap, dtype)
        enc = ctx.ContextEncoder(rng, z_dim=z_dim, dtype=dtype)
        return cls(net, enc, cfg)

    @property
    def chunk_len(self) -> int:
        return self.net.chunk_len

    @property
    def params(self):
        return self.net.params + self.encoder.params

    def set_normalizers(self, chunk_norm: Normalizer, h_norm: Normalizer) -> None:
        self.net.chunk_norm = chunk_norm
        self.net.h_norm = h_norm
        self.encoder.h_mean, self.encoder.h_std = h_norm.mean, h_norm.std

    def encode(self, depth, mask, rgb, tokens, h):
        return self.encoder.encode(depth, mask, rgb, tokens, h)

    def predict_chunk(self, h_k, context, rng):
        """``context`` = (DepthMap, rgb, task token). Returns a relative chunk (l, 109)."""
        depth, rgb, token = context
        z = ctx.encode_context(self.encoder, depth, rgb, token, h_k)
        return generate(self.net, h_k, z, self.cfg, rng)

    def predict_batch(self, h_k, depth, mask, rgb, tokens, rng):
        z = self.encode(depth, mask, rgb, tokens, h_k)
        return generate(self.net, h_k, z, self.cfg, rng)


@dataclass
class PreparedSamples:
    """Model-space training arrays with pooled context features precomputed."""

    target: np.ndarray  # (S, l*109) normalized
    h: np.ndarray  # (S, 109) normalized
    fd: np.ndarray
    fr: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return self.target.shape[0]


def prepare_samples(policy: FlowPolicy, samples, fit_normalizers: bool = True) -> PreparedSamples:
    s = len(samples)
    flat = samples.target.reshape(s, -1)
    if fit_normalizers:
        policy.set_normalizers(Normalizer.fit(flat), Normalizer.fit(samples.h))
    fd, fr = ctx.pool_features(samples.depth, samples.depth_mask, samples.rgb, policy.encoder.grid)
    return PreparedSamples(policy.net.chunk_norm.encode(flat), policy.net.h_norm.encode(samples.h), fd, fr,
                           np.asarray(samples.task_token))


@dataclass
class TrainState:
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    losses: list = field(default_factory=list)
    batch_size: int = 64
    grad_clip: float = 1.0  # global-norm clip; 0 disables


def init_train_state(policy: FlowPolicy, opt_cfg: AdamWConfig, seed: int, batch_size: int = 64,
                     grad_clip: float = 1.0) -> TrainState:
    return TrainState(AdamW(policy.params, opt_cfg), np.random.default_rng(seed), 0, [], batch_size, grad_clip)


def train_step(policy: FlowPolicy, data: PreparedSamples, state: TrainState) -> float:
    rng = state.rng
    b = state.batch_size
    idx = rng.integers(0, len(data), b)
    tau = sample_tau(rng, b, policy.cfg).astype(data.target.dtype)
    eps = rng.standard_normal((b, data.target.shape[1])).astype(data.target.dtype)
    h = data.h[idx]
    z, enc_cache = policy.encoder.forward(data.fd[idx], data.fr[idx], data.tokens[idx], h)
    loss, grads = cfm_loss(policy.net, data.target[idx], h, z, eps, tau, step=state.step)
    enc_grads = policy.encoder.backward(enc_cache, grads["z"])
    all_grads, _ = clip_by_global_norm(grads["net"] + enc_grads, state.grad_clip)
    state.optimizer.step(all_grads)
    state.step += 1
    state.losses.append(loss)
    return loss


def train(policy: FlowPolicy, data: PreparedSamples, state: TrainState, steps: int, log=None, log_every: int = 500):
    """Run ``steps`` optimizer steps; the loss curve accumulates in ``state.losses``."""
    if len(data) == 0:
        raise ValidationError("empty training set")
    for _ in range(steps):
        loss = train_step(policy, data, state)
        if log and state.step % log_every == 0:
            log(f"step {state.step} loss {np.mean(state.losses[-log_every:]):.5f}")
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, policy: FlowPolicy, state: TrainState | None = None, extra: dict | None = None) -> None:
    arrays = [(f"net.{i}", p) for i, p in enumerate(policy.net.params)]
    arrays += [(f"enc.{i}", p) for i, p in enumerate(policy.encoder.params)]
    arrays += [("chunk_norm.mean", policy.net.chunk_norm.mean), ("chunk_norm.std", policy.net.chunk_norm.std),
               ("h_norm.mean", policy.net.h_norm.mean), ("h_norm.std", policy.net.h_norm.std)]
    config = {"flow": asdict(policy.cfg), "net": policy.net.config(), "encoder": policy.encoder.config(),
              "extra": extra or {}}
    if state is not None:
        arrays += [(f"opt.{i}", a) for i, a in enumerate(state.optimizer.state_arrays())]
        config["train"] = {"step": state.step, "batch_size": state.batch_size, "grad_clip": state.grad_clip,
                           "optimizer": asdict(state.optimizer.cfg),
                           "rng": json.loads(json.dumps(state.rng.bit_generator.state))}
    container.save(path, MAGIC, config, arrays)


def load_checkpoint(path):
    """Returns (policy, train state or None, extra dict)."""
    config, arrays = container.load(path, MAGIC)
    cfg = FlowConfig(**config["flow"])
    ncfg, ecfg = config["net"], config["encoder"]
    rng = np.random.default_rng(0)
    net = VectorFieldNet(rng, ncfg["chunk_len"], ncfg["z_dim"], ncfg["hidden"], ncfg["min_gap"])
    enc = ctx.ContextEncoder(rng, ecfg["z_dim"], ecfg["fusion_dim"], ecfg["grid"], ecfg["n_tasks"])
    for i, p in enumerate(net.params):
        p[...] = arrays[f"net.{i}"]
    for i, p in enumerate(enc.params):
        p[...] = arrays[f"enc.{i}"]
    policy = FlowPolicy(net, enc, cfg)
    policy.set_normalizers(Normalizer(arrays["chunk_norm.mean"], arrays["chunk_norm.std"]),
                           Normalizer(arrays["h_norm.mean"], arrays["h_norm.std"]))
    state = None
    if "train" in config:
        t = config["train"]
        opt = AdamW(policy.params, AdamWConfig(**t["optimizer"]))
        n = len(policy.params)
        opt.load_state([arrays[f"opt.{i}"] for i in range(2 * n)], t["step"])
        gen = np.random.default_rng()
        gen.bit_generator.state = t["rng"]
        state = TrainState(opt, gen, t["step"], [], t["batch_size"], t["grad_clip"])
    return policy, state, config.get("extra", {})


def expected_l2(chunks, datum) -> float:
    """Mean Euclidean distance between generated flattened chunks and a datum."""
    diff = np.asarray(chunks).reshape(len(chunks), -1) - np.asarray(datum).reshape(1, -1)
    return float(np.mean(np.sqrt(np.sum(diff**2, axis=1))))

