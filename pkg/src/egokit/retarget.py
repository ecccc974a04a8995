"""Inverse hand-model retargeting: joint positions (21, 3) -> hand parameters (109,).

A PointNet-style encoder (shared per-joint MLP with a learned per-joint
embedding, max-pool, MLP head) trained in two gated stages: shape first
(L1 = w1 * L_shape + L_recon) and, once that converges, wrist pose
(L2 = w2 * L_pose + L_recon). ``optimize_params`` is an independent
direct-optimization oracle.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import handmodel as hm
from . import rotmath
from .errors import NeverConverged, NonFinite, Stalled, ValidationError
from .nn import MLP, AdamW, AdamWConfig, glorot

MAGIC = b"IMRT"
W1, W2 = 4.0, 5.0
SHAPE = np.r_[0:100]  # theta (6D) and beta
POSE = np.r_[100:109]  # r (6D) and t


@dataclass
class RetargetConfig:
    point_widths: tuple = (64, 128, 256)
    head_widths: tuple = (256, 256)
    input_scale: float = 10.0  # wrist-relative meters -> decimeters
    trans_scale: float = 0.1


class RetargetNet:
    def __init__(self, rng: np.random.Generator, cfg: RetargetConfig | None = None, dtype=np.float32):
        self.cfg = cfg or RetargetConfig()
        widths = (3,) + tuple(self.cfg.point_widths)
        self.point_params = []
        for a, b in zip(widths[:-1], widths[1:]):
            self.point_params += [glorot(rng, a, b, dtype), np.zeros(b, dtype)]
        self.embedding = (0.1 * rng.standard_normal((hm.N_JOINTS, widths[1]))).astype(dtype)
        self.head = MLP((widths[-1],) + tuple(self.cfg.head_widths) + (hm.N_PARAMS,), rng, dtype)
        self.base = hm.HandParams.rest().vector().astype(dtype)
        scale = np.ones(hm.N_PARAMS, dtype)
        scale[hm.TRANS] = self.cfg.trans_scale
        self.out_scale = scale

    @property
    def params(self):
        return self.point_params + [self.embedding] + self.head.params

    def forward(self, joints):
        joints = np.asarray(joints)
        if joints.shape[-2:] != (hm.N_JOINTS, 3):
            raise ValidationError(f"joints must be (..., 21, 3), got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise NonFinite("non-finite joint input")
        dtype = self.embedding.dtype
        wrist = joints[:, :1, :]
        x = ((joints - wrist) * self.cfg.input_scale).astype(dtype)
        acts = [x]
        n_layers = len(self.point_params) // 2
        for i in range(n_layers):
            pre = acts[-1] @ self.point_params[2 * i] + self.point_params[2 * i + 1]
            if i == 0:
                pre = pre + self.embedding
            acts.append(np.tanh(pre))
        feat = acts[-1]
        arg = np.argmax(feat, axis=1)  # (B, C)
        pooled = np.take_along_axis(feat, arg[:, None, :], axis=1)[:, 0, :]
        raw, head_acts = self.head.forward(pooled)
        out = self.base + raw * self.out_scale
        out = out.astype(np.float64)
        out[:, hm.TRANS] += joints[:, 0, :]
        return out, (acts, arg, head_acts)

    def __call__(self, joints):
        return self.forward(joints)[0]

    def backward(self, cache, g_out):
        acts, arg, head_acts = cache
        dtype = self.embedding.dtype
        g_raw = (np.asarray(g_out) * self.out_scale).astype(dtype)
        g_pooled, head_grads = self.head.backward(head_acts, g_raw)
        feat = acts[-1]
        g = np.zeros_like(feat)
        np.put_along_axis(g, arg[:, None, :], g_pooled[:, None, :], axis=1)
        n_layers = len(self.point_params) // 2
        point_grads = [None] * len(self.point_params)
        g_emb = None
        for i in reversed(range(n_layers)):
            g = g * (1.0 - acts[i + 1] ** 2)
            x = acts[i]
            point_grads[2 * i] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            point_grads[2 * i + 1] = g.sum(axis=(0, 1))
            if i == 0:
                g_emb = g.sum(axis=0)
            else:
                g = g @ self.point_params[2 * i].T
        return point_grads + [g_emb] + head_grads


def retarget(net: RetargetNet, joints) -> np.ndarray:
    """Hand vector(s) for (21, 3) or (B, 21, 3) joint sets."""
    joints = np.asarray(joints, dtype=float)
    single = joints.ndim == 2
    out = net(joints[None] if single else joints)
    if not np.all(np.isfinite(out)):
        raise NonFinite("non-finite retargeting output")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses


@dataclass
class StageLosses:
    l1: float
    l2: float
    shape: float
    pose: float
    recon: float


def stage_losses(asset, pred, gt_params, joints, with_grads: bool = False):
    """Both stage losses for a batch; grads (when asked) are {"l1": (B,109), "l2": (B,109)}."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt_params, dtype=float)
    joints = np.asarray(joints, dtype=float)
    b = pred.shape[0]
    d_shape = pred[:, SHAPE] - gt[:, SHAPE]
    d_pose = pred[:, POSE] - gt[:, POSE]
    fk = hm.forward(asset, pred, with_vertices=False)
    d_rec = fk - joints
    l_shape = float(np.mean(np.abs(d_shape)))
    l_pose = float(np.mean(np.abs(d_pose)))
    l_rec = float(np.mean(np.abs(d_rec)))
    losses = StageLosses(W1 * l_shape + l_rec, W2 * l_pose + l_rec, l_shape, l_pose, l_rec)
    if not np.all(np.isfinite([losses.l1, losses.l2])):
        raise NonFinite("non-finite retargeting loss")
    if not with_grads:
        return losses, None
    g_rec = hm.joints_vjp(asset, pred, np.sign(d_rec) / d_rec.size)
    g1 = g_rec.copy()
    g1[:, SHAPE] += W1 * np.sign(d_shape) / (b * len(SHAPE))
    g2 = g_rec.copy()
    g2[:, POSE] += W2 * np.sign(d_pose) / (b * len(POSE))
    return losses, {"l1": g1, "l2": g2}


# ---------------------------------------------------------------------------
# gated training


@dataclass
class GateState:
    """sigma = 1 while stage 1 (shape) runs; flips to 0 once the windowed L1 stops improving."""

    window: int = 100
    tol: float = 1e-3
    patience: int = 3
    sigma: int = 1
    transition_step: int | None = None
    _buf: list = field(default_factory=list)
    _prev: float | None = None
    _flat: int = 0

    def update(self, step: int, l1: float) -> bool:
        """Feed one stage-1 loss; returns True on the step the gate flips."""
        if self.sigma == 0:
            return False
        self._buf.append(l1)
        if len(self._buf) < self.window:
            return False
        mean = float(np.mean(self._buf))
        self._buf = []
        if self._prev is not None:
            rel = (self._prev - mean) / max(abs(self._prev), 1e-12)
            self._flat = self._flat + 1 if rel < self.tol else 0
        self._prev = mean
        if self._flat >= self.patience:
            self.sigma = 0
            self.transition_step = step
            return True
        return False


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    stage1_budget: int = 30000
    stage2_steps: int = 8000
    window: int = 100
    tol: float = 1e-3
    patience: int = 3
    seed: int = 0


@dataclass
class TrainResult:
    gate: GateState
    losses: list  # (step, sigma, l1, l2, recon)
    transition_snapshot: list | None = None


def _lr_at(step: int, cfg: TrainConfig, transition: int | None) -> float:
    warm = 200
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if transition is None:
        return cfg.lr
    frac = min(1.0, (step - transition) / max(1, cfg.stage2_steps))
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train_gated(net: RetargetNet, asset, hands, joints, cfg: TrainConfig | None = None, log=None) -> TrainResult:
    """L_inv = sigma * L1 + (1 - sigma) * L2 with the gate flipping exactly once."""
    cfg = cfg or TrainConfig()
    hands = np.asarray(hands, dtype=float)
    joints = np.asarray(joints, dtype=float)
    if len(hands) < 2:
        raise ValidationError("need paired samples")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(net.params, AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=0.9))
    gate = GateState(cfg.window, cfg.tol, cfg.patience)
    result = TrainResult(gate, [])
    step = 0
    end = None
    while end is None or step < end:
        if gate.sigma == 1 and step >= cfg.stage1_budget:
            raise NeverConverged(f"stage-1 criterion did not fire within {cfg.stage1_budget} steps")
        idx = rng.integers(0, len(hands), cfg.batch_size)
        pred, cache = net.forward(joints[idx])
        losses, grads = stage_losses(asset, pred, hands[idx], joints[idx], with_grads=True)
        g = grads["l1"] if gate.sigma == 1 else grads["l2"]
        param_grads = net.backward(cache, g)
        for pg in param_grads:
            if not np.all(np.isfinite(pg)):
                raise NonFinite(f"non-finite gradient at step {step}", step=step)
        opt.step(param_grads, lr=_lr_at(step, cfg, gate.transition_step))
        result.losses.append((step, gate.sigma, losses.l1, losses.l2, losses.recon))
        if gate.update(step, losses.l1):
            end = step + 1 + cfg.stage2_steps
            result.transition_snapshot = [p.copy() for p in net.params]
            if log:
                log(f"gate flipped at step {step}")
        step += 1
        if log and step % 1000 == 0:
            recent = np.mean([x[4] for x in result.losses[-1000:]])
            log(f"step {step} sigma {gate.sigma} recon {recent * 100:.3f} cm")
    return result


def load_snapshot(net: RetargetNet, snapshot) -> None:
    for p, s in zip(net.params, snapshot):
        p[...] = s


def held_out_mpjpe(net: RetargetNet, asset, joints, batch: int = 512) -> float:
    """Mean joint error (cm) of forward(retarget(j)) against j."""
    errs = []
    for s in range(0, len(joints), batch):
        j = np.asarray(joints[s:s + batch], dtype=float)
        fk = hm.forward(asset, retarget(net, j), with_vertices=False)
        errs.append(np.linalg.norm(fk - j, axis=-1).ravel())
    return float(np.mean(np.concatenate(errs)) * 100.0)


# ---------------------------------------------------------------------------
# paired data


def sample_hands(rng: np.random.Generator, n: int, max_wrist_angle: float = np.pi / 3, t_sigma: float = 0.1,
                 beta_sigma: float = 1.0) -> np.ndarray:
    """Random valid hand vectors: per-joint curls, base spreads, bounded wrist rotation."""
    h = np.tile(hm.HandParams.rest().vector(), (n, 1))
    h[:, hm.THETA] = hm.finger_theta(rng.uniform(0.0, 1.0, (n, 15)), rng.normal(0.0, 0.12, (n, 5)))
    h[:, hm.BETA] = rng.normal(0.0, beta_sigma, (n, hm.N_SHAPE))
    h[:, hm.ROT] = rotmath.matrix_to_rot6d(rotmath.random_rotation(rng, n, max_wrist_angle))
    h[:, hm.TRANS] = rng.normal(0.0, t_sigma, (n, 3)) + np.array([0.0, 0.05, 0.35])
    return h


def make_pairs(asset, n: int, seed: int = 0, **kw):
    """(hand vectors (n, 109), joints (n, 21, 3)) from the forward model."""
    rng = np.random.default_rng(seed)
    hands = sample_hands(rng, n, **kw)
    return hands, hm.forward(asset, hands, with_vertices=False)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: RetargetNet, extra: dict | None = None) -> None:
    cfg = asdict(net.cfg)
    arrays = [(f"p.{i}", p) for i, p in enumerate(net.params)]
    container.save(path, MAGIC, {"config": cfg, "head": list(net.head.sizes), "extra": extra or {}}, arrays)


def load_checkpoint(path) -> RetargetNet:
    config, arrays = container.load(path, MAGIC)
    c = config["config"]
    cfg = RetargetConfig(tuple(c["point_widths"]), tuple(c["head_widths"]), c["input_scale"], c["trans_scale"])
    net = RetargetNet(np.random.default_rng(0), cfg)
    for i, p in enumerate(net.params):
        p[...] = arrays[f"p.{i}"]
    return net


# ---------------------------------------------------------------------------
# direct-optimization oracle


@dataclass
class OptimizeResult:
    h: np.ndarray
    objective: float
    history: list
    iterations: int


def _residuals(asset, hs, joints):
    fk = hm.forward(asset, hs, with_vertices=False)
    return (fk - joints).reshape(fk.shape[:-2] + (-1,))


def _fd_jacobian(asset, h, joints, eps: float):
    """Central finite-difference Jacobian of the joint residuals (63, 109)."""
    n = h.size
    pert = np.concatenate([h + eps * np.eye(n), h - eps * np.eye(n)])
    r = _residuals(asset, pert, joints)
    return ((r[:n] - r[n:]) / (2 * eps)).T


def optimize_params(asset, joints, init, max_iters: int = 200, tol: float = 1e-12, rel_tol: float = 1e-6,
                    fd_eps: float = 1e-6, return_info: bool = False):
    """Minimize ||forward(h).joints - j||^2 over the 109 parameters.

    Descent directions are damped Gauss-Newton steps built from a central
    finite-difference Jacobian (the gradient is ``2 J^T r``). Every accepted step
    passes an Armijo backtracking test, so the objective is non-increasing. Stops
    on relative improvement below ``rel_tol`` or objective below ``tol``; raises
    Stalled when the step budget runs out above ``tol``.
    """
    joints = np.asarray(joints, dtype=float)
    h = np.array(init, dtype=float, copy=True)
    r = _residuals(asset, h[None], joints)[0]
    f = float(r @ r)
    history = [f]
    lam = None
    ladder = 0.5 ** np.arange(30)
    it = 0
    while f > tol:
        if it >= max_iters:
            raise Stalled(f"objective {f:.3e} after {max_iters} iterations")
        it += 1
        jac = _fd_jacobian(asset, h, joints, fd_eps)
        g = 2.0 * jac.T @ r
        jtj = jac.T @ jac
        if lam is None:
            lam = 1e-3 * float(np.max(np.diag(jtj)))
        d = -np.linalg.solve(jtj + lam * np.eye(h.size), jac.T @ r)
        slope = float(g @ d)
        cand = h[None] + ladder[:, None] * d[None]
        rc = _residuals(asset, cand, joints)
        fc = np.sum(rc**2, axis=1)
        ok = np.nonzero(fc <= f + 1e-4 * ladder * slope)[0]
        if ok.size == 0:
            break
        k = ok[0]
        lam = lam / 3.0 if k == 0 else lam * 2.0 ** min(k, 4)
        f_new = float(fc[k])
        rel = (f - f_new) / max(f, 1e-300)
        h, r, f = cand[k], rc[k], f_new
        history.append(f)
        if rel < rel_tol:
            break
    if return_info:
        return OptimizeResult(h, f, history, it)
    return h
