"""Parametric right-hand model.

The 109-dim hand vector is laid out as ``[theta(15x6) | beta(10) | r(6) | t(3)]``:
fifteen finger-joint 6D rotations, ten shape coefficients, the wrist 6D
rotation and the wrist translation in meters (camera frame).

Forward kinematics applies shape blendshapes, chains the 16 articulated
joints (wrist plus three joints on each of five fingers), and skins the
vertices by linear blend skinning. The wrist rotation acts about the
origin, so a wrist pose ``(R, t)`` is a rigid transform of the whole hand.

Joint order (21): 0 wrist; 1-3 index; 4-6 middle; 7-9 pinky; 10-12 ring;
13-15 thumb; 16-20 fingertips in the same finger order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import rotmath
from .errors import LengthMismatch, ValidationError

N_PARAMS = 109
N_JOINTS = 21
N_ARTICULATED = 16
N_FINGER_JOINTS = 15
N_SHAPE = 10

THETA = slice(0, 90)
BETA = slice(90, 100)
ROT = slice(100, 106)
TRANS = slice(106, 109)

PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
TIP_PARENTS = np.array([3, 6, 9, 12, 15])
FINGERS = ("index", "middle", "pinky", "ring", "thumb")

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class HandParams:
    theta: np.ndarray  # (15, 6)
    beta: np.ndarray  # (10,)
    r: np.ndarray  # (6,)
    t: np.ndarray  # (3,)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(N_FINGER_JOINTS, 6)
        self.beta = np.asarray(self.beta, dtype=float).reshape(N_SHAPE)
        self.r = np.asarray(self.r, dtype=float).reshape(6)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @classmethod
    def rest(cls, t=(0.0, 0.0, 0.0), beta=None) -> "HandParams":
        return cls(
            theta=np.tile(IDENTITY_6D, (N_FINGER_JOINTS, 1)),
            beta=np.zeros(N_SHAPE) if beta is None else beta,
            r=IDENTITY_6D,
            t=t,
        )

    def vector(self) -> np.ndarray:
        return pack(self.theta, self.beta, self.r, self.t)


def pack(theta, beta, r, t) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    beta, r, t = (np.asarray(x, dtype=float) for x in (beta, r, t))
    if theta.size != 90 or beta.size != 10 or r.size != 6 or t.size != 3:
        raise LengthMismatch(
            f"component sizes {theta.size}, {beta.size}, {r.size}, {t.size} != 90, 10, 6, 3"
        )
    return np.concatenate([theta.ravel(), beta.ravel(), r.ravel(), t.ravel()])


def unpack(h) -> HandParams:
    h = np.asarray(h, dtype=float)
    if h.shape != (N_PARAMS,):
        raise LengthMismatch(f"hand vector must have shape (109,), got {h.shape}")
    return HandParams(theta=h[THETA].reshape(15, 6), beta=h[BETA], r=h[ROT], t=h[TRANS])


def check_length(h) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[-1] != N_PARAMS:
        raise LengthMismatch(f"hand vectors must have trailing dimension 109, got {h.shape}")
    return h


def joint_rotations(h) -> np.ndarray:
    """Local rotations of the 16 articulated joints, wrist first: (..., 16, 3, 3)."""
    h = check_length(np.asarray(h, dtype=float))
    six = np.concatenate([h[..., ROT][..., None, :], h[..., THETA].reshape(h.shape[:-1] + (15, 6))], axis=-2)
    return rotmath.rot6d_to_matrix(six)


def set_joint_rotations(h, rots) -> np.ndarray:
    """Inverse of joint_rotations: write 16 rotations back into hand vectors."""
    h = np.array(h, dtype=float, copy=True)
    six = rotmath.matrix_to_rot6d(rots, check=False)
    h[..., ROT] = six[..., 0, :]
    h[..., THETA] = six[..., 1:, :].reshape(h.shape[:-1] + (90,))
    return h


# ---------------------------------------------------------------------------
# wrist pose composition


def relative_to_absolute(base, rel):
    """Compose a wrist pose expressed in the base frame onto the base pose.

    Poses are ``(R, t)`` pairs; batched leading dims broadcast.
    """
    base_r, base_t = base
    rel_r, rel_t = rel
    abs_r = base_r @ rel_r
    abs_t = np.einsum("...ij,...j->...i", base_r, rel_t) + base_t
    return abs_r, abs_t


def absolute_to_relative(base, pose):
    base_r, base_t = base
    abs_r, abs_t = pose
    base_rt = np.swapaxes(base_r, -1, -2)
    rel_r = base_rt @ abs_r
    rel_t = np.einsum("...ij,...j->...i", base_rt, abs_t - base_t)
    return rel_r, rel_t


def wrist_pose(h):
    h = check_length(np.asarray(h, dtype=float))
    return rotmath.rot6d_to_matrix(h[..., ROT]), h[..., TRANS].copy()


def with_wrist_pose(h, pose) -> np.ndarray:
    r, t = pose
    h = np.array(h, dtype=float, copy=True)
    h[..., ROT] = rotmath.matrix_to_rot6d(r, check=False)
    h[..., TRANS] = t
    return h


# ---------------------------------------------------------------------------
# asset


@dataclass(frozen=True)
class HandAsset:
    template_vertices: np.ndarray  # (V, 3) meters
    shape_basis: np.ndarray  # (V, 3, 10)
    joint_regressor: np.ndarray  # (21, V)
    kinematic_tree: np.ndarray  # (16,) parent index, -1 for the wrist
    skinning_weights: np.ndarray  # (V, 16)
    rest_joint_offsets: np.ndarray  # (16, 3)
    tip_parents: np.ndarray = field(default_factory=lambda: TIP_PARENTS.copy())

    def __post_init__(self):
        v = self.template_vertices.shape[0]
        if self.template_vertices.shape != (v, 3) or self.shape_basis.shape != (v, 3, N_SHAPE):
            raise ValidationError("template/shape basis shape mismatch")
        if self.joint_regressor.shape != (N_JOINTS, v) or self.skinning_weights.shape != (v, N_ARTICULATED):
            raise ValidationError("regressor/skinning shape mismatch")
        parents = np.asarray(self.kinematic_tree)
        if parents.shape != (N_ARTICULATED,) or parents[0] != -1 or np.any(parents[1:] >= np.arange(1, N_ARTICULATED)):
            raise ValidationError("kinematic tree must be topologically ordered with the wrist as root")
        if np.abs(self.joint_regressor.sum(axis=1) - 1).max() > 1e-6:
            raise ValidationError("joint regressor rows must sum to 1")
        if np.abs(self.skinning_weights.sum(axis=1) - 1).max() > 1e-6:
            raise ValidationError("skinning weight rows must sum to 1")
        for name in ("template_vertices", "shape_basis", "joint_regressor", "skinning_weights", "rest_joint_offsets"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "_template_joints", self.joint_regressor @ self.template_vertices)
        object.__setattr__(
            self, "_joint_shape_basis", np.einsum("jv,vck->jck", self.joint_regressor, self.shape_basis)
        )

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def parents(self) -> np.ndarray:
        return np.asarray(self.kinematic_tree, dtype=int)

    @property
    def template_joints(self) -> np.ndarray:
        return self._template_joints

    @property
    def joint_shape_basis(self) -> np.ndarray:
        """(21, 3, 10): joint displacement per unit shape coefficient."""
        return self._joint_shape_basis


def rest_joints(asset: HandAsset, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    return asset.template_joints + np.einsum("jck,...k->...jc", asset.joint_shape_basis, beta)


def bone_transforms(asset: HandAsset, rots, jr):
    """Global bone rotations A (..., 16, 3, 3) and pivot positions P (..., 16, 3).

    ``rots`` are local joint rotations (wrist first) without translation;
    ``jr`` are shaped rest joints. The bone transform is x -> P_b + A_b (x - jr_b).
    """
    parents = asset.parents
    a = [rots[..., 0, :, :]]
    p = [np.einsum("...ij,...j->...i", rots[..., 0, :, :], jr[..., 0, :])]
    for j in range(1, N_ARTICULATED):
        q = parents[j]
        a.append(a[q] @ rots[..., j, :, :])
        p.append(p[q] + np.einsum("...ij,...j->...i", a[q], jr[..., j, :] - jr[..., q, :]))
    return np.stack(a, axis=-3), np.stack(p, axis=-2)


def forward(asset: HandAsset, h, with_vertices: bool = True):
    """Joints (..., 21, 3) and optionally vertices (..., V, 3) for hand vectors h."""
    h = check_length(np.asarray(h, dtype=float))
    rots = joint_rotations(h)
    beta = h[..., BETA]
    t = h[..., TRANS]
    jr = rest_joints(asset, beta)
    a, p = bone_transforms(asset, rots, jr)
    tips = p[..., asset.tip_parents, :] + np.einsum(
        "...bij,...bj->...bi", a[..., asset.tip_parents, :, :], jr[..., 16:, :] - jr[..., asset.tip_parents, :]
    )
    joints = np.concatenate([p, tips], axis=-2) + t[..., None, :]
    if not with_vertices:
        return joints
    shaped = asset.template_vertices + np.einsum("vck,...k->...vc", asset.shape_basis, beta)
    offs = p - np.einsum("...bij,...bj->...bi", a, jr[..., :N_ARTICULATED, :])
    # blended affine per vertex
    blend_a = np.einsum("vb,...bij->...vij", asset.skinning_weights, a)
    blend_o = np.einsum("vb,...bi->...vi", asset.skinning_weights, offs)
    verts = np.einsum("...vij,...vj->...vi", blend_a, shaped) + blend_o + t[..., None, :]
    return joints, verts


def joints_vjp(asset: HandAsset, h, grad_joints):
    """Gradient of <grad_joints, joints(h)> with respect to the hand vectors.

    Hand-written reverse pass through the 6D construction, the kinematic
    chain and the shape blendshapes; used by the retargeting trainer.
    """
    h = check_length(np.asarray(h, dtype=float))
    g = np.asarray(grad_joints, dtype=float)
    batch = h.shape[:-1]
    six = np.concatenate([h[..., ROT][..., None, :], h[..., THETA].reshape(batch + (15, 6))], axis=-2)
    rots, gs_cache = _gram_schmidt_forward(six)
    beta = h[..., BETA]
    jr = rest_joints(asset, beta)
    a, _ = bone_transforms(asset, rots, jr)
    parents = asset.parents

    g_a = np.zeros_like(a)
    g_p = np.zeros(batch + (N_ARTICULATED, 3))
    g_jr = np.zeros_like(jr)
    g_rot = np.zeros_like(rots)
    g_t = g.sum(axis=-2)
    g_p += g[..., :16, :]

    for k, d in enumerate(asset.tip_parents):
        gj = g[..., 16 + k, :]
        g_p[..., d, :] += gj
        g_a[..., d, :, :] += gj[..., :, None] * (jr[..., 16 + k, :] - jr[..., d, :])[..., None, :]
        back = np.einsum("...ji,...j->...i", a[..., d, :, :], gj)
        g_jr[..., 16 + k, :] += back
        g_jr[..., d, :] -= back
    for j in range(N_ARTICULATED - 1, 0, -1):
        q = parents[j]
        gj = g_p[..., j, :]
        g_p[..., q, :] += gj
        g_a[..., q, :, :] += gj[..., :, None] * (jr[..., j, :] - jr[..., q, :])[..., None, :]
        back = np.einsum("...ji,...j->...i", a[..., q, :, :], gj)
        g_jr[..., j, :] += back
        g_jr[..., q, :] -= back
        g_a[..., q, :, :] += g_a[..., j, :, :] @ np.swapaxes(rots[..., j, :, :], -1, -2)
        g_rot[..., j, :, :] += np.swapaxes(a[..., q, :, :], -1, -2) @ g_a[..., j, :, :]
    g_a[..., 0, :, :] += g_p[..., 0, :, None] * jr[..., 0, None, :]
    g_jr[..., 0, :] += np.einsum("...ji,...j->...i", rots[..., 0, :, :], g_p[..., 0, :])
    g_rot[..., 0, :, :] += g_a[..., 0, :, :]

    g_six = _gram_schmidt_backward(gs_cache, g_rot)
    out = np.zeros(batch + (N_PARAMS,))
    out[..., ROT] = g_six[..., 0, :]
    out[..., THETA] = g_six[..., 1:, :].reshape(batch + (90,))
    out[..., BETA] = np.einsum("jck,...jc->...k", asset.joint_shape_basis, g_jr)
    out[..., TRANS] = g_t
    return out


def _gram_schmidt_forward(six):
    a1, a2 = six[..., :3], six[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    c = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - c * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1), (a2, n1, b1, c, n2, b2)


def _gram_schmidt_backward(cache, g_rot):
    a2, n1, b1, c, n2, b2 = cache
    gb1, gb2, gb3 = g_rot[..., :, 0], g_rot[..., :, 1], g_rot[..., :, 2]
    gb1 = gb1 + np.cross(b2, gb3)
    gb2 = gb2 + np.cross(gb3, b1)
    gu2 = (gb2 - b2 * np.sum(b2 * gb2, axis=-1, keepdims=True)) / n2
    gu2_b1 = np.sum(gu2 * b1, axis=-1, keepdims=True)
    ga2 = gu2 - gu2_b1 * b1
    gb1 = gb1 - gu2_b1 * a2 - c * gu2
    ga1 = (gb1 - b1 * np.sum(b1 * gb1, axis=-1, keepdims=True)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


# ---------------------------------------------------------------------------
# toy asset

_KNUCKLES = np.array([
    [0.030, 0.085, 0.0],
    [0.010, 0.090, 0.0],
    [-0.032, 0.075, 0.0],
    [-0.012, 0.087, 0.0],
    [0.028, 0.022, 0.006],
])
_DIRECTIONS = np.array([
    [0.12, 1.0, 0.0],
    [0.02, 1.0, 0.0],
    [-0.18, 1.0, 0.0],
    [-0.08, 1.0, 0.0],
    [0.75, 0.65, 0.05],
])
_LENGTHS = np.array([
    [0.040, 0.025, 0.022],
    [0.044, 0.028, 0.024],
    [0.032, 0.020, 0.020],
    [0.040, 0.026, 0.023],
    [0.035, 0.030, 0.026],
])
_RING = 8
_SEGMENT_RINGS = 3
N_TOY_VERTICES = 778


def _ring(center, direction, radius, n=_RING):
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    ang = 2 * np.pi * np.arange(n) / n
    return center + radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)


def _design_joints():
    joints = np.zeros((N_JOINTS, 3))
    for f in range(5):
        d = _DIRECTIONS[f] / np.linalg.norm(_DIRECTIONS[f])
        pos = _KNUCKLES[f].copy()
        for s in range(3):
            joints[1 + 3 * f + s] = pos
            pos = pos + _LENGTHS[f, s] * d
        joints[16 + f] = pos
    return joints


def make_toy_asset(seed: int = 7) -> HandAsset:
    """Procedural right-hand stand-in with 778 vertices.

    Each joint is regressed from a ring of vertices rigidly skinned to one
    bone, so regressing joints from posed vertices reproduces forward
    kinematics for every pose, not only at rest.
    """
    rng = np.random.default_rng(seed)
    design = _design_joints()
    verts, weights = [], []
    support = {j: [] for j in range(N_JOINTS)}

    def add(points, bone_weights, joint=None):
        for pt in points:
            if joint is not None:
                support[joint].append(len(verts))
            verts.append(pt)
            weights.append(bone_weights)

    def onehot(b):
        w = np.zeros(N_ARTICULATED)
        w[b] = 1.0
        return w

    wrist_ring = np.stack([0.024 * np.cos(a) * np.array([1, 0, 0]) + 0.011 * np.sin(a) * np.array([0, 0, 1])
                           for a in 2 * np.pi * np.arange(_RING) / _RING])
    add(wrist_ring, onehot(0), joint=0)
    for f in range(5):
        d = _DIRECTIONS[f] / np.linalg.norm(_DIRECTIONS[f])
        for s in range(3):
            j = 1 + 3 * f + s
            parent = PARENTS[j]
            radius = 0.0085 - 0.0012 * s
            add(_ring(design[j], d, radius), onehot(j), joint=j)
            child = design[j + 1] if s < 2 else design[16 + f]
            for q in range(1, _SEGMENT_RINGS + 1):
                frac = q / (_SEGMENT_RINGS + 1)
                w = onehot(j)
                if frac < 0.3:
                    w = 0.75 * onehot(j) + 0.25 * onehot(parent)
                add(_ring(design[j] + frac * (child - design[j]), d, radius * (1 - 0.08 * frac)), w)
        add(_ring(design[16 + f], d, 0.005), onehot(3 * f + 3), joint=16 + f)

    n_palm = N_TOY_VERTICES - len(verts)
    # palm surface samples on a flattened box between wrist and knuckles
    u = rng.uniform(0.0, 1.0, size=(n_palm, 2))
    side = np.where(np.arange(n_palm) % 2 == 0, 1.0, -1.0)
    y = 0.005 + u[:, 1] * 0.078
    half_width = 0.026 + 0.016 * (y / 0.083)
    x = (2 * u[:, 0] - 1) * half_width
    z = side * (0.012 - 0.003 * (y / 0.083))
    add(np.stack([x, y, z], axis=1), onehot(0))

    template = np.asarray(verts)
    skin = np.asarray(weights)
    reg = np.zeros((N_JOINTS, template.shape[0]))
    for j, idx in support.items():
        reg[j, idx] = 1.0 / len(idx)

    basis = np.zeros((template.shape[0], 3, N_SHAPE))
    basis[:, :, 0] = 0.04 * template
    basis[:, 1, 1] = 0.1 * np.clip(template[:, 1] - 0.07, 0.0, None)
    basis[:, 0, 2] = 0.05 * template[:, 0]
    basis[:, 2, 3] = 0.15 * template[:, 2]
    for k in range(4, N_SHAPE):
        omega = rng.normal(0.0, 25.0, size=(3, 3))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        basis[:, :, k] = 0.0015 * np.sin(template @ omega + phase)

    template = template.astype(np.float32).astype(float)
    basis = basis.astype(np.float32).astype(float)
    reg = reg.astype(np.float32).astype(float)
    skin = skin.astype(np.float32).astype(float)
    return _assemble(template, basis, reg, PARENTS.copy(), skin)


def _assemble(template, basis, reg, parents, skin) -> HandAsset:
    joints = reg @ template
    offsets = np.zeros((N_ARTICULATED, 3))
    offsets[0] = joints[0]
    for j in range(1, N_ARTICULATED):
        offsets[j] = joints[j] - joints[parents[j]]
    return HandAsset(template, basis, reg, parents, skin, offsets.astype(np.float32).astype(float))


@lru_cache(maxsize=1)
def toy_asset() -> HandAsset:
    return make_toy_asset()


# ---------------------------------------------------------------------------
# asset container: see docs/formats.md

ASSET_MAGIC = b"HAST"
ASSET_VERSION = 1


def save_asset(asset: HandAsset, path) -> None:
    header = ASSET_MAGIC + struct.pack("<6I", ASSET_VERSION, asset.n_vertices, N_JOINTS, N_ARTICULATED, N_SHAPE, len(asset.tip_parents))
    body = [
        asset.template_vertices,
        asset.shape_basis,
        asset.joint_regressor,
        np.asarray(asset.kinematic_tree, dtype=float),
        asset.skinning_weights,
        asset.rest_joint_offsets,
        np.asarray(asset.tip_parents, dtype=float),
    ]
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in body:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_asset(path) -> HandAsset:
    data = Path(path).read_bytes()
    if data[:4] != ASSET_MAGIC:
        raise ValidationError(f"{path}: not a hand asset file")
    version, v, nj, na, ns, nt = struct.unpack_from("<6I", data, 4)
    if version != ASSET_VERSION:
        raise ValidationError(f"{path}: unsupported asset version {version}")
    shapes = [(v, 3), (v, 3, ns), (nj, v), (na,), (v, na), (na, 3), (nt,)]
    offset = 28
    if len(data) != offset + 4 * sum(int(np.prod(s)) for s in shapes):
        raise ValidationError(f"{path}: payload size does not match the dimension table")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).astype(float))
        offset += 4 * n
    template, basis, reg, parents, skin, offsets, tips = arrays
    return HandAsset(template, basis, reg, parents.astype(int), skin, offsets, tips.astype(int))


# ---------------------------------------------------------------------------
# pose construction helpers

_MAX_FLEX = np.deg2rad(np.array([[75, 95, 65], [80, 100, 70], [80, 95, 65], [80, 100, 70], [45, 50, 60]]))


def finger_axes():
    """Per-finger flexion and abduction axes in the hand frame."""
    d = _DIRECTIONS / np.linalg.norm(_DIRECTIONS, axis=1, keepdims=True)
    flex = np.cross(d, np.array([0.0, 0.0, -1.0]))
    flex /= np.linalg.norm(flex, axis=1, keepdims=True)
    abd = np.cross(flex, d)
    return flex, abd


def finger_theta(curl, spread=None) -> np.ndarray:
    """Finger 6D rotations (..., 90) from per-finger curl in [0, 1] and base spread (radians).

    curl may be shaped (..., 5) or (..., 15) (per joint).
    """
    curl = np.asarray(curl, dtype=float)
    if curl.shape[-1] == 5:
        curl = np.repeat(curl, 3, axis=-1)
    batch = curl.shape[:-1]
    flex, abd = finger_axes()
    flex_j = np.repeat(flex, 3, axis=0)
    angles = curl * _MAX_FLEX.ravel()
    rots = rotmath.axis_angle_to_matrix(np.broadcast_to(flex_j, batch + (15, 3)), angles)
    if spread is not None:
        spread = np.broadcast_to(np.asarray(spread, dtype=float), batch + (5,))
        base = rotmath.axis_angle_to_matrix(np.broadcast_to(abd, batch + (5, 3)), spread)
        rots = rots.copy()
        rots[..., 0::3, :, :] = base @ rots[..., 0::3, :, :]
    return rotmath.matrix_to_rot6d(rots, check=False).reshape(batch + (90,))
