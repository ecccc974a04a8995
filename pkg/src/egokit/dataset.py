"""Episodic hand-object dataset store and synthetic trajectory generator.

Store layout (see docs/formats.md for every field)::

    <root>/meta/modality.json      semantic map of the 109-dim state/action vectors
    <root>/meta/episodes.json      index: id, task, length, relative path
    <root>/meta/tasks.json         task token -> instruction
    <root>/episodes/<id>/manifest.json   per-file sha256 checksums
    <root>/episodes/<id>/hand.f32        N x 109 float32 little-endian
    <root>/episodes/<id>/camera.f32      N x 4 x 4 float32 (world -> camera)
    <root>/episodes/<id>/valid.u8        N validity flags
    <root>/episodes/<id>/object.f32      M x 3 float32 object points (world)
    <root>/episodes/<id>/joints.f32      N x 21 x 3 float32 (paired samples only)
    <root>/episodes/<id>/depth/NNNNNN.dpth
    <root>/episodes/<id>/rgb/NNNNNN.ppm
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import handmodel as hm
from . import renderer as rd
from . import rotmath
from .errors import CorruptPayload, FormatVersionMismatch, FrustumViolation, TooShort, ValidationError

FORMAT_VERSION = 1
FPS = 30
MAX_CLIP_LEN = 500  # clips are strictly shorter than this
DEFAULT_CHUNK = 16

TASKS = ("reach", "grasp", "lift", "rotate-cw", "rotate-ccw", "place", "stir", "pour-mime")
INSTRUCTIONS = {
    "reach": "reach toward the object",
    "grasp": "grasp the object",
    "lift": "grasp the object and lift it up",
    "rotate-cw": "grasp the object and rotate it clockwise",
    "rotate-ccw": "grasp the object and rotate it counterclockwise",
    "place": "release the object and move the hand aside",
    "stir": "stir around the object",
    "pour-mime": "hold the object and tilt it as if pouring",
}

OBJECT_COLOR = (210, 120, 40)
HAND_COLOR = (235, 195, 165)


# ---------------------------------------------------------------------------
# modality config


@dataclass(frozen=True)
class FieldSpec:
    name: str
    offset: int
    length: int
    rotation: str | None
    units: str
    transform: str = "identity"


@dataclass(frozen=True)
class ModalityConfig:
    state: tuple[FieldSpec, ...]
    action: tuple[FieldSpec, ...]

    @classmethod
    def default(cls) -> "ModalityConfig":
        state = (
            FieldSpec("theta", 0, 90, "rot6d", "unitless", "gram_schmidt"),
            FieldSpec("beta", 90, 10, None, "unitless"),
            FieldSpec("r", 100, 6, "rot6d", "unitless", "gram_schmidt"),
            FieldSpec("t", 106, 3, None, "meters"),
        )
        action = (
            FieldSpec("theta", 0, 90, "rot6d", "unitless", "gram_schmidt"),
            FieldSpec("beta", 90, 10, None, "unitless", "repeat_from_state"),
            FieldSpec("r", 100, 6, "rot6d", "unitless", "relative_to_state"),
            FieldSpec("t", 106, 3, None, "meters", "relative_to_state"),
        )
        return cls(state, action)

    def validate(self) -> None:
        for group_name, group in (("state", self.state), ("action", self.action)):
            pos = 0
            for f in sorted(group, key=lambda f: f.offset):
                if f.offset != pos or f.length <= 0:
                    raise ValidationError(f"{group_name}.{f.name}: fields must partition [0, 109) contiguously")
                pos += f.length
            if pos != hm.N_PARAMS:
                raise ValidationError(f"{group_name}: fields cover {pos} entries, expected {hm.N_PARAMS}")
            names = {f.name: f for f in group}
            for rot_field in ("theta", "r"):
                if rot_field not in names or not names[rot_field].rotation:
                    raise ValidationError(f"{group_name}.{rot_field}: rotation representation must be declared")

    def to_json(self) -> dict:
        def enc(group):
            return [
                {"name": f.name, "offset": f.offset, "length": f.length, "dtype": "float32",
                 "rotation": f.rotation, "units": f.units, "transform": f.transform}
                for f in group
            ]
        return {"format_version": FORMAT_VERSION, "state": enc(self.state), "action": enc(self.action)}

    @classmethod
    def from_json(cls, d: dict) -> "ModalityConfig":
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatVersionMismatch(f"modality.json version {d.get('format_version')} != {FORMAT_VERSION}")

        def dec(group):
            return tuple(
                FieldSpec(g["name"], int(g["offset"]), int(g["length"]), g.get("rotation"), g["units"],
                          g.get("transform", "identity"))
                for g in group
            )
        cfg = cls(dec(d["state"]), dec(d["action"]))
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    id: str
    task_token: int
    instruction: str
    hand: np.ndarray  # (N, 109) float32, camera frame
    intrinsics: rd.CameraIntrinsics | None = None
    extrinsics: np.ndarray | None = None  # (N, 4, 4) float32
    depth: np.ndarray | None = None  # (N, H, W) float32
    depth_mask: np.ndarray | None = None  # (N, H, W) bool
    rgb: np.ndarray | None = None  # (N, H, W, 3) uint8
    valid: np.ndarray | None = None  # (N,) bool
    object_points: np.ndarray | None = None  # (M, 3) float32, world frame
    joints: np.ndarray | None = None  # (N, 21, 3) float32
    success: bool | None = None

    def __post_init__(self):
        self.hand = np.asarray(self.hand, dtype=np.float32)
        if self.hand.ndim != 2 or self.hand.shape[1] != hm.N_PARAMS:
            raise ValidationError(f"episode {self.id}: hand track must be (N, 109)")
        if len(self) < 2:
            raise TooShort(f"episode {self.id}: needs at least 2 frames, has {len(self)}")
        if self.valid is None:
            self.valid = np.ones(len(self), dtype=bool)
        for name in ("extrinsics", "depth", "depth_mask", "rgb", "valid", "joints"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self):
                raise ValidationError(f"episode {self.id}: {name} has {len(arr)} frames, hand has {len(self)}")
        if (self.depth is None) != (self.depth_mask is None):
            raise ValidationError(f"episode {self.id}: depth and depth_mask go together")

    def __len__(self) -> int:
        return self.hand.shape[0]

    @property
    def task(self) -> str:
        return TASKS[self.task_token]

    def depth_map(self, k: int) -> rd.DepthMap:
        return rd.DepthMap(self.depth[k], self.depth_mask[k])

    def extrinsics_at(self, k: int) -> rd.CameraExtrinsics:
        return rd.CameraExtrinsics(self.extrinsics[k].astype(float))

    def frames(self, start: int, stop: int, new_id: str) -> "Episode":
        def cut(x):
            return None if x is None else x[start:stop]
        return replace(
            self, id=new_id, hand=self.hand[start:stop], extrinsics=cut(self.extrinsics), depth=cut(self.depth),
            depth_mask=cut(self.depth_mask), rgb=cut(self.rgb), valid=cut(self.valid), joints=cut(self.joints),
        )


def clip_episode(e: Episode, max_len: int = MAX_CLIP_LEN) -> list[Episode]:
    """Split into near-equal consecutive clips, each strictly shorter than max_len."""
    if max_len < 2:
        raise ValidationError("max_len must be at least 2")
    n = len(e)
    if n < 2:
        raise TooShort(f"episode {e.id} has {n} frames")
    longest = max_len - 1
    if n <= longest:
        return [e]
    n_clips = math.ceil(n / longest)
    if longest < 2 or n // n_clips < 2:
        raise ValidationError(f"cannot clip {n} frames into clips of 2..{longest}")
    bounds = np.linspace(0, n, n_clips + 1).round().astype(int)
    return [e.frames(a, b, f"{e.id}_c{i:02d}") for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]


# ---------------------------------------------------------------------------
# synthetic scenes


def min_jerk(s):
    s = np.clip(s, 0.0, 1.0)
    return 10 * s**3 - 15 * s**4 + 6 * s**5


@dataclass
class SceneSpec:
    seed: int
    task_token: int
    n_frames: int = 90
    object_center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.06, 0.48]))
    object_extent: np.ndarray = field(default_factory=lambda: np.array([0.035, 0.05, 0.035]))
    grasp_offset: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.01, -0.10]))
    hand_start: np.ndarray = field(default_factory=lambda: np.array([0.06, 0.12, 0.26]))
    hand_start_rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(hm.N_SHAPE))
    motion_amplitude: float = 1.0
    ego_translation: float = 0.015
    ego_rotation: float = 0.03
    ego_frequency: float = 0.4
    ego_phase: np.ndarray = field(default_factory=lambda: np.zeros(6))
    image_size: int = 64
    focal: float = 60.0
    max_depth: float = 2.0
    object_points: int = 600

    @classmethod
    def sample(cls, seed: int, task_token: int, **overrides) -> "SceneSpec":
        rng = np.random.default_rng([seed, task_token, 17])
        spec = cls(
            seed=seed,
            task_token=task_token,
            n_frames=int(rng.integers(72, 121)),
            object_center=np.array([rng.uniform(-0.07, 0.07), rng.uniform(0.03, 0.09), rng.uniform(0.42, 0.55)]),
            object_extent=rng.uniform([0.025, 0.03, 0.025], [0.045, 0.07, 0.045]),
            grasp_offset=np.array([rng.uniform(-0.015, 0.015), rng.uniform(-0.02, 0.0), rng.uniform(-0.11, -0.09)]),
            hand_start=np.array([rng.uniform(-0.06, 0.10), rng.uniform(0.09, 0.15), rng.uniform(0.22, 0.30)]),
            hand_start_rotvec=rng.normal(0, 0.15, 3),
            beta=rng.normal(0, 0.8, hm.N_SHAPE),
            ego_frequency=rng.uniform(0.2, 0.6),
            ego_phase=rng.uniform(0, 2 * np.pi, 6),
        )
        return replace(spec, **overrides)

    def intrinsics(self) -> rd.CameraIntrinsics:
        c = self.image_size / 2.0
        return rd.CameraIntrinsics.pinhole(self.focal, self.focal, c, c, self.image_size, self.image_size)


# hand frame: fingers along +y, curl toward +z; map fingers forward and palm down in the world
_BASE_HAND = np.column_stack([
    [1.0, 0.0, 0.0],
    np.array([0.0, -0.35, 1.0]) / np.linalg.norm([0.0, -0.35, 1.0]),
    np.cross([1.0, 0.0, 0.0], np.array([0.0, -0.35, 1.0]) / np.linalg.norm([0.0, -0.35, 1.0])),
])


def _task_profile(task: str, s: np.ndarray):
    """Per-task extra translation (hand-independent, world), rotation axis/angle and curl."""
    bump = np.sin(np.pi * s)
    m = min_jerk(s)
    m_fast = min_jerk(2 * s)
    extra = np.zeros(s.shape + (3,))
    axis = np.array([0.0, 1.0, 0.0])  # hand-frame axis
    angle = np.zeros_like(s)
    curl = 0.1 + 0.6 * m
    if task == "reach":
        curl = 0.1 + 0.15 * m
        angle = np.deg2rad(15) * m
        axis = np.array([0.0, 0.0, 1.0])
    elif task == "lift":
        extra[..., 1] = -0.07 * bump**2
        curl = 0.1 + 0.6 * m_fast
    elif task in ("rotate-cw", "rotate-ccw"):
        angle = np.deg2rad(-70 if task == "rotate-cw" else 70) * m
        curl = 0.1 + 0.6 * m_fast
    elif task == "place":
        extra[..., 0] = 0.10 * bump
        extra[..., 1] = -0.03 * bump
        curl = 0.7 - 0.6 * m
    elif task == "stir":
        extra[..., 0] = 0.03 * np.sin(4 * np.pi * s) * bump
        extra[..., 2] = 0.03 * (1 - np.cos(4 * np.pi * s)) * bump
        angle = np.deg2rad(15) * np.sin(2 * np.pi * s)
        axis = np.array([0.0, 0.0, 1.0])
        curl = 0.65 + 0.0 * s
    elif task == "pour-mime":
        extra[..., 1] = -0.04 * bump
        angle = np.deg2rad(60) * bump * m_fast
        axis = np.array([1.0, 0.0, 0.0])
        curl = 0.1 + 0.55 * m_fast
    return extra, axis, angle, curl


def scene_trajectory(spec: SceneSpec):
    """World-frame wrist rotations (N,3,3), translations (N,3), finger curls (N,15) and T_cw (N,4,4)."""
    n = spec.n_frames
    s = np.linspace(0.0, 1.0, n)
    task = TASKS[spec.task_token]
    extra, axis, angle, curl = _task_profile(task, s)
    amp = spec.motion_amplitude
    target = spec.object_center + spec.grasp_offset
    p0 = np.asarray(spec.hand_start, dtype=float)
    trans = p0 + amp * ((target - p0) * min_jerk(s)[:, None] + extra)
    r_start = rotmath.axis_angle_to_matrix(spec.hand_start_rotvec) @ _BASE_HAND
    rots = r_start @ rotmath.axis_angle_to_matrix(np.tile(axis, (n, 1)), amp * angle)
    finger_scale = np.array([1.0, 1.0, 1.1, 1.05, 0.8])
    curl = np.clip((curl[0] + amp * (curl - curl[0]))[:, None] * finger_scale, 0.0, 1.0)
    curl15 = np.repeat(curl, 3, axis=1) * np.tile([1.0, 0.9, 0.8], 5)

    t_sec = np.arange(n) / FPS
    phase = 2 * np.pi * spec.ego_frequency * t_sec[:, None] + spec.ego_phase
    osc = np.sin(phase) - np.sin(spec.ego_phase)  # zero at t = 0
    cam = np.tile(np.eye(4), (n, 1, 1))
    cam[:, :3, :3] = rotmath.axis_angle_to_matrix(spec.ego_rotation * osc[:, :3])
    cam[:, :3, 3] = spec.ego_translation * osc[:, 3:]
    return rots, trans, curl15, cam


def _box_points(center, extent, n, rng):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = np.zeros((n, 3))
    ax = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = ax == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return center + pts * extent


def synthesize_episode(spec: SceneSpec, asset: hm.HandAsset, episode_id: str | None = None) -> Episode:
    """Render a deterministic synthetic interaction episode."""
    rng = np.random.default_rng([spec.seed, spec.task_token, 29])
    rots_w, trans_w, curl15, cam = scene_trajectory(spec)
    n = spec.n_frames
    intr = spec.intrinsics()
    cam = cam.astype(np.float32)

    hand = np.zeros((n, hm.N_PARAMS))
    hand[:, hm.THETA] = hm.finger_theta(curl15)
    hand[:, hm.BETA] = spec.beta
    r_cw = cam[:, :3, :3].astype(float)
    t_cw = cam[:, :3, 3].astype(float)
    hand[:, hm.ROT] = rotmath.matrix_to_rot6d(r_cw @ rots_w, check=False)
    hand[:, hm.TRANS] = np.einsum("nij,nj->ni", r_cw, trans_w) + t_cw
    hand = hand.astype(np.float32)

    obj = _box_points(spec.object_center, spec.object_extent, spec.object_points, rng).astype(np.float32)
    obj_h = rd.homogeneous(obj)
    _, verts_c = hm.forward(asset, hand.astype(float))

    size = spec.image_size
    depth = np.zeros((n, size, size), dtype=np.float32)
    mask = np.zeros((n, size, size), dtype=bool)
    rgb = np.zeros((n, size, size, 3), dtype=np.uint8)
    valid = np.zeros(n, dtype=bool)
    obj_visible = 0
    center_h = rd.homogeneous(spec.object_center)
    ident = rd.CameraExtrinsics.identity()
    for k in range(n):
        extr = rd.CameraExtrinsics(cam[k].astype(float))
        obj_c = (extr.T_cw @ obj_h.T).T
        hand_h = rd.homogeneous(verts_c[k])
        dm = rd.render_depth(intr, ident, [obj_c, hand_h])
        clipped = np.minimum(dm.depth, np.float32(spec.max_depth))
        depth[k] = np.where(dm.mask, clipped, rd.EMPTY)
        mask[k] = dm.mask
        rgb[k] = rd.splat_colors(intr, ident, [obj_c, hand_h], [OBJECT_COLOR, HAND_COLOR])
        _, _, hv = rd.project_points(intr, ident, hand_h)
        valid[k] = hv.mean() >= 0.1
        obj_visible += bool(rd.project_points(intr, extr, center_h)[2][0])
    if obj_visible < 0.5 * n:
        raise FrustumViolation(f"object visible in only {obj_visible}/{n} frames")

    task = TASKS[spec.task_token]
    return Episode(
        id=episode_id or f"ep_{spec.seed:06d}_{spec.task_token}",
        task_token=spec.task_token,
        instruction=INSTRUCTIONS[task],
        hand=hand,
        intrinsics=intr,
        extrinsics=cam,
        depth=depth,
        depth_mask=mask,
        rgb=rgb,
        valid=valid,
        object_points=obj,
    )


def generate_corpus(asset: hm.HandAsset, n_episodes: int = 64, seed: int = 0, max_len: int = MAX_CLIP_LEN,
                    **spec_overrides) -> list[Episode]:
    """Episodes cycling through the task tokens (equal count per token), clipped."""
    out = []
    for i in range(n_episodes):
        token = i % len(TASKS)
        spec = SceneSpec.sample(seed * 100003 + i, token, **spec_overrides)
        ep = synthesize_episode(spec, asset, episode_id=f"ep_{i:04d}")
        out.extend(clip_episode(ep, max_len))
    return out


# ---------------------------------------------------------------------------
# storage


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptPayload(f"{path}: {exc}") from exc


def init_store(root, modality: ModalityConfig | None = None) -> Path:
    root = Path(root)
    (root / "meta").mkdir(parents=True, exist_ok=True)
    (root / "episodes").mkdir(exist_ok=True)
    modality = modality or ModalityConfig.default()
    modality.validate()
    mpath = root / "meta" / "modality.json"
    if not mpath.exists():
        mpath.write_text(json.dumps(modality.to_json(), indent=2), encoding="utf-8")
    tpath = root / "meta" / "tasks.json"
    if not tpath.exists():
        tasks = {str(i): {"name": name, "instruction": INSTRUCTIONS[name]} for i, name in enumerate(TASKS)}
        tpath.write_text(json.dumps(tasks, indent=2), encoding="utf-8")
    ipath = root / "meta" / "episodes.json"
    if not ipath.exists():
        ipath.write_text(json.dumps({"format_version": FORMAT_VERSION, "fps": FPS, "episodes": []}, indent=2),
                         encoding="utf-8")
    return root


def read_index(root) -> dict:
    root = Path(root)
    index = _read_json(root / "meta" / "episodes.json")
    if index.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{root}: store version {index.get('format_version')} != {FORMAT_VERSION}")
    ModalityConfig.from_json(_read_json(root / "meta" / "modality.json"))
    return index


def list_episodes(root) -> list[str]:
    return [e["id"] for e in read_index(root)["episodes"]]


def write_episode(root, e: Episode) -> None:
    root = init_store(root)
    index = read_index(root)
    rel = Path("episodes") / e.id
    edir = root / rel
    edir.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(name: str, data: bytes):
        (edir / name).parent.mkdir(parents=True, exist_ok=True)
        (edir / name).write_bytes(data)
        files[name] = _sha(data)

    put("hand.f32", np.ascontiguousarray(e.hand, dtype="<f4").tobytes())
    put("valid.u8", np.asarray(e.valid, dtype=np.uint8).tobytes())
    if e.extrinsics is not None:
        put("camera.f32", np.ascontiguousarray(e.extrinsics, dtype="<f4").tobytes())
    if e.object_points is not None:
        put("object.f32", np.ascontiguousarray(e.object_points, dtype="<f4").tobytes())
    if e.joints is not None:
        put("joints.f32", np.ascontiguousarray(e.joints, dtype="<f4").tobytes())
    if e.depth is not None:
        for k in range(len(e)):
            put(f"depth/{k:06d}.dpth", rd.depth_to_bytes(e.depth_map(k)))
    if e.rgb is not None:
        for k in range(len(e)):
            put(f"rgb/{k:06d}.ppm", rd.rgb_to_bytes(e.rgb[k]))
    manifest = {
        "format_version": FORMAT_VERSION,
        "id": e.id,
        "task_token": e.task_token,
        "instruction": e.instruction,
        "length": len(e),
        "intrinsics": None if e.intrinsics is None else e.intrinsics.to_dict(),
        "n_object_points": None if e.object_points is None else int(len(e.object_points)),
        "success": e.success,
        "files": files,
    }
    (edir / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    entries = [x for x in index["episodes"] if x["id"] != e.id]
    entries.append({"id": e.id, "task_token": e.task_token, "length": len(e), "path": rel.as_posix()})
    index["episodes"] = entries
    (root / "meta" / "episodes.json").write_text(json.dumps(index, indent=1), encoding="utf-8")


def read_episode(root, episode_id: str) -> Episode:
    root = Path(root)
    index = read_index(root)
    entry = next((x for x in index["episodes"] if x["id"] == episode_id), None)
    if entry is None:
        raise ValidationError(f"{root}: no episode {episode_id!r}")
    edir = root / entry["path"]
    manifest = _read_json(edir / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{edir}: manifest version {manifest.get('format_version')}")
    files = manifest["files"]
    n = int(manifest["length"])

    def get(name: str, what: str) -> bytes:
        path = edir / name
        try:
            data = path.read_bytes()
        except FileNotFoundError as exc:
            raise CorruptPayload(f"episode {episode_id}: {what} missing ({name})") from exc
        if _sha(data) != files[name]:
            raise CorruptPayload(f"episode {episode_id}: {what} checksum mismatch ({name})")
        return data

    def arr(name, shape, what):
        if name not in files:
            return None
        data = get(name, what)
        expected = 4 * int(np.prod(shape))
        if len(data) != expected:
            raise CorruptPayload(f"episode {episode_id}: {what} has {len(data)} bytes, expected {expected}")
        return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)

    hand = arr("hand.f32", (n, hm.N_PARAMS), "hand track")
    valid = np.frombuffer(get("valid.u8", "validity flags"), dtype=np.uint8).astype(bool)
    extr = arr("camera.f32", (n, 4, 4), "camera track")
    n_obj = manifest.get("n_object_points")
    obj = arr("object.f32", (n_obj or 0, 3), "object points") if n_obj else None
    joints = arr("joints.f32", (n, hm.N_JOINTS, 3), "joint track")
    depth = mask = rgb = None
    if f"{0:06d}.dpth" in {Path(k).name for k in files if k.startswith("depth/")}:
        maps = [rd.depth_from_bytes(get(f"depth/{k:06d}.dpth", f"depth frame {k}"), f"depth frame {k}") for k in range(n)]
        depth = np.stack([m.depth for m in maps])
        mask = np.stack([m.mask for m in maps])
    if "rgb/000000.ppm" in files:
        rgb = np.stack([rd.rgb_from_bytes(get(f"rgb/{k:06d}.ppm", f"rgb frame {k}"), f"rgb frame {k}") for k in range(n)])
    intr = manifest.get("intrinsics")
    return Episode(
        id=manifest["id"],
        task_token=int(manifest["task_token"]),
        instruction=manifest["instruction"],
        hand=hand,
        intrinsics=None if intr is None else rd.CameraIntrinsics.from_dict(intr),
        extrinsics=extr,
        depth=depth,
        depth_mask=mask,
        rgb=rgb,
        valid=valid,
        object_points=obj,
        joints=joints,
        success=manifest.get("success"),
    )


def write_dataset(root, episodes) -> None:
    for e in episodes:
        write_episode(root, e)


def read_dataset(root) -> list[Episode]:
    return [read_episode(root, i) for i in list_episodes(root)]


# ---------------------------------------------------------------------------
# training samples


def relative_chunks(hand: np.ndarray, base_index: np.ndarray, l: int) -> np.ndarray:
    """Targets for every base frame k: frames k+1..k+l with wrist relative to frame k, beta from k."""
    hand = np.asarray(hand, dtype=float)
    idx = base_index[:, None] + np.arange(1, l + 1)[None, :]
    future = hand[idx]  # (S, l, 109)
    base = hand[base_index]
    base_r, base_t = hm.wrist_pose(base)
    abs_r, abs_t = hm.wrist_pose(future)
    rel_r, rel_t = hm.absolute_to_relative((base_r[:, None], base_t[:, None]), (abs_r, abs_t))
    out = hm.with_wrist_pose(future, (rel_r, rel_t))
    out[..., hm.BETA] = base[:, None, hm.BETA]
    return out


@dataclass
class TrainingSamples:
    """Stacked (h_k, context, target chunk) triples from one or more episodes."""

    h: np.ndarray  # (S, 109)
    target: np.ndarray  # (S, l, 109)
    task_token: np.ndarray  # (S,)
    depth: np.ndarray  # (S, H, W) views into episode arrays
    depth_mask: np.ndarray
    rgb: np.ndarray

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, i):
        return self.h[i], (self.depth[i], self.depth_mask[i], self.rgb[i], self.task_token[i]), self.target[i]

    def subset(self, idx) -> "TrainingSamples":
        return TrainingSamples(*(getattr(self, f)[idx] for f in
                                 ("h", "target", "task_token", "depth", "depth_mask", "rgb")))

    @classmethod
    def concat(cls, parts) -> "TrainingSamples":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("h", "target", "task_token", "depth", "depth_mask", "rgb")))


def make_training_samples(e: Episode, l: int = DEFAULT_CHUNK) -> TrainingSamples:
    if len(e) <= l:
        raise TooShort(f"episode {e.id}: {len(e)} frames, need more than {l}")
    if e.depth is None or e.rgb is None:
        raise ValidationError(f"episode {e.id}: context frames missing")
    k = np.arange(len(e) - l)
    return TrainingSamples(
        h=e.hand[k].astype(float),
        target=relative_chunks(e.hand, k, l),
        task_token=np.full(len(k), e.task_token),
        depth=e.depth[k],
        depth_mask=e.depth_mask[k],
        rgb=e.rgb[k],
    )
