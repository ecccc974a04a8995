"""Temporal Orthogonal Filtering: fuse overlapping motion chunks into one trajectory.

Every generated chunk contributes an absolute wrist estimate to each of the
``l`` steps it covers. A decoded step averages all available translation
estimates and projects the elementwise mean of the rotation estimates back
onto SO(3).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import handmodel as hm
from . import rotmath
from .errors import NoEstimates, OutOfOrderQuery, ValidationError


@dataclass
class _Entry:
    query_step: int
    rots: np.ndarray  # (l, 3, 3) absolute
    trans: np.ndarray  # (l, 3) absolute
    fingers: np.ndarray  # (l, 109) theta and beta are read from here

    def covers(self, k: int) -> bool:
        return self.query_step < k <= self.query_step + len(self.trans)


class ChunkBuffer:
    """Ring of the last ``l`` chunks with absolute per-step wrist estimates."""

    def __init__(self, l: int = 16):
        self.l = l
        self.entries: deque[_Entry] = deque(maxlen=l)

    def __len__(self):
        return len(self.entries)

    @property
    def last_query(self):
        return self.entries[-1].query_step if self.entries else None

    def push(self, query_step: int, base_pose, chunk) -> None:
        """``base_pose`` = (R, t) of the conditioning state; ``chunk`` is relative (l, 109)."""
        if self.entries and query_step <= self.entries[-1].query_step:
            raise OutOfOrderQuery(f"query step {query_step} after {self.entries[-1].query_step}")
        chunk = np.asarray(chunk, dtype=float)
        if chunk.shape != (self.l, hm.N_PARAMS):
            raise ValidationError(f"chunk must be ({self.l}, 109), got {chunk.shape}")
        base_r, base_t = (np.asarray(x, dtype=float) for x in base_pose)
        rel_r, rel_t = hm.wrist_pose(chunk)
        rots, trans = hm.relative_to_absolute((base_r, base_t), (rel_r, rel_t))
        self.entries.append(_Entry(int(query_step), rots, trans, chunk))

    def estimates(self, k: int):
        """All (R, t) estimates for step k, oldest chunk first."""
        rs, ts = [], []
        for e in self.entries:
            if e.covers(k):
                j = k - e.query_step - 1
                rs.append(e.rots[j])
                ts.append(e.trans[j])
        return rs, ts

    def newest_covering(self, k: int) -> np.ndarray:
        for e in reversed(self.entries):
            if e.covers(k):
                return e.fingers[k - e.query_step - 1]
        raise NoEstimates(f"no chunk covers step {k}")


def push_chunk(buf: ChunkBuffer, query_step: int, base_pose, chunk) -> ChunkBuffer:
    buf.push(query_step, base_pose, chunk)
    return buf


def decode_step(buf: ChunkBuffer, k: int):
    """Uniform-weight mean of the wrist estimates for step k, rotation projected to SO(3)."""
    rs, ts = buf.estimates(k)
    if not rs:
        raise NoEstimates(f"no estimates for step {k}")
    t = np.mean(ts, axis=0)
    if len(rs) == 1 or all(np.array_equal(rs[0], r) for r in rs[1:]):
        return rs[0].copy(), t
    return rotmath.project_to_so3(np.mean(rs, axis=0)), t


def decode_params(buf: ChunkBuffer, k: int) -> np.ndarray:
    """Full 109-dim state for step k: fused wrist, theta and beta from the newest chunk."""
    r, t = decode_step(buf, k)
    return hm.with_wrist_pose(buf.newest_covering(k), (r, t))


class StaticPolicy:
    """Baseline that holds h_k for all l steps."""

    def __init__(self, l: int = 16):
        self.chunk_len = l

    def predict_chunk(self, h_k, context, rng):
        chunk = np.tile(np.asarray(h_k, dtype=float), (self.chunk_len, 1))
        chunk[:, hm.ROT] = hm.IDENTITY_6D
        chunk[:, hm.TRANS] = 0.0
        return chunk


class OraclePolicy:
    """Ground-truth future relative to the conditioning state, plus optional wrist noise.

    ``trajectory`` is the absolute (N, 109) ground truth; steps past its end repeat
    the last frame. Context is ignored except for its step index.
    """

    def __init__(self, trajectory, l: int = 16, sigma_t: float = 0.0, sigma_r: float = 0.0):
        self.traj = np.asarray(trajectory, dtype=float)
        self.chunk_len, self.sigma_t, self.sigma_r = l, sigma_t, sigma_r

    def predict_chunk(self, h_k, context, rng):
        i = int(context)
        idx = np.minimum(np.arange(i + 1, i + self.chunk_len + 1), len(self.traj) - 1)
        future = self.traj[idx]
        base = hm.wrist_pose(h_k)
        rel_r, rel_t = hm.absolute_to_relative(base, hm.wrist_pose(future))
        if self.sigma_t:
            rel_t = rel_t + rng.normal(0.0, self.sigma_t, rel_t.shape)
        if self.sigma_r:
            rel_r = rel_r @ rotmath.axis_angle_to_matrix(rng.normal(0.0, self.sigma_r, (self.chunk_len, 3)))
        out = hm.with_wrist_pose(future, (rel_r, rel_t))
        out[:, hm.BETA] = np.asarray(h_k)[hm.BETA]
        return out


def decode_trajectory(policy, context_fn, h0, n_frames: int, stride: int = 1, rng=None) -> np.ndarray:
    """Closed-loop driver: query every ``stride`` steps, decode every step with TOF.

    ``context_fn(i)`` gives the context passed to ``policy.predict_chunk`` at query
    step ``i``. Returns the decoded states for steps 1 .. n_frames - 1.
    """
    l = policy.chunk_len
    if not 1 <= stride <= l:
        raise ValidationError(f"stride must lie in [1, {l}]")
    if n_frames < 2:
        raise ValidationError("need at least 2 frames")
    rng = rng if rng is not None else np.random.default_rng(0)
    buf = ChunkBuffer(l)
    current = np.asarray(h0, dtype=float)
    out = np.empty((n_frames - 1, hm.N_PARAMS))
    for k in range(1, n_frames):
        i = k - 1
        if i % stride == 0:
            chunk = policy.predict_chunk(current, context_fn(i), rng)
            buf.push(i, hm.wrist_pose(current), chunk)
        current = decode_params(buf, k)
        out[k - 1] = current
    return out


def wrist_jitter(traj) -> float:
    """Mean norm of the second difference of wrist translations."""
    t = np.asarray(traj)[:, hm.TRANS]
    return float(np.mean(np.linalg.norm(t[2:] - 2 * t[1:-1] + t[:-2], axis=1)))
