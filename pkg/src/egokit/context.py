"""Context encoder: (depth, schematic RGB, task token, h_k) -> conditioning embedding z.

Both image branches reduce to fixed pooled patch statistics; only the linear
maps on top are learned, trained jointly with the flow policy.
"""
from __future__ import annotations

import numpy as np

from . import handmodel as hm
from .errors import ShapeMismatch
from .nn import glorot

GRID = 8
N_TASKS = 8


def _patches(img: np.ndarray, grid: int) -> np.ndarray:
    """(B, H, W, ...) -> (B, grid, grid, ph*pw, ...) non-overlapping patches."""
    b, h, w = img.shape[:3]
    if h % grid or w % grid:
        raise ShapeMismatch(f"image size {h}x{w} not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    rest = img.shape[3:]
    x = img.reshape((b, grid, ph, grid, pw) + rest)
    x = np.moveaxis(x, 2, 3)  # (b, gy, gx, ph, pw, ...)
    return x.reshape((b, grid, grid, ph * pw) + rest)


def pool_depth(depth, mask, grid: int = GRID) -> np.ndarray:
    """Per-patch mean and min of valid depth, 0 for patches without valid pixels. (B, 2*grid*grid)"""
    depth = np.asarray(depth, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    d = _patches(depth, grid)
    m = _patches(mask, grid)
    count = m.sum(axis=-1)
    mean = np.where(count > 0, np.where(m, d, 0.0).sum(axis=-1) / np.maximum(count, 1), 0.0)
    mn = np.where(count > 0, np.where(m, d, np.inf).min(axis=-1), 0.0)
    b = depth.shape[0]
    return np.concatenate([mean.reshape(b, -1), mn.reshape(b, -1)], axis=1).astype(np.float32)


def pool_rgb(rgb, grid: int = GRID) -> np.ndarray:
    """Per-patch channel means scaled to [0, 1]. (B, 3*grid*grid)"""
    p = _patches(np.asarray(rgb, dtype=np.float32) / 255.0, grid)
    return p.mean(axis=3).reshape(p.shape[0], -1).astype(np.float32)


def pool_features(depth, mask, rgb, grid: int = GRID):
    depth = np.asarray(depth)
    rgb = np.asarray(rgb)
    if depth.shape != np.shape(mask) or depth.shape != rgb.shape[:-1] or rgb.shape[-1] != 3:
        raise ShapeMismatch(f"depth {depth.shape} and rgb {rgb.shape} must share dimensions")
    return pool_depth(depth, mask, grid), pool_rgb(rgb, grid)


class ContextEncoder:
    """Additive fusion of pooled depth and RGB features, then one linear layer to z.

    ``h_mean``/``h_std`` normalize the hand-state input; they default to identity and
    are set from training data by the policy.
    """

    def __init__(self, rng: np.random.Generator, z_dim: int = 64, fusion_dim: int = 64, grid: int = GRID,
                 n_tasks: int = N_TASKS, dtype=np.float32):
        self.z_dim, self.fusion_dim, self.grid, self.n_tasks = z_dim, fusion_dim, grid, n_tasks
        nd, nr = 2 * grid * grid, 3 * grid * grid
        n_in = fusion_dim + n_tasks + hm.N_PARAMS
        self.params = [
            glorot(rng, nd, fusion_dim, dtype), np.zeros(fusion_dim, dtype),
            glorot(rng, nr, fusion_dim, dtype), np.zeros(fusion_dim, dtype),
            glorot(rng, n_in, z_dim, dtype), np.zeros(z_dim, dtype),
        ]
        self.h_mean = np.zeros(hm.N_PARAMS, dtype)
        self.h_std = np.ones(hm.N_PARAMS, dtype)

    def config(self) -> dict:
        return {"z_dim": self.z_dim, "fusion_dim": self.fusion_dim, "grid": self.grid, "n_tasks": self.n_tasks}

    def normalize_h(self, h):
        return ((np.asarray(h) - self.h_mean) / self.h_std).astype(self.params[0].dtype)

    def one_hot(self, tokens):
        tokens = np.asarray(tokens, dtype=int).reshape(-1)
        if np.any((tokens < 0) | (tokens >= self.n_tasks)):
            raise ShapeMismatch(f"task token out of range [0, {self.n_tasks})")
        out = np.zeros((tokens.size, self.n_tasks), dtype=self.params[0].dtype)
        out[np.arange(tokens.size), tokens] = 1.0
        return out

    def forward(self, fd, fr, tokens, h_norm):
        wd, bd, wr, br, wz, bz = self.params
        fused = fd @ wd + bd + fr @ wr + br
        u = np.concatenate([fused, self.one_hot(tokens), h_norm], axis=1)
        return u @ wz + bz, (fd, fr, u)

    def backward(self, cache, gz):
        fd, fr, u = cache
        wz = self.params[4]
        gu = gz @ wz.T
        gf = gu[:, :self.fusion_dim]
        g_wz, g_bz = u.T @ gz, gz.sum(axis=0)
        return [fd.T @ gf, gf.sum(axis=0), fr.T @ gf, gf.sum(axis=0), g_wz, g_bz]

    def encode(self, depth, mask, rgb, tokens, h):
        """Batched encoding from raw frames and raw hand states."""
        fd, fr = pool_features(depth, mask, rgb, self.grid)
        return self.forward(fd, fr, tokens, self.normalize_h(h))[0]


def encode_context(encoder: ContextEncoder, depth, rgb, task_token: int, h_k) -> np.ndarray:
    """Single-frame embedding; ``depth`` is a DepthMap."""
    z = encoder.encode(depth.depth[None], depth.mask[None], np.asarray(rgb)[None], [task_token],
                       np.asarray(h_k)[None])
    return z[0]
