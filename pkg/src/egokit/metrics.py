"""Trajectory metrics: MPJPE, MPVE, MWTE (cm), their Procrustes-aligned variants, and MRE (rad)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import handmodel as hm
from . import rotmath
from .errors import Degenerate, LengthMismatch, MissingTrack

CM = 100.0
METRICS = ("mpjpe", "mpve", "mpjpe_pa", "mpve_pa", "mwte", "mre")


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def mean_point_error(pred, gt) -> float:
    """Mean Euclidean distance over all timesteps and points, in centimeters."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)) * CM)


def mpjpe(pred_joints, gt_joints) -> float:
    return mean_point_error(pred_joints, gt_joints)


def mpve(pred_verts, gt_verts) -> float:
    return mean_point_error(pred_verts, gt_verts)


def mwte(pred_trans, gt_trans) -> float:
    """Mean wrist translation error; inputs (T, 3)."""
    return mean_point_error(pred_trans, gt_trans)


def fit_similarity(p, q) -> SimilarityTransform:
    """Least-squares (s, R, t) minimizing sum ||s R p_i + t - q_i||^2 (Umeyama)."""
    p, q = _pair(p, q)
    p = p.reshape(-1, 3)
    q = q.reshape(-1, 3)
    mu_p, mu_q = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mu_p, q - mu_q
    var_p = np.sum(pc**2) / len(p)
    if len(p) < 3 or var_p < 1e-20:
        raise Degenerate("need at least three distinct points")
    cov = qc.T @ pc / len(p)
    u, d, vt = np.linalg.svd(cov)
    sv = np.linalg.svd(pc, compute_uv=False)
    if sv[1] < 1e-9 * sv[0]:
        raise Degenerate("points are collinear")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = (u * sign) @ vt
    s = float(np.sum(d * sign) / var_p)
    return SimilarityTransform(s, r, mu_q - s * r @ mu_p)


def aligned(pred, gt):
    """Prediction mapped by one similarity fit over the whole stacked trajectory."""
    pred, gt = _pair(pred, gt)
    tf = fit_similarity(pred.reshape(-1, 3), gt.reshape(-1, 3))
    return tf.apply(pred.reshape(-1, 3)).reshape(pred.shape)


def mpjpe_pa(pred_joints, gt_joints) -> float:
    return mean_point_error(aligned(pred_joints, gt_joints), gt_joints)


def mpve_pa(pred_verts, gt_verts) -> float:
    return mean_point_error(aligned(pred_verts, gt_verts), gt_verts)


def mre(pred_params, gt_params) -> float:
    """Mean geodesic error over the 16 joint rotations (wrist + 15 finger joints) and all steps."""
    pred, gt = _pair(pred_params, gt_params)
    ra = hm.joint_rotations(pred)
    rb = hm.joint_rotations(gt)
    return float(np.mean(rotmath.geodesic_distance(ra, rb)))


def trajectory_metrics(asset, pred_params, gt_params) -> dict:
    pred, gt = _pair(pred_params, gt_params)
    pj, pv = hm.forward(asset, pred)
    gj, gv = hm.forward(asset, gt)
    return {
        "mpjpe": mpjpe(pj, gj),
        "mpve": mpve(pv, gv),
        "mpjpe_pa": mpjpe_pa(pj, gj),
        "mpve_pa": mpve_pa(pv, gv),
        "mwte": mwte(pred[:, hm.TRANS], gt[:, hm.TRANS]),
        "mre": mre(pred, gt),
    }


def aggregate(rows: list[dict], weights) -> dict:
    """Weighted mean of metric rows (weights = frame counts)."""
    w = np.asarray(weights, dtype=float)
    return {m: float(np.sum(np.asarray([r[m] for r in rows]) * w) / w.sum()) for m in METRICS}


def evaluate_pairs(asset, pairs, group_of=None) -> dict:
    """``pairs``: {episode id: (pred (T,109), gt (T,109))}. Rows per group plus an aggregate.

    Episode rows are averaged into group rows frame-weighted, and the aggregate is
    the frame-weighted mean of the group rows.
    """
    group_of = group_of or (lambda _: "all")
    per_episode = {}
    for eid in sorted(pairs):
        pred, gt = pairs[eid]
        per_episode[eid] = (trajectory_metrics(asset, pred, gt), len(gt))
    groups: dict[str, list] = {}
    for eid, (row, n) in per_episode.items():
        groups.setdefault(group_of(eid), []).append((row, n))
    table = {}
    for g in sorted(groups):
        rows, ns = zip(*groups[g])
        table[g] = dict(aggregate(list(rows), ns), frames=int(sum(ns)), episodes=len(rows))
    frames = [table[g]["frames"] for g in table]
    table["aggregate"] = dict(aggregate([table[g] for g in sorted(groups)], frames), frames=int(sum(frames)),
                              episodes=len(per_episode))
    return table


UNITS = {"mpjpe": "cm", "mpve": "cm", "mpjpe_pa": "cm", "mpve_pa": "cm", "mwte": "cm", "mre": "rad"}


def write_report(table: dict, out_dir) -> None:
    """report.tsv (human-readable) and report.json (same numbers, structured)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["group", "frames", "episodes"] + [f"{m}[{UNITS[m]}]" for m in METRICS]
    lines = ["\t".join(header)]
    for g, row in table.items():
        lines.append("\t".join([g, str(row["frames"]), str(row["episodes"])] + [f"{row[m]:.6f}" for m in METRICS]))
    (out_dir / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    doc = {"units": UNITS, "metrics": list(METRICS), "rows": table}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def require_track(pairs_expected, available):
    missing = sorted(set(pairs_expected) - set(available))
    if missing:
        raise MissingTrack(f"no predicted trajectory for episodes: {', '.join(missing)}")
