"""egokit command-line interface.

Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure.
Config precedence: flags > --config JSON file > built-in defaults. The
effective config is written to ``<out>/config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import fmpolicy as fm
from . import handmodel as hm
from . import metrics
from . import renderer as rd
from . import retarget as rt
from . import tof
from .errors import EgoKitError, NumericalError, ValidationError
from .nn import AdamWConfig

log = logging.getLogger("egokit")

DEFAULTS = {
    "gen-data": {"seed": 0, "episodes": 64, "max_len": ds.MAX_CLIP_LEN},
    "train-fm": {
        "seed": None, "steps": 20000, "batch_size": 64, "lr": 3e-4, "warmup_ratio": 0.05, "weight_decay": 1e-5,
        "beta1": 0.95, "beta2": 0.999, "adam_eps": 1e-8, "grad_clip": 1.0, "chunk_len": 16, "z_dim": 64,
        "hidden": [512, 512, 512], "n_integration_steps": 10, "delta": None, "save_every": 0, "log_every": 500,
    },
    "train-retarget": {
        "seed": None, "pairs": 10000, "steps": 8000, "stage1_budget": 30000, "batch_size": 64, "lr": 1e-3,
        "window": 100, "tol": 1e-3, "patience": 3, "max_wrist_angle": float(np.pi / 3),
    },
    "generate": {"seed": 0, "stride": 1, "n_integration_steps": None, "delta": None, "policy": "flow"},
    "evaluate": {},
    "render-depth": {"seed": 0, "episode": None, "max_depth": 2.0},
}

REQUIRED = {
    "gen-data": ("out",),
    "train-fm": ("dataset", "out", "seed"),
    "train-retarget": ("out", "seed"),
    "generate": ("dataset", "out"),
    "evaluate": ("dataset", "pred", "out"),
    "render-depth": ("out",),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egokit", description="Egocentric hand-motion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file with config overrides")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("gen-data", "synthesize and render the episode dataset")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--max-len", dest="max_len", type=int)

    sp = add("train-fm", "train the flow-matching policy")
    sp.add_argument("--dataset")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ckpt", help="resume from this checkpoint")
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--n-integration-steps", dest="n_integration_steps", type=int)
    sp.add_argument("--save-every", dest="save_every", type=int)

    sp = add("train-retarget", "train the inverse retargeting network")
    sp.add_argument("--dataset", help="paired-sample store (generated when absent)")
    sp.add_argument("--steps", type=int, help="stage-2 steps after the gate flips")
    sp.add_argument("--pairs", type=int)

    sp = add("generate", "decode trajectories with TOF")
    sp.add_argument("--dataset")
    sp.add_argument("--ckpt")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--n-integration-steps", dest="n_integration_steps", type=int)
    sp.add_argument("--policy", choices=["flow", "static"])

    sp = add("evaluate", "metrics report for decoded trajectories")
    sp.add_argument("--dataset", help="ground-truth store")
    sp.add_argument("--pred", help="store of decoded trajectories")

    sp = add("render-depth", "render depth maps (toy scene when --dataset is absent)")
    sp.add_argument("--dataset")
    sp.add_argument("--episode")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--config {args.config}: {exc}") from exc
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        cfg[k] = v
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"{args.command}: missing required settings: {', '.join(missing)}")
    return cfg


def flow_config(cfg: dict, base: fm.FlowConfig | None = None) -> fm.FlowConfig:
    n, delta = cfg.get("n_integration_steps"), cfg.get("delta")
    base = base or fm.FlowConfig()
    if n is None and delta is None:
        n, delta = base.n_steps, base.delta
    elif n is None:
        n = int(round(1.0 / delta))
    elif delta is None:
        delta = 1.0 / n
    kw = dict(tau_alpha=base.tau_alpha, tau_beta=base.tau_beta, min_gap=base.min_gap,
              chunk_len=cfg.get("chunk_len", base.chunk_len))
    kw["min_gap"] = min(kw["min_gap"], delta)
    return fm.FlowConfig(delta=delta, n_steps=n, **kw)


def _echo(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str), encoding="utf-8")


def _existing_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(out, cfg)
    asset = hm.toy_asset()
    episodes = ds.generate_corpus(asset, cfg["episodes"], seed=cfg["seed"], max_len=cfg["max_len"])
    ds.write_dataset(out, episodes)
    log.info("wrote %d episodes to %s", len(episodes), out)


def load_samples(root, l: int) -> ds.TrainingSamples:
    parts = [ds.make_training_samples(e, l) for e in ds.read_dataset(root) if len(e) > l]
    if not parts:
        raise ValidationError(f"{root}: no episode longer than the chunk length {l}")
    return ds.TrainingSamples.concat(parts)


def _write_curve(path: Path, losses, start: int) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for i, loss in enumerate(losses):
            fh.write(f"{start + i + 1}\t{loss:.8g}\n")


def cmd_train_fm(cfg: dict) -> None:
    root = _existing_dir(cfg["dataset"], "dataset")
    out = Path(cfg["out"])
    _echo(out, cfg)
    ckpt_path = out / "policy.fmck"
    curve_path = out / "loss_curve.tsv"
    if cfg.get("ckpt"):
        policy, state, _ = fm.load_checkpoint(cfg["ckpt"])
        if state is None:
            raise ValidationError(f"{cfg['ckpt']} has no optimizer state to resume from")
        samples = load_samples(root, policy.chunk_len)
        data = fm.prepare_samples(policy, samples, fit_normalizers=False)
    else:
        flow = flow_config(cfg)
        policy = fm.FlowPolicy.create(cfg["seed"], flow, cfg["z_dim"], tuple(cfg["hidden"]))
        samples = load_samples(root, policy.chunk_len)
        data = fm.prepare_samples(policy, samples)
        opt = AdamWConfig(lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["adam_eps"],
                          weight_decay=cfg["weight_decay"], warmup_ratio=cfg["warmup_ratio"], total_steps=cfg["steps"])
        state = fm.init_train_state(policy, opt, cfg["seed"] + 1, cfg["batch_size"], cfg["grad_clip"])
    if not cfg.get("ckpt") or not curve_path.exists():
        curve_path.write_text("step\tloss\n", encoding="utf-8")
    log.info("training on %d samples from step %d to %d", len(data), state.step, cfg["steps"])
    t0 = time.time()
    every = cfg.get("save_every") or 0
    while state.step < cfg["steps"]:
        n = cfg["steps"] - state.step
        if every:
            n = min(n, every - state.step % every)
        start = state.step
        fm.train(policy, data, state, n, log=log.info, log_every=cfg["log_every"])
        _write_curve(curve_path, state.losses[-n:], start)
        state.losses.clear()
        fm.save_checkpoint(ckpt_path, policy, state)
    fm.save_checkpoint(ckpt_path, policy, state)
    log.info("done in %.0f s, checkpoint %s", time.time() - t0, ckpt_path)


def cmd_train_retarget(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(out, cfg)
    asset = hm.toy_asset()
    if cfg.get("dataset"):
        ep = ds.read_episode(_existing_dir(cfg["dataset"], "pair store"), "pairs")
        hands, joints = ep.hand.astype(float), ep.joints.astype(float)
    else:
        hands, joints = rt.make_pairs(asset, cfg["pairs"], seed=cfg["seed"], max_wrist_angle=cfg["max_wrist_angle"])
        ds.write_episode(out / "pairs", ds.Episode("pairs", 0, "paired samples", hands.astype(np.float32),
                                                   joints=joints.astype(np.float32)))
    net = rt.RetargetNet(np.random.default_rng(cfg["seed"]))
    tcfg = rt.TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], stage1_budget=cfg["stage1_budget"],
                          stage2_steps=cfg["steps"], window=cfg["window"], tol=cfg["tol"],
                          patience=cfg["patience"], seed=cfg["seed"] + 1)
    res = rt.train_gated(net, asset, hands, joints, tcfg, log=log.info)
    rt.save_checkpoint(out / "retarget.imrt", net, {"transition_step": res.gate.transition_step})
    with open(out / "loss_curve.tsv", "w", encoding="utf-8") as fh:
        fh.write("step\tsigma\tl1\tl2\trecon\n")
        for row in res.losses:
            fh.write("\t".join(f"{x:.8g}" if isinstance(x, float) else str(x) for x in row) + "\n")
    log.info("gate flipped at step %s", res.gate.transition_step)


def episode_context(e: ds.Episode):
    def context(i):
        return (e.depth_map(i), e.rgb[i], e.task_token)
    return context


def cmd_generate(cfg: dict) -> None:
    root = _existing_dir(cfg["dataset"], "dataset")
    out = Path(cfg["out"])
    _echo(out, cfg)
    if cfg["policy"] == "static":
        policy = tof.StaticPolicy()
    else:
        if not cfg.get("ckpt"):
            raise ValidationError("generate: --ckpt is required for the flow policy")
        policy, _, _ = fm.load_checkpoint(cfg["ckpt"])
        policy.cfg = flow_config(cfg, policy.cfg)
    for eid in ds.list_episodes(root):
        e = ds.read_episode(root, eid)
        rng = np.random.default_rng([cfg["seed"], len(eid)] + [ord(c) for c in eid])
        traj = tof.decode_trajectory(policy, episode_context(e), e.hand[0].astype(float), len(e), cfg["stride"], rng)
        ds.write_episode(out, ds.Episode(eid, e.task_token, e.instruction, traj.astype(np.float32)))
    log.info("decoded %d episodes into %s", len(ds.list_episodes(out)), out)


def evaluate_dirs(gt_root, pred_root, asset=None) -> dict:
    asset = asset or hm.toy_asset()
    gt_ids = ds.list_episodes(gt_root)
    metrics.require_track(gt_ids, ds.list_episodes(pred_root))
    pairs, task = {}, {}
    for eid in gt_ids:
        gt = ds.read_episode(gt_root, eid)
        pred = ds.read_episode(pred_root, eid)
        target = gt.hand[1:].astype(float)
        if len(pred) != len(target):
            raise ValidationError(f"episode {eid}: {len(pred)} decoded steps, expected {len(target)}")
        pairs[eid] = (pred.hand.astype(float), target)
        task[eid] = gt.task
    return metrics.evaluate_pairs(asset, pairs, group_of=task.get)


def cmd_evaluate(cfg: dict) -> None:
    gt_root = _existing_dir(cfg["dataset"], "dataset")
    pred_root = _existing_dir(cfg["pred"], "prediction store")
    out = Path(cfg["out"])
    _echo(out, cfg)
    table = evaluate_dirs(gt_root, pred_root)
    metrics.write_report(table, out)
    sys.stdout.write((out / "report.tsv").read_text(encoding="utf-8"))


def cmd_render_depth(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(out, cfg)
    asset = hm.toy_asset()
    if cfg.get("dataset"):
        root = _existing_dir(cfg["dataset"], "dataset")
        eid = cfg.get("episode") or ds.list_episodes(root)[0]
        e = ds.read_episode(root, eid)
        if e.object_points is None or e.extrinsics is None:
            raise ValidationError(f"episode {eid} has no scene geometry to render")
    else:
        e = ds.synthesize_episode(ds.SceneSpec.sample(cfg["seed"], 0), asset, episode_id="toy")
    _, verts = hm.forward(asset, e.hand.astype(float))
    obj_h = rd.homogeneous(e.object_points)
    eye = rd.CameraExtrinsics.identity()
    lo, hi = np.inf, -np.inf
    for k in range(len(e)):
        obj_c = (e.extrinsics_at(k).T_cw @ obj_h.T).T
        dm = rd.render_depth(e.intrinsics, eye, [obj_c, rd.homogeneous(verts[k])])
        dm.depth[dm.mask] = np.minimum(dm.depth[dm.mask], np.float32(cfg["max_depth"]))
        rd.save_depth(dm, out / f"{k:06d}.dpth")
        (out / f"{k:06d}.pgm").write_bytes(rd.depth_to_pgm(dm, cfg["max_depth"]))
        if dm.mask.any():
            lo, hi = min(lo, float(dm.depth[dm.mask].min())), max(hi, float(dm.depth[dm.mask].max()))
    log.info("rendered %d depth maps, range [%.3f, %.3f] m", len(e), lo, hi)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-fm": cmd_train_fm,
    "train-retarget": cmd_train_retarget,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "render-depth": cmd_render_depth,
}


def _thread_limit():
    n = os.environ.get("EGOKIT_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(n))
    except ValueError as exc:
        raise ValidationError(f"EGOKIT_THREADS must be an integer, got {n!r}") from exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        limiter = _thread_limit()
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
        if limiter is not None:
            limiter.restore_original_limits()
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except (EgoKitError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
