import json

import numpy as np
import pytest

from egokit import cli
from egokit import dataset as ds
from egokit import fmpolicy as fm
from egokit import renderer as rd
from egokit import tof


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(root), "--seed", "3", "--episodes", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps({"hidden": [32, 32], "z_dim": 16, "batch_size": 8, "log_every": 1000}))
    return path


def _args(*argv):
    return cli.build_parser().parse_args(list(argv))


def test_precedence_flags_over_config_over_defaults(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"steps": 77, "lr": 0.01}))
    cfg = cli.resolve_config(_args("train-fm", "--dataset", "d", "--out", "o", "--seed", "1",
                                   "--config", str(cfg_file), "--steps", "5"))
    assert cfg["steps"] == 5
    assert cfg["lr"] == 0.01
    assert cfg["batch_size"] == 64


def test_flow_config_from_flags():
    assert cli.flow_config({"n_integration_steps": 4}).delta == pytest.approx(0.25)
    assert cli.flow_config({"delta": 0.05}).n_steps == 20
    assert cli.flow_config({}).n_steps == 10


def test_seed_required_for_training(corpus, tmp_path):
    assert cli.main(["train-fm", "--dataset", str(corpus), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["train-retarget", "--out", str(tmp_path / "y")]) == 1


def test_missing_dataset_is_a_validation_error(tmp_path):
    assert cli.main(["train-fm", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
                     "--seed", "0"]) == 1


def test_inconsistent_integration_flags(corpus, tmp_path, small_config):
    rc = cli.main(["train-fm", "--dataset", str(corpus), "--out", str(tmp_path / "o"), "--seed", "0",
                   "--delta", "0.1", "--n-integration-steps", "9", "--config", str(small_config)])
    assert rc == 1


def test_gen_data_is_idempotent(corpus, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--out", str(again), "--seed", "3", "--episodes", "2"]) == 0
    for eid in ds.list_episodes(corpus):
        a = json.loads((corpus / "episodes" / eid / "manifest.json").read_text())
        b = json.loads((again / "episodes" / eid / "manifest.json").read_text())
        assert a == b
    assert json.loads((again / "config.json").read_text())["seed"] == 3


def test_train_generate_evaluate_round(corpus, tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("EGOKIT_THREADS", "1")
    run = tmp_path / "fm"
    assert cli.main(["train-fm", "--dataset", str(corpus), "--out", str(run), "--seed", "0", "--steps", "12",
                     "--config", str(small_config)]) == 0
    curve = (run / "loss_curve.tsv").read_text().splitlines()
    assert curve[0] == "step\tloss" and len(curve) == 13
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["steps"] == 12 and echoed["hidden"] == [32, 32]

    for stride in ("1", "16"):
        out = tmp_path / f"gen{stride}"
        assert cli.main(["generate", "--dataset", str(corpus), "--ckpt", str(run / "policy.fmck"),
                         "--out", str(out), "--stride", stride]) == 0
        for eid in ds.list_episodes(corpus):
            assert len(ds.read_episode(out, eid)) == len(ds.read_episode(corpus, eid)) - 1
    report = tmp_path / "rep"
    assert cli.main(["evaluate", "--dataset", str(corpus), "--pred", str(tmp_path / "gen1"),
                     "--out", str(report)]) == 0
    doc = json.loads((report / "report.json").read_text())
    assert "aggregate" in doc["rows"] and doc["rows"]["aggregate"]["episodes"] == 2


def test_resume_matches_uninterrupted_run(corpus, tmp_path, small_config, monkeypatch):
    straight, first, resumed = tmp_path / "s", tmp_path / "a", tmp_path / "r"
    base = ["--dataset", str(corpus), "--seed", "4", "--config", str(small_config), "--steps", "10"]
    assert cli.main(["train-fm", "--out", str(straight)] + base) == 0

    real_train = fm.train
    calls = []

    def interrupted(*a, **kw):
        if calls:
            raise KeyboardInterrupt
        calls.append(1)
        return real_train(*a, **kw)

    monkeypatch.setattr(cli.fm, "train", interrupted)
    with pytest.raises(KeyboardInterrupt):
        cli.main(["train-fm", "--out", str(first), "--save-every", "4"] + base)
    monkeypatch.setattr(cli.fm, "train", real_train)
    _, state, _ = fm.load_checkpoint(first / "policy.fmck")
    assert state.step == 4

    assert cli.main(["train-fm", "--out", str(resumed), "--ckpt", str(first / "policy.fmck")] + base) == 0
    ref, _, _ = fm.load_checkpoint(straight / "policy.fmck")
    got, _, _ = fm.load_checkpoint(resumed / "policy.fmck")
    for a, b in zip(ref.params, got.params):
        np.testing.assert_array_equal(a, b)
    curve = (resumed / "loss_curve.tsv").read_text().splitlines()
    assert curve[1].startswith("5\t") and curve[-1].startswith("10\t")


def test_nonfinite_checkpoint_exits_with_numerical_code(corpus, tmp_path, small_config):
    run = tmp_path / "fm"
    assert cli.main(["train-fm", "--dataset", str(corpus), "--out", str(run), "--seed", "0", "--steps", "1",
                     "--config", str(small_config)]) == 0
    pol, state, _ = fm.load_checkpoint(run / "policy.fmck")
    pol.net.params[0][...] = np.nan
    fm.save_checkpoint(run / "bad.fmck", pol, state)
    assert cli.main(["generate", "--dataset", str(corpus), "--ckpt", str(run / "bad.fmck"),
                     "--out", str(tmp_path / "g")]) == 2


def _write_decoded(root, gt_root, stride, sigma, seed):
    for eid in ds.list_episodes(gt_root):
        e = ds.read_episode(gt_root, eid)
        traj = e.hand.astype(float)
        policy = tof.OraclePolicy(traj, 16, sigma_t=sigma, sigma_r=0.0)
        out = tof.decode_trajectory(policy, lambda i: i, traj[0], len(traj), stride, np.random.default_rng(seed))
        ds.write_episode(root, ds.Episode(eid, e.task_token, e.instruction, out.astype(np.float32)))


def test_closed_loop_beats_open_loop_on_noisy_estimates(corpus, tmp_path):
    rows = {}
    for stride in (1, 16):
        pred = tmp_path / f"pred{stride}"
        _write_decoded(pred, corpus, stride, sigma=0.01, seed=0)
        rep = tmp_path / f"rep{stride}"
        assert cli.main(["evaluate", "--dataset", str(corpus), "--pred", str(pred), "--out", str(rep)]) == 0
        rows[stride] = json.loads((rep / "report.json").read_text())["rows"]["aggregate"]
    assert rows[1]["mwte"] < rows[16]["mwte"]


def test_self_evaluation_row_is_zero(corpus, tmp_path):
    pred = tmp_path / "self"
    for eid in ds.list_episodes(corpus):
        e = ds.read_episode(corpus, eid)
        ds.write_episode(pred, ds.Episode(eid, e.task_token, e.instruction, e.hand[1:]))
    table = cli.evaluate_dirs(corpus, pred)
    for m in ("mpjpe", "mpve", "mwte", "mre"):
        assert table["aggregate"][m] == 0.0


def test_evaluate_reports_missing_track(corpus, tmp_path):
    pred = tmp_path / "partial"
    eid = ds.list_episodes(corpus)[0]
    e = ds.read_episode(corpus, eid)
    ds.write_episode(pred, ds.Episode(eid, e.task_token, e.instruction, e.hand[1:]))
    assert cli.main(["evaluate", "--dataset", str(corpus), "--pred", str(pred), "--out", str(tmp_path / "r")]) == 1


def test_static_policy_generation(corpus, tmp_path):
    out = tmp_path / "static"
    assert cli.main(["generate", "--dataset", str(corpus), "--out", str(out), "--policy", "static"]) == 0
    for eid in ds.list_episodes(corpus):
        gt = ds.read_episode(corpus, eid).hand
        np.testing.assert_allclose(ds.read_episode(out, eid).hand, np.tile(gt[0], (len(gt) - 1, 1)), atol=1e-6)


def test_render_depth(corpus, tmp_path):
    for extra in ([], ["--dataset", str(corpus)]):
        out = tmp_path / f"rd{len(extra)}"
        assert cli.main(["render-depth", "--out", str(out)] + extra) == 0
        maps = sorted(out.glob("*.dpth"))
        assert maps and len(maps) == len(sorted(out.glob("*.pgm")))
        dm = rd.load_depth(maps[0])
        vals = dm.depth[dm.mask]
        assert vals.size and vals.min() > 0 and vals.max() <= 2.0
