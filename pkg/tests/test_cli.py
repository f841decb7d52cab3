import io

import numpy as np
import pytest

from latticeflow.cli import ConfigError, load_config, main
from latticeflow.data import list_pairs, read_pair, write_pair
from latticeflow.metrics import parse_keyvalue
from latticeflow.model import SceneFlowNet, read_checkpoint, write_checkpoint

SMALL = """\
# tiny network for fast CLI runs
data.num_objects = 2
data.points = 200
net.num_levels = 3
net.widths = 4,5,6
net.corr_levels = 1,2
train.steps = 4
train.augment_steps = 2
"""


def run(*argv):
    buf = io.StringIO()
    code = main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture
def dataset(tmp_path, small_cfg):
    out = tmp_path / "data"
    code, _ = run("gen", "--config", small_cfg, "--out", out, "--pairs", 2, "--seed", 7)
    assert code == 0
    return out


def test_selftest_quick_passes():
    code, text = run("selftest", "--quick")
    assert code == 0, text
    assert "6/6 suites passed" in text and "FAIL" not in text


def test_gen_is_deterministic(tmp_path, small_cfg):
    a = run("gen", "--config", small_cfg, "--out", tmp_path / "a", "--pairs", 3)
    b = run("gen", "--config", small_cfg, "--out", tmp_path / "b", "--pairs", 3)
    assert a == b and a[0] == 0
    files = list_pairs(tmp_path / "a")
    assert [f.name for f in files] == ["pair_0000.scene", "pair_0001.scene", "pair_0002.scene"]
    assert read_pair(files[0]).n1 == 200
    c = run("gen", "--config", small_cfg, "--out", tmp_path / "c", "--pairs", 1, "--points", 300, "--density-mult", 2)
    assert c[0] == 0 and read_pair(tmp_path / "c" / "pair_0000.scene").n1 == 300


def test_eval_with_perfect_predictions(dataset):
    for f in list_pairs(dataset):
        pair = read_pair(f)
        pair.pred_flow = pair.gt_flow.copy()
        write_pair(f, pair)
    code, text = run("eval", "--data", dataset, "--format", "kv")
    assert code == 0
    kv = parse_keyvalue(text)
    assert kv["epe3d"] == 0.0 and kv["acc3d_strict"] == 1.0 and kv["acc3d_relax"] == 1.0
    assert kv["outliers3d"] == 0.0 and kv["epe2d"] == 0.0 and kv["acc2d"] == 1.0
    assert kv["num_points"] == 400


def test_train_then_eval_is_reproducible(tmp_path, small_cfg, dataset):
    outs = []
    for name in ("m1", "m2"):
        code, text = run("train", "--config", small_cfg, "--data", dataset, "--heldout", dataset,
                         "--out", tmp_path / name, "--seed", 3)
        assert code == 0, text
        outs.append(text)
    assert outs[0] == outs[1]
    assert "steps=4" in outs[0] and "heldout_epe3d=" in outs[0]
    ckpt = tmp_path / "m1" / "model.ckpt"
    assert (tmp_path / "m1" / "model.ckpt").read_bytes() == (tmp_path / "m2" / "model.ckpt").read_bytes()
    assert read_checkpoint(ckpt).cfg.widths == (4, 5, 6)
    assert load_config((tmp_path / "m1" / "run.cfg").read_text()).net["widths"] == "4,5,6"
    code, text = run("eval", "--checkpoint", ckpt, "--data", dataset, "--out", tmp_path / "rep")
    assert code == 0
    assert "epe3d" in text and (tmp_path / "rep" / "report.txt").exists()
    assert run("eval", "--checkpoint", ckpt, "--data", dataset) == (code, text)


def test_train_with_ablation(tmp_path, small_cfg, dataset):
    code, _ = run("train", "--config", small_cfg, "--data", dataset, "--out", tmp_path / "m", "--ablation", "one_corr",
                  "--steps", 1)
    assert code == 0
    assert read_checkpoint(tmp_path / "m" / "model.ckpt").cfg.one_corr


def test_bench_reports_counts_and_timings(tmp_path):
    code, text = run("bench", "--points", "1024,2048", "--repeats", 1, "--out", tmp_path)
    assert code == 0, text
    kv = dict(line.split("=", 1) for line in (tmp_path / "bench.txt").read_text().splitlines())
    for lvl in range(4):
        assert int(kv[f"n2048.occupied.level{lvl}"]) >= int(kv[f"n1024.occupied.level{lvl}"]) * 0.95
    assert float(kv["n1024.time_ms.splat0"]) > 0


# -- errors and exit codes -------------------------------------------------------

def test_usage_errors_exit_one(tmp_path):
    assert run()[0] == 1
    assert run("fly")[0] == 1
    assert run("gen", "--bogus")[0] == 1
    assert run("gen")[0] == 1  # no --out
    assert run("gen", "--out", tmp_path, "--threads", 0)[0] == 1
    assert run("train", "--ablation", "no_wheels")[0] == 1
    assert run("eval")[0] == 1


def test_data_errors_exit_two(tmp_path, dataset):
    assert run("eval", "--data", tmp_path / "missing")[0] == 2
    assert run("eval", "--data", dataset)[0] == 2  # no checkpoint, no stored predictions
    assert run("gen", "--config", tmp_path / "nope.cfg", "--out", tmp_path)[0] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("data.num_objects = lots\n")
    assert run("gen", "--config", bad, "--out", tmp_path / "x")[0] == 2
    bad.write_text("net.colour = red\n")
    assert run("gen", "--config", bad, "--out", tmp_path / "x")[0] == 2
    f = list_pairs(dataset)[0]
    f.write_bytes(f.read_bytes()[:-10])
    assert run("eval", "--data", dataset)[0] == 2
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert run("eval", "--checkpoint", tmp_path / "junk.ckpt", "--data", tmp_path / "data")[0] == 2


def test_non_finite_prediction_exits_three(tmp_path, dataset):
    net = SceneFlowNet(load_config(SMALL).network(base_scale=5.0))
    net.head_b.data[...] = np.nan
    write_checkpoint(tmp_path / "nan.ckpt", net)
    assert run("eval", "--checkpoint", tmp_path / "nan.ckpt", "--data", dataset)[0] == 3


def test_config_parsing():
    run_cfg = load_config(SMALL)
    assert run_cfg.spec.num_objects == 2 and run_cfg.data["points"] == 200
    assert run_cfg.train["steps"] == 4
    assert load_config("data.size_range = 0.2, 0.5\ndata.surfaces = box,sphere\n").spec.surfaces == ("box", "sphere")
    assert load_config("data.ground_height = 0.3\n").data["ground_height"] == 0.3
    with pytest.raises(ConfigError):
        load_config("train.steps = many\n")
    with pytest.raises(ConfigError):
        load_config("just words\n")
