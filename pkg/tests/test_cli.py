import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from proto3d import formats
from proto3d.cli import main, read_config_file

TINY = """# small settings for fast runs
grid_resolution = 32 32 32
K_max = 16
mining_rounds = 1   # one mining round
top_n = 4
top_retrievals = 20
em_iters = 3
epochs = 5
eval_k = 3
pool_size = 20
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(TINY)
    assert main(["synth", "--seed", "7", "--scenes", "4", "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    state = workdir / "state"
    code = main(["em", "--config", str(workdir / "run.cfg"), "--dataset", str(workdir / "data"), "--iters", "1",
                 "--state", str(state)])
    assert code == 0
    return state


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read(), name
    for sub in cmp.common_dirs:
        _same_tree(os.path.join(a, sub), os.path.join(b, sub))


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("a = 1  # trailing\n\n# full line\nb=two words\n")
    assert read_config_file(p) == {"a": "1", "b": "two words"}
    p.write_text("no equals sign\n")
    with pytest.raises(Exception) as exc:
        read_config_file(p)
    assert "line 1" in str(exc.value)


def test_synth_rerun_identical(workdir, tmp_path):
    assert main(["synth", "--seed", "7", "--scenes", "4", "--out", str(tmp_path / "again")]) == 0
    _same_tree(str(workdir / "data"), str(tmp_path / "again"))
    assert formats.read_dataset_meta(str(tmp_path / "again"))["scenes"] == 4


def test_exit_codes(workdir, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2
    assert main(["eval", "--task", "map", "--state", "x", "--set", "nonsense=1"]) == 2
    assert "nonsense" in capsys.readouterr().err
    assert main(["eval", "--task", "map", "--state", "x", "--set", "detector_conf=2"]) == 2
    assert main(["em", "--dataset", str(tmp_path / "missing"), "--iters", "1", "--state", str(tmp_path / "s")]) == 1
    assert main(["em", "--iters", "1", "--state", str(tmp_path / "s")]) == 2  # no dataset given


def test_em_writes_iterations(trained):
    assert sorted(os.listdir(trained)) == ["config.json", "iter_00", "iter_01"]
    rep = json.loads((trained / "iter_01" / "report.json").read_text())
    assert rep["iteration"] == 1
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["K_max"] == 16 and cfg["grid_resolution"] == [32, 32, 32]


def test_em_resume_matches_straight_run(workdir, trained, tmp_path):
    resumed = tmp_path / "resumed"
    args = ["--config", str(workdir / "run.cfg"), "--dataset", str(workdir / "data"), "--state", str(resumed)]
    assert main(["em", "--iters", "0"] + args) == 0
    assert main(["em", "--iters", "1", "--resume"] + args) == 0
    _same_tree(str(trained), str(resumed))


@pytest.mark.parametrize("task", ["cluster", "retrieval", "map", "fewshot"])
def test_eval_tasks(workdir, trained, tmp_path, task):
    out = tmp_path / f"{task}.json"
    code = main(["eval", "--task", task, "--config", str(workdir / "run.cfg"), "--dataset", str(workdir / "data"),
                 "--state", str(trained), "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    assert res["task"] == task and 0.0 <= res["value"] <= 1.0 and res["n"] > 0


def test_lift_triangulate_parse_render(workdir, trained, tmp_path):
    scene = formats.scene_dir(str(workdir / "data"), 0)
    cfg = ["--config", str(workdir / "run.cfg")]
    assert main(["lift", "--scene", scene, "--out", str(tmp_path / "g.vxg"), "--occupancy",
                 str(tmp_path / "o.vxg")] + cfg) == 0
    grid = formats.read_voxel_grid(tmp_path / "g.vxg")
    occ = formats.read_voxel_grid(tmp_path / "o.vxg")
    assert grid.spec.resolution == (32, 32, 32) and occ.channels == 1
    assert set(np.unique(occ.data)) <= {0.0, 1.0, 2.0} and (occ.data == 2.0).any()

    assert main(["triangulate", "--scene", scene, "--out", str(tmp_path / "t.jsonl")] + cfg) == 0
    props = formats.read_proposals(tmp_path / "t.jsonl")
    _, gt = formats.read_scene(scene)
    assert len(props) >= 1 and len(gt.objects) >= 1

    assert main(["parse", "--scene", scene, "--state", str(trained), "--out", str(tmp_path / "p.json")] + cfg) == 0
    recs = json.loads((tmp_path / "p.json").read_text())
    assert all(set(r) == {"box", "prototype", "rotation_deg", "confidence"} for r in recs)

    assert main(["render", "--grid", str(tmp_path / "g.vxg"), "--occupancy", str(tmp_path / "o.vxg"), "--scene",
                 scene, "--view", "1", "--out", str(tmp_path / "r.png")] + cfg) == 0
    img = Image.open(tmp_path / "r.png")
    assert img.mode == "RGB" and np.asarray(img).dtype == np.uint8 and np.asarray(img).any()


def test_mine_dumps_pairs(workdir, tmp_path):
    out = tmp_path / "c.jsonl"
    assert main(["mine", "--config", str(workdir / "run.cfg"), "--dataset", str(workdir / "data"), "--rounds", "1",
                 "--out", str(out)]) == 0
    recs = formats.loads_jsonl(out.read_text())
    assert recs and {r["polarity"] for r in recs} == {"positive", "negative"}


def test_threads_do_not_change_results(workdir, tmp_path):
    dirs = []
    for n in (1, 8):
        d = tmp_path / f"t{n}"
        cmd = [sys.executable, "-m", "proto3d.cli", "em", "--config", str(workdir / "run.cfg"), "--dataset",
               str(workdir / "data"), "--iters", "1", "--state", str(d), "--threads", str(n)]
        subprocess.run(cmd, check=True, capture_output=True)
        dirs.append(d)
    _same_tree(str(dirs[0]), str(dirs[1]))
