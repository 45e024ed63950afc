import json

import numpy as np
import pytest

from rangevio import cli, io
from rangevio.config import bundled_scenario, load_scenario
from rangevio.multi_robot import FrameTransform, NotReadyError, wrap_angle
from rangevio.rendezvous import message_at, peer_frame
from rangevio.scenario import run_scenario


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("rv")
    return out, run_scenario(bundled_scenario("rendezvous_demo"), out=out)


@pytest.mark.slow
def test_demo_writes_fused_trajectory_and_report(demo):
    out, res = demo
    for name in ("peer_fused.tum", "transform.json", "peer_groundtruth.tum", "own_messages.csv", "vir.tum"):
        assert (out / name).exists(), name
    rep = json.loads((out / "transform.json").read_text())
    assert rep["yaw_error_deg"] < 5.0 and rep["translation_error"] < 0.5
    fused = io.load_tum(out / "peer_fused.tum")
    assert len(fused) == len(io.load_tum(out / "peer_groundtruth.tum"))
    assert rep["fused_peer_error_rmse"] < 1.0


@pytest.mark.slow
def test_offline_mode_reproduces_scenario(demo, tmp_path):
    out, _ = demo
    assert cli.main(["rendezvous", "--own-messages", str(out / "own_messages.csv"),
                     "--peer-messages", str(out / "peer_messages.csv"), "--ranges", str(out / "peer_ranges.csv"),
                     "--peer-trajectory", str(out / "peer_vir.tum"), "--out", str(tmp_path)]) == 0
    online = json.loads((out / "transform.json").read_text())["estimated"]
    offline = json.loads((tmp_path / "transform.json").read_text())
    assert abs(float(wrap_angle(offline["yaw"] - online["yaw"]))) < 1e-9
    assert np.allclose(offline["t"], online["t"], atol=1e-9)
    assert (tmp_path / "peer_fused.tum").exists()


def test_peer_frame_is_inverse_of_config():
    cfg = load_scenario(bundled_scenario("rendezvous_demo"))
    T = peer_frame(cfg)
    fwd = FrameTransform(cfg.peer.frame_yaw, cfg.peer.frame_translation)
    assert np.allclose(T.compose(fwd).matrix(), np.eye(4), atol=1e-12)


@pytest.mark.slow
def test_message_before_fix_not_ready(demo):
    _, res = demo
    with pytest.raises(NotReadyError):
        message_at(res.vir, res.vir.trajectory.t[1])
