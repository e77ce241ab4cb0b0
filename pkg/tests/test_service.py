import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import random_codebooks
from umgen.core import Profile, sequence_to_json
from umgen.model.bundle import ModelBundle
from umgen.model.config import ModelConfig
from umgen.model.network import init_params
from umgen.service import SCHEMA_VERSION, create_app
from umgen.tokenizer import RANGES, detokenize_scalar, tokenize_scalar


@pytest.fixture(scope="module")
def client():
    prof = Profile.desk(map_codebook=48, image_codebook=48, d_model=32,
                        layers_ca_hist=1, layers_ca_env=1, layers_tar_causal=1,
                        layers_tar_bidir=1, layers_oar=1, block_size=4)
    from umgen.trainer import fit_codebooks_from_dataset
    from umgen.world import build_world, simulate_sequence
    seqs = [simulate_sequence(build_world(ws), i, 10, prof)
            for ws in range(3) for i in range(2)]
    map_cb, img_cb = fit_codebooks_from_dataset(seqs, prof, iters=10)
    params = init_params(ModelConfig.from_profile(prof), seed=1, init_std=0.05)
    bundle = ModelBundle.create(prof, params, map_cb, img_cb)
    return TestClient(create_app(bundle)), prof, seqs


def _quantized(value, attr, bins):
    r = RANGES[attr]
    return detokenize_scalar(tokenize_scalar(value, r, bins), r, bins)


def test_create_sampled_session(client):
    c, prof, _ = client
    r = c.post("/api/session", json={"seed": 1, "init": "sampled"})
    assert r.status_code == 201
    body = r.json()
    assert body["schema_version"] == SCHEMA_VERSION
    assert "frame" in body and "session_id" in body
    assert len(body["frame"]["tokens"]) == 195 or len(body["frame"]["tokens"]) > 0


def test_create_session_with_inline_frames(client):
    c, prof, seqs = client
    frames = sequence_to_json(seqs[0])["frames"][:2]
    r = c.post("/api/session", json={"seed": 0, "init": frames})
    assert r.status_code == 201


def test_step_with_ego_override_quantized_fidelity(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 2, "init": "sampled"}).json()["session_id"]
    r = c.post(f"/api/session/{sid}/step",
               json={"ego": {"dx": 1.0, "dy": 0.0, "dtheta": 0.1}})
    assert r.status_code == 200
    ego = r.json()["frame"]["ego_action"]
    assert ego["dx"] == pytest.approx(_quantized(1.0, "dx", prof.bins))
    assert ego["dy"] == pytest.approx(_quantized(0.0, "dy", prof.bins))
    assert ego["dtheta"] == pytest.approx(_quantized(0.1, "dtheta", prof.bins))


def test_step_agent_override_cut_in(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 3, "init": "sampled"}).json()["session_id"]
    r = c.post(f"/api/session/{sid}/step",
               json={"agents": [{"slot": 2, "vx": 3.0, "vy": -1.0}]})
    assert r.status_code == 200
    agent = r.json()["frame"]["agents"][2]
    assert agent["vx"] == pytest.approx(_quantized(3.0, "vx", prof.bins))
    assert agent["vy"] == pytest.approx(_quantized(-1.0, "vy", prof.bins))
    assert agent["active"] is True


def test_model_chosen_action_without_ego_field(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 4, "init": "sampled"}).json()["session_id"]
    r = c.post(f"/api/session/{sid}/step", json={})
    assert r.status_code == 200
    assert r.json()["frame_index"] >= 1


def test_sessions_deterministic_and_isolated(client):
    c, prof, _ = client
    sids = [c.post("/api/session", json={"seed": 9, "init": "sampled"})
            .json()["session_id"] for _ in range(2)]
    seq_a = [c.post(f"/api/session/{sids[0]}/step", json={}).json()["frame"]["tokens"]
             for _ in range(3)]
    # interleave a different session; must not perturb the first
    other = c.post("/api/session", json={"seed": 77, "init": "sampled"}).json()["session_id"]
    seq_b = []
    for _ in range(3):
        c.post(f"/api/session/{other}/step", json={})
        seq_b.append(c.post(f"/api/session/{sids[1]}/step", json={}).json()["frame"]["tokens"])
    assert seq_a == seq_b


def test_clamp_notice(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 5, "init": "sampled"}).json()["session_id"]
    r = c.post(f"/api/session/{sid}/step",
               json={"ego": {"dx": 99.0, "dy": 0.0, "dtheta": 0.0}})
    assert r.status_code == 200
    assert any("clamped" in n for n in r.json()["notices"])
    assert r.json()["frame"]["ego_action"]["dx"] == pytest.approx(
        _quantized(10.0, "dx", prof.bins))


def test_info_and_delete(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 6, "init": "sampled"}).json()["session_id"]
    info = c.get(f"/api/session/{sid}")
    assert info.status_code == 200
    assert info.json()["history_len"] >= 1
    assert c.delete(f"/api/session/{sid}").status_code == 204
    assert c.get(f"/api/session/{sid}").status_code == 404
    assert c.delete(f"/api/session/{sid}").status_code == 404


def test_malformed_requests_rejected(client):
    c, prof, _ = client
    sid = c.post("/api/session", json={"seed": 7, "init": "sampled"}).json()["session_id"]
    r = c.post(f"/api/session/{sid}/step", json={"ego": {"dx": "fast"}})
    assert r.status_code == 422
    r = c.post(f"/api/session/{sid}/step", json={"agents": [{"slot": 999, "vx": 0, "vy": 0}]})
    assert r.status_code == 422
    assert c.post("/api/session/12345/step", json={}).status_code == 404
