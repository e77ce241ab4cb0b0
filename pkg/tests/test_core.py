import numpy as np
import pytest

from umgen.core import (
    AgentCategory, AgentState, EgoAction, Profile, PseudoImage, RasterMap,
    SceneFrame, SceneSequence, frame_token_count, read_dataset,
    sequence_from_json, sequence_to_json, validate_frame, write_dataset,
)
from umgen.errors import ConfigurationError, FormatError


def test_frame_token_count_desk():
    c = frame_token_count(Profile.desk())
    assert (c.n_ego, c.n_map, c.n_agent, c.n_image) == (3, 64, 88, 32)
    assert c.total == 195
    assert (c.cum_ego, c.cum_map, c.cum_agent, c.cum_image) == (5, 71, 161, 195)


def test_frame_token_count_minimal():
    p = Profile.desk(n_agents=1, map_cells=4, patch=4, image_h=4, image_w=4)
    c = frame_token_count(p)
    assert c.total == 3 + 1 + 11 + 1 + 8 == 24


def test_frame_token_count_divisibility_error():
    with pytest.raises(ConfigurationError):
        frame_token_count(Profile.desk(patch=3))


def test_token_count_constant_across_frames(small_world_dataset):
    prof, seqs = small_world_dataset
    c = frame_token_count(prof)
    for seq in seqs:
        for f in seq.frames:
            validate_frame(f, prof)
    assert c.total == frame_token_count(prof).total


def test_raster_map_rejects_bad_class():
    with pytest.raises(FormatError):
        RasterMap(np.full((4, 4), 9, dtype=np.uint8), 2.0, 8.0)


def test_pad_active_consistency_checked():
    prof = Profile.desk(n_agents=1, map_cells=4, patch=4, image_h=4, image_w=4)
    bad_agent = AgentState(category=AgentCategory.PAD, active=True)
    frame = SceneFrame(
        ego_action=EgoAction(0, 0, 0), agents=(bad_agent,),
        map=RasterMap(np.zeros((4, 4), dtype=np.uint8), 2.0, 8.0),
        image=PseudoImage(np.zeros((4, 4, 3), dtype=np.float32)),
        frame_index=0)
    with pytest.raises(FormatError):
        validate_frame(frame, prof)


def test_dataset_roundtrip_bit_exact(tmp_path, small_world_dataset):
    _, seqs = small_world_dataset
    path = tmp_path / "data.jsonl"
    write_dataset(str(path), seqs)
    back = read_dataset(str(path))
    assert len(back) == len(seqs)
    for a, b in zip(seqs, back):
        assert a.world_seed == b.world_seed
        assert a.ego_pose == b.ego_pose
        for fa, fb in zip(a.frames, b.frames):
            assert fa.ego_action == fb.ego_action
            assert fa.agents == fb.agents
            assert np.array_equal(fa.map.cells, fb.map.cells)
            assert fa.map.resolution == fb.map.resolution
            assert np.array_equal(fa.image.pixels, fb.image.pixels)
    # and the file itself is reproducible byte for byte
    path2 = tmp_path / "data2.jsonl"
    write_dataset(str(path2), back)
    assert path.read_bytes() == path2.read_bytes()


def test_sequence_json_schema_keys(small_world_dataset):
    _, seqs = small_world_dataset
    obj = sequence_to_json(seqs[0])
    assert set(obj) == {"world_seed", "frames", "ego_pose"}
    f = obj["frames"][0]
    assert set(f) == {"frame_index", "ego_action", "agents", "map", "image"}
    assert set(f["ego_action"]) == {"dx", "dy", "dtheta"}
    assert set(f["map"]) == {"cells", "resolution", "extent"}
    assert set(f["agents"][0]) == {"slot", "category", "x", "y", "z", "vx", "vy",
                                   "vz", "heading", "length", "width", "height",
                                   "active"}
    back = sequence_from_json(obj)
    assert isinstance(back, SceneSequence)
