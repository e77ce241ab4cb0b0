import json
import math

import numpy as np
import pytest

from umgen.config_file import load_config, parse_config, profile_from_config
from umgen.core import Profile, write_dataset
from umgen.errors import ConfigurationError
from umgen.model.bundle import load_bundle
from umgen.model.network import training_forward
from umgen.numerics import no_grad
from umgen.tokenizer import build_layout
from umgen.trainer import TrainConfig, train, train_variant


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A very short end-to-end training run on a small world dataset."""
    from umgen.world import build_world, simulate_sequence
    tmp = tmp_path_factory.mktemp("train")
    prof = Profile.desk(map_codebook=48, image_codebook=48, d_model=32,
                        steps=6, batch_size=4, learning_rate=1e-3, block_size=4)
    seqs = [simulate_sequence(build_world(ws), i, 10, prof)
            for ws in range(3) for i in range(2)]
    data = tmp / "data.jsonl"
    write_dataset(str(data), seqs)
    cfg = TrainConfig(profile=prof, log_path=str(tmp / "log.jsonl"))
    ckpt = tmp / "model.ckpt"
    log = train(cfg, str(data), str(ckpt))
    return prof, seqs, str(data), str(ckpt), log, tmp


def test_training_runs_and_logs(tiny_run):
    prof, seqs, data, ckpt, log, tmp = tiny_run
    assert len(log) == prof.steps
    for entry in log:
        assert math.isfinite(entry["loss"])
        assert {"step", "loss", "ce_tar", "ce_oar", "ce_ego",
                "acc_by_modality"} <= set(entry)
    lines = [json.loads(l) for l in open(tmp / "log.jsonl")]
    assert len(lines) == prof.steps


def test_step0_loss_matches_uniform_expectation(tiny_run):
    prof, seqs, data, ckpt, log, _ = tiny_run
    lay = build_layout(prof)
    counts = {m: len(lay.payload_positions(m)) for m in range(4)}
    total = sum(counts.values())
    vocabs = {0: prof.bins + 2, 1: prof.map_codebook + 2,
              2: prof.bins + 6, 3: prof.image_codebook + 2}
    expected = 2 * sum(counts[m] * math.log(vocabs[m]) for m in range(4)) / total
    assert abs(log[0]["loss"] - expected) / expected < 0.05


def test_ce_bounded_at_init(tiny_run):
    prof, _, _, _, log, _ = tiny_run
    vocab_max = max(prof.bins + 6, prof.map_codebook + 2)
    assert log[0]["ce_tar"] <= math.log(vocab_max) + 1.0
    assert log[0]["ce_oar"] <= math.log(vocab_max) + 1.0


def test_training_deterministic(tmp_path):
    from umgen.world import build_world, simulate_sequence
    prof = Profile.desk(map_codebook=48, image_codebook=48, d_model=32,
                        steps=4, batch_size=2, block_size=4)
    seqs = [simulate_sequence(build_world(ws), i, 10, prof)
            for ws in range(3) for i in range(2)]
    data = tmp_path / "d.jsonl"
    write_dataset(str(data), seqs)
    log1 = train(TrainConfig(profile=prof), str(data), str(tmp_path / "a.ckpt"))
    log2 = train(TrainConfig(profile=prof), str(data), str(tmp_path / "b.ckpt"))
    assert [e["loss"] for e in log1] == [e["loss"] for e in log2]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_reload_forward_identical(tiny_run):
    prof, seqs, data, ckpt, log, _ = tiny_run
    bundle = load_bundle(ckpt)
    lay = bundle.layout
    from umgen.trainer import tokenize_dataset
    toks = tokenize_dataset(seqs[:1], bundle.map_codebook, bundle.image_codebook, lay)
    window = toks[0][:prof.block_size + 1][None, ...].astype(np.int64)
    with no_grad():
        a = training_forward(bundle.params, bundle.cfg, lay, window,
                             rng=np.random.default_rng(0))[1].data
        b = training_forward(load_bundle(ckpt).params, bundle.cfg, lay, window,
                             rng=np.random.default_rng(0))[1].data
    assert np.array_equal(a, b)


def test_no_ama_variant_param_set(tiny_run, tmp_path):
    prof, seqs, data, ckpt, log, _ = tiny_run
    cfg = TrainConfig(profile=Profile.desk(
        map_codebook=48, image_codebook=48, d_model=32, steps=2,
        batch_size=2, block_size=4))
    out = tmp_path / "noama.ckpt"
    train_variant("no_ama", cfg, data, str(out))
    full = load_bundle(ckpt)
    ablated = load_bundle(str(out))
    assert set(full.params) - set(ablated.params) == {"ama.fill"}
    assert not ablated.use_ama


def test_token_cache_reused(tiny_run, tmp_path):
    prof, seqs, data, ckpt, log, _ = tiny_run
    cache = tmp_path / "tok.bin"
    cfg = TrainConfig(profile=Profile.desk(
        map_codebook=48, image_codebook=48, d_model=32, steps=2,
        batch_size=2, block_size=4), token_cache=str(cache))
    train(cfg, data, str(tmp_path / "c1.ckpt"))
    assert cache.exists()
    train(cfg, data, str(tmp_path / "c2.ckpt"))  # second run reads the cache


# ---------------------------------------------------------------------------
# config file format
# ---------------------------------------------------------------------------

def test_parse_config_basics():
    flat = parse_config("""
# comment
profile.name = desk
profile.d_model = 32
trainer.tar_weight = 0.5
""")
    assert flat["profile.d_model"] == "32"
    cfg = TrainConfig.from_flat(flat)
    assert cfg.profile.d_model == 32
    assert cfg.tar_weight == 0.5


def test_parse_config_rejects_garbage():
    with pytest.raises(ConfigurationError):
        parse_config("not a key value line")
    with pytest.raises(ConfigurationError):
        profile_from_config({"profile.name": "desk", "profile.bogus": "1"})
    with pytest.raises(ConfigurationError):
        profile_from_config({"profile.name": "nope"})
