import numpy as np
import pytest

from synprompt import checkpoint
from synprompt.checkpoint import CheckpointError
from synprompt.config import ConfigError, ExperimentConfig


def test_defaults_validate():
    ExperimentConfig().validate()


def test_yaml_roundtrip(tmp_path):
    cfg = ExperimentConfig(task="binary", eta_train=0.3, kind_test="image", eval_seeds=[1, 2])
    cfg.save(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.fingerprint() == cfg.fingerprint()


def test_partial_yaml_keeps_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("epochs: 3\nreduction_ratio: 10\nuse_adapter: no\n")
    cfg = ExperimentConfig.load(tmp_path / "c.yaml")
    assert cfg.epochs == 3 and cfg.reduction_ratio == 10.0 and cfg.use_adapter is False
    assert cfg.d_model == ExperimentConfig().d_model


def test_all_problems_reported_together():
    cfg = ExperimentConfig(prompt_depth=9, n_layers=6, task="ranking", lr=-1.0)
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    joined = " ".join(info.value.problems)
    assert "prompt_depth" in joined and "task" in joined and "lr" in joined
    assert len(info.value.problems) == 3


def test_unknown_and_uncoercible_keys():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"epochs": "many", "d_model": 3.5})
    assert len(info.value.problems) == 2


def test_non_mapping_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.yaml")


def test_fingerprint_subset():
    a = ExperimentConfig()
    b = a.replace(epochs=7)
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint(["d_model", "n_layers"]) == b.fingerprint(["d_model", "n_layers"])


def _sections():
    rng = np.random.default_rng(0)
    return {"prompts": {"P_B": rng.normal(size=(3, 4, 8)), "b1": rng.normal(size=(5,))},
            "head": {"w": rng.normal(size=(16, 2)), "scalar": np.array(2.5)}}


def test_checkpoint_roundtrip(tmp_path):
    secs = _sections()
    digest = checkpoint.save(tmp_path / "x.ckpt", secs, {"note": "hi"})
    back, header = checkpoint.load(tmp_path / "x.ckpt")
    assert header["checksum"] == digest and header["meta"] == {"note": "hi"}
    for s in secs:
        for k in secs[s]:
            assert back[s][k].tobytes() == secs[s][k].tobytes()
            assert back[s][k].shape == secs[s][k].shape
    assert not list(tmp_path.glob("*.tmp*"))


def test_checkpoint_bytes_deterministic(tmp_path):
    checkpoint.save(tmp_path / "a.ckpt", _sections())
    checkpoint.save(tmp_path / "b.ckpt", _sections())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_detects_corruption(tmp_path):
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, _sections())
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0x40
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.load(p)


def test_checkpoint_detects_truncation(tmp_path):
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, _sections())
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load(p)


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        checkpoint.load(p)
    checkpoint.save(p, _sections())
    p.write_bytes(p.read_bytes().replace(b"SYPCKPT 1", b"SYPCKPT 9", 1))
    with pytest.raises(CheckpointError, match="version 9"):
        checkpoint.load(p)
