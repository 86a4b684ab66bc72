import json
import time

import numpy as np
import pytest

from synprompt import experiment
from synprompt.backbone import pretrain_backbone
from synprompt.config import ConfigError, ExperimentConfig
from synprompt.experiment import pattern_seed, prepare, probe_accuracy, sweep_cells
from synprompt.missing_data import apply_pattern, generate_pattern, synth_dataset, synth_pretrain_corpus
from synprompt.prompts import SyPModel
from synprompt.training import TrainPlan, train_prompts

TINY = ExperimentConfig(d_model=16, n_heads=2, n_layers=2, prompt_depth=2, prompt_len=2, text_len=5,
                        image_tokens=6, n_train=48, n_val=16, n_test=16, n_pretrain=64,
                        pretrain_steps=10, epochs=2, batch_size=16)


def test_prepare_caches_backbone_and_data(tmp_path):
    a = prepare(TINY, tmp_path)
    assert any("backbone cache miss" in n for n in a.notes)
    assert any("dataset cache miss" in n for n in a.notes)
    experiment._memo.clear()
    b = prepare(TINY, tmp_path)
    assert b.notes == []
    assert b.backbone_checksum == a.backbone_checksum and b.data_checksums == a.data_checksums
    assert len(list(tmp_path.glob("backbone-*.ckpt"))) == 1


def test_cache_dir_follows_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(experiment.CACHE_ENV, str(tmp_path / "c"))
    assert experiment.cache_dir() == tmp_path / "c"
    monkeypatch.delenv(experiment.CACHE_ENV)
    assert experiment.cache_dir().name == "synprompt"


def test_pattern_seeds_are_distinct():
    seeds = {pattern_seed(s, split) for s in (11, 13, 17, 19, 23) for split in ("train", "val", "test")}
    assert len(seeds) == 15


def test_masked_splits_follow_config(tmp_path):
    art = prepare(TINY, tmp_path)
    cfg = TINY.replace(eta_train=0.5, kind_train="text", eta_test=1.0, kind_test="image")
    tr, va, te = experiment.masked_splits(cfg, art, 3)
    assert (tr.cases == 1).sum() == 24 and (va.cases == 1).sum() == 8
    assert (te.cases == 2).all()


@pytest.mark.parametrize("axis,values,count", [
    ("variant", None, 4), ("variant", ["no-prompt"], 1), ("r", None, 3), ("adapter", None, 2),
    ("eta", None, 27), ("eta", ["0.3", "0.6"], 12), ("robustness", None, 18),
])
def test_sweep_cell_expansion(axis, values, count):
    cells = sweep_cells(TINY, axis, values)
    assert len(cells) == count
    assert len({c.fingerprint() for _, c in cells}) == count


def test_sweep_cell_contents():
    names = dict(sweep_cells(TINY, "adapter", None))
    assert names["adapter=off"].use_adapter is False
    r = dict(sweep_cells(TINY, "r", ["10"]))["r=10"]
    assert r.reduction_ratio == 10.0
    rob = dict(sweep_cells(TINY, "robustness", ["0.7"]))
    assert set(rob) == {f"{k}:0.7:{v}" for k in ("text", "image", "both") for v in ("no-prompt", "synergistic")}
    with pytest.raises(ConfigError):
        sweep_cells(TINY, "variant", ["prefix-only"])
    with pytest.raises(ConfigError):
        sweep_cells(TINY, "depth", None)


def test_write_csv_is_stable(tmp_path):
    rows = [{"a": 0.1, "b": 2}, {"a": 1 / 3, "b": 3}]
    experiment.write_csv(tmp_path / "x.csv", ("a", "b"), rows)
    assert (tmp_path / "x.csv").read_text() == "a,b\n0.1,2\n0.3333333333333333,3\n"


def test_manifest_records_seeds_and_checksums(tmp_path, monkeypatch):
    monkeypatch.setenv(experiment.CACHE_ENV, str(tmp_path / "cache"))
    m = experiment.run(TINY.replace(seed=5), tmp_path / "run")
    on_disk = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert on_disk["pattern_seeds"] == {"train": 501, "val": 502, "test": 503}
    assert on_disk["metrics_csv_sha256"] == experiment.file_sha256(tmp_path / "run" / "metrics.csv")
    assert m["metric"] == "accuracy" and 0.0 <= m["test_metric"] <= 1.0
    assert any("cache miss" in n for n in on_disk["notes"])


# ---------------------------------------------------------------------------
# behaviour on the default synthetic task (slow)


@pytest.fixture(scope="module")
def default_backbone():
    cfg = ExperimentConfig()
    return cfg, pretrain_backbone(cfg, synth_pretrain_corpus(cfg, cfg.data_seed))


@pytest.mark.slow
def test_pretraining_loss_decreases_by_step_200():
    cfg = ExperimentConfig(pretrain_steps=200, seed=17)
    bb = pretrain_backbone(cfg, synth_pretrain_corpus(cfg, cfg.data_seed))
    assert bb.meta["final_loss"] < bb.meta["initial_loss"]


@pytest.mark.slow
def test_prompt_tuning_reduces_train_loss_in_five_epochs(default_backbone):
    cfg, bb = default_backbone
    cfg = cfg.replace(epochs=5, seed=17)
    tr, va, _ = synth_dataset(cfg, cfg.data_seed)
    tr = apply_pattern(tr, generate_pattern(len(tr), 0.5, "both", pattern_seed(17, "train")))
    va = apply_pattern(va, generate_pattern(len(va), 0.5, "both", pattern_seed(17, "val")))
    model = SyPModel(cfg, bb, 17)
    res = train_prompts(TrainPlan.for_model(model, len(tr), cfg, 17), model, tr, va)
    assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]


@pytest.mark.slow
@pytest.mark.parametrize("alpha,check", [(0.0, "chance"), (1.0, "separable")])
def test_probe_extremes(alpha, check):
    cfg = ExperimentConfig(alpha_image=alpha, alpha_text=alpha, label_noise=0.0, seed=17)
    bb = pretrain_backbone(cfg, synth_pretrain_corpus(cfg, 17))
    tr, _, te = synth_dataset(cfg, 17)
    acc = probe_accuracy(bb, tr, te)
    if check == "chance":
        assert abs(acc - 1 / cfg.n_classes) <= 0.03
    else:
        assert acc > 0.95


@pytest.mark.slow
def test_both_modalities_beat_either_alone():
    cfg = ExperimentConfig()
    both, single = [], []
    for seed in cfg.eval_seeds:  # each seed is its own task instance and backbone
        bb = pretrain_backbone(cfg, synth_pretrain_corpus(cfg, seed))
        tr, _, te = synth_dataset(cfg, seed)
        both.append(probe_accuracy(bb, tr, te, "both"))
        single.append(max(probe_accuracy(bb, tr, te, "image"), probe_accuracy(bb, tr, te, "text")))
    assert np.mean(both) >= np.mean(single)


@pytest.mark.slow
def test_default_run_finishes_within_ten_minutes(tmp_path, monkeypatch):
    monkeypatch.setenv(experiment.CACHE_ENV, str(tmp_path / "cache"))
    t0 = time.perf_counter()
    experiment.run(ExperimentConfig(), tmp_path / "run")  # includes pretraining
    assert time.perf_counter() - t0 < 600
