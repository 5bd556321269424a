import json

import numpy as np
import pytest
import torch

from defectsynth.datamodel import DatasetManifest, SampleRecord, one_hot
from defectsynth.objectives import LossReport, NonFiniteLoss
from defectsynth.trainer import (
    ConfigError,
    TrainConfig,
    Trainer,
    build_trainer,
    desk_config,
    is_generator_step,
    latest_checkpoint,
    load_generator,
    lr_schedule,
    paper_config,
    parameter_checksum,
)
from helpers import tiny_config, tiny_trainer


def read_log(path):
    return [json.loads(line) for line in (path / "train_log.jsonl").read_text().splitlines()]


def test_lr_endpoints_exact():
    cfg = paper_config()
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(cfg.iterations - 1, cfg) == 1e-6


def test_lr_midpoint_and_monotone():
    cfg = tiny_config(iterations=5)
    assert lr_schedule(2, cfg) == pytest.approx((2e-4 + 1e-6) / 2, rel=1e-12)
    values = [lr_schedule(i, cfg) for i in range(5)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert lr_schedule(-3, cfg) == 2e-4 and lr_schedule(99, cfg) == 1e-6


def test_generator_step_pattern():
    flags = [is_generator_step(i, 5) for i in range(12)]
    assert flags == [False] * 5 + [True] + [False] * 5 + [True]


def test_config_validation():
    with pytest.raises(ConfigError, match="n_critic must be >= 1"):
        tiny_config(n_critic=0).validate()
    with pytest.raises(ConfigError):
        tiny_config(lr_end=1.0).validate()
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = desk_config(seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_ablation_zeroes_spatial_weights():
    for flags in ({"lwc": False}, {"sc": False}):
        w = tiny_config(**flags).loss_weights()
        assert w.sd_cyc == 0 and w.sd_con == 0
    assert tiny_config().loss_weights().sd_cyc == 5.0


def test_schedule_counts(tmp_path):
    tr = tiny_trainer(out_dir=tmp_path)
    tr.train()
    rows = read_log(tmp_path)
    steps = [r["step"] for r in rows]
    assert steps.count("d") == 50 and steps.count("g") == 10
    assert [r["iteration"] for r in rows] == list(range(60))
    assert rows[0]["lr"] == 2e-4 and rows[-1]["lr"] == 1e-6
    expected = set(LossReport().to_dict()) | {"iteration", "step", "lr"}
    assert all(set(r) == expected for r in rows)
    assert all(np.isfinite(v) for r in rows for k, v in r.items() if k != "step")
    assert latest_checkpoint(tmp_path).name == "ckpt_60"


def test_step_isolation():
    tr = tiny_trainer()
    batch, seeds = tr.sample(0)
    g0, d0 = parameter_checksum(tr.G), parameter_checksum(tr.D)
    tr.train_step_d(batch, seeds)
    assert parameter_checksum(tr.G) == g0 and parameter_checksum(tr.D) != d0
    d1 = parameter_checksum(tr.D)
    tr.train_step_g(batch, seeds)
    assert parameter_checksum(tr.D) == d1 and parameter_checksum(tr.G) != g0
    assert all(p.requires_grad for p in tr.D.parameters())


def test_report_terms_by_step():
    tr = tiny_trainer()
    batch, seeds = tr.sample(0)
    d = tr.train_step_d(batch, seeds)
    assert d.adv_g == 0 and d.rec == 0 and d.gp > 0 and d.cls_r > 0
    g = tr.train_step_g(batch, seeds)
    assert g.adv_d == 0 and g.gp == 0 and g.rec > 0 and g.sd_con > 0


def test_lwc_off_reports_zero_spatial_terms():
    tr = tiny_trainer(tiny_config(lwc=False))
    batch, seeds = tr.sample(0)
    g = tr.train_step_g(batch, seeds)
    assert g.sd_cyc == 0 and g.sd_con == 0


def test_deterministic(tmp_path):
    a = tiny_trainer(tiny_config(iterations=12), tmp_path / "a").train()
    b = tiny_trainer(tiny_config(iterations=12), tmp_path / "b").train()
    assert read_log(tmp_path / "a") == read_log(tmp_path / "b")
    assert parameter_checksum(a.G) == parameter_checksum(b.G)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(iterations=24, checkpoint_every=12)
    full = tiny_trainer(cfg, tmp_path / "full").train()
    resumed = tiny_trainer(cfg, tmp_path / "part")
    resumed.train(n_updates=15)  # past the checkpoint, so the log must be truncated
    resumed = tiny_trainer(cfg, tmp_path / "part")
    resumed.load_state(tmp_path / "part" / "ckpt_12")
    assert resumed.iteration == 12
    resumed.train()
    a, b = read_log(tmp_path / "full"), read_log(tmp_path / "part")
    assert [r["iteration"] for r in b] == list(range(24))
    for ra, rb in zip(a, b):
        for k in LossReport().to_dict():
            assert ra[k] == pytest.approx(rb[k], abs=1e-6)
    assert parameter_checksum(full.G) == parameter_checksum(resumed.G)


def test_load_generator_roundtrip(tmp_path):
    tr = tiny_trainer(tiny_config(iterations=6), tmp_path).train()
    G, cfg = load_generator(tmp_path / "ckpt_6")
    assert cfg == tr.config
    assert parameter_checksum(G) == parameter_checksum(tr.G)


def test_nan_input_dumps_diagnostics(tmp_path):
    tr = tiny_trainer(out_dir=tmp_path)
    tr.defect_images[:] = float("nan")
    with pytest.raises(NonFiniteLoss):
        tr.step()
    dump = json.loads((tmp_path / "divergence_0.json").read_text())
    assert dump["step"] == "d" and "non-finite" in dump["error"]


def test_empty_partition(tmp_path):
    only_defects = DatasetManifest([SampleRecord(tmp_path / "x.png", one_hot("crack"), "real")], "train")
    with pytest.raises(ConfigError, match="0 normal"):
        build_trainer(tiny_config(), only_defects)
    with pytest.raises(ConfigError):
        Trainer(tiny_config(), torch.zeros(0, 3, 16, 16), torch.zeros(1, 3, 16, 16), torch.zeros(1, 6))
