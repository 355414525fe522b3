import csv
import json
import math

import numpy as np
import pytest
import torch

from qsderain.losses import LossWeights
from qsderain.network import QSNetConfig, load_checkpoint
from qsderain.rain import RainySample, build_dataset, load_split
from qsderain.training import LOG_FIELDS, TrainConfig, TrainingDiverged, run_ablation, train

TINY = QSNetConfig(channels=8, groups=4, n_units=2)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    build_dataset(root, n_train=3, n_val=1, n_test=1, seed=4, size=64)
    return root


def cfg(**kw):
    base = dict(crop=32, batch_size=2, max_steps=12, eval_interval=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_same_seed_identical_losses(tiny_data, tmp_path):
    a = train(tiny_data, TINY, cfg(), out_dir=tmp_path / "a")
    b = train(tiny_data, TINY, cfg(), out_dir=tmp_path / "b")
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_resume_reproduces_trajectory(tiny_data, tmp_path):
    full = train(tiny_data, TINY, cfg(max_steps=12), out_dir=tmp_path / "full")
    train(tiny_data, TINY, cfg(max_steps=8), out_dir=tmp_path / "part")
    resumed = train(tiny_data, TINY, cfg(max_steps=12), out_dir=tmp_path / "part",
                    resume_from=tmp_path / "part" / "last.pt")
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history[8:]]
    assert resumed.lr_history == full.lr_history[8:]


def test_outputs_and_log(tiny_data, tmp_path):
    res = train(tiny_data, TINY, cfg(), out_dir=tmp_path)
    for name in ("best.pt", "best.pt.json", "last.pt", "manifest.json", "train_log.csv", "timing.json"):
        assert (tmp_path / name).exists()
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert list(rows[0]) == LOG_FIELDS
    assert [int(r["step"]) for r in rows] == list(range(1, 13))
    assert all(math.isfinite(float(r["total"])) for r in rows)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["net_config"]["channels"] == 8 and len(man["dataset_index_sha256"]) == 64
    model, payload = load_checkpoint(res.best_path)
    assert payload["best_val_psnr"] == pytest.approx(res.best_val_psnr)


def test_plateau_schedule(tiny_data, tmp_path):
    # a relative threshold of 1 means no evaluation ever counts as an improvement
    c = cfg(max_steps=20, eval_interval=4, plateau_patience=2, plateau_threshold=1.0)
    res = train(tiny_data, TINY, c, out_dir=tmp_path)
    lrs = np.array(res.lr_history)
    assert np.all(np.diff(lrs) <= 0)
    # evals at steps 4, 8, 12, 16, 20 are all non-improving: cut after every second one
    assert lrs[7] == pytest.approx(1e-3) and lrs[8] == pytest.approx(1e-4)
    assert lrs[15] == pytest.approx(1e-4) and lrs[16] == pytest.approx(1e-5)
    assert 1e-3 * 0.1 ** 2 == pytest.approx(1e-5)


def test_variant_one_drops_terms(tiny_data, tmp_path):
    res = train(tiny_data, TINY, cfg(variant="V1", max_steps=4), out_dir=tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    w = man["effective_weights"]
    assert (w["quasi_sparsity"], w["detail"], w["auxiliary"]) == (0.0, 0.0, 0.0) and w["content"] == 1.0
    for r in res.history:
        assert r["total"] == pytest.approx(r["content"], abs=1e-9)


def test_nan_aborts_with_dump(tiny_data, tmp_path):
    bad = [RainySample(np.full((64, 64, 3), np.nan), np.zeros((64, 64, 3)), np.zeros((64, 64, 3)),
                       np.zeros((64, 64), bool), "train", "x")]
    with pytest.raises(TrainingDiverged, match="sample ids"):
        train(None, TINY, cfg(), out_dir=tmp_path, train_samples=bad, val_samples=bad)
    dump = torch.load(tmp_path / "nan_batch.pt", weights_only=False)
    assert dump["step"] == 0 and dump["sample_ids"] == [0, 0]


def test_checkpoint_roundtrip_val_loss(tiny_data, tmp_path):
    from qsderain.losses import total_loss
    from qsderain.training import samples_to_tensors

    res = train(tiny_data, TINY, cfg(), out_dir=tmp_path)
    x, b, l = samples_to_tensors(load_split(tiny_data, "val"))
    m1, _ = load_checkpoint(res.best_path)
    m2, _ = load_checkpoint(res.best_path)
    with torch.no_grad():
        assert float(total_loss(x, b, l, m1(x)).total) == float(total_loss(x, b, l, m2(x)).total)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="V9")
    c = TrainConfig(weights={"quasi_sparsity": 1, "content": 1, "auxiliary": 1, "detail": 1})
    assert c.effective_weights == LossWeights(1, 1, 1, 1)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_ablation_table(tiny_data, tmp_path):
    ckpts = {}
    for v in ("V1", "V2", "V3", "V4"):
        ckpts[v] = train(tiny_data, TINY, cfg(variant=v, max_steps=2), out_dir=tmp_path / v).best_path
    rows = run_ablation(tiny_data, ckpts, out_dir=tmp_path)
    assert len(rows) == 12
    assert len((tmp_path / "ablation.csv").read_text().strip().splitlines()) == 13
    del ckpts["V3"]
    with pytest.raises(FileNotFoundError):
        run_ablation(tiny_data, ckpts)
