import numpy as np
import pytest

from qsderain.evaluation import (
    benchmark_speed,
    evaluate,
    forward_numpy,
    per_scale_decode_eval,
    save_panel,
    score_pair,
    verify_output_sparsity,
)
from qsderain.imaging import read_png
from qsderain.network import QSNet, QSNetConfig, save_checkpoint
from qsderain.rain import build_dataset, load_split

TINY = QSNetConfig(channels=8, groups=4, n_units=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaldata")
    build_dataset(root, n_train=1, n_val=1, n_test=3, seed=9, size=64)
    return root


@pytest.fixture(scope="module")
def random_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "rand.pt"
    save_checkpoint(path, QSNet(TINY, zero_head=False))
    return path


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "zero.pt"
    save_checkpoint(path, QSNet(TINY))
    return path


def test_ground_truth_is_upper_bound(rng):
    b = rng.random((32, 32, 3))
    s = score_pair(b, b)
    assert s["psnr"] == 100.0 and s["psnr_rgb"] == 100.0 and s["ssim"] == pytest.approx(1.0, abs=1e-9)


def test_identity_model_scores_input(data, identity_ckpt, tmp_path):
    res = evaluate(identity_ckpt, data, "test", out_dir=tmp_path, panels=2)
    assert res.improvement_db == pytest.approx(0, abs=1e-4)
    assert res.mean_psnr == pytest.approx(np.mean([r["psnr"] for r in res.rows]), abs=1e-9)
    assert res.mean_ssim == pytest.approx(np.mean([r["ssim"] for r in res.rows]), abs=1e-9)
    assert len((tmp_path / "eval_test.csv").read_text().strip().splitlines()) == 4
    panels = sorted((tmp_path / "panels").glob("*.png"))
    assert len(panels) == 2 and read_png(panels[0]).shape == (64, 4 * 64 + 3 * 2, 3)


def test_evaluate_idempotent(data, random_ckpt, tmp_path):
    evaluate(random_ckpt, data, "test", out_dir=tmp_path / "a")
    evaluate(random_ckpt, data, "test", out_dir=tmp_path / "b")
    for name in ("eval_test.csv", "eval_test.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_scale_table_consistent_with_evaluate(data, random_ckpt, tmp_path):
    table = per_scale_decode_eval(random_ckpt, data, "test", out_dir=tmp_path)
    assert list(table) == ["C1", "C2", "C3", "C4", "C5", "all"]
    res = evaluate(random_ckpt, data, "test")
    assert table["all"]["psnr"] == pytest.approx(res.mean_psnr, abs=1e-9)
    header = (tmp_path / "scale_study_test.csv").read_text().splitlines()[0].split(",")
    assert header == ["metric", "C1", "C2", "C3", "C4", "C5", "all"]


def test_empty_split_rejected(tmp_path, random_ckpt):
    build_dataset(tmp_path, n_train=1, n_val=1, n_test=0, size=64)
    with pytest.raises(ValueError):
        evaluate(random_ckpt, tmp_path, "test")


def test_zero_rain_flagged_not_crashing(data, identity_ckpt):
    samples = load_split(data, "test")
    reports = verify_output_sparsity(identity_ckpt, samples)
    assert len(reports) == 3
    for r in reports:
        assert r["rain"].degenerate
        assert not r["input"].degenerate
    again = verify_output_sparsity(identity_ckpt, samples)
    assert [r["derained"].verdict for r in reports] == [r["derained"].verdict for r in again]


def test_forward_numpy_shapes(random_ckpt, rng):
    from qsderain.network import load_checkpoint

    model, _ = load_checkpoint(random_ckpt)
    derained, rain, aux = forward_numpy(model, rng.random((20, 24, 3)))
    assert derained.shape == rain.shape == (20, 24, 3) and len(aux) == 5
    assert derained.min() >= 0 and derained.max() <= 1


def test_benchmark_harness(random_ckpt):
    one = benchmark_speed(random_ckpt, size=128, n_warmup=10, n_runs=1)
    many = benchmark_speed(random_ckpt, size=128, n_warmup=10, n_runs=100)
    assert many["n_runs"] == 100 and "torch" in many["hardware"]
    assert abs(one["median_s"] - many["median_s"]) <= 0.5 * many["median_s"]
    with pytest.raises(ValueError):
        benchmark_speed(random_ckpt, n_runs=0)


def test_panel_gray_tiles(tmp_path, rng):
    save_panel(tmp_path / "p.png", rng.random((8, 8, 3)), rng.random((8, 8, 3)), rng.random((8, 8)),
               rng.random((8, 8, 3)))
    assert read_png(tmp_path / "p.png").shape == (8, 38, 3)
