import numpy as np
import pytest
import torch
import torch.nn.functional as F

from qsderain.losses import total_loss
from qsderain.network import (
    QSNet,
    QSNetConfig,
    channel_shuffle,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    scale_exchange,
)

SMALL = QSNetConfig(channels=16, groups=4, n_units=3)


def expected_parameter_count(c, g, n_units, rates, cin=3):
    """Hand count of weights and biases, layer by layer."""
    n_aux = 1 + len(rates)
    stem = cin * c * 9 + c
    unit = (c * (c // g) + c) + (c * 9 + c) + (c * (c // g) + c)
    extract = (c * c + c) + len(rates) * (c * (c // g) * 9 + c)
    aux = 2 * (c * (c // g) * 9 + c) + (c * cin * 9 + cin)
    main = (c * (n_aux * c // g) + c) + c * n_aux * cin * 9 + (c * cin * 9 + cin)
    return stem + n_units * unit + extract + n_aux * aux + main


class TestShuffle:
    def test_hand_enumerated_order(self):
        x = torch.arange(4.0).view(1, 4, 1, 1)
        assert channel_shuffle(x, 2).flatten().tolist() == [0.0, 2.0, 1.0, 3.0]

    def test_identity_for_one_group(self):
        x = torch.randn(2, 6, 3, 3)
        assert torch.equal(channel_shuffle(x, 1), x)

    @pytest.mark.parametrize("c,g", [(4, 2), (12, 3), (12, 4), (20, 5), (64, 4)])
    def test_inverse_with_swapped_grouping(self, c, g):
        x = torch.randn(2, c, 3, 5)
        y = channel_shuffle(x, g)
        assert torch.equal(channel_shuffle(y, c // g), x)
        assert torch.equal(y.flatten().sort().values, x.flatten().sort().values)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            channel_shuffle(torch.zeros(1, 6, 2, 2), 4)

    def test_scale_exchange_is_permutation(self):
        feats = [torch.randn(1, 8, 4, 4) for _ in range(5)]
        ex = scale_exchange(feats)
        cat = torch.cat(feats, dim=1)
        a = sorted(map(tuple, cat[0].flatten(1).tolist()))
        b = sorted(map(tuple, ex[0].flatten(1).tolist()))
        assert a == b
        # every block of five consecutive channels holds one channel of each scale
        assert torch.equal(ex[:, :5], torch.cat([f[:, :1] for f in feats], dim=1))


class TestShapes:
    @pytest.mark.parametrize("hw", [(64, 64), (65, 97), (256, 256), (16, 23)])
    def test_spatial_size_preserved(self, hw):
        model = QSNet(QSNetConfig(channels=8, groups=4, n_units=2), zero_head=False).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, *hw))
        assert out.rain.shape == (1, 3, *hw)
        assert len(out.aux_rains) == 5 and len(out.features) == 5
        assert all(a.shape == (1, 3, *hw) for a in out.aux_rains)
        assert all(f.shape[-2:] == hw for f in out.features)

    def test_bad_input_channels(self):
        with pytest.raises(ValueError):
            QSNet(SMALL)(torch.rand(1, 1, 16, 16))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            QSNetConfig(channels=10, groups=4)
        assert QSNetConfig().n_aux == 5


class TestParameters:
    @pytest.mark.parametrize("cfg", [QSNetConfig(), SMALL, QSNetConfig(channels=32, groups=2, n_units=5)])
    def test_count_matches_hand_oracle(self, cfg):
        assert count_parameters(QSNet(cfg)) == expected_parameter_count(cfg.channels, cfg.groups, cfg.n_units,
                                                                       cfg.atrous_rates)

    def test_grouping_saves_parameters(self):
        grouped = QSNet(QSNetConfig(groups=4))
        dense = QSNet(QSNetConfig(groups=1))
        assert count_parameters(grouped) < count_parameters(dense)
        g_unit, d_unit = grouped.encoder.units[0], dense.encoder.units[0]
        assert g_unit.reduce.weight.numel() * 4 == d_unit.reduce.weight.numel()

    def test_sharing_adds_no_parameters(self):
        on = QSNet(QSNetConfig(feature_sharing=True))
        off = QSNet(QSNetConfig(feature_sharing=False))
        assert count_parameters(on) == count_parameters(off)

    def test_no_dead_gradients(self):
        model = QSNet(SMALL, zero_head=False)
        x, b = torch.rand(2, 3, 24, 24), torch.rand(2, 3, 24, 24)
        loc = (torch.rand(2, 1, 24, 24) > 0.7).float()
        total_loss(x, b, loc, model(x)).total.backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
        assert dead == []

    def test_zero_heads_start_at_identity(self):
        model = QSNet(SMALL).eval()
        x = torch.rand(1, 3, 20, 20)
        out = model(x)
        assert not out.rain.any() and all(not a.any() for a in out.aux_rains)
        assert torch.equal(model.derain(x), x)


class TestBlocks:
    def test_residual_skip_identity(self):
        model = QSNet(SMALL, zero_head=False)
        with torch.no_grad():
            for unit in model.encoder.units:
                unit.expand.weight.zero_()
                unit.expand.bias.zero_()
            x = torch.zeros(1, 3, 16, 16)
            assert torch.equal(model.encoder(x), model.encoder.stem(x))

    @pytest.mark.parametrize("branch,rate", [(1, 1), (2, 2), (3, 4), (4, 6)])
    def test_atrous_footprint(self, branch, rate):
        conv = QSNet(SMALL, zero_head=False).extract.convs[branch]
        x = torch.zeros(1, 16, 21, 21)
        x[0, :, 10, 10] = 1.0
        with torch.no_grad():
            resp = (conv(x) - conv.bias.view(1, -1, 1, 1)).abs().sum(dim=(0, 1))
        rows, cols = torch.nonzero(resp, as_tuple=True)
        assert set((rows - 10).tolist()) == {-rate, 0, rate}
        assert set((cols - 10).tolist()) == {-rate, 0, rate}

    def test_rate_one_is_dense_3x3(self):
        conv = QSNet(SMALL, zero_head=False).extract.convs[1]
        x = torch.randn(1, 16, 12, 12)
        ref = F.conv2d(x, conv.weight, conv.bias, padding=1, groups=conv.groups)
        assert torch.allclose(conv(x), ref, atol=1e-6)

    def test_aux_decoders_independent(self):
        model = QSNet(SMALL, zero_head=False).eval()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            before = model(x).aux_rains
            model.aux[2].conv2.weight.add_(0.5)
            after = model(x).aux_rains
        for j in range(5):
            assert torch.equal(before[j], after[j]) == (j != 2)

    def test_main_decoder_consumes_aux(self):
        model = QSNet(SMALL, zero_head=False).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 16, 16))
            zeroed = model.main(out.features, [torch.zeros_like(a) for a in out.aux_rains])
        assert not torch.allclose(zeroed, out.rain)

    def test_sharing_switch_changes_outputs(self):
        on = QSNet(QSNetConfig(channels=16, n_units=2, feature_sharing=True), zero_head=False).eval()
        off = QSNet(QSNetConfig(channels=16, n_units=2, feature_sharing=False), zero_head=False).eval()
        off.load_state_dict(on.state_dict())
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            a, b = on(x), off(x)
        assert not torch.allclose(a.aux_rains[0], b.aux_rains[0])
        assert not torch.allclose(a.rain, b.rain)

    def test_mismatched_spatial_sizes(self):
        model = QSNet(SMALL)
        feats = [torch.zeros(1, 16, 8, 8)] * 4 + [torch.zeros(1, 16, 8, 9)]
        with pytest.raises(ValueError):
            model.main(feats, [torch.zeros(1, 3, 8, 8)] * 5)


class TestForward:
    def test_decomposition_identity(self):
        model = QSNet(SMALL, zero_head=False).eval()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            r = model(x).rain
        assert torch.allclose((x - r) + r, x, atol=1e-7)
        assert torch.equal(model.derain(x), (x - r).clamp(0, 1))

    def test_eval_deterministic(self):
        model = QSNet(SMALL, zero_head=False).eval()
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x).rain, model(x).rain)

    def test_checkpoint_roundtrip(self, tmp_path):
        model = QSNet(SMALL, zero_head=False).eval()
        save_checkpoint(tmp_path / "m.pt", model, step=7, note="x")
        loaded, payload = load_checkpoint(tmp_path / "m.pt")
        assert payload["step"] == 7 and loaded.cfg == model.cfg
        assert (tmp_path / "m.pt.json").exists()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(loaded(x).rain, model(x).rain)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt")
