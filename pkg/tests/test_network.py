import numpy as np
import pytest

from utils import data_io
from utils.config import SETTING_ORDER, RunConfig
from utils.error_handler import ConfigurationError, DimensionError, FormatError
from utils.network import (BackboneBlockParams, CcanModel, ModelConfig, backbone_block_forward, build_model,
                           ccan_forward, extract_features, load_checkpoint, parameter_shapes, save_checkpoint,
                           slice_parts)
from utils.objective import total_loss
from utils.tensor_core import Tape, Tensor, backward

LITE = dict(input_h=8, input_w=4, channels=(8, 16, 24), pools=(1, 1, 0), d=8, k_p=2, num_ids=3)
LOSS = RunConfig(epsilon_lsr=0.1, r=2, tau=1.0)


def lite_config(setting='full', **changes):
    values = dict(LITE, setting=setting)
    values.update(changes)
    return ModelConfig(**values)


def images(count, seed=0, shape=(8, 4, 3)):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.uniform(0, 1, size=shape)) for _ in range(count)]


def zeroed(model, prefix):
    """Copy of `model` whose attention unit at `prefix` has a zero output map"""
    name = f'{prefix}.W_w'
    return model.with_parameters({name: Tensor(np.zeros(model.params[name].shape))})


class TestParameterNames:
    def test_global_only(self):
        names = set(parameter_shapes(lite_config('G')))
        assert 'global.I3.path2.kernels' in names and 'head.FCG1.weight' in names
        assert not any(n.startswith('local.') or n.startswith('global.SS1') or 'FCL' in n for n in names)

    def test_local_only_keeps_trunk(self):
        names = set(parameter_shapes(lite_config('L')))
        assert 'global.I1.path1.kernels' in names and 'global.I2.path1.kernels' in names
        assert 'global.I3.path1.kernels' not in names
        assert 'local.2.I3.path2.kernels' in names and 'head.FCL2.bias' in names
        assert not any('CC2' in n or 'FCG' in n for n in names)

    def test_full(self):
        shapes = parameter_shapes(lite_config('full'))
        assert shapes['global.SS1.W_alpha'] == (16, 8)  # Z1 is 4 x 2
        assert shapes['local.2.CC2.W_f'] == (2, 16)
        assert shapes['head.FCL1.weight'] == (24 * 2, 8)
        assert shapes['head.FCG2.weight'] == (8, 3)

    def test_settings_add_components(self):
        counts = {s: len(parameter_shapes(lite_config(s))) for s in SETTING_ORDER}
        assert counts['G+L'] > counts['G'] and counts['G+L'] > counts['L']
        assert counts['full'] > counts['G+L+CC'] > counts['G+L']
        assert counts['G+SS'] == counts['G'] + 5


class TestBuildModel:
    def test_seeded_init_is_reproducible(self):
        a, b = build_model(lite_config(), seed=3), build_model(lite_config(), seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_seeds_differ(self):
        a, b = build_model(lite_config(), seed=3), build_model(lite_config(), seed=4)
        assert not np.array_equal(a.params['global.I1.path2.kernels'].data, b.params['global.I1.path2.kernels'].data)

    def test_shared_parameters_identical_across_settings(self):
        g, full = build_model(lite_config('G'), seed=1), build_model(lite_config('full'), seed=1)
        for name in g.params:
            np.testing.assert_array_equal(g.params[name].data, full.params[name].data)

    def test_biases_start_at_zero(self):
        model = build_model(lite_config(), seed=0)
        assert not model.params['head.FCG1.bias'].data.any()

    def test_unknown_setting(self):
        with pytest.raises(ConfigurationError):
            build_model(lite_config('G+CC'))

    def test_indivisible_parts(self):
        with pytest.raises(ConfigurationError):
            build_model(lite_config(k_p=3))

    def test_parameter_set_checked(self):
        model = build_model(lite_config('G'))
        params = dict(model.params)
        params.pop('head.FCG1.bias')
        with pytest.raises(ConfigurationError):
            CcanModel(model.config, params)
        params['head.FCG1.bias'] = Tensor(np.zeros(5))
        with pytest.raises(DimensionError):
            CcanModel(model.config, params)

    def test_from_run_config(self):
        cfg = RunConfig(preset='lite', input_h=8, input_w=4, resize_h=0, resize_w=0, channels=(8, 16, 24),
                        pools=(1, 1, 0), d=8, k_p=2)
        config = ModelConfig.from_run_config(cfg, num_ids=5)
        assert config.num_ids == 5 and config.channels == (8, 16, 24) and config.setting == 'full'


class TestForward:
    @pytest.mark.parametrize('setting', SETTING_ORDER)
    def test_output_shapes(self, setting):
        model = build_model(lite_config(setting), seed=0)
        out = ccan_forward(images(2), model)
        comps = model.config.components
        assert (out.f_G is not None) == ('G' in comps)
        assert (out.f_L is not None) == ('L' in comps)
        if out.f_G is not None:
            assert out.f_G.shape == (2, 8) and out.logits_G.shape == (2, 3)
        if out.f_L is not None:
            assert out.f_L.shape == (2, 8) and out.logits_L.shape == (2, 3)
        assert len(out) == 2

    def test_batch_items_are_independent(self):
        model = build_model(lite_config(), seed=0)
        batch = images(3)
        together = ccan_forward(batch, model)
        alone = ccan_forward(batch[1:2], model)
        np.testing.assert_allclose(together.f_G.data[1], alone.f_G.data[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(together.items()[1].f_L.data, alone.f_L.data[0], rtol=0, atol=1e-12)

    def test_wrong_image_shape(self):
        model = build_model(lite_config(), seed=0)
        with pytest.raises(DimensionError):
            ccan_forward(images(1, shape=(8, 8, 3)), model)

    def test_empty_batch(self):
        with pytest.raises(ConfigurationError):
            ccan_forward([], build_model(lite_config()))

    def test_heads_skipped(self):
        out = ccan_forward(images(1), build_model(lite_config()), heads=False)
        assert out.logits_G is None and out.logits_L is None and out.f_G is not None


class TestBypass:
    def test_zero_self_attention_reduces_to_global_model(self):
        plain = build_model(lite_config('G'), seed=2)
        attended = zeroed(build_model(lite_config('G+SS'), seed=2), 'global.SS1')
        batch = images(2, seed=1)
        np.testing.assert_array_equal(ccan_forward(batch, attended).f_G.data, ccan_forward(batch, plain).f_G.data)

    def test_zero_cross_attention_reduces_to_two_branch_model(self):
        plain = build_model(lite_config('G+L'), seed=2)
        attended = build_model(lite_config('G+L+CC'), seed=2)
        for s in (1, 2):
            attended = zeroed(attended, f'local.{s}.CC2')
        batch = images(2, seed=1)
        np.testing.assert_array_equal(ccan_forward(batch, attended).f_L.data, ccan_forward(batch, plain).f_L.data)


class TestPartIndependence:
    @pytest.mark.parametrize('name', ['local.1.I2.path1.kernels', 'local.1.I2.path2.kernels',
                                      'local.1.I3.path2.kernels'])
    def test_part_parameters_only_move_their_part(self, name):
        model = build_model(lite_config(), seed=0, debug=True)
        changed = model.with_parameters({name: Tensor(model.params[name].data + 0.5)})
        batch = images(1)
        before, after = ccan_forward(batch, model).debug[0], ccan_forward(batch, changed).debug[0]
        assert not np.array_equal(before['parts'][0], after['parts'][0])
        np.testing.assert_array_equal(before['parts'][1], after['parts'][1])
        np.testing.assert_array_equal(before['Z2'], after['Z2'])


def straight_line_block(x, k1, k3, pool):
    """1x1 and padded 3x3 convolutions, ReLU, concat, then 2x2 average pooling"""
    H, W, _ = x.shape
    a = np.maximum(np.einsum('hwc,co->hwo', x, k1[0, 0]), 0.0)
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    b = np.zeros((H, W, k3.shape[3]))
    for i in range(3):
        for j in range(3):
            b += np.einsum('hwc,co->hwo', padded[i:i + H, j:j + W], k3[i, j])
    out = np.concatenate([a, np.maximum(b, 0.0)], axis=2)
    if pool:
        out = out.reshape(H // 2, 2, W // 2, 2, -1).mean(axis=(1, 3))
    return out


class TestBackboneBlock:
    def block(self, c_in, c_out, pool, seed=0, zero=False):
        rng = np.random.default_rng(seed)
        half = c_out // 2
        k1, k3 = rng.normal(size=(1, 1, c_in, half)), rng.normal(size=(3, 3, c_in, c_out - half))
        if zero:
            k1, k3 = np.zeros_like(k1), np.zeros_like(k3)
        return BackboneBlockParams(Tensor(k1), Tensor(k3), pool)

    def test_pooled_output_extent(self):
        x = Tensor(np.random.default_rng(1).uniform(size=(64, 32, 3)))
        params = self.block(3, 32, pool=True)
        assert params.out_channels == 32
        assert backbone_block_forward(x, params).shape == (32, 16, 32)

    def test_unpooled_keeps_extent(self):
        x = Tensor(np.random.default_rng(1).uniform(size=(8, 4, 3)))
        assert backbone_block_forward(x, self.block(3, 6, pool=False)).shape == (8, 4, 6)

    def test_zero_kernels_give_zero_output(self):
        x = Tensor(np.random.default_rng(2).normal(size=(8, 4, 3)))
        out = backbone_block_forward(x, self.block(3, 8, pool=True, zero=True))
        np.testing.assert_array_equal(out.data, np.zeros((4, 2, 8)))

    @pytest.mark.parametrize('pool', [True, False])
    def test_matches_straight_line_numpy(self, pool):
        for seed in range(5):
            x = np.random.default_rng(100 + seed).normal(size=(6, 4, 3))
            params = self.block(3, 5, pool=pool, seed=seed)
            np.testing.assert_allclose(backbone_block_forward(Tensor(x), params).data,
                                       straight_line_block(x, params.path1.data, params.path2.data, pool),
                                       rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            backbone_block_forward(Tensor(np.ones((8, 4, 2))), self.block(3, 4, pool=False))


class TestSliceParts:
    def test_single_part_is_identity(self):
        Z = Tensor(np.random.default_rng(1).normal(size=(4, 2, 3)))
        np.testing.assert_array_equal(slice_parts(Z, 1)[0].data, Z.data)

    def test_strips_resized_to_full_extent(self):
        Z = Tensor(np.arange(8.0).reshape(4, 2, 1))
        parts = slice_parts(Z, 2)
        assert [p.shape for p in parts] == [(4, 2, 1), (4, 2, 1)]
        np.testing.assert_allclose(parts[1].data[0, :, 0], Z.data[2, :, 0])
        np.testing.assert_allclose(parts[1].data[-1, :, 0], Z.data[3, :, 0])

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            slice_parts(Tensor(np.ones((5, 2, 1))), 2)


class TestGradients:
    def test_every_parameter_receives_a_gradient(self):
        model = build_model(lite_config(num_ids=2), seed=0)
        with Tape() as tape:
            breakdown = total_loss(ccan_forward(images(4), model), [0, 0, 1, 1], LOSS)
        backward(breakdown.tensor, tape)
        missing = [name for name, p in model.params.items() if p.grad is None]
        assert not missing
        assert all(p.grad.shape == p.shape for p in model.params.values())


class TestFeatures:
    def test_matches_forward_and_records_nothing(self):
        model = build_model(lite_config(), seed=0)
        batch = images(2)
        with Tape() as tape:
            rows = extract_features(batch, model)
        assert len(tape) == 0
        out = ccan_forward(batch, model)
        np.testing.assert_array_equal(rows[1][0].data, out.f_G.data[1])
        np.testing.assert_array_equal(rows[1][1].data, out.f_L.data[1])

    def test_repeatable(self):
        model = build_model(lite_config(), seed=0)
        batch = images(1)
        np.testing.assert_array_equal(extract_features(batch, model)[0][0].data,
                                      extract_features(batch, model)[0][0].data)

    def test_missing_branch_is_none(self):
        rows = extract_features(images(1), build_model(lite_config('L'), seed=0))
        assert rows[0][0] is None and rows[0][1].shape == (8,)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(lite_config('G+L+CC'), seed=5)
        path = str(tmp_path / 'model.ccac')
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)
        batch = images(1)
        np.testing.assert_array_equal(ccan_forward(batch, loaded).f_L.data, ccan_forward(batch, model).f_L.data)

    def test_header_round_trip(self):
        config = lite_config('G+SS', attn_k=2)
        assert ModelConfig.from_header(config.to_header()) == config

    def test_malformed_header(self):
        with pytest.raises(FormatError):
            ModelConfig.from_header('input_h = 8\n')

    def test_missing_entries(self, tmp_path):
        model = build_model(lite_config('G'), seed=0)
        entries = {name: t.data for name, t in model.params.items()}
        entries.pop('head.FCG2.weight')
        path = str(tmp_path / 'broken.ccac')
        data_io.write_checkpoint(path, model.config.to_header(), entries)
        with pytest.raises(FormatError):
            load_checkpoint(path)
