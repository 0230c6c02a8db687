import numpy as np
import pytest
import torch

from stftf.core.types import LevelConfig, ModelConfig, NormalizationStats, ValidationError
from stftf.model import (CheckpointError, FrequencyPath, SpatioTemporalPath, StftCheckpoint, StftLevel, StftModel,
                         fft_filter, ifft_pad, load_stft, temporal_stack)
from stftf.model.layers import TransformerLayer, init_weights
from stftf.model.stft import max_modes
from stftf.tokenizer import detokenize, plan_layout

from conftest import finite_difference_check, identity_frequency_path, randomize


def lowpass_oracle(x, m_h, m_w):
    """numpy low-pass over the two token-grid axes of ``B x N_h x N_w x D``."""
    n_h, n_w = x.shape[1], x.shape[2]
    spec = np.fft.rfft2(x, axes=(1, 2))
    rows = np.array([min(i, n_h - i) < m_h for i in range(n_h)])
    spec[:, ~rows] = 0
    spec[:, :, m_w:] = 0
    return np.fft.irfft2(spec, s=(n_h, n_w), axes=(1, 2))


def direct_dft(x):
    """Plain double sum DFT over axes 0, 1 of an ``N_h x N_w`` array."""
    n_h, n_w = x.shape
    a, b = np.meshgrid(np.arange(n_h), np.arange(n_w), indexing="ij")
    out = np.zeros((n_h, n_w), dtype=complex)
    for k in range(n_h):
        for l in range(n_w):
            out[k, l] = np.sum(x * np.exp(-2j * np.pi * (k * a / n_h + l * b / n_w)))
    return out


def test_temporal_stack_lengths():
    h = torch.zeros(2, 5, 4, 4, 3)
    assert temporal_stack(h, None).shape[1] == 5
    assert temporal_stack(h, torch.zeros(2, 4, 4, 3)).shape[1] == 6
    with pytest.raises(ValidationError):
        temporal_stack(h, torch.zeros(2, 4, 3, 3))


def test_full_modes_invert_exactly():
    x = torch.randn(2, 6, 5, 3, dtype=torch.float64)
    c = fft_filter(x, max_modes(6), max_modes(5))
    back = ifft_pad(c, 6, 5, max_modes(6), max_modes(5))
    assert torch.max(torch.abs(back - x)) < 1e-5


def test_truncation_matches_numpy_lowpass():
    x = torch.randn(2, 8, 7, 3, dtype=torch.float64)
    back = ifft_pad(fft_filter(x, 2, 3), 8, 7, 2, 3)
    np.testing.assert_allclose(back.numpy(), lowpass_oracle(x.numpy(), 2, 3), atol=1e-12)


def test_temporal_fft_keeps_time_axis():
    x = torch.randn(1, 4, 6, 6, 2, dtype=torch.float64)
    c = fft_filter(x, 2, 2, temporal=True)
    assert c.shape == (1, 4, 3, 2, 2)
    full = ifft_pad(fft_filter(x, 4, 4, temporal=True), 6, 6, 4, 4, temporal=True)
    assert torch.allclose(full, x, atol=1e-10)


def test_constant_grid_has_only_zero_mode():
    x = torch.full((1, 5, 6, 2), 3.0, dtype=torch.float64)
    c = fft_filter(x, 3, 4)
    mags = c.abs()
    assert mags[0, 0, 0, 0].item() == pytest.approx(3.0 * 30)
    mags[0, 0, 0] = 0
    assert torch.all(mags < 1e-10)


def test_single_cosine_matches_direct_dft():
    n_h, n_w = 6, 5
    a = np.arange(n_h)[:, None] * np.ones((1, n_w))
    grid = np.cos(2 * np.pi * a / n_h)
    x = torch.from_numpy(grid[None, :, :, None].copy())
    c = fft_filter(x, 3, 3)[0, ..., 0].numpy()
    ref = direct_dft(grid)
    rows = [0, 1, 2, 4, 5]
    np.testing.assert_allclose(c, ref[rows][:, :3], atol=1e-9)
    nonzero = np.argwhere(np.abs(c) > 1e-9)
    # the +1 / -1 frequency pair, each n_h * n_w / 2
    assert sorted(map(tuple, nonzero)) == [(1, 0), (4, 0)]
    np.testing.assert_allclose(np.abs(c[1, 0]), n_h * n_w / 2)


def test_requested_modes_beyond_grid_raise():
    with pytest.raises(ValidationError):
        fft_filter(torch.zeros(1, 4, 4, 2), 4, 2)


def test_identity_frequency_path_reproduces_input_with_full_modes():
    lay = plan_layout(9, 9, 3, 3)
    fp, D = identity_frequency_path(lay, max_modes(lay.N_h), max_modes(lay.N_w))
    mixed = torch.randn(2, lay.N_h, lay.N_w, D, dtype=torch.float64)
    y = fp(mixed)
    assert y.shape == (2, lay.N_h, lay.N_w, 1, lay.patch_area)
    assert torch.max(torch.abs(y.reshape(mixed.shape) - mixed)) < 1e-5


def test_identity_frequency_path_is_spectral_truncation():
    lay = plan_layout(16, 14, 2, 2)
    fp, D = identity_frequency_path(lay, 3, 2)
    mixed = torch.randn(2, lay.N_h, lay.N_w, D, dtype=torch.float64)
    y = fp(mixed).reshape(mixed.shape)
    np.testing.assert_allclose(y.detach().numpy(), lowpass_oracle(mixed.numpy(), 3, 2), atol=1e-5)


def test_zero_input_zero_bias_gives_zero_output():
    lay = plan_layout(8, 8, 4, 4)
    fp = FrequencyPath(8, 1, 2, lay, 2, 2, 2).double()
    st = SpatioTemporalPath(8, 1, 2, lay, 2).double()
    init_weights(fp)
    init_weights(st)
    with torch.no_grad():
        fp.pos_embed.zero_()
        st.pos_embed.zero_()
    z = torch.zeros(1, lay.N_h, lay.N_w, 8, dtype=torch.float64)
    assert torch.all(fp(z) == 0)
    assert torch.all(st(z) == 0)


def test_spatiotemporal_path_permutation_equivariant_without_positions():
    lay = plan_layout(12, 12, 3, 3)
    st = SpatioTemporalPath(16, 2, 4, lay, 1).double()
    randomize(st, std=0.2)
    with torch.no_grad():
        st.pos_embed.zero_()
    x = torch.randn(1, lay.N_h, lay.N_w, 16, dtype=torch.float64)
    perm = torch.randperm(lay.n_tokens, generator=torch.Generator().manual_seed(1))
    xp = x.reshape(1, -1, 16)[:, perm].reshape(x.shape)
    y = st(x).reshape(1, lay.n_tokens, -1)
    yp = st(xp).reshape(1, lay.n_tokens, -1)
    assert torch.allclose(yp, y[:, perm], atol=1e-12)
    with torch.no_grad():
        st.pos_embed.normal_(0, 1.0)
    y = st(x).reshape(1, lay.n_tokens, -1)
    yp = st(xp).reshape(1, lay.n_tokens, -1)
    assert not torch.allclose(yp, y[:, perm], atol=1e-6)


def test_transformer_layer_zeroed_is_identity():
    layer = TransformerLayer(8, 2).double()
    randomize(layer)
    layer.zero_residual_branches()
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    assert torch.equal(layer(x), x)


def test_variable_mix_shapes_and_linearity():
    cfg = LevelConfig(p_h=4, p_w=4, hidden_dim=8, n_heads=2)
    lvl = StftLevel(cfg, 8, 8, n_vars=1, t_len=3).double()
    init_weights(lvl)
    tokens = torch.zeros(2, 2, 2, 1, 3 * 16, dtype=torch.float64)
    out = lvl.variable_mix(tokens, 2)
    assert out.shape == (2, 2, 2, 8)
    assert torch.all(out == 0)
    lvl3 = StftLevel(cfg, 8, 8, n_vars=2, t_len=3, freq_mode="3D").double()
    assert lvl3.variable_mix(torch.zeros(1, 2, 2, 2, 48, dtype=torch.float64), 1).shape == (1, 3, 2, 2, 8)


def test_merge_is_additive():
    cfg = LevelConfig(p_h=4, p_w=4, o_h=1, o_w=1, m_h=2, m_w=2, hidden_dim=8, n_heads=2, depth=1)
    lvl = StftLevel(cfg, 10, 10, n_vars=2, t_len=2).double()
    randomize(lvl, std=0.1)
    hist = torch.randn(1, 2, 10, 10, 2, dtype=torch.float64)
    y_st, y_f = lvl.patch_predictions(hist)
    full = lvl(hist).u_level
    assert torch.allclose(full, detokenize(y_st + y_f, lvl.layout), atol=1e-12)
    with torch.no_grad():
        lvl.freq_path.out.weight.zero_()
        lvl.freq_path.out.bias.zero_()
    assert torch.allclose(lvl(hist).u_level, detokenize(lvl.patch_predictions(hist)[0], lvl.layout), atol=1e-12)


def _tiny_config(levels=2, freq_mode="2D", condition_mode="cumulative"):
    lv = [LevelConfig(p_h=4, p_w=4, o_h=1, o_w=1, m_h=2, m_w=2, depth=1, hidden_dim=8, n_heads=2),
          LevelConfig(p_h=2, p_w=2, o_h=1, o_w=1, m_h=2, m_w=2, depth=1, hidden_dim=8, n_heads=2)]
    return ModelConfig(k=2, levels=tuple(lv[:levels]), freq_mode=freq_mode, condition_mode=condition_mode)


@pytest.mark.parametrize("freq_mode", ["2D", "3D"])
@pytest.mark.parametrize("condition_mode", ["cumulative", "last_level"])
def test_forward_sum_of_levels_is_exact(freq_mode, condition_mode):
    model = StftModel(_tiny_config(2, freq_mode, condition_mode), 8, 8, 2).double()
    randomize(model, std=0.1)
    hist = torch.randn(3, 2, 8, 8, 2, dtype=torch.float64)
    u, outs = model(hist)
    assert u.shape == (3, 8, 8, 2)
    assert torch.all(torch.isfinite(u))
    total = torch.zeros_like(u)
    for o in outs:
        total = total + o.u_level
    assert torch.equal(total, u)
    assert {"e_norm", "f_energy"} <= set(outs[0].diagnostics)


def test_single_level_output_is_block_output():
    model = StftModel(_tiny_config(1), 8, 8, 1).double()
    randomize(model)
    hist = torch.randn(1, 2, 8, 8, 1, dtype=torch.float64)
    u, outs = model(hist)
    assert torch.equal(u, outs[0].u_level)


def test_fresh_model_predicts_zero():
    model = StftModel(_tiny_config(2), 8, 8, 2).double()
    assert torch.all(model.predict(torch.randn(1, 2, 8, 8, 2, dtype=torch.float64)) == 0)


def test_history_shape_checked():
    model = StftModel(_tiny_config(2), 8, 8, 2)
    with pytest.raises(ValidationError):
        model(torch.zeros(1, 3, 8, 8, 2))


def test_one_step_mse_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = StftModel(_tiny_config(2), 8, 8, 2).double()
    randomize(model, std=0.2)
    hist = torch.randn(2, 2, 8, 8, 2, dtype=torch.float64)
    target = torch.randn(2, 8, 8, 2, dtype=torch.float64)

    def loss():
        return torch.mean((model.predict(hist) - target) ** 2)

    params = [p for p in model.parameters()]
    assert finite_difference_check(loss, params, n_entries=400) < 1e-4


def test_gradients_finite_for_random_inputs():
    model = StftModel(_tiny_config(2, "3D"), 8, 8, 2).double()
    randomize(model, std=0.2)
    loss = model.predict(torch.randn(2, 2, 8, 8, 2, dtype=torch.float64) * 10).pow(2).mean()
    loss.backward()
    assert all(torch.all(torch.isfinite(p.grad)) for p in model.parameters())


def test_mode_clamp_warns(caplog):
    cfg = ModelConfig(k=1, levels=(LevelConfig(p_h=4, p_w=4, m_h=8, m_w=8, hidden_dim=8, n_heads=2),))
    with caplog.at_level("WARNING"):
        model = StftModel(cfg, 8, 8, 1)
    assert model.levels[0].modes == (2, 2)
    assert "clamping" in caplog.text


def test_plasma_first_level_config_is_finite():
    cfg = LevelConfig(p_h=128, p_w=128, o_h=1, o_w=1, m_h=8, m_w=8, depth=6, hidden_dim=128, n_heads=4)
    lvl = StftLevel(cfg, 100, 250, n_vars=6, t_len=5, freq_mode="3D")
    init_weights(lvl, torch.Generator().manual_seed(0))
    with torch.no_grad():
        out = lvl(torch.randn(1, 5, 100, 250, 6)).u_level
    assert out.shape == (1, 100, 250, 6)
    assert torch.all(torch.isfinite(out))


def test_plasma_two_level_model_runs():
    cfg = ModelConfig(k=5, freq_mode="3D", levels=(
        LevelConfig(p_h=128, p_w=128, o_h=1, o_w=1, m_h=8, m_w=8, depth=1, hidden_dim=16, n_heads=2),
        LevelConfig(p_h=64, p_w=64, o_h=1, o_w=1, m_h=8, m_w=8, depth=1, hidden_dim=16, n_heads=2)))
    model = StftModel(cfg, 100, 250, 6, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        u, outs = model(torch.randn(1, 5, 100, 250, 6))
    assert u.shape == (1, 100, 250, 6) and len(outs) == 2
    assert torch.all(torch.isfinite(u))


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    cfg = _tiny_config(2)
    model = StftModel(cfg, 8, 8, 2, generator=torch.Generator().manual_seed(3)).double()
    randomize(model, seed=4)
    stats = NormalizationStats((0.0, 1.0), (1.0, 2.0))
    ck = StftCheckpoint(model, cfg, stats, {"width": 8, "height": 8, "variables": ["a", "b"], "dt": 1.0,
                                            "domain_extent": [1.0, 1.0]})
    h = ck.save(tmp_path / "m.pt")
    back = load_stft(tmp_path / "m.pt")
    assert back.content_hash == h
    assert back.stats == stats
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), back.model.state_dict().items()):
        assert n1 == n2 and p1.dtype == p2.dtype and torch.equal(p1, p2)
    with pytest.raises(CheckpointError):
        load_stft(tmp_path / "m.pt", expected_config=_tiny_config(1))
    with pytest.raises(FileNotFoundError):
        load_stft(tmp_path / "missing.pt")
