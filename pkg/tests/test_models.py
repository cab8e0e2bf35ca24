import numpy as np
import pytest

from auwave import tensor as T
from auwave.errors import ConfigError, InputError, ShapeError
from auwave.models import (AUWave, AUWaveConfig, RWR, RWRConfig, build_model, desk_auwave_config,
                           desk_rwr_config)
from auwave.tensor import Tensor

from gradcheck import numeric_grad, rel_err

SMALL = dict(n_stations=4, mlp_hidden=(8,), latent_dim=16, unet_blocks=3, layers_per_block=1,
             encoder_channels=(32, 32, 32), use_attention=False)


def obs(n, N=3, seed=0):
    return np.random.default_rng(seed).normal(size=(N, n))


def closed_form_auwave_params(cfg: AUWaveConfig) -> int:
    """Parameter count from the layer recipe, without building anything."""
    lin = lambda i, o: i * o + o
    conv3 = lambda i, o, bias: 9 * i * o + (o if bias else 0)
    gn = lambda c: 2 * c

    def res(i, o):
        return conv3(i, o, False) + gn(o) + conv3(o, o, False) + gn(o) + (lin(i, o) if i != o else 0)

    total, width = 0, cfg.n_stations
    for h in cfg.mlp_hidden:
        total += lin(width, h) + 2 * h
        width = h
    total += lin(width, cfg.latent_dim) + lin(cfg.latent_dim, 1024)
    enc, B, L = cfg.encoder_channels, cfg.unet_blocks, cfg.layers_per_block
    prev = 1
    for i, c in enumerate(enc):
        total += res(prev, c) + (L - 1) * res(c, c)
        if i < B - 1:
            total += conv3(c, c, True)
        prev = c
    if cfg.use_attention:
        total += 4 * lin(enc[-1], enc[-1])
    for j, c in enumerate(reversed(enc)):
        total += lin(prev + enc[B - 1 - j], c) + L * res(c, c)
        prev = c
    return total + lin(prev, 1)


# ------------------------------------------------------------------ configs
def test_reduced_parameter_count_matches_hand_derivation():
    model = AUWave(AUWaveConfig(**SMALL))
    mlp = (4 * 8 + 8) + 2 * 8 + (8 * 16 + 16) + (16 * 1024 + 1024)
    stage0 = (9 * 1 * 32) + 64 + (9 * 32 * 32) + 64 + (1 * 32 + 32)
    down = 9 * 32 * 32 + 32
    same_block = 2 * (9 * 32 * 32) + 2 * 64
    encoder = stage0 + down + same_block + down + same_block
    decoder = 3 * ((64 * 32 + 32) + same_block)
    head = 32 + 1
    assert mlp + encoder + decoder + head == 144873
    assert model.num_parameters() == 144873


@pytest.mark.parametrize("cfg", [AUWaveConfig(n_stations=5), desk_auwave_config(5),
                                 AUWaveConfig(**{**SMALL, "use_attention": True, "layers_per_block": 2})],
                         ids=["default", "desk", "small-attn"])
def test_parameter_count_matches_closed_form(cfg):
    model = AUWave(cfg)
    assert model.num_parameters() == closed_form_auwave_params(cfg)
    assert not any(p.materialized for p in model.parameters())


def test_default_parameter_count_is_stable():
    assert AUWave(AUWaveConfig(n_stations=5), seed=1).num_parameters() == \
        AUWave(AUWaveConfig(n_stations=5), seed=2).num_parameters() == 767244833


@pytest.mark.parametrize("bad", [dict(encoder_channels=(32, 48, 32)), dict(unet_blocks=6,
                                 encoder_channels=(32,) * 6), dict(unet_blocks=2, encoder_channels=(32, 32)),
                                 dict(layers_per_block=4), dict(encoder_channels=(32, 32)),
                                 dict(n_stations=0), dict(mlp_hidden=())])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        AUWaveConfig(**{**SMALL, **bad})


def test_decoder_channels_reverse_encoder():
    assert AUWaveConfig(n_stations=3).decoder_channels == (2688, 64, 64, 64, 64)


def test_structure_of_reduced_model():
    s = AUWave(AUWaveConfig(**{**SMALL, "use_attention": True})).structure()
    assert s["encoder_resolutions"] == [32, 16, 8]
    assert s["decoder_resolutions"] == [8, 16, 32]
    assert s["attention"] == {"channels": 32, "resolution": 8, "tokens": 64}
    assert s["output"] == (1, 32, 32)


# ------------------------------------------------------------------ forward
@pytest.mark.parametrize("kind,cfg", [("auwave", desk_auwave_config(5)), ("rwr", desk_rwr_config(5))])
def test_output_shape(kind, cfg):
    m = build_model(kind, cfg.to_dict(), seed=0)
    assert m(obs(5, N=2)).shape == (2, 1, 32, 32)


def test_attention_path_is_live():
    x = obs(4, seed=3)
    on = AUWave(AUWaveConfig(**{**SMALL, "use_attention": True}), seed=0).eval()
    off = AUWave(AUWaveConfig(**SMALL), seed=0).eval()
    # same seed; the attention layers shift later parameter indices, so compare
    # against the same model with the attention block bypassed
    y_on = on(x).data
    saved, on.attention = on.attention, None
    y_bypass = on(x).data
    on.attention = saved
    assert not np.allclose(y_on, y_bypass)
    assert off(x).shape == y_on.shape


def test_attention_weights_rows_sum_to_one():
    m = AUWave(AUWaveConfig(**{**SMALL, "use_attention": True}), seed=0).eval()
    m(obs(4))
    w = m.attention.last_weights
    assert w.shape == (3, 64, 64)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=1e-5)


def test_inputs_are_validated():
    m = AUWave(AUWaveConfig(**SMALL)).eval()
    with pytest.raises(ShapeError):
        m(obs(5))
    bad = obs(4)
    bad[1, 2] = np.nan
    with pytest.raises(InputError):
        m(bad)
    with pytest.raises(InputError):
        RWR(RWRConfig(n_stations=4))(np.full((2, 4), np.inf))


def test_seeded_build_is_deterministic():
    a = AUWave(desk_auwave_config(5), seed=11).state_dict()
    b = AUWave(desk_auwave_config(5), seed=11).state_dict()
    c = AUWave(desk_auwave_config(5), seed=12).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_inference_forward_is_deterministic_and_freezes_running_stats():
    m = AUWave(desk_auwave_config(5), seed=0)
    m.train()
    m(obs(5, N=4))
    m.eval()
    before = {k: v.copy() for k, v in m.named_buffers()}
    y1, y2 = m(obs(5, seed=8)).data, m(obs(5, seed=8)).data
    assert np.array_equal(y1, y2)
    assert all(np.array_equal(before[k], v) for k, v in m.named_buffers())


def test_initialisation_follows_recipe():
    m = AUWave(AUWaveConfig(**SMALL), seed=0)
    w = m.encoder[1].blocks[0].conv1.weight.data
    bound = np.sqrt(6.0 / (32 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert np.all(m.encoder[0].blocks[0].norm1.scale.data == 1)
    assert np.all(m.encoder[0].blocks[0].norm1.shift.data == 0)
    assert np.all(m.latent.bias.data == 0)


def _dyadic(rng, shape, scale=16):
    return rng.integers(-scale, scale + 1, size=shape) / scale


@pytest.mark.parametrize("kind", ["auwave", "rwr"])
def test_station_permutation_with_permuted_first_layer_is_bit_exact(kind):
    # dyadic weights and inputs make every first-layer product and sum exact,
    # so the contraction identity must hold bit for bit
    n = 5
    cfg = desk_auwave_config(n) if kind == "auwave" else desk_rwr_config(n)
    m = build_model(kind, cfg.to_dict(), seed=3, dtype=np.float64).eval()
    first = m.mlp[0] if kind == "auwave" else m.fc[0]
    rng = np.random.default_rng(0)
    first.weight.data = _dyadic(rng, first.weight.shape)
    x = _dyadic(rng, (4, n))
    y = m(x).data.copy()
    perm = rng.permutation(n)
    first.weight.data = first.weight.data[:, perm].copy()
    y_perm = m(x[:, perm]).data
    assert np.array_equal(y, y_perm)


def test_residual_identity_path_reproduces_mlp_grid():
    cfg = AUWaveConfig(**{**SMALL, "use_attention": True, "layers_per_block": 2})
    m = AUWave(cfg, seed=5, dtype=np.float64).eval()
    for mod in m.modules():
        if mod.__class__.__name__ == "ResidualBlock":
            for norm in (mod.norm1, mod.norm2):
                norm.scale.data = np.zeros_like(norm.scale.data)
                norm.shift.data = np.zeros_like(norm.shift.data)
    first_skip = m.encoder[0].blocks[0].skip
    w = np.zeros(first_skip.weight.shape)
    w[0, 0] = 1.0
    first_skip.weight.data = w
    first_skip.bias.data = np.zeros_like(first_skip.bias.data)
    last = m.decoder[-1].fuse
    w = np.zeros(last.weight.shape)
    w[0, cfg.decoder_channels[-2]] = 1.0   # pick channel 0 of the full-resolution skip
    last.weight.data = w
    last.bias.data = np.zeros_like(last.bias.data)
    w = np.zeros(m.head.weight.shape)
    w[0, 0] = 1.0
    m.head.weight.data = w
    m.head.bias.data = np.zeros_like(m.head.bias.data)
    x = obs(4, seed=2)
    grid = m.encode_grid(Tensor(x)).data
    assert np.array_equal(m(x).data, grid)


# ------------------------------------------------------------------ gradients
def model_gradcheck(model, x, target, per_tensor=3, seed=0):
    """Worst relative error over sampled entries of every parameter tensor.

    Biases start at zero, which puts ReLUs fed by dead patches exactly on their
    kink; random biases move the check to a generic point.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    model.train()
    ocean = np.ones((1, 1, 32, 32))
    ocean[..., :4, :4] = 0

    def loss_value():
        with T.no_grad():
            return T.mse_loss(model(x), target, ocean).item()

    loss = T.mse_loss(model(x), target, ocean)
    model.zero_grad()
    loss.backward()
    worst = {}
    for name, p in model.named_parameters():
        idx = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        num = numeric_grad(loss_value, p.data, h=1e-6, idx=idx).reshape(-1)[idx]
        ana = p.grad.reshape(-1)[idx]
        worst[name] = rel_err(ana, num, floor=1e-6)
    return worst


def reduced_models():
    auw = AUWave(AUWaveConfig(n_stations=3, mlp_hidden=(8, 8), latent_dim=8, unet_blocks=3,
                              layers_per_block=1, encoder_channels=(32, 32, 32), use_attention=True),
                 seed=4, dtype=np.float64)
    rwr = RWR(RWRConfig(n_stations=3, fc_hidden=(8,), feature_channels=2, conv_channels=(4, 4, 3)),
              seed=4, dtype=np.float64)
    return {"auwave": auw, "rwr": rwr}


@pytest.mark.parametrize("kind", ["auwave", "rwr"])
def test_whole_model_gradients_match_finite_differences(kind):
    model = reduced_models()[kind]
    x = obs(3, N=3, seed=9)
    target = np.random.default_rng(10).normal(size=(3, 1, 32, 32)) * 0.1
    worst = model_gradcheck(model, x, target)
    assert len(worst) == len(model.parameters())
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    assert not bad, bad
