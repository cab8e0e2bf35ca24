import math
import struct

import numpy as np
import pytest

from auwave import data as D
from auwave import synthetic as S
from auwave import train as TR
from auwave.errors import ConfigError, FormatError, NonFiniteError, TrainingError
from auwave.models import AUWave, AUWaveConfig, RWR, RWRConfig
from auwave.optim import Adam, AdamState, StepDecaySchedule, adam_step
from auwave.nn import Parameter
from auwave.tensor import Tensor

TINY_RWR = RWRConfig(n_stations=5, fc_hidden=(8,), feature_channels=2, conv_channels=(4, 4, 4))
TINY_AUWAVE = AUWaveConfig(n_stations=5, mlp_hidden=(16,), latent_dim=16, unet_blocks=3,
                           layers_per_block=1, encoder_channels=(32, 32, 32), use_attention=False)


def synthetic_dataset(T=40, seed=0, **overrides):
    cfg = S.default_config(seed, T=T)
    cfg = S.SyntheticConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, **overrides})
    return D.to_log_space(S.generate(cfg).to_dataset())


def param(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype)
    return Parameter(arr.shape, lambda: arr.copy())


class LookupModel:
    """Stub network: obs column 0 carries a sample index, output is a fixed table row."""

    def __init__(self, table):
        self.table = table
        self.training = True

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def __call__(self, obs):
        return Tensor(self.table[np.asarray(obs)[:, 0].astype(int)])


def indexed_dataset(fields, land):
    T = len(fields)
    times = tuple(D.parse_timestamp(f"2024-01-01T{h:02d}:00:00Z") for h in range(T))
    obs = np.arange(T, dtype=np.float32)[:, None]
    return D.AlignedDataset(times, ("S",), obs, fields.astype(np.float32), land.astype(np.uint8),
                            transform_applied=True)


# ------------------------------------------------------------------- config
@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(lr=1e-2), dict(lr=1e-6), dict(gamma=0.5),
                                dict(gamma=1.0), dict(patience=0), dict(batch_size=1),
                                dict(max_epochs=0), dict(max_steps=0)])
def test_out_of_range_config_is_rejected(kw):
    with pytest.raises(ConfigError):
        TR.TrainConfig(**kw)


def test_range_endpoints_are_accepted():
    TR.TrainConfig(lr=1e-5, gamma=0.9)
    TR.TrainConfig(lr=1e-3, gamma=0.99)


def test_step_decay_schedule():
    sched = TR.TrainConfig(lr=1e-3, gamma=0.95).schedule()
    for e in (0, 1, 7, 99):
        assert math.isclose(sched.lr(e), 1e-3 * 0.95 ** e, rel_tol=1e-12)
    assert StepDecaySchedule(1e-3, 0.9, step_size=3).lr(5) == pytest.approx(1e-3 * 0.9)


# ---------------------------------------------------------------- optimizer
def test_adam_first_step_moves_by_lr_against_gradient_sign():
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    p = param([1.0, -2.0, 0.5])
    adam_step([p], [np.array([0.3, -4.0, 0.0])], AdamState(), lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.5], rtol=1e-7)


def test_adam_second_step_matches_hand_computation():
    p = param([0.0])
    st = AdamState()
    adam_step([p], [np.array([1.0])], st, lr=0.1)
    adam_step([p], [np.array([-1.0])], st, lr=0.1)
    first = 0.1 * 1.0 / (1.0 + 1e-8)
    m = 0.9 * 0.1 * 1.0 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001
    second = 0.1 * (m / (1 - 0.9 ** 2)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p.data[0] == pytest.approx(-first - second, rel=1e-12)


def test_adam_rejects_overflowing_gradients_without_side_effects():
    p = param([1.0], np.float32)
    st = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([1e30], dtype=np.float32)], st, lr=1e-3)
    assert st.step == 0 and p.data[0] == 1.0


# ------------------------------------------------------------ early stopping
def test_patience_one_stops_after_first_non_improvement():
    es = TR.EarlyStopState(patience=1)
    assert es.update(0, 1.0) is False
    assert es.update(1, 1.1) is True
    assert es.best_epoch == 0 and es.best_loss == 1.0


def test_stop_iff_epochs_since_improvement_reaches_patience():
    es = TR.EarlyStopState(patience=3)
    losses = [5.0, 4.0, 4.5, 4.0, 3.9, 4.1, 4.2, 4.3, 1.0]
    stops = [es.update(e, l) for e, l in enumerate(losses)]
    assert stops == [False, False, False, False, False, False, False, True, False]


def test_train_with_patience_one_returns_first_epoch_model(monkeypatch):
    scripted = iter([1.0, 1.1, 0.5])
    monkeypatch.setattr(TR, "evaluate_split_loss", lambda *a, **k: next(scripted))
    ds = synthetic_dataset()
    model = RWR(TINY_RWR, seed=0)
    snapshots = []
    res = TR.train(model, ds, D.chronological_split(ds.n_times),
                   TR.TrainConfig(patience=1, max_epochs=10, batch_size=8),
                   on_epoch=lambda e, l: snapshots.append(model.state_dict()))
    assert len(res.history) == 2 and res.stopped_early
    assert res.best_epoch == 0 and res.best_val_loss == 1.0
    final = model.state_dict()
    assert all(np.array_equal(final[k], snapshots[0][k]) for k in final)
    assert not all(np.array_equal(final[k], snapshots[1][k]) for k in final)


# --------------------------------------------------------------- split loss
def _fixture():
    land = np.zeros((32, 32))
    land[0, :2] = 1
    fields = np.zeros((2, 1, 32, 32))
    fields[0] = 0.5
    fields[1] = 1.0
    fields[:, 0][:, land == 1] = 0
    return fields, land


def test_perfect_model_has_zero_loss():
    fields, land = _fixture()
    ds = indexed_dataset(fields, land)
    assert TR.evaluate_split_loss(LookupModel(ds.fields), ds, [0, 1]) == 0.0


def test_zero_predictor_loss_by_hand():
    fields, land = _fixture()
    ds = indexed_dataset(fields, land)
    # every ocean cell contributes the square of its target
    assert TR.evaluate_split_loss(LookupModel(np.zeros_like(ds.fields)), ds, [0, 1]) == (0.25 + 1.0) / 2
    assert TR.evaluate_split_loss(LookupModel(np.zeros_like(ds.fields)), ds, [1]) == 1.0


def test_land_errors_do_not_count():
    fields, land = _fixture()
    ds = indexed_dataset(fields, land)
    pred = ds.fields.copy()
    pred[:, 0, 0, 0] = 100.0
    assert TR.evaluate_split_loss(LookupModel(pred), ds, [0, 1]) == 0.0


def test_split_loss_is_repeatable_and_rejects_empty_indices():
    ds = synthetic_dataset()
    model = AUWave(TINY_AUWAVE, seed=1)
    a = TR.evaluate_split_loss(model, ds, range(5))
    assert a == TR.evaluate_split_loss(model, ds, range(5))
    with pytest.raises(ConfigError):
        TR.evaluate_split_loss(model, ds, [])


# ----------------------------------------------------------------- training
def test_train_requires_log_space_and_non_empty_splits():
    ds = synthetic_dataset()
    metres = D.to_metres(ds)
    with pytest.raises(ConfigError):
        TR.train(RWR(TINY_RWR), metres, D.chronological_split(40), TR.TrainConfig(max_epochs=1))
    empty = D.SplitIndices(range(0, 30), range(30, 30), range(30, 40))
    with pytest.raises(ConfigError):
        TR.train(RWR(TINY_RWR), ds, empty, TR.TrainConfig(max_epochs=1))


def test_history_lr_best_loss_and_reproducibility():
    ds = synthetic_dataset(T=60)
    sp = D.chronological_split(60)
    cfg = TR.TrainConfig(lr=1e-3, gamma=0.9, max_epochs=6, batch_size=8, seed=3)
    a = TR.train(RWR(TINY_RWR, seed=2), ds, sp, cfg)
    b = TR.train(RWR(TINY_RWR, seed=2), ds, sp, cfg)
    for e, h in enumerate(a.history):
        assert math.isclose(h.lr, 1e-3 * 0.9 ** e, rel_tol=1e-12)
    tests = [h.test_loss for h in a.history]
    assert a.best_val_loss == min(tests) and a.best_epoch == int(np.argmin(tests))
    assert a.history_csv() == b.history_csv()
    assert a.history[-1].test_loss < a.history[0].test_loss


def test_best_model_is_restored():
    ds = synthetic_dataset(T=60)
    sp = D.chronological_split(60)
    res = TR.train(RWR(TINY_RWR, seed=2), ds, sp, TR.TrainConfig(max_epochs=5, batch_size=8))
    assert TR.evaluate_split_loss(res.model, ds, sp.test) == res.best_val_loss
    assert not res.model.training


def test_trailing_single_sample_batch_is_merged():
    # 33 training samples with batch 32 would leave a 1-sample batch
    ds = synthetic_dataset(T=48)
    sp = D.SplitIndices(range(0, 33), range(33, 40), range(40, 48))
    res = TR.train(AUWave(TINY_AUWAVE, seed=0), ds, sp, TR.TrainConfig(max_epochs=1, batch_size=32))
    assert res.optimizer.state.step == 1


def test_max_steps_caps_training():
    ds = synthetic_dataset(T=60)
    res = TR.train(RWR(TINY_RWR), ds, D.chronological_split(60),
                   TR.TrainConfig(max_epochs=50, max_steps=7, batch_size=8))
    assert res.optimizer.state.step == 7 and len(res.history) == 2


def test_non_finite_parameters_abort_training():
    ds = synthetic_dataset()
    model = RWR(TINY_RWR)
    model.head.bias.data = np.full_like(model.head.bias.data, np.inf)
    with pytest.raises(TrainingError):
        TR.train(model, ds, D.chronological_split(40), TR.TrainConfig(max_epochs=1))


def test_epoch_callback_can_abort():
    class Stop(Exception):
        pass

    def cb(epoch, loss):
        raise Stop

    ds = synthetic_dataset()
    with pytest.raises(Stop):
        TR.train(RWR(TINY_RWR), ds, D.chronological_split(40), TR.TrainConfig(max_epochs=3), on_epoch=cb)


# ------------------------------------------------------------- checkpoints
@pytest.fixture
def trained(tmp_path):
    ds = synthetic_dataset(T=40)
    res = TR.train(AUWave(TINY_AUWAVE, seed=4), ds, D.chronological_split(40),
                   TR.TrainConfig(max_epochs=2, batch_size=8))
    path = TR.save_checkpoint(res.model, tmp_path / "m.auwc", res.optimizer, res.best_epoch,
                              res.best_val_loss)
    return res, ds, path


def test_checkpoint_round_trip_is_bit_exact(trained):
    res, ds, path = trained
    model, info = TR.load_checkpoint(path, kind="auwave")
    assert np.array_equal(TR.predict(model, ds.obs), TR.predict(res.model, ds.obs))
    assert info.epoch == res.best_epoch and info.best_val_loss == res.best_val_loss
    assert info.adam["step"] == res.optimizer.state.step
    for i, m in enumerate(res.optimizer.state.m):
        assert np.array_equal(info.adam_moments[f"adam.m.{i}"], m)


def test_checkpoint_header_layout(trained):
    _, _, path = trained
    blob = path.read_bytes()
    assert blob[:4] == b"AUWC" and struct.unpack_from("<H", blob, 4) == (1,)


@pytest.mark.parametrize("cut", [3, 10, -1, -100])
def test_truncated_checkpoint_is_a_format_error(trained, tmp_path, cut):
    _, _, path = trained
    bad = tmp_path / "bad.auwc"
    bad.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FormatError):
        TR.load_checkpoint(bad)


def test_checkpoint_kind_mismatch_and_bad_header(trained, tmp_path):
    _, _, path = trained
    with pytest.raises(FormatError):
        TR.load_checkpoint(path, kind="rwr")
    blob = path.read_bytes()
    for mutated in (b"XXXX" + blob[4:], blob[:4] + struct.pack("<H", 2) + blob[6:], blob + b"\0"):
        (tmp_path / "x.auwc").write_bytes(mutated)
        with pytest.raises(FormatError):
            TR.load_checkpoint(tmp_path / "x.auwc")


def test_rwr_checkpoint_round_trip(tmp_path):
    model = RWR(TINY_RWR, seed=9).eval()
    TR.save_checkpoint(model, tmp_path / "r.auwc")
    back, info = TR.load_checkpoint(tmp_path / "r.auwc", kind="rwr")
    x = np.random.default_rng(0).random((3, 5)).astype(np.float32)
    assert np.array_equal(TR.predict(back, x), TR.predict(model, x))
    assert info.best_val_loss is None and info.adam is None


# ---------------------------------------------------------- learnability
def constant_field_dataset(T):
    return synthetic_dataset(T=T, components=(), noise_sigma=0.0, base_level=1.0)


def test_constant_field_is_learned_within_fifty_epochs():
    # every target cell is log1p(1 m); 500 steps per epoch with a decaying rate
    # let the network settle on the constant
    ds = constant_field_dataset(1430)
    res = TR.train(RWR(TINY_RWR, seed=0), ds, D.chronological_split(ds.n_times),
                   TR.TrainConfig(lr=1e-3, gamma=0.9, max_epochs=50, batch_size=2, seed=0))
    assert res.best_val_loss < 1e-6
    assert len(res.history) <= 50


def test_normalised_model_on_zero_variance_batch_aborts_with_diagnostic():
    # identical samples give an exactly constant feature map; each group norm
    # then scales gradients by 1/sqrt(eps), and the optimizer refuses the step
    ds = constant_field_dataset(40)
    with pytest.raises(TrainingError, match="too large"):
        TR.train(AUWave(TINY_AUWAVE, seed=0), ds, D.chronological_split(40),
                 TR.TrainConfig(max_epochs=1, batch_size=2))
