import numpy as np
import pytest

from wsinr import numerics as nx
from wsinr.encoding import FixedEncoder, HashGridConfig, HashGridEncoder
from wsinr.errors import ConfigError
from wsinr.model import GROUPS, ModelConfig, WindowBatch, WsiInr, params_digest
from wsinr.numerics import Tape

TINY = ModelConfig(in_width=8, conv_width=4, conv_layers=2, point_width=4, point_layers=2, hidden=6, head_width=4)
GRID = HashGridConfig(levels=4, base_resolution=4, scale=2.0, table_size=256, features=2)


def window(h=6, w=5, seed=0):
    rng = np.random.default_rng(seed)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([(cc.ravel() + 0.5) / 16, (rr.ravel() + 0.5) / 16], axis=1)
    return WindowBatch("s", "base", (0, 0), (h, w), coords, rng.random((h, w, 3)), (rng.random((h, w)) > 0.5).astype(np.uint8))


@pytest.fixture
def model():
    return WsiInr(TINY, np.random.default_rng(0))


@pytest.fixture
def encoder():
    return HashGridEncoder.create(GRID, np.random.default_rng(1))


def test_output_shapes(model, encoder):
    rec, seg = model.forward(encoder, window())
    assert rec.shape == (6, 5, 3)
    assert seg.shape == (6, 5, 2)
    assert np.allclose(seg.data.sum(axis=-1), 1.0, atol=1e-12)
    assert ((rec.data > 0) & (rec.data < 1)).all()


def test_groups_partition_parameters(model):
    names = [k for g in GROUPS for k in model.group(g)]
    assert sorted(names) == sorted(model.params)


def test_init_is_seeded():
    a = WsiInr(TINY, np.random.default_rng(3))
    b = WsiInr(TINY, np.random.default_rng(3))
    assert params_digest(a.params) == params_digest(b.params)
    assert all(not t.data.any() for k, t in a.params.items() if k.endswith(".b"))


@pytest.mark.parametrize("kind, width", [("none", 2), ("nerf-pe", 40)])
def test_first_layer_adapts_to_encoder_width(kind, width):
    from dataclasses import replace

    m = WsiInr(replace(TINY, in_width=width), np.random.default_rng(0))
    rec, _ = m.forward(FixedEncoder(kind, 10), window())
    assert rec.shape == (6, 5, 3)
    assert m.params["decoder/conv0.w"].shape[2] == width


def test_decoder_width_mismatch(model):
    with pytest.raises(ConfigError):
        model.forward(FixedEncoder("none"), window())


def test_invalid_dilations():
    with pytest.raises(ConfigError):
        ModelConfig(dilations=(2, 1))
    with pytest.raises(ConfigError):
        ModelConfig(dilations=(0, 1))


def test_set_trainable(model):
    model.set_trainable(["seg_head"])
    for k, t in model.params.items():
        assert t.requires_grad == k.startswith("seg_head/")


def test_frozen_groups_receive_no_gradient(model, encoder):
    model.set_trainable(["rec_head"])
    with Tape() as tape:
        rec, _ = model.forward(encoder, window())
        loss = nx.mean(rec)
    tape.backward(loss)
    for k, t in model.params.items():
        assert (t.grad is not None) == k.startswith("rec_head/")


def test_state_round_trip(model):
    other = WsiInr(TINY, np.random.default_rng(99))
    other.load_state(model.state())
    assert params_digest(other.params) == params_digest(model.params)


def test_load_state_rejects_mismatch(model):
    st = model.state()
    st.pop("decoder/fuse.w")
    with pytest.raises(ConfigError):
        model.load_state(st)


def test_digest_sensitive_to_single_bit(model):
    d = params_digest(model.params)
    t = model.params["seg_head/out.b"]
    t.data = t.data.copy()
    t.data[0] = np.nextafter(t.data[0], 1.0)
    assert params_digest(model.params) != d


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradients(seed, encoder):
    model = WsiInr(TINY, np.random.default_rng(seed))
    win = window(seed=seed)
    from wsinr.objectives import mse_loss
    from wsinr.pipeline import seg_loss

    def loss():
        rec, seg = model.forward(encoder, win)
        return nx.add(mse_loss(rec, win.image).total, seg_loss(seg, win.mask).total)

    groups = {g: model.group(g) for g in GROUPS}
    groups["tables"] = encoder.params()
    rep = nx.finite_diff_check(loss, groups, rng=np.random.default_rng(seed), samples=6)
    assert rep.passed, rep.lines()
