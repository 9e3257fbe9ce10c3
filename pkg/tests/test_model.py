import numpy as np
import pytest

from slicemoe import autodiff as ad
from slicemoe import numerics as nx
from slicemoe.config import SliceMoEConfig
from slicemoe.errors import ContractError
from slicemoe.model import SliceMoEClassifier, SliceMoELayer


@pytest.fixture
def model():
    return SliceMoEClassifier(SliceMoEConfig(d=16, n_slices=4, n_experts=6, router_hidden=12), 3, seed=4)


class TestLayer:
    def test_output_shape(self, model, rng):
        logits, lo = model.forward(rng.normal(size=(7, 16)))
        assert logits.shape == (7, 3) and lo.out.shape == (7, 16)
        assert lo.decision.expert_ids.shape == (28, 2)

    def test_sequence_mode_matches_flat(self, model, rng):
        x = rng.normal(size=(3, 5, 16))
        seq = model.layer.forward(x).out.value
        flat = model.layer.forward(x.reshape(15, 16)).out.value
        assert seq.shape == (3, 5, 16)
        assert seq.reshape(15, 16).tobytes() == flat.tobytes()

    def test_eval_is_deterministic(self, model, rng):
        x = rng.normal(size=(4, 16))
        assert model.forward(x)[0].value.tobytes() == model.forward(x)[0].value.tobytes()

    def test_training_needs_rng_when_dropout_active(self, model, rng):
        with pytest.raises(ContractError):
            model.forward(rng.normal(size=(2, 16)), training=True)

    def test_frozen_trace_replays_training_pass(self, rng):
        cfg = SliceMoEConfig(d=16, n_slices=4, n_experts=6, router_hidden=12, dropout=0.5, noise_sigma=0.7)
        model = SliceMoEClassifier(cfg, 3, seed=1)
        x = rng.normal(size=(5, 16))
        first, lo = model.forward(x, training=True, rng=nx.Rng(9))
        replay, _ = model.forward(x, training=True, frozen=lo.trace)
        assert replay.value.tobytes() == first.value.tobytes()
        again, _ = model.forward(x, training=True, rng=nx.Rng(9))
        assert again.value.tobytes() == first.value.tobytes()

    def test_noise_off_in_eval(self, rng):
        cfg = SliceMoEConfig(d=16, n_slices=4, n_experts=6, router_hidden=12, noise_sigma=2.0)
        model = SliceMoEClassifier(cfg, 3, seed=1)
        x = rng.normal(size=(5, 16))
        _, lo = model.forward(x)
        assert lo.trace.noise is None
        _, lo_noisy = model.forward(x, eval_noise=True, rng=nx.Rng(0))
        assert lo_noisy.trace.noise is not None

    def test_shuffled_output_is_in_original_coordinates(self, rng):
        """With identity experts the layer returns each slice scaled by its gate, in input order."""
        cfg = SliceMoEConfig(d=8, n_slices=2, top_k=1, n_experts=1, expert_hidden=4, permutation="shuffled", dropout=0.0)
        model = SliceMoEClassifier(cfg, 2, seed=3)
        ex = model.layer.experts
        ex.w1.value[0] = np.eye(4)
        ex.w2.value[0] = np.eye(4)
        x = np.abs(rng.normal(size=(3, 8)))
        out = model.layer.forward(x).out.value
        # a single expert always gets probability 1
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-15)
        assert model.permutation is not None

    def test_same_seed_same_init(self):
        a = SliceMoEClassifier(SliceMoEConfig(), 4, seed=2).parameters()
        b = SliceMoEClassifier(SliceMoEConfig(), 4, seed=2).parameters()
        for k in a:
            assert a[k].value.tobytes() == b[k].value.tobytes()

    def test_init_scale(self):
        p = SliceMoEClassifier(SliceMoEConfig(), 4, seed=0).parameters()
        # N(0, 1/fan_in): router w1 has fan_in 8 -> var 1/8
        assert np.var(p["router.w1"].value) == pytest.approx(1 / 8, rel=0.1)
        assert np.all(p["router.b1"].value == 0)

    def test_loss_bundle(self, model, rng):
        x, y = rng.normal(size=(6, 16)), rng.integers(0, 3, 6)
        bundle, _ = model.loss(x, y)
        assert bundle.total_value == pytest.approx(bundle.task_value + bundle.cap_value, abs=0)
        assert bundle.cap_value >= 0

    def test_bind_replaces_parameters(self, model):
        zeros = {k: ad.constant(np.zeros_like(v.value)) for k, v in model.parameters().items()}
        logits, _ = model.bind(zeros).forward(np.ones((2, 16)))
        np.testing.assert_array_equal(logits.value, 0.0)
        # the original is untouched
        assert np.any(model.head_w.value != 0)


def test_layer_constructor_with_rng():
    layer = SliceMoELayer(SliceMoEConfig(d=8, n_slices=2, n_experts=4), nx.Rng(0))
    assert set(layer.parameters()) == {
        "router.w1", "router.b1", "router.w2", "router.b2",
        "experts.w1", "experts.b1", "experts.w2", "experts.b2",
    }
