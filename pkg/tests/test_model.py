"""
Tests for parameter initialization, the fusion transformer and attention capture.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from attbalance.config import ConfigurationManager
from attbalance.data import generate
from attbalance.errors import DimensionError, NumericalError
from attbalance.geometry import rasterize_mask
from attbalance.model import (
    AttentionStack,
    ModelParams,
    forward,
    forward_batch,
    head_averaged_similarity,
    init_params,
    parameter_shapes,
)
from attbalance.numerics import Tape, Tensor, grad_check, no_grad, stack_scalars, sum_all


class TestParameters:
    """Test parameter shapes and deterministic initialization."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = ConfigurationManager.create_config_from_template("tiny").model

    def test_shapes(self):
        """Test every layer contributes its attention and feed-forward tensors."""
        shapes = parameter_shapes(self.config)
        c = self.config.d_model
        assert shapes["embed.token"] == (self.config.vocab_size, c)
        assert shapes["embed.visual_pos"] == (self.config.n_visual, c)
        assert shapes["embed.object_query"] == (1, c)
        assert shapes["layers.1.attn.q.weight"] == (c, c)
        assert shapes["head.fc3.weight"] == (c, 4)
        assert "layers.2.attn.q.weight" not in shapes

    def test_init_is_deterministic(self):
        """Test the same seed yields identical parameters."""
        a = init_params(self.config, seed=3)
        b = init_params(self.config, seed=3)
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)

    def test_seed_changes_init(self):
        """Test different seeds yield different weights."""
        a = init_params(self.config, seed=0)
        b = init_params(self.config, seed=1)
        assert not np.array_equal(a["embed.token"].data, b["embed.token"].data)

    def test_constant_initializations(self):
        """Test norm gains start at one and the last head bias at zero."""
        params = init_params(self.config, seed=0)
        assert np.all(params["layers.0.norm1.gain"].data == 1.0)
        assert np.all(params["final_norm.bias"].data == 0.0)
        assert np.all(params["head.fc3.bias"].data == 0.0)

    def test_uniform_bounds(self):
        """Test weights lie within one over the square root of their fan-in."""
        params = init_params(self.config, seed=0)
        bound = 1.0 / np.sqrt(self.config.d_model)
        assert np.max(np.abs(params["layers.0.attn.q.weight"].data)) <= bound

    def test_copy_is_independent(self):
        """Test a copy shares no arrays with the original."""
        params = init_params(self.config, seed=0)
        clone = params.copy(requires_grad=False)
        params["embed.token"].assign(np.zeros(params["embed.token"].shape))
        assert not np.array_equal(clone["embed.token"].data, params["embed.token"].data)
        assert clone["embed.token"].requires_grad is False

    def test_wrong_shape_rejected(self):
        """Test a parameter set with a mis-shaped tensor."""
        params = init_params(self.config, seed=0)
        tensors = dict(params.items())
        tensors["head.fc3.bias"] = Tensor(np.zeros(3))
        with pytest.raises(DimensionError):
            ModelParams(self.config, tensors)


class TestForward:
    """Test the forward pass and attention capture."""

    def setup_method(self):
        """Set up test fixtures."""
        self.run_config = ConfigurationManager.create_config_from_template("tiny")
        self.dataset = generate(self.run_config.dataset)
        self.params = init_params(self.run_config.model, seed=0)
        self.sample = self.dataset.train[0]

    def test_prediction_shape(self):
        """Test the prediction is a box inside the unit square."""
        pred, attn = forward(self.params, self.sample)
        assert pred.shape == (4,)
        assert np.all((pred.data > 0.0) & (pred.data < 1.0))
        assert len(attn) == 0

    def test_maps_are_distributions(self):
        """Test every captured map is a distribution over the visual cells."""
        _, attn = forward(self.params, self.sample, [1, 0])
        assert attn.layers == [0, 1]
        for m in attn.maps:
            assert m.shape == (self.run_config.model.n_visual,)
            assert np.all(m.data >= 0.0)
            assert m.data.sum() == pytest.approx(1.0)

    def test_capture_does_not_change_prediction(self):
        """Test capturing attention is a side computation."""
        plain, _ = forward(self.params, self.sample)
        captured, _ = forward(self.params, self.sample, [0, 1])
        assert np.allclose(plain.data, captured.data)

    def test_raw_capture_state(self):
        """Test the raw residual stream gives different maps but the same box."""
        raw_model = replace(self.run_config.model, capture_state="raw")
        raw_params = ModelParams(raw_model, dict(self.params.items()))

        pred_n, attn_n = forward(self.params, self.sample, [1])
        pred_r, attn_r = forward(raw_params, self.sample, [1])
        assert np.allclose(pred_n.data, pred_r.data)
        assert attn_r.maps[0].data.sum() == pytest.approx(1.0)
        assert not np.allclose(attn_n.maps[0].data, attn_r.maps[0].data)

    def test_invalid_capture_layer(self):
        """Test capturing a layer the model does not have."""
        with pytest.raises(ValueError):
            forward(self.params, self.sample, [2])

    def test_wrong_feature_shape(self):
        """Test a sample whose grid does not match the model."""
        bad = replace(self.sample, features=np.zeros((4, 4, self.run_config.model.feature_dim)))
        with pytest.raises(DimensionError):
            forward(self.params, bad)

    def test_too_many_tokens(self):
        """Test an expression longer than the model's text length."""
        bad = replace(self.sample, tokens=[1] * (self.run_config.model.max_text_len + 1))
        with pytest.raises(DimensionError):
            forward(self.params, bad)

    def test_non_finite_activations(self):
        """Test a NaN parameter surfaces as a numerical error naming the layer."""
        self.params["embed.object_query"].assign(np.full((1, self.run_config.model.d_model), np.nan))
        with pytest.raises(NumericalError) as excinfo:
            forward(self.params, self.sample)
        assert excinfo.value.component == "layer 0"

    def test_forward_batch_matches_forward(self):
        """Test batch evaluation is per-sample evaluation in order."""
        samples = self.dataset.train[:3]
        batch = forward_batch(self.params, samples, [1])
        for sample, (pred, attn) in zip(samples, batch):
            single, single_attn = forward(self.params, sample, [1])
            assert np.allclose(pred.data, single.data)
            assert np.allclose(attn.maps[0].data, single_attn.maps[0].data)

    def test_no_grad_forward(self):
        """Test evaluation under no_grad leaves nothing on the tape."""
        with Tape() as tape:
            with no_grad():
                pred, attn = forward(self.params, self.sample, [0, 1])
            assert len(tape) == 0
        assert pred.requires_grad is False
        assert attn.maps[0].requires_grad is False

    def test_in_mask_gradient(self):
        """Test the in-box attention mass is differentiable end to end."""
        mask = rasterize_mask(self.sample.box, self.sample.grid)
        subset = {
            name: self.params[name]
            for name in (
                "embed.visual_pos",
                "layers.0.attn.q.weight",
                "layers.0.attn.k.weight",
                "layers.1.norm1.gain",
            )
        }

        def objective():
            _, attn = forward(self.params, self.sample, [0, 1])
            return sum_all(stack_scalars(attn.in_mask_tensors(mask)))

        report = grad_check(objective, subset, entries=4, seed=0, tol=1e-4)
        assert report.passed

    def test_batch_permutation(self):
        """Test permuting the batch permutes the outputs and nothing else."""
        samples = self.dataset.train[:4]
        order = [2, 0, 3, 1]
        batch = forward_batch(self.params, samples, [0, 1])
        permuted = forward_batch(self.params, [samples[i] for i in order], [0, 1])
        for position, index in enumerate(order):
            pred, attn = permuted[position]
            assert np.array_equal(pred.data, batch[index][0].data)
            for a, b in zip(attn.maps, batch[index][1].maps):
                assert np.array_equal(a.data, b.data)

    def test_batch_of_eight_timing(self):
        """Test a batch of 8 on the tiny model runs in under a second."""
        samples = self.dataset.train[:8]
        assert len(samples) == 8
        start = time.perf_counter()
        forward_batch(self.params, samples, [0, 1])
        assert time.perf_counter() - start < 1.0


class TestAttentionStack:
    """Test the captured-attention container."""

    def test_similarity_matches_numpy(self):
        """Test head-averaged similarity equals the all-channel dot product scaled per head."""
        rng = np.random.default_rng(0)
        query = rng.normal(size=8)
        keys = rng.normal(size=(5, 8))
        n_heads = 2
        out = head_averaged_similarity(Tensor(query), Tensor(keys), n_heads).data
        expected = keys @ query / (np.sqrt(8 // n_heads) * n_heads)
        assert np.allclose(out, expected)

    def test_similarity_rejects_bad_heads(self):
        """Test a width that does not split into the heads."""
        with pytest.raises(DimensionError):
            head_averaged_similarity(Tensor(np.ones(6)), Tensor(np.ones((3, 6))), 4)

    def test_length_mismatch(self):
        """Test layers, maps and similarities must align."""
        with pytest.raises(DimensionError):
            AttentionStack(layers=[0, 1], maps=[Tensor(np.ones(4))], similarities=[Tensor(np.ones(4))])

    def test_layers_must_increase(self):
        """Test out-of-order layers are rejected."""
        maps = [Tensor(np.ones(4) / 4)] * 2
        with pytest.raises(ValueError):
            AttentionStack(layers=[1, 0], maps=maps, similarities=maps)

    def test_select_and_lookup(self):
        """Test selecting a sub-stack and looking up a missing layer."""
        maps = [Tensor(np.full(4, 0.25)), Tensor(np.array([0.7, 0.1, 0.1, 0.1]))]
        stack = AttentionStack(layers=[2, 5], maps=maps, similarities=maps)
        assert stack.select([5]).layers == [5]
        assert stack.map_for(5).data[0] == pytest.approx(0.7)
        with pytest.raises(KeyError):
            stack.map_for(3)
        with pytest.raises(KeyError):
            stack.select([3])

    def test_in_mask_sums(self):
        """Test float and tensor in-mask sums agree."""
        sample = generate(ConfigurationManager.create_config_from_template("tiny").dataset).train[0]
        mask = rasterize_mask(sample.box, sample.grid)
        uniform = Tensor(np.full(9, 1.0 / 9.0))
        stack = AttentionStack(layers=[0], maps=[uniform], similarities=[uniform])
        expected = mask.popcount() / 9.0
        assert stack.in_mask_sums(mask)[0] == pytest.approx(expected)
        assert stack.in_mask_tensors(mask)[0].item() == pytest.approx(expected)
