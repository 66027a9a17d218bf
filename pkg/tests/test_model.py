import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafvit.errors import ConfigError, ContractError, DimensionError
from leafvit.layers import Conv2d, Linear, Module
from leafvit.model import (
    ModelGraph,
    build_baseline_cnn,
    build_mobilevitv2_050,
    count_macs,
    count_params,
    estimate_model_size_bytes,
    predict,
)
from leafvit.tensor import Tensor, make_rng
from leafvit.weights import WeightArchive


@pytest.fixture(scope="module")
def model10():
    return build_mobilevitv2_050(10)


class DenseOnly(ModelGraph):
    def __init__(self):
        super().__init__()
        self.num_classes = 10
        self.head = Linear(make_rng(0), 256, 10)

    def forward(self, x, rng=None, **_):
        return self.head(x)


class ConvOnly(ModelGraph):
    def __init__(self):
        super().__init__()
        self.conv1 = Conv2d(make_rng(0), 3, 8, 3)
        self.conv2 = Conv2d(make_rng(1), 8, 4, 3, stride=2)

    def forward(self, x, rng=None, **_):
        return self.conv2(self.conv1(x))


def test_forward_is_finite(model10):
    x = Tensor(make_rng(0).standard_normal((2, 3, 224, 224)).astype(np.float32))
    out = model10(x)
    assert out.shape == (2, 10) and np.all(np.isfinite(out.data))


def test_eval_forward_is_pure(model10):
    x = Tensor(make_rng(1).standard_normal((1, 3, 224, 224)).astype(np.float32))
    assert np.array_equal(model10(x).data, model10(x).data)


def test_parameter_counts(model10):
    assert count_params(model10) == 1_116_163
    assert 1_050_000 <= count_params(model10) <= 1_250_000
    assert 1_300_000 <= count_params(build_mobilevitv2_050(1000)) <= 1_450_000


def test_model_size_in_mib(model10):
    assert estimate_model_size_bytes(model10) == 4 * count_params(model10)
    assert 4.0 <= estimate_model_size_bytes(model10) / 2**20 <= 5.0


@settings(max_examples=5, deadline=None)
@given(st.integers(2, 50), st.integers(2, 50))
def test_head_only_parameter_difference(c1, c2):
    diff = count_params(build_mobilevitv2_050(c2)) - count_params(build_mobilevitv2_050(c1))
    assert diff == 257 * (c2 - c1)


def test_mac_count(model10):
    macs = count_macs(model10, (1, 3, 224, 224))
    assert 0.31e9 <= macs <= 0.41e9


def test_stage_traces(model10):
    outs = model10.stage_outputs(Tensor(np.zeros((1, 3, 224, 224), np.float32)))
    assert [o.shape[2] for o in outs] == [112, 112, 56, 28, 14, 7]
    assert [o.shape[3] for o in outs] == [112, 112, 56, 28, 14, 7]
    assert [o.shape[1] for o in outs] == [16, 32, 64, 128, 192, 256]


def test_dense_counts():
    model = DenseOnly()
    assert count_params(model) == 2570
    assert count_macs(model, (1, 256)) == 2560
    assert count_params(Module()) == 0


def test_conv_macs_quadruple_with_doubled_extent():
    model = ConvOnly()
    assert count_macs(model, (1, 3, 32, 32)) * 4 == count_macs(model, (1, 3, 64, 64))


def test_weight_names_unique_and_roundtrip(model10):
    state = model10.state_dict()
    assert len(state) == len(set(state))
    archive = WeightArchive.from_bytes(WeightArchive.from_model(model10).to_bytes())
    assert list(archive.tensors) == list(state)


def test_initialization_conventions(model10):
    params = dict(model10.named_parameters())
    assert np.all(params["stem.bn.weight"].data == 1) and np.all(params["stem.bn.bias"].data == 0)
    head = params["head.weight"].data
    assert np.abs(head).max() <= 0.04 and 0.012 < head.std() < 0.02
    w = params["stages.4.0.expand.conv.weight"].data  # 1x1, fan_out = Cout
    assert abs(w.std() - np.sqrt(2.0 / w.shape[0])) < 0.1 * np.sqrt(2.0 / w.shape[0])


def test_same_seed_same_weights():
    a = WeightArchive.from_model(build_mobilevitv2_050(3, seed=5))
    b = WeightArchive.from_model(build_mobilevitv2_050(3, seed=5))
    c = WeightArchive.from_model(build_mobilevitv2_050(3, seed=6))
    assert a == b and a != c


def test_num_classes_contract():
    with pytest.raises(ConfigError):
        build_mobilevitv2_050(1)


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------
def test_predict_rows_are_distributions(model10):
    x = make_rng(2).standard_normal((1, 3, 224, 224)).astype(np.float32)
    probs = predict(model10, Tensor(np.concatenate([x, x]))).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(probs[0], probs[1])


def test_predict_equal_logits_are_uniform():
    model = build_mobilevitv2_050(4)
    model.head.weight.data[...] = 0
    probs = predict(model, Tensor(np.zeros((1, 3, 224, 224), np.float32))).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-7)


def test_predict_rejects_wrong_size(model10):
    with pytest.raises(DimensionError, match="224x224"):
        predict(model10, Tensor(np.zeros((1, 3, 200, 200), np.float32)))


def test_predict_requires_eval_mode():
    model = build_mobilevitv2_050(3).train()
    with pytest.raises(ContractError):
        predict(model, Tensor(np.zeros((1, 3, 224, 224), np.float32)))


# ---------------------------------------------------------------------------
# baseline CNN
# ---------------------------------------------------------------------------
def test_baseline_cnn():
    model = build_baseline_cnn(4)
    assert 13e6 <= count_params(model) <= 16e6
    x = Tensor(make_rng(0).standard_normal((1, 3, 256, 256)).astype(np.float32))
    out = model(x)
    assert out.shape == (1, 4)
    assert np.array_equal(out.data, model(x).data)
    layers = dict(model.named_modules())
    assert sum(isinstance(m, Conv2d) for m in layers.values()) == 5
    assert sum(isinstance(m, Linear) for m in layers.values()) == 2
