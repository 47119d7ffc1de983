import csv
import io
import math

import numpy as np
import pytest

from bpnet.analysis import (
    CSV_HEADER,
    GRAD_TOLERANCE,
    LSTM_GRAD_TOLERANCE,
    cost_report,
    count_params,
    default_tolerance,
    equivalence_check,
    estimate_activation_memory,
    estimate_flops,
    grad_check,
    model_equivalence,
    relative_error,
)
from bpnet.errors import NumericError, UsageError
from bpnet.layers import LSTM, Conv2D, Dense, Embedding
from bpnet.network import build
from bpnet.projections import factorize_dim
from bpnet.tensor import make_rng


def single(layer, input_shape, loss="mse"):
    return build({"seed": 0, "input_shape": list(input_shape), "loss": loss, "layers": [layer]})


def mm(a, b, c):
    """FLOPs of an (a x b) @ (b x c) product."""
    return 2 * a * b * c


# ---------------------------------------------------------------- parameters


@pytest.mark.parametrize("alpha,expected", [(1, 12_288), (2, 20_480), (3, 28_672)])
def test_dense4096_bilinear_params(alpha, expected):
    m = single({"type": "dense", "units": 4096, "projection": "bilinear", "alpha": alpha}, [4096])
    # 64*64 + 64*(64 alpha) + 64*(64 alpha)
    assert count_params(m).total_params == expected == 64 * 64 + 2 * 64 * 64 * alpha


def test_dense4096_full_params():
    m = single({"type": "dense", "units": 4096}, [4096])
    assert count_params(m).total_params == 4096 * 4096 + 4096 == 16_781_312


@pytest.mark.parametrize("D,K", [(64, 16), (256, 64), (36, 36), (12, 20)])
def test_bilinear_params_closed_form(D, K):
    d1, d2 = factorize_dim(D)
    k1, k2 = factorize_dim(K)
    m = single({"type": "dense", "units": K, "projection": "bilinear"}, [D])
    assert count_params(m).total_params == k1 * d1 + d2 * k2 + k1 * k2


@pytest.mark.parametrize("n", [4, 16, 64, 256, 4096])
def test_square_bilinear_weights_are_2_sqrt_dk(n):
    m = single({"type": "dense", "units": n, "projection": "bilinear"}, [n])
    assert count_params(m).total_params - n == 2 * math.isqrt(n * n)


def test_exclude_last_difference_is_classifier_size():
    m = build(
        {
            "seed": 0,
            "input_shape": [64],
            "layers": [
                {"type": "dense", "units": 36, "projection": "bilinear", "alpha": 3, "activation": "relu"},
                {"type": "dense", "units": 4},
                {"type": "softmax"},
            ],
        }
    )
    rep = count_params(m)
    # alpha 3 widens the hidden output to 3 * 36 features
    assert rep.total_params - rep.params_excluding_last == 108 * 4 + 4
    rows = list(csv.reader(io.StringIO(rep.to_csv(exclude_last=True))))
    assert [r[0] for r in rows] == ["layer", "0:dense", "2:softmax", "total"]
    assert int(rows[-1][3]) == rep.params_excluding_last


def test_exclude_last_without_parameters_is_noop():
    m = build({"seed": 0, "input_shape": [3], "layers": [{"type": "relu"}]})
    rep = count_params(m)
    assert rep.total_params == rep.params_excluding_last == 0


# --------------------------------------------------------------------- FLOPs


def test_full_dense_4096_flops():
    m = single({"type": "dense", "units": 4096}, [4096])
    assert estimate_flops(m).total_flops == 33_554_432


def test_bilinear_dense_4096_flops():
    m = single({"type": "dense", "units": 4096, "projection": "bilinear"}, [4096])
    assert estimate_flops(m).total_flops == mm(64, 64, 64) + mm(64, 64, 64) == 1_048_576


def test_bilinear_alpha2_is_one_and_a_half_times_alpha1():
    f = [
        estimate_flops(
            single({"type": "dense", "units": 4096, "projection": "bilinear", "alpha": a}, [4096])
        ).total_flops
        for a in (1, 2)
    ]
    assert f[1] * 2 == f[0] * 3


def test_empty_model_costs_nothing():
    m = build({"seed": 0, "input_shape": [5], "layers": []})
    rep = cost_report(m)
    assert rep.rows == []
    assert rep.total_params == rep.total_flops == rep.total_activation_bytes == 0
    assert rep.to_csv() == ",".join(CSV_HEADER) + "\ntotal,,,0,0,0\n"


def _handcrafted():
    """Five layers with FLOPs derived by hand from the matmul chain."""
    cases = []
    # bilinear dense 12 -> 20, alpha 2, tanh: (4x3)(3x4) then (4x4)(4x10); 40 activations
    cases.append(
        (
            {"type": "dense", "units": 20, "projection": "bilinear", "alpha": 2, "activation": "tanh"},
            [12],
            mm(4, 3, 4) + mm(4, 4, 10) + 40,
        )
    )
    # full conv 6x6x2 -> 4x4x3, 3x3 kernel: 16 positions of an 18 -> 3 map, no activation
    cases.append(({"type": "conv2d", "filters": 3, "kernel": 3}, [6, 6, 2], 16 * mm(1, 18, 3)))
    # bilinear conv, 6 filters = (2,3), alpha 2 -> (4,6); same padding keeps 5x5 positions;
    # patch matrix is (9 x 4); relu on 25*24 outputs
    cases.append(
        (
            {"type": "conv2d", "filters": 6, "kernel": 3, "padding": "same", "projection": "bilinear",
             "alpha": 2, "activation": "relu"},
            [5, 5, 4],
            25 * (mm(4, 9, 4) + mm(4, 4, 6)) + 25 * 24,
        )
    )
    # bilinear lstm 4 -> 4 over 3 steps: per gate (2x2)(2x2)(2x2) twice, plus 9H element-wise
    per_gate = (mm(2, 2, 2) + mm(2, 2, 2)) * 2
    cases.append(
        ({"type": "lstm", "units": 4, "projection": "bilinear"}, [3, 4], 3 * (4 * per_gate + 9 * 4))
    )
    # max-pool 4x4x2 -> 2x2x2: one op per output element
    cases.append(({"type": "maxpool"}, [4, 4, 2], 8))
    return cases


@pytest.mark.parametrize("layer,shape,expected", _handcrafted())
def test_handcrafted_layer_flops(layer, shape, expected):
    assert estimate_flops(single(layer, shape)).total_flops == expected


def test_flops_input_override_rebuilds():
    m = single({"type": "conv2d", "filters": 4, "kernel": 3, "padding": "same"}, [8, 8, 3])
    small = estimate_flops(m).total_flops
    big = estimate_flops(m, (32, 32, 3)).total_flops
    assert big == small * 16


def test_full_embedding_lookup_is_free():
    m = single({"type": "embedding", "vocab": 10, "dim": 4}, [5])
    assert estimate_flops(m).total_flops == 0


# -------------------------------------------------------------------- memory


def test_activation_memory_dense4096():
    m = single({"type": "dense", "units": 4096, "projection": "bilinear"}, [4096])
    assert estimate_activation_memory(m, batch=32, width=4).total_activation_bytes == 524_288


def test_activation_memory_scales_with_alpha():
    mem = [
        estimate_activation_memory(
            single({"type": "dense", "units": 4096, "projection": "bilinear", "alpha": a}, [4096])
        ).total_activation_bytes
        for a in (1, 3)
    ]
    assert mem[1] == 3 * mem[0] == 1_572_864


def test_activation_memory_is_linear_in_batch_and_width():
    m = single({"type": "dense", "units": 16}, [8])
    base = estimate_activation_memory(m, 1, 1).total_activation_bytes
    assert estimate_activation_memory(m, 10, 8).total_activation_bytes == 80 * base == 80 * 16


def test_csv_header_rows_and_total():
    m = build(
        {
            "seed": 0,
            "input_shape": [16],
            "layers": [{"type": "dense", "units": 16, "projection": "bilinear", "alpha": 2}, {"type": "relu"}],
        }
    )
    rows = list(csv.reader(io.StringIO(cost_report(m).to_csv())))
    assert rows[0] == CSV_HEADER
    assert rows[1][:3] == ["0:dense", "bilinear", "2"]
    assert rows[2][:3] == ["1:relu", "-", "1"]
    for col in (3, 4, 5):
        assert int(rows[-1][col]) == sum(int(r[col]) for r in rows[1:-1])
    assert "total" in cost_report(m).table()


# ---------------------------------------------------------------- grad check


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_default_tolerances():
    assert default_tolerance(Dense(4, 4)) == GRAD_TOLERANCE == 1e-5
    assert default_tolerance(LSTM(4, 4)) == LSTM_GRAD_TOLERANCE == 1e-4


def test_linear_layer_mse_is_nearly_exact(rng):
    layer = Dense(6, 3)
    layer.init_params(rng)
    x = rng.normal(size=(4, 6))
    rep = grad_check(layer, x, tolerance=1e-8)
    assert rep.passed and rep.worst <= 1e-8
    assert {t.name for t in rep.tensors} == {"0.W", "0.b", "input"}


def test_bilinear_sigmoid_dense(rng):
    layer = Dense(12, 6, projection="bilinear", alpha=2, activation="sigmoid")
    layer.init_params(rng)
    rep = grad_check(layer, rng.normal(size=(3, 12)))
    assert rep.passed and rep.worst <= 1e-5


def test_relu_exactly_at_zero_is_flagged_and_skipped(rng):
    layer = Dense(3, 2, activation="relu")
    layer.init_params(rng)
    x = rng.normal(size=(1, 3))
    layer.params["b"][0] = -(x @ layer.params["W"])[0, 0]
    assert (x @ layer.params["W"] + layer.params["b"])[0, 0] == 0.0
    rep = grad_check(layer, x)
    assert rep.at_kink
    assert rep.excluded >= 1
    assert rep.passed


def test_smooth_point_is_not_flagged(rng):
    layer = Dense(3, 2, activation="relu")
    layer.init_params(rng)
    rep = grad_check(layer, rng.normal(size=(2, 3)))
    assert not rep.at_kink and rep.passed


def test_wrong_gradient_is_caught(rng, monkeypatch):
    layer = Dense(4, 2)
    layer.init_params(rng)
    orig = Dense.backward

    def broken(self, dout):
        out = orig(self, dout)
        self.grads["W"] = self.grads["W"] * 1.01
        return out

    monkeypatch.setattr(Dense, "backward", broken)
    rep = grad_check(layer, rng.normal(size=(2, 4)))
    assert not rep.passed
    assert rep.by_layer()["0"][0] == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_lstm_gets_looser_tolerance(rng):
    m = build(
        {
            "seed": 3,
            "input_shape": [5, 4],
            "loss": "mse",
            "layers": [{"type": "lstm", "units": 4, "projection": "bilinear", "alpha": 2}],
        }
    )
    rep = grad_check(m, rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 8)))
    tol = rep.by_layer()
    assert tol["0"][1] == LSTM_GRAD_TOLERANCE
    assert tol["input"][1] == LSTM_GRAD_TOLERANCE
    assert rep.passed


def test_non_finite_loss_raises(rng):
    layer = Dense(2, 2)
    layer.init_params(rng)
    layer.params["W"][0, 0] = np.inf
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError):
        grad_check(layer, np.ones((1, 2)), np.zeros((1, 2)))


def test_model_without_targets_is_usage_error():
    m = single({"type": "dense", "units": 2}, [2])
    with pytest.raises(UsageError):
        grad_check(m, np.zeros((1, 2)))


def test_grad_check_restores_parameters(rng):
    m = single({"type": "dense", "units": 3, "projection": "bilinear", "activation": "tanh"}, [4])
    before = {k: v.copy() for k, v in m.get_state().items()}
    grad_check(m, rng.normal(size=(2, 4)), rng.normal(size=(2, 3)))
    after = m.get_state()
    for k in before:
        assert after[k].dtype == np.float64
        np.testing.assert_array_equal(after[k], before[k])


# --------------------------------------------------------------- equivalence


def _ready(layer, seed=5):
    layer.init_params(make_rng(seed))
    for k in layer.params:
        if k.startswith("b"):
            layer.params[k] = make_rng(seed + 1).normal(size=layer.params[k].shape)
    return layer


@pytest.mark.parametrize(
    "layer",
    [
        Dense(64, 16, "bilinear", 3, "relu"),
        Dense(4096, 4096, "bilinear"),
        Conv2D(6, 8, 3, projection="bilinear", alpha=2, activation="tanh"),
        Conv2D(4, 4, (2, 3), stride=2, padding="same", projection="bilinear"),
        LSTM(6, 4, "bilinear", alpha=2, return_sequences=True),
    ],
    ids=["dense", "dense4096", "conv", "conv-strided", "lstm"],
)
def test_equivalence_within_1e_10(layer):
    res = equivalence_check(_ready(layer), trials=20 if layer.params.get("w1", np.zeros(1)).size > 1000 else 100)
    assert res.passed and res.max_deviation <= 1e-10


def test_embedding_equivalence_over_whole_vocab():
    layer = _ready(Embedding(12, 5, "bilinear", alpha=2))
    res = equivalence_check(layer)
    assert res.trials == 12
    assert res.max_deviation <= 1e-12


def test_equivalence_detects_tampering():
    layer = _ready(Dense(16, 16, "bilinear"))
    orig = layer.expand_to_full

    def off():
        full = orig()
        full.params["W"][0, 0] += 1e-6
        return full

    layer.expand_to_full = off
    assert not equivalence_check(layer).passed


def test_full_layer_has_nothing_to_expand():
    with pytest.raises(UsageError):
        equivalence_check(Dense(4, 4))


def test_model_equivalence_labels_bilinear_layers_only():
    m = build(
        {
            "seed": 0,
            "input_shape": [16],
            "layers": [
                {"type": "dense", "units": 16, "projection": "bilinear", "activation": "relu"},
                {"type": "dense", "units": 4},
                {"type": "dense", "units": 4, "projection": "bilinear"},
            ],
        }
    )
    res = model_equivalence(m)
    assert list(res) == ["0:dense", "2:dense"]
    assert all(r.passed for r in res.values())
