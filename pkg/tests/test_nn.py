import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hetfed import nn
from hetfed.nn import AvgPool, Conv2d, Dense, Flatten, MaxPool, ModelGraph, ReLU, Upsample


def rand(shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, size=shape).astype(np.float32))


def every_layer_net():
    """Touches every layer kind once."""
    layers = (
        Conv2d(2, 3, 3, 1, 1), ReLU(), MaxPool(2), Upsample(2), Conv2d(3, 2, 3, 2, 1),
        AvgPool(2), Flatten(), Dense(8, 5), ReLU(), Dense(5, 3),
    )
    return ModelGraph(layers, (2, 8, 8))


# forward


def test_identity_dense_forward():
    m = ModelGraph((Dense(3, 3),), (3,))
    params = {"0.weight": torch.eye(3), "0.bias": torch.zeros(3)}
    x = torch.tensor([[1.0, 2.0, 3.0], [-4.0, 5.0, -6.0]])
    assert torch.equal(nn.forward(m, params, x), x)


def test_relu_forward():
    m = ModelGraph((ReLU(),), (2,))
    assert nn.forward(m, {}, torch.tensor([[-1.0, 2.0]])).tolist() == [[0.0, 2.0]]


def test_two_layer_golden_output():
    # frozen from a pure-python scalar evaluation of the same weights
    m = nn.mlp(3, [4, 2])
    params = nn.init_params(m, 0)
    x = torch.tensor([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    golden = [[-0.0904511691730665, 0.06984987958262323], [-0.14417859605260097, 0.16217662314643944]]
    assert np.allclose(nn.forward(m, params, x).numpy(), golden, atol=1e-6)


def test_shape_mismatch_names_layer():
    m = ModelGraph((Flatten(), Dense(4, 2)), (4,))
    with pytest.raises(nn.ShapeError, match="input"):
        nn.forward(m, nn.init_params(m, 0), torch.zeros(2, 5))
    with pytest.raises(nn.ShapeError, match="layer 1"):
        ModelGraph((Flatten(), Dense(5, 2)), (4,))


def test_forward_is_pure():
    m = every_layer_net()
    p = nn.init_params(m, 1)
    before = nn.clone_params(p)
    x = rand((2, 2, 8, 8))
    a = nn.forward(m, p, x)
    b = nn.forward(m, p, x)
    assert torch.equal(a, b)
    assert nn.params_equal(p, before)


# losses and gradients


def test_uniform_cross_entropy_is_ln2():
    m = ModelGraph((Dense(2, 2),), (2,))
    params = {"0.weight": torch.zeros(2, 2), "0.bias": torch.zeros(2)}
    loss, _ = nn.loss_and_grad(m, params, torch.ones(3, 2), torch.tensor([0, 1, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-7)


def test_mae_zero_residual_zero_grads():
    m = ModelGraph((Dense(2, 1),), (2,), "mae", "scalar_regression")
    params = {"0.weight": torch.tensor([[1.0, 2.0]]), "0.bias": torch.tensor([0.5])}
    x = torch.tensor([[1.0, 1.0], [0.0, 2.0]])
    y = nn.forward(m, params, x)[:, 0]
    loss, grads = nn.loss_and_grad(m, params, x, y)
    assert loss == 0.0
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_non_finite_loss_carries_batch_id():
    m = ModelGraph((Dense(1, 1),), (1,), "mse", "scalar_regression")
    params = {"0.weight": torch.tensor([[float("inf")]]), "0.bias": torch.zeros(1)}
    with pytest.raises(nn.NonFiniteLossError) as err:
        nn.loss_and_grad(m, params, torch.ones(1, 1), torch.zeros(1), batch_id=(2, 7))
    assert err.value.batch_id == (2, 7)


def test_cross_entropy_rejects_float_targets():
    m = ModelGraph((Dense(2, 2),), (2,))
    with pytest.raises(nn.ShapeError):
        nn.loss_and_grad(m, nn.init_params(m, 0), torch.ones(1, 2), torch.ones(1))


def test_finite_diff_linear_regression():
    m = ModelGraph((Dense(4, 1),), (4,), "mse", "scalar_regression")
    err = nn.finite_diff_check(m, nn.init_params(m, 0), rand((6, 4)), rand((6,), 1), 1e-6)
    assert err < 1e-6


def test_finite_diff_conv_cross_entropy():
    m = nn.toy_cnn((1, 8, 8), 3, channels=(2,), hidden=4)
    err = nn.finite_diff_check(m, nn.init_params(m, 0), rand((3, 1, 8, 8)), torch.tensor([0, 2, 1]))
    assert err < 1e-4


def test_finite_diff_zero_params():
    m = ModelGraph((Flatten(),), (2, 2), "mse", "features")
    assert nn.finite_diff_check(m, {}, rand((2, 2, 2)), rand((2, 4))) == 0.0


def test_finite_diff_epsilon_range():
    m = ModelGraph((Dense(1, 1),), (1,), "mse", "scalar_regression")
    with pytest.raises(ValueError):
        nn.finite_diff_check(m, nn.init_params(m, 0), torch.ones(1, 1), torch.ones(1), 1e-1)


@pytest.mark.parametrize("loss_kind", ["cross_entropy", "mse", "mae"])
def test_finite_diff_every_layer_kind(loss_kind):
    base = every_layer_net()
    if loss_kind == "cross_entropy":
        m, y = base, torch.tensor([0, 2])
    else:
        m = ModelGraph(base.layers[:-1] + (Dense(5, 1),), base.input_shape, loss_kind, "scalar_regression")
        y = rand((2,), 3)
    assert nn.finite_diff_check(m, nn.init_params(m, 4), rand((2, 2, 8, 8), 5), y) < 1e-4


@given(
    seed=st.integers(0, 10_000),
    width=st.integers(1, 6),
    batch=st.integers(1, 4),
)
def test_finite_diff_property_random_mlps(seed, width, batch):
    m = nn.mlp(3, [width, 2])
    y = torch.from_numpy(np.random.default_rng(seed).integers(0, 2, size=batch))
    assert nn.finite_diff_check(m, nn.init_params(m, seed), rand((batch, 3), seed), y) < 1e-4


def test_gradients_deterministic():
    m = every_layer_net()
    p = nn.init_params(m, 0)
    x, y = rand((2, 2, 8, 8)), torch.tensor([1, 0])
    la, ga = nn.loss_and_grad(m, p, x, y)
    lb, gb = nn.loss_and_grad(m, p, x, y)
    assert la == lb and nn.params_equal(ga, gb)


# optimizers


def test_sgd_one_step():
    p = {"w": torch.tensor([1.0])}
    opt = nn.init_optimizer("sgd", p, 0.1)
    opt, new = nn.optimizer_step(opt, p, {"w": torch.tensor([2.0])})
    assert new["w"].item() == pytest.approx(0.8)
    assert opt.step_count == 1


@pytest.mark.parametrize("kind", nn.OPTIMIZER_KINDS)
def test_zero_gradient_leaves_params(kind):
    p = {"w": torch.tensor([1.0, -2.0])}
    opt = nn.init_optimizer(kind, p, 0.1)
    opt, new = nn.optimizer_step(opt, p, {"w": torch.zeros(2)})
    assert torch.equal(new["w"], p["w"])
    assert opt.step_count == 1


def test_zero_momentum_matches_sgd_bitwise():
    p = {"w": rand((5,))}
    a = nn.init_optimizer("sgd", p, 0.05)
    b = nn.init_optimizer("sgd_momentum", p, 0.05, momentum=0.0)
    pa, pb = p, p
    for i in range(10):
        g = {"w": rand((5,), i + 1)}
        a, pa = nn.optimizer_step(a, pa, g)
        b, pb = nn.optimizer_step(b, pb, g)
    assert torch.equal(pa["w"], pb["w"])


def test_lr_decay_schedule():
    opt = nn.init_optimizer("sgd", {}, 1.0, decay_interval=35, decay_scale=0.1)
    for _ in range(34):
        opt = nn.next_epoch(opt)
    assert opt.current_lr == 1.0
    opt = nn.next_epoch(opt)
    assert opt.current_lr == pytest.approx(0.1)


def test_optimizer_rejects_incompatible():
    opt = nn.init_optimizer("sgd", {"w": torch.zeros(2)}, 0.1)
    with pytest.raises(ValueError):
        nn.optimizer_step(opt, {"w": torch.zeros(2)}, {"w": torch.zeros(3)})


# splitting


def test_split_lists():
    m = ModelGraph((Conv2d(1, 2, 3, 1, 1), ReLU(), Flatten(), Dense(32, 2)), (1, 4, 4))
    s = nn.split_at_cut_layer(m, 1)
    assert s.head.layers == (m.layers[0],)
    assert s.tail.layers == m.layers[1:]


def test_split_composition_exact_on_100_batches():
    m = every_layer_net()
    p = nn.init_params(m, 0)
    for cut in range(1, len(m.layers)):
        s = nn.split_at_cut_layer(m, cut)
        hp, tp = nn.subset_params(s.head, p), nn.subset_params(s.tail, p)
        for i in range(100 if cut == 5 else 3):
            x = rand((2, 2, 8, 8), i)
            assert torch.equal(nn.forward(s.tail, tp, nn.forward(s.head, hp, x)), nn.forward(m, p, x))


@pytest.mark.parametrize("cut", [0, 4])
def test_split_bounds(cut):
    m = ModelGraph((Dense(2, 2), ReLU(), Dense(2, 2), ReLU()), (2,))
    with pytest.raises(nn.SplitError):
        nn.split_at_cut_layer(m, cut)


def test_split_inside_fused_block_rejected():
    m = nn.toy_cnn((1, 8, 8), 2)
    with pytest.raises(nn.SplitError, match="conv1"):
        nn.split_at_cut_layer(m, 1)
    nn.split_at_cut_layer(m, 3)


# serialization


def test_checkpoint_round_trip(tmp_path):
    m = every_layer_net()
    p = nn.init_params(m, 0)
    nn.save_params(p, tmp_path / "a.hfsm")
    q = nn.load_params(tmp_path / "a.hfsm")
    assert list(q) == list(p)
    assert nn.params_to_bytes(q) == nn.params_to_bytes(p)


def test_checkpoint_empty(tmp_path):
    data = nn.params_to_bytes({})
    assert data == b"HFSM" + (1).to_bytes(2, "little") + (0).to_bytes(4, "little")
    assert nn.params_from_bytes(data) == {}


def test_checkpoint_layout():
    data = nn.params_to_bytes({"w": torch.tensor([[1.5, -2.0]])})
    expected = (
        b"HFSM" + b"\x01\x00" + b"\x01\x00\x00\x00"
        + b"\x01\x00" + b"w" + b"\x02" + b"\x01\x00\x00\x00" + b"\x02\x00\x00\x00"
        + np.array([1.5, -2.0], dtype="<f4").tobytes()
    )
    assert data == expected


def test_checkpoint_corruption():
    data = nn.params_to_bytes(nn.init_params(nn.mlp(3, [2]), 0))
    with pytest.raises(nn.CheckpointError) as err:
        nn.params_from_bytes(data[:-3])
    assert err.value.offset > 0
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.params_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.params_from_bytes(data[:4] + b"\x09\x00" + data[6:])


@given(
    shapes=st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=4),
    seed=st.integers(0, 1000),
)
def test_checkpoint_round_trip_property(shapes, seed):
    p = {f"t{i}": rand(tuple(s), seed + i) for i, s in enumerate(shapes)}
    q = nn.params_from_bytes(nn.params_to_bytes(p))
    assert nn.params_equal(p, q)


# acceptance-style runtime guard lives in test_acceptance; this is a quick check


def test_finite_diff_fifty_seeds_fast():
    m = every_layer_net()
    start = time.perf_counter()
    worst = max(
        nn.finite_diff_check(m, nn.init_params(m, s), rand((1, 2, 8, 8), s), torch.tensor([s % 3]))
        for s in range(50)
    )
    assert worst < 1e-4
    assert time.perf_counter() - start < 30
