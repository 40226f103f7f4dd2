import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hetfed import nn
from hetfed.data import DatasetSpec, LabeledDataset, make_synthetic_dataset
from hetfed.metrics import ForgettingMatrix, aggregate_runs, evaluate, forgetting_matrix


def fixed_classifier(bias):
    """Zero weights; the bias alone decides the predicted class."""
    m = nn.ModelGraph((nn.Flatten(), nn.Dense(4, 2)), (1, 2, 2))
    return m, {"1.weight": torch.zeros(2, 4), "1.bias": torch.tensor(bias)}


def cls_ds(labels):
    labels = torch.tensor(labels)
    return LabeledDataset(torch.rand(len(labels), 1, 2, 2, generator=torch.Generator().manual_seed(0)), labels)


def test_perfect_classifier():
    m = nn.ModelGraph((nn.Flatten(),), (2,), "cross_entropy", "class_logits")
    ds = LabeledDataset(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([0, 1]))
    assert evaluate(m, {}, ds) == 1.0


def test_perfect_regressor():
    m = nn.ModelGraph((nn.Flatten(), nn.Dense(1, 1)), (1,), "mae", "scalar_regression")
    params = {"1.weight": torch.ones(1, 1), "1.bias": torch.zeros(1)}
    ds = LabeledDataset(torch.tensor([[0.25], [0.75]]), torch.tensor([0.25, 0.75]), "regression", 1)
    assert evaluate(m, params, ds) == 0.0


def test_majority_predictor_balanced():
    m, p = fixed_classifier([1.0, 0.0])
    assert evaluate(m, p, cls_ds([0, 1] * 10)) == 0.5


def test_constant_mean_regressor_mae():
    m = nn.ModelGraph((nn.Flatten(), nn.Dense(1, 1)), (1,), "mae", "scalar_regression")
    params = {"1.weight": torch.zeros(1, 1), "1.bias": torch.tensor([0.5])}
    ds = LabeledDataset(torch.zeros(4, 1), torch.tensor([0.0, 1.0, 0.0, 1.0]), "regression", 1)
    assert evaluate(m, params, ds) == 0.5


def test_evaluate_task_mismatch():
    m, p = fixed_classifier([0.0, 1.0])
    ds = LabeledDataset(torch.zeros(2, 1, 2, 2), torch.tensor([0.1, 0.2]), "regression", 1)
    with pytest.raises(ValueError):
        evaluate(m, p, ds)


@given(seed=st.integers(0, 1000))
def test_evaluate_order_invariant(seed):
    ds = make_synthetic_dataset(DatasetSpec(samples_per_class=20, noise_sigma=0.5, image_size=8))
    m = nn.toy_cnn((1, 8, 8), 2)
    p = nn.init_params(m, seed)
    perm = np.random.default_rng(seed).permutation(len(ds))
    assert evaluate(m, p, ds) == evaluate(m, p, ds.subset(perm))


def test_identical_checkpoints_identical_columns():
    m, p = fixed_classifier([0.0, 1.0])
    fm = forgetting_matrix(m, [p, p, p], [cls_ds([0, 1]), cls_ds([1, 1]), cls_ds([0, 0])])
    assert (fm.values == fm.values[:, :1]).all()
    assert fm.metric == "accuracy"


def test_forgetting_two_by_two_and_gap():
    a, pa = fixed_classifier([1.0, 0.0])
    _, pb = fixed_classifier([0.0, 1.0])
    fm = forgetting_matrix(a, [pa, pb], [cls_ds([0, 0, 0]), cls_ds([1, 1, 1])])
    assert fm.values.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert fm.max_forgetting_gap() == 1.0


def test_forgetting_csv_layout():
    fm = ForgettingMatrix(np.array([[0.956, 0.517], [0.094, 0.977]]))
    lines = fm.to_csv().splitlines()
    assert lines[0] == "data\\model,Inst1,Inst2"
    assert lines[1] == "Inst1,0.956000,0.517000"


def test_forgetting_count_mismatch():
    m, p = fixed_classifier([0.0, 1.0])
    with pytest.raises(ValueError):
        forgetting_matrix(m, [p], [cls_ds([0]), cls_ds([1])])
    with pytest.raises(ValueError):
        ForgettingMatrix(np.ones((1, 1)))


def test_aggregate_constant():
    s = aggregate_runs([4, 4, 4, 4])
    assert (s.mean, s.std, s.runs) == (4.0, 0.0, 4)


def test_aggregate_sample_std():
    s = aggregate_runs([1, 3])
    assert s.mean == 2.0
    assert s.std == pytest.approx(math.sqrt(2))


def test_aggregate_single_and_empty():
    s = aggregate_runs([0.7])
    assert (s.std, s.runs) == (0.0, 1)
    with pytest.raises(ValueError):
        aggregate_runs([])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.randoms())
def test_aggregate_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert aggregate_runs(values) == aggregate_runs(shuffled)
