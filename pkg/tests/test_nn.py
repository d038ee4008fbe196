import csv
import math

import numpy as np
import pytest

from trapscan.errors import DivergenceError, DomainError, LayerNotFound, ShapeMismatch
from trapscan.nn import (
    AdamW,
    Dataset,
    MlpModel,
    TrainConfig,
    evaluate,
    forward,
    init_mlp,
    inject_trap,
    load_model,
    log_spaced_steps,
    loss_and_grads,
    make_gaussian_clusters,
    one_hot,
    save_model,
    train,
)
from trapscan.tensor_store import WeightMatrix
from trapscan.traps import detect_traps


def test_forward_zero_model():
    model = MlpModel([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    assert forward(model, [1.0, -2.0, 3.0]).tolist() == [0.0, 0.0]


def test_forward_identity():
    model = MlpModel([np.eye(3)], [np.zeros(3)])
    assert forward(model, [1.0, -2.0, 0.5]).tolist() == [1.0, -2.0, 0.5]


def test_forward_hand_computed():
    # h = relu(W1 x + b1) = relu([1*1 + 2*-1 + 0.5, 3*1 - 1*-1 - 1]) = relu([-0.5, 3]) = [0, 3]
    # z = W2 h + b2 = [0*1 + 3*2 + 1, 0*-1 + 3*0.5 - 1] = [7, 0.5]
    W1 = np.array([[1.0, 2.0], [3.0, -1.0]])
    b1 = np.array([0.5, -1.0])
    W2 = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b2 = np.array([1.0, -1.0])
    model = MlpModel([W1, W2], [b1, b2])
    np.testing.assert_array_equal(forward(model, [1.0, -1.0]), [7.0, 0.5])


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(init_mlp([3, 4, 2]), np.ones(5))


def test_model_shape_validation():
    with pytest.raises(ShapeMismatch):
        MlpModel([np.ones((4, 3)), np.ones((2, 5))], [np.ones(4), np.ones(2)])
    with pytest.raises(ShapeMismatch):
        MlpModel([np.ones((4, 3))], [np.ones(3)])


def test_layer_lookup():
    model = init_mlp([3, 4, 2])
    assert model.layer_index("fc2") == 1
    assert model.layer_index("fc1.weight") == 0
    with pytest.raises(LayerNotFound):
        model.layer_index("fc9")


def test_init_scale_and_bounds():
    a = init_mlp([16, 8, 4], init_scale=1.0, seed=3)
    b = init_mlp([16, 8, 4], init_scale=8.0, seed=3)
    np.testing.assert_allclose(b.weights[0], 8.0 * a.weights[0])
    assert np.abs(a.weights[0]).max() <= 1 / math.sqrt(16)
    assert np.abs(a.weights[1]).max() <= 1 / math.sqrt(8)


def numeric_grad(model, X, Y, param, h=1e-5):
    g = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + h
        up = loss_and_grads(model, X, Y)[0]
        param[idx] = old - h
        down = loss_and_grads(model, X, Y)[0]
        param[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 5)))]
    model = init_mlp(sizes, init_scale=1.5, seed=seed)
    X = rng.standard_normal((7, sizes[0]))
    Y = one_hot(rng.integers(0, sizes[-1], 7), sizes[-1])
    _, gw, gb = loss_and_grads(model, X, Y)
    for k in range(len(model.weights)):
        for analytic, param in ((gw[k], model.weights[k]), (gb[k], model.biases[k])):
            numeric = numeric_grad(model, X, Y, param)
            err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert err < 1e-6


def reference_adam(p, grads, lr, betas, eps):
    """Adam (no weight decay) in the same operation order as the usual reference implementation."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = m * betas[0] + (1 - betas[0]) * g
        v = v * betas[1] + (1 - betas[1]) * g * g
        step_size = lr / (1 - betas[0] ** t)
        denom = np.sqrt(v) / math.sqrt(1 - betas[1] ** t) + eps
        p = p - step_size * m / denom
    return p


def textbook_adam(p, grads, lr, betas, eps):
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g**2
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adamw_without_decay_is_adam():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal((4, 3))
    grads = [rng.standard_normal((4, 3)) for _ in range(25)]
    p = p0.copy()
    opt = AdamW([p], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    for g in grads:
        opt.step([g])
    assert np.array_equal(p, reference_adam(p0, grads, 1e-2, (0.9, 0.999), 1e-8))
    np.testing.assert_allclose(p, textbook_adam(p0, grads, 1e-2, (0.9, 0.999), 1e-8), rtol=1e-7, atol=1e-10)


def test_decoupled_decay_is_exact_with_zero_gradient():
    p = np.array([1.0, -2.0, 3.5])
    expected = p.copy()
    lr, wd = 1e-2, 0.5
    opt = AdamW([p], lr=lr, weight_decay=wd)
    for _ in range(50):
        opt.step([np.zeros(3)])
        expected = expected * (1 - lr * wd)
    assert np.array_equal(p, expected)


def test_adamw_rejects_bad_hyperparameters():
    with pytest.raises(DomainError):
        AdamW([np.zeros(2)], betas=(1.0, 0.999))
    with pytest.raises(DomainError):
        TrainConfig(epsilon=0.0)


def test_linear_model_separates_two_classes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2))
    labels = (x @ np.array([1.0, -2.0]) > 0).astype(int)
    x += np.where(labels[:, None] == 1, 1, -1) * np.array([0.3, -0.6])
    data = Dataset(x, labels, 2)
    model = init_mlp([2, 2], seed=1)
    cfg = TrainConfig(learning_rate=1e-2, steps=1000, batch_size=200, init_scale=1.0, log_every=500)
    train(model, data, cfg)
    assert evaluate(model, data)[0] == 1.0


def small_run(tmp_path, name, **overrides):
    train_set, test_set = make_gaussian_clusters(3, 8, 20, seed=0, test_per_class=10)
    params = dict(steps=60, batch_size=16, init_scale=2.0, hidden=[12, 10], num_checkpoints=4, log_every=20, seed=5)
    params.update(overrides)
    cfg = TrainConfig(**params)
    model = init_mlp([8, *cfg.hidden, 3], cfg.init_scale, cfg.seed)
    return train(model, train_set, cfg, tmp_path / name, test_set)


def test_training_is_deterministic(tmp_path):
    a = small_run(tmp_path, "a")
    b = small_run(tmp_path, "b")
    assert [p.name for p in a.checkpoints] == [p.name for p in b.checkpoints]
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.with_suffix(".bin").read_bytes() == pb.with_suffix(".bin").read_bytes()
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_training_writes_schedule_and_log(tmp_path):
    result = small_run(tmp_path, "run")
    steps = [int(p.stem.split("_")[1]) for p in result.checkpoints]
    assert steps == log_spaced_steps(60, 4)
    with open(tmp_path / "run" / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "train_acc", "train_loss", "eval_acc", "eval_loss"]
    model, manifest = load_model(result.checkpoints[-1])
    assert manifest.step == 60
    assert {"train_acc", "test_acc", "input_mean", "input_std"} <= set(manifest.metadata)
    np.testing.assert_array_equal(model.weights[0], result.model.weights[0])


def test_zero_steps_writes_only_init(tmp_path):
    result = small_run(tmp_path, "zero", steps=0)
    assert [p.name for p in result.checkpoints] == ["step_000000000.json"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    data = Dataset(np.full((4, 2), np.inf), [0, 1, 0, 1], 2)
    with pytest.raises(DivergenceError) as info:
        train(init_mlp([2, 2]), data, TrainConfig(steps=3, batch_size=4))
    assert info.value.step == 0


def test_log_spaced_steps():
    assert log_spaced_steps(0, 5) == [0]
    steps = log_spaced_steps(200_000, 20)
    assert steps[0] == 0 and steps[-1] == 200_000
    assert steps == sorted(set(steps))


def test_model_checkpoint_round_trip(tmp_path):
    model = init_mlp([5, 4, 3], seed=2)
    save_model(model, tmp_path / "m.json", {"note": "x"}, step=7)
    back, manifest = load_model(tmp_path / "m.json")
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    assert manifest.step == 7 and manifest.metadata["note"] == "x"


def test_inject_zero_magnitude_is_identity():
    model = init_mlp([10, 8, 3], seed=0)
    out = inject_trap(model, 0, 0.0, 5)
    assert all(np.array_equal(a, b) for a, b in zip(model.parameters(), out.parameters()))
    assert out.weights[0] is not model.weights[0]


def test_inject_changes_exactly_k_entries():
    model = init_mlp([10, 8, 3], seed=0)
    out = inject_trap(model, 1, 2.0, 4, seed=3)
    diff = out.weights[1] - model.weights[1]
    assert np.count_nonzero(diff) == 4
    np.testing.assert_allclose(np.abs(diff[diff != 0]), 2.0)


def test_inject_dense_small_keeps_null():
    W = np.random.default_rng(0).standard_normal((200, 100))
    model = MlpModel([W, np.ones((2, 200))], [np.zeros(200), np.zeros(2)])
    base = detect_traps(model.weight_matrix(0), 3)
    out = inject_trap(model, 0, 1e-3, W.size, seed=1)
    after = detect_traps(out.weight_matrix(0), 3)
    assert after.trap_count_per_replicate == base.trap_count_per_replicate == [0, 0, 0]


def test_inject_sparse_large_creates_trap():
    W = np.random.default_rng(1).standard_normal((200, 100))
    model = MlpModel([W, np.ones((2, 200))], [np.zeros(200), np.zeros(2)])
    out = inject_trap(model, 0, 50 * np.abs(W).max(), 10, seed=2)
    report = detect_traps(out.weight_matrix(0), 3)
    assert min(report.valid_counts) >= 1
    # brute-force oracle on one shuffled matrix
    from trapscan.traps import shuffled_matrix_for

    trap = report.traps[0]
    A = shuffled_matrix_for(out.weight_matrix(0), trap).data
    assert np.linalg.eigvalsh(A.T @ A / A.shape[0])[-1] > trap.threshold


def test_inject_domain_errors():
    model = init_mlp([4, 3, 2])
    with pytest.raises(DomainError):
        inject_trap(model, 5, 1.0, 1)
    with pytest.raises(DomainError):
        inject_trap(model, 0, 1.0, 13)


def test_evaluate_constant_logits():
    C = 4
    data = Dataset(np.zeros((8, 3)), np.repeat(np.arange(C), 2), C)
    model = MlpModel([np.zeros((C, 3))], [np.array([1.0, 0, 0, 0])])
    acc, _ = evaluate(model, data)
    assert acc == 1 / C


def test_evaluate_perfect():
    data = Dataset(np.eye(3), [0, 1, 2], 3)
    assert evaluate(MlpModel([np.eye(3)], [np.zeros(3)]), data) == (1.0, 0.0)


def test_evaluate_hand_computed():
    # logits = x; sample 1 -> [2, 0] label 0 (right), sample 2 -> [1, 3] label 0 (wrong)
    # squared errors: (1, 0) and (0, 9) -> mean over 4 entries = 10 / 4
    data = Dataset(np.array([[2.0, 0.0], [1.0, 3.0]]), [0, 0], 2)
    acc, loss = evaluate(MlpModel([np.eye(2)], [np.zeros(2)]), data)
    assert acc == 0.5
    assert loss == 2.5


def test_dataset_validation_and_io(tmp_path):
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), [0, 3], 3)
    with pytest.raises(ShapeMismatch):
        Dataset(np.zeros((2, 2)), [0, 1, 1], 3)
    train_set, test_set = make_gaussian_clusters(3, 5, 4, seed=1, test_per_class=2)
    assert len(train_set) == 12 and len(test_set) == 6
    train_set.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert np.array_equal(back.inputs, train_set.inputs) and back.num_classes == 3


def test_weight_matrix_export_round_trip():
    model = init_mlp([5, 4, 3], seed=4)
    layers = model.to_weight_matrices()
    assert [w.layer_id for w in layers] == ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    back = MlpModel.from_weight_matrices(layers)
    assert all(np.array_equal(a, b) for a, b in zip(model.parameters(), back.parameters()))
    with pytest.raises(LayerNotFound):
        MlpModel.from_weight_matrices([WeightMatrix("other", np.ones((2, 2)))])
