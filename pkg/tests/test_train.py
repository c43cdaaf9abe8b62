import numpy as np
import pytest

from metano import ifno
from metano.autodiff import Group
from metano.errors import InvalidArgumentError, InvalidDatasetError, TrainingDivergedError
from metano.train import AdamState, TrainConfig, adam_step, train_loop, train_shallow_to_deep


def hand_adam(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trace.append(theta)
    return trace


def teacher_data(n=16, M=16, seed=0):
    teacher = ifno.init_model(1, 1, 4, 1, 2, 4, seed=seed + 1)
    g = np.random.default_rng(seed).standard_normal((n, M, 1))
    return g, ifno.forward(teacher, g)


# ---------------------------------------------------------------- adam

def test_zero_gradient_leaves_params():
    params = {"a": np.array([1.0, -2.0])}
    state = AdamState()
    out, state = adam_step(params, {"a": np.zeros(2)}, state, 1e-2)
    assert np.array_equal(out["a"], params["a"]) and state.t == 1


@pytest.mark.parametrize("g", [3.0, -0.25, 1e-3])
def test_first_step_is_signed_lr(g):
    lr = 1e-2
    out, _ = adam_step({"x": np.array(1.0)}, {"x": np.array(g)}, AdamState(), lr)
    step = out["x"] - 1.0
    assert step == pytest.approx(-lr * g / (abs(g) + 1e-8), rel=1e-12)
    if abs(g) >= 1e-2:
        assert abs(step + lr * np.sign(g)) <= 1e-6 * lr


def test_two_steps_on_quadratic_match_hand_trace():
    grad = lambda th: 2.0 * (th - 3.0)  # noqa: E731
    expected = hand_adam(0.5, grad, 0.1, 2)
    params, state = {"x": np.array(0.5)}, AdamState()
    for ref in expected:
        params, state = adam_step(params, {"x": np.array(grad(params["x"]))}, state, 0.1)
        assert abs(float(params["x"]) - ref) <= 1e-12


def test_weight_decay_adds_l2_term():
    a, _ = adam_step({"x": np.array(2.0)}, {"x": np.array(0.5)}, AdamState(), 1e-2, weight_decay=0.25)
    b, _ = adam_step({"x": np.array(2.0)}, {"x": np.array(1.0)}, AdamState(), 1e-2)
    assert a["x"] == b["x"]


def test_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingDivergedError, match="'W'"):
        adam_step({"W": np.zeros(2)}, {"W": np.array([0.0, np.nan])}, AdamState(), 1e-2)
    with pytest.raises(InvalidArgumentError):
        adam_step({"W": np.zeros(2)}, {"W": np.zeros(2)}, AdamState(), 0.0)


# ---------------------------------------------------------------- config

def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-2, decay_rate=0.5, decay_every=100)
    assert cfg.lr_at(250) == pytest.approx(2.5e-3, rel=1e-15)
    assert cfg.lr_at(99) == 1e-2 and cfg.lr_at(100) == 5e-3


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(decay_rate=1.5), dict(epochs=-1), dict(batch=0)])
def test_config_validation(bad):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- loop

@pytest.mark.parametrize("groups", [{Group.LIFT}, {Group.PROJ}, {Group.LIFT, Group.ITER}])
def test_masked_groups_are_bitwise_frozen(groups):
    g, u = teacher_data(8)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=9)
    out, _ = train_loop(model, g, u, TrainConfig(learning_rate=1e-2, epochs=5, trainable_groups=groups))
    for grp in Group:
        same = all(out.group(grp)[k].tobytes() == v.tobytes() for k, v in model.group(grp).items())
        assert same == (grp not in groups)


def test_training_reduces_loss_and_is_reproducible():
    g, u = teacher_data(16)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=3)
    cfg = TrainConfig(learning_rate=1e-2, epochs=60)
    m1, h1 = train_loop(model, g, u, cfg)
    m2, h2 = train_loop(model, g, u, cfg)
    assert h1 == h2 and len(h1) == 60
    assert all(np.isfinite(h1)) and h1[-1] < 0.2 * h1[0]
    assert all(np.array_equal(a, b) for a, b in zip(m1.params().values(), m2.params().values()))
    assert h1[0] == ifno.loss_value(model, g, u)


def test_minibatch_training_is_seeded():
    g, u = teacher_data(16)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=3)
    cfg = TrainConfig(learning_rate=1e-2, epochs=5, batch=5, seed=1)
    _, h1 = train_loop(model, g, u, cfg)
    _, h2 = train_loop(model, g, u, cfg)
    _, h3 = train_loop(model, g, u, cfg.replace(seed=2))
    assert h1 == h2 and h1 != h3 and h1[0] == h3[0]


def test_divergence_aborts():
    g, u = teacher_data(4)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=3)
    model = model.replace(Q2=model.Q2 * 1e6)
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train_loop(model, g, u, TrainConfig(epochs=3))


def test_empty_context_rejected():
    model = ifno.init_model(1, 1, 4, 1, 2, 4)
    with pytest.raises(InvalidDatasetError):
        train_loop(model, np.zeros((0, 16, 1)), np.zeros((0, 16, 1)), TrainConfig())


def test_shallow_to_deep_doubles_layers():
    g, u = teacher_data(8)
    model = ifno.init_model(1, 1, 4, 1, 1, 4, seed=3)
    out, hist = train_shallow_to_deep(model, g, u, TrainConfig(learning_rate=1e-2, epochs=10), stages=2)
    assert out.n_layers == 4 and len(hist) == 30


def test_teacher_student_regression():
    g, u = teacher_data(64)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=2)
    _, hist = train_loop(model, g, u, TrainConfig(learning_rate=1e-2, decay_rate=0.5, decay_every=100, epochs=400))
    assert hist[-1] < 2e-3 * hist[0]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="Adam plateaus near 1e-4 on this ill-conditioned teacher; see decisions ledger")
def test_teacher_student_reaches_1e6():
    g, u = teacher_data(64)
    model = ifno.init_model(1, 1, 4, 1, 2, 4, seed=2)
    cfg = TrainConfig(learning_rate=1e-2, decay_rate=0.5, decay_every=400, epochs=2000)
    _, hist = train_loop(model, g, u, cfg)
    assert min(hist) <= 1e-6
