import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metano import ifno
from metano.autodiff import Group
from metano.errors import InvalidArgumentError, InvalidInputError
from metano.grid import Field, Grid
from metano.train import TrainConfig, train_loop


def model_with(seed=0, s=1, d_g=1, d_h=4, d_u=1, L=2, k_max=3, **over):
    m = ifno.init_model(s, d_g, d_h, d_u, L, k_max, seed=seed)
    return m.replace(**over) if over else m


def zero_iter(m):
    return m.replace(W=np.zeros_like(m.W), R_re=np.zeros_like(m.R_re), R_im=np.zeros_like(m.R_im), c=np.zeros_like(m.c))


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------- lift

def test_lift_identity_and_constant():
    m = model_with(d_h=5)
    P = np.zeros((5, 2))
    P[:2, :2] = np.eye(2)
    g = np.random.default_rng(0).standard_normal((1, 8, 1))
    h = ifno.lift(m.replace(P=P, p=np.zeros(5)), g)
    x = Grid(1, 8).coordinates()
    assert np.array_equal(h[0, :, 0], x[:, 0])
    assert np.array_equal(h[0, :, 1], g[0, :, 0])
    assert not h[..., 2:].any()
    p0 = np.arange(5.0)
    h = ifno.lift(m.replace(P=np.zeros((5, 2)), p=p0), g)
    assert np.array_equal(h, np.broadcast_to(p0, h.shape))


def test_lift_matches_per_node_oracle():
    rng = np.random.default_rng(1)
    m = model_with(d_h=6, d_g=2, P=rng.standard_normal((6, 3)), p=rng.standard_normal(6))
    g = rng.standard_normal((2, 8, 2))
    h = ifno.lift(m, g)
    x = Grid(1, 8).coordinates()
    for n in range(2):
        for j in range(8):
            v = np.concatenate([x[j], g[n, j]])
            assert np.max(np.abs(h[n, j] - (m.P @ v + m.p))) <= 1e-14
    with pytest.raises(InvalidInputError):
        ifno.lift(m, rng.standard_normal((2, 8, 1)))


def test_field_round_trip():
    m = model_with()
    f = Field(Grid(1, 8), np.sin(np.arange(8.0)))
    out = ifno.forward(m, f)
    assert isinstance(out, Field) and out.values.shape == (8, 1)
    assert np.array_equal(out.values, ifno.forward(m, f.values[None])[0])


# ---------------------------------------------------------------- iterative layer

def test_zero_iterative_params_give_identity():
    h = np.random.default_rng(2).standard_normal((3, 8, 4))
    for L in (1, 3, 7):
        m = zero_iter(model_with(L=L))
        assert np.array_equal(ifno.iterate_layer(m, h), h)


def test_iterate_layer_scalar_example():
    m = ifno.IFNOModel(
        P=np.ones((1, 2)), p=np.zeros(1), W=np.ones((1, 1)), R_re=np.zeros((1, 1, 1)), R_im=np.zeros((1, 1, 1)),
        c=np.zeros(1), Q1=np.ones((1, 1)), q1=np.zeros(1), Q2=np.ones((1, 1)), q2=np.zeros(1), n_layers=1, k_max=0,
    )  # fmt: skip
    assert ifno.iterate_layer(m, np.ones((1, 1, 1))).item() == 2.0


def test_spectral_term_matches_circular_convolution():
    rng = np.random.default_rng(3)
    m = model_with(d_h=3, k_max=3, L=1)
    m = m.replace(W=np.zeros((3, 3)), c=np.zeros(3), R_re=rng.standard_normal(m.R_re.shape),
                  R_im=rng.standard_normal(m.R_im.shape))  # fmt: skip
    h = rng.standard_normal((1, 8, 3))
    R = m.R_re + 1j * m.R_im
    t = np.arange(8)
    kern = np.real(R[0])[None] * np.ones((8, 1, 1))
    for k in range(1, 4):
        kern = kern + 2 * np.real(R[k][None] * np.exp(2j * np.pi * k * t / 8)[:, None, None])
    kern /= 8
    conv = np.stack([sum(kern[(j - i) % 8] @ h[0, i] for i in range(8)) for j in range(8)])
    expected = h[0] + relu(conv)
    assert np.max(np.abs(ifno.iterate_layer(m, h)[0] - expected)) <= 1e-12


def test_iterate_layer_rejects_truncation_violation():
    m = model_with(k_max=5)
    with pytest.raises(InvalidArgumentError):
        ifno.iterate_layer(m, np.zeros((1, 8, 4)))
    with pytest.raises(InvalidArgumentError):
        ifno.forward(m, np.zeros((1, 8, 1)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.integers(1, 7))
def test_spectral_term_is_translation_equivariant(seed, shift):
    rng = np.random.default_rng(seed)
    m = model_with(d_h=3, k_max=4, L=1)
    m = m.replace(W=np.zeros((3, 3)), c=np.zeros(3), R_re=rng.standard_normal(m.R_re.shape),
                  R_im=rng.standard_normal(m.R_im.shape))  # fmt: skip
    h = rng.standard_normal((1, 8, 3))
    a = np.roll(ifno.iterate_layer(m, h), shift, axis=1)
    b = ifno.iterate_layer(m, np.roll(h, shift, axis=1))
    assert np.max(np.abs(a - b)) <= 1e-12


# ---------------------------------------------------------------- projection

def test_projection_examples():
    rng = np.random.default_rng(4)
    m = model_with(d_h=3, d_u=3)
    h = rng.uniform(0.1, 2.0, (2, 8, 3))
    ident = m.replace(Q1=np.eye(3), q1=np.zeros(3), Q2=np.eye(3), q2=np.zeros(3))
    assert np.array_equal(ifno.project(ident, h), h)
    q2 = np.array([1.0, -2.0, 0.5])
    flat = m.replace(Q1=np.zeros((12, 3)), Q2=np.zeros((3, 12)), q2=q2)
    assert np.array_equal(ifno.project(flat, h), np.broadcast_to(q2, h.shape))


def test_projection_matches_per_node_oracle():
    rng = np.random.default_rng(5)
    m = model_with(d_h=3, d_u=2)
    m = m.replace(Q1=rng.standard_normal((12, 3)), q1=rng.standard_normal(12),
                  Q2=rng.standard_normal((2, 12)), q2=rng.standard_normal(2))  # fmt: skip
    h = rng.standard_normal((2, 8, 3))
    out = ifno.project(m, h)
    for n in range(2):
        for j in range(8):
            ref = m.Q2 @ relu(m.Q1 @ h[n, j] + m.q1) + m.q2
            assert np.max(np.abs(out[n, j] - ref)) <= 1e-14
    with pytest.raises(InvalidInputError):
        ifno.project(m, h[..., :2])


# ---------------------------------------------------------------- forward

def test_forward_composition():
    g = np.random.default_rng(6).standard_normal((2, 8, 1))
    m0 = model_with(L=0)
    assert np.array_equal(ifno.forward(m0, g), ifno.project(m0, ifno.lift(m0, g)))
    m = model_with(L=3)
    h = ifno.lift(m, g)
    for _ in range(3):
        h = ifno.iterate_layer(m, h)
    assert np.array_equal(ifno.forward(m, g), ifno.project(m, h))


def test_forward_is_pure_and_deterministic():
    m = model_with(seed=7)
    before = {k: v.copy() for k, v in m.params().items()}
    g = np.random.default_rng(7).standard_normal((2, 8, 1))
    a, b = ifno.forward(m, g), ifno.forward(m, g)
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], v) for k, v in m.params().items())


def test_linear_model_is_resolution_consistent():
    # identity activations make the network affine; with no coordinate
    # dependence in the lift a band-limited loading has an exact spectral
    # representation at every M > 2 * k_max
    rng = np.random.default_rng(8)
    m = model_with(d_h=4, L=3, k_max=4, seed=8)
    P = m.P.copy()
    P[:, 0] = 0.0
    m = m.replace(P=P, p=rng.standard_normal(4), c=rng.standard_normal(4), activation="identity",
                  proj_activation="identity", R_re=rng.standard_normal(m.R_re.shape) / 8,
                  R_im=rng.standard_normal(m.R_im.shape) / 8)  # fmt: skip
    coef = rng.standard_normal((3, 2))

    def loading(M):
        x = Grid(1, M).coordinates()[:, 0]
        v = sum(a * np.cos(2 * np.pi * (k + 1) * x) + b * np.sin(2 * np.pi * (k + 1) * x)
                for k, (a, b) in enumerate(coef))  # fmt: skip
        return v[None, :, None]

    coarse = ifno.forward(m, loading(16))
    fine = ifno.forward(m, loading(32))
    assert np.max(np.abs(coarse - fine[:, ::2])) <= 1e-10


def test_two_dimensional_forward_shapes():
    m = model_with(s=2, d_h=3, k_max=2)
    assert m.R_re.shape == (3 * 5, 3, 3)
    out = ifno.forward(m, np.random.default_rng(9).standard_normal((2, 8, 8, 1)))
    assert out.shape == (2, 8, 8, 1) and np.all(np.isfinite(out))


@pytest.mark.parametrize("s,d_g,d_h,d_Q,d_u,k_max", [(1, 1, 4, 16, 1, 3), (2, 2, 3, 5, 2, 2), (1, 3, 2, 2, 1, 0)])
def test_parameter_counts(s, d_g, d_h, d_Q, d_u, k_max):
    m = ifno.init_model(s, d_g, d_h, d_u, 2, k_max, d_Q=d_Q)
    expected = ifno.expected_param_counts(s, d_g, d_h, d_Q, d_u, k_max)
    K = (k_max + 1) * (2 * k_max + 1) ** (s - 1)
    assert expected[Group.ITER] == d_h * d_h + 2 * K * d_h * d_h + d_h
    for grp, n in expected.items():
        assert m.n_params(grp) == n
    assert m.n_params() == sum(expected.values())


def test_init_scheme():
    m = ifno.init_model(1, 1, 8, 1, 2, 3, seed=0)
    assert not (m.p.any() or m.c.any() or m.q1.any() or m.q2.any())
    assert np.max(np.abs(m.P)) <= 1 / np.sqrt(2) and np.max(np.abs(m.W)) <= 1 / np.sqrt(8)
    assert np.max(np.abs(m.R_re)) <= 1 / (8 * 4) and m.d_Q == 32
    assert np.array_equal(ifno.init_model(1, 1, 8, 1, 2, 3, seed=0).R_im, m.R_im)


def test_model_rejects_bad_shapes():
    m = model_with()
    with pytest.raises(InvalidInputError):
        m.replace(W=np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        m.replace(activation="tanh")
    with pytest.raises(InvalidInputError):
        ifno.forward(m, np.zeros((2, 8, 2)))


# ---------------------------------------------------------------- deepen

def test_deepen_copies_parameters():
    m = model_with(L=1)
    d = ifno.deepen(m)
    assert d.n_layers == 2
    for k, v in m.params().items():
        assert getattr(d, k).tobytes() == v.tobytes() and getattr(d, k) is not v
    with pytest.raises(InvalidArgumentError):
        ifno.deepen(model_with(L=0))


def test_deepened_loss_stays_close_to_parent():
    rng = np.random.default_rng(10)
    teacher = model_with(seed=11, L=2)
    g = rng.standard_normal((16, 16, 1))
    u = ifno.forward(teacher, g)
    student, hist = train_loop(model_with(seed=12, L=1), g, u, TrainConfig(learning_rate=1e-2, epochs=150))
    parent = ifno.loss_value(student, g, u)
    child = ifno.loss_value(ifno.deepen(student), g, u)
    assert np.isfinite(child) and child <= 4 * parent
