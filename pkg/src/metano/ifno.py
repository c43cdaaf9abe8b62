"""Implicit Fourier neural operator: lift, L weight-tied residual spectral layers, projection.

Batched inputs are arrays shaped ``(N, *grid, channels)``; :class:`Field`
inputs are accepted too and come back as fields. Node coordinates are
appended to the loading channels before the lift.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from metano.autodiff import Group, ParamSlot, Tape, n_spectral_modes
from metano.errors import InvalidArgumentError, InvalidInputError
from metano.grid import Field, Grid

GROUP_PARAMS: dict[Group, tuple[str, ...]] = {
    Group.LIFT: ("P", "p"),
    Group.ITER: ("W", "R_re", "R_im", "c"),
    Group.PROJ: ("Q1", "q1", "Q2", "q2"),
}
PARAM_ORDER: tuple[str, ...] = GROUP_PARAMS[Group.LIFT] + GROUP_PARAMS[Group.ITER] + GROUP_PARAMS[Group.PROJ]
PARAM_GROUP: dict[str, Group] = {name: grp for grp, names in GROUP_PARAMS.items() for name in names}
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True, eq=False)
class IFNOModel:
    """Parameter set ``[theta_P, theta_I, theta_Q]`` plus architecture constants.

    Nothing here depends on the grid resolution, so one model evaluates on
    any grid with ``M >= 2 * k_max``.
    """

    P: np.ndarray
    p: np.ndarray
    W: np.ndarray
    R_re: np.ndarray
    R_im: np.ndarray
    c: np.ndarray
    Q1: np.ndarray
    q1: np.ndarray
    Q2: np.ndarray
    q2: np.ndarray
    n_layers: int
    k_max: int
    s: int = 1
    activation: str = "relu"
    proj_activation: str = "relu"

    def __post_init__(self):
        for name in PARAM_ORDER:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.s not in (1, 2):
            raise InvalidInputError(f"grid dimension s must be 1 or 2, got {self.s}")
        if self.n_layers < 0 or self.k_max < 0:
            raise InvalidInputError("n_layers and k_max must be non-negative")
        if self.activation not in ACTIVATIONS or self.proj_activation not in ACTIVATIONS:
            raise InvalidInputError(f"activations must be one of {ACTIVATIONS}")
        d_h, d_Q, d_u = self.d_h, self.d_Q, self.d_u
        n_modes = n_spectral_modes(self.s, self.k_max)
        expected = {
            "P": (d_h, self.P.shape[1]),
            "p": (d_h,),
            "W": (d_h, d_h),
            "R_re": (n_modes, d_h, d_h),
            "R_im": (n_modes, d_h, d_h),
            "c": (d_h,),
            "Q1": (d_Q, d_h),
            "q1": (d_Q,),
            "Q2": (d_u, d_Q),
            "q2": (d_u,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.P.shape[1] <= self.s:
            raise InvalidInputError("lift must take coordinates plus at least one loading channel")

    @property
    def d_h(self) -> int:
        return self.W.shape[0]

    @property
    def d_g(self) -> int:
        return self.P.shape[1] - self.s

    @property
    def d_Q(self) -> int:
        return self.Q1.shape[0]

    @property
    def d_u(self) -> int:
        return self.Q2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def group(self, group: Group) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GROUP_PARAMS[group]}

    def replace(self, **changes) -> "IFNOModel":
        return dataclasses.replace(self, **changes)

    def copy(self) -> "IFNOModel":
        return self.replace(**{k: v.copy() for k, v in self.params().items()})

    def n_params(self, group: Group | None = None) -> int:
        names = PARAM_ORDER if group is None else GROUP_PARAMS[group]
        return sum(getattr(self, n).size for n in names)


def init_model(
    s: int,
    d_g: int,
    d_h: int,
    d_u: int,
    n_layers: int,
    k_max: int,
    d_Q: int | None = None,
    seed: int = 0,
    activation: str = "relu",
    proj_activation: str = "relu",
) -> IFNOModel:
    """Random model: matrices ~ U[-a, a] with a = 1/sqrt(fan_in), spectral
    parts ~ U[-1, 1] / (d_h * n_modes), biases zero."""
    d_Q = 4 * d_h if d_Q is None else d_Q
    rng = np.random.default_rng(seed)
    n_modes = n_spectral_modes(s, k_max)

    def dense(rows, cols):
        a = 1.0 / np.sqrt(cols)
        return rng.uniform(-a, a, size=(rows, cols))

    P = dense(d_h, s + d_g)
    W = dense(d_h, d_h)
    scale = 1.0 / (d_h * n_modes)
    R_re = scale * rng.uniform(-1.0, 1.0, size=(n_modes, d_h, d_h))
    R_im = scale * rng.uniform(-1.0, 1.0, size=(n_modes, d_h, d_h))
    Q1 = dense(d_Q, d_h)
    Q2 = dense(d_u, d_Q)
    return IFNOModel(
        P=P, p=np.zeros(d_h), W=W, R_re=R_re, R_im=R_im, c=np.zeros(d_h),
        Q1=Q1, q1=np.zeros(d_Q), Q2=Q2, q2=np.zeros(d_u),
        n_layers=n_layers, k_max=k_max, s=s,
        activation=activation, proj_activation=proj_activation,
    )  # fmt: skip


def expected_param_counts(s, d_g, d_h, d_Q, d_u, k_max) -> dict[Group, int]:
    return {
        Group.LIFT: d_h * (s + d_g) + d_h,
        Group.ITER: d_h * d_h + 2 * n_spectral_modes(s, k_max) * d_h * d_h + d_h,
        Group.PROJ: d_Q * d_h + d_Q + d_u * d_Q + d_u,
    }


def make_slots(model: IFNOModel) -> dict[str, ParamSlot]:
    return {name: ParamSlot(name, PARAM_GROUP[name], value) for name, value in model.params().items()}


# ------------------------------------------------------------------ graph builders

def lift_input(g: np.ndarray, s: int) -> np.ndarray:
    """Append node coordinates to a loading batch ``(N, *grid, d_g)``."""
    grid_shape = g.shape[1 : 1 + s]
    if len(set(grid_shape)) != 1 or g.ndim != s + 2:
        raise InvalidInputError(f"loading batch of shape {g.shape} is not a {s}D square-grid batch")
    coords = Grid(s, grid_shape[0]).coordinates()
    coords = np.broadcast_to(coords, (g.shape[0],) + coords.shape)
    return np.concatenate([coords, g], axis=-1)


def _act(tape: Tape, node: int, kind: str) -> int:
    return tape.relu(node) if kind == "relu" else node


def record_lift(tape, nodes, model, x_in):
    return tape.affine(x_in, nodes["P"], nodes["p"])


def record_layer(tape, nodes, model, h):
    local = tape.affine(h, nodes["W"], nodes["c"])
    spec = tape.spectral_conv(h, nodes["R_re"], nodes["R_im"], model.k_max)
    pre = tape.axpy(local, spec)
    return tape.axpy(h, _act(tape, pre, model.activation), 1.0 / model.n_layers)


def record_project(tape, nodes, model, h):
    hidden = _act(tape, tape.affine(h, nodes["Q1"], nodes["q1"]), model.proj_activation)
    return tape.affine(hidden, nodes["Q2"], nodes["q2"])


def record_forward(tape: Tape, slots: dict[str, ParamSlot], model: IFNOModel, g: np.ndarray) -> int:
    nodes = {name: tape.param(slot) for name, slot in slots.items()}
    h = record_lift(tape, nodes, model, tape.input(lift_input(g, model.s)))
    for _ in range(model.n_layers):
        h = record_layer(tape, nodes, model, h)
    return record_project(tape, nodes, model, h)


def _as_batch(x, channels: int, s: int, what: str):
    if isinstance(x, Field):
        if x.grid.dim != s:
            raise InvalidInputError(f"{what} lives on a {x.grid.dim}D grid, model expects {s}D")
        arr, grid = x.values[None], x.grid
    else:
        arr, grid = np.asarray(x, dtype=np.float64), None
    if arr.ndim != s + 2 or arr.shape[-1] != channels:
        raise InvalidInputError(f"{what} has shape {arr.shape}, expected (N, *grid, {channels})")
    return arr, grid


def _wrap(out, grid):
    return Field(grid, out[0]) if grid is not None else out


def _check_grid(model, arr):
    M = arr.shape[1]
    if 2 * model.k_max > M:
        raise InvalidArgumentError(f"k_max={model.k_max} needs M >= {2 * model.k_max}, got M={M}")


def lift(model: IFNOModel, g):
    arr, grid = _as_batch(g, model.d_g, model.s, "loading")
    tape = Tape()
    slots = make_slots(model)
    nodes = {n: tape.param(slots[n]) for n in GROUP_PARAMS[Group.LIFT]}
    out = record_lift(tape, nodes, model, tape.input(lift_input(arr, model.s)))
    return _wrap(tape.value(out), grid)


def iterate_layer(model: IFNOModel, h):
    arr, grid = _as_batch(h, model.d_h, model.s, "hidden state")
    _check_grid(model, arr)
    tape = Tape()
    slots = make_slots(model)
    nodes = {n: tape.param(slots[n]) for n in GROUP_PARAMS[Group.ITER]}
    out = record_layer(tape, nodes, model, tape.input(arr))
    return _wrap(tape.value(out), grid)


def project(model: IFNOModel, h):
    arr, grid = _as_batch(h, model.d_h, model.s, "hidden state")
    tape = Tape()
    slots = make_slots(model)
    nodes = {n: tape.param(slots[n]) for n in GROUP_PARAMS[Group.PROJ]}
    out = record_project(tape, nodes, model, tape.input(arr))
    return _wrap(tape.value(out), grid)


def forward(model: IFNOModel, g):
    arr, grid = _as_batch(g, model.d_g, model.s, "loading")
    _check_grid(model, arr)
    tape = Tape()
    out = record_forward(tape, make_slots(model), model, arr)
    return _wrap(tape.value(out), grid)


def loss_tape(model: IFNOModel, g: np.ndarray, u: np.ndarray) -> tuple[Tape, dict[str, ParamSlot]]:
    """Tape whose terminal is the relative-MSE loss of ``model`` on a batch."""
    g, _ = _as_batch(g, model.d_g, model.s, "loading")
    u, _ = _as_batch(u, model.d_u, model.s, "response")
    _check_grid(model, g)
    tape = Tape()
    slots = make_slots(model)
    pred = record_forward(tape, slots, model, g)
    tape.relative_mse(pred, tape.input(u))
    return tape, slots


def loss_and_grads(model: IFNOModel, g: np.ndarray, u: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    tape, _ = loss_tape(model, g, u)
    loss = float(tape.terminal.value)
    return loss, tape.backward()


def loss_value(model: IFNOModel, g: np.ndarray, u: np.ndarray) -> float:
    tape, _ = loss_tape(model, g, u)
    return float(tape.terminal.value)


def deepen(model: IFNOModel) -> IFNOModel:
    """Shallow-to-deep step: same weights, twice the layers (so half the step)."""
    if model.n_layers < 1:
        raise InvalidArgumentError("deepen needs at least one layer")
    return model.copy().replace(n_layers=2 * model.n_layers)

