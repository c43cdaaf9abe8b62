"""Single-task training: Adam with step-decayed learning rate and parameter-group masking."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from metano import ifno
from metano.autodiff import ALL_GROUPS, Group
from metano.errors import InvalidArgumentError, InvalidDatasetError, TrainingDivergedError
from metano.ifno import GROUP_PARAMS, IFNOModel

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay_rate: float = 1.0
    decay_every: int = 100
    weight_decay: float = 0.0
    epochs: int = 100
    batch: int | None = None
    seed: int = 0
    trainable_groups: frozenset = ALL_GROUPS

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise InvalidArgumentError("decay_rate must lie in (0, 1]")
        if self.epochs < 0 or self.decay_every < 1 or self.weight_decay < 0:
            raise InvalidArgumentError("invalid epochs / decay_every / weight_decay")
        if self.batch is not None and self.batch < 1:
            raise InvalidArgumentError("batch must be positive or None")
        object.__setattr__(self, "trainable_groups", frozenset(Group(g) for g in self.trainable_groups))

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_rate ** (epoch // self.decay_every)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam update of every entry in ``grads``.

    Weight decay enters as an L2 term added to the gradient. Returns a new
    params dict (untouched keys are shared, updated ones are fresh arrays).
    """
    if not lr > 0:
        raise InvalidArgumentError("learning rate must be positive")
    state.t += 1
    t = state.t
    out = dict(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in parameter '{name}' at step {t}")
        theta = params[name]
        if g.shape != theta.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {theta.shape} for '{name}'")
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - BETA1) * g if m is None else BETA1 * m + (1 - BETA1) * g
        v = (1 - BETA2) * g * g if v is None else BETA2 * v + (1 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out, state


def trainable_names(groups) -> list[str]:
    return [n for grp in (Group.LIFT, Group.ITER, Group.PROJ) if grp in groups for n in GROUP_PARAMS[grp]]


def check_loss(loss: float, epoch: int) -> None:
    if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise TrainingDivergedError(f"loss {loss!r} at epoch {epoch} exceeds the divergence threshold")


def batches(n: int, config: TrainConfig, epoch: int):
    if config.batch is None or config.batch >= n:
        yield np.arange(n)
        return
    perm = np.random.default_rng((config.seed, epoch)).permutation(n)
    for start in range(0, n, config.batch):
        yield perm[start : start + config.batch]


def train_loop(model: IFNOModel, g: np.ndarray, u: np.ndarray, config: TrainConfig):
    """Fit ``model`` on a context set; only ``config.trainable_groups`` move.

    Returns ``(model, history)`` where history holds the full-context loss
    measured before each epoch's update(s).
    """
    if len(g) == 0 or len(g) != len(u):
        raise InvalidDatasetError("context set is empty or unpaired")
    names = trainable_names(config.trainable_groups)
    state = AdamState()
    params = model.params()
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        if config.batch is None or config.batch >= len(g):
            loss, grads = ifno.loss_and_grads(model, g, u)
            check_loss(loss, epoch)
            history.append(loss)
            params, state = adam_step(params, {n: grads[n] for n in names}, state, lr, config.weight_decay)
            model = model.replace(**params)
            continue
        loss = ifno.loss_value(model, g, u)
        check_loss(loss, epoch)
        history.append(loss)
        for idx in batches(len(g), config, epoch):
            _, grads = ifno.loss_and_grads(model, g[idx], u[idx])
            params, state = adam_step(params, {n: grads[n] for n in names}, state, lr, config.weight_decay)
            model = model.replace(**params)
    return model, history


def train_shallow_to_deep(model: IFNOModel, g, u, config: TrainConfig, stages: int):
    """Train, then repeatedly double the depth and retrain; ``stages`` deepenings."""
    history = []
    for stage in range(stages + 1):
        if stage:
            model = ifno.deepen(model)
        model, h = train_loop(model, g, u, config)
        history.extend(h)
    return model, history
