"""First-layer meta-learning (MetaNO) and the comparison methods.

MetaNO trains one lift per training task against shared iterative and
projection groups, then adapts only a fresh lift on a new task. The same
code with ``adapt_layer=Group.PROJ`` gives the projection-adapted ablation.
MAML/ANIL use a first-order outer gradient.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from metano import ifno
from metano.autodiff import ALL_GROUPS, Group
from metano.errors import InvalidArgumentError, InvalidDatasetError, InvalidInputError, InvalidSplitError, MetaNOError
from metano.ifno import GROUP_PARAMS, IFNOModel
from metano.tasks import TaskDataset
from metano.train import AdamState, TrainConfig, adam_step, batches, check_loss, train_loop

log = logging.getLogger(__name__)

FINETUNE_LR_FACTOR = 0.1


class Variant(str, enum.Enum):
    MAML = "MAML"
    ANIL = "ANIL"


class Baseline(str, enum.Enum):
    SINGLE = "SINGLE"
    PRETRAIN_ALL = "PRETRAIN_ALL"
    PRETRAIN_ONE = "PRETRAIN_ONE"


def _shared_groups(adapt_layer: Group) -> tuple[Group, ...]:
    return tuple(g for g in (Group.LIFT, Group.ITER, Group.PROJ) if g != adapt_layer)


def assert_frozen(before: IFNOModel, after: IFNOModel, groups) -> None:
    """Raise unless every parameter of ``groups`` is bitwise identical."""
    for grp in groups:
        for name in GROUP_PARAMS[grp]:
            a, b = getattr(before, name), getattr(after, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                raise MetaNOError(f"frozen parameter '{name}' changed")


# ------------------------------------------------------------------ MetaNO

@dataclass(frozen=True, eq=False)
class MetaState:
    """Shared groups once, plus one copy of the adapted group per training task."""

    template: IFNOModel
    shared: dict[str, np.ndarray]
    task_params: tuple[dict[str, np.ndarray], ...]
    adapt_layer: Group = Group.LIFT
    history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "adapt_layer", Group(self.adapt_layer))
        if self.adapt_layer not in (Group.LIFT, Group.PROJ):
            raise InvalidArgumentError("adapt_layer must be LIFT or PROJ")
        if not self.task_params:
            raise InvalidInputError("meta state needs at least one task")
        names = GROUP_PARAMS[self.adapt_layer]
        for tp in self.task_params:
            if tuple(tp) != names or any(tp[n].shape != getattr(self.template, n).shape for n in names):
                raise InvalidInputError("task-wise parameter blocks must share the template's shapes")
        expect = {n for grp in _shared_groups(self.adapt_layer) for n in GROUP_PARAMS[grp]}
        if set(self.shared) != expect:
            raise InvalidInputError(f"shared groups must hold exactly {sorted(expect)}")

    @property
    def H(self) -> int:
        return len(self.task_params)

    def task_model(self, eta: int) -> IFNOModel:
        return self.template.replace(**self.shared, **self.task_params[eta])

    def mean_adapted(self) -> dict[str, np.ndarray]:
        out = {}
        for name in GROUP_PARAMS[self.adapt_layer]:
            acc = self.task_params[0][name].copy()
            for tp in self.task_params[1:]:
                acc = acc + tp[name]
            out[name] = acc / self.H
        return out

    def initial_model(self) -> IFNOModel:
        """Shared groups plus the task-averaged adapted group."""
        return self.template.replace(**self.shared, **self.mean_adapted())


def _contexts(tasks) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for t in tasks:
        g, u = (t.context_g, t.context_u) if isinstance(t, TaskDataset) else t
        if len(g) == 0:
            raise InvalidDatasetError("every training task needs a non-empty context set")
        out.append((np.asarray(g, dtype=np.float64), np.asarray(u, dtype=np.float64)))
    return out


def meta_loss_and_grads(models, data, adapt_layer: Group) -> tuple[float, dict[str, np.ndarray]]:
    """Summed loss of task models on their ``(g, u)`` batches (``None`` skips a task).

    Shared-group gradients are summed in task order; the adapted group's
    gradient for task ``eta`` is returned under ``"name@eta"``.
    """
    local = GROUP_PARAMS[Group(adapt_layer)]
    shared = [n for grp in _shared_groups(Group(adapt_layer)) for n in GROUP_PARAMS[grp]]
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for eta, (model, batch) in enumerate(zip(models, data)):
        if batch is None:
            continue
        loss, gr = ifno.loss_and_grads(model, *batch)
        total += loss
        for n in shared:
            grads[n] = gr[n] if n not in grads else grads[n] + gr[n]
        for n in local:
            grads[f"{n}@{eta}"] = gr[n]
    return total, grads


def meta_train(
    tasks,
    base: IFNOModel | None,
    config: TrainConfig,
    adapt_layer: Group = Group.LIFT,
    init: MetaState | None = None,
) -> MetaState:
    """Jointly fit the task-wise group of every task and the shared groups.

    ``tasks`` holds :class:`TaskDataset` objects or ``(g, u)`` context pairs.
    Each epoch sums the per-task losses; shared gradients are accumulated in
    task order, task-wise gradients go only to that task's copy. Training
    starts from ``base`` copied to every task, or resumes from ``init``.
    """
    if init is not None:
        base, adapt_layer = init.template, init.adapt_layer
        if init.H != len(tasks):
            raise InvalidInputError(f"init state has {init.H} tasks, got {len(tasks)}")
    adapt_layer = Group(adapt_layer)
    if adapt_layer not in (Group.LIFT, Group.PROJ):
        raise InvalidArgumentError("adapt_layer must be LIFT or PROJ")
    if not tasks:
        raise InvalidInputError("meta_train needs at least one task")
    ctx = _contexts(tasks)
    H = len(ctx)
    local = GROUP_PARAMS[adapt_layer]
    shared_names = [n for grp in _shared_groups(adapt_layer) for n in GROUP_PARAMS[grp]]

    # one flat parameter dict keeps a single Adam state; task copies are keyed "name@eta"
    if init is None:
        params = {n: getattr(base, n) for n in shared_names}
        for eta in range(H):
            params.update({f"{n}@{eta}": getattr(base, n).copy() for n in local})
    else:
        params = dict(init.shared)
        for eta in range(H):
            params.update({f"{n}@{eta}": init.task_params[eta][n] for n in local})
    state = AdamState()
    history = []

    def model_for(eta):
        return base.replace(**{n: params[n] for n in shared_names}, **{n: params[f"{n}@{eta}"] for n in local})

    def step(idx_per_task, lr, epoch=None):
        # epoch is passed only for full-batch steps, whose summed loss is the epoch loss
        nonlocal params
        data = [None if idx is None else (ctx[eta][0][idx], ctx[eta][1][idx]) for eta, idx in enumerate(idx_per_task)]
        total, grads = meta_loss_and_grads([model_for(eta) for eta in range(H)], data, adapt_layer)
        if epoch is not None:
            check_loss(total, epoch)
            history.append(total)
        ordered = {k: grads[k] for k in params if k in grads}
        params, _ = adam_step(params, ordered, state, lr, config.weight_decay)

    full_batch = config.batch is None or all(config.batch >= len(g) for g, _ in ctx)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        if full_batch:
            step([np.arange(len(g)) for g, _ in ctx], lr, epoch)
            continue
        loss = 0.0
        for eta in range(H):
            g, u = ctx[eta]
            loss += ifno.loss_value(model_for(eta), g, u)
        check_loss(loss, epoch)
        history.append(loss)
        per_task = [list(batches(len(g), config, epoch)) for g, _ in ctx]
        for k in range(max(len(b) for b in per_task)):
            step([b[k] if k < len(b) else None for b in per_task], lr)

    return MetaState(
        template=base.copy(),
        shared={n: params[n] for n in shared_names},
        task_params=tuple({n: params[f"{n}@{eta}"] for n in local} for eta in range(H)),
        adapt_layer=adapt_layer,
        history=(init.history if init is not None else ()) + tuple(history),
    )


def meta_test(
    state: MetaState,
    g: np.ndarray,
    u: np.ndarray,
    config: TrainConfig,
    finetune: bool = True,
    finetune_config: TrainConfig | None = None,
) -> IFNOModel:
    """Adapt to a new task from its context set.

    Starts from the averaged task-wise group, trains only that group, then
    (``finetune``) trains everything with ``finetune_config`` or, by default,
    ``config`` at a tenth of the learning rate.
    """
    if len(g) == 0 or len(g) != len(u):
        raise InvalidDatasetError("context set is empty or unpaired")
    start = state.initial_model()
    model, _ = train_loop(start, g, u, config.replace(trainable_groups={state.adapt_layer}))
    assert_frozen(start, model, _shared_groups(state.adapt_layer))
    if finetune:
        ft = finetune_config or config.replace(learning_rate=config.learning_rate * FINETUNE_LR_FACTOR)
        model, _ = train_loop(model, g, u, ft.replace(trainable_groups=ALL_GROUPS))
    return model


# ------------------------------------------------------------------ MAML / ANIL

@dataclass(frozen=True, eq=False)
class GBMLState:
    init: IFNOModel
    variant: Variant
    inner_lr: float
    inner_steps: int
    history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.inner_lr > 0 or self.inner_steps < 0:
            raise InvalidArgumentError("inner_lr must be positive and inner_steps non-negative")

    @property
    def inner_groups(self) -> frozenset:
        return inner_groups(self.variant)


def inner_groups(variant) -> frozenset:
    return ALL_GROUPS if Variant(variant) == Variant.MAML else frozenset({Group.PROJ})


def split_support_target(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 50/50 split of ``n`` context indices into disjoint support and target sets."""
    if n < 2:
        raise InvalidSplitError(f"cannot split {n} context samples into support and target")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    support, target = np.sort(perm[:half]), np.sort(perm[half:])
    check_split(support, target)
    return support, target


def check_split(support: np.ndarray, target: np.ndarray) -> None:
    if len(support) == 0 or len(target) == 0:
        raise InvalidSplitError("support and target sets must be non-empty")
    if np.intersect1d(support, target).size:
        raise InvalidSplitError("support and target sets overlap")


def inner_loop(model: IFNOModel, g, u, variant, alpha: float, steps: int) -> IFNOModel:
    """``steps`` plain gradient steps of size ``alpha`` on the variant's groups."""
    names = [n for grp in (Group.LIFT, Group.ITER, Group.PROJ) if grp in inner_groups(variant) for n in GROUP_PARAMS[grp]]
    for _ in range(steps):
        _, grads = ifno.loss_and_grads(model, g, u)
        model = model.replace(**{n: getattr(model, n) - alpha * grads[n] for n in names})
    return model


def gbml_loss_and_grads(theta: IFNOModel, ctx, splits, variant, alpha: float, steps: int):
    """First-order meta-gradient: sum over tasks of the target-loss gradient at the adapted parameters."""
    frozen = [grp for grp in (Group.LIFT, Group.ITER) if grp not in inner_groups(variant)]
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for (g, u), (s_idx, t_idx) in zip(ctx, splits):
        check_split(s_idx, t_idx)
        adapted = inner_loop(theta, g[s_idx], u[s_idx], variant, alpha, steps)
        assert_frozen(theta, adapted, frozen)
        loss, gr = ifno.loss_and_grads(adapted, g[t_idx], u[t_idx])
        total += loss
        for n in ifno.PARAM_ORDER:
            grads[n] = gr[n] if n not in grads else grads[n] + gr[n]
    return total, grads


def gbml_train(
    tasks,
    base: IFNOModel,
    config: TrainConfig,
    variant=Variant.MAML,
    inner_lr: float = 1e-2,
    inner_steps: int = 1,
) -> GBMLState:
    """First-order MAML/ANIL: Adam on the summed target loss at the adapted parameters."""
    variant = Variant(variant)
    if not tasks:
        raise InvalidInputError("gbml_train needs at least one task")
    ctx = _contexts(tasks)
    splits = [split_support_target(len(g), (config.seed, eta)) for eta, (g, _) in enumerate(ctx)]
    GBMLState(base, variant, inner_lr, inner_steps)  # validates arguments early
    params = base.params()
    state = AdamState()
    history = []
    for epoch in range(config.epochs):
        total, grads = gbml_loss_and_grads(base.replace(**params), ctx, splits, variant, inner_lr, inner_steps)
        check_loss(total, epoch)
        history.append(total)
        params, _ = adam_step(params, grads, state, config.lr_at(epoch), config.weight_decay)
    return GBMLState(base.replace(**params), variant, inner_lr, inner_steps, tuple(history))


def gbml_adapt(state: GBMLState, g, u, config: TrainConfig) -> IFNOModel:
    """Train from the learned initialization on the variant's groups for the configured epochs."""
    if len(g) == 0 or len(g) != len(u):
        raise InvalidDatasetError("context set is empty or unpaired")
    model, _ = train_loop(state.init, g, u, config.replace(trainable_groups=state.inner_groups))
    frozen = [grp for grp in (Group.LIFT, Group.ITER) if grp not in state.inner_groups]
    assert_frozen(state.init, model, frozen)
    return model


# ------------------------------------------------------------------ transfer baselines

def run_baseline(
    kind,
    tasks,
    g: np.ndarray,
    u: np.ndarray,
    base: IFNOModel,
    config: TrainConfig,
    pretrain_config: TrainConfig | None = None,
    source: int | None = None,
) -> IFNOModel:
    """Train from ``base`` on the test context, optionally after pretraining.

    PRETRAIN_ALL pools every training task's context; PRETRAIN_ONE uses task
    ``source`` only. ``pretrain_config`` defaults to ``config``.
    """
    kind = Baseline(kind)
    if len(g) == 0 or len(g) != len(u):
        raise InvalidDatasetError("context set is empty or unpaired")
    model = base
    if kind != Baseline.SINGLE:
        ctx = _contexts(tasks)
        if kind == Baseline.PRETRAIN_ONE:
            if source is None:
                raise InvalidArgumentError("PRETRAIN_ONE needs a source task id")
            if not 0 <= source < len(ctx):
                raise InvalidArgumentError(f"source task {source} out of range for {len(ctx)} tasks")
            pg, pu = ctx[source]
        else:
            pg = np.concatenate([c[0] for c in ctx])
            pu = np.concatenate([c[1] for c in ctx])
        model, _ = train_loop(model, pg, pu, pretrain_config or config)
    model, _ = train_loop(model, g, u, config.replace(trainable_groups=ALL_GROUPS))
    return model
