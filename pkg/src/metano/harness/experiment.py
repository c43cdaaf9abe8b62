"""End-to-end experiment protocol and the comma-separated report.

Training tasks, test tasks, meta-training and pretraining happen once per
run. Each repeat then draws a fresh context subset of every test task (the
subsets are nested across context sizes) and re-runs the adaptation or the
from-scratch baselines with repeat-specific seeds.
"""
from __future__ import annotations

import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import metano
from metano import ifno, kernels, meta
from metano.autodiff import ALL_GROUPS, Group
from metano.grid import Grid, batch_relative_errors
from metano.harness import io
from metano.harness.config import ExperimentConfig
from metano.tasks import TaskDataset, build_task_dataset, make_task
from metano.train import TrainConfig

log = logging.getLogger(__name__)

HEADER = ("method", "family", "N_test", "repeat", "mean_rel_err", "stderr", "wallclock_s")
META_METHODS = {"metano": Group.LIFT, "metano-minus": Group.LIFT, "metalast": Group.PROJ}
GBML_METHODS = {"maml": meta.Variant.MAML, "anil": meta.Variant.ANIL}
ROW_LABEL = {"maml": "maml-fo", "anil": "anil-fo"}  # first-order outer gradients

# seed namespaces; every random draw is keyed by (config seed, namespace, index...)
_TRAIN_TASK, _TRAIN_DATA, _TEST_TASK, _TEST_DATA = 0, 1, 2, 3
_INIT_META, _INIT_SINGLE, _SUBSET, _SOURCES, _INIT_GBML, _INIT_PRE, _INIT_PRE_ALL = 4, 5, 6, 7, 8, 9, 10


def _seed_int(cfg: ExperimentConfig, ns: int, i: int) -> int:
    # file formats store task seeds as u64, so these are plain integers
    return (cfg.seed * 16 + ns) * 1_000_000 + i


# ------------------------------------------------------------------ workspace

class Workspace:
    """Lazily built, optionally directory-backed experiment artifacts."""

    def __init__(self, cfg: ExperimentConfig, directory=None, save: bool = False):
        self.cfg = cfg
        self.dir = Path(directory) if directory is not None else None
        self.save = save and self.dir is not None
        if self.save:
            self.dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}

    @property
    def grid(self) -> Grid:
        return Grid(self.cfg.dim, self.cfg.M)

    def _path(self, name: str) -> Path | None:
        return self.dir / name if self.dir is not None else None

    def _dataset(self, name, family, task_seed, data_seed, n_ctx, n_tgt) -> TaskDataset:
        path = self._path(name)
        if path is not None and path.exists():
            ds = io.load_dataset(path)
            if ds.spec.seed == task_seed and len(ds.context_g) == n_ctx and len(ds.target_g) == n_tgt:
                return ds
            log.warning("%s does not match the config; regenerating", path)
        spec = make_task(family, self.grid, task_seed, self.cfg.amplitude)
        ds = build_task_dataset(spec, n_ctx, n_tgt, data_seed)
        if self.save:
            io.save_dataset(path, ds)
        return ds

    def train_tasks(self) -> list[TaskDataset]:
        if "train" not in self._cache:
            c = self.cfg
            self._cache["train"] = [
                self._dataset(f"train_{i:03d}.mno", c.family, _seed_int(c, _TRAIN_TASK, i),
                              _seed_int(c, _TRAIN_DATA, i), c.n_context_train, 0)
                for i in range(c.H)
            ]  # fmt: skip
        return self._cache["train"]

    def test_tasks(self) -> list[TaskDataset]:
        if "test" not in self._cache:
            c = self.cfg
            self._cache["test"] = [
                self._dataset(f"test_{j:03d}.mno", c.family, _seed_int(c, _TEST_TASK, j),
                              _seed_int(c, _TEST_DATA, j), c.max_context, c.n_target_test)
                for j in range(c.n_test_tasks)
            ]  # fmt: skip
        return self._cache["test"]

    def base_model(self, ns: int, *index) -> ifno.IFNOModel:
        c = self.cfg
        return ifno.init_model(
            c.dim, 1, c.d_h, 1, c.L, c.k_max, d_Q=c.d_Q_eff, seed=(c.seed, ns) + tuple(index)
        )

    def train_config(self, phase: str) -> TrainConfig:
        c = self.cfg
        epochs = {
            "meta": c.epochs_meta, "adapt": c.epochs_adapt, "single": c.epochs_single,
            "pretrain": c.epochs_pretrain, "gbml": c.epochs_gbml,
        }[phase]  # fmt: skip
        lr = c.lr_for("meta" if phase in ("meta", "gbml") else "adapt" if phase == "adapt" else "")
        return TrainConfig(lr, c.decay_rate, c.decay_every, c.weight_decay, epochs, None, c.seed)

    def finetune_config(self) -> TrainConfig:
        c = self.cfg
        return self.train_config("adapt").replace(
            learning_rate=c.lr_for("adapt") * c.finetune_lr_factor, epochs=c.epochs_finetune
        )

    def meta_state(self, adapt_layer: Group) -> meta.MetaState:
        key = ("meta", adapt_layer)
        if key not in self._cache:
            path = self._path(f"meta_{adapt_layer.value.lower()}.ckpt")
            if path is not None and path.exists():
                self._cache[key] = io.load_checkpoint(path)
            else:
                self._cache[key] = meta_train_staged(
                    self.train_tasks(), self.base_model(_INIT_META), self.train_config("meta"),
                    adapt_layer, self.cfg.shallow_to_deep,
                )
                if self.save:
                    io.save_checkpoint(path, self._cache[key])
        return self._cache[key]

    def gbml_state(self, variant: meta.Variant) -> meta.GBMLState:
        key = ("gbml", variant)
        if key not in self._cache:
            c = self.cfg
            self._cache[key] = meta.gbml_train(
                self.train_tasks(), self.base_model(_INIT_GBML), self.train_config("gbml"),
                variant, c.inner_lr, c.inner_steps,
            )
        return self._cache[key]

    def pretrained(self, source: int | None) -> ifno.IFNOModel:
        """Model pretrained on all training tasks (``source=None``) or on one."""
        key = ("pre", source)
        if key not in self._cache:
            from metano.train import train_loop

            tasks = self.train_tasks()
            if source is None:
                g = np.concatenate([t.context_g for t in tasks])
                u = np.concatenate([t.context_u for t in tasks])
            else:
                g, u = tasks[source].context_g, tasks[source].context_u
            base = self.base_model(_INIT_PRE_ALL) if source is None else self.base_model(_INIT_PRE, source)
            self._cache[key], _ = train_loop(base, g, u, self.train_config("pretrain"))
        return self._cache[key]

    def sources(self) -> list[int]:
        rng = np.random.default_rng((self.cfg.seed, _SOURCES))
        return sorted(int(i) for i in rng.permutation(self.cfg.H)[: self.cfg.n_sources])

    def context(self, task: int, repeat: int, n: int):
        ds = self.test_tasks()[task]
        perm = np.random.default_rng((self.cfg.seed, _SUBSET, repeat, task)).permutation(len(ds.context_g))
        idx = np.sort(perm[:n])
        return ds.context_g[idx], ds.context_u[idx]


def meta_train_staged(tasks, base, config, adapt_layer, stages: int = 0) -> meta.MetaState:
    """meta_train, optionally shallow-to-deep: start at L / 2**stages layers and double."""
    if stages == 0:
        return meta.meta_train(tasks, base, config, adapt_layer)
    if base.n_layers % (2**stages):
        raise ValueError(f"L={base.n_layers} is not divisible by 2**{stages}")
    state = meta.meta_train(tasks, base.replace(n_layers=base.n_layers >> stages), config, adapt_layer)
    for _ in range(stages):
        state = meta.meta_train(tasks, None, config, adapt_layer, init=deepen_state(state))
    return state


def deepen_state(state: meta.MetaState) -> meta.MetaState:
    return meta.MetaState(
        ifno.deepen(state.template), dict(state.shared), state.task_params, state.adapt_layer, state.history
    )


# ------------------------------------------------------------------ adaptation per method

def adapt_model(ws: Workspace, method: str, g, u, repeat: int, source: int | None = None):
    if method in META_METHODS:
        state = ws.meta_state(META_METHODS[method])
        ft = method != "metano-minus"
        return meta.meta_test(state, g, u, ws.train_config("adapt"), finetune=ft, finetune_config=ws.finetune_config())
    if method in GBML_METHODS:
        return meta.gbml_adapt(ws.gbml_state(GBML_METHODS[method]), g, u, ws.train_config("single"))
    if method == "single":
        cfg = ws.train_config("single")
        return meta.run_baseline(meta.Baseline.SINGLE, [], g, u, ws.base_model(_INIT_SINGLE, repeat), cfg)
    if method in ("pretrain-all", "pretrain-one"):
        from metano.train import train_loop

        model, _ = train_loop(ws.pretrained(source), g, u, ws.train_config("single").replace(trainable_groups=ALL_GROUPS))
        return model
    raise ValueError(f"unknown method {method!r}")


def target_errors(model, ds: TaskDataset) -> np.ndarray:
    return batch_relative_errors(ifno.forward(model, ds.target_g), ds.target_u)


# ------------------------------------------------------------------ report

@dataclass
class Report:
    config: ExperimentConfig
    rows: list[tuple] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    meta_lines: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lookup(self, method: str, n: int, repeat="mean") -> float:
        label = ROW_LABEL.get(method, method)
        for r in self.rows:
            if r[0] == label and r[2] == n and r[3] == repeat:
                return r[4]
        raise KeyError((method, n, repeat))

    def to_csv(self, include_wallclock: bool = True) -> str:
        lines = [f"# {line}" for line in self.meta_lines]
        lines.append(",".join(HEADER))
        for r in self.rows:
            wall = f"{r[6]:.3f}" if include_wallclock else ""
            lines.append(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]!r},{r[5]!r},{wall}")
        lines += [f"# error: {e}" for e in self.errors]
        return "\n".join(lines) + "\n"


def _metadata(cfg: ExperimentConfig, ws: Workspace) -> list[str]:
    c = cfg
    out = ["metano experiment report", f"metano={metano.__version__} numpy={np.__version__} "
           f"python={platform.python_version()} backend={kernels.BACKEND}"]  # fmt: skip
    out += [f"config.{k} = {v}" for k, v in cfg.items()]
    out.append("seeds.train_tasks = " + ",".join(str(_seed_int(c, _TRAIN_TASK, i)) for i in range(c.H)))
    out.append("seeds.test_tasks = " + ",".join(str(_seed_int(c, _TEST_TASK, j)) for j in range(c.n_test_tasks)))
    out.append(f"finetune = lr x {c.finetune_lr_factor} for {c.epochs_finetune} epochs")
    if any(m in GBML_METHODS for m in c.method):
        out.append("maml/anil = first-order outer gradient, plain SGD inner loop, 50/50 support/target split")
    if "pretrain-one" in c.method:
        out.append("pretrain-one sources = " + ",".join(str(s) for s in ws.sources()))
    out.append("stderr = per repeat over pooled target samples; 'mean' rows over repeats")
    return out


def run_experiment(cfg: ExperimentConfig, workspace: Workspace | None = None, methods=None) -> Report:
    """Run every (method, N_test, repeat) cell; failures become error lines."""
    ws = workspace or Workspace(cfg)
    methods = tuple(methods or cfg.method)
    report = Report(cfg, meta_lines=_metadata(cfg.replace(method=methods), ws))
    fam = cfg.family.name.lower()
    for method in methods:
        label = ROW_LABEL.get(method, method)
        for n in cfg.n_test_list:
            means, walls = [], []
            for rep in range(cfg.repeats):
                t0 = time.perf_counter()
                try:
                    errs = _cell(ws, method, n, rep)
                except Exception as exc:  # a failed phase still yields a partial report
                    log.exception("%s N=%d repeat=%d failed", method, n, rep)
                    report.errors.append(f"{method} N_test={n} repeat={rep}: {type(exc).__name__}: {exc}")
                    report.rows.append((label, fam, n, rep, float("nan"), float("nan"), time.perf_counter() - t0))
                    continue
                wall = time.perf_counter() - t0
                mean, se = float(np.mean(errs)), _stderr(errs)
                means.append(mean)
                walls.append(wall)
                report.rows.append((label, fam, n, rep, mean, se, wall))
                log.info("%s N=%d repeat=%d err=%.4g (%.1fs)", method, n, rep, mean, wall)
            if means:
                report.rows.append((label, fam, n, "mean", float(np.mean(means)), _stderr(means), float(sum(walls))))
    return report


def _stderr(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def _cell(ws: Workspace, method: str, n: int, rep: int) -> np.ndarray:
    """Target errors pooled over test tasks (and over sources for pretrain-one)."""
    tasks = ws.test_tasks()
    sources = ws.sources() if method == "pretrain-one" else [None]
    per_source = []
    for src in sources:
        errs = []
        for j, ds in enumerate(tasks):
            g, u = ws.context(j, rep, n)
            errs.append(target_errors(adapt_model(ws, method, g, u, rep, src), ds))
        per_source.append(np.concatenate(errs))
    # pretrain-one: averaging over sources happens here, at reporting level
    return np.mean(per_source, axis=0) if len(per_source) > 1 else per_source[0]


def report_path(out_dir, force: bool, stem: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if force:
        return out / f"{stem}.csv"
    base = time.strftime("%Y%m%d-%H%M%S")
    path = out / f"{stem}-{base}.csv"
    k = 1
    while path.exists():
        path = out / f"{stem}-{base}-{k}.csv"
        k += 1
    return path


def write_report(report: Report, out_dir, force: bool = False, stem: str = "report") -> Path:
    path = report_path(out_dir, force, stem)
    mode = "w" if force else "x"
    with open(path, mode) as fh:
        fh.write(report.to_csv())
    return path
