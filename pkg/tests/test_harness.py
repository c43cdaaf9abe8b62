import re
import time

import numpy as np
import pytest

from metano import ifno, meta
from metano.autodiff import Group
from metano.errors import ChecksumError, ConfigError, FileFormatError, FileLengthError
from metano.grid import Grid
from metano.harness import cli, experiment, io
from metano.harness.config import REQUIRED, load_config, parse_config
from metano.tasks import Family, build_task_dataset, make_task
from metano.train import TrainConfig

TINY = """\
# tiny end-to-end config
method = metano, metano-minus, single
family = reaction
M = 16
H = 2
n_context_train = 8
n_test_list = 2, 4
d_h = 4
L = 2
k_max = 3
n_target_test = 6
epochs_meta = 20
epochs_adapt = 10
epochs_finetune = 5
epochs_single = 10
repeats = 5
"""

SMOKE = """\
method = metano, metano-minus, metalast, maml, anil, single, pretrain-all, pretrain-one
family = reaction
M = 16
H = 4
d_h = 8
L = 2
k_max = 4
n_context_train = 64
n_test_list = 2, 8
"""


def dataset(dim=1, family=Family.REACTION):
    spec = make_task(family, Grid(dim, 8), 3)
    return build_task_dataset(spec, 3, 2, 4)


# ---------------------------------------------------------------- dataset files

@pytest.mark.parametrize("dim,family", [(1, Family.REACTION), (2, Family.REACTION), (1, Family.DIFFUSION)])
def test_dataset_roundtrip_is_bitwise(tmp_path, dim, family):
    ds = dataset(dim, family)
    p1, p2 = tmp_path / "a.mno", tmp_path / "b.mno"
    io.save_dataset(p1, ds)
    back = io.load_dataset(p1)
    for k in ("context_g", "context_u", "target_g", "target_u"):
        assert getattr(back, k).tobytes() == getattr(ds, k).tobytes()
    assert back.spec.b.values.tobytes() == ds.spec.b.values.tobytes()
    assert back.spec.family == family and back.spec.seed == ds.spec.seed
    io.save_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_header_layout(tmp_path):
    io.save_dataset(tmp_path / "d.mno", dataset())
    raw = (tmp_path / "d.mno").read_bytes()
    assert raw[:4] == b"MNO1" and raw[4:8] == (1).to_bytes(4, "little") and raw[8:12] == (1).to_bytes(4, "little")
    assert len(raw) == 12 + 7 * 4 + 8 + 8 * (8 + 5 * 16)


def test_dataset_corruption_is_rejected(tmp_path):
    path = tmp_path / "d.mno"
    io.save_dataset(path, dataset())
    raw = path.read_bytes()
    path.write_bytes(b"X" + raw[1:])
    with pytest.raises(FileFormatError, match="magic"):
        io.load_dataset(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(FileLengthError, match=f"expected {len(raw)} bytes.*found {len(raw) - 8}"):
        io.load_dataset(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FileFormatError, match="version"):
        io.load_dataset(path)
    path.write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FileFormatError, match="kind"):
        io.load_dataset(path)


# ---------------------------------------------------------------- checkpoints

def test_fnv1a_reference_values():
    assert io.fnv1a64(b"") == 0xCBF29CE484222325
    assert io.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert io.fnv1a64(b"foobar") == 0x85944171F73967E8


@pytest.mark.parametrize("s", [1, 2])
def test_checkpoint_model_roundtrip(tmp_path, s):
    model = ifno.init_model(s, 1, 4, 1, 3, 2, seed=5)
    model = model.replace(p=np.linspace(-1, 1, 4))
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, model)
    back = io.load_checkpoint(path)
    assert all(getattr(back, k).tobytes() == v.tobytes() for k, v in model.params().items())
    assert (back.n_layers, back.k_max, back.s) == (3, 2, s)
    g = np.random.default_rng(0).standard_normal((2,) + (8,) * s + (1,))
    assert ifno.forward(back, g).tobytes() == ifno.forward(model, g).tobytes()


def test_checkpoint_keeps_activation_flags(tmp_path):
    model = ifno.init_model(1, 1, 3, 1, 2, 1, activation="identity", proj_activation="identity")
    io.save_checkpoint(tmp_path / "m.ckpt", model)
    back = io.load_checkpoint(tmp_path / "m.ckpt")
    assert back.activation == "identity" and back.proj_activation == "identity"


@pytest.mark.parametrize("layer", [Group.LIFT, Group.PROJ])
def test_checkpoint_meta_state_roundtrip(tmp_path, layer):
    tasks = [build_task_dataset(make_task(1, Grid(1, 8), i), 4, 0, i) for i in range(3)]
    state = meta.meta_train(tasks, ifno.init_model(1, 1, 3, 1, 2, 2), TrainConfig(learning_rate=1e-2, epochs=3), layer)
    io.save_checkpoint(tmp_path / "s.ckpt", state)
    back = io.load_checkpoint(tmp_path / "s.ckpt")
    assert isinstance(back, meta.MetaState) and back.H == 3 and back.adapt_layer == layer
    for a, b in zip(state.task_params, back.task_params):
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert all(state.shared[k].tobytes() == back.shared[k].tobytes() for k in state.shared)
    g = tasks[0].context_g
    assert ifno.forward(back.initial_model(), g).tobytes() == ifno.forward(state.initial_model(), g).tobytes()


def test_checkpoint_corruption_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, ifno.init_model(1, 1, 4, 1, 2, 2))
    raw = bytearray(path.read_bytes())
    flipped = bytearray(raw)
    flipped[60] ^= 0x01
    path.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        io.load_checkpoint(path)
    path.write_bytes(bytes(raw[:-8]))
    with pytest.raises(FileLengthError):
        io.load_checkpoint(path)
    path.write_bytes(bytes(raw[:8]) + (1).to_bytes(4, "little") + bytes(raw[12:]))
    with pytest.raises(FileFormatError, match="kind"):
        io.load_checkpoint(path)


# ---------------------------------------------------------------- config

def test_config_parses_and_defaults():
    cfg = parse_config(TINY)
    assert cfg.method == ("metano", "metano-minus", "single") and cfg.family == Family.REACTION
    assert cfg.n_test_list == (2, 4) and cfg.repeats == 5 and cfg.lr == 1e-2 and cfg.d_Q_eff == 16
    assert parse_config(cfg.dumps()) == cfg
    assert parse_config(TINY, {"seed": 9}).seed == 9
    assert parse_config(TINY, {"seed": "9", "lr": "1e-3"}).lr == 1e-3


@pytest.mark.parametrize(
    "text,msg",
    [
        (TINY + "bogus = 1\n", "unknown key"),
        (TINY + "M = 8\n", "duplicate"),
        ("\n".join(line for line in TINY.splitlines() if not line.startswith("d_h")), "missing"),
        (TINY.replace("L = 2", "L = two"), "cannot parse"),
        (TINY.replace("reaction", "heat"), "unknown family"),
        (TINY.replace("single", "sgd"), "unknown method"),
        (TINY.replace("k_max = 3", "k_max = 9"), "k_max"),
        (TINY + "just words\n", "key = value"),
    ],
    ids=["unknown-key", "duplicate", "missing", "bad-int", "family", "method", "k_max", "no-equals"],
)
def test_config_rejections(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_config_file_and_required_keys(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY.replace("epochs_meta = 20", "epochs_meta = 2e1"))
    assert load_config(tmp_path / "c.cfg").epochs_meta == 20
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("epochs_meta = 20", "epochs_meta = 2.5e0"))
    assert set(REQUIRED) == {"method", "family", "M", "H", "n_context_train", "n_test_list", "d_h", "L", "k_max"}
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


# ---------------------------------------------------------------- experiment reports

def test_report_rows_and_determinism():
    cfg = parse_config(TINY)
    first = experiment.run_experiment(cfg)
    second = experiment.run_experiment(cfg)
    assert first.ok and first.to_csv(include_wallclock=False) == second.to_csv(include_wallclock=False)
    for method in cfg.method:
        for n in cfg.n_test_list:
            rows = [r for r in first.rows if r[0] == method and r[2] == n]
            assert [r[3] for r in rows] == [0, 1, 2, 3, 4, "mean"]
            means = [r[4] for r in rows[:5]]
            assert rows[-1][4] == pytest.approx(np.mean(means), rel=1e-15)
            assert rows[-1][5] == pytest.approx(np.std(means, ddof=1) / np.sqrt(5), rel=1e-12)
    text = first.to_csv()
    assert "config.method = metano,metano-minus,single" in text and "method,family,N_test,repeat" in text


def test_every_method_produces_rows():
    # cheap counterpart of the smoke run, so each adaptation path runs in the fast suite
    methods = "metano, metano-minus, metalast, maml, anil, single, pretrain-all, pretrain-one"
    cfg = parse_config(TINY.replace("method = metano, metano-minus, single", f"method = {methods}")
                       + "epochs_gbml = 3\nepochs_pretrain = 3\npretrain_sources = 2\n")  # fmt: skip
    rep = experiment.run_experiment(cfg.replace(repeats=1, n_test_list=(2,)))
    assert rep.ok, rep.errors
    labels = [r[0] for r in rep.rows if r[3] == "mean"]
    assert labels == ["metano", "metano-minus", "metalast", "maml-fo", "anil-fo", "single", "pretrain-all",
                      "pretrain-one"]  # fmt: skip
    assert all(np.isfinite(r[4]) for r in rep.rows)


def test_failed_cell_yields_partial_report(monkeypatch):
    cfg = parse_config(TINY).replace(method=("single",), repeats=2, n_test_list=(2,))

    def boom(*args, **kwargs):
        raise RuntimeError("phase failed")

    monkeypatch.setattr(experiment, "adapt_model", boom)
    rep = experiment.run_experiment(cfg)
    assert not rep.ok and len(rep.errors) == 2
    assert all(np.isnan(r[4]) for r in rep.rows) and "# error: single N_test=2 repeat=0" in rep.to_csv()


def test_workspace_caches_files(tmp_path):
    cfg = parse_config(TINY).replace(method=("metano",), repeats=1, n_test_list=(2,))
    ws = experiment.Workspace(cfg, tmp_path, save=True)
    ws.train_tasks(), ws.test_tasks(), ws.meta_state(Group.LIFT)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["meta_lift.ckpt", "test_000.mno", "test_001.mno", "train_000.mno", "train_001.mno"]
    again = experiment.Workspace(cfg, tmp_path)
    a = experiment.run_experiment(cfg, ws).to_csv(False)
    b = experiment.run_experiment(cfg, again).to_csv(False)
    assert a == b


def test_report_names_never_overwrite(tmp_path):
    rep = experiment.run_experiment(parse_config(TINY).replace(method=("single",), repeats=1, n_test_list=(2,)))
    p1 = experiment.write_report(rep, tmp_path)
    p2 = experiment.write_report(rep, tmp_path)
    assert p1 != p2 and re.match(r"report-\d{8}-\d{6}", p1.name)
    forced = experiment.write_report(rep, tmp_path, force=True)
    assert forced.name == "report.csv" and experiment.write_report(rep, tmp_path, force=True) == forced


def test_shallow_to_deep_staging():
    cfg = parse_config(TINY).replace(L=4, shallow_to_deep=2, epochs_meta=3)
    ws = experiment.Workspace(cfg)
    state = ws.meta_state(Group.LIFT)
    assert state.template.n_layers == 4 and len(state.history) == 9


# ---------------------------------------------------------------- CLI

def test_cli_grad_and_universality_checks(capsys):
    assert cli.main(["grad-check"]) == 0
    assert "max relative discrepancy" in capsys.readouterr().out
    assert cli.main(["universality-check"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("L,max_layer_deviation") and "learned Newton map" in out


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY.replace("repeats = 5", "repeats = 1"))
    out = tmp_path / "run"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["meta-train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "meta_lift.ckpt").exists()
    assert cli.main(["adapt", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    assert cli.main(["baseline", "--config", str(cfg), "--out", str(out), "--force"]) == 0
    assert cli.main(["report", "--config", str(cfg), "--out", str(out), "--force", "--seed", "0"]) == 0
    text = (out / "report.csv").read_text()
    assert "metano-minus,reaction,4,mean" in text
    capsys.readouterr()


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("method = metano\n")
    assert cli.main(["report", "--config", str(bad)]) == 2
    assert "missing required" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["report"])
    with pytest.raises(SystemExit):
        cli.main(["nonsense"])


@pytest.mark.slow
def test_smoke_config_under_ten_minutes():
    cfg = parse_config(SMOKE)
    t0 = time.perf_counter()
    rep = experiment.run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    assert rep.ok and elapsed < 600
    assert {r[0] for r in rep.rows} == {"metano", "metano-minus", "metalast", "maml-fo", "anil-fo", "single",
                                        "pretrain-all", "pretrain-one"}  # fmt: skip
