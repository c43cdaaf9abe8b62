"""Little-endian binary formats for datasets and checkpoints.

Both start with ``b"MNO1"``, a u32 version and a u32 kind (1 = dataset,
2 = checkpoint). Headers are validated, and the expected file length is
computed from them, before any payload array is allocated.

Checkpoint layout after the magic/version/kind words::

    u32 s, d_g, d_h, d_Q, d_u, L, k_max, flags
    arrays of every present group, order P p | W R_re R_im c | Q1 q1 Q2 q2
    if flags & TASK_BLOCKS: u32 H, u32 adapt tag, then H copies of the adapted group
    u64 FNV-1a of every preceding byte
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from metano.autodiff import Group, n_spectral_modes
from metano.errors import ChecksumError, FileFormatError, FileLengthError
from metano.grid import Field, Grid
from metano.ifno import GROUP_PARAMS, IFNOModel
from metano.meta import MetaState
from metano.tasks import Family, TaskDataset, TaskSpec

MAGIC = b"MNO1"
VERSION = 1
KIND_DATASET = 1
KIND_CHECKPOINT = 2

FLAG_BITS = {Group.LIFT: 1, Group.ITER: 2, Group.PROJ: 4}
TASK_BLOCKS = 8
FLAG_PROJ_IDENTITY = 1 << 16
FLAG_LAYER_IDENTITY = 1 << 17

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

F64 = np.dtype("<f8")


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _read_prefix(buf: bytes, kind: int, path) -> None:
    if len(buf) < 12:
        raise FileLengthError(f"{path}: file is {len(buf)} bytes, shorter than the 12-byte prefix")
    if buf[:4] != MAGIC:
        raise FileFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, got = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} (bytes {buf[4:8].hex()})")
    if got != kind:
        raise FileFormatError(f"{path}: kind {got} (bytes {buf[8:12].hex()}), expected {kind}")


def _check_length(buf: bytes, expected: int, path) -> None:
    if len(buf) != expected:
        raise FileLengthError(f"{path}: expected {expected} bytes from the header, found {len(buf)}")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ------------------------------------------------------------------ datasets

def save_dataset(path, ds: TaskDataset) -> None:
    grid = ds.spec.grid
    d_g, d_u = ds.context_g.shape[-1], ds.context_u.shape[-1]
    head = MAGIC + struct.pack("<II", VERSION, KIND_DATASET)
    # dim, M, d_g, d_u, N_context, N_target, family tag, task seed
    head += struct.pack(
        "<7IQ", grid.dim, grid.M, d_g, d_u, len(ds.context_g), len(ds.target_g), int(ds.spec.family), ds.spec.seed
    )
    parts = [head, ds.spec.b.values[..., 0].astype(F64).tobytes()]
    for g, u in ((ds.context_g, ds.context_u), (ds.target_g, ds.target_u)):
        for gi, ui in zip(g, u):
            parts.append(gi.astype(F64).tobytes())
            parts.append(ui.astype(F64).tobytes())
    _write_atomic(Path(path), b"".join(parts))


def load_dataset(path) -> TaskDataset:
    buf = Path(path).read_bytes()
    _read_prefix(buf, KIND_DATASET, path)
    fixed = struct.calcsize("<7IQ")
    if len(buf) < 12 + fixed:
        raise FileLengthError(f"{path}: header truncated ({len(buf)} bytes)")
    dim, M, d_g, d_u, n_ctx, n_tgt, fam, seed = struct.unpack_from("<7IQ", buf, 12)
    if dim not in (1, 2) or M < 1:
        raise FileFormatError(f"{path}: invalid grid dim={dim} M={M}")
    try:
        family = Family(fam)
    except ValueError:
        raise FileFormatError(f"{path}: unknown task family tag {fam}") from None
    nodes = M**dim
    expected = 12 + fixed + 8 * (nodes + (n_ctx + n_tgt) * nodes * (d_g + d_u))
    _check_length(buf, expected, path)

    off = 12 + fixed
    grid = Grid(dim, M)
    b = np.frombuffer(buf, F64, nodes, off).reshape(grid.shape).astype(np.float64)
    off += 8 * nodes
    n = n_ctx + n_tgt
    rec = np.frombuffer(buf, F64, n * nodes * (d_g + d_u), off).reshape(n, nodes * (d_g + d_u))
    g = rec[:, : nodes * d_g].reshape((n,) + grid.shape + (d_g,)).astype(np.float64)
    u = rec[:, nodes * d_g :].reshape((n,) + grid.shape + (d_u,)).astype(np.float64)
    # amplitude is not stored; the widest excursion of b reproduces the floor check
    amplitude = max(0.5, float(np.max(np.abs(b - 1.0))))
    spec = TaskSpec(family, Field(grid, b), seed, grid, amplitude)
    return TaskDataset(spec, g[:n_ctx], u[:n_ctx], g[n_ctx:], u[n_ctx:], {"task_seed": seed, "source": str(path)})


# ------------------------------------------------------------------ checkpoints

_CK_HEADER = "<8I"


def _shapes(s, d_g, d_h, d_Q, d_u, k_max) -> dict[str, tuple[int, ...]]:
    K = n_spectral_modes(s, k_max)
    return {
        "P": (d_h, s + d_g), "p": (d_h,),
        "W": (d_h, d_h), "R_re": (K, d_h, d_h), "R_im": (K, d_h, d_h), "c": (d_h,),
        "Q1": (d_Q, d_h), "q1": (d_Q,), "Q2": (d_u, d_Q), "q2": (d_u,),
    }  # fmt: skip


def _group_bytes(shapes, group) -> int:
    return sum(8 * int(np.prod(shapes[n])) for n in GROUP_PARAMS[group])


def save_checkpoint(path, obj: IFNOModel | MetaState) -> None:
    """Write a model, or a meta state (shared groups plus per-task blocks)."""
    if isinstance(obj, MetaState):
        model = obj.initial_model()
        present = [g for g in (Group.LIFT, Group.ITER, Group.PROJ) if g != obj.adapt_layer]
        flags = TASK_BLOCKS
    else:
        model, present, flags = obj, [Group.LIFT, Group.ITER, Group.PROJ], 0
    for grp in present:
        flags |= FLAG_BITS[grp]
    if model.proj_activation == "identity":
        flags |= FLAG_PROJ_IDENTITY
    if model.activation == "identity":
        flags |= FLAG_LAYER_IDENTITY
    parts = [
        MAGIC,
        struct.pack("<II", VERSION, KIND_CHECKPOINT),
        struct.pack(_CK_HEADER, model.s, model.d_g, model.d_h, model.d_Q, model.d_u, model.n_layers, model.k_max, flags),
    ]
    for grp in present:
        parts += [getattr(model, n).astype(F64).tobytes() for n in GROUP_PARAMS[grp]]
    if isinstance(obj, MetaState):
        parts.append(struct.pack("<II", obj.H, FLAG_BITS[obj.adapt_layer]))
        for tp in obj.task_params:
            parts += [tp[n].astype(F64).tobytes() for n in GROUP_PARAMS[obj.adapt_layer]]
    body = b"".join(parts)
    _write_atomic(Path(path), body + struct.pack("<Q", fnv1a64(body)))


def load_checkpoint(path) -> IFNOModel | MetaState:
    buf = Path(path).read_bytes()
    _read_prefix(buf, KIND_CHECKPOINT, path)
    hsize = struct.calcsize(_CK_HEADER)
    if len(buf) < 12 + hsize:
        raise FileLengthError(f"{path}: header truncated ({len(buf)} bytes)")
    s, d_g, d_h, d_Q, d_u, L, k_max, flags = struct.unpack_from(_CK_HEADER, buf, 12)
    if s not in (1, 2) or min(d_g, d_h, d_Q, d_u) < 1:
        raise FileFormatError(f"{path}: invalid dimensions s={s} d_g={d_g} d_h={d_h} d_Q={d_Q} d_u={d_u}")
    known = sum(FLAG_BITS.values()) | TASK_BLOCKS | FLAG_PROJ_IDENTITY | FLAG_LAYER_IDENTITY
    if flags & ~known:
        raise FileFormatError(f"{path}: unknown flag bits {flags & ~known:#x}")
    shapes = _shapes(s, d_g, d_h, d_Q, d_u, k_max)
    present = [g for g in (Group.LIFT, Group.ITER, Group.PROJ) if flags & FLAG_BITS[g]]
    off = 12 + hsize
    expected = off + sum(_group_bytes(shapes, g) for g in present) + 8
    blocks = bool(flags & TASK_BLOCKS)
    H = adapt = None
    if blocks:
        missing = [g for g in (Group.LIFT, Group.PROJ) if g not in present]
        if len(missing) != 1 or len(present) != 2:
            raise FileFormatError(f"{path}: task-block checkpoint must omit exactly LIFT or PROJ")
        tag_at = expected - 8
        if len(buf) < tag_at + 8:
            raise FileLengthError(f"{path}: expected at least {tag_at + 16} bytes, found {len(buf)}")
        H, tag = struct.unpack_from("<II", buf, tag_at)
        adapt = {v: k for k, v in FLAG_BITS.items()}.get(tag)
        if adapt != missing[0] or H < 1:
            raise FileFormatError(f"{path}: adapt tag {tag} / H={H} inconsistent with group flags {flags:#x}")
        expected += 8 + H * _group_bytes(shapes, adapt)
    elif len(present) != 3:
        raise FileFormatError(f"{path}: model checkpoint missing groups (flags {flags:#x})")
    _check_length(buf, expected, path)
    stored = struct.unpack_from("<Q", buf, len(buf) - 8)[0]
    actual = fnv1a64(buf[:-8])
    if stored != actual:
        raise ChecksumError(f"{path}: checksum {stored:#018x} does not match content {actual:#018x}")

    def take(name):
        nonlocal off
        n = int(np.prod(shapes[name]))
        arr = np.frombuffer(buf, F64, n, off).reshape(shapes[name]).astype(np.float64)
        off += 8 * n
        return arr

    params = {n: take(n) for g in present for n in GROUP_PARAMS[g]}
    arch = dict(
        n_layers=L, k_max=k_max, s=s,
        activation="identity" if flags & FLAG_LAYER_IDENTITY else "relu",
        proj_activation="identity" if flags & FLAG_PROJ_IDENTITY else "relu",
    )  # fmt: skip
    if not blocks:
        return IFNOModel(**params, **arch)
    off += 8
    task_params = tuple({n: take(n) for n in GROUP_PARAMS[adapt]} for _ in range(H))
    template = IFNOModel(**params, **task_params[0], **arch)
    return MetaState(template, params, task_params, adapt)
