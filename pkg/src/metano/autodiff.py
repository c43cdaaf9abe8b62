"""Reverse-mode differentiation over the small op set the operator network needs.

A :class:`Tape` records nodes in execution order. Ops compute eagerly when
recorded, and :meth:`Tape.evaluate` replays the whole tape, so the same
graph can be re-run with new inputs or perturbed parameters (this is how
:func:`grad_check` works).

Complex spectral weights are held as separate real and imaginary arrays
over the non-negative half of the last frequency axis. The layer output is
``irfftn`` of the mixed half spectrum, which keeps it exactly real; the
imaginary parts of the zero and Nyquist columns therefore never affect the
output and receive exactly zero gradient.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from metano import kernels
from metano.errors import InvalidArgumentError, InvalidGraphError


class Group(str, enum.Enum):
    LIFT = "LIFT"
    ITER = "ITER"
    PROJ = "PROJ"


ALL_GROUPS = frozenset(Group)


@dataclass(eq=False)
class ParamSlot:
    name: str
    group: Group
    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    cache: object = None
    slot: ParamSlot | None = None


# ------------------------------------------------------------------ spectral helpers

def spectral_modes(grid_shape: tuple[int, ...], k_max: int):
    """Stored half-spectrum modes and their positions in an ``rfftn`` array.

    Returns ``(index_tuple, weights)``: ``index_tuple`` addresses the rfftn
    array along the spatial axes, ``weights`` is the per-mode multiplicity
    ``c`` (1 on the zero/Nyquist column of the last axis, else 2).
    """
    dim = len(grid_shape)
    M = grid_shape[-1]
    if k_max < 0 or 2 * k_max > min(grid_shape):
        raise InvalidArgumentError(f"k_max={k_max} violates 2*k_max <= M for grid {grid_shape}")
    last = np.arange(k_max + 1)
    if dim == 1:
        idx = (last,)
    else:
        first = np.arange(-k_max, k_max + 1) % grid_shape[0]
        i0, i1 = np.meshgrid(first, last, indexing="ij")
        idx = (i0.ravel(), i1.ravel())
    lastk = idx[-1]
    weights = np.where((lastk == 0) | ((M % 2 == 0) & (lastk == M // 2)), 1.0, 2.0)
    return idx, weights


def n_spectral_modes(s: int, k_max: int) -> int:
    return (k_max + 1) * (2 * k_max + 1) ** (s - 1)


def _scatter(dst, idx, values):
    """``dst[:, idx] += values``; duplicates only arise when 2*k_max == M in 2D."""
    key = (slice(None),) + idx
    if len(idx) == 1 or np.unique(np.ravel_multi_index(idx, dst.shape[1:-1])).size == idx[0].size:
        dst[key] = values
    else:
        np.add.at(dst, key, values)


def _half_weights(grid_shape):
    M = grid_shape[-1]
    k = np.arange(M // 2 + 1)
    return np.where((k == 0) | ((M % 2 == 0) & (k == M // 2)), 1.0, 2.0)


def _spectral_fwd(vals, attrs):
    h, r_re, r_im = vals
    k_max = attrs["k_max"]
    grid_shape = h.shape[1:-1]
    axes = tuple(range(1, 1 + len(grid_shape)))
    idx, _ = spectral_modes(grid_shape, k_max)
    if r_re.shape[0] != idx[0].size:
        raise InvalidGraphError(f"spectral weights hold {r_re.shape[0]} modes, grid needs {idx[0].size}")
    xh = np.fft.rfftn(h, axes=axes)
    xg = np.ascontiguousarray(xh[(slice(None),) + idx])
    y = kernels.spectral_mix(xg, r_re, r_im)
    z = np.zeros(xh.shape[:-1] + (r_re.shape[1],), dtype=np.complex128)
    _scatter(z, idx, y)
    out = np.fft.irfftn(z, s=grid_shape, axes=axes)
    return out, (xg, idx, axes, grid_shape)


def _spectral_bwd(g, vals, out, cache, attrs):
    h, r_re, r_im = vals
    xg, idx, axes, grid_shape = cache
    n_nodes = float(np.prod(grid_shape))
    wlast = _half_weights(grid_shape)
    gh = np.fft.rfftn(g, axes=axes) * (wlast[:, None] / n_nodes)
    ybar = np.ascontiguousarray(gh[(slice(None),) + idx])
    xbar, g_re, g_im = kernels.spectral_mix_adjoint(ybar, xg, r_re, r_im)
    xh_bar = np.zeros(gh.shape[:-1] + (h.shape[-1],), dtype=np.complex128)
    _scatter(xh_bar, idx, xbar)
    gx = n_nodes * np.fft.irfftn(xh_bar / wlast[:, None], s=grid_shape, axes=axes)
    return [gx, g_re, g_im]


# ------------------------------------------------------------------ op table

def _affine_fwd(vals, attrs):
    x, P, p = vals
    if x.shape[-1] != P.shape[1] or p.shape != (P.shape[0],):
        raise InvalidGraphError(f"affine shapes incompatible: x{x.shape}, P{P.shape}, p{p.shape}")
    return x @ P.T + p, None


def _affine_bwd(g, vals, out, cache, attrs):
    x, P, p = vals
    lead = tuple(range(g.ndim - 1))
    gP = np.tensordot(g, x, axes=(lead, lead))
    return [g @ P, gP, g.sum(axis=lead)]


def _relu_fwd(vals, attrs):
    return np.maximum(vals[0], 0.0), None


def _relu_bwd(g, vals, out, cache, attrs):
    return [g * (vals[0] > 0.0)]


def _axpy_fwd(vals, attrs):
    x, y = vals
    if x.shape != y.shape:
        raise InvalidGraphError(f"axpy shapes differ: {x.shape} vs {y.shape}")
    return x + attrs["alpha"] * y, None


def _axpy_bwd(g, vals, out, cache, attrs):
    return [g, attrs["alpha"] * g]


def _scale_fwd(vals, attrs):
    return attrs["alpha"] * vals[0], None


def _scale_bwd(g, vals, out, cache, attrs):
    return [attrs["alpha"] * g]


def _rmse_fwd(vals, attrs):
    pred, target = vals
    if pred.shape != target.shape:
        raise InvalidGraphError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    axes = tuple(range(1, pred.ndim))
    denom = np.sum(target**2, axis=axes)
    diff = pred - target
    per = np.sum(diff**2, axis=axes) / denom
    return np.asarray(per.mean()), (diff, denom)


def _rmse_bwd(g, vals, out, cache, attrs):
    diff, denom = cache
    n = diff.shape[0]
    shape = (n,) + (1,) * (diff.ndim - 1)
    gp = (2.0 * g / n) * diff / denom.reshape(shape)
    return [gp, -gp]


OPS: dict[str, tuple[Callable, Callable]] = {
    "affine": (_affine_fwd, _affine_bwd),
    "spectral_conv": (_spectral_fwd, _spectral_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "axpy": (_axpy_fwd, _axpy_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "relative_mse": (_rmse_fwd, _rmse_bwd),
}


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: list[int] = []
        self.input_grads: dict[int, np.ndarray] = {}
        self._param_nodes: dict[int, int] = {}
        self._evaluated = True

    # -- leaves
    def input(self, value) -> int:
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), "input", (), value=value, attrs={"shape": value.shape})
        self.nodes.append(node)
        self.input_ids.append(node.id)
        return node.id

    def param(self, slot: ParamSlot) -> int:
        key = id(slot)
        if key in self._param_nodes:
            return self._param_nodes[key]
        node = Node(len(self.nodes), "param", (), value=slot.value, slot=slot)
        self.nodes.append(node)
        self._param_nodes[key] = node.id
        return node.id

    # -- ops
    def _record(self, op, inputs, **attrs) -> int:
        node = Node(len(self.nodes), op, tuple(inputs), attrs)
        for i in node.inputs:
            if not 0 <= i < node.id:
                raise InvalidGraphError(f"node {node.id} references unknown input {i}")
        node.value, node.cache = OPS[op][0]([self.nodes[i].value for i in node.inputs], attrs)
        self.nodes.append(node)
        return node.id

    def affine(self, x, P, p):
        return self._record("affine", (x, P, p))

    def spectral_conv(self, h, r_re, r_im, k_max):
        return self._record("spectral_conv", (h, r_re, r_im), k_max=k_max)

    def relu(self, x):
        return self._record("relu", (x,))

    def axpy(self, x, y, alpha=1.0):
        return self._record("axpy", (x, y), alpha=float(alpha))

    def scale(self, x, alpha):
        return self._record("scale", (x,), alpha=float(alpha))

    def relative_mse(self, pred, target):
        return self._record("relative_mse", (pred, target))

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    @property
    def terminal(self) -> Node:
        if not self.nodes:
            raise InvalidGraphError("empty tape")
        return self.nodes[-1]

    # -- passes
    def evaluate(self, *inputs):
        """Replay the tape, optionally with new input values (in creation order)."""
        if inputs and len(inputs) != len(self.input_ids):
            raise InvalidGraphError(f"expected {len(self.input_ids)} inputs, got {len(inputs)}")
        for nid, val in zip(self.input_ids, inputs):
            val = np.asarray(val, dtype=np.float64)
            if val.shape != self.nodes[nid].attrs["shape"]:
                raise InvalidGraphError(
                    f"input {nid} has shape {val.shape}, declared {self.nodes[nid].attrs['shape']}"
                )
            self.nodes[nid].value = val
        for node in self.nodes:
            if node.op == "param":
                node.value = node.slot.value
            elif node.op != "input":
                node.value, node.cache = OPS[node.op][0]([self.nodes[i].value for i in node.inputs], node.attrs)
        return self.terminal.value

    def slots(self) -> list[ParamSlot]:
        return [self.nodes[i].slot for i in self._param_nodes.values()]

    def backward(self) -> dict[str, np.ndarray]:
        term = self.terminal
        if np.ndim(term.value) != 0:
            raise InvalidGraphError(f"terminal node must be scalar, has shape {np.shape(term.value)}")
        for slot in self.slots():
            slot.zero_grad()
        grads: dict[int, np.ndarray] = {term.id: np.asarray(1.0)}
        self.input_grads = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.op == "param":
                node.slot.grad += g
            elif node.op == "input":
                self.input_grads[node.id] = g
            else:
                vals = [self.nodes[i].value for i in node.inputs]
                for i, gi in zip(node.inputs, OPS[node.op][1](g, vals, node.value, node.cache, node.attrs)):
                    if gi is None:
                        continue
                    if i in grads:
                        grads[i] = grads[i] + gi
                    else:
                        grads[i] = gi
        return {slot.name: slot.grad for slot in self.slots()}


@dataclass
class GradCheckResult:
    max_discrepancy: float
    n_checked: int
    skipped: list[tuple[str, tuple[int, ...]]]
    worst: tuple[str, tuple[int, ...]] | None = None


def grad_check(tape: Tape, epsilon: float = 1e-5, slots=None) -> GradCheckResult:
    """Compare analytic gradients against central differences, entry by entry.

    Entries whose perturbation moves any ReLU input across (or off) zero are
    not differentiable at the point; they are skipped, reported, and a
    warning is raised.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidArgumentError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    base = float(tape.evaluate())
    analytic = tape.backward()
    relu_in = [n.inputs[0] for n in tape.nodes if n.op == "relu"]
    base_pre = [tape.nodes[i].value.copy() for i in relu_in]

    worst, worst_at, checked, skipped = 0.0, None, 0, []
    for slot in slots if slots is not None else tape.slots():
        grad = analytic[slot.name]
        for idx in np.ndindex(slot.value.shape):
            orig = slot.value[idx]
            slot.value[idx] = orig + epsilon
            f_plus = float(tape.evaluate())
            pre_plus = [tape.nodes[i].value.copy() for i in relu_in]
            slot.value[idx] = orig - epsilon
            f_minus = float(tape.evaluate())
            pre_minus = [tape.nodes[i].value.copy() for i in relu_in]
            slot.value[idx] = orig
            kink = any(
                np.any(np.sign(a) != np.sign(b)) or np.any((z == 0.0) & (a != b))
                for z, a, b in zip(base_pre, pre_plus, pre_minus)
            )
            if kink:
                skipped.append((slot.name, idx))
                continue
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            an = grad[idx]
            disc = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
            checked += 1
            if disc > worst:
                worst, worst_at = disc, (slot.name, idx)
    tape.evaluate()
    if skipped:
        warnings.warn(f"grad_check skipped {len(skipped)} entries at ReLU kinks", RuntimeWarning, stacklevel=2)
    if abs(float(tape.terminal.value) - base) > 0:
        raise InvalidGraphError("tape is not deterministic under replay")
    return GradCheckResult(worst, checked, skipped, worst_at)
