"""Constructive check that a first-layer-adapted IFNO can run a fixed-point iteration.

Given a shallow ReLU net ``R(U, Gt) = S relu(B [U; Gt] + A)`` whose induced
iteration ``U <- U + R(U, Gt)`` contracts to ``U*``, we write down IFNO
weights that execute exactly that iteration, one step per layer:

* per-task lift ``P = [[S+, 0], [0, D]]`` applied to the global input
  ``[U0; G]`` broadcast at every node, so ``h0 = [S+ U0; D G]`` everywhere;
* a zero-mode-only spectral weight realizing ``L * [Ip B [S, 0; 0, I]; 0]``
  and bias ``L * [Ip A; 0]``, where ``Ip = S+ S`` (the 1/L layer scaling
  cancels through positive homogeneity of relu);
* projection ``Q1 = I``, ``Q2 = [S, 0]`` with an identity activation.

The hidden state is constant across nodes, so the network output at every
node is the full vector ``U^L``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metano import ifno
from metano.autodiff import n_spectral_modes
from metano.errors import InvalidConstructionError, RankDeficientError
from metano.ifno import IFNOModel


def relu(x):
    return np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class ContractionNet:
    """``R(U, Gt) = S relu(B [U; Gt] + A)`` with node-blocked ``S``.

    ``S`` is ``(M, w*M)``: row i is nonzero only in columns ``i*w .. i*w+w-1``.
    ``m`` is the Lipschitz constant of ``U -> U + R(U, Gt)`` when known.
    """

    S: np.ndarray
    B: np.ndarray
    A: np.ndarray
    m: float = float("nan")

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)
        M = S.shape[0]
        if S.ndim != 2 or S.shape[1] % M or S.shape[1] == 0:
            raise InvalidConstructionError(f"S of shape {S.shape} is not (M, w*M)")
        if B.shape != (S.shape[1], 2 * M) or A.shape != (S.shape[1],):
            raise InvalidConstructionError(f"B {B.shape} / A {A.shape} do not match S {S.shape}")
        check_block_structure(S)

    @property
    def M(self) -> int:
        return self.S.shape[0]

    @property
    def width(self) -> int:
        """Hidden units per node (the proof's d~ - 1)."""
        return self.S.shape[1] // self.M

    def __call__(self, U, Gt):
        return self.S @ relu(self.B @ np.concatenate([U, Gt]) + self.A)

    def iterate(self, U0, Gt, L: int) -> np.ndarray:
        """Trajectory ``U^0 .. U^L`` of the plain fixed-point iteration, shape (L+1, M)."""
        out = [np.asarray(U0, dtype=np.float64)]
        for _ in range(L):
            out.append(out[-1] + self(out[-1], Gt))
        return np.array(out)


def check_block_structure(S: np.ndarray) -> None:
    M, n = S.shape
    w = n // M
    mask = np.kron(np.eye(M, dtype=bool), np.ones((1, w), dtype=bool))
    if np.any(S[~mask] != 0.0):
        raise InvalidConstructionError("S has nonzeros outside its node blocks")


def build_right_inverse(S: np.ndarray) -> np.ndarray:
    """Blockwise right inverse: block i of ``S+`` is ``s_i^T / |s_i|^2``."""
    S = np.asarray(S, dtype=np.float64)
    M, n = S.shape
    if n % M:
        raise InvalidConstructionError(f"S of shape {S.shape} is not (M, w*M)")
    check_block_structure(S)
    w = n // M
    Sp = np.zeros((n, M))
    for i in range(M):
        s = S[i, i * w : (i + 1) * w]
        nrm2 = float(s @ s)
        if nrm2 == 0.0:
            raise RankDeficientError(f"row {i} of S is zero")
        Sp[i * w : (i + 1) * w, i] = s / nrm2
    return Sp


def linear_contraction_net(M: int, rate: float = 0.5) -> ContractionNet:
    """Exact ReLU realization of ``R(U, Gt) = rate * (Gt - U)`` via x = relu(x) - relu(-x)."""
    if not 0.0 < rate < 2.0:
        raise InvalidConstructionError("rate must lie in (0, 2) for a contraction")
    S = np.kron(np.eye(M), np.array([[1.0, -1.0]]))
    core = np.hstack([-rate * np.eye(M), rate * np.eye(M)])  # rate * (Gt - U) per node
    B = np.empty((2 * M, 2 * M))
    B[0::2] = core
    B[1::2] = -core
    return ContractionNet(S, B, np.zeros(2 * M), m=abs(1.0 - rate))


# ------------------------------------------------------------------ construction

@dataclass(frozen=True, eq=False)
class ConstructedParams:
    model: IFNOModel
    S_plus: np.ndarray
    D: np.ndarray
    L: int

    @property
    def d_h(self) -> int:
        return self.model.d_h


def assemble_metano_params(
    net: ContractionNet, D, L: int, projector: bool = True, k_max: int | None = None
) -> ConstructedParams:
    """IFNO weights that run ``L`` steps of the iteration of ``net`` on one task.

    ``D`` holds the task's per-node ``1 / F1[b]`` (a vector or a diagonal
    matrix). ``projector`` inserts ``S+ S`` in front of the activation as in
    the textbook construction; it is exact when the pre-activation already
    lies in the range of ``S+ S`` (true for the linear test nets). Without it
    the hidden copy of U drifts off that range but ``S h`` is unaffected.
    ``k_max`` defaults to M // 2 (all modes kept); only the zero mode is
    nonzero, so any smaller value gives the same network with less memory.
    """
    M, w = net.M, net.width
    D = np.asarray(D, dtype=np.float64)
    D = np.diag(D) if D.ndim == 2 else D
    if D.shape != (M,):
        raise InvalidConstructionError(f"D has {D.shape} entries, expected {M}")
    if L < 1:
        raise InvalidConstructionError("need at least one layer")
    n1 = w * M  # width of the U-copy block
    d_h = n1 + M  # = (w + 1) M, i.e. d~ M
    Sp = build_right_inverse(net.S)
    Ip = Sp @ net.S if projector else np.eye(n1)

    # lift: zero coordinate column, then [[S+, 0], [0, D]] on [U0; G]
    P = np.zeros((d_h, 1 + 2 * M))
    P[:n1, 1 : 1 + M] = Sp
    P[n1:, 1 + M :] = np.diag(D)

    expand = np.zeros((2 * M, d_h))
    expand[:M, :n1] = net.S
    expand[M:, n1:] = np.eye(M)
    V = np.zeros((d_h, d_h))
    V[:n1] = L * (Ip @ net.B @ expand)
    c = np.zeros(d_h)
    c[:n1] = L * (Ip @ net.A)

    k_max = M // 2 if k_max is None else k_max
    n_modes = n_spectral_modes(1, k_max)
    R_re = np.zeros((n_modes, d_h, d_h))
    # a node-constant input has zero-mode coefficient M*h and irfft divides by M
    R_re[0] = V
    Q2 = np.zeros((M, d_h))
    Q2[:, :n1] = net.S
    model = IFNOModel(
        P=P, p=np.zeros(d_h), W=np.zeros((d_h, d_h)), R_re=R_re, R_im=np.zeros_like(R_re), c=c,
        Q1=np.eye(d_h), q1=np.zeros(d_h), Q2=Q2, q2=np.zeros(M),
        n_layers=L, k_max=k_max, s=1, activation="relu", proj_activation="identity",
    )  # fmt: skip
    return ConstructedParams(model, Sp, D, L)


def network_input(U0, G) -> np.ndarray:
    """Global input ``[U0; G]`` broadcast to every node, batch shape (1, M, 2M)."""
    U0, G = np.asarray(U0, dtype=np.float64), np.asarray(G, dtype=np.float64)
    M = U0.shape[0]
    return np.broadcast_to(np.concatenate([U0, G]), (1, M, 2 * M)).copy()


@dataclass(frozen=True)
class EquivalenceReport:
    layer_deviation: np.ndarray  # max |S h1^l - U^l| per layer, l = 0..L
    final_error: float  # |network output - U*|_2
    replication_error: float  # spread of the hidden state across nodes
    block_constancy_error: float  # max |h2^l - Gt|
    bound: float  # m^L |U0 - U*|_2

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.layer_deviation))


def verify_equivalence(params: ConstructedParams, net: ContractionNet, G, U_star, U0=None) -> EquivalenceReport:
    """Run the constructed network layer by layer beside the plain iteration."""
    model = params.model
    M = net.M
    U0 = np.arange(M) / M if U0 is None else np.asarray(U0, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    U_star = np.asarray(U_star, dtype=np.float64)
    Gt = params.D * G
    reference = net.iterate(U0, Gt, params.L)
    n1 = net.width * M

    h = ifno.lift(model, network_input(U0, G))
    dev, rep, const = [], 0.0, 0.0
    for layer in range(params.L + 1):
        if layer:
            h = ifno.iterate_layer(model, h)
        rep = max(rep, float(np.max(np.abs(h[0] - h[0, :1]))))
        const = max(const, float(np.max(np.abs(h[0, :, n1:] - Gt))))
        out = ifno.project(model, h)[0]  # (M nodes, M outputs)
        dev.append(float(np.max(np.abs(out - reference[layer]))))
    final = float(np.linalg.norm(out[0] - U_star))
    bound = net.m ** params.L * float(np.linalg.norm(U0 - U_star))
    return EquivalenceReport(np.array(dev), final, rep, const, bound)


def contraction_certificate(net: ContractionNet, n_pairs: int = 1000, seed=0, scale: float = 2.0) -> float:
    """Largest observed ``|T(U) - T(V)| / |U - V|`` for ``T(U) = U + R(U, Gt)`` on random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        U, V, Gt = rng.uniform(-scale, scale, size=(3, net.M))
        num = np.linalg.norm(U + net(U, Gt) - V - net(V, Gt))
        worst = max(worst, float(num / np.linalg.norm(U - V)))
    return worst


def layers_for_tolerance(eps: float, initial_error: float, m: float) -> int:
    """Smallest L with ``m**L * initial_error <= eps``."""
    if initial_error <= eps:
        return 0
    return int(np.ceil(np.log(eps / initial_error) / np.log(m)))


# ------------------------------------------------------------------ learned per-node map

def newton_update(u, gt):
    """One Newton correction for ``u + u**3 = gt``."""
    return (gt - u - u**3) / (1.0 + 3.0 * u**2)


@dataclass(frozen=True)
class ShallowFit:
    s: np.ndarray  # (w,) outer weights
    b: np.ndarray  # (w, 2) inner weights on (u, gt)
    a: np.ndarray  # (w,) inner biases
    train_rmse: float

    def __call__(self, u, gt):
        return relu(np.stack([u, gt], -1) @ self.b.T + self.a) @ self.s


def fit_shallow_map(target, width: int = 64, box=((-1.5, 1.5), (-2.5, 2.5)), n: int = 4000, seed=0) -> ShallowFit:
    """Random-feature ReLU net for a scalar map of ``(u, gt)``; only the outer layer is fitted."""
    rng = np.random.default_rng(seed)
    (ulo, uhi), (glo, ghi) = box
    pts = np.column_stack([rng.uniform(ulo, uhi, n), rng.uniform(glo, ghi, n)])
    b = rng.standard_normal((width, 2))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    # biases place the hinge lines through points of the box
    anchors = np.column_stack([rng.uniform(ulo, uhi, width), rng.uniform(glo, ghi, width)])
    a = -np.einsum("wi,wi->w", b, anchors)
    feats = relu(pts @ b.T + a)
    y = target(pts[:, 0], pts[:, 1])
    s, *_ = np.linalg.lstsq(feats, y, rcond=None)
    rmse = float(np.sqrt(np.mean((feats @ s - y) ** 2)))
    return ShallowFit(s, b, a, rmse)


def net_from_shallow_fit(fit: ShallowFit, M: int) -> ContractionNet:
    """Apply one fitted scalar map independently at each of ``M`` nodes."""
    w = fit.s.shape[0]
    if np.any(fit.s == 0.0):
        raise RankDeficientError("fitted outer weights contain exact zeros")
    S = np.kron(np.eye(M), fit.s[None, :])
    B = np.zeros((w * M, 2 * M))
    for i in range(M):
        B[i * w : (i + 1) * w, i] = fit.b[:, 0]
        B[i * w : (i + 1) * w, M + i] = fit.b[:, 1]
    return ContractionNet(S, B, np.tile(fit.a, M))


def newton_map_check(b: np.ndarray, G: np.ndarray, L: int = 8, width: int = 256, seed=0) -> dict:
    """Learned Newton map for the pointwise cubic task, assembled into an IFNO and run.

    Returns the fit residual, the network-vs-iteration deviation and the
    final error against the exact solution; there is no pass threshold.
    """
    from metano.kernels import cubic_solve

    b = np.asarray(b, dtype=np.float64)
    fit = fit_shallow_map(newton_update, width=width, seed=seed)
    net = net_from_shallow_fit(fit, b.shape[0])
    params = assemble_metano_params(net, 1.0 / b, L, projector=False, k_max=0)
    U_star, _ = cubic_solve(G / b)
    rep = verify_equivalence(params, net, G, U_star)
    return {
        "fit_rmse": fit.train_rmse,
        "max_deviation": rep.max_deviation,
        "final_error": rep.final_error,
        "relative_final_error": rep.final_error / max(float(np.linalg.norm(U_star)), 1e-300),
    }
