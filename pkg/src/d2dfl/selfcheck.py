"""Built-in oracle checks, runnable without any dataset.

Each check returns ``(name, passed, detail)``. The oracles here are written
independently of the code they verify: losses are re-derived with
``scipy.special.logsumexp`` and gradients by central finite differences.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import comms, protocols
from .nn import N_CLASSES, N_FEATURES, N_HIDDEN, Batch, Model, init_model, loss_and_grad

FD_STEP = 1e-4
FD_RTOL = 1e-4
# Relative error uses max(|analytic|, |numeric|, FD_FLOOR) as denominator;
# below the floor, central differences are dominated by O(h^2) truncation.
FD_FLOOR = 1e-5
KINK_MARGIN = 5e-4

CONSENSUS_MU0 = 0.1
CONSENSUS_DECAY = 0.995
CONSENSUS_STEPS = 2000
CONSENSUS_TOL = 1e-3

Check = tuple[str, bool, str]


# -- finite differences -----------------------------------------------------------

def reference_loss(w1, b1, w2, b2, x, y) -> float:
    z = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def fd_gradient(m: Model, b: Batch, h: float = FD_STEP) -> Model:
    """Central-difference gradient of the mean cross-entropy.

    Small layers are perturbed one coordinate at a time. For the first
    weight matrix, a perturbation of ``W1[a, j]`` only moves the
    pre-activation of hidden unit ``j`` by ``h * x[:, a]``, so all 1344
    inputs of one hidden unit are evaluated together.
    """
    x, y = b.features, b.labels
    params = [a.copy() for a in m.layers]
    grads = [np.zeros_like(a) for a in params]

    for li in (1, 2, 3):
        p = params[li].reshape(-1)
        for i in range(p.size):
            old = p[i]
            p[i] = old + h
            up = reference_loss(*params, x, y)
            p[i] = old - h
            down = reference_loss(*params, x, y)
            p[i] = old
            grads[li].reshape(-1)[i] = (up - down) / (2 * h)

    w1, b1, w2, b2 = params
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ w2 + b2
    rows = np.arange(len(y))
    for j in range(N_HIDDEN):
        base = z - np.outer(hidden[:, j], w2[j])
        losses = []
        for sign in (1.0, -1.0):
            hj = np.maximum(pre[:, j][None, :] + sign * h * x.T, 0.0)  # (inputs, batch)
            zz = base[None] + hj[..., None] * w2[j][None, None, :]
            losses.append((logsumexp(zz, axis=2) - zz[:, rows, y]).mean(axis=1))
        grads[0][:, j] = (losses[0] - losses[1]) / (2 * h)
    return Model(*grads)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = FD_FLOOR) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_case(rng: np.random.Generator, batch_size: int = 8) -> tuple[Model, Batch]:
    """A random model and batch with no pre-activation near the ReLU kink."""
    while True:
        m = init_model(int(rng.integers(2**31)))
        m.layer1_bias[:] = rng.normal(0, 0.1, N_HIDDEN)
        m.layer2_bias[:] = rng.normal(0, 0.5, N_CLASSES)
        m.layer2_weights *= 3.0
        x = rng.normal(0, 0.3, (batch_size, N_FEATURES))
        y = rng.integers(0, N_CLASSES, batch_size)
        pre = x @ m.layer1_weights + m.layer1_bias
        if np.abs(pre).min() > KINK_MARGIN:
            return m, Batch(x, y)


def gradient_max_error(m: Model, b: Batch) -> float:
    _, g = loss_and_grad(m, b)
    fd = fd_gradient(m, b)
    return max(float(relative_error(ga, gf).max()) for ga, gf in zip(g.layers, fd.layers))


# -- consensus ----------------------------------------------------------------------

def quadratic_consensus(
    n: int = 15,
    dim: int = 10,
    seed: int = 0,
    steps: int = CONSENSUS_STEPS,
    mu0: float = CONSENSUS_MU0,
    decay: float = CONSENSUS_DECAY,
) -> float:
    """Max-norm distance of every agent from the optimum after ``steps``.

    Local losses are ``0.5 * ||w - c_i||^2``; their sum is minimised at the
    mean of the ``c_i``. Step sizes decay geometrically from ``mu0``.
    """
    rng = np.random.default_rng(seed)
    c = rng.normal(0.0, 1.0, (n, dim))
    M = comms.metropolis_mixing(comms.ring_topology(n))
    w = [np.zeros(dim) for _ in range(n)]
    for t in range(steps):
        grads = [wi - ci for wi, ci in zip(w, c)]
        w = protocols.dsgd_step(w, M, grads, mu0 * decay**t)
    return float(np.abs(np.stack(w) - c.mean(axis=0)).max())


def _random_connected_graph(rng: np.random.Generator, n: int, p: float) -> comms.Graph:
    while True:
        upper = np.triu(rng.random((n, n)) < p, 1)
        g = comms.Graph(n, upper | upper.T)
        if g.is_connected():
            return g


# -- the suite ----------------------------------------------------------------------

def check_gradients(n_cases: int = 5, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = max(gradient_max_error(*random_case(rng)) for _ in range(n_cases))
    return "gradient finite differences", worst < FD_RTOL, f"max relative error {worst:.2e} over {n_cases} cases"


def check_mixing(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    graphs = [comms.ring_topology(15)] + [_random_connected_graph(rng, int(rng.integers(3, 20)), 0.3) for _ in range(20)]
    worst = 0.0
    for g in graphs:
        M = comms.metropolis_mixing(g)
        worst = max(worst, np.abs(M.sum(axis=0) - 1).max(), np.abs(M.sum(axis=1) - 1).max())
    return "doubly stochastic mixing", worst <= 1e-12, f"max row/column deviation {worst:.1e} over {len(graphs)} graphs"


def check_consensus() -> Check:
    dev = quadratic_consensus()
    return "quadratic DSGD consensus", dev < CONSENSUS_TOL, f"max deviation from mean(c_i) {dev:.2e}"


def check_overhead() -> Check:
    m = init_model(0)
    model_msg = comms.sparsify_topk(m, 5750, comms.MODEL)
    grad_msg = comms.sparsify_topk(m, 8000, comms.GRADIENT)
    _, gossip_kb = comms.round_accounting([model_msg] * 2)
    _, diffusion_kb = comms.round_accounting([model_msg] * 2 + [grad_msg] * 2)
    ok = gossip_kb == 92 and diffusion_kb == 220
    return "overhead per round", ok, f"gossip {gossip_kb:g} kB, diffusion {diffusion_kb:g} kB"


CHECKS: tuple[Callable[[], Check], ...] = (check_gradients, check_mixing, check_consensus, check_overhead)


def run_all() -> list[Check]:
    return [c() for c in CHECKS]
