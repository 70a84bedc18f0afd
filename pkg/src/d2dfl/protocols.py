"""Learning regimes over the D2D network.

* ego: local SGD only, radio off.
* gossip: random neighbour, bidirectional sparse model exchange, pairwise
  averaging at the delivered coordinates, then one local SGD step.
* diffusion: request/reply negotiation. Each side sends its sparse model,
  the partner evaluates its local gradient at the received model and sends
  it back, and both apply ``W <- (W + W_recv)/2 - mu * (g_own + g_recv)``.

:func:`dsgd_step` is a dense, lossless decentralized SGD step over a mixing
matrix and serves as a reference engine for the convergence checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import comms
from .comms import ChannelModel, SparseUpdate
from .nn import Batch, Gradients, Model, loss_and_grad

EGO = "ego"
GOSSIP = "gossip"
DIFFUSION = "diffusion"
PROTOCOLS = (EGO, GOSSIP, DIFFUSION)

GradFn = Callable[[Model, Batch], Gradients]


def _default_grad(m: Model, b: Batch) -> Gradients:
    return loss_and_grad(m, b)[1]


@dataclass
class Agent:
    id: int
    model: Model
    features: np.ndarray
    labels: np.ndarray
    neighbors: list[int]
    rng: np.random.Generator
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if self.labels.shape[0] == 0:
            raise ValueError(f"agent {self.id} has no local data")

    def draw_batch(self, batch_size: int) -> Batch:
        n = self.labels.shape[0]
        pick = self.rng.choice(n, size=min(batch_size, n), replace=False)
        return Batch(self.features[pick], self.labels[pick])


@dataclass
class Negotiation:
    """Traffic of one pairwise exchange: updates as sent and as delivered."""

    initiator: int
    responder: int
    sent: list[SparseUpdate]
    delivered: list[SparseUpdate]

    @property
    def dropped_frames(self) -> int:
        return sum(d.dropped_frames for d in self.delivered)


# -- sparse overlay arithmetic -------------------------------------------------

def _check_kind(u: SparseUpdate, kind: str):
    if u.kind != kind:
        raise ValueError(f"expected a {kind} update, got {u.kind}")


def gossip_average(own: Model, received: SparseUpdate) -> Model:
    """Average ``own`` with ``received`` at the delivered coordinates only."""
    _check_kind(received, comms.MODEL)
    out = []
    for w, idx, vals in zip(own.layers, received.indices, received.values):
        w = w.copy()
        flat = w.reshape(-1)
        flat[idx] = 0.5 * (flat[idx] + vals)
        out.append(w)
    return Model(*out)


def overlay(own: Model, received: SparseUpdate) -> Model:
    """Reconstruct a partner's model: its delivered entries over ``own``."""
    out = []
    for w, idx, vals in zip(own.layers, received.indices, received.values):
        w = w.copy()
        w.reshape(-1)[idx] = vals
        out.append(w)
    return Model(*out)


def combine_and_adapt(
    own: Model,
    received_model: SparseUpdate,
    own_grad: Gradients,
    received_grad: SparseUpdate,
    mu: float,
) -> Model:
    """``(W + W_recv)/2 - mu * (g_own + g_recv)`` with sparse overlay semantics.

    Coordinates not delivered keep ``W`` (model) or contribute 0 (gradient).
    """
    _check_kind(received_grad, comms.GRADIENT)
    combined = gossip_average(own, received_model)
    out = []
    for w, g, idx, vals in zip(combined.layers, own_grad.layers, received_grad.indices, received_grad.values):
        g = g.copy()
        g.reshape(-1)[idx] += vals
        out.append(w - mu * g)
    return Model(*out)


# -- per-agent rounds ----------------------------------------------------------

def ego_round(a: Agent, mu: float, batch_size: int, grad_fn: GradFn = _default_grad) -> Agent:
    b = a.draw_batch(batch_size)
    a.model = _sgd(a.model, grad_fn(a.model, b), mu)
    return a


def _sgd(m: Model, g: Gradients, mu: float) -> Model:
    # Same arithmetic as nn.sgd_step, kept local so rounds share one code path.
    return Model(*(p - mu * dp for p, dp in zip(m.layers, g.layers)))


def gossip_round(
    a: Agent,
    peer: Agent | None,
    channel: ChannelModel,
    rng: np.random.Generator,
    mu: float,
    k_model: int,
    batch_size: int,
    grad_fn: GradFn = _default_grad,
) -> Negotiation | None:
    """Pairwise gossip between ``a`` and ``peer``; both agents are updated in place."""
    if peer is None:
        ego_round(a, mu, batch_size, grad_fn)
        return None
    sent_a = comms.sparsify_topk(a.model, k_model, comms.MODEL)
    sent_b = comms.sparsify_topk(peer.model, k_model, comms.MODEL)
    at_b = comms.transmit(sent_a, channel, rng)
    at_a = comms.transmit(sent_b, channel, rng)
    batch_a = a.draw_batch(batch_size)
    batch_b = peer.draw_batch(batch_size)
    avg_a = gossip_average(a.model, at_a)
    avg_b = gossip_average(peer.model, at_b)
    a.model = _sgd(avg_a, grad_fn(avg_a, batch_a), mu)
    peer.model = _sgd(avg_b, grad_fn(avg_b, batch_b), mu)
    return Negotiation(a.id, peer.id, [sent_a, sent_b], [at_b, at_a])


def diffusion_round(
    a: Agent,
    peer: Agent | None,
    channel: ChannelModel,
    rng: np.random.Generator,
    mu: float,
    k_model: int,
    k_grad: int,
    batch_size: int,
    grad_fn: GradFn = _default_grad,
) -> Negotiation | None:
    """Symmetric gradient negotiation between ``a`` and ``peer``.

    Each side draws one local mini-batch and uses it both for its own
    gradient and for the gradient it evaluates at the partner's model.
    """
    if peer is None:
        ego_round(a, mu, batch_size, grad_fn)
        return None
    # request: models out
    sent_wa = comms.sparsify_topk(a.model, k_model, comms.MODEL)
    wa_at_b = comms.transmit(sent_wa, channel, rng)
    sent_wb = comms.sparsify_topk(peer.model, k_model, comms.MODEL)
    wb_at_a = comms.transmit(sent_wb, channel, rng)

    batch_a = a.draw_batch(batch_size)
    batch_b = peer.draw_batch(batch_size)

    # reply: gradients of the local loss at the partner's model
    sent_gb = comms.sparsify_topk(grad_fn(overlay(peer.model, wa_at_b), batch_b), k_grad, comms.GRADIENT)
    gb_at_a = comms.transmit(sent_gb, channel, rng)
    sent_ga = comms.sparsify_topk(grad_fn(overlay(a.model, wb_at_a), batch_a), k_grad, comms.GRADIENT)
    ga_at_b = comms.transmit(sent_ga, channel, rng)

    new_a = combine_and_adapt(a.model, wb_at_a, grad_fn(a.model, batch_a), gb_at_a, mu)
    new_b = combine_and_adapt(peer.model, wa_at_b, grad_fn(peer.model, batch_b), ga_at_b, mu)
    a.model, peer.model = new_a, new_b
    return Negotiation(
        a.id, peer.id, [sent_wa, sent_wb, sent_gb, sent_ga], [wa_at_b, wb_at_a, gb_at_a, ga_at_b]
    )


# -- network rounds ------------------------------------------------------------

def match_pairs(agents: Sequence[Agent], rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random matching along graph edges; each agent joins at most one pair.

    Agents are visited in random order; an unmatched agent picks a uniform
    neighbour among those still unmatched. Pairs are returned sorted by
    initiator id.
    """
    matched: set[int] = set()
    pairs = []
    for i in rng.permutation(len(agents)):
        i = int(i)
        if i in matched:
            continue
        free = [j for j in agents[i].neighbors if j not in matched]
        if not free:
            continue
        j = free[int(rng.integers(len(free)))]
        matched.update((i, j))
        pairs.append((i, j))
    return sorted(pairs)


@dataclass
class RoundResult:
    negotiations: list[Negotiation]

    @property
    def dropped_frames(self) -> int:
        return sum(n.dropped_frames for n in self.negotiations)


def network_round(
    protocol: str,
    agents: Sequence[Agent],
    channel: ChannelModel,
    sched_rng: np.random.Generator,
    chan_rng: np.random.Generator,
    mu: float,
    k_model: int,
    k_grad: int,
    batch_size: int,
    grad_fn: GradFn = _default_grad,
) -> RoundResult:
    """One synchronous round of ``protocol`` over all agents (updated in place).

    Agents left out of the matching take a local SGD step.
    """
    if protocol == EGO:
        for a in agents:
            ego_round(a, mu, batch_size, grad_fn)
        return RoundResult([])
    if protocol not in (GOSSIP, DIFFUSION):
        raise ValueError(f"unknown protocol {protocol!r}")
    pairs = match_pairs(agents, sched_rng)
    paired = {i for p in pairs for i in p}
    negotiations = []
    for i, j in pairs:
        if protocol == GOSSIP:
            neg = gossip_round(agents[i], agents[j], channel, chan_rng, mu, k_model, batch_size, grad_fn)
        else:
            neg = diffusion_round(agents[i], agents[j], channel, chan_rng, mu, k_model, k_grad, batch_size, grad_fn)
        negotiations.append(neg)
    for a in agents:
        if a.id not in paired:
            ego_round(a, mu, batch_size, grad_fn)
    return RoundResult(negotiations)


# -- reference engine ----------------------------------------------------------

def dsgd_step(models, M: np.ndarray, grads, mu: float):
    """Synchronous ``W_i <- sum_j M[i, j] W_j - mu * g_i`` for all agents.

    ``models`` and ``grads`` are equal-length sequences of arrays of one
    shape, or of :class:`~d2dfl.nn.Model`; the result has the same form.
    """
    n = len(models)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (n, n) or len(grads) != n:
        raise ValueError(f"need {n} gradients and an {n}x{n} mixing matrix")
    as_model = isinstance(models[0], Model)
    if as_model:
        W = np.stack([m.flat() for m in models])
        G = np.stack([g.flat() for g in grads])
    else:
        W = np.stack([np.asarray(m, dtype=np.float64) for m in models])
        G = np.stack([np.asarray(g, dtype=np.float64) for g in grads])
        if W.shape != G.shape:
            raise ValueError(f"model shape {W.shape[1:]} does not match gradient shape {G.shape[1:]}")
    shape = W.shape[1:]
    out = (M @ W.reshape(n, -1) - mu * G.reshape(n, -1)).reshape((n,) + shape)
    if as_model:
        return [Model.from_flat(row) for row in out]
    return list(out)

