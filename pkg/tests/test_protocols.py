import numpy as np
import pytest

from d2dfl import comms, protocols
from d2dfl.comms import ChannelModel
from d2dfl.nn import N_FEATURES, N_PARAMS, Model, eval_loss, init_model
from d2dfl.protocols import Agent
from d2dfl.runner import ExperimentConfig, build_agents

LOSSLESS = ChannelModel(bler=0.0)
DEAD = ChannelModel(bler=1.0)


def make_agent(i, model, neighbors=(), n=8, seed=0, features=None, labels=None):
    rng = np.random.default_rng(seed)
    if features is None:
        features = rng.normal(0, 0.3, (n, N_FEATURES))
        labels = rng.integers(0, 6, n)
    return Agent(i, model, features, labels, list(neighbors), np.random.default_rng(seed + 1000))


def ones_grad(m, b):
    return Model.full(1.0)


def zero_grad(m, b):
    return Model.zeros()


def same(a: Model, b: Model) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))


def test_agent_needs_data():
    with pytest.raises(ValueError):
        Agent(0, Model.zeros(), np.zeros((0, N_FEATURES)), np.zeros(0, dtype=int), [], np.random.default_rng())


def test_ego_zero_gradient_is_fixed_point():
    a = make_agent(0, init_model(0))
    before = a.model.copy()
    protocols.ego_round(a, 0.025, 16, zero_grad)
    assert same(a.model, before)


def test_ego_batch_is_capped_by_local_data():
    a = make_agent(0, init_model(0), n=5)
    assert len(a.draw_batch(16)) == 5


def test_gossip_dense_pairwise_mean():
    a = make_agent(0, Model.full(0.0), [1])
    b = make_agent(1, Model.full(2.0), [0], seed=1)
    neg = protocols.gossip_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, N_PARAMS, 16, zero_grad)
    assert all((x == 1.0).all() for x in a.model.layers)
    assert all((x == 1.0).all() for x in b.model.layers)
    assert len(neg.sent) == 2


def test_gossip_identical_models_is_two_ego_steps():
    m = init_model(3)
    a, b = make_agent(0, m.copy(), [1]), make_agent(1, m.copy(), [0], seed=1)
    ea, eb = make_agent(0, m.copy(), [1]), make_agent(1, m.copy(), [0], seed=1)
    protocols.gossip_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, 5750, 4)
    protocols.ego_round(ea, 0.025, 4)
    protocols.ego_round(eb, 0.025, 4)
    # received values are float32, so agreement is to float32 resolution
    np.testing.assert_allclose(a.model.flat(), ea.model.flat(), rtol=0, atol=1e-7)
    np.testing.assert_allclose(b.model.flat(), eb.model.flat(), rtol=0, atol=1e-7)


def test_gossip_symmetric_after_dense_exchange():
    a = make_agent(0, init_model(1), [1])
    b = make_agent(1, init_model(2), [0], seed=1)
    wa, wb = a.model.copy(), b.model.copy()
    captured = []

    def spy(m, batch):
        captured.append(m.flat())
        return Model.zeros()

    protocols.gossip_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, N_PARAMS, 4, spy)
    # each side averages its float64 model with the peer's float32 copy
    np.testing.assert_allclose(captured[0], captured[1], rtol=0, atol=1e-8)
    expected = 0.5 * (wa.flat() + wb.flat().astype(np.float32))
    np.testing.assert_allclose(captured[0], expected, rtol=0, atol=1e-7)


def test_gossip_sparse_averages_only_delivered_support():
    a = make_agent(0, init_model(1), [1])
    b = make_agent(1, init_model(2), [0], seed=1)
    wa, wb = a.model.flat(), b.model.flat()
    protocols.gossip_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, 100, 4, zero_grad)
    sent_b = comms.sparsify_topk(Model.from_flat(wb), 100)
    support = np.concatenate([idx + off for idx, off in zip(sent_b.indices, np.cumsum([0, 24192, 18, 108]))])
    changed = np.flatnonzero(a.model.flat() != wa)
    assert set(changed.tolist()) <= set(support.tolist())
    untouched = np.setdiff1d(np.arange(N_PARAMS), support)
    np.testing.assert_array_equal(a.model.flat()[untouched], wa[untouched])


def test_gossip_without_peer_is_ego():
    a, e = make_agent(0, init_model(0)), make_agent(0, init_model(0))
    assert protocols.gossip_round(a, None, LOSSLESS, np.random.default_rng(0), 0.025, 5750, 4) is None
    protocols.ego_round(e, 0.025, 4)
    assert same(a.model, e.model)


def test_diffusion_scalar_toy():
    a = make_agent(0, Model.full(0.0), [1])
    b = make_agent(1, Model.full(2.0), [0], seed=1)
    neg = protocols.diffusion_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, N_PARAMS, N_PARAMS, 16, ones_grad)
    # (0 + 2)/2 - 0.025 * (1 + 1)
    assert all(np.allclose(x, 0.95, rtol=0, atol=1e-15) for x in a.model.layers)
    assert all(np.allclose(x, 0.95, rtol=0, atol=1e-15) for x in b.model.layers)
    assert [u.kind for u in neg.sent] == ["model", "model", "gradient", "gradient"]


def test_diffusion_fixed_point():
    m = init_model(5)
    a, b = make_agent(0, m.copy(), [1]), make_agent(1, m.copy(), [0], seed=1)
    protocols.diffusion_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, 5750, 8000, 16, zero_grad)
    np.testing.assert_allclose(a.model.flat(), m.flat(), rtol=0, atol=1e-8)
    np.testing.assert_allclose(b.model.flat(), m.flat(), rtol=0, atol=1e-8)


def test_diffusion_default_traffic():
    a = make_agent(0, init_model(1), [1])
    b = make_agent(1, init_model(2), [0], seed=1)
    neg = protocols.diffusion_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, 5750, 8000, 16)
    assert comms.round_accounting(neg.sent) == (30.0, 220.0)


def test_diffusion_partner_gradient_uses_received_model():
    a = make_agent(0, init_model(1), [1])
    b = make_agent(1, init_model(2), [0], seed=1)
    wa = a.model.flat()
    seen = []

    def spy(m, batch):
        seen.append(m.flat())
        return Model.zeros()

    protocols.diffusion_round(a, b, LOSSLESS, np.random.default_rng(0), 0.025, N_PARAMS, N_PARAMS, 4, spy)
    # first gradient evaluated is b's gradient at a's (float32-encoded) model
    np.testing.assert_array_equal(seen[0], wa.astype(np.float32).astype(np.float64))


def test_combine_and_adapt_kind_check():
    m = Model.zeros()
    u = comms.sparsify_topk(m, 1, comms.MODEL)
    with pytest.raises(ValueError):
        protocols.combine_and_adapt(m, u, m, u, 0.1)


def test_match_pairs_on_ring():
    agents, _ = build_agents(ExperimentConfig(n_agents=15), _feature_stub())
    rng = np.random.default_rng(0)
    for _ in range(50):
        pairs = protocols.match_pairs(agents, rng)
        flat = [i for p in pairs for i in p]
        assert len(flat) == len(set(flat))
        assert all(j in agents[i].neighbors for i, j in pairs)
        assert pairs == sorted(pairs) and len(pairs) >= 5


def _feature_stub():
    from d2dfl.datasets import FeatureSet

    rng = np.random.default_rng(0)
    return FeatureSet(rng.normal(0, 0.3, (900, N_FEATURES)), np.repeat(np.arange(6), 150), np.zeros(N_FEATURES), 1.0)


@pytest.mark.parametrize("protocol", ["gossip", "diffusion"])
@pytest.mark.parametrize("mode", ["iid", "non-iid"])
def test_total_loss_degenerates_to_ego(protocol, mode):
    cfg = ExperimentConfig(partition_mode=mode)
    train = _feature_stub()
    coop, seq = build_agents(cfg, train)
    ego, _ = build_agents(cfg, train)
    sched, chan = (np.random.default_rng(s) for s in seq.spawn(2))
    for _ in range(15):
        protocols.network_round(protocol, coop, DEAD, sched, chan, 0.025, 5750, 8000, 16)
        protocols.network_round("ego", ego, DEAD, sched, chan, 0.025, 5750, 8000, 16)
    for a, b in zip(coop, ego):
        assert same(a.model, b.model)


def test_network_round_unknown_protocol():
    with pytest.raises(ValueError):
        protocols.network_round("flood", [], LOSSLESS, None, None, 0.1, 1, 1, 1)


def test_ego_learns_on_iid_shard(features):
    train, test = features
    drops = []
    for seed in range(3):
        agents, _ = build_agents(ExperimentConfig(learning_seed=seed), train)
        a = agents[0]
        start = eval_loss(a.model, test)
        for _ in range(1000):
            protocols.ego_round(a, 0.025, 16)
        drops.append(1 - eval_loss(a.model, test) / start)
    assert np.mean(drops) >= 0.30


# -- DSGD reference engine -----------------------------------------------------

def ring_mixing(n=15):
    return comms.metropolis_mixing(comms.ring_topology(n))


def test_dsgd_identity_mixing_is_parallel_sgd():
    rng = np.random.default_rng(0)
    w = [rng.normal(size=4) for _ in range(5)]
    g = [rng.normal(size=4) for _ in range(5)]
    out = protocols.dsgd_step(w, np.eye(5), g, 0.1)
    for o, wi, gi in zip(out, w, g):
        np.testing.assert_array_equal(o, wi - 0.1 * gi)


def test_dsgd_accepts_models():
    ms = [init_model(i) for i in range(3)]
    out = protocols.dsgd_step(ms, np.eye(3), [Model.zeros()] * 3, 0.1)
    assert all(same(a, b) for a, b in zip(out, ms))


def test_dsgd_dimension_mismatch():
    with pytest.raises(ValueError):
        protocols.dsgd_step([np.zeros(2)] * 3, np.eye(2), [np.zeros(2)] * 3, 0.1)
    with pytest.raises(ValueError):
        protocols.dsgd_step([np.zeros(2)] * 2, np.eye(2), [np.zeros(3)] * 2, 0.1)


def test_dsgd_consensus_contracts_and_conserves_mean():
    rng = np.random.default_rng(1)
    M = ring_mixing()
    w = [rng.normal(size=6) for _ in range(15)]
    mean0 = np.mean(w, axis=0)
    zeros = [np.zeros(6)] * 15

    def spread(ws):
        s = np.stack(ws)
        return np.abs(s[:, None, :] - s[None, :, :]).max()

    prev = spread(w)
    for _ in range(600):
        w = protocols.dsgd_step(w, M, zeros, 0.1)
        s = spread(w)
        assert s <= prev + 1e-15
        prev = s
        np.testing.assert_allclose(np.mean(w, axis=0), mean0, rtol=0, atol=1e-12)
    assert prev < 1e-10


def test_dsgd_quadratic_reaches_optimum():
    from d2dfl.selfcheck import quadratic_consensus

    for seed in range(3):
        assert quadratic_consensus(seed=seed) < 1e-3
