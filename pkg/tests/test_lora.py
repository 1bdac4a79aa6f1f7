import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loradrop import tensor as T
from loradrop.data import Dataset
from loradrop.lora import (
    ABSENT,
    AdapterTopology,
    CapturedOutputs,
    LoRAAdapter,
    MaskedTopology,
    Own,
    Shared,
    TopologyError,
    adapter_forward,
    capture_squared_norms,
    full_topology,
    load_topology,
    own_id,
    save_topology,
    shared_id,
    trainable_param_count,
)
from loradrop.model import AdapterSite, ModelConfig, TransformerModel, adapter_sites
from loradrop.optim import Adam, rng_stream
from loradrop.tensor import Tensor

import reference

SMALL = ModelConfig(num_layers=3, d_model=8, num_heads=2, d_ff=16, vocab_size=16, max_seq_len=8, num_classes=4)


def randomized(topology, seed=0):
    rng = np.random.default_rng(seed)
    for ad in topology.adapters.values():
        ad.B.data[:] = rng.normal(size=ad.B.shape)
    return topology


def dataset(tokens):
    tokens = np.asarray(tokens)
    return Dataset(tokens, np.zeros(len(tokens), dtype=int), np.arange(len(tokens)))


def shared_topology(num_layers, own_query, own_value, rank=8, d=32, seed=0):
    adapters, assignment, shared = {}, {}, {}
    for kind, owned in (("query", own_query), ("value", own_value)):
        for i in range(num_layers):
            site = AdapterSite(i, kind)
            if i in owned:
                adapters[own_id(site)] = LoRAAdapter.fresh(d, d, rank, rng_stream(seed, own_id(site)), 1.0, own_id(site))
                assignment[site] = Own(own_id(site))
            else:
                assignment[site] = Shared(kind)
        if len(owned) < num_layers:
            adapters[shared_id(kind)] = LoRAAdapter.fresh(d, d, rank, rng_stream(seed, kind), 1.0, shared_id(kind))
            shared[kind] = shared_id(kind)
    return AdapterTopology(num_layers, assignment, adapters, shared)


# ------------------------------------------------------------ adapter forward


def test_fresh_adapter_outputs_zero():
    ad = LoRAAdapter.fresh(5, 7, 3, rng_stream(0))
    assert not ad.B.data.any()
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert not adapter_forward(ad, x).data.any()


def test_hand_rank_one_adapter():
    ad = LoRAAdapter(Tensor([[1.0, 0.0]]), Tensor([[2.0], [0.0]]))
    assert adapter_forward(ad, Tensor([3.0, 5.0])).data.tolist() == [6.0, 0.0]


def test_rank_and_dimension_validation():
    with pytest.raises(ValueError, match="rank"):
        LoRAAdapter.fresh(4, 4, 5, rng_stream(0))
    with pytest.raises(ValueError, match="rank"):
        LoRAAdapter.fresh(4, 4, 0, rng_stream(0))
    ad = LoRAAdapter.fresh(4, 4, 2, rng_stream(0))
    with pytest.raises(ValueError, match="last axis"):
        ad(Tensor(np.zeros((2, 3))))


@settings(max_examples=50, deadline=None)
@given(
    d_in=st.integers(1, 9),
    d_out=st.integers(1, 9),
    seed=st.integers(0, 2**31),
    scale=st.floats(0.1, 4.0),
    data=st.data(),
)
def test_dense_equivalence(d_in, d_out, seed, scale, data):
    rank = data.draw(st.integers(1, min(d_in, d_out)))
    rng = np.random.default_rng(seed)
    ad = LoRAAdapter(Tensor(rng.normal(size=(rank, d_in))), Tensor(rng.normal(size=(d_out, rank))), scale)
    x = rng.normal(size=(3, 2, d_in))
    np.testing.assert_allclose(ad(Tensor(x)).data, x @ ad.dense().T, rtol=0, atol=1e-12)


def test_adapter_grads_match_finite_differences():
    from gradcheck import numeric_grad, rel_error

    rng = np.random.default_rng(5)
    ad = LoRAAdapter(Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True), Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True), 0.7)
    x = Tensor(rng.uniform(-2, 2, (2, 4)))
    w = Tensor(rng.normal(size=(2, 5)))

    def loss():
        return T.sum(T.mul(ad(x), w))

    T.backward(loss())
    for p in ad.parameters():
        def f():
            with T.no_grad():
                return loss().item()
        assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-6


# ------------------------------------------------------------ topology


def test_full_topology_is_valid_and_distinct():
    topo = full_topology(ModelConfig(), 8, 0)
    assert len(topo.active_adapters()) == 12
    assert topo.sites_with(Shared) == [] and topo.shared == {}
    a = topo.adapters[own_id(AdapterSite(0, "query"))].A.data
    b = topo.adapters[own_id(AdapterSite(1, "query"))].A.data
    assert not np.array_equal(a, b)


def test_same_site_same_init_across_topologies():
    full = full_topology(ModelConfig(), 8, 3)
    again = full_topology(ModelConfig(), 8, 3)
    assert full.equal(again)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda a, ad, sh: a.pop(AdapterSite(0, "query")), "every"),
        (lambda a, ad, sh: a.__setitem__(AdapterSite(0, "query"), Own("own.1.query")), "more than one"),
        (lambda a, ad, sh: a.__setitem__(AdapterSite(0, "query"), Shared("value")), "cannot use"),
        (lambda a, ad, sh: a.__setitem__(AdapterSite(0, "query"), Shared("query")), "missing shared"),
        (lambda a, ad, sh: a.__setitem__(AdapterSite(0, "query"), ABSENT), "only legal"),
        (lambda a, ad, sh: a.__setitem__(AdapterSite(0, "query"), Own("nope")), "missing adapter"),
        (lambda a, ad, sh: sh.__setitem__("key", "own.0.query"), "unknown shared group"),
    ],
)
def test_topology_invariants(mutate, message):
    topo = full_topology(ModelConfig(num_layers=2), 2, 0)
    assignment, adapters, shared = dict(topo.assignment), dict(topo.adapters), {}
    mutate(assignment, adapters, shared)
    with pytest.raises(TopologyError, match=message):
        AdapterTopology(2, assignment, adapters, shared)


def test_shared_parameters_are_one_object():
    cfg = ModelConfig(num_layers=3, d_model=8, num_heads=2, d_ff=8)
    topo = shared_topology(3, {0}, {1}, rank=2, d=8)
    model = TransformerModel(cfg, 0)
    model.freeze_base()
    opt = Adam(topo.parameters() + model.head_parameters(), lr=0.05)
    rng = np.random.default_rng(0)
    for _ in range(3):
        opt.zero_grad()
        T.backward(T.cross_entropy(model.forward(rng.integers(0, 16, (4, 8)), topo), rng.integers(0, 4, 4)))
        opt.step()
    q1, q2 = topo.adapter_at(AdapterSite(1, "query")), topo.adapter_at(AdapterSite(2, "query"))
    assert q1 is q2 and q1.B.data.any()
    assert len(topo.parameters()) == 2 * 4


# ------------------------------------------------------------ parameter counts


def test_param_count_examples():
    assert trainable_param_count(full_topology(ModelConfig(), 8, 0)) == 6144
    topo = shared_topology(13, set(range(5)), set(range(7)))
    assert trainable_param_count(topo) == 14 * 8 * 64 == 7168
    half = shared_topology(6, {0, 1, 2}, {3, 4, 5})
    assert trainable_param_count(half) == 4096 < 6144


def test_param_count_matches_recomputation_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        L = int(rng.integers(1, 8))
        owned_q = set(np.flatnonzero(rng.random(L) < 0.5).tolist())
        owned_v = set(np.flatnonzero(rng.random(L) < 0.5).tolist())
        topo = shared_topology(L, owned_q, owned_v, rank=4, d=8)
        distinct = {id(topo.adapter_at(s)) for s in adapter_sites(L)}
        assert trainable_param_count(topo) == len(distinct) * 4 * 16


# ------------------------------------------------------------ capture


def test_capture_zero_adapters():
    model = TransformerModel(SMALL, 0)
    cap = capture_squared_norms(model, full_topology(SMALL, 2, 0), dataset(np.ones((3, 8), dtype=int)))
    assert all(v == 0.0 for v in cap.totals().values())


def test_capture_single_token_hand_case():
    cfg = ModelConfig(num_layers=1, d_model=2, num_heads=1, d_ff=2, vocab_size=3, max_seq_len=1, num_classes=2)
    model = TransformerModel(cfg, 0)
    # one token with d_model=2 normalizes to (+c, -c), c = 0.5 / sqrt(0.25 + eps)
    model.params["embed"].data[:] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    model.params["pos"].data[:] = 0.0
    c = 0.5 / np.sqrt(0.25 + 1e-5)
    adapters = {
        "own.0.query": LoRAAdapter(Tensor([[1.0, 0.0]]), Tensor([[3.0], [4.0]]), 1.0 / c, "own.0.query"),
        "own.0.value": LoRAAdapter(Tensor([[1.0, 0.0]]), Tensor([[0.0], [0.0]]), 1.0, "own.0.value"),
    }
    topo = AdapterTopology(1, {AdapterSite(0, "query"): Own("own.0.query"), AdapterSite(0, "value"): Own("own.0.value")}, adapters)
    cap = capture_squared_norms(model, topo, dataset([[0]]))
    assert cap.total(AdapterSite(0, "query")) == pytest.approx(25.0, rel=1e-12)


def test_capture_two_by_two_matches_dense_oracle():
    model = TransformerModel(SMALL, 1)
    topo = randomized(full_topology(SMALL, 2, 0))
    tokens = np.array([[1, 2], [3, 4]])
    cap = capture_squared_norms(model, topo, dataset(tokens))
    ref = reference.squared_norm_totals(model, tokens, topo)
    for site, expected in ref.items():
        assert cap.total(site) == pytest.approx(expected, rel=1e-9)
        assert cap.token_counts[site] == 4


def test_capture_empty_subset():
    with pytest.raises(ValueError, match="empty importance subset"):
        capture_squared_norms(TransformerModel(SMALL, 0), full_topology(SMALL, 2, 0), dataset(np.zeros((0, 8), dtype=int)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), cut=st.integers(1, 5))
def test_capture_additivity_is_exact(seed, cut):
    rng = np.random.default_rng(seed)
    model = TransformerModel(SMALL, seed % 7)
    topo = randomized(full_topology(SMALL, 2, seed % 5), seed)
    tokens = rng.integers(0, 16, size=(6, 8))
    whole = capture_squared_norms(model, topo, dataset(tokens))
    parts = capture_squared_norms(model, topo, dataset(tokens[:cut])) + capture_squared_norms(model, topo, dataset(tokens[cut:]))
    assert whole.totals() == parts.totals()
    assert whole.token_counts == parts.token_counts


def test_accumulators_monotone_during_pass():
    model = TransformerModel(SMALL, 0)
    topo = randomized(full_topology(SMALL, 2, 0))
    cap = CapturedOutputs(adapter_sites(3))
    rng = np.random.default_rng(0)
    prev = cap.totals()
    for _ in range(5):
        with T.no_grad():
            model.encode(rng.integers(0, 16, (1, 8)), topo, cap)
        cur = cap.totals()
        assert all(cur[s] >= prev[s] >= 0 for s in cur)
        prev = cur


def test_per_example_norms_sum_to_total():
    model = TransformerModel(SMALL, 0)
    topo = randomized(full_topology(SMALL, 2, 0))
    tokens = np.random.default_rng(1).integers(0, 16, (5, 8))
    cap = capture_squared_norms(model, topo, dataset(tokens), record_examples=True)
    for site in cap.sites:
        assert len(cap.example_norms[site]) == 5
        assert sum(cap.example_norms[site]) == pytest.approx(cap.total(site), rel=1e-12)


def test_masked_topology_full_and_empty():
    model = TransformerModel(SMALL, 0)
    topo = randomized(full_topology(SMALL, 2, 0))
    x = np.random.default_rng(0).integers(0, 16, (3, 8))
    everything = MaskedTopology(topo, adapter_sites(3))
    assert np.array_equal(model.forward(x, everything).data, model.forward(x, topo).data)
    assert np.array_equal(model.forward(x, MaskedTopology(topo, [])).data, model.forward(x).data)


# ------------------------------------------------------------ persistence


def test_topology_round_trip(tmp_path):
    topo = randomized(shared_topology(4, {0, 2}, {1}, rank=3, d=32))
    path = tmp_path / "topo.json"
    save_topology(topo, path)
    back = load_topology(path, ModelConfig(num_layers=4))
    assert back.equal(topo)
    doc = json.loads(path.read_text())
    assert doc["assignments"]["1.query"] == {"type": "shared", "group": "query"}


def test_absent_round_trip(tmp_path):
    topo = full_topology(ModelConfig(num_layers=2), 2, 0)
    assignment = dict(topo.assignment)
    assignment[AdapterSite(1, "value")] = ABSENT
    adapters = {k: v for k, v in topo.adapters.items() if k != "own.1.value"}
    t = AdapterTopology(2, assignment, adapters, allow_absent=True)
    save_topology(t, tmp_path / "t.json")
    assert load_topology(tmp_path / "t.json").equal(t)


def test_topology_load_errors(tmp_path):
    topo = shared_topology(2, {0}, {0}, rank=2, d=32)
    path = tmp_path / "topo.json"
    save_topology(topo, path)
    doc = json.loads(path.read_text())

    bad = json.loads(json.dumps(doc))
    bad["groups"]["attention"] = "shared.query"
    path.write_text(json.dumps(bad))
    with pytest.raises(TopologyError, match="group_kind"):
        load_topology(path)

    bad = json.loads(json.dumps(doc))
    bad["assignments"]["1.query"]["group"] = "ffn"
    path.write_text(json.dumps(bad))
    with pytest.raises(TopologyError, match="group_kind"):
        load_topology(path)

    bad = json.loads(json.dumps(doc))
    bad["version"] = 2
    path.write_text(json.dumps(bad))
    with pytest.raises(TopologyError, match="version"):
        load_topology(path)

    path.write_text(json.dumps(doc)[:40])
    with pytest.raises(TopologyError, match="malformed"):
        load_topology(path)

    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="d_model=16"):
        load_topology(path, ModelConfig(num_layers=2, d_model=16))
