"""Acceptance suite: one test per headline criterion, each printing PASS/FAIL.

The two training criteria are slow (the layer-wise information-gain study
trains eight 16-layer models, roughly 40 minutes on one core). Everything else
finishes in seconds.
"""

import filecmp
import json
import subprocess
import sys
import time

import numpy as np
import pytest

import bimp.autodiff as ad
import oracles
from bimp.autodiff import Tensor, grad_check
from bimp.bilateral import AssignmentNet, mahalanobis, mincut_loss, normalize_gates, ortho_loss, similarity, soft_assign
from bimp.diagnostics import instance_info_gain_tensor, layerwise_compare
from bimp.graph import GraphBatch, SbmSpec, build_graph, generate_regression_set, generate_sbm, split
from bimp.heads import binary_cross_entropy, edge_head, graph_head, mean_readout, node_head, task_loss
from bimp.layers import GATLayer, GatedGCNLayer, GCNLayer, LayerKind, SAGELayer, apply_bilateral_gating, make_layer
from bimp.cli import info_gain_samples
from bimp.model import ModelConfig, build_model
from bimp.training import TrainConfig, run_benchmark, train
from conftest import edge_keyed, random_graph


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line for the criterion, bypassing capture."""
    lines = []

    def emit(name, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        with capsys.disabled():
            print("\n" + lines[-1])
        return ok

    return emit


def const(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# gradient suite


def _gradient_cases(rng, g):
    """Yield (label, loss fn, leaf) triples covering every differentiable path."""
    batch = GraphBatch([g])
    d = g.node_features.shape[1]
    h = Tensor(g.node_features.copy(), requires_grad=True)
    e = Tensor(rng.standard_normal((batch.num_directed, d)), requires_grad=True)
    gates = Tensor(rng.uniform(0.2, 1.0, batch.num_directed), requires_grad=True)
    w_out = rng.standard_normal((g.num_nodes, d))
    for kind in LayerKind:
        layer = make_layer(kind, d, rng, heads=2)
        for gated in (False, True):
            def loss(_, layer=layer, gated=gated):
                gt = gates if gated else None
                out = layer(batch, h, e, gates=gt)[0] if isinstance(layer, GatedGCNLayer) else layer(batch, h, gates=gt)
                return ad.sum_(out * w_out)
            leaves = layer.parameters() + [h] + ([gates] if gated else [])
            if kind is LayerKind.GATED_GCN:
                leaves.append(e)
            for p in leaves:
                yield f"{kind.value}{'-bi' if gated else ''}", loss, p

    net = AssignmentNet(d, 3, rng, metric_noise=0.3)
    probe = rng.standard_normal((g.num_nodes, 3))
    for p in (net.W1, net.W2):
        yield "soft_assign", lambda _: ad.sum_(soft_assign(h, net.W1, net.W2) * probe), p
    s_leaf = Tensor(ad.softmax_rows(rng.standard_normal((g.num_nodes, 3))).data, requires_grad=True)
    if g.num_edges:
        yield "mincut_loss", lambda s: mincut_loss(g, s), s_leaf
    yield "ortho_loss", lambda s: ortho_loss(s), s_leaf

    def gate_chain(_):
        s = soft_assign(h, net.W1, net.W2)
        dist = mahalanobis(ad.gather_rows(s, batch.src), ad.gather_rows(s, batch.dst), net.Wm)
        gt = normalize_gates(batch, similarity(dist, 0.8))
        return ad.sum_(gt * np.arange(batch.num_directed, dtype=float))

    if g.num_edges:
        for p in (net.W1, net.W2, net.Wm):
            yield "gate_composition", gate_chain, p

    w_node = Tensor(rng.standard_normal((d, 3)), requires_grad=True)
    w_edge = Tensor(rng.standard_normal((2 * d, 1)), requires_grad=True)
    w_graph = Tensor(rng.standard_normal((d, 1)), requires_grad=True)
    labels = rng.integers(0, 3, g.num_nodes)
    yield "node_head", lambda w: task_loss(node_head(h, w), labels, ModelConfig(num_classes=3).task_spec), w_node
    if g.num_edges:
        yield "edge_head", lambda w: binary_cross_entropy(
            edge_head(ad.gather_rows(h, batch.src), ad.gather_rows(h, batch.dst), w),
            (np.arange(batch.num_directed) % 2), 2.0), w_edge
    yield "graph_head", lambda w: ad.sum_(ad.square(graph_head(mean_readout(batch, h), w))), w_graph
    hidden = g.node_features @ rng.standard_normal((d, 2)) + rng.standard_normal((g.num_nodes, 2))
    yield "instance_info_gain", lambda t: instance_info_gain_tensor(g.node_features, t), \
        Tensor(hidden, requires_grad=True)


def test_gradient_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, worst_case, checked = 0.0, "", set()
    for _ in range(20):
        n = int(rng.integers(8, 13))
        g = random_graph(rng, n=n, dim=4, allow_isolated=False)
        for label, fn, leaf in _gradient_cases(rng, g):
            err = grad_check(fn, leaf, h=1e-6)
            checked.add(label)
            if err > worst:
                worst, worst_case = err, label
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 120
    report("gradient suite", ok, f"{len(checked)} paths x 20 graphs, worst rel err {worst:.2e} ({worst_case}), "
                                 f"{elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 120


# ---------------------------------------------------------------------------
# oracle suite


def _layer_vs_oracle(rng, g, kind, gated):
    batch = GraphBatch([g])
    d = g.node_features.shape[1]
    nb = oracles.adjacency_lists(g.num_nodes, g.edges)
    gates = rng.uniform(0.05, 1.0, batch.num_directed) if gated else None
    keyed = None if gates is None else edge_keyed(batch, gates)
    h = g.node_features
    if kind is LayerKind.GCN:
        layer = GCNLayer(d, rng)
        return layer(batch, const(h), gates=gates).data, oracles.gcn(nb, h, layer.U.data, keyed)
    if kind is LayerKind.SAGE:
        layer = SAGELayer(d, rng)
        return layer(batch, const(h), gates=gates).data, oracles.sage(nb, h, layer.U.data, layer.V.data, keyed)
    if kind is LayerKind.GAT:
        layer = GATLayer(d, rng, heads=2)
        ref = oracles.gat(nb, h, layer.U.data, layer.attn_dst.data, layer.attn_src.data, keyed)
        return layer(batch, const(h), gates=gates).data, ref
    layer = GatedGCNLayer(d, rng)
    e = rng.standard_normal((batch.num_directed, d))
    out_h, out_e = layer(batch, const(h), const(e), gates=gates)
    p = {k: getattr(layer, k).data for k in "UVABC"}
    ref_h, ref_e = oracles.gatedgcn(nb, h, edge_keyed(batch, e), p["U"], p["V"], p["A"], p["B"], p["C"],
                                    (layer.bn_h.gamma.data, layer.bn_h.beta.data),
                                    (layer.bn_e.gamma.data, layer.bn_e.beta.data), gate=keyed)
    got_e = edge_keyed(batch, out_e.data)
    e_err = max((np.abs(got_e[k] - ref_e[k]).max() for k in ref_e), default=0.0)
    return out_h.data, ref_h, e_err


def test_oracle_suite(report):
    rng = np.random.default_rng(77)
    layer_err, loss_err = 0.0, 0.0
    for _ in range(100):
        g = random_graph(rng, n_range=(2, 10), dim=4)
        for kind in LayerKind:
            for gated in (False, True):
                res = _layer_vs_oracle(rng, g, kind, gated)
                layer_err = max(layer_err, float(np.abs(res[0] - res[1]).max()), *(res[2:] or [0.0]))
        s = ad.softmax_rows(rng.standard_normal((g.num_nodes, 3)) * 2).data
        if g.num_edges:
            loss_err = max(loss_err, abs(mincut_loss(g, s).data - oracles.mincut(g.adjacency(), s)))
        loss_err = max(loss_err, abs(ortho_loss(s).data - oracles.ortho(s)))
    ok = layer_err <= 1e-10 and loss_err <= 1e-12
    report("oracle suite", ok, f"100 graphs, max layer err {layer_err:.1e}, max loss err {loss_err:.1e}")
    assert layer_err <= 1e-10
    assert loss_err <= 1e-12


# ---------------------------------------------------------------------------
# invariant suite


def _permute(g, perm):
    """Relabel node i as perm[i]."""
    return build_graph(g.num_nodes, perm[g.edges], node_features=g.node_features[np.argsort(perm)])


def test_invariant_suite(report):
    rng = np.random.default_rng(5)
    failures = []

    for _ in range(50):
        g = random_graph(rng, dim=6, n_range=(2, 12))
        batch = GraphBatch([g])
        a = AssignmentNet(6, 3, rng, metric_noise=0.5)(batch, const(g.node_features))
        sums = np.asarray(batch.dst.matrix @ a.gates.data)[batch.degree > 0]
        if not np.allclose(sums, 1.0, atol=1e-9, rtol=0):
            failures.append("gate sums")
        if not np.allclose(a.s.data.sum(1), 1.0, atol=1e-9, rtol=0) or a.s.data.min() < 0:
            failures.append("S row-stochastic")
        beta = edge_keyed(batch, a.beta.data)
        if any(not (0 < b <= 1) or abs(b - beta[(v, u)]) > 1e-12 for (u, v), b in beta.items()):
            failures.append("beta range/symmetry")

    for _ in range(20):
        net = AssignmentNet(4, 5, rng, metric_noise=1.0)
        v = rng.standard_normal((100, 5))
        if np.einsum("ij,jk,ik->i", v, net.metric, v).min() < -1e-12:
            failures.append("M PSD")

    for _ in range(1000):
        g = random_graph(rng, n_range=(2, 12), allow_isolated=False)
        s = ad.softmax_rows(rng.standard_normal((g.num_nodes, int(rng.integers(2, 5)))) * rng.uniform(0.1, 10))
        lc = mincut_loss(g, s).data
        if not (-1 - 1e-12 <= lc <= 1e-12) or ortho_loss(s).data < 0:
            failures.append("loss ranges")
            break

    cliques = build_graph(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], node_features=np.zeros((6, 1)))
    if abs(mincut_loss(cliques, np.eye(2)[[0, 0, 0, 1, 1, 1]]).data + 1) > 1e-9:
        failures.append("two cliques -> -1")
    bip = build_graph(4, [(0, 2), (0, 3), (1, 2), (1, 3)], node_features=np.zeros((4, 1)))
    if mincut_loss(bip, np.eye(2)[[0, 0, 1, 1]]).data != 0.0:
        failures.append("fully cut -> 0")
    if abs(ortho_loss(np.eye(2)[[0, 1, 0, 1]]).data) > 1e-12:
        failures.append("balanced one-hot ortho")

    for kind in LayerKind:
        for gated in (False, True):
            for _ in range(5):
                g = random_graph(rng, dim=8, n_range=(3, 10))
                perm = rng.permutation(g.num_nodes)
                inv = np.argsort(perm)
                pg = _permute(g, perm)
                b, pb = GraphBatch([g]), GraphBatch([pg])
                layer = make_layer(kind, 8, rng, heads=2)
                e = rng.standard_normal((b.num_directed, 8))
                gates = rng.uniform(0.1, 1.0, b.num_directed) if gated else None

                def carry(values):
                    keyed = edge_keyed(b, values)
                    return np.array([keyed[(int(inv[u]), int(inv[v]))]
                                     for u, v in zip(pb.src_index, pb.dst_index)])

                pe = carry(e).reshape(-1, 8)
                pgates = carry(gates) if gated else None
                if isinstance(layer, GatedGCNLayer):
                    out = layer(b, const(g.node_features), const(e), gates=gates)[0].data
                    pout = layer(pb, const(pg.node_features), const(pe), gates=pgates)[0].data
                else:
                    out = layer(b, const(g.node_features), gates=gates).data
                    pout = layer(pb, const(pg.node_features), gates=pgates).data
                if not np.allclose(pout[perm], out, atol=1e-12, rtol=0):
                    failures.append(f"equivariance {kind.value}")

    for _ in range(20):
        g = random_graph(rng, n=9)
        h = rng.standard_normal((9, 3))
        perm = rng.permutation(9)
        if not np.allclose(mean_readout(g, h).data, mean_readout(g, h[perm]).data, atol=1e-12, rtol=0):
            failures.append("readout invariance")

    report("invariant suite", not failures, "all hold" if not failures else ", ".join(sorted(set(failures))))
    assert not failures


# ---------------------------------------------------------------------------
# degenerate-gate equivalence


def test_degenerate_gate_equivalence(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        g = random_graph(rng, dim=6, n_range=(2, 12))
        batch = GraphBatch([g])
        h = np.tile(rng.standard_normal(6), (g.num_nodes, 1))
        layer = GCNLayer(6, rng)
        gates = AssignmentNet(6, 4, rng, metric_noise=0.5)(batch, const(h)).gates
        bi = apply_bilateral_gating(layer, batch, const(h), gates).data
        scaled = batch.inv_degree[:, None] * (batch.mean_operator @ h)
        base = np.maximum(scaled @ layer.U.data, 0.0)
        worst = max(worst, float(np.abs(bi - base).max()))
    report("degenerate-gate equivalence", worst <= 1e-10, f"max abs diff {worst:.1e} over 50 graphs")
    assert worst <= 1e-10


# ---------------------------------------------------------------------------
# layer-wise information gain study


FIG2_SEEDS = [1, 2, 3, 4]


@pytest.mark.slow
def test_information_gain_study(report, tmp_path):
    start = time.perf_counter()
    graphs = generate_sbm(SbmSpec(num_graphs=1200, nodes_per_graph=(60, 60), num_communities=6,
                                  p_in=0.5, p_out=0.05, corruption=0.8), seed=0)
    splits = split(graphs, [1000, 100, 100])
    tc = TrainConfig()
    results = {}
    for scheme in ("none", "boosting"):
        cfg = ModelConfig(layer_kind="gcn", depth=16, hidden=32, scheme=scheme, num_classes=6, in_dim=6)
        summary, records, states = run_benchmark(cfg, tc, splits, seeds=FIG2_SEEDS,
                                                 out_path=tmp_path / f"{scheme}.jsonl", return_states=True)
        ig = []
        for rec, state in zip(records, states):
            model = build_model(cfg, rec.seed)
            model.load_state_dict(state)
            ig.append(info_gain_samples(model, splits[2]))
        results[scheme] = (summary, records, np.concatenate(ig, axis=0))
    elapsed = time.perf_counter() - start

    base_sum, _, base_ig = results["none"]
    bi_sum, _, bi_ig = results["boosting"]
    # message-passing layers 1..16; the encoder output (index 0) is not compared
    comps = layerwise_compare(bi_ig[:, 1:], base_ig[:, 1:])
    deep = [c for c in comps if c.layer + 1 >= 4]
    higher = [c for c in deep if c.mean_a > c.mean_b]
    significant = [c for c in comps if c.mean_a > c.mean_b and c.p_value < 0.05]
    acc_ok = bi_sum["test_mean"] >= base_sum["test_mean"]
    ig_ok = len(higher) > len(deep) / 2 and bool(significant)
    time_ok = elapsed <= 3600

    summary = {
        "gcn_acc": [base_sum["test_mean"], base_sum["test_std"]],
        "bi_gcn_acc": [bi_sum["test_mean"], bi_sum["test_std"]],
        "epochs": [base_sum["epochs_mean"], bi_sum["epochs_mean"]],
        "layers": [{"layer": c.layer + 1, "bi": c.mean_a, "gcn": c.mean_b, "p": c.p_value} for c in comps],
        "elapsed_s": elapsed,
    }
    with_details = json.dumps(summary)
    report("information-gain study: accuracy", acc_ok,
           f"bi-GCN {bi_sum['test_mean']:.2f}±{bi_sum['test_std']:.2f} vs GCN "
           f"{base_sum['test_mean']:.2f}±{base_sum['test_std']:.2f}")
    report("information-gain study: IG profile", ig_ok,
           f"bi higher at {len(higher)}/{len(deep)} of layers 4-16, "
           f"{len(significant)} layers significantly higher")
    report("information-gain study: runtime", time_ok, f"{elapsed / 60:.1f} min")
    with open(tmp_path / "summary.json", "w") as fh:
        fh.write(with_details)
    print(with_details)
    assert acc_ok, with_details
    assert ig_ok, with_details
    assert time_ok


# ---------------------------------------------------------------------------
# configuration smoke


@pytest.mark.slow
def test_configuration_smoke(report):
    start = time.perf_counter()
    spec = SbmSpec(num_graphs=1, nodes_per_graph=(20, 30), num_communities=3, p_in=0.5, p_out=0.1)
    graphs = generate_regression_set(250, spec, 0)
    train_set, val_set = graphs[:200], graphs[200:]
    lines = []
    ok = True
    for scheme in ("boosting", "interleaved", "dense"):
        cfg = ModelConfig(layer_kind="gatedgcn", depth=4, hidden=32, scheme=scheme, task="graph-reg", in_dim=3)
        rec = train(build_model(cfg, 1), train_set, val_set, TrainConfig(max_epochs=200), seed=1)
        first = rec.epochs[0]["val_metric"]
        best = min(e["val_metric"] for e in rec.epochs[1:])
        good = best < first and not rec.diverged
        ok &= good
        lines.append(f"{scheme} {first:.3f}->{best:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 900
    report("configuration smoke", ok, f"val MAE {', '.join(lines)}; {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# determinism


def test_benchmark_determinism(report, tmp_path):
    def cli(*args):
        res = subprocess.run([sys.executable, "-m", "bimp", *args], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        return res

    for name, seed, count in (("train", 1, 12), ("val", 2, 4), ("test", 3, 4)):
        cli("gen-sbm", "--nodes", "20", "30", "--communities", "3", "--p-in", "0.5", "--p-out", "0.05",
            "--seed", str(seed), "--num-graphs", str(count), "--out", str(tmp_path / f"{name}.jsonl"))
    outputs = []
    for run in range(2):
        out = tmp_path / f"bench{run}.jsonl"
        cli("benchmark", "--scheme", "boosting", "--depth", "3", "--hidden", "8", "--max-epochs", "4",
            "--batch-size", "4", "--seeds", "1", "2", "--train", str(tmp_path / "train.jsonl"),
            "--val", str(tmp_path / "val.jsonl"), "--test", str(tmp_path / "test.jsonl"), "--out", str(out))
        outputs.append(out)
    same = filecmp.cmp(outputs[0], outputs[1], shallow=False)
    report("benchmark determinism", same, "two invocations, byte comparison")
    assert same
