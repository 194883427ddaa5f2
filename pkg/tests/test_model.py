import numpy as np
import pytest
import torch

from hgnid.graphs import HeteroGraph
from hgnid.model import (
    HeteroGATClassifier,
    Normalizer,
    SchemaMismatch,
    _edge_softmax,
    collate,
    global_mean_pool,
    graph_tensors,
)


def random_graph(rng, n=None, label="Benign"):
    n = n or int(rng.randint(1, 8))
    return HeteroGraph(
        flow_features=rng.randn(92),
        packet_payloads=rng.randint(0, 256, (n, 1500)).astype(np.uint8),
        contain_edge_features=rng.randn(n, 4),
        link_edge_features=rng.randn(n - 1, 1),
        label=label,
        graph_id=f"g{rng.randint(1 << 30)}",
    )


# --- small numeric building blocks ---


def test_edge_softmax_matches_grouped_softmax(rng):
    logits = torch.tensor(rng.randn(10, 3))
    dst = torch.tensor([0, 0, 1, 1, 1, 2, 2, 2, 2, 3])
    alpha = _edge_softmax(logits, dst, 4).numpy()
    for d in range(4):
        mask = dst.numpy() == d
        expected = np.exp(logits.numpy()[mask])
        expected /= expected.sum(axis=0, keepdims=True)
        np.testing.assert_allclose(alpha[mask], expected, rtol=1e-12)
    np.testing.assert_allclose(
        np.add.reduceat(alpha, [0, 2, 5, 9], axis=0), np.ones((4, 3)), rtol=1e-12
    )


def test_edge_softmax_single_edge_is_one():
    alpha = _edge_softmax(torch.tensor([[123.4]]), torch.tensor([0]), 1)
    assert alpha.item() == pytest.approx(1.0)


def test_global_mean_pool_matches_loop(rng):
    x = torch.tensor(rng.randn(9, 5))
    member = torch.tensor([0, 0, 1, 2, 2, 2, 1, 0, 1])
    pooled = global_mean_pool(x, member, 3).numpy()
    for g in range(3):
        np.testing.assert_allclose(
            pooled[g], x.numpy()[member.numpy() == g].mean(axis=0), rtol=1e-12
        )


def test_normalizer_moments(rng):
    graphs = [random_graph(rng) for _ in range(12)]
    norm = Normalizer().fit(graphs)
    flows = np.stack([g.flow_features for g in graphs])
    np.testing.assert_allclose(norm.flow_mean, flows.mean(axis=0), rtol=1e-10)
    np.testing.assert_allclose(norm.flow_std, flows.std(axis=0), rtol=1e-10)
    # constant features get the std floor, not zero
    for g in graphs:
        g.contain_edge_features[:, 3] = 5.0
    norm = Normalizer().fit(graphs)
    assert norm.contain_std[3] == pytest.approx(1e-6)


def test_payloads_scaled_not_standardized(rng):
    g = random_graph(rng, n=3)
    _, packet, _, _ = graph_tensors(g, Normalizer(), torch.float64)
    np.testing.assert_allclose(packet.numpy(), g.packet_payloads / 255.0)


# --- independent numpy forward oracle ---


def leaky(x, s):
    return np.where(x > 0, x, s * x)


def numpy_forward(clf, graph):
    """Re-implements the full network forward pass with plain numpy."""
    cfg = clf._model_config()
    sd = {k: v.numpy() for k, v in clf.model_.state_dict().items()}
    flow, packet, contain, link = (
        t.numpy() for t in graph_tensors(graph, clf.normalizer_, torch.float64)
    )
    n = packet.shape[0]
    h = {
        "flow": flow[None, :] @ sd["proj.flow.weight"].T + sd["proj.flow.bias"],
        "packet": packet @ sd["proj.packet.weight"].T + sd["proj.packet.bias"],
    }
    edges = {
        "contain": ("flow", "packet", np.zeros(n, int), np.arange(n), contain),
        "contained_by": ("packet", "flow", np.arange(n), np.zeros(n, int), contain),
        "link": ("packet", "packet", np.arange(n - 1), np.arange(1, n), link),
        "link_rev": ("packet", "packet", np.arange(1, n), np.arange(n - 1), link),
    }

    def layer(prefix, h, heads):
        agg = {"flow": None, "packet": None}
        for rel, (src_t, dst_t, src, dst, attr) in edges.items():
            if len(src) == 0:
                continue
            p = f"{prefix}.convs.{rel}"
            D = sd[f"{p}.a_src"].shape[1]
            msg = (h[src_t] @ sd[f"{p}.w_src.weight"].T).reshape(-1, heads, D)[src]
            key = (h[dst_t] @ sd[f"{p}.w_dst.weight"].T).reshape(-1, heads, D)[dst]
            edg = (attr @ sd[f"{p}.w_edge.weight"].T).reshape(-1, heads, D)
            logits = leaky(
                (msg * sd[f"{p}.a_src"]).sum(-1)
                + (key * sd[f"{p}.a_dst"]).sum(-1)
                + (edg * sd[f"{p}.a_edge"]).sum(-1),
                cfg.attn_slope,
            )
            num_dst = h[dst_t].shape[0]
            alpha = np.zeros_like(logits)
            for d in range(num_dst):
                m = dst == d
                if m.any():
                    e = np.exp(logits[m] - logits[m].max(axis=0))
                    alpha[m] = e / e.sum(axis=0)
            out = np.zeros((num_dst, heads, D))
            np.add.at(out, dst, (msg + edg) * alpha[..., None])
            out = out.reshape(num_dst, heads * D)
            agg[dst_t] = out if agg[dst_t] is None else agg[dst_t] + out
        result = {}
        for nt in ("flow", "packet"):
            x = agg[nt]
            if x is None:
                x = h[nt] @ sd[f"{prefix}.self_proj.{nt}.weight"].T
            mean = sd[f"{prefix}.norm.{nt}.running_mean"]
            var = sd[f"{prefix}.norm.{nt}.running_var"]
            x = (x - mean) / np.sqrt(var + 1e-5)
            x = x * sd[f"{prefix}.norm.{nt}.weight"] + sd[f"{prefix}.norm.{nt}.bias"]
            result[nt] = leaky(x, cfg.negative_slope) if cfg.activation == "leaky_relu" else np.maximum(x, 0)
        return result

    h = layer("layer1", h, cfg.heads)
    h = layer("layer2", h, 1)
    pooled = np.concatenate([h["flow"], h["packet"]]).mean(axis=0)
    z = pooled
    for i in (0, 2, 4):
        z = z @ sd[f"head.{i}.weight"].T + sd[f"head.{i}.bias"]
        if i < 4:
            z = np.maximum(z, 0)
    return z - np.log(np.exp(z - z.max()).sum()) - z.max()


def test_forward_matches_numpy_oracle(tiny_classifier, rng):
    for n in (1, 2, 6):
        g = random_graph(rng, n=n)
        got = tiny_classifier.predict_log_proba([g])[0]
        want = numpy_forward(tiny_classifier, g)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-10)


# --- output and invariance properties ---


def test_log_softmax_rows_normalize(tiny_classifier, small_graphs):
    probs = tiny_classifier.predict_proba(small_graphs[:10])
    assert probs.shape == (10, len(tiny_classifier.classes_))
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(10), rtol=1e-6)
    assert (probs >= 0).all()


def test_batch_independence(tiny_classifier, small_graphs):
    solo = np.stack([tiny_classifier.predict_log_proba([g])[0] for g in small_graphs[:6]])
    batched = tiny_classifier.predict_log_proba(small_graphs[:6])
    np.testing.assert_allclose(batched, solo, rtol=1e-8, atol=1e-10)


def test_batch_permutation_invariance(tiny_classifier, small_graphs):
    sel = small_graphs[:8]
    fwd = tiny_classifier.predict_log_proba(sel)
    rev = tiny_classifier.predict_log_proba(sel[::-1])
    np.testing.assert_allclose(rev[::-1], fwd, rtol=1e-8, atol=1e-10)


def test_duplicated_graph_gets_identical_outputs(tiny_classifier, small_graphs):
    g = small_graphs[0]
    out = tiny_classifier.predict_log_proba([g, g, g])
    np.testing.assert_allclose(out[1], out[0], rtol=1e-10)
    np.testing.assert_allclose(out[2], out[0], rtol=1e-10)


def test_attention_alphas_sum_to_one_per_destination(tiny_classifier, small_graphs):
    batch = tiny_classifier.make_batch(small_graphs[:4])
    collected = {}
    with torch.no_grad():
        tiny_classifier.model_(batch, collect_alpha=collected)
    for layer in ("layer1", "layer2"):
        for rel, (alpha, dst) in collected[layer].items():
            if alpha.shape[0] == 0:
                continue
            sums = torch.zeros(int(dst.max()) + 1, alpha.shape[1], dtype=alpha.dtype)
            sums.index_add_(0, dst, alpha)
            present = torch.zeros(int(dst.max()) + 1, dtype=torch.bool)
            present[dst] = True
            np.testing.assert_allclose(
                sums[present].numpy(), 1.0, rtol=1e-6,
                err_msg=f"{layer}/{rel}")


def test_single_packet_graph_alpha_is_one(tiny_classifier, rng):
    g = random_graph(rng, n=1)
    batch = tiny_classifier.make_batch([g])
    collected = {}
    with torch.no_grad():
        tiny_classifier.model_(batch, collect_alpha=collected)
    alpha, _ = collected["layer1"]["contain"]
    np.testing.assert_allclose(alpha.numpy(), 1.0, rtol=1e-7)


# --- training behaviour ---


def test_fit_is_seed_deterministic(small_graphs):
    kw = dict(hidden_dim=16, heads=2, head_widths=(16, 8), dtype="float64",
              epochs=3, seed=11)
    a = HeteroGATClassifier(**kw).fit(small_graphs)
    b = HeteroGATClassifier(**kw).fit(small_graphs)
    np.testing.assert_array_equal(
        a.predict_log_proba(small_graphs[:8]), b.predict_log_proba(small_graphs[:8])
    )
    assert a.training_log_ == b.training_log_


def test_single_class_rejected(rng):
    graphs = [random_graph(rng, label="Benign") for _ in range(6)]
    with pytest.raises(ValueError):
        HeteroGATClassifier(epochs=1).fit(graphs)


def test_unlabeled_graph_rejected(rng):
    graphs = [random_graph(rng, label="Benign"), random_graph(rng, label=None)]
    with pytest.raises(ValueError):
        HeteroGATClassifier(epochs=1).fit(graphs)


def test_predict_before_fit_rejected(rng):
    with pytest.raises(RuntimeError):
        HeteroGATClassifier().predict([random_graph(rng)])


def test_get_set_params_roundtrip():
    clf = HeteroGATClassifier(hidden_dim=24, epochs=7)
    params = clf.get_params()
    assert params["hidden_dim"] == 24
    clone = HeteroGATClassifier().set_params(**params)
    assert clone.get_params() == params


def test_training_log_records_epochs(tiny_classifier):
    assert len(tiny_classifier.training_log_) >= 1
    assert {"epoch", "train_loss", "val_macro_f1"} <= set(tiny_classifier.training_log_[0])


# --- gradients vs central finite differences ---


def test_input_gradient_matches_finite_differences(tiny_classifier, rng):
    g = random_graph(rng, n=3)
    target = 1
    grads = tiny_classifier.input_gradient(g, target)
    base = [t.clone() for t in graph_tensors(g, tiny_classifier.normalizer_, torch.float64)]

    def f(tensors):
        with torch.no_grad():
            return tiny_classifier.model_(collate([tuple(tensors)]))[0, target].item()

    h = 1e-5
    checks = [("flow", 0, (4,)), ("flow", 0, (88,)), ("payload", 1, (0, 7)),
              ("payload", 1, (2, 1400)), ("contain", 2, (1, 2)), ("link", 3, (0, 0))]
    for name, pos, coord in checks:
        plus = [t.clone() for t in base]
        minus = [t.clone() for t in base]
        plus[pos][coord] += h
        minus[pos][coord] -= h
        fd = (f(plus) - f(minus)) / (2 * h)
        got = grads[name][coord] if name != "flow" else grads["flow"][coord[0]]
        assert abs(got - fd) < 1e-4 * max(1.0, abs(fd)), (name, coord, got, fd)


def test_gradient_shapes(tiny_classifier, rng):
    g = random_graph(rng, n=4)
    grads = tiny_classifier.input_gradient(g, 0)
    assert grads["flow"].shape == (92,)
    assert grads["payload"].shape == (4, 1500)
    assert grads["contain"].shape == (4, 4)
    assert grads["link"].shape == (3, 1)
    assert all(np.isfinite(v).all() for v in grads.values())


# --- persistence ---


def test_save_load_roundtrip(tmp_path, tiny_classifier, small_graphs):
    path = tmp_path / "model.pt"
    tiny_classifier.save(path)
    restored = HeteroGATClassifier.load(path)
    assert restored.classes_ == tiny_classifier.classes_
    np.testing.assert_array_equal(
        restored.predict_log_proba(small_graphs[:5]),
        tiny_classifier.predict_log_proba(small_graphs[:5]),
    )


def test_load_rejects_wrong_checkpoint_version(tmp_path, tiny_classifier):
    path = tmp_path / "model.pt"
    tiny_classifier.save(path)
    ckpt = torch.load(path, weights_only=False)
    ckpt["checkpoint_version"] = "other"
    torch.save(ckpt, path)
    with pytest.raises(SchemaMismatch):
        HeteroGATClassifier.load(path)
