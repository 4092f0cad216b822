"""Loop-based numpy reference implementations used as test oracles.

Nothing here touches the tape; each function recomputes a network stage
from raw parameter arrays so it can be compared with the vectorised code.
"""

import numpy as np

from hexplain.kgstate import CATEGORIES, partition


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_cell(p, x, h):
    H = h.shape[0]
    xs = x @ p["W_ih"] + p["b_ih"]
    hs = h @ p["W_hh"] + p["b_hh"]
    r = sigmoid(xs[:H] + hs[:H])
    z = sigmoid(xs[H:2 * H] + hs[H:2 * H])
    n = np.tanh(xs[2 * H:] + r * hs[2 * H:])
    return (1 - z) * n + z * h


def gru_params(arrays, prefix):
    return {k: arrays[f"{prefix}.{k}"] for k in ("W_ih", "W_hh", "b_ih", "b_hh")}


def encode_text(policy, arrays, obs, carry):
    """(c, d_text) final GRU states, one component at a time."""
    cfg = policy.config
    enc = gru_params(arrays, "enc")
    out = []
    for i, text in enumerate(obs.components()):
        h = carry[i].copy()
        for tok in policy.vocab.ids(text, cfg.max_tokens):
            h = gru_cell(enc, arrays["embedding"][tok], h)
        out.append(h)
    return np.array(out)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def gat(x, edges, W, a_src, a_dst, slope):
    """Returns (head-mean ELU embeddings, mean received attention per head)."""
    n, m, d = x.shape[0], a_src.shape[0], a_src.shape[1]
    z = (x @ W).reshape(n, m, d)
    incoming = {i: [] for i in range(n)}
    for s, t in edges:
        incoming[t].append(s)
    for i in range(n):
        incoming[i].append(i)
    out = np.zeros((n, m, d))
    received = np.zeros((n, m))
    for i in range(n):
        for h in range(m):
            e = np.array([z[i, h] @ a_dst[h] + z[j, h] @ a_src[h] for j in incoming[i]])
            e = np.where(e > 0, e, slope * e)
            w = np.exp(e - e.max())
            w /= w.sum()
            for wj, j in zip(w, incoming[i]):
                out[i, h] += wj * z[j, h]
                received[j, h] += wj
    counts = np.array([sum(j in incoming[i] for i in range(n)) for j in range(n)])
    return elu(out.mean(axis=1)), received / counts[:, None]


def graph_edges(graph):
    nodes = graph.nodes()
    local = {e: i for i, e in enumerate(nodes)}
    edges = []
    for t in sorted(graph.triples):
        s, o = local[t.subject], local[t.object]
        if s != o:
            edges += [(s, o), (o, s)]
    return nodes, edges


def gat_of(policy, arrays, prefix, graph):
    nodes, edges = graph_edges(graph)
    if not nodes:
        return nodes, (np.zeros((0, policy.config.d_sub)), np.zeros((0, policy.config.heads)))
    x = np.array([arrays["embedding"][policy.vocab.id(e)] for e in nodes]).reshape(len(nodes), -1)
    return nodes, gat(x, edges, arrays[f"{prefix}.weight"], arrays[f"{prefix}.att_src"],
                      arrays[f"{prefix}.att_dst"], policy.config.leaky_slope)


def full_graph_vector(policy, arrays, graph):
    nodes, (emb, _) = gat_of(policy, arrays, "gat_full", graph)
    pooled = emb.mean(axis=0) if nodes else np.zeros(policy.config.d_sub)
    return arrays["W_graph"] @ pooled + arrays["b_graph"]


def fuse(arrays, o, g):
    """Text-graph attention over the c components; ``o`` is (c, d)."""
    h = np.tanh(o @ arrays["W_o"].T + (arrays["W_g"] @ g + arrays["b_g"]))
    logits = h @ arrays["W_l"].T + arrays["b_l"]                # (c, d)
    alpha = np.exp(logits - logits.max(axis=0))
    alpha /= alpha.sum(axis=0)
    return alpha, g + (alpha * o).sum(axis=0)


def hierarchical(policy, arrays, q, graph):
    """Returns (v, {category: (nodes, alpha (n, m))})."""
    qq = arrays["W_q"] @ q + arrays["b_q"]
    v = q.copy()
    records = {}
    for cat, view in zip(CATEGORIES, partition(graph).views()):
        nodes, (emb, _) = gat_of(policy, arrays, f"gat_{cat}", view)
        if not nodes:
            records[cat] = ([], np.zeros((0, policy.config.heads)))
            continue
        h = np.tanh(emb @ arrays["W_gp"].T + qq)
        logits = h @ arrays["W_H"].T + arrays["b_H"]
        alpha = np.exp(logits - logits.max(axis=0))
        alpha /= alpha.sum(axis=0)
        v = v + (emb * alpha.mean(axis=1, keepdims=True)).sum(axis=0)
        records[cat] = (nodes, alpha)
    return v, records


def full_forward(policy, obs, graph, carry):
    arrays = policy.params.arrays()
    o = encode_text(policy, arrays, obs, carry)
    g = full_graph_vector(policy, arrays, graph)
    alpha, q_raw = fuse(arrays, o, g)
    q = arrays["W_qproj"] @ q_raw + arrays["b_qproj"]
    v, records = hierarchical(policy, arrays, q, graph)
    value = float((arrays["W_v"] @ v + arrays["b_v"])[0])
    return {"o": o, "g": g, "alpha_lstm": alpha, "q": q, "v": v, "records": records, "value": value}


def brute_force_top_k(attention, subgraphs, k, valid):
    """(node, |saliency|) of the k most salient valid nodes, by exhaustive sort."""
    views = dict(zip(CATEGORIES, subgraphs.views()))
    candidates = []
    for ci, cat in enumerate(CATEGORIES):
        for node, s in zip(attention[cat].nodes, attention[cat].alpha_sum):
            if node in valid and views[cat].entities.get(node):
                candidates.append((-abs(s), ci, node))
    out = []
    for score, _, node in sorted(candidates):
        if node not in [n for n, _ in out]:
            out.append((node, -score))
    return out[:k]
