"""Hierarchical knowledge-graph attention policy and its step-level explanations.

All forward passes are batched over environments: a batch holds one
observation, belief graph and recurrent carry per environment.  Graphs of
different sizes are laid out as a disjoint union and normalised per
environment with segment operations.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .engine import DIRECTIONS, GameSpec, Observation
from .grammar import ActionTemplate, canonicalize
from .kgstate import CATEGORIES, PLAYER, KnowledgeGraph, SubGraphs, Triple, partition, triple_to_text

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
_TOKEN = re.compile(r"[a-z0-9']+")
EXTRA_TOKENS = (PLAYER, "interactable", "open", "has", "is", "in")


@dataclass(frozen=True)
class PolicyConfig:
    d_text: int = 100
    d_emb: int = 50
    d_sub: int = 25
    heads: int = 4
    components: int = 4
    max_tokens: int = 40
    graph_dropout: float = 0.2
    mask_dropout: float = 0.1
    leaky_slope: float = 0.2


class TokenVocab:
    def __init__(self, words: Sequence[str]):
        self.words = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def ids(self, text: str, limit: int | None = None) -> list[int]:
        toks = _TOKEN.findall(text.lower())
        if limit is not None:
            toks = toks[:limit]
        return [self.index.get(t, 1) for t in toks]

    def id(self, word: str) -> int:
        return self.index.get(word, 1)

    @classmethod
    def for_game(cls, spec: GameSpec) -> "TokenVocab":
        words = set(EXTRA_TOKENS) | set(DIRECTIONS) | set(spec.vocabulary) | set(spec.rooms)
        for text in spec.text_corpus():
            words.update(_TOKEN.findall(text.lower()))
        return cls(sorted(words))


# -- parameters ---------------------------------------------------------------

BLOCKS = ("embedding", "encoder", "graph", "lstm_attention", "subgraph", "hierarchical",
          "template_decoder", "object_decoder", "critic")


def _block_of(name: str) -> str:
    head = name.split(".")[0]
    return {
        "embedding": "embedding", "enc": "encoder", "gat_full": "graph", "W_graph": "graph",
        "b_graph": "graph", "W_o": "lstm_attention", "W_g": "lstm_attention",
        "b_g": "lstm_attention", "W_l": "lstm_attention", "b_l": "lstm_attention",
        "W_qproj": "hierarchical", "b_qproj": "hierarchical", "W_gp": "hierarchical",
        "W_q": "hierarchical", "b_q": "hierarchical", "W_H": "hierarchical", "b_H": "hierarchical",
        "tdec": "template_decoder", "W_tmpl": "template_decoder", "b_tmpl": "template_decoder",
        "tmpl_emb": "object_decoder", "odec": "object_decoder", "W_obj": "object_decoder",
        "b_obj": "object_decoder", "W_v": "critic", "b_v": "critic",
    }.get(head, "subgraph" if head.startswith("gat_") else head)


class PolicyParams:
    """Named parameter table; one entry per learnable tensor."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def blocks(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.names():
            out.setdefault(_block_of(name), []).append(name)
        return out

    def gru(self, prefix: str) -> dict[str, Tensor]:
        return {k: self.tensors[f"{prefix}.{k}"] for k in ("W_ih", "W_hh", "b_ih", "b_hh")}

    def gat(self, prefix: str, heads: int, slope: float) -> ad.GatLayerParams:
        t = self.tensors
        return ad.GatLayerParams(t[f"{prefix}.weight"], t[f"{prefix}.att_src"], t[f"{prefix}.att_dst"],
                                 heads, slope)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: ad.parameter(v.data.copy(), k) for k, v in self.tensors.items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "PolicyParams":
        return cls({k: ad.parameter(np.array(v, dtype=np.float64), k) for k, v in arrays.items()})

    @classmethod
    def init(cls, cfg: PolicyConfig, n_tokens: int, n_templates: int, n_objects: int,
             seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        t: dict[str, Tensor] = {}

        def dense(name, out_dim, in_dim):
            bound = 1.0 / np.sqrt(in_dim)
            t[name] = ad.parameter(rng.uniform(-bound, bound, (out_dim, in_dim)), name)

        def bias(name, dim):
            t[name] = ad.parameter(np.zeros(dim), name)

        def gru(prefix, d_in, hidden):
            for k, v in ad.gru_params(d_in, hidden, rng, prefix).items():
                t[f"{prefix}.{k}"] = v

        def gat(prefix):
            layer = ad.GatLayerParams.init(cfg.d_emb, cfg.d_sub, cfg.heads, rng, prefix, cfg.leaky_slope)
            for k, v in layer.tensors().items():
                t[f"{prefix}.{k}"] = v

        t["embedding"] = ad.parameter(rng.normal(0, 0.3, (n_tokens, cfg.d_emb)), "embedding")
        gru("enc", cfg.d_emb, cfg.d_text)
        gat("gat_full")
        dense("W_graph", cfg.d_text, cfg.d_sub)
        bias("b_graph", cfg.d_text)
        dense("W_o", cfg.d_text, cfg.d_text)
        dense("W_g", cfg.d_text, cfg.d_text)
        bias("b_g", cfg.d_text)
        dense("W_l", cfg.d_text, cfg.d_text)
        bias("b_l", cfg.d_text)
        for cat in CATEGORIES:
            gat(f"gat_{cat}")
        dense("W_qproj", cfg.d_sub, cfg.d_text)
        bias("b_qproj", cfg.d_sub)
        dense("W_gp", cfg.d_sub, cfg.d_sub)
        dense("W_q", cfg.d_sub, cfg.d_sub)
        bias("b_q", cfg.d_sub)
        dense("W_H", cfg.heads, cfg.d_sub)
        bias("b_H", cfg.heads)
        gru("tdec", cfg.d_sub, cfg.d_text)
        dense("W_tmpl", n_templates, cfg.d_text)
        bias("b_tmpl", n_templates)
        t["tmpl_emb"] = ad.parameter(rng.normal(0, 0.3, (n_templates, cfg.d_emb)), "tmpl_emb")
        gru("odec", cfg.d_sub + cfg.d_emb, cfg.d_text)
        dense("W_obj", n_objects, cfg.d_text)
        bias("b_obj", n_objects)
        dense("W_v", 1, cfg.d_sub)
        bias("b_v", 1)
        return cls(t)


# -- traces -------------------------------------------------------------------

@dataclass
class SubgraphAttention:
    """Attention record for one sub-graph of one environment."""

    category: str
    nodes: list[str]
    alpha: np.ndarray         # (n_nodes, heads)
    alpha_sum: np.ndarray     # (n_nodes,) channel sum

    @property
    def empty(self) -> bool:
        return not self.nodes


@dataclass
class EnvTrace:
    o: np.ndarray             # (d_text, c)
    g: np.ndarray             # (d_text,)
    h_lstm: np.ndarray        # (d_text, c)
    alpha_lstm: np.ndarray    # (d_text, c); each row sums to one over the c components
    q: np.ndarray             # (d_sub,)
    subgraph_embeddings: dict[str, np.ndarray]
    h_hier: dict[str, np.ndarray]
    attention: dict[str, SubgraphAttention]
    v: np.ndarray
    template_probs: np.ndarray
    object_probs: list[np.ndarray]
    value: float


@dataclass
class Decoded:
    template_index: np.ndarray            # (B,)
    object_index: np.ndarray              # (B, 2); -1 where the slot is unused
    actions: list[str]
    template_logits: Tensor
    template_logp: Tensor                 # (B, T)
    object_logits: list[Tensor]           # per slot (B, V)
    object_logp: list[Tensor]
    object_masks: list[np.ndarray]        # allowed words per slot
    template_hidden: Tensor | None = None  # decoder state after the template step


@dataclass
class ForwardTrace:
    o: Tensor
    g: Tensor
    h_lstm: Tensor
    alpha_lstm: Tensor
    q_raw: Tensor
    q: Tensor
    v: Tensor
    value: Tensor
    carry: np.ndarray
    subgraph_embeddings: dict[str, Tensor]
    h_hier: dict[str, Tensor]
    alpha_hier: dict[str, Tensor]
    segments: dict[str, np.ndarray]
    nodes: list[dict[str, list[str]]]
    decoded: Decoded | None = None

    @property
    def batch(self) -> int:
        return self.o.shape[0]

    def attention(self, b: int) -> dict[str, SubgraphAttention]:
        out = {}
        for cat in CATEGORIES:
            rows = np.flatnonzero(self.segments[cat] == b)
            alpha = self.alpha_hier[cat].data[rows] if rows.size else np.zeros((0, self.alpha_hier[cat].shape[1]))
            out[cat] = SubgraphAttention(cat, list(self.nodes[b][cat]), alpha, alpha.sum(axis=1))
        return out

    def env(self, b: int) -> EnvTrace:
        sub_emb, h_h = {}, {}
        for cat in CATEGORIES:
            rows = self.segments[cat] == b
            sub_emb[cat] = self.subgraph_embeddings[cat].data[rows]
            h_h[cat] = self.h_hier[cat].data[rows]
        d = self.decoded
        return EnvTrace(
            o=self.o.data[b].T, g=self.g.data[b], h_lstm=self.h_lstm.data[b].T,
            alpha_lstm=self.alpha_lstm.data[b].T, q=self.q.data[b],
            subgraph_embeddings=sub_emb, h_hier=h_h, attention=self.attention(b), v=self.v.data[b],
            template_probs=np.exp(d.template_logp.data[b]) if d else np.zeros(0),
            object_probs=[np.exp(lp.data[b]) for lp in d.object_logp] if d else [],
            value=float(self.value.data[b]))


# -- the network --------------------------------------------------------------

def _graph_layout(graphs: Sequence[KnowledgeGraph], vocab: TokenVocab):
    """Disjoint-union node ids, bidirectional edges and per-node environment index."""
    token_ids, segments, edges, names = [], [], [], []
    offset = 0
    for b, g in enumerate(graphs):
        nodes = g.nodes()
        local = {n: i for i, n in enumerate(nodes)}
        names.append(nodes)
        token_ids.extend(vocab.id(n) for n in nodes)
        segments.extend([b] * len(nodes))
        for t in sorted(g.triples):
            s, o = offset + local[t.subject], offset + local[t.object]
            if s != o:
                edges.append((s, o))
                edges.append((o, s))
        offset += len(nodes)
    return (np.asarray(token_ids, dtype=np.int64), np.asarray(segments, dtype=np.int64),
            np.asarray(edges, dtype=np.int64).reshape(-1, 2), names)


class Policy:
    """Observation encoder, graph encoders, two attention stages, decoder and critic."""

    def __init__(self, spec: GameSpec, config: PolicyConfig = PolicyConfig(),
                 params: PolicyParams | None = None, seed: int = 0):
        self.spec = spec
        self.config = config
        self.vocab = TokenVocab.for_game(spec)
        self.templates: tuple[ActionTemplate, ...] = spec.templates
        self.object_words: list[str] = sorted(spec.vocabulary)
        self.object_index = {w: i for i, w in enumerate(self.object_words)}
        self.always_valid = np.array([w in DIRECTIONS for w in self.object_words])
        self.params = params or PolicyParams.init(config, len(self.vocab), len(self.templates),
                                                  len(self.object_words), seed)

    # construction helpers
    def zeroed(self) -> "Policy":
        arrays = {k: np.zeros_like(v) for k, v in self.params.arrays().items()}
        return Policy(self.spec, self.config, PolicyParams.from_arrays(arrays))

    def initial_carry(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.config.components, self.config.d_text))

    # -- stage 1: text ------------------------------------------------------
    def encode_observation(self, observations: Sequence[Observation], carry: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """GRU-encode the four text components; returns ``o`` (B, c, d_text) and the new carry."""
        cfg = self.config
        B, c = len(observations), cfg.components
        seqs = [self.vocab.ids(text, cfg.max_tokens) for obs in observations for text in obs.components()]
        L = max((len(s) for s in seqs), default=0)
        ids = np.zeros((L, B * c), dtype=np.int64)
        for j, s in enumerate(seqs):
            ids[:len(s), j] = s
        h: Tensor = Tensor(np.asarray(carry, dtype=np.float64).reshape(B * c, cfg.d_text))
        if L:
            x = ad.reshape(ad.embed(self.params["embedding"], ids.reshape(-1)), (L, B * c, cfg.d_emb))
            h = ad.gru_sequence(self.params.gru("enc"), x, h, [len(s) for s in seqs])
        o = ad.reshape(h, (B, c, cfg.d_text))
        return o, o.data.copy()

    # -- stage 2: full graph --------------------------------------------------
    def encode_graph(self, graphs: Sequence[KnowledgeGraph], train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        B = len(graphs)
        ids, seg, edges, _ = _graph_layout(graphs, self.vocab)
        if ids.size == 0:
            pooled = Tensor(np.zeros((B, self.config.d_sub)))
        else:
            x = ad.embed(self.params["embedding"], ids)
            gat = self.params.gat("gat_full", self.config.heads, self.config.leaky_slope)
            nodes, _ = ad.gat_forward(x, edges, gat, self.config.graph_dropout if train else 0.0, rng)
            counts = np.bincount(seg, minlength=B).astype(np.float64)
            inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
            pooled = ad.mul(ad.segment_sum(nodes, seg, B), inv)
        return ad.linear(self.params["W_graph"], self.params["b_graph"], pooled)

    # -- stage 3: LSTM attention (text x graph) -------------------------------
    def fuse_text_graph(self, o: Tensor, g: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(alpha_lstm, q_raw, h_lstm)``; attention normalised over the c components."""
        P = self.params
        if o.data.ndim != 3 or g.data.ndim != 2 or o.shape[2] != g.shape[1] or o.shape[0] != g.shape[0]:
            raise ad.ShapeMismatch("fuse_text_graph", o.shape, g.shape)
        B, c, d = o.shape
        text = ad.linear(P["W_o"], None, o)                                  # (B, c, d)
        graph = ad.reshape(ad.linear(P["W_g"], P["b_g"], g), (B, 1, d))
        h_lstm = ad.tanh(ad.add(text, graph))
        alpha = ad.softmax(ad.linear(P["W_l"], P["b_l"], h_lstm), axis=1)   # over components
        q_raw = ad.add(g, ad.sum(ad.mul(alpha, o), axis=1))
        return alpha, q_raw, h_lstm

    def project_query(self, q_raw: Tensor) -> Tensor:
        return ad.linear(self.params["W_qproj"], self.params["b_qproj"], q_raw)

    # -- stage 4: hierarchical graph attention --------------------------------
    def hierarchical_attend(self, q: Tensor, subgraphs: Sequence[SubGraphs], train: bool = False,
                            rng: np.random.Generator | None = None):
        """Per-sub-graph attention pooled into ``v = q + sum_i u_i``.

        Returns ``(v, alpha, embeddings, h_hier, segments, nodes)`` where the
        dicts are keyed by sub-graph category and hold all environments' nodes
        stacked along axis 0.
        """
        P, cfg = self.params, self.config
        B = len(subgraphs)
        qq = ad.linear(P["W_q"], P["b_q"], q)                                  # (B, d_sub)
        v = q
        alphas, embs, hs, segs = {}, {}, {}, {}
        nodes: list[dict[str, list[str]]] = [dict() for _ in range(B)]
        for ci, cat in enumerate(CATEGORIES):
            graphs = [sg.views()[ci] for sg in subgraphs]
            ids, seg, edges, names = _graph_layout(graphs, self.vocab)
            for b in range(B):
                nodes[b][cat] = names[b]
            segs[cat] = seg
            if ids.size == 0:
                alphas[cat] = Tensor(np.zeros((0, cfg.heads)))
                embs[cat] = Tensor(np.zeros((0, cfg.d_sub)))
                hs[cat] = Tensor(np.zeros((0, cfg.d_sub)))
                continue
            x = ad.embed(P["embedding"], ids)
            gat = P.gat(f"gat_{cat}", cfg.heads, cfg.leaky_slope)
            emb, _ = ad.gat_forward(x, edges, gat, cfg.graph_dropout if train else 0.0, rng)
            h = ad.tanh(ad.add(ad.linear(P["W_gp"], None, emb), ad.gather_rows(qq, seg)))
            alpha = ad.segment_softmax(ad.linear(P["W_H"], P["b_H"], h), seg, B)    # (n, heads)
            weight = ad.scale(ad.sum(alpha, axis=1, keepdims=True), 1.0 / cfg.heads)
            u = ad.segment_sum(ad.mul(emb, weight), seg, B)
            v = ad.add(v, u)
            alphas[cat], embs[cat], hs[cat] = alpha, emb, h
        return v, alphas, embs, hs, segs, nodes

    # -- critic and decoder ---------------------------------------------------
    def critic_value(self, v: Tensor) -> Tensor:
        return ad.reshape(ad.linear(self.params["W_v"], self.params["b_v"], v), (-1,))

    def object_mask(self, graphs: Sequence[KnowledgeGraph], train: bool = False,
                    rng: np.random.Generator | None = None) -> np.ndarray:
        """Allowed decoder words: graph entities plus the always-valid directions."""
        mask = np.zeros((len(graphs), len(self.object_words)), dtype=bool)
        for b, g in enumerate(graphs):
            for ent in g.entities:
                j = self.object_index.get(ent)
                if j is not None:
                    mask[b, j] = True
        if train and self.config.mask_dropout > 0 and rng is not None:
            mask &= rng.random(mask.shape) >= self.config.mask_dropout
        mask |= self.always_valid[None, :]
        empty = ~mask.any(axis=1)
        if empty.any():
            log.warning("no valid object word for %d environment(s); using the unmasked distribution",
                        int(empty.sum()))
            mask[empty] = True
        return mask

    def decode_action(self, v: Tensor, graphs: Sequence[KnowledgeGraph], rng: np.random.Generator,
                      train: bool = False, greedy: bool = False,
                      forced: Sequence[tuple[int, Sequence[int]]] | None = None) -> Decoded:
        """Template GRU step, then up to two object GRU steps under the graph mask."""
        P, cfg = self.params, self.config
        B = v.shape[0]
        h0 = Tensor(np.zeros((B, cfg.d_text)))
        h_t = ad.gru_step(P.gru("tdec"), v, h0)
        t_logits = ad.linear(P["W_tmpl"], P["b_tmpl"], h_t)
        t_logp = ad.log_softmax(t_logits, axis=-1)
        tmpl = self._choose(t_logp.data, rng, greedy, None if forced is None else [f[0] for f in forced])
        mask = self.object_mask(graphs, train, rng)
        obj_idx = np.full((B, 2), -1, dtype=np.int64)
        o_logits, o_logp, o_masks = [], [], []
        prev_in = ad.embed(P["tmpl_emb"], tmpl)
        h = h_t
        blanks = np.array([self.templates[i].blanks for i in tmpl])
        for slot in range(2):
            h = ad.gru_step(P.gru("odec"), ad.concat([v, prev_in], axis=-1), h)
            logits = ad.linear(P["W_obj"], P["b_obj"], h)
            logp = ad.masked_log_softmax(logits, mask)
            want = None
            if forced is not None:
                want = [f[1][slot] if len(f[1]) > slot else 0 for f in forced]
            choice = self._choose(logp.data, rng, greedy, want)
            used = blanks > slot
            obj_idx[used, slot] = choice[used]
            o_logits.append(logits)
            o_logp.append(logp)
            o_masks.append(mask)
            word_ids = np.array([self.vocab.id(self.object_words[j]) for j in choice])
            prev_in = ad.embed(P["embedding"], word_ids)
        actions = [self.action_text(tmpl[b], obj_idx[b]) for b in range(B)]
        return Decoded(tmpl, obj_idx, actions, t_logits, t_logp, o_logits, o_logp, o_masks, h_t)

    def action_log_probs(self, v: Tensor, decoded: Decoded, rows: np.ndarray) -> Tensor:
        """Teacher-forced log-probability of arbitrary actions.

        ``rows`` has columns ``(env, template, object1, object2)`` with -1 for
        unused slots.  Object terms use the same masks as ``decoded``.
        """
        P = self.params
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        env, tmpl, o1, o2 = rows.T
        logp = ad.pick(ad.gather_rows(decoded.template_logp, env), tmpl)
        blanks = np.array([self.templates[i].blanks for i in tmpl])
        if not (blanks > 0).any():
            return logp
        vv = ad.gather_rows(v, env)
        h = ad.gru_step(P.gru("odec"), ad.concat([vv, ad.embed(P["tmpl_emb"], tmpl)], axis=-1),
                        ad.gather_rows(decoded.template_hidden, env))
        prev = np.maximum(o1, 0)
        for slot, idx in ((0, o1), (1, o2)):
            used = blanks > slot
            if not used.any():
                break
            if slot == 1:
                word_ids = np.array([self.vocab.id(self.object_words[j]) for j in prev])
                h = ad.gru_step(P.gru("odec"), ad.concat([vv, ad.embed(P["embedding"], word_ids)], axis=-1), h)
            slot_lp = ad.masked_log_softmax(ad.linear(P["W_obj"], P["b_obj"], h), decoded.object_masks[slot][env])
            safe = np.where(used, idx, decoded.object_masks[slot][env].argmax(axis=1))
            logp = ad.add(logp, ad.mul(ad.pick(slot_lp, safe), used.astype(np.float64)))
        return logp

    @staticmethod
    def _choose(logp: np.ndarray, rng: np.random.Generator, greedy: bool, forced) -> np.ndarray:
        if forced is not None:
            return np.asarray(forced, dtype=np.int64)
        if greedy:
            return logp.argmax(axis=-1)
        p = np.exp(logp - logp.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(p.shape[0])[:, None]
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        # guard against round-off landing on a zero-probability tail entry
        idx = np.minimum(idx, p.shape[1] - 1)
        bad = p[np.arange(len(idx)), idx] == 0
        if bad.any():
            idx[bad] = p[bad].argmax(axis=-1)
        return idx

    def action_text(self, template_index: int, objects: Sequence[int]) -> str:
        t = self.templates[int(template_index)]
        words = [self.object_words[int(j)] for j in objects[:t.blanks]]
        parts = [t.verb]
        if t.blanks >= 1:
            parts.append(words[0])
        if t.preposition:
            parts.append(t.preposition)
        if t.blanks == 2:
            parts.append(words[1])
        return canonicalize(" ".join(parts))

    # -- full pass ------------------------------------------------------------
    def forward(self, observations: Sequence[Observation], graphs: Sequence[KnowledgeGraph],
                carry: np.ndarray, rng: np.random.Generator, train: bool = False,
                greedy: bool = False, decode: bool = True) -> ForwardTrace:
        o, new_carry = self.encode_observation(observations, carry)
        g = self.encode_graph(graphs, train, rng)
        alpha_lstm, q_raw, h_lstm = self.fuse_text_graph(o, g)
        q = self.project_query(q_raw)
        subgraphs = [partition(gr) for gr in graphs]
        v, alphas, embs, hs, segs, nodes = self.hierarchical_attend(q, subgraphs, train, rng)
        value = self.critic_value(v)
        trace = ForwardTrace(o, g, h_lstm, alpha_lstm, q_raw, q, v, value, new_carry,
                             embs, hs, alphas, segs, nodes)
        if decode:
            trace.decoded = self.decode_action(v, graphs, rng, train, greedy)
        return trace


# -- explanations -------------------------------------------------------------

@dataclass(frozen=True)
class ExplanationItem:
    triple: Triple
    saliency: float
    text: str
    entity: str = ""

    def line(self) -> str:
        t = self.triple
        return f"⟨{t.subject}, {t.relation}, {t.object}⟩ | {self.saliency:.6f} | {self.text}"


def rank_nodes(attention: Mapping[str, SubgraphAttention]) -> list[tuple[float, int, str, str]]:
    """All (|saliency|, sub-graph order, entity, category) nodes, most salient first."""
    ranked = []
    for ci, cat in enumerate(CATEGORIES):
        rec = attention.get(cat)
        if rec is None:
            continue
        for node, score in zip(rec.nodes, rec.alpha_sum):
            ranked.append((abs(float(score)), ci, node, cat))
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    return ranked


def immediate_explanation(attention: Mapping[str, SubgraphAttention], subgraphs: SubGraphs, k: int = 3,
                          valid: set[str] | None = None, plural=None) -> list[ExplanationItem]:
    """Top-``k`` valid entities by channel-summed attention, each with its best triple.

    For a chosen node the incident triple whose other endpoint has the highest
    saliency in the same sub-graph is reported.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    views = dict(zip(CATEGORIES, subgraphs.views()))
    saliency = {cat: dict(zip(rec.nodes, (abs(float(s)) for s in rec.alpha_sum)))
                for cat, rec in attention.items()}
    chosen: list[ExplanationItem] = []
    seen: set[str] = set()
    for score, _, node, cat in rank_nodes(attention):
        if len(chosen) == k:
            break
        if node in seen or (valid is not None and node not in valid):
            continue
        incident = views[cat].entities.get(node, ())
        if not incident:
            continue
        sal = saliency[cat]

        def neighbour_score(t: Triple) -> tuple[float, str]:
            other = t.object if t.subject == node else t.subject
            return (-sal.get(other, 0.0), triple_to_text(t, plural))

        best = min(incident, key=neighbour_score)
        seen.add(node)
        chosen.append(ExplanationItem(best, score, triple_to_text(best, plural), node))
    return chosen
