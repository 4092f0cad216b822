"""Advantage actor-critic training with knowledge-graph intrinsic motivation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .engine import GameSpec, Observation, reset, step, valid_actions
from .kgstate import EMPTY_GRAPH, KnowledgeGraph, extract_triples, update_graph
from .policy import Decoded, Policy, PolicyConfig, PolicyParams

log = logging.getLogger(__name__)

IM_MODES = ("game_only", "game_and_IM")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, batch: dict | None = None):
        super().__init__(message)
        self.batch = batch or {}


@dataclass
class TrainConfig:
    gamma: float = 0.9
    entropy_coef: float = 0.03
    value_coef: float = 9.0
    template_coef: float = 3.0
    object_coef: float = 9.0
    buffer_size: int = 40
    batch_size: int = 16
    learning_rate: float = 0.003
    grad_clip: float = 40.0
    total_steps: int = 100_000
    num_envs: int | None = None
    im_mode: str = "game_and_IM"
    im_coef: float = 0.1
    max_episode_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 0
    stop_at_score: int | None = None
    flush_on_episode_end: bool = True
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        for name in ("entropy_coef", "value_coef", "template_coef", "object_coef", "im_coef",
                     "learning_rate", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.im_mode not in IM_MODES:
            raise ValueError(f"im_mode must be one of {IM_MODES}, got {self.im_mode!r}")
        if self.buffer_size < 1 or self.batch_size < 1:
            raise ValueError("buffer_size and batch_size must be positive")

    @property
    def envs(self) -> int:
        return self.num_envs or self.batch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        policy = PolicyConfig(**data.pop("policy", {}))
        return cls(policy=policy, **data)


# -- reward pieces ------------------------------------------------------------

def im_reward(kg_global: KnowledgeGraph | frozenset, kg_t: KnowledgeGraph) -> tuple[int, frozenset]:
    """Edges of ``kg_t`` never seen before, and the grown global edge set."""
    seen = kg_global.triples if isinstance(kg_global, KnowledgeGraph) else frozenset(kg_global)
    fresh = kg_t.triples - seen
    return len(fresh), seen | kg_t.triples


def compute_returns(rewards: Sequence[float], values: Sequence[float], gamma: float,
                    bootstrap: float = 0.0, dones: Sequence[bool] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Discounted returns ``R_t = r_t + gamma * R_{t+1}`` and advantages ``R_t - V_t``.

    ``bootstrap`` seeds the recursion past the last step (the critic's value
    for truncated episodes, 0 for terminal ones).  ``dones[t]`` cuts the
    recursion after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    returns = np.zeros_like(rewards)
    running = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones is not None and dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns, returns - values


# -- rollout buffer and loss --------------------------------------------------

@dataclass
class StepBatch:
    """One synchronous step across all environments."""

    template_logp: ad.Tensor      # (B,)
    object_logp: ad.Tensor        # (B,) summed over used slots
    entropy: ad.Tensor            # (B,)
    value: ad.Tensor              # (B,)
    reward: np.ndarray            # (B,)
    done: np.ndarray              # (B,) episode ended after this step
    bootstrap: np.ndarray         # (B,) value of the successor state when truncated


class RolloutBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.steps: list[StepBatch] = []

    def __len__(self):
        return len(self.steps)

    @property
    def full(self) -> bool:
        return len(self.steps) >= self.capacity

    def add(self, item: StepBatch) -> None:
        if self.full:
            raise RuntimeError("rollout buffer overflow; flush before adding")
        self.steps.append(item)

    def clear(self) -> None:
        self.steps = []

    def returns(self, gamma: float, next_value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-environment returns and advantages, shape (T, B)."""
        T, B = len(self.steps), len(next_value)
        rewards = np.stack([s.reward for s in self.steps])
        values = np.stack([s.value.data for s in self.steps])
        dones = np.stack([s.done for s in self.steps])
        boots = np.stack([s.bootstrap for s in self.steps])
        returns = np.zeros((T, B))
        running = np.asarray(next_value, dtype=np.float64).copy()
        for t in range(T - 1, -1, -1):
            running = np.where(dones[t], boots[t], running)
            running = rewards[t] + gamma * running
            returns[t] = running
        return returns, returns - values


@dataclass
class LossParts:
    total: ad.Tensor
    template: float
    object: float
    value: float
    entropy: float


def loss(buffer: RolloutBuffer, config: TrainConfig, next_value: np.ndarray) -> LossParts:
    """``3*template + 9*object + 9*value - 0.03*entropy`` with the configured coefficients.

    Policy terms are advantage-weighted negative log-likelihoods of the
    sampled template and object words, the value term is the mean squared
    error to the discounted returns, and the entropy is taken over the
    valid actions only.
    """
    returns, adv = buffer.returns(config.gamma, next_value)
    n = float(returns.size)
    t_terms, o_terms, v_terms, h_terms = [], [], [], []
    for t, s in enumerate(buffer.steps):
        t_terms.append(ad.sum(ad.mul(s.template_logp, -adv[t])))
        o_terms.append(ad.sum(ad.mul(s.object_logp, -adv[t])))
        v_terms.append(ad.sum(ad.square(ad.sub(s.value, returns[t]))))
        h_terms.append(ad.sum(s.entropy))

    def total(terms):
        acc = terms[0]
        for term in terms[1:]:
            acc = ad.add(acc, term)
        return ad.scale(acc, 1.0 / n)

    tl, ol, vl, hl = total(t_terms), total(o_terms), total(v_terms), total(h_terms)
    loss_value = ad.add(ad.add(ad.scale(tl, config.template_coef), ad.scale(ol, config.object_coef)),
                        ad.sub(ad.scale(vl, config.value_coef), ad.scale(hl, config.entropy_coef)))
    return LossParts(loss_value, tl.item(), ol.item(), vl.item(), hl.item())


class Adam:
    def __init__(self, params: PolicyParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v.data) for k, v in params}
        self.v = {k: np.zeros_like(v.data) for k, v in params}
        self.t = 0

    def step(self, clip: float | None = None) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = clip / norm if clip and norm > clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params:
            g = grads[k] * factor
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None
        return norm


# -- environment bookkeeping --------------------------------------------------

class EpisodeRunner:
    """Parallel environments plus their belief graphs and encoder carries."""

    def __init__(self, spec: GameSpec, n: int, policy: Policy, max_steps: int, seed: int):
        self.spec = spec
        self.n = n
        self.policy = policy
        self.max_steps = max_steps
        self.seed = seed
        self.states = [None] * n
        self.obs: list[Observation] = [None] * n  # type: ignore[list-item]
        self.graphs: list[KnowledgeGraph] = [EMPTY_GRAPH] * n
        self.kg_global: list[frozenset] = [frozenset()] * n
        self.episode_steps = [0] * n
        self.carry = policy.initial_carry(n)
        for i in range(n):
            self.reset(i)

    def reset(self, i: int) -> None:
        state, obs = reset(self.spec, self.seed + i)
        self.states[i], self.obs[i] = state, obs
        graph = update_graph(EMPTY_GRAPH, extract_triples(obs, state.room), 0)
        self.graphs[i] = graph
        self.kg_global[i] = graph.triples
        self.episode_steps[i] = 0
        self.carry[i] = 0.0

    def advance(self, i: int, action: str) -> tuple[int, int, bool, bool]:
        """Step environment ``i``; returns (game reward, IM reward, terminal, truncated)."""
        state, obs, done = step(self.spec, self.states[i], action)
        self.episode_steps[i] += 1
        graph = update_graph(self.graphs[i], extract_triples(obs, state.room), self.episode_steps[i])
        r_im, self.kg_global[i] = im_reward(self.kg_global[i], graph)
        self.states[i], self.obs[i], self.graphs[i] = state, obs, graph
        truncated = not done and self.episode_steps[i] >= self.max_steps
        return obs.reward, r_im, done, truncated


def valid_action_rows(policy: Policy, spec: GameSpec, states, decoded: Decoded) -> np.ndarray:
    """``(env, template, object1, object2)`` rows for every valid action the decoder can emit.

    Actions naming a word outside the step's graph mask are skipped, since
    the decoder could not produce them.
    """
    tindex = {t.id: i for i, t in enumerate(policy.templates)}
    rows = []
    for b, state in enumerate(states):
        for action in sorted(valid_actions(spec, state)):
            inst = spec.grammar.parse(action)
            if not inst:
                continue
            idx = [policy.object_index.get(w, -1) for w in inst.fillers]
            if any(j < 0 or not decoded.object_masks[k][b, j] for k, j in enumerate(idx)):
                continue
            idx += [-1] * (2 - len(idx))
            rows.append((b, tindex[inst.template.id], idx[0], idx[1]))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)


def valid_action_entropy(policy: Policy, v: ad.Tensor, decoded: Decoded, rows: np.ndarray,
                         batch: int) -> ad.Tensor:
    """``-sum p(a) log p(a)`` over each environment's valid actions.

    The sum is not renormalised, so raising it also moves probability from
    invalid actions onto valid ones.
    """
    if rows.size == 0:
        return ad.Tensor(np.zeros(batch))
    logp = policy.action_log_probs(v, decoded, rows)
    return ad.segment_sum(ad.scale(ad.mul(ad.exp(logp), logp), -1.0), rows[:, 0], batch)


@dataclass
class TrainResult:
    policy: Policy
    curve: list[tuple[int, float, int]]
    episode_scores: list[int]
    steps: int
    updates: int
    max_score_seen: int
    reached_step: int | None
    seconds: float

    def checkpoint_bytes(self) -> bytes:
        return save_policy_bytes(self.policy)


def policy_meta(policy: Policy, extra: dict | None = None) -> dict:
    meta = {"game_id": policy.spec.game_id, "policy": dataclasses.asdict(policy.config)}
    meta.update(extra or {})
    return meta


def save_policy(path, policy: Policy, extra: dict | None = None) -> None:
    ad.save_checkpoint(path, policy.params.arrays(), policy_meta(policy, extra))


def save_policy_bytes(policy: Policy, extra: dict | None = None) -> bytes:
    return ad.checkpoint_bytes(policy.params.arrays(), policy_meta(policy, extra))


def load_policy(path, spec: GameSpec) -> Policy:
    arrays, meta = ad.load_checkpoint(path)
    if meta.get("game_id") != spec.game_id:
        raise ValueError(f"checkpoint is for game {meta.get('game_id')!r}, not {spec.game_id!r}")
    return Policy(spec, PolicyConfig(**meta.get("policy", {})), PolicyParams.from_arrays(arrays))


def train(spec: GameSpec, config: TrainConfig, out_dir: str | Path | None = None,
          progress: Callable[[int, float, int], None] | None = None) -> TrainResult:
    """Run A2C on ``spec``; fully reproducible from ``config.seed``."""
    started = time.time()
    rng = np.random.default_rng(config.seed)
    policy = Policy(spec, config.policy, seed=config.seed)
    opt = Adam(policy.params, config.learning_rate)
    runner = EpisodeRunner(spec, config.envs, policy, config.max_episode_steps, config.seed)
    B = config.envs
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    scores: list[int] = []
    recent: deque[int] = deque(maxlen=100)
    curve: list[tuple[int, float, int]] = []
    best = 0
    reached: int | None = None
    steps = updates = 0
    last_ckpt = 0
    buffer = RolloutBuffer(config.buffer_size)
    im_on = config.im_mode == "game_and_IM"

    while steps < config.total_steps:
        with ad.Tape() as tape:
            while not buffer.full and steps < config.total_steps:
                states = list(runner.states)
                trace = policy.forward(runner.obs, runner.graphs, runner.carry, rng, train=True)
                runner.carry = trace.carry
                dec = trace.decoded
                rows = valid_action_rows(policy, spec, states, dec)
                ent = valid_action_entropy(policy, trace.v, dec, rows, B)
                used = (dec.object_index >= 0).astype(np.float64)
                t_lp = ad.pick(dec.template_logp, dec.template_index)
                # unused slots point at an allowed word so their masked log-prob stays finite
                slot_idx = np.where(dec.object_index >= 0, dec.object_index,
                                    np.stack([m.argmax(axis=1) for m in dec.object_masks], axis=1))
                o_lp = ad.add(ad.mul(ad.pick(dec.object_logp[0], slot_idx[:, 0]), used[:, 0]),
                              ad.mul(ad.pick(dec.object_logp[1], slot_idx[:, 1]), used[:, 1]))
                rewards = np.zeros(B)
                dones = np.zeros(B, dtype=bool)
                boots = np.zeros(B)
                truncated_obs = []
                for b in range(B):
                    r_game, r_im, terminal, truncated = runner.advance(b, dec.actions[b])
                    rewards[b] = r_game + (config.im_coef * r_im if im_on else 0.0)
                    if terminal or truncated:
                        dones[b] = True
                        score = runner.states[b].score
                        scores.append(score)
                        recent.append(score)
                        best = max(best, score)
                        if truncated:
                            truncated_obs.append(b)
                if truncated_obs:
                    # successor value for time-limit cuts, taken before the reset
                    with _paused():
                        tv = policy.forward([runner.obs[b] for b in truncated_obs],
                                            [runner.graphs[b] for b in truncated_obs],
                                            runner.carry[truncated_obs], rng, decode=False)
                    boots[truncated_obs] = tv.value.data
                for b in np.flatnonzero(dones):
                    runner.reset(b)
                buffer.add(StepBatch(t_lp, o_lp, ent, trace.value, rewards, dones, boots))
                steps += B
                if reached is None and config.stop_at_score is not None and best >= config.stop_at_score:
                    reached = steps
                    break
                if config.flush_on_episode_end and dones.any():
                    break
            with _paused():
                nv = policy.forward(runner.obs, runner.graphs, runner.carry, rng, decode=False).value.data
            parts = loss(buffer, config, nv)
        if not np.isfinite(parts.total.item()):
            batch = {"rewards": np.stack([s.reward for s in buffer.steps]).tolist(),
                     "values": np.stack([s.value.data for s in buffer.steps]).tolist(),
                     "loss": [parts.template, parts.object, parts.value, parts.entropy]}
            if out:
                (out / "divergence.json").write_text(json.dumps(batch, default=float))
            raise DivergenceError(f"non-finite loss at step {steps}", batch)
        tape.backward(parts.total)
        gnorm = opt.step(config.grad_clip)
        log.debug("update %d: loss parts t=%.4f o=%.4f v=%.4f h=%.4f grad=%.2f", updates, parts.template, parts.object, parts.value, parts.entropy, gnorm)
        updates += 1
        buffer.clear()
        mean100 = float(np.mean(recent)) if recent else 0.0
        curve.append((steps, mean100, best))
        if progress:
            progress(steps, mean100, best)
        if out and config.checkpoint_every and steps - last_ckpt >= config.checkpoint_every:
            save_policy(out / f"checkpoint_{steps:08d}.ckpt", policy)
            last_ckpt = steps
        if reached is not None:
            break

    if reached is None and config.stop_at_score is not None and best >= config.stop_at_score:
        reached = steps
    result = TrainResult(policy, curve, scores, steps, updates, best, reached, time.time() - started)
    if out:
        save_policy(out / "final.ckpt", policy)
        write_curve(out / "curve.csv", curve)
    return result


class _paused:
    """Temporarily suspend tape recording (successor values are targets, not graph nodes)."""

    def __enter__(self):
        self.saved = list(ad._TAPES)
        ad._TAPES.clear()

    def __exit__(self, *exc):
        ad._TAPES.extend(self.saved)


def write_curve(path, curve: Sequence[tuple[int, float, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "episode_score_mean100", "max_score_seen"])
        for s, m, b in curve:
            writer.writerow([s, repr(float(m)), b])
