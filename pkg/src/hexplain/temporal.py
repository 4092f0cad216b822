"""Temporally extended explanations: Bayes state filter, action-model filter,
semantic filter and report synthesis over a corpus of trajectories."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .engine import GameSpec, reset, step, valid_actions
from .grammar import canonicalize
from .kgstate import Triple, canonical_entity
from .trajstore import StepRecord, Trajectory

DEFAULT_P = 0.5
DEFAULT_TOP_K = 20
DEFAULT_CRITIC_PERCENTILE = 0.9


class UnseenStep(KeyError):
    """Conditioning on a step that never occurs in the corpus."""


class EmptySelection(Exception):
    """No step survived the filters; the explanation is the goal alone."""


# -- step identity and counting -------------------------------------------------

def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True, order=True)
class StepKey:
    digest: str
    action: str

    @classmethod
    def of(cls, rec: StepRecord) -> "StepKey":
        text = _normalize(rec.observation[0]) + "\n" + _normalize(rec.observation[1])
        return cls(hashlib.sha1(text.encode("utf-8")).hexdigest()[:16], canonicalize(rec.action))

    def __str__(self):
        return f"{self.action}@{self.digest}"


def trajectory_keys(traj: Trajectory) -> list[StepKey]:
    return [StepKey.of(rec) for rec in traj.steps]


@dataclass
class BayesStats:
    count_single: Counter = field(default_factory=Counter)
    count_pair_ordered: Counter = field(default_factory=Counter)
    n_trajectories: int = 0

    def merge(self, other: "BayesStats") -> "BayesStats":
        return BayesStats(self.count_single + other.count_single,
                          self.count_pair_ordered + other.count_pair_ordered,
                          self.n_trajectories + other.n_trajectories)


def _stats_one(keys: Sequence[StepKey]) -> BayesStats:
    first: dict[StepKey, int] = {}
    last: dict[StepKey, int] = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)
        last[k] = i
    single = Counter(first.keys())
    pairs = Counter()
    for a, fa in first.items():
        for b, lb in last.items():
            if a != b and fa < lb:
                pairs[(a, b)] += 1
    return BayesStats(single, pairs, 1)


def build_stats(trajectories: Iterable[Trajectory]) -> BayesStats:
    """Per-trajectory deduplicated counts; ``(A, B)`` counts trajectories where A occurs before B."""
    stats = BayesStats()
    for traj in trajectories:
        part = _stats_one(trajectory_keys(traj))
        stats.count_single.update(part.count_single)
        stats.count_pair_ordered.update(part.count_pair_ordered)
        stats.n_trajectories += 1
    return stats


def conditional_prob(stats: BayesStats, a: StepKey, b: StepKey) -> Fraction:
    """``P(A|B) = C(A and B) / C(B)`` as an exact fraction."""
    cb = stats.count_single.get(b, 0)
    if cb == 0:
        raise UnseenStep(b)
    return Fraction(stats.count_pair_ordered.get((a, b), 0), cb)


# -- filter 1: Bayes ------------------------------------------------------------

def bayes_filter(stats: BayesStats, traj: Trajectory, goal_step: int, p: float = DEFAULT_P) -> list[int]:
    """Steps linked to the goal by a chain of ``P(A|B) > p`` with A before B.

    Works backwards from the goal to a fixpoint; returns indices in
    trajectory order (the goal itself excluded).
    """
    if not 0 <= goal_step < len(traj.steps):
        raise IndexError(f"goal step {goal_step} outside trajectory of {len(traj.steps)} steps")
    keys = trajectory_keys(traj)
    selected = {goal_step}
    frontier = [goal_step]
    while frontier:
        b = frontier.pop()
        for a in range(b):
            if a in selected or keys[a] == keys[b]:
                continue
            try:
                prob = conditional_prob(stats, keys[a], keys[b])
            except UnseenStep:
                continue
            if prob > p:
                selected.add(a)
                frontier.append(a)
    selected.discard(goal_step)
    return sorted(selected)


# -- filter 2: action model -----------------------------------------------------

_TITLE = re.compile(r"^\s*([^.]+)\.")


def location_of_text(desc: str) -> str:
    """Room title from a description, or ``dark`` when nothing is visible."""
    if desc.lower().startswith("it is pitch black"):
        return "dark"
    m = _TITLE.match(desc)
    return canonicalize(m.group(1)) if m else ""


def template_of(action: str) -> str:
    words = canonicalize(action).split()
    return words[0] if words else ""


class ActionGenerator(Protocol):
    def top_k(self, o_a: str, a_a: str, o_b: str, k: int) -> list[str]: ...


class ActionModel:
    """Smoothed conditional frequency table standing in for a language model.

    Trained on consecutive steps: the context of step ``t+1`` is the location
    in its observation and the verb of action ``t``.
    """

    def __init__(self, smoothing: float = 1.0):
        if smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        self.smoothing = smoothing
        self.table: dict[tuple[str, str], Counter] = defaultdict(Counter)
        self.global_counts: Counter = Counter()

    @staticmethod
    def context(o_b: str, a_a: str) -> tuple[str, str]:
        return (location_of_text(o_b), template_of(a_a))

    def fit(self, trajectories: Iterable[Trajectory]) -> "ActionModel":
        for traj in trajectories:
            for prev, cur in zip(traj.steps, traj.steps[1:]):
                act = canonicalize(cur.action)
                self.table[self.context(cur.observation[0], prev.action)][act] += 1
                self.global_counts[act] += 1
            if traj.steps:
                self.global_counts[canonicalize(traj.steps[0].action)] += 1
        return self

    def scores(self, o_b: str, a_a: str) -> dict[str, float]:
        total_g = sum(self.global_counts.values())
        if total_g == 0:
            return {}
        counts = self.table.get(self.context(o_b, a_a))
        if not counts:
            return {a: c / total_g for a, c in self.global_counts.items()}
        total = sum(counts.values())
        return {a: (counts.get(a, 0) + self.smoothing * g / total_g) / (total + self.smoothing)
                for a, g in self.global_counts.items()}

    def top_k(self, o_a: str, a_a: str, o_b: str, k: int) -> list[str]:
        ranked = sorted(self.scores(o_b, a_a).items(), key=lambda kv: (-kv[1], kv[0]))
        return [a for a, _ in ranked[:max(k, 0)]]


def lm_filter(model: ActionGenerator, traj: Trajectory, goal_step: int, x1: Sequence[int],
              k: int = DEFAULT_TOP_K) -> list[int]:
    """Keep ``B`` when the model, prompted with ``(o_A, a_A, o_B)``, ranks ``a_B`` in its top ``k``."""
    goal = traj.steps[goal_step]
    kept = []
    for b in x1:
        rec = traj.steps[b]
        top = model.top_k(goal.observation[0], goal.action, rec.observation[0], k)
        if canonicalize(rec.action) in top:
            kept.append(b)
    return kept


# -- filter 3: semantics --------------------------------------------------------

def action_entities(action: str, spec: GameSpec | None = None) -> set[str]:
    if spec is not None:
        inst = spec.grammar.parse(action)
        if inst:
            return {canonical_entity(w) for w in inst.fillers}
    return {canonical_entity(w) for w in canonicalize(action).split()[1:]}


def _entities(triples: Iterable[Triple]) -> set[str]:
    out = set()
    for t in triples:
        out.update((t.subject, t.object))
    return out


def added_entities(traj: Trajectory, index: int) -> set[str]:
    """Entities of triples that entered the graph right before or right after step ``index``."""
    steps = traj.steps
    now = set(steps[index].kg_triples)
    before = set(steps[index - 1].kg_triples) if index > 0 else set()
    after = set(steps[index + 1].kg_triples) if index + 1 < len(steps) else now
    return _entities((now - before) | (after - now))


def semantic_filter(x2: Sequence[int], goal_step: int, traj: Trajectory,
                    critic_percentile: float = DEFAULT_CRITIC_PERCENTILE,
                    spec: GameSpec | None = None) -> list[int]:
    """Keep steps sharing an action entity, a newly added KG entity, or the location with
    the goal, or carrying reward or a high absolute critic value."""
    if not 0.0 <= critic_percentile <= 1.0:
        raise ValueError("critic_percentile must lie in [0, 1]")
    goal = traj.steps[goal_step]
    critic = np.abs([rec.critic_value for rec in traj.steps])
    cutoff = float(np.quantile(critic, critic_percentile)) if critic.size else 0.0
    goal_actions = action_entities(goal.action, spec)
    goal_added = added_entities(traj, goal_step)
    kept = []
    for b in x2:
        rec = traj.steps[b]
        if (goal_actions & action_entities(rec.action, spec)
                or goal_added & added_entities(traj, b)
                or rec.location == goal.location
                or rec.reward != 0 or abs(rec.critic_value) >= cutoff):
            kept.append(b)
    return kept


# -- synthesis ------------------------------------------------------------------

@dataclass(frozen=True)
class ExplainedStep:
    index: int
    action: str
    location: str
    because: tuple[str, ...]
    needed_for: int
    needed_for_action: str

    def line(self) -> str:
        because = "; ".join(self.because) if self.because else "no salient facts"
        return (f"Step {self.index} ({self.location}): {self.action} -- because {because}; "
                f"needed for: {self.needed_for_action} (step {self.needed_for})")


@dataclass(frozen=True)
class TemporalExplanation:
    goal_step: int
    goal_action: str
    goal_location: str
    steps: tuple[ExplainedStep, ...]
    sizes: tuple[int, int, int, int] = (0, 0, 0, 0)
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def selected(self) -> list[int]:
        return [s.index for s in self.steps]

    def actions(self) -> list[str]:
        return [s.action for s in self.steps]

    def goal_line(self) -> str:
        return f"Goal: step {self.goal_step} ({self.goal_location}): {self.goal_action}"

    def render(self) -> str:
        sx, s1, s2, s3 = self.sizes
        params = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        head = [
            "# temporal explanation",
            f"goal_step: {self.goal_step}",
            f"goal_action: {self.goal_action}",
            f"selected: {','.join(str(i) for i in self.selected)}",
            f"sizes: X={sx} X1={s1} X2={s2} X3={s3}",
            f"params: {params}",
            "---",
        ]
        return "\n".join(head + [s.line() for s in self.steps] + [self.goal_line()]) + "\n"

    def render_json_lines(self) -> str:
        sx, s1, s2, s3 = self.sizes
        rows = [{"kind": "header", "goal_step": self.goal_step, "goal_action": self.goal_action,
                 "selected": self.selected, "sizes": {"X": sx, "X1": s1, "X2": s2, "X3": s3},
                 "params": dict(self.params)}]
        rows += [{"kind": "step", "step": s.index, "location": s.location, "action": s.action,
                  "because": list(s.because), "needed_for": s.needed_for,
                  "needed_for_action": s.needed_for_action, "text": s.line()} for s in self.steps]
        rows.append({"kind": "goal", "step": self.goal_step, "location": self.goal_location,
                     "action": self.goal_action, "text": self.goal_line()})
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


def synthesize(goal_step: int, x3: Sequence[int], traj: Trajectory, stats: BayesStats | None = None,
               sizes: tuple[int, int, int, int] = (0, 0, 0, 0),
               params: Mapping[str, float] | None = None) -> TemporalExplanation:
    """One block per selected step, each linked to the later selected step (or the goal)
    it most probably precedes."""
    goal = traj.steps[goal_step]
    keys = trajectory_keys(traj)
    order = sorted(set(x3))
    blocks = []
    for pos, i in enumerate(order):
        later = order[pos + 1:] + [goal_step]

        def link_score(j: int) -> tuple[Fraction, int]:
            prob = Fraction(0)
            if stats is not None:
                try:
                    prob = conditional_prob(stats, keys[i], keys[j])
                except UnseenStep:
                    pass
            return (prob, -j)

        target = max(later, key=link_score)
        rec = traj.steps[i]
        blocks.append(ExplainedStep(i, rec.action, rec.location, rec.immediate_explanation,
                                    target, traj.steps[target].action))
    return TemporalExplanation(goal_step, goal.action, goal.location, tuple(blocks), sizes, dict(params or {}))


@dataclass(frozen=True)
class PipelineResult:
    x: list[int]
    x1: list[int]
    x2: list[int]
    x3: list[int]
    explanation: TemporalExplanation


def explain(traj: Trajectory, goal_step: int, stats: BayesStats, model: ActionGenerator | None,
            p: float = DEFAULT_P, k: int = DEFAULT_TOP_K,
            critic_percentile: float = DEFAULT_CRITIC_PERCENTILE, spec: GameSpec | None = None,
            immediate_only: bool = False) -> PipelineResult:
    """The full X -> X1 -> X2 -> X3 pipeline for one goal step."""
    x = list(range(goal_step))
    params = {"p": p, "k": k, "critic_percentile": critic_percentile}
    if immediate_only:
        expl = synthesize(goal_step, [], traj, stats, (len(x), 0, 0, 0), params)
        return PipelineResult(x, [], [], [], expl)
    x1 = bayes_filter(stats, traj, goal_step, p)
    x2 = lm_filter(model, traj, goal_step, x1, k) if model is not None else list(x1)
    x3 = semantic_filter(x2, goal_step, traj, critic_percentile, spec)
    expl = synthesize(goal_step, x3, traj, stats, (len(x), len(x1), len(x2), len(x3)), params)
    return PipelineResult(x, x1, x2, x3, expl)


# -- report parsing -------------------------------------------------------------

_STEP_LINE = re.compile(r"^Step (\d+) \((.*?)\): (.*?) -- because (.*); needed for: (.*) \(step (\d+)\)$")
_GOAL_LINE = re.compile(r"^Goal: step (\d+) \((.*?)\): (.*)$")


def parse_report(text: str) -> TemporalExplanation:
    """Inverse of :meth:`TemporalExplanation.render`."""
    lines = text.splitlines()
    try:
        sep = lines.index("---")
    except ValueError:
        raise ValueError("report has no header separator") from None
    header = dict(line.split(": ", 1) for line in lines[1:sep] if ": " in line)
    sizes = dict(part.split("=") for part in header.get("sizes", "").split())
    params = {}
    for part in header.get("params", "").split():
        key, value = part.split("=")
        params[key] = int(value) if value.lstrip("-").isdigit() else float(value)
    blocks, goal = [], None
    for line in lines[sep + 1:]:
        m = _STEP_LINE.match(line)
        if m:
            because = () if m.group(4) == "no salient facts" else tuple(m.group(4).split("; "))
            blocks.append(ExplainedStep(int(m.group(1)), m.group(3), m.group(2), because,
                                        int(m.group(6)), m.group(5)))
            continue
        g = _GOAL_LINE.match(line)
        if g:
            goal = g
        elif line.strip():
            raise ValueError(f"unrecognised report line: {line!r}")
    if goal is None:
        raise ValueError("report has no goal line")
    return TemporalExplanation(int(goal.group(1)), goal.group(3), goal.group(2), tuple(blocks),
                               tuple(int(sizes.get(k, 0)) for k in ("X", "X1", "X2", "X3")), params)


# -- goal selection -------------------------------------------------------------

def find_goal(traj: Trajectory, action: str | None = None, into: str | None = None,
              rewarded: bool = False, which: str = "first") -> int | None:
    """Index of the step matching every given condition.

    ``into`` is the room the step leads to (read from the next record);
    ``rewarded`` requires a positive reward.
    """
    hits = []
    for i, rec in enumerate(traj.steps):
        if action is not None and canonicalize(rec.action) != canonicalize(action):
            continue
        if into is not None and (i + 1 >= len(traj.steps) or traj.steps[i + 1].location != into):
            continue
        if rewarded and rec.reward <= 0:
            continue
        hits.append(i)
    if not hits:
        return None
    return hits[0] if which == "first" else hits[-1]


# -- synthetic corpora ----------------------------------------------------------

def _plan(spec: GameSpec, state, limit: int = 20000) -> list[str]:
    """Shortest action sequence from ``state`` to any higher-scoring or goal state."""
    from collections import deque
    start = state.world_key()
    seen = {start}
    queue = deque([(state, [])])
    while queue and len(seen) < limit:
        cur, path = queue.popleft()
        for action in sorted(valid_actions(spec, cur)):
            nxt, obs, done = step(spec, cur, action)
            if done and nxt.death:
                continue
            if nxt.score > state.score or (done and not nxt.death):
                return path + [action]
            key = nxt.world_key()
            if key not in seen:
                seen.add(key)
                queue.append((nxt, path + [action]))
    return []


def noisy_planner_corpus(spec: GameSpec, n: int, seed: int = 0, noise: float = 0.3,
                         max_steps: int = 100) -> list[Trajectory]:
    """Trajectories from a score-seeking planner that takes a random valid action with
    probability ``noise``; useful as a stand-in for policy rollouts."""
    from .kgstate import EMPTY_GRAPH, extract_triples, update_graph
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(n):
        state, obs = reset(spec, seed + ep)
        graph = update_graph(EMPTY_GRAPH, extract_triples(obs, state.room), 0)
        records = []
        cause = "truncation"
        plan: list[str] = []
        for t in range(max_steps):
            if rng.random() < noise:
                plan = []
            elif not plan:
                plan = _plan(spec, state)
            if plan:
                action = plan.pop(0)
            else:
                options = sorted(valid_actions(spec, state)) or ["look"]
                action = options[int(rng.integers(len(options)))]
            before = state
            state, ob, done = step(spec, before, action)
            records.append(StepRecord(t, obs.components(), tuple(sorted(graph.triples)), action, (),
                                      state.score, ob.reward, float(ob.reward), before.room))
            obs = ob
            graph = update_graph(graph, extract_triples(ob, state.room), t + 1)
            if done:
                cause = state.terminal_cause
                break
        out.append(Trajectory(spec.game_id, seed + ep, "noisy-planner", tuple(records), cause,
                              records[-1].game_score))
    return out


GoalFinder = Callable[[Trajectory], "int | None"]
