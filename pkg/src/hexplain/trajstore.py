"""Trajectory records, the ``.traj`` line format, and test-time rollout collection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .engine import GameSpec, Observation, reset, step
from .kgstate import EMPTY_GRAPH, Triple, extract_triples, partition, triple_to_text, update_graph, valid_entities
from .policy import Policy, immediate_explanation

SCHEMA = "hexplain-traj"
SCHEMA_VERSION = 1
TERMINAL_CAUSES = ("goal", "death", "truncation")


class SchemaError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class StepRecord:
    """What the agent saw, believed, did and said at one step.

    ``observation``, ``kg_triples`` and ``location`` describe the state the
    action was chosen in; ``game_score`` and ``reward`` are the outcome of
    the action.
    """

    step: int
    observation: tuple[str, str, str, str]
    kg_triples: tuple[Triple, ...]
    action: str
    immediate_explanation: tuple[str, ...]
    game_score: int
    reward: int
    critic_value: float
    location: str

    @property
    def desc(self) -> str:
        return self.observation[0]

    @property
    def feedback(self) -> str:
        return self.observation[1]


@dataclass(frozen=True)
class Trajectory:
    game_id: str
    seed: int
    checkpoint_id: str
    steps: tuple[StepRecord, ...]
    terminal_cause: str
    final_score: int = field(default=0)

    def __post_init__(self):
        if self.terminal_cause not in TERMINAL_CAUSES:
            raise ValueError(f"terminal cause must be one of {TERMINAL_CAUSES}")
        if self.steps and self.final_score != self.steps[-1].game_score:
            raise ValueError("final_score must equal the last step's game_score")

    def __len__(self):
        return len(self.steps)


def check_trajectory(traj: Trajectory, spec: GameSpec | None = None) -> list[str]:
    """Invariant violations of ``traj`` (an empty list when it is well formed)."""
    problems = []
    plural = spec.is_plural if spec else None
    for i, rec in enumerate(traj.steps):
        if rec.step != i:
            problems.append(f"step {i}: index {rec.step} is not consecutive")
        texts = {triple_to_text(t, plural) for t in rec.kg_triples}
        for line in rec.immediate_explanation:
            if line not in texts:
                problems.append(f"step {i}: explanation {line!r} is not a rendered KG triple")
        if spec is not None and not spec.grammar.parse(rec.action):
            problems.append(f"step {i}: action {rec.action!r} does not parse")
    if traj.steps and traj.final_score != traj.steps[-1].game_score:
        problems.append("final score differs from last step's score")
    return problems


# -- serialization ------------------------------------------------------------

def _step_line(rec: StepRecord) -> dict:
    return {
        "kind": "step",
        "step": rec.step,
        "desc": rec.observation[0],
        "feedback": rec.observation[1],
        "inventory": rec.observation[2],
        "prev_action": rec.observation[3],
        "kg": [t.to_tsv() for t in rec.kg_triples],
        "action": rec.action,
        "explanation": list(rec.immediate_explanation),
        "game_score": rec.game_score,
        "reward": rec.reward,
        "critic_value": rec.critic_value,
        "location": rec.location,
    }


def dump(trajectories: Iterable[Trajectory], fh: IO[str]) -> None:
    fh.write(json.dumps({"kind": "header", "schema": SCHEMA, "version": SCHEMA_VERSION}) + "\n")
    for traj in trajectories:
        fh.write(json.dumps({"kind": "trajectory", "game_id": traj.game_id, "seed": traj.seed,
                             "checkpoint": traj.checkpoint_id, "n_steps": len(traj.steps),
                             "final_score": traj.final_score, "terminal": traj.terminal_cause}) + "\n")
        for rec in traj.steps:
            fh.write(json.dumps(_step_line(rec), ensure_ascii=False) + "\n")


def serialize(trajectories: Iterable[Trajectory]) -> bytes:
    import io
    buf = io.StringIO()
    dump(trajectories, buf)
    return buf.getvalue().encode("utf-8")


def _need(record: dict, key: str, kind, line: int):
    if key not in record:
        raise SchemaError(f"missing field {key!r}", line)
    value = record[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"field {key!r} has the wrong type", line)
    return value


def _parse_step(record: dict, line: int) -> StepRecord:
    try:
        triples = tuple(Triple.from_tsv(s) for s in _need(record, "kg", list, line))
    except (ValueError, TypeError, AttributeError) as exc:
        raise SchemaError(f"bad triple: {exc}", line) from None
    explanation = _need(record, "explanation", list, line)
    if not all(isinstance(s, str) for s in explanation):
        raise SchemaError("explanation entries must be strings", line)
    return StepRecord(
        step=_need(record, "step", int, line),
        observation=(_need(record, "desc", str, line), _need(record, "feedback", str, line),
                     _need(record, "inventory", str, line), _need(record, "prev_action", str, line)),
        kg_triples=triples,
        action=_need(record, "action", str, line),
        immediate_explanation=tuple(explanation),
        game_score=_need(record, "game_score", int, line),
        reward=_need(record, "reward", int, line),
        critic_value=float(_need(record, "critic_value", float, line)),
        location=_need(record, "location", str, line),
    )


def load(lines: Iterable[str]) -> list[Trajectory]:
    """Parse a ``.traj`` stream; raises :class:`SchemaError` naming the offending line."""
    out: list[Trajectory] = []
    pending: dict | None = None
    steps: list[StepRecord] = []
    pending_line = 0
    lineno = 0

    def close(at: int):
        nonlocal pending, steps
        if pending is None:
            return
        if len(steps) != pending["n_steps"]:
            raise SchemaError(f"trajectory declares {pending['n_steps']} steps but has {len(steps)}", at)
        try:
            out.append(Trajectory(pending["game_id"], pending["seed"], pending["checkpoint"], tuple(steps),
                                  pending["terminal"], pending["final_score"]))
        except ValueError as exc:
            raise SchemaError(str(exc), pending_line) from None
        pending, steps = None, []

    for lineno, raw in enumerate(lines, start=1):
        text = raw.rstrip("\n")
        if not text.strip():
            raise SchemaError("blank line", lineno)
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed record ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise SchemaError("record is not an object", lineno)
        kind = record.get("kind")
        if lineno == 1:
            if kind != "header" or record.get("schema") != SCHEMA:
                raise SchemaError("missing header line", 1)
            if record.get("version") != SCHEMA_VERSION:
                raise SchemaError(f"unsupported schema version {record.get('version')!r}", 1)
            continue
        if kind == "trajectory":
            close(lineno)
            pending = {
                "game_id": _need(record, "game_id", str, lineno),
                "seed": _need(record, "seed", int, lineno),
                "checkpoint": _need(record, "checkpoint", str, lineno),
                "n_steps": _need(record, "n_steps", int, lineno),
                "final_score": _need(record, "final_score", int, lineno),
                "terminal": _need(record, "terminal", str, lineno),
            }
            pending_line = lineno
        elif kind == "step":
            if pending is None:
                raise SchemaError("step record before any trajectory record", lineno)
            rec = _parse_step(record, lineno)
            if rec.step != len(steps):
                raise SchemaError(f"expected step {len(steps)}, found {rec.step}", lineno)
            steps.append(rec)
        else:
            raise SchemaError(f"unknown record kind {kind!r}", lineno)
    if lineno == 0:
        raise SchemaError("empty stream", 1)
    close(lineno)
    return out


def deserialize(data: bytes | str) -> list[Trajectory]:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("stream is not UTF-8", data[:exc.start].count(b"\n") + 1) from None
    return load(data.splitlines(keepends=True))


def write_file(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        dump(trajectories, fh)


def read_file(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return load(fh)


def corpus_hash(trajectories: Sequence[Trajectory]) -> str:
    return hashlib.sha256(serialize(trajectories)).hexdigest()


# -- collection ---------------------------------------------------------------

def collect_rollouts(policy: Policy, spec: GameSpec, n: int, seed: int = 0, *, k: int = 3,
                     max_steps: int = 100, parallel: int = 16, checkpoint_id: str = "") -> list[Trajectory]:
    """``n`` sampled episodes from a frozen policy, each with per-step immediate explanations.

    Episodes run ``parallel`` at a time; the result is a function of
    ``seed`` only.
    """
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    plural = spec.is_plural
    out: list[Trajectory] = []
    for start in range(0, n, parallel):
        count = min(parallel, n - start)
        seeds = [seed + start + i for i in range(count)]
        states, obs, graphs = [], [], []
        for s in seeds:
            st, ob = reset(spec, s)
            states.append(st)
            obs.append(ob)
            graphs.append(update_graph(EMPTY_GRAPH, extract_triples(ob, st.room), 0))
        carry = policy.initial_carry(count)
        records: list[list[StepRecord]] = [[] for _ in range(count)]
        causes: list[str | None] = [None] * count
        active = list(range(count))
        t = 0
        while active:
            trace = policy.forward([obs[i] for i in active], [graphs[i] for i in active], carry[active], rng)
            carry[active] = trace.carry
            for j, i in enumerate(active):
                g = graphs[i]
                attention = trace.attention(j)
                valid = valid_entities(g, t, obs[i])
                items = immediate_explanation(attention, partition(g), k=k, valid=valid, plural=plural)
                action = trace.decoded.actions[j]
                before = states[i]
                state, ob, done = step(spec, before, action)
                records[i].append(StepRecord(
                    step=t, observation=obs[i].components(), kg_triples=tuple(sorted(g.triples)),
                    action=action, immediate_explanation=tuple(it.text for it in items),
                    game_score=state.score, reward=ob.reward, critic_value=float(trace.value.data[j]),
                    location=before.room))
                states[i], obs[i] = state, ob
                graphs[i] = update_graph(g, extract_triples(ob, state.room), t + 1)
                if done:
                    causes[i] = state.terminal_cause
                elif t + 1 >= max_steps:
                    causes[i] = "truncation"
            active = [i for i in active if causes[i] is None]
            t += 1
        for i, s in enumerate(seeds):
            out.append(Trajectory(spec.game_id, s, checkpoint_id, tuple(records[i]), causes[i],
                                  records[i][-1].game_score))
    return out


def scripted_trajectory(spec: GameSpec, actions: Sequence[str], seed: int = 0,
                        checkpoint_id: str = "scripted") -> Trajectory:
    """A trajectory from a fixed action list (no explanations, zero critic values)."""
    state, obs = reset(spec, seed)
    graph = update_graph(EMPTY_GRAPH, extract_triples(obs, state.room), 0)
    records = []
    cause = "truncation"
    for t, action in enumerate(actions):
        before = state
        state, ob, done = step(spec, before, action)
        records.append(StepRecord(t, obs.components(), tuple(sorted(graph.triples)), action, (),
                                  state.score, ob.reward, 0.0, before.room))
        obs = ob
        graph = update_graph(graph, extract_triples(ob, state.room), t + 1)
        if done:
            cause = state.terminal_cause
            break
    final = records[-1].game_score if records else 0
    return Trajectory(spec.game_id, seed, checkpoint_id, tuple(records), cause, final)


def observation_of(rec: StepRecord) -> Observation:
    return Observation(*rec.observation)
