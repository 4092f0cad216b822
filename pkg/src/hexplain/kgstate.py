"""Knowledge-graph belief state: extraction, update, partition and rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping

from .engine import DIRECTIONS, Observation

CATEGORIES = ("atr", "inv", "obj", "loc")
PLAYER = "player"


def category_of(subject: str, relation: str) -> str:
    if relation == "is":
        return "atr"
    if relation == "has" and subject == PLAYER:
        return "inv"
    if relation == "in":
        return "obj"
    if relation in DIRECTIONS:
        return "loc"
    raise ValueError(f"no sub-graph for relation {relation!r} with subject {subject!r}")


def canonical_entity(phrase: str) -> str:
    """Head noun of a noun phrase, lower-cased (``a Brass {Lamp}`` -> ``lamp``)."""
    words = re.findall(r"[a-z0-9-]+", phrase.lower())
    return words[-1] if words else ""


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    relation: str
    object: str

    @property
    def category(self) -> str:
        return category_of(self.subject, self.relation)

    def to_tsv(self) -> str:
        return f"{self.subject}\t{self.relation}\t{self.object}\t{self.category}"

    @classmethod
    def from_tsv(cls, line: str) -> "Triple":
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"triple record needs 4 tab-separated fields, got {len(parts)}")
        triple = cls(parts[0], parts[1], parts[2])
        if triple.category != parts[3]:
            raise ValueError(f"category {parts[3]!r} does not match relation {parts[1]!r}")
        return triple

    def __str__(self):
        return f"<{self.subject}, {self.relation}, {self.object}>"


@dataclass(frozen=True)
class KnowledgeGraph:
    triples: frozenset[Triple] = frozenset()
    step_added: Mapping[Triple, int] = field(default_factory=dict, compare=False, hash=False)

    def __len__(self):
        return len(self.triples)

    def __iter__(self):
        return iter(sorted(self.triples))

    def __contains__(self, triple):
        return triple in self.triples

    @cached_property
    def entities(self) -> dict[str, tuple[Triple, ...]]:
        index: dict[str, list[Triple]] = {}
        for t in sorted(self.triples):
            index.setdefault(t.subject, []).append(t)
            if t.object != t.subject:
                index.setdefault(t.object, []).append(t)
        return {k: tuple(v) for k, v in sorted(index.items())}

    def nodes(self) -> list[str]:
        return list(self.entities)


EMPTY_GRAPH = KnowledgeGraph()


@dataclass(frozen=True)
class SubGraphs:
    atr: KnowledgeGraph
    inv: KnowledgeGraph
    obj: KnowledgeGraph
    loc: KnowledgeGraph

    s = 4

    def views(self) -> tuple[KnowledgeGraph, KnowledgeGraph, KnowledgeGraph, KnowledgeGraph]:
        return (self.atr, self.inv, self.obj, self.loc)

    def __iter__(self):
        return iter(zip(CATEGORIES, self.views()))


# -- extraction ---------------------------------------------------------------

_BRACED = re.compile(r"\{([^{}]+)\}")
_INSIDE = re.compile(r"Inside the (\w+) is [^.{]*\{([^{}]+)\}")
_MOVE = re.compile(r"You (?:go|climb) (north|south|east|west|up|down) from the (\w+)\.")
_TAKE = re.compile(r"You take the \{([^{}]+)\}\.")
_DROP = re.compile(r"You drop the \{([^{}]+)\}\.")
_OPEN = re.compile(r"You open the \{([^{}]+)\}\.")
_CARRY = re.compile(r"You are carrying: (.+?)\.?$")


def extract_triples(obs: Observation, current_room: str) -> set[Triple]:
    """Rule-based stand-in for a question-answering extractor.

    Answers four implicit questions: which objects are interactable (markup
    in the room description), what the player holds, what lies in the room,
    and how rooms connect (movement feedback).
    """
    found: set[Triple] = set()
    room = canonical_entity(current_room) if current_room else ""
    containers = {canonical_entity(item): canonical_entity(holder)
                  for holder, item in _INSIDE.findall(obs.desc)}
    for phrase in _BRACED.findall(obs.desc):
        ent = canonical_entity(phrase)
        if not ent:
            continue
        found.add(Triple(ent, "is", "interactable"))
        where = containers.get(ent, room)
        if where and where != ent:
            found.add(Triple(ent, "in", where))
    m = _CARRY.match(obs.inventory_text.strip())
    if m:
        for item in m.group(1).split(","):
            ent = canonical_entity(item)
            if ent:
                found.add(Triple(PLAYER, "has", ent))
    fb = obs.feedback
    for direction, origin in _MOVE.findall(fb):
        origin = canonical_entity(origin)
        if room and origin and origin != room:
            found.add(Triple(room, direction, origin))
    for phrase in _TAKE.findall(fb):
        found.add(Triple(PLAYER, "has", canonical_entity(phrase)))
    for phrase in _DROP.findall(fb):
        if room:
            found.add(Triple(canonical_entity(phrase), "in", room))
    for phrase in _OPEN.findall(fb):
        found.add(Triple(canonical_entity(phrase), "is", "open"))
    return found


# -- update -------------------------------------------------------------------

def update_graph(prev: KnowledgeGraph, new_triples: Iterable[Triple], step: int) -> KnowledgeGraph:
    """Union with ``prev`` after location retractions.

    An object has one location: asserting ``<player, has, x>`` retracts every
    ``<x, in, _>``, and asserting ``<x, in, y>`` retracts ``<player, has, x>``
    and any other ``<x, in, _>``.
    """
    new = set(new_triples)
    held = {t.object for t in new if t.category == "inv"}
    placed = {t.subject: t for t in new if t.relation == "in"}
    kept = set()
    for t in prev.triples:
        if t.relation == "in" and (t.subject in held or (t.subject in placed and placed[t.subject] != t)):
            continue
        if t.category == "inv" and t.object in placed:
            continue
        kept.add(t)
    triples = frozenset(kept | new)
    if triples == prev.triples:
        return prev
    step_added = {t: prev.step_added.get(t, step) if t in prev.triples else step for t in triples}
    return KnowledgeGraph(triples, step_added)


def partition(g: KnowledgeGraph) -> SubGraphs:
    buckets: dict[str, set[Triple]] = {c: set() for c in CATEGORIES}
    for t in g.triples:
        buckets[t.category].add(t)
    return SubGraphs(*(KnowledgeGraph(frozenset(buckets[c]),
                                      {t: g.step_added.get(t, 0) for t in buckets[c]})
                       for c in CATEGORIES))


def valid_entities(g: KnowledgeGraph, step: int, obs: Observation | None = None,
                   window: int = 10) -> set[str]:
    """Entities touched by a triple added in the last ``window`` steps or named in ``obs``."""
    recent = set()
    for t in g.triples:
        if g.step_added.get(t, 0) > step - window:
            recent.update((t.subject, t.object))
    if obs is not None:
        words = set(re.findall(r"[a-z0-9-]+", " ".join(obs.components()).lower()))
        recent.update(e for e in g.entities if e in words)
    return recent


# -- rendering ----------------------------------------------------------------

PluralRule = Callable[[str], bool] | Mapping[str, bool] | None


def default_is_plural(word: str) -> bool:
    return word.endswith("s") and not word.endswith("ss")


def _is_plural(word: str, plural: PluralRule) -> bool:
    if plural is None:
        return default_is_plural(word)
    if callable(plural):
        return plural(word)
    return plural.get(word, default_is_plural(word))


def triple_to_text(t: Triple, plural: PluralRule = None) -> str:
    copula = "are" if _is_plural(t.subject, plural) else "is"
    cat = t.category
    if cat == "atr":
        return f"{t.subject} {copula} {t.object}"
    if cat == "inv":
        return f"I have {t.object}"
    if cat == "obj":
        return f"{t.subject} {copula} in {t.object}"
    return f"{t.subject} {copula} in the {t.relation} of {t.object}"


class GraphTracker:
    """Per-episode helper that folds observations into the belief graph."""

    def __init__(self):
        self.graph = EMPTY_GRAPH
        self.step = 0

    def reset(self) -> KnowledgeGraph:
        self.graph = EMPTY_GRAPH
        self.step = 0
        return self.graph

    def observe(self, obs: Observation, room: str) -> KnowledgeGraph:
        self.graph = update_graph(self.graph, extract_triples(obs, room), self.step)
        self.step += 1
        return self.graph
