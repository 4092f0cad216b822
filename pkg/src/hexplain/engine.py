"""Deterministic miniature interactive-fiction engine.

Games are declared in the sectioned text format (see ``docs/game_format.md``)
and played through the pure functions :func:`reset`, :func:`step` and
:func:`valid_actions`.  Every transition is a function of ``(state, action)``;
the ``seed`` accepted by :func:`reset` exists for interface symmetry with
stochastic environments and has no effect on the built-in games.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable

from .gamefile import ParseError, Section, read_sections
from .grammar import ActionTemplate, Grammar, GrammarError, NoMatch, canonicalize

DIRECTIONS = ("north", "south", "east", "west", "up", "down")
GENERIC_FAILURE = "I don't understand that."
BUILTIN_GAMES = ("lanternquest", "eggtree", "twokeys")

__all__ = [
    "DIRECTIONS", "GENERIC_FAILURE", "BUILTIN_GAMES", "ParseError", "ValidationError",
    "RoomDef", "ObjectDef", "RewardRule", "Hazard", "GameSpec", "EnvState", "Observation",
    "load_game", "load_builtin", "reset", "step", "valid_actions", "brute_force_valid_actions",
    "reachable_states", "Env",
]


class ValidationError(ValueError):
    """A game definition parsed but violates a structural invariant."""


# -- conditions ---------------------------------------------------------------

_ATOM = re.compile(r"^(!?)\s*(in|has|open|at)\s+([\w-]+)(?:\s+([\w-]+))?$")


@dataclass(frozen=True)
class Condition:
    """Conjunction of literals such as ``in cellar & !has lamp``."""

    literals: tuple[tuple[bool, str, str, str | None], ...]
    source: str = ""

    @classmethod
    def parse(cls, text: str, line: int = 0) -> "Condition":
        literals = []
        for part in text.split("&"):
            m = _ATOM.match(part.strip())
            if not m:
                raise ParseError(f"bad condition literal {part.strip()!r}", line)
            neg, op, a, b = m.groups()
            if (op == "at") != (b is not None):
                raise ParseError(f"wrong arity in condition {part.strip()!r}", line)
            literals.append((neg == "!", op, a, b))
        return cls(tuple(literals), text.strip())

    def holds(self, state: "EnvState") -> bool:
        for negated, op, a, b in self.literals:
            if op == "in":
                value = state.room == a
            elif op == "has":
                value = a in state.inventory
            elif op == "open":
                value = a in state.open_objects
            else:
                value = state.location_of(a) == b
            if value == negated:
                return False
        return True

    def names(self) -> Iterable[tuple[str, str]]:
        for _, op, a, b in self.literals:
            if op == "in":
                yield "room", a
            elif op == "at":
                yield "object", a
                yield "room", b  # type: ignore[misc]
            else:
                yield "object", a


# -- definitions --------------------------------------------------------------

@dataclass(frozen=True)
class RoomDef:
    id: str
    title: str
    description: str
    exits: tuple[tuple[str, str], ...]
    dark: bool = False

    def exit(self, direction: str) -> str | None:
        return dict(self.exits).get(direction)


@dataclass(frozen=True)
class ObjectDef:
    id: str
    name: str
    location: str
    attributes: frozenset[str] = frozenset()
    portable: bool = True
    keys: tuple[str, ...] = ()
    climb: str | None = None

    @property
    def openable(self) -> bool:
        return "openable" in self.attributes


@dataclass(frozen=True)
class RewardRule:
    id: str
    points: int
    once: bool
    condition: Condition


@dataclass(frozen=True)
class Hazard:
    id: str
    condition: Condition
    message: str
    penalty: int = 0


@dataclass(frozen=True, eq=False)
class GameSpec:
    game_id: str
    title: str
    start: str
    rooms: dict[str, RoomDef]
    objects: dict[str, ObjectDef]
    grammar: Grammar
    reward_rules: tuple[RewardRule, ...]
    hazards: tuple[Hazard, ...]
    goal: Condition
    goal_description: str
    max_score: int
    walkthrough: tuple[str, ...] = ()
    plural_overrides: dict[str, bool] = field(default_factory=dict)
    _valid_cache: dict = field(default_factory=dict, repr=False)

    @property
    def templates(self) -> tuple[ActionTemplate, ...]:
        return self.grammar.templates

    @property
    def vocabulary(self) -> frozenset[str]:
        return self.grammar.vocabulary

    def is_plural(self, word: str) -> bool:
        if word in self.plural_overrides:
            return self.plural_overrides[word]
        return word.endswith("s") and not word.endswith("ss")

    def text_corpus(self) -> list[str]:
        """Every literal string the engine can print for this game."""
        texts = [self.title, self.goal_description, GENERIC_FAILURE, *_MESSAGES.values()]
        texts += [f"{r.title}. {r.description}" for r in self.rooms.values()]
        texts += [o.name for o in self.objects.values()]
        texts += [h.message for h in self.hazards]
        texts += [t.surface_pattern for t in self.templates]
        texts += [" ".join(alias for t in self.templates for alias in t.verb_aliases + t.prepositions)]
        texts += [" ".join(sorted(self.vocabulary)), " ".join(DIRECTIONS)]
        return texts


@dataclass(frozen=True)
class EnvState:
    room: str
    inventory: frozenset[str]
    object_locations: tuple[tuple[str, str], ...]
    open_objects: frozenset[str] = frozenset()
    fired_rewards: frozenset[str] = frozenset()
    score: int = 0
    step_index: int = 0
    done: bool = False
    death: bool = False

    def location_of(self, obj: str) -> str | None:
        if obj in self.inventory:
            return "player"
        for name, loc in self.object_locations:
            if name == obj:
                return loc
        return None

    def world_key(self) -> tuple:
        """State identity ignoring the step counter."""
        return (self.room, self.inventory, self.object_locations, self.open_objects,
                self.fired_rewards, self.score, self.done, self.death)

    @property
    def terminal_cause(self) -> str | None:
        if not self.done:
            return None
        return "death" if self.death else "goal"


@dataclass(frozen=True)
class Observation:
    desc: str
    feedback: str
    inventory_text: str
    prev_action: str
    reward: int = 0
    total_score: int = 0

    def components(self) -> tuple[str, str, str, str]:
        return (self.desc, self.feedback, self.inventory_text, self.prev_action)


_MESSAGES = {
    "no_exit": "You can't go that way.",
    "not_here": "You can't see any such thing.",
    "fixed": "That is fixed in place.",
    "already_have": "You already have that.",
    "not_held": "You aren't carrying that.",
    "not_openable": "That can't be opened.",
    "already_open": "It is already open.",
    "hold_first": "You need to be holding that first.",
    "no_climb": "You can't climb that.",
    "nothing": "Nothing happens.",
    "look": "You look around.",
    "dark": "It is pitch black. You are likely to be eaten by a grue.",
    "empty": "You are empty-handed.",
    "died": "*** You have died ***",
    "won": "*** You have won ***",
}


# -- loading ------------------------------------------------------------------

def _split_list(value: str) -> list[str]:
    return [p.strip() for p in re.split(r"[,\s]+", value) if p.strip()]


def _flag(value: str | None, line: int, default: bool = False) -> bool:
    if value is None:
        return default
    v = value.strip().lower()
    if v in ("yes", "true", "1", "on"):
        return True
    if v in ("no", "false", "0", "off"):
        return False
    raise ParseError(f"expected yes/no, got {value!r}", line)


def _entry_line(section: Section, key: str) -> int:
    for e in section.entries:
        if e.key == key:
            return e.line
    return section.line


def _require(section: Section, key: str) -> str:
    value = section.get(key)
    if value is None:
        raise ParseError(f"[{section.kind}] is missing '{key}'", section.line)
    return value


def load_game(definition_text: str, verify: bool = True) -> GameSpec:
    """Parse and validate a game definition.

    With ``verify`` the reward structure is checked by exhaustive search over
    reachable states (cheap for desk-scale games).
    """
    sections = read_sections(definition_text)
    game = None
    rooms: dict[str, RoomDef] = {}
    objects: dict[str, ObjectDef] = {}
    rewards: list[RewardRule] = []
    hazards: list[Hazard] = []
    templates: list[ActionTemplate] = []
    vocab: set[str] = set()
    plurals: dict[str, bool] = {}

    for sec in sections:
        if sec.kind == "game":
            game = sec
        elif sec.kind == "room":
            if not sec.arg:
                raise ParseError("[room] needs an id", sec.line)
            exits = []
            for item in _split_list(sec.get("exits", "") or ""):
                if ":" not in item:
                    raise ParseError(f"exit {item!r} must be direction:room", _entry_line(sec, "exits"))
                d, target = item.split(":", 1)
                if d not in DIRECTIONS:
                    raise ParseError(f"unknown direction {d!r}", _entry_line(sec, "exits"))
                exits.append((d, target))
            rid = sec.arg.strip()
            if rid in rooms:
                raise ValidationError(f"duplicate room {rid!r}")
            rooms[rid] = RoomDef(rid, sec.get("title", rid.title()) or rid, _require(sec, "description"),
                                 tuple(exits), _flag(sec.get("dark"), _entry_line(sec, "dark")))
        elif sec.kind == "object":
            if not sec.arg:
                raise ParseError("[object] needs an id", sec.line)
            oid = sec.arg.strip()
            if oid in objects:
                raise ValidationError(f"duplicate object {oid!r}")
            objects[oid] = ObjectDef(
                oid, sec.get("name", oid) or oid, _require(sec, "location"),
                frozenset(_split_list(sec.get("attributes", "") or "")),
                _flag(sec.get("portable"), _entry_line(sec, "portable"), True),
                tuple(_split_list(sec.get("key", "") or "")), sec.get("climb"))
        elif sec.kind == "reward":
            for e in sec.entries:
                m = re.match(r"^(-?\d+)\s*(once)?\s*:\s*(.+)$", e.value)
                if not m:
                    raise ParseError("reward must be 'POINTS [once] : CONDITION'", e.line)
                rewards.append(RewardRule(e.key, int(m.group(1)), bool(m.group(2)),
                                          Condition.parse(m.group(3), e.line)))
        elif sec.kind == "hazard":
            for e in sec.entries:
                parts = [p.strip() for p in e.value.split(":", 2)]
                if len(parts) < 2:
                    raise ParseError("hazard must be 'CONDITION : MESSAGE [: PENALTY]'", e.line)
                penalty = int(parts[2]) if len(parts) == 3 else 0
                hazards.append(Hazard(e.key, Condition.parse(parts[0], e.line), parts[1], penalty))
        elif sec.kind == "templates":
            for e in sec.entries:
                try:
                    templates.append(ActionTemplate.from_pattern(e.key, e.value))
                except GrammarError as err:
                    raise ParseError(str(err), e.line) from None
        elif sec.kind == "vocab":
            for e in sec.entries:
                words = [canonicalize(w) for w in _split_list(e.value)]
                if e.key == "words":
                    vocab.update(words)
                elif e.key in ("plural", "singular"):
                    plurals.update({w: e.key == "plural" for w in words})
                else:
                    raise ParseError(f"unknown vocab key {e.key!r}", e.line)
        else:
            raise ParseError(f"unknown section [{sec.kind}]", sec.line)

    if game is None:
        raise ParseError("missing [game] section", 1)
    max_score = int(_require(game, "max_score"))
    spec = GameSpec(
        game_id=_require(game, "id"),
        title=game.get("title", _require(game, "id")) or "",
        start=_require(game, "start"),
        rooms=rooms,
        objects=objects,
        grammar=Grammar(templates, vocab),
        reward_rules=tuple(rewards),
        hazards=tuple(hazards),
        goal=Condition.parse(_require(game, "goal"), _entry_line(game, "goal")),
        goal_description=_require(game, "intro"),
        max_score=max_score,
        walkthrough=tuple(canonicalize(a) for a in (game.get("walkthrough") or "").split(";") if a.strip()),
        plural_overrides=plurals,
    )
    _validate(spec)
    if verify:
        _verify_rewards(spec)
    return spec


def load_builtin(name: str) -> GameSpec:
    if name not in BUILTIN_GAMES:
        raise KeyError(f"unknown built-in game {name!r}; choose from {', '.join(BUILTIN_GAMES)}")
    return _load_builtin_cached(name)


_BUILTIN_CACHE: dict[str, GameSpec] = {}


def _load_builtin_cached(name: str) -> GameSpec:
    if name not in _BUILTIN_CACHE:
        text = resources.files("hexplain.games").joinpath(f"{name}.game").read_text("utf-8")
        _BUILTIN_CACHE[name] = load_game(text)
    return _BUILTIN_CACHE[name]


def builtin_text(name: str) -> str:
    return resources.files("hexplain.games").joinpath(f"{name}.game").read_text("utf-8")


_MARKUP = re.compile(r"\{([^{}]+)\}")


def _validate(spec: GameSpec) -> None:
    if spec.start not in spec.rooms:
        raise ValidationError(f"start room {spec.start!r} is not defined")
    for room in spec.rooms.values():
        for d, target in room.exits:
            if target not in spec.rooms:
                raise ValidationError(f"exit {d} of room {room.id!r} leads to undefined room {target!r}")
        for word in _MARKUP.findall(room.description):
            if canonicalize(word) not in spec.vocabulary:
                raise ValidationError(f"markup word {word!r} in room {room.id!r} is not in the vocabulary")
    for obj in spec.objects.values():
        loc = obj.location
        if loc != "player" and loc not in spec.rooms and loc not in spec.objects:
            raise ValidationError(f"object {obj.id!r} starts in unknown location {loc!r}")
        if loc in spec.objects and not spec.objects[loc].openable:
            raise ValidationError(f"object {obj.id!r} is inside non-container {loc!r}")
        if obj.name.split()[-1] != obj.id:
            raise ValidationError(f"object {obj.id!r}: the head noun of its name must equal its id")
        if obj.id not in spec.vocabulary:
            raise ValidationError(f"object {obj.id!r} is not in the vocabulary")
        for key in obj.keys:
            if key not in spec.objects:
                raise ValidationError(f"object {obj.id!r} needs unknown key {key!r}")
        if obj.climb is not None and obj.climb not in spec.rooms:
            raise ValidationError(f"object {obj.id!r} climbs to unknown room {obj.climb!r}")
    for cond, where in ([(r.condition, f"reward {r.id}") for r in spec.reward_rules]
                        + [(h.condition, f"hazard {h.id}") for h in spec.hazards]
                        + [(spec.goal, "goal")]):
        for kind, name in cond.names():
            table = spec.rooms if kind == "room" else spec.objects
            if name not in table:
                raise ValidationError(f"{where} refers to unknown {kind} {name!r}")
    for d in DIRECTIONS:
        if any(room.exit(d) for room in spec.rooms.values()) and d not in spec.vocabulary:
            raise ValidationError(f"direction {d!r} is used by an exit but not in the vocabulary")
    if not spec.templates:
        raise ValidationError("game defines no templates")


def reachable_states(spec: GameSpec, limit: int = 200_000) -> list[EnvState]:
    """Breadth-first enumeration of every state reachable through valid actions."""
    start, _ = reset(spec)
    seen = {start.world_key(): start}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        for action in sorted(valid_actions(spec, state)):
            nxt, _, _ = step(spec, state, action)
            key = nxt.world_key()
            if key not in seen:
                if len(seen) >= limit:
                    raise ValidationError(f"state space of {spec.game_id!r} exceeds {limit} states")
                seen[key] = nxt
                queue.append(nxt)
    return list(seen.values())


def _verify_rewards(spec: GameSpec) -> None:
    states = reachable_states(spec)
    fired = set().union(*(s.fired_rewards for s in states))
    once_total = sum(r.points for r in spec.reward_rules if r.once and r.id in fired)
    best = max(s.score for s in states)
    if once_total != spec.max_score:
        raise ValidationError(
            f"max_score {spec.max_score} differs from the {once_total} points of reachable once-rules")
    if best != spec.max_score:
        raise ValidationError(f"max_score {spec.max_score} but the best reachable score is {best}")


# -- dynamics -----------------------------------------------------------------

def _article(name: str) -> str:
    return "an" if name[0] in "aeiou" else "a"


def _braced(obj: ObjectDef) -> str:
    words = obj.name.split()
    words[-1] = "{" + words[-1] + "}"
    return " ".join(words)


def _has_light(spec: GameSpec, state: EnvState) -> bool:
    return any("light" in spec.objects[o].attributes for o in state.inventory)


def _visible(spec: GameSpec, state: EnvState) -> list[str]:
    """Objects the player can see in the current room (held ones excluded)."""
    if spec.rooms[state.room].dark and not _has_light(spec, state):
        return []
    seen = []
    for name, loc in state.object_locations:
        if loc == state.room:
            seen.append(name)
        elif loc in spec.objects and loc in state.open_objects:
            container_loc = state.location_of(loc)
            if container_loc in (state.room, "player"):
                seen.append(name)
    return sorted(seen)


def _render_desc(spec: GameSpec, state: EnvState) -> str:
    room = spec.rooms[state.room]
    if room.dark and not _has_light(spec, state):
        return f"{room.title}. {_MESSAGES['dark']}"
    lines = [f"{room.title}. {room.description}"]
    for oid in _visible(spec, state):
        obj = spec.objects[oid]
        if "scenery" in obj.attributes:
            continue
        loc = state.location_of(oid)
        if loc in spec.objects:
            lines.append(f"Inside the {loc} is {_article(obj.name)} {_braced(obj)}.")
        else:
            lines.append(f"There is {_article(obj.name)} {_braced(obj)} here.")
    return " ".join(lines)


def _render_inventory(spec: GameSpec, state: EnvState) -> str:
    if not state.inventory:
        return _MESSAGES["empty"]
    items = [spec.objects[o].name for o in sorted(state.inventory)]
    return "You are carrying: " + ", ".join(f"{_article(n)} {n}" for n in items) + "."


def _observe(spec: GameSpec, state: EnvState, feedback: str, action: str, reward: int) -> Observation:
    return Observation(_render_desc(spec, state), feedback, _render_inventory(spec, state),
                       action, reward, state.score)


def reset(spec: GameSpec, seed: int = 0) -> tuple[EnvState, Observation]:
    del seed  # built-in dynamics are deterministic
    inventory = frozenset(o.id for o in spec.objects.values() if o.location == "player")
    locations = tuple(sorted((o.id, o.location) for o in spec.objects.values() if o.location != "player"))
    state = EnvState(spec.start, inventory, locations)
    return state, _observe(spec, state, spec.goal_description, "look", 0)


def _move_object(state: EnvState, obj: str, where: str) -> EnvState:
    locs = [p for p in state.object_locations if p[0] != obj]
    if where != "player":
        locs.append((obj, where))
    locs = tuple(sorted(locs))
    inventory = state.inventory | {obj} if where == "player" else state.inventory - {obj}
    return replace(state, object_locations=locs, inventory=frozenset(inventory))


def _apply(spec: GameSpec, state: EnvState, verb: str, fillers: tuple[str, ...]) -> tuple[EnvState, str]:
    """Apply a parsed command; returns the new state (without scoring) and feedback."""
    here = set(_visible(spec, state)) | set(state.inventory)
    if verb == "look":
        return state, _MESSAGES["look"]
    if verb == "inventory":
        return state, _render_inventory(spec, state)
    if verb == "go":
        direction = fillers[0]
        target = spec.rooms[state.room].exit(direction) if direction in DIRECTIONS else None
        if target is None:
            return state, _MESSAGES["no_exit"]
        return replace(state, room=target), f"You go {direction} from the {state.room}."
    obj_id = fillers[0] if fillers else None
    if obj_id not in spec.objects or obj_id not in here:
        return state, _MESSAGES["not_here"]
    obj = spec.objects[obj_id]
    if verb == "take":
        if obj_id in state.inventory:
            return state, _MESSAGES["already_have"]
        if not obj.portable:
            return state, _MESSAGES["fixed"]
        return _move_object(state, obj_id, "player"), f"You take the {{{obj_id}}}."
    if verb == "drop":
        if obj_id not in state.inventory:
            return state, _MESSAGES["not_held"]
        return _move_object(state, obj_id, state.room), f"You drop the {{{obj_id}}}."
    if verb == "open":
        if not obj.openable:
            return state, _MESSAGES["not_openable"]
        if obj_id in state.open_objects:
            return state, _MESSAGES["already_open"]
        if "holdopen" in obj.attributes and obj_id not in state.inventory:
            return state, _MESSAGES["hold_first"]
        if obj.keys and not any(k in state.inventory for k in obj.keys):
            return state, f"The {{{obj_id}}} is locked."
        nxt = replace(state, open_objects=state.open_objects | {obj_id})
        return nxt, f"You open the {{{obj_id}}}."
    if verb == "climb":
        if obj.climb is None:
            return state, _MESSAGES["no_climb"]
        return replace(state, room=obj.climb), f"You climb up from the {state.room}."
    return state, _MESSAGES["nothing"]


_VERBS = ("look", "inventory", "go", "take", "drop", "open", "climb")


def step(spec: GameSpec, state: EnvState, action: str) -> tuple[EnvState, Observation, bool]:
    """Advance one step.  Failed or unparseable commands still consume a step."""
    action = canonicalize(action)
    if state.done:
        return state, _observe(spec, state, "The game is over.", action, 0), True
    parsed = spec.grammar.parse(action)
    if parsed is NoMatch or parsed.template.id not in _VERBS:
        nxt = replace(state, step_index=state.step_index + 1)
        return nxt, _observe(spec, nxt, GENERIC_FAILURE, action, 0), False
    nxt, feedback = _apply(spec, state, parsed.template.id, parsed.fillers)
    reward = 0
    fired = set(nxt.fired_rewards)
    for rule in spec.reward_rules:
        if rule.id in fired and rule.once:
            continue
        if rule.condition.holds(nxt) and not (not rule.once and rule.condition.holds(state)):
            reward += rule.points
            fired.add(rule.id)
    nxt = replace(nxt, fired_rewards=frozenset(fired), score=nxt.score + reward,
                  step_index=state.step_index + 1)
    for hazard in spec.hazards:
        if hazard.condition.holds(nxt):
            reward += hazard.penalty
            nxt = replace(nxt, score=nxt.score + hazard.penalty, done=True, death=True)
            feedback = f"{feedback} {hazard.message} {_MESSAGES['died']}"
            break
    if not nxt.done and spec.goal.holds(nxt):
        nxt = replace(nxt, done=True)
        feedback = f"{feedback} {_MESSAGES['won']}"
    return nxt, _observe(spec, nxt, feedback, action, reward), nxt.done


def _changes(spec: GameSpec, state: EnvState, action: str) -> bool:
    nxt, obs, _ = step(spec, state, action)
    return nxt.world_key() != state.world_key() or obs.reward != 0


def valid_actions(spec: GameSpec, state: EnvState) -> frozenset[str]:
    """Canonical actions that change the world or fire a reward.

    Only words naming reachable objects or directions are tried; any other
    filler is rejected by the engine, so the result equals brute-force
    enumeration over the full vocabulary.
    """
    if state.done:
        return frozenset()
    key = state.world_key()
    cached = spec._valid_cache.get(key)
    if cached is not None:
        return cached
    words = (set(_visible(spec, state)) | set(state.inventory) | set(DIRECTIONS)) & spec.vocabulary
    result = frozenset(inst.canonical_text for inst in spec.grammar.enumerate(words)
                       if _changes(spec, state, inst.canonical_text))
    spec._valid_cache[key] = result
    return result


def brute_force_valid_actions(spec: GameSpec, state: EnvState) -> frozenset[str]:
    if state.done:
        return frozenset()
    return frozenset(inst.canonical_text for inst in spec.grammar.enumerate()
                     if _changes(spec, state, inst.canonical_text))


class Env:
    """Mutable convenience wrapper around the pure transition functions."""

    def __init__(self, spec: GameSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.state, self.obs = reset(spec, seed)

    def reset(self) -> Observation:
        self.state, self.obs = reset(self.spec, self.seed)
        return self.obs

    def step(self, action: str) -> tuple[Observation, bool]:
        self.state, self.obs, done = step(self.spec, self.state, action)
        return self.obs, done

    def valid_actions(self) -> frozenset[str]:
        return valid_actions(self.spec, self.state)
