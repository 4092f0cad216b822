"""Template action space: filling, parsing and enumerating action strings.

A template such as ``take|carry __`` or ``throw|discard|put __ against|on|down __``
holds interchangeable verb aliases, an optional preposition alias group and up
to two blanks.  Actions are built by filling blanks with vocabulary words.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

BLANK = "__"
MAX_BLANKS = 2


class GrammarError(ValueError):
    pass


class ArityError(GrammarError):
    pass


class UnknownWordError(GrammarError):
    pass


def canonicalize(text: str) -> str:
    """Lower-case and collapse runs of whitespace."""
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class ActionTemplate:
    id: str
    verb_aliases: tuple[str, ...]
    prepositions: tuple[str, ...] = ()
    blanks: int = 0

    def __post_init__(self):
        if not self.verb_aliases:
            raise GrammarError(f"template {self.id!r} has no verb")
        if not 0 <= self.blanks <= MAX_BLANKS:
            raise GrammarError(f"template {self.id!r} has {self.blanks} blanks (max {MAX_BLANKS})")
        if self.prepositions and self.blanks != 2:
            raise GrammarError(f"template {self.id!r}: a preposition needs two blanks")

    @property
    def preposition(self) -> str | None:
        return self.prepositions[0] if self.prepositions else None

    @property
    def verb(self) -> str:
        return self.verb_aliases[0]

    @property
    def surface_pattern(self) -> str:
        parts = [self.verb]
        if self.blanks >= 1:
            parts.append(BLANK)
        if self.preposition:
            parts.append(self.preposition)
        if self.blanks == 2:
            parts.append(BLANK)
        return " ".join(parts)

    @property
    def literal_count(self) -> int:
        verb_words = len(self.verb.split())
        prep_words = len(self.preposition.split()) if self.preposition else 0
        return verb_words + prep_words

    @classmethod
    def from_pattern(cls, template_id: str, pattern: str) -> "ActionTemplate":
        """Parse ``take|carry __`` style patterns.

        Alias groups are ``|``-separated; multi-word aliases use ``+`` between
        words (``pick+up``).  Exactly the tokens ``__`` are blanks.
        """
        tokens = canonicalize(pattern).split()
        if not tokens or tokens[0] == BLANK:
            raise GrammarError(f"template {template_id!r}: pattern must start with a verb")
        groups = [tuple(alias.replace("+", " ") for alias in tok.split("|")) for tok in tokens]
        blanks = sum(1 for tok in tokens if tok == BLANK)
        shape = ["V" if tok != BLANK else "_" for tok in tokens]
        preps: tuple[str, ...] = ()
        if shape == ["V"] or shape == ["V", "_"]:
            pass
        elif shape == ["V", "_", "V", "_"]:
            preps = groups[2]
        elif shape == ["V", "_", "_"]:
            pass
        else:
            raise GrammarError(f"template {template_id!r}: unsupported pattern {pattern!r}")
        return cls(id=template_id, verb_aliases=groups[0], prepositions=preps, blanks=blanks)


@dataclass(frozen=True)
class ActionInstance:
    template: ActionTemplate
    fillers: tuple[str, ...]
    canonical_text: str


class _NoMatch:
    """Signal value returned by :func:`parse_action` when nothing matches."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self):
        return False

    def __repr__(self):
        return "NoMatch"


NoMatch = _NoMatch()


def _render(template: ActionTemplate, fillers: Sequence[str]) -> str:
    parts = [template.verb]
    if template.blanks >= 1:
        parts.append(fillers[0])
    if template.preposition:
        parts.append(template.preposition)
    if template.blanks == 2:
        parts.append(fillers[1])
    return canonicalize(" ".join(parts))


def fill_template(template: ActionTemplate, fillers: Sequence[str],
                  vocabulary: Iterable[str] | None = None) -> ActionInstance:
    fillers = tuple(canonicalize(f) for f in fillers)
    if len(fillers) != template.blanks:
        raise ArityError(f"template {template.id!r} takes {template.blanks} fillers, got {len(fillers)}")
    if vocabulary is not None:
        vocab = vocabulary if isinstance(vocabulary, (set, frozenset)) else set(vocabulary)
        for word in fillers:
            if word not in vocab:
                raise UnknownWordError(f"{word!r} is not in the vocabulary")
    return ActionInstance(template, fillers, _render(template, fillers))


def _match(template: ActionTemplate, tokens: list[str], vocab) -> tuple[str, ...] | None:
    def strip_prefix(words: list[str], aliases) -> list[str] | None:
        for alias in sorted(aliases, key=lambda a: -len(a.split())):
            alias_words = alias.split()
            if words[:len(alias_words)] == alias_words:
                return words[len(alias_words):]
        return None

    rest = strip_prefix(tokens, template.verb_aliases)
    if rest is None:
        return None
    if template.blanks == 0:
        return () if not rest else None
    if template.blanks == 1:
        return (rest[0],) if len(rest) == 1 and rest[0] in vocab else None
    if not template.prepositions:
        return tuple(rest) if len(rest) == 2 and all(w in vocab for w in rest) else None
    if len(rest) < 3 or rest[0] not in vocab:
        return None
    tail = strip_prefix(rest[1:], template.prepositions)
    if tail is None or len(tail) != 1 or tail[0] not in vocab:
        return None
    return (rest[0], tail[0])


class Grammar:
    """Immutable template table plus filler vocabulary."""

    def __init__(self, templates: Sequence[ActionTemplate], vocabulary: Iterable[str]):
        self.templates = tuple(templates)
        self.vocabulary = frozenset(canonicalize(w) for w in vocabulary)
        self.by_id = {t.id: t for t in self.templates}
        if len(self.by_id) != len(self.templates):
            raise GrammarError("duplicate template ids")
        # tie-break order: more literal tokens first, then smallest id
        self._order = sorted(self.templates, key=lambda t: (-t.literal_count, t.id))
        self._cache: dict[str, ActionInstance | _NoMatch] = {}

    def parse(self, text: str) -> ActionInstance | _NoMatch:
        key = canonicalize(text)
        hit = self._cache.get(key)
        if hit is None:
            hit = parse_action(key, self._order, self.vocabulary)
            self._cache[key] = hit
        return hit

    def fill(self, template: ActionTemplate | str, fillers: Sequence[str]) -> ActionInstance:
        if isinstance(template, str):
            template = self.by_id[template]
        return fill_template(template, fillers, self.vocabulary)

    def enumerate(self, words: Iterable[str] | None = None) -> Iterator[ActionInstance]:
        words = sorted(self.vocabulary if words is None else words)
        for template in self.templates:
            for combo in itertools.product(words, repeat=template.blanks):
                yield ActionInstance(template, combo, _render(template, combo))

    def entities(self, action: str) -> tuple[str, ...]:
        """Filler words of a parsed action; empty for unparseable text."""
        inst = self.parse(action)
        return inst.fillers if inst else ()


def parse_action(text: str, templates: Sequence[ActionTemplate],
                 vocabulary: Iterable[str]) -> ActionInstance | _NoMatch:
    vocab = vocabulary if isinstance(vocabulary, (set, frozenset)) else set(vocabulary)
    tokens = re.sub(r"[^\w\s-]", " ", canonicalize(text)).split()
    if not tokens:
        return NoMatch
    order = sorted(templates, key=lambda t: (-t.literal_count, t.id))
    for template in order:
        fillers = _match(template, tokens, vocab)
        if fillers is not None:
            return ActionInstance(template, fillers, _render(template, fillers))
    return NoMatch


def action_space_size(template_count: int, vocab_size: int, max_blanks: int) -> int:
    """Upper bound T * V**max_blanks on the number of template actions."""
    if min(template_count, vocab_size, max_blanks) < 0:
        raise ValueError("arguments must be non-negative")
    return template_count * vocab_size ** max_blanks


def enumerate_count(templates: Sequence[ActionTemplate], vocab_size: int) -> int:
    return sum(vocab_size ** t.blanks for t in templates)
