import itertools

import pytest
from hypothesis import given, strategies as st

from hexplain.grammar import (
    ActionTemplate, ArityError, Grammar, GrammarError, NoMatch, UnknownWordError, action_space_size,
    canonicalize, enumerate_count, fill_template, parse_action,
)

TAKE = ActionTemplate.from_pattern("take", "take|carry|get __")
THROW = ActionTemplate.from_pattern("throw", "throw|discard|put __ against|on|down __")
LOOK = ActionTemplate.from_pattern("look", "look|l")
PICK = ActionTemplate.from_pattern("pickup", "pick+up __")
WORDS = ["egg", "tree", "nest", "lamp", "key"]


def small_grammar():
    return Grammar([TAKE, THROW, LOOK], WORDS)


class TestActionSpaceSize:
    def test_reference_magnitude(self):
        assert action_space_size(200, 700, 2) == 98_000_000

    def test_no_templates(self):
        assert action_space_size(0, 700, 2) == 0

    def test_small_case_matches_enumeration(self):
        templates = [ActionTemplate(f"t{i}", (f"verb{i}",), (), 2) for i in range(3)]
        words = ["a", "b", "c", "d", "e"]
        brute = sum(1 for t in templates for _ in itertools.product(words, repeat=t.blanks))
        assert action_space_size(3, 5, 2) == 75 == brute

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            action_space_size(-1, 5, 2)

    @given(st.lists(st.integers(0, 2), min_size=1, max_size=3), st.integers(1, 5))
    def test_enumeration_bounded_by_formula(self, blanks, vocab_size):
        templates = [ActionTemplate(f"t{i}", (f"v{i}",), (), b) for i, b in enumerate(blanks)]
        words = [f"w{j}" for j in range(vocab_size)]
        listed = list(Grammar(templates, words).enumerate())
        assert len(listed) == enumerate_count(templates, vocab_size)
        assert len(listed) <= action_space_size(len(templates), vocab_size, max(blanks))


class TestFill:
    def test_single_blank(self):
        assert fill_template(TAKE, ["egg"]).canonical_text == "take egg"

    def test_preposition_template(self):
        assert fill_template(THROW, ["egg", "tree"]).canonical_text == "throw egg against tree"

    def test_zero_blank(self):
        assert fill_template(LOOK, []).canonical_text == "look"

    def test_arity_error(self):
        with pytest.raises(ArityError):
            fill_template(TAKE, ["egg", "tree"])

    def test_unknown_word(self):
        with pytest.raises(UnknownWordError):
            fill_template(TAKE, ["dragon"], WORDS)

    def test_multiword_alias(self):
        assert fill_template(PICK, ["lamp"]).canonical_text == "pick up lamp"


class TestParse:
    def test_alias_equivalence(self):
        g = small_grammar()
        assert g.parse("carry egg") == g.parse("take egg")
        assert g.parse("  TAKE   Egg ") == g.parse("take egg")

    def test_no_match(self):
        assert parse_action("dance wildly", [TAKE, LOOK], WORDS) is NoMatch
        assert not NoMatch

    def test_unknown_filler_is_no_match(self):
        assert small_grammar().parse("take dragon") is NoMatch

    def test_preposition_aliases(self):
        g = small_grammar()
        inst = g.parse("put egg on tree")
        assert inst.template is THROW and inst.fillers == ("egg", "tree")
        assert inst.canonical_text == "throw egg against tree"

    def test_exhaustive_round_trip(self):
        g = small_grammar()
        for inst in g.enumerate():
            parsed = g.parse(inst.canonical_text)
            assert (parsed.template, parsed.fillers) == (inst.template, inst.fillers)

    def test_entities(self):
        assert small_grammar().entities("throw egg down nest") == ("egg", "nest")
        assert small_grammar().entities("xyzzy") == ()

    def test_duplicate_ids(self):
        with pytest.raises(GrammarError):
            Grammar([TAKE, TAKE], WORDS)


class TestTemplatePatterns:
    def test_bad_patterns(self):
        for pattern in ["__ egg", "take __ __ __", "take on __", ""]:
            with pytest.raises(GrammarError):
                ActionTemplate.from_pattern("bad", pattern)

    def test_surface_pattern(self):
        assert THROW.surface_pattern == "throw __ against __"
        assert LOOK.literal_count == 1 and THROW.literal_count == 2



@given(verb=st.sampled_from(THROW.verb_aliases), prep=st.sampled_from(THROW.prepositions),
       a=st.sampled_from(WORDS), b=st.sampled_from(WORDS))
def test_round_trip_any_alias_spelling(verb, prep, a, b):
    g = small_grammar()
    inst = g.parse(f"{verb} {a} {prep} {b}")
    assert (inst.template, inst.fillers) == (THROW, (a, b))
    assert inst.canonical_text == fill_template(THROW, [a, b]).canonical_text


@given(st.sampled_from(TAKE.verb_aliases), st.sampled_from(WORDS))
def test_alias_spellings_share_canonical_text(verb, word):
    assert small_grammar().parse(f"{verb} {word}").canonical_text == f"take {word}"


@given(st.text(alphabet="abc XYZ\t\n", max_size=30))
def test_canonicalize_idempotent(text):
    once = canonicalize(text)
    assert canonicalize(once) == once
    assert once == once.lower().strip()
