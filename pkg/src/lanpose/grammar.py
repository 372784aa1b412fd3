"""Closed instruction grammar: generation, parsing, grounding, tokenizing.

The grammar is finite by construction (fixed templates, a closed phrase
lexicon, closed shape/color vocabularies), so parsing is exact pattern
matching rather than statistical: every input either yields a Command or a
typed ParseError.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

import numpy as np

from .errors import (
    AmbiguousReferent,
    AmbiguousScene,
    MalformedStructure,
    NoReferent,
    UnknownAction,
    UnknownAttribute,
)

PAD_ID = 0
UNK_ID = 1


class AssemblyAction(enum.Enum):
    INSERT_TO = "insert_to"
    COMBINE_WITH = "combine_with"
    STACK_ON = "stack_on"
    ASSEMBLE_FRONT = "assemble_front"
    ASSEMBLE_RIGHT = "assemble_right"
    ASSEMBLE_LEFT = "assemble_left"
    ASSEMBLE_BACK = "assemble_back"


ACTIONS = tuple(AssemblyAction)


@dataclass(frozen=True)
class ObjectDescriptor:
    shape: str
    color: str

    def __str__(self):
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Command:
    action: AssemblyAction
    target: ObjectDescriptor
    base: ObjectDescriptor

    def to_json(self) -> dict:
        return {
            "action": self.action.value,
            "target": {"shape": self.target.shape, "color": self.target.color},
            "base": {"shape": self.base.shape, "color": self.base.color},
        }

    @staticmethod
    def from_json(d: dict) -> "Command":
        return Command(
            action=AssemblyAction(d["action"]),
            target=ObjectDescriptor(d["target"]["shape"], d["target"]["color"]),
            base=ObjectDescriptor(d["base"]["shape"], d["base"]["color"]),
        )


@dataclass(frozen=True)
class Template:
    id: int
    pattern: str

    def render(self, verb: str, prep: str, target: ObjectDescriptor, base: ObjectDescriptor) -> str:
        return self.pattern.format(
            verb=verb,
            prep=prep,
            color1=target.color,
            shape1=target.shape,
            color2=base.color,
            shape2=base.shape,
        )


class Grammar:
    """Immutable lexicon/template tables loaded from a JSON document."""

    def __init__(self, doc: dict):
        self.colors = tuple(doc["colors"])
        self.shape_by_block = dict(doc["shapes"])
        self.shapes = tuple(self.shape_by_block[k] for k in sorted(self.shape_by_block))
        self.templates = tuple(Template(t["id"], t["pattern"]) for t in doc["templates"])
        self.max_tokens = int(doc["max_tokens"])
        self.phrases = {}  # action -> tuple of (verb, prep)
        for name, pairs in doc["phrases"].items():
            self.phrases[AssemblyAction(name)] = tuple((v, p) for v, p in pairs)
        seen = set()
        for action, pairs in self.phrases.items():
            if len(pairs) < 2:
                raise ValueError(f"{action} needs at least two phrases")
            for v, p in pairs:
                full = f"{v} {p}"
                if full in seen:
                    raise ValueError(f"phrase {full!r} appears under two actions")
                seen.add(full)
        self.verbs = frozenset(v for pairs in self.phrases.values() for v, _ in pairs)
        self.pair_to_action = {
            (v, p): action for action, pairs in self.phrases.items() for v, p in pairs
        }
        self.vocab = self._build_vocab()
        self.token_ids = {w: i for i, w in enumerate(self.vocab)}

    def _build_vocab(self) -> tuple:
        words = set(self.colors) | set(self.shapes)
        for pairs in self.phrases.values():
            for v, p in pairs:
                words.add(v)
                words.update(p.split())
        for t in self.templates:
            for tok in t.pattern.split():
                if not tok.startswith("{"):
                    words.add(tok)
        return ("<pad>", "<unk>") + tuple(sorted(words))


def _load_default_doc() -> dict:
    with resources.files("lanpose.data").joinpath("grammar.json").open("r") as f:
        return json.load(f)


@lru_cache(maxsize=1)
def default_grammar() -> Grammar:
    return Grammar(_load_default_doc())


def load_grammar(path: Optional[str] = None) -> Grammar:
    if path is None:
        return default_grammar()
    with open(path) as f:
        return Grammar(json.load(f))


def phrase_lexicon(grammar: Optional[Grammar] = None) -> dict:
    """Map from action to its full surface phrases ('verb prep' strings)."""
    g = grammar or default_grammar()
    return {a: [f"{v} {p}" for v, p in pairs] for a, pairs in g.phrases.items()}


_WORD_RE = re.compile(r"[a-z]+")


def normalize(text: str) -> list:
    """Lowercase, strip punctuation, split into word tokens."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, grammar: Optional[Grammar] = None) -> list:
    """Token ids, right-padded to the fixed length; unknown words map to UNK."""
    g = grammar or default_grammar()
    words = normalize(text)[: g.max_tokens]
    ids = [g.token_ids.get(w, UNK_ID) for w in words]
    ids += [PAD_ID] * (g.max_tokens - len(ids))
    return ids


def _parse_descriptor(tokens: list, g: Grammar) -> ObjectDescriptor:
    if len(tokens) != 3 or tokens[0] != "the":
        raise MalformedStructure(f"expected 'the <color> <shape>', got {' '.join(tokens)!r}")
    color, shape = tokens[1], tokens[2]
    if color not in g.colors:
        raise UnknownAttribute(f"unknown color {color!r}")
    if shape not in g.shapes:
        raise UnknownAttribute(f"unknown shape {shape!r}")
    return ObjectDescriptor(shape=shape, color=color)


def _parse_tail(verb: str, rest: list, g: Grammar) -> tuple:
    """rest = <prep words> the <color2> <shape2>; returns (action, base)."""
    if len(rest) < 4:
        raise MalformedStructure("missing preposition or base object")
    base = _parse_descriptor(rest[-3:], g)
    prep = " ".join(rest[:-3])
    action = g.pair_to_action.get((verb, prep))
    if action is None:
        raise UnknownAction(f"no action phrase {verb!r} ... {prep!r}")
    return action, base


def parse(text: str, grammar: Optional[Grammar] = None) -> Command:
    """Parse an instruction into a Command or raise a typed ParseError."""
    g = grammar or default_grammar()
    t = normalize(text)
    if not t:
        raise MalformedStructure("empty instruction")

    if t[0] == "grab" or t[:2] == ["pick", "up"]:
        i = 1 if t[0] == "grab" else 2
        if len(t) < i + 6:
            raise MalformedStructure("instruction too short")
        target = _parse_descriptor(t[i : i + 3], g)
        if t[i + 3] != "and":
            raise MalformedStructure("expected 'and' after the first object")
        verb = t[i + 4]
        if verb not in g.verbs:
            raise UnknownAction(f"unknown verb {verb!r}")
        if t[i + 5] != "it":
            raise MalformedStructure("expected 'it' after the verb")
        action, base = _parse_tail(verb, t[i + 6 :], g)
        return Command(action, target, base)

    i = 1 if t[0] == "please" else 0
    if i >= len(t):
        raise MalformedStructure("empty instruction")
    verb = t[i]
    if verb not in g.verbs:
        raise UnknownAction(f"unknown verb {verb!r}")
    if len(t) < i + 5:
        raise MalformedStructure("instruction too short")
    target = _parse_descriptor(t[i + 1 : i + 4], g)
    action, base = _parse_tail(verb, t[i + 4 :], g)
    return Command(action, target, base)


def unique_object_ids(scene) -> list:
    """Ids of objects whose (shape, color) descriptor is unique in the scene."""
    counts = {}
    for o in scene.objects:
        key = (o.descriptor.shape, o.descriptor.color)
        counts[key] = counts.get(key, 0) + 1
    return [
        o.id for o in scene.objects if counts[(o.descriptor.shape, o.descriptor.color)] == 1
    ]


def generate_expression(
    scene,
    rng_seed: int,
    action: Optional[AssemblyAction] = None,
    base_id: Optional[int] = None,
    target_id: Optional[int] = None,
    grammar: Optional[Grammar] = None,
) -> tuple:
    """Generate a referring expression for a scene.

    Samples any unspecified choice (action, object pair, template, phrase)
    deterministically from the seed. Returns (text, command, base_id,
    target_id). Raises AmbiguousScene when the scene has no pair of uniquely
    describable objects.
    """
    g = grammar or default_grammar()
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    eligible = unique_object_ids(scene)
    if len(eligible) < 2:
        raise AmbiguousScene("scene has no uniquely describable object pair")
    by_id = {o.id: o for o in scene.objects}

    if action is None:
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
    if target_id is None:
        pool = [i for i in eligible if i != base_id]
        target_id = pool[int(rng.integers(len(pool)))]
    if base_id is None:
        pool = [i for i in eligible if i != target_id]
        base_id = pool[int(rng.integers(len(pool)))]
    if base_id == target_id or base_id not in eligible or target_id not in eligible:
        raise AmbiguousScene("base/target must be distinct, uniquely describable objects")

    template = g.templates[int(rng.integers(len(g.templates)))]
    pairs = g.phrases[action]
    verb, prep = pairs[int(rng.integers(len(pairs)))]
    target = by_id[target_id].descriptor
    base = by_id[base_id].descriptor
    text = template.render(verb, prep, target, base)
    return text, Command(action, target, base), base_id, target_id


def ground(cmd: Command, scene) -> tuple:
    """Resolve the command's descriptors to object ids: (base_id, target_id)."""

    def find(desc: ObjectDescriptor) -> int:
        matches = [
            o.id
            for o in scene.objects
            if o.descriptor.shape == desc.shape and o.descriptor.color == desc.color
        ]
        if not matches:
            raise NoReferent(f"no object matches '{desc}'")
        if len(matches) > 1:
            raise AmbiguousReferent(f"{len(matches)} objects match '{desc}'")
        return matches[0]

    return find(cmd.base), find(cmd.target)
