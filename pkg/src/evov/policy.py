"""Monotone endorsement policies.

Grammar::

    policy  := AND(policy, ...) | OR(policy, ...) | OUTOF(k, policy, ...) | leaf
    leaf    := org:NAME | id:NAME
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Union

from .core import EvovError
from .msp import Identity


class PolicyParseError(EvovError):
    pass


@dataclass(frozen=True)
class Principal:
    kind: str  # "org" or "id"
    name: str

    def matches(self, ident: Identity) -> bool:
        if self.kind == "org":
            return ident.org == self.name
        return ident.id == self.name

    def __str__(self):
        return f"{self.kind}:{self.name}"


@dataclass(frozen=True)
class OutOf:
    k: int
    children: tuple["Policy", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("policy node needs at least one child")
        if not 1 <= self.k <= len(self.children):
            raise ValueError(f"OUTOF threshold {self.k} outside 1..{len(self.children)}")

    def __str__(self):
        inner = ", ".join(str(c) for c in self.children)
        n = len(self.children)
        if self.k == n and n > 1:
            return f"AND({inner})"
        if self.k == 1 and n > 1:
            return f"OR({inner})"
        return f"OUTOF({self.k}, {inner})"


Policy = Union[Principal, OutOf]


def AND(*children: Policy) -> OutOf:
    return OutOf(len(children), tuple(children))


def OR(*children: Policy) -> OutOf:
    return OutOf(1, tuple(children))


def OUTOF(k: int, *children: Policy) -> OutOf:
    return OutOf(k, tuple(children))


def eval_policy(policy: Policy, endorsers: Iterable[Identity]) -> bool:
    endorsers = list(endorsers)
    return _eval(policy, endorsers)


def _eval(p: Policy, endorsers: list[Identity]) -> bool:
    if isinstance(p, Principal):
        return any(p.matches(e) for e in endorsers)
    need = p.k
    for c in p.children:
        if _eval(c, endorsers):
            need -= 1
            if need == 0:
                return True
    return False


def principals(policy: Policy) -> list[Principal]:
    if isinstance(policy, Principal):
        return [policy]
    return [x for c in policy.children for x in principals(c)]


def names_endorser(policy: Policy, ident: Identity) -> bool:
    """True if some leaf of the policy can be satisfied by ``ident``."""
    return any(p.matches(ident) for p in principals(policy))


def minimal_sets(policy: Policy, candidates: Iterable[Identity]) -> list[tuple[str, ...]]:
    """Minimal sets of candidate ids satisfying ``policy``.

    Sorted by size, then lexicographically, so clients pick deterministically.
    """
    cands = sorted(candidates, key=lambda i: i.id)
    sets = _sets(policy, cands)
    sets = sorted(set(sets), key=lambda s: (len(s), sorted(s)))
    out: list[frozenset] = []
    for s in sets:
        if not any(m <= s for m in out):
            out.append(s)
    return [tuple(sorted(s)) for s in out]


def _sets(p: Policy, cands: list[Identity]) -> list[frozenset]:
    if isinstance(p, Principal):
        return [frozenset([c.id]) for c in cands if p.matches(c)]
    child_sets = [_sets(c, cands) for c in p.children]
    result = []
    for combo in itertools.combinations(child_sets, p.k):
        for pick in itertools.product(*combo):
            result.append(frozenset().union(*pick))
    return result


_TOKEN = re.compile(r"\s*(?:(AND|OR|OUTOF)\s*\(|(\))|(,)|(\d+)(?=\s*,)|((?:org|id):[^\s,()]+))")


def parse_policy(text: str) -> Policy:
    toks = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise PolicyParseError(f"unexpected input at {pos}: {text[pos:pos + 12]!r}")
        toks.append(m.groups())
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    policy, i = _parse(toks, 0, text)
    if i != len(toks):
        raise PolicyParseError("trailing tokens")
    return policy


def _parse(toks, i, text):
    if i >= len(toks):
        raise PolicyParseError(f"unexpected end of policy {text!r}")
    op, close, comma, num, leaf = toks[i]
    if leaf:
        kind, name = leaf.split(":", 1)
        return Principal(kind, name), i + 1
    if not op:
        raise PolicyParseError(f"expected policy in {text!r}")
    i += 1
    k = None
    if op == "OUTOF":
        if i >= len(toks) or toks[i][3] is None:
            raise PolicyParseError("OUTOF needs a threshold")
        k = int(toks[i][3])
        i += 1
        if i >= len(toks) or not toks[i][2]:
            raise PolicyParseError("expected ',' after threshold")
        i += 1
    children = []
    while True:
        child, i = _parse(toks, i, text)
        children.append(child)
        if i >= len(toks):
            raise PolicyParseError("unclosed parenthesis")
        if toks[i][2]:
            i += 1
            continue
        if toks[i][1]:
            i += 1
            break
        raise PolicyParseError("expected ',' or ')'")
    try:
        if op == "AND":
            return OutOf(len(children), tuple(children)), i
        if op == "OR":
            return OutOf(1, tuple(children)), i
        return OutOf(k, tuple(children)), i
    except ValueError as e:
        raise PolicyParseError(str(e)) from None
