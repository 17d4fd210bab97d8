"""Pattern language and rewrite-rule engine over e-graphs.

Rules are written as s-expressions: ``(mul ?x 2) => (shl ?x 1)``. A rule with
several source patterns (all of which must match with consistent bindings)
separates sources and targets with ``|&|``. Operator attributes go in square
brackets after the head: ``(split[1,0] ?x)`` matches concrete attribute values,
``(conv2d[?p] ?x ?w)`` binds the whole attribute tuple to ``?p``.

Matching binds ``?vars`` to e-classes. Applying a rule instantiates each target
and merges it with the e-class matched by the corresponding source. Instantiations
that would make the represented program cyclic are skipped (counted in the
report), as are instantiations whose inferred shape disagrees with the matched
class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

from .egraph import EGraph, ENode, StructuralError, Symbol, node_sort_key


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 1, col: int = 1) -> None:
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class UnboundVariableError(ValueError):
    pass


class InstantiationError(ValueError):
    """A target instantiation is invalid for the bound classes (e.g. shape clash)."""


# -- patterns ----------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class PVar:
    """Attribute-slot variable inside [...] brackets."""

    name: str


ParamSlot = Union[int, str, PVar]


@dataclass(frozen=True)
class App:
    name: str
    params: Optional[tuple[ParamSlot, ...]]
    children: tuple["Pattern", ...]


Pattern = Union[Var, App]


def pattern_vars(pat: Pattern) -> set[str]:
    if isinstance(pat, Var):
        return {pat.name}
    out: set[str] = set()
    for child in pat.children:
        out |= pattern_vars(child)
    return out


def pattern_pvars(pat: Pattern) -> set[str]:
    if isinstance(pat, Var):
        return set()
    out = {slot.name for slot in (pat.params or ()) if isinstance(slot, PVar)}
    for child in pat.children:
        out |= pattern_pvars(child)
    return out


def print_pattern(pat: Pattern) -> str:
    if isinstance(pat, Var):
        return f"?{pat.name}"
    head = pat.name
    if pat.params is not None:
        slots = ",".join(f"?{s.name}" if isinstance(s, PVar) else str(s) for s in pat.params)
        head += f"[{slots}]"
    if not pat.children:
        return head
    return "(" + " ".join([head] + [print_pattern(c) for c in pat.children]) + ")"


# -- rules -------------------------------------------------------------------


@dataclass
class Rule:
    id: int
    name: str
    sources: list[Pattern]
    targets: list[Pattern]

    @property
    def kind(self) -> str:
        return "multi" if len(self.sources) >= 2 else "single"

    def __post_init__(self) -> None:
        if not self.sources:
            raise UnboundVariableError("rule has no source pattern")
        if len(self.sources) != len(self.targets):
            raise RuleSyntaxError("source/target pattern counts differ")
        bound = set().union(*(pattern_vars(s) for s in self.sources))
        bound_p = set().union(*(pattern_pvars(s) for s in self.sources))
        for tgt in self.targets:
            loose = pattern_vars(tgt) - bound
            if loose:
                raise UnboundVariableError(
                    f"target variables not bound by any source: {sorted(loose)}"
                )
            loose_p = pattern_pvars(tgt) - bound_p
            if loose_p:
                raise UnboundVariableError(
                    f"target attribute variables not bound by any source: {sorted(loose_p)}"
                )


def print_rule(rule: Rule) -> str:
    src = " |&| ".join(print_pattern(p) for p in rule.sources)
    tgt = " |&| ".join(print_pattern(p) for p in rule.targets)
    return f"{src} => {tgt}"


# -- parsing -----------------------------------------------------------------

_ATOM_RE = re.compile(r"[^\s()]+")


def _tokenize(text: str, line: int = 1):
    col = 0
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in " \t":
            i += 1
            continue
        if ch in "()":
            yield ch, line, i + 1
            i += 1
            continue
        m = _ATOM_RE.match(text, i)
        assert m is not None
        yield m.group(0), line, i + 1
        i = m.end()


def _parse_atom(tok: str, line: int, col: int) -> tuple[str, Optional[tuple[ParamSlot, ...]], bool]:
    """Returns (name, params, is_var)."""
    if tok.startswith("?"):
        if len(tok) == 1:
            raise RuleSyntaxError("empty variable name", line, col)
        return tok[1:], None, True
    params: Optional[tuple[ParamSlot, ...]] = None
    name = tok
    if "[" in tok:
        if not tok.endswith("]"):
            raise RuleSyntaxError(f"malformed attribute list in {tok!r}", line, col)
        name, body = tok[:-1].split("[", 1)
        slots: list[ParamSlot] = []
        for part in body.split(","):
            part = part.strip()
            if not part:
                raise RuleSyntaxError(f"empty attribute slot in {tok!r}", line, col)
            if part.startswith("?"):
                slots.append(PVar(part[1:]))
            elif re.fullmatch(r"-?\d+", part):
                slots.append(int(part))
            else:
                slots.append(part)
        params = tuple(slots)
    if not name:
        raise RuleSyntaxError(f"missing operator name in {tok!r}", line, col)
    return name, params, False


def parse_pattern(text: str, line: int = 1) -> Pattern:
    tokens = list(_tokenize(text, line))
    pos = 0

    def parse() -> Pattern:
        nonlocal pos
        if pos >= len(tokens):
            raise RuleSyntaxError("unexpected end of pattern", line, len(text) + 1)
        tok, ln, col = tokens[pos]
        pos += 1
        if tok == ")":
            raise RuleSyntaxError("unexpected ')'", ln, col)
        if tok == "(":
            if pos >= len(tokens):
                raise RuleSyntaxError("unterminated '('", ln, col)
            head, ln2, col2 = tokens[pos]
            pos += 1
            if head in "()":
                raise RuleSyntaxError("expected operator after '('", ln2, col2)
            name, params, is_var = _parse_atom(head, ln2, col2)
            if is_var:
                raise RuleSyntaxError("variable cannot head an application", ln2, col2)
            children = []
            while True:
                if pos >= len(tokens):
                    raise RuleSyntaxError("unterminated '('", ln, col)
                if tokens[pos][0] == ")":
                    pos += 1
                    break
                children.append(parse())
            return App(name, params, tuple(children))
        name, params, is_var = _parse_atom(tok, ln, col)
        if is_var:
            return Var(name)
        return App(name, params, ())

    result = parse()
    if pos != len(tokens):
        tok, ln, col = tokens[pos]
        raise RuleSyntaxError(f"trailing input {tok!r}", ln, col)
    return result


def parse_rule(text: str, rule_id: int = 0, line: int = 1) -> Rule:
    body = text.split("#", 1)[0].strip()
    if "=>" not in body:
        raise RuleSyntaxError("missing '=>'", line, 1)
    lhs, rhs = body.split("=>", 1)
    sources = [parse_pattern(p.strip(), line) for p in lhs.split("|&|")]
    targets = [parse_pattern(p.strip(), line) for p in rhs.split("|&|")]
    rule = Rule(rule_id, "", sources, targets)
    rule.name = print_rule(rule)
    return rule


def parse_rules(text: str) -> list[Rule]:
    rules = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        rules.append(parse_rule(stripped, rule_id=len(rules), line=ln))
    return rules


def load_rules(path_or_name: str) -> list[Rule]:
    """Load rules from a file path or a bundled set name (e.g. 'toy_math')."""
    import importlib.resources as resources
    from pathlib import Path

    candidate = Path(path_or_name)
    if candidate.exists():
        return parse_rules(candidate.read_text())
    bundle = resources.files("esat").joinpath(f"rules/{path_or_name}.rules")
    if bundle.is_file():
        return parse_rules(bundle.read_text())
    raise FileNotFoundError(f"no rule file or bundled rule set named {path_or_name!r}")


# -- languages ---------------------------------------------------------------


class Language:
    """How the rewrite engine interprets symbols of one operator alphabet."""

    def node_params(self, symbol: Symbol) -> tuple:
        """Attribute tuple exposed to [...] pattern slots."""
        return ()

    def make_symbol(self, name: str, params: tuple, child_shapes: tuple) -> Symbol:
        """Build a concrete symbol for a target instantiation; may raise InstantiationError."""
        raise NotImplementedError

    def symbol_shape(self, symbol: Symbol):
        return None

    def class_shape(self, egraph: EGraph, cid: int):
        cls = egraph.classes[egraph.find(cid)]
        for node in cls.nodes:
            return self.symbol_shape(node.symbol)
        return None


class TermLanguage(Language):
    """Plain symbolic terms: integer atoms are constants, no shapes."""

    def make_symbol(self, name: str, params: tuple, child_shapes: tuple) -> Symbol:
        payload = int(name) if re.fullmatch(r"-?\d+", name) else None
        return Symbol(name, len(child_shapes), payload)

    def class_shape(self, egraph: EGraph, cid: int):
        return None


_TERM_LANGUAGE = TermLanguage()


def _language_of(egraph: EGraph, language) -> object:
    return language or egraph.language or _TERM_LANGUAGE


# -- matching ----------------------------------------------------------------


@dataclass(frozen=True)
class Substitution:
    """Variable bindings plus the matched root class per source pattern."""

    vars: tuple[tuple[str, int], ...]
    params: tuple[tuple[str, object], ...]
    roots: tuple[int, ...] = ()

    def var(self, name: str) -> int:
        return dict(self.vars)[name]

    def param(self, name: str):
        return dict(self.params)[name]


@dataclass(frozen=True)
class _Binds:
    vars: tuple[tuple[str, int], ...] = ()
    params: tuple[tuple[str, object], ...] = ()

    def get_var(self, name: str) -> Optional[int]:
        for k, v in self.vars:
            if k == name:
                return v
        return None

    def get_param(self, name: str):
        for k, v in self.params:
            if k == name:
                return v
        return None

    def with_var(self, name: str, cid: int) -> "_Binds":
        return _Binds(self.vars + ((name, cid),), self.params)

    def with_param(self, name: str, value) -> "_Binds":
        return _Binds(self.vars, self.params + ((name, value),))


def _match_param_spec(language, spec, symbol: Symbol, binds: _Binds) -> Optional[_Binds]:
    if spec is None:
        return binds
    actual = tuple(language.node_params(symbol))
    if len(spec) != len(actual):
        return None
    for slot, value in zip(spec, actual):
        if isinstance(slot, PVar):
            bound = binds.get_param(slot.name)
            if bound is None:
                binds = binds.with_param(slot.name, value)
            elif bound != value:
                return None
        elif slot != value:
            return None
    return binds


def _match_in_class(
    egraph: EGraph, language, pat: Pattern, cid: int, binds: _Binds
) -> Iterable[_Binds]:
    cid = egraph.find(cid)
    if isinstance(pat, Var):
        bound = binds.get_var(pat.name)
        if bound is None:
            yield binds.with_var(pat.name, cid)
        elif egraph.find(bound) == cid:
            yield binds
        return
    for node in sorted(egraph.classes[cid].nodes, key=node_sort_key):
        if node.symbol.name != pat.name or node.symbol.arity != len(pat.children):
            continue
        next_binds = _match_param_spec(language, pat.params, node.symbol, binds)
        if next_binds is None:
            continue
        partial = [next_binds]
        for cpat, ccid in zip(pat.children, node.children):
            partial = [b2 for b in partial for b2 in _match_in_class(egraph, language, cpat, ccid, b)]
            if not partial:
                break
        yield from partial


def _subst_key(sub: Substitution) -> tuple:
    return (sub.roots, tuple(sorted(sub.vars)), tuple(sorted(sub.params)))


def ematch(egraph: EGraph, pattern: Pattern, language=None) -> list[Substitution]:
    """All substitutions of `pattern` against a rebuilt e-graph, deterministically ordered."""
    return joint_match(egraph, [pattern], language)


def joint_match(egraph: EGraph, patterns: list[Pattern], language=None) -> list[Substitution]:
    """Match several patterns left-to-right, threading variable bindings across them."""
    if egraph.dirty:
        raise StructuralError("ematch requires a rebuilt e-graph")
    language = _language_of(egraph, language)
    partial: list[tuple[_Binds, tuple[int, ...]]] = [(_Binds(), ())]
    for pat in patterns:
        extended = []
        for binds, roots in partial:
            for cid in egraph.canonical_class_ids():
                for b2 in _match_in_class(egraph, language, pat, cid, binds):
                    extended.append((b2, roots + (cid,)))
        partial = extended
        if not partial:
            break
    results = {}
    for binds, roots in partial:
        # keep the first binding per variable (later rebinds are duplicates by construction)
        seen_vars: dict[str, int] = {}
        for k, v in binds.vars:
            seen_vars.setdefault(k, v)
        seen_params: dict[str, tuple] = {}
        for k, v in binds.params:
            seen_params.setdefault(k, v)
        sub = Substitution(
            tuple(sorted(seen_vars.items())), tuple(sorted(seen_params.items())), roots
        )
        results[_subst_key(sub)] = sub
    return [results[k] for k in sorted(results)]


# -- application -------------------------------------------------------------


@dataclass
class ApplyReport:
    rule_id: int
    matches_found: int = 0
    changed: bool = False
    nodes_after: int = 0
    classes_after: int = 0
    hit_node_limit: bool = False
    cycles_filtered: int = 0
    shape_filtered: int = 0


def _resolve_params(pat: App, sub: Substitution) -> tuple:
    if pat.params is None:
        return ()
    out = []
    for slot in pat.params:
        out.append(sub.param(slot.name) if isinstance(slot, PVar) else slot)
    return tuple(out)


def _target_refs(egraph: EGraph, language, pat: Pattern, sub: Substitution) -> tuple[set[int], Optional[int]]:
    """Existing classes an instantiation of `pat` would reference, without inserting.

    Returns (reference classes, class id if the full instance already exists).
    """
    if isinstance(pat, Var):
        cid = egraph.find(sub.var(pat.name))
        return {cid}, cid
    refs: set[int] = set()
    child_ids: list[int] = []
    all_exist = True
    for child in pat.children:
        crefs, ccid = _target_refs(egraph, language, child, sub)
        refs |= crefs
        if ccid is None:
            all_exist = False
        else:
            child_ids.append(ccid)
    if all_exist:
        shapes = tuple(language.class_shape(egraph, c) for c in child_ids)
        symbol = language.make_symbol(pat.name, _resolve_params(pat, sub), shapes)
        node = egraph.canonicalize(ENode(symbol, tuple(child_ids)))
        existing = egraph.hashcons.get(node)
        if existing is not None:
            return {egraph.find(existing)}, egraph.find(existing)
    return refs, None


def would_create_cycle(
    egraph: EGraph, target_instance_root_children: Iterable[int], matched_root: int
) -> bool:
    """True iff matched_root is reachable from any candidate child via child edges."""
    goal = egraph.find(matched_root)
    stack = [egraph.find(c) for c in target_instance_root_children]
    seen: set[int] = set()
    while stack:
        cid = stack.pop()
        if cid == goal:
            return True
        if cid in seen:
            continue
        seen.add(cid)
        for node in egraph.classes[cid].nodes:
            for child in node.children:
                stack.append(egraph.find(child))
    return False


def _instance_shape(egraph: EGraph, language, pat: Pattern, sub: Substitution):
    """Shape the instantiated pattern would have, computed without inserting anything."""
    if isinstance(pat, Var):
        return language.class_shape(egraph, egraph.find(sub.var(pat.name)))
    shapes = tuple(_instance_shape(egraph, language, c, sub) for c in pat.children)
    symbol = language.make_symbol(pat.name, _resolve_params(pat, sub), shapes)
    return language.symbol_shape(symbol)


def _instantiate(egraph: EGraph, language, pat: Pattern, sub: Substitution) -> int:
    if isinstance(pat, Var):
        return egraph.find(sub.var(pat.name))
    child_ids = tuple(_instantiate(egraph, language, c, sub) for c in pat.children)
    shapes = tuple(language.class_shape(egraph, c) for c in child_ids)
    symbol = language.make_symbol(pat.name, _resolve_params(pat, sub), shapes)
    return egraph.add(ENode(symbol, child_ids))


def apply_rule(egraph: EGraph, rule: Rule, node_limit: int = 0, language=None) -> ApplyReport:
    """Apply every match of `rule`, union targets with matched classes, and rebuild.

    All matches are collected before any insertion. Instantiations that would
    introduce a cycle (matched class reachable from the new node's children) or
    whose shape disagrees with the matched class are skipped. The node limit is
    checked after the whole application; the application is never rolled back.
    """
    language = _language_of(egraph, language)
    if node_limit:
        current = egraph.size()[0]
        if current >= node_limit:
            raise StructuralError(
                f"node limit {node_limit} not above current node count {current}"
            )
    report = ApplyReport(rule_id=rule.id)
    matches = joint_match(egraph, rule.sources, language)
    report.matches_found = len(matches)
    version_before = egraph.version
    for sub in matches:
        for k, target in enumerate(rule.targets):
            matched_root = egraph.find(sub.roots[k])
            try:
                refs, existing = _target_refs(egraph, language, target, sub)
            except InstantiationError:
                report.shape_filtered += 1
                continue
            if existing is not None and existing == matched_root:
                continue
            if would_create_cycle(egraph, refs, matched_root):
                report.cycles_filtered += 1
                continue
            try:
                shape = _instance_shape(egraph, language, target, sub)
            except InstantiationError:
                report.shape_filtered += 1
                continue
            matched_shape = language.class_shape(egraph, matched_root)
            if shape is not None and matched_shape is not None and shape != matched_shape:
                report.shape_filtered += 1
                continue
            instance = _instantiate(egraph, language, target, sub)
            egraph.union(instance, matched_root)
    egraph.rebuild()
    report.changed = egraph.version != version_before
    report.nodes_after, report.classes_after = egraph.size()
    report.hit_node_limit = bool(node_limit) and report.nodes_after >= node_limit
    return report


# -- applicability / saturation ----------------------------------------------


def is_rule_applicable(egraph: EGraph, rule: Rule, language=None) -> bool:
    """Cheap pruning check: False guarantees apply_rule would report changed=False.

    A single-pattern rule is applicable iff its source matches; a multi-pattern
    rule is inapplicable as soon as any one source has no match on its own.
    """
    language = _language_of(egraph, language)
    for source in rule.sources:
        if not ematch(egraph, source, language):
            return False
    return True


def is_saturated(egraph: EGraph, rules: list[Rule], node_limit: int = 0, language=None) -> bool:
    """True iff no rule changes the e-graph; runs on snapshots, input untouched."""
    for rule in rules:
        snap = egraph.snapshot()
        if apply_rule(snap, rule, 0, language).changed:
            return False
    return True
