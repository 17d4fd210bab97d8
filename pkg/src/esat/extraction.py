"""Program extraction from e-graphs under a per-e-node cost table.

Three extractors share one interface (costs = dict mapping canonical e-nodes
to nonnegative floats):

* extract_default_greedy -- classic bottom-up fixpoint; each e-node is charged
  its operator cost plus the full costs of its children classes, so shared
  subgraphs are counted once per reference and the reported total can
  overestimate the real DAG cost (exponentially so for stacked skip
  connections).
* extract_ocf_greedy -- same fixpoint, but the per-node cost function keeps a
  history of which e-classes already contributed to a cost ("constituent
  costs") and charges only the non-overlapping remainder, so shared subgraphs
  are counted once.
* extract_exact -- branch-and-bound over per-class choices with globally
  minimal unique-node cost, binary choice per node, root coverage, child
  coverage, blacklist exclusion and acyclicity. A brute-force enumerator
  serves as its independent test oracle, and the same constraint system can be
  exported in LP text format for external solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .egraph import EGraph, ENode, node_sort_key


class ExtractionError(ValueError):
    pass


class InfeasibleExtraction(ExtractionError):
    pass


class CapacityError(ExtractionError):
    pass


Costs = dict[ENode, float]


@dataclass
class ExtractionResult:
    total_cost: float
    chosen: dict[int, ENode]  # canonical e-class id -> chosen e-node, over reachable classes
    method: str

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "total_cost": self.total_cost,
            "chosen": {
                str(cid): {
                    "op": node.symbol.name,
                    "payload": repr(node.symbol.payload),
                    "children": list(node.children),
                }
                for cid, node in sorted(self.chosen.items())
            },
        }


def validate_extraction(egraph: EGraph, result: ExtractionResult) -> None:
    """Check root coverage, child coverage and acyclicity of a selection."""
    root = egraph.canonical_root()
    if root not in result.chosen:
        raise ExtractionError("root e-class not chosen")
    state: dict[int, int] = {}

    def visit(cid: int) -> None:
        cid = egraph.find(cid)
        if state.get(cid) == 2:
            return
        if state.get(cid) == 1:
            raise ExtractionError(f"cyclic selection through e-class {cid}")
        if cid not in result.chosen:
            raise ExtractionError(f"child e-class {cid} required but not chosen")
        state[cid] = 1
        for child in result.chosen[cid].children:
            visit(child)
        state[cid] = 2

    visit(root)


def selection_dag_cost(egraph: EGraph, chosen: dict[int, ENode], costs: Costs) -> float:
    """True cost of a selection: every chosen node charged once."""
    total = 0.0
    seen: set[int] = set()
    stack = [egraph.canonical_root()]
    while stack:
        cid = egraph.find(stack.pop())
        if cid in seen:
            continue
        seen.add(cid)
        node = chosen[cid]
        total += costs[node]
        stack.extend(node.children)
    return total


def _reachable_chosen(egraph: EGraph, chosen: dict[int, ENode]) -> dict[int, ENode]:
    out: dict[int, ENode] = {}
    stack = [egraph.canonical_root()]
    while stack:
        cid = egraph.find(stack.pop())
        if cid in out:
            continue
        out[cid] = chosen[cid]
        stack.extend(chosen[cid].children)
    return out


# -- greedy extractors ---------------------------------------------------------


def _greedy_fixpoint(egraph: EGraph, costs: Costs, node_cost, method: str) -> ExtractionResult:
    """Repeated passes in canonical-id order until no class cost strictly improves.

    Classes that never reach a finite cost stay at +inf, which keeps the
    selection cycle-safe: a cost only becomes finite through already-finite
    children.
    """
    if egraph.dirty:
        raise ExtractionError("extraction requires a rebuilt e-graph")
    order = egraph.canonical_class_ids()
    cost: dict[int, float] = {cid: math.inf for cid in order}
    chosen: dict[int, ENode] = {}
    for _ in range(4 * len(order) + 8):
        changed = False
        for cid in order:
            best_value, best_node = math.inf, None
            for node in sorted(egraph.classes[cid].nodes, key=node_sort_key):
                value = node_cost(node, cid, cost)
                if best_node is None or value < best_value:
                    best_value, best_node = value, node
            if best_node is not None and best_value < cost[cid]:
                cost[cid] = best_value
                chosen[cid] = best_node
                changed = True
        if not changed:
            break
    else:
        raise ExtractionError("greedy extraction failed to converge")
    root = egraph.canonical_root()
    if not math.isfinite(cost[root]):
        raise InfeasibleExtraction("root e-class has no finite-cost program")
    result = ExtractionResult(cost[root], _reachable_chosen(egraph, chosen), method)
    validate_extraction(egraph, result)
    return result


def extract_default_greedy(egraph: EGraph, costs: Costs) -> ExtractionResult:
    """Bottom-up fixpoint with the plain cost function: op cost + sum of child class costs."""

    def node_cost(node: ENode, cid: int, cost: dict[int, float]) -> float:
        total = costs[node]
        for child in node.children:
            total += cost[egraph.find(child)]
        return total

    return _greedy_fixpoint(egraph, costs, node_cost, "default_greedy")


@dataclass
class ConstituentHistory:
    """State threaded through ocf_enode_cost across one extraction pass.

    eclass_hist[c] maps every e-class that contributed to c's current best
    cost to the amount it contributed; best_enode_* track the cheapest e-node
    of the class currently being scanned so its history can be flushed into
    eclass_hist when the scan moves on.
    """

    eclass_hist: dict[int, dict[int, float]] = field(default_factory=dict)
    best_enode_cost: float = math.inf
    best_enode_hist: dict[int, float] = field(default_factory=dict)


def ocf_enode_cost(
    enode: ENode,
    eclass: int,
    prev_eclass: Optional[int],
    costs_by_class: dict[int, float],
    op_costs: Costs,
    state: ConstituentHistory,
) -> float:
    """Constituent-cost e-node cost: charge only what the node's history hasn't paid for.

    Per child e-class: (1) skip it entirely when it already appears in this
    node's history, (2) when its constituents overlap the history, subtract the
    largest overlapping contribution (clamped at zero) and inherit only the
    non-overlapping constituents, (3) otherwise charge the full class cost.
    """
    if prev_eclass != eclass:
        if prev_eclass is not None:
            state.eclass_hist[prev_eclass] = state.best_enode_hist
        state.best_enode_cost = math.inf
        state.best_enode_hist = {}

    enode_hist: dict[int, float] = {}
    enode_cost = op_costs[enode]
    for child in enode.children:
        if child in enode_hist:  # case 1: already paid for
            continue
        if child in state.eclass_hist:  # case 2: constituents may overlap
            max_cost = 0.0
            for key, value in state.eclass_hist[child].items():
                if key in enode_hist:
                    max_cost = max(max_cost, value)
                else:
                    enode_hist[key] = value
            child_cost = max(costs_by_class[child] - max_cost, 0.0)
        else:  # case 3: first contact, full price
            child_cost = costs_by_class[child]
        enode_hist[child] = child_cost
        enode_cost = enode_cost + child_cost

    if enode_cost < state.best_enode_cost:
        state.best_enode_hist = enode_hist
        state.best_enode_cost = enode_cost
    return enode_cost


def extract_ocf_greedy(egraph: EGraph, costs: Costs) -> ExtractionResult:
    """Greedy fixpoint using the constituent-cost node function."""
    state = ConstituentHistory()
    prev: list[Optional[int]] = [None]

    def node_cost(node: ENode, cid: int, cost: dict[int, float]) -> float:
        value = ocf_enode_cost(node, cid, prev[0], cost, costs, state)
        prev[0] = cid
        return value

    result = _greedy_fixpoint(egraph, costs, node_cost, "ocf_greedy")
    if prev[0] is not None:  # flush the final class scanned
        state.eclass_hist[prev[0]] = state.best_enode_hist
    return result


# -- exact extractor -----------------------------------------------------------


def _class_children(node: ENode, egraph: EGraph) -> tuple[int, ...]:
    return tuple(dict.fromkeys(egraph.find(c) for c in node.children))


def extract_exact(
    egraph: EGraph,
    costs: Costs,
    blacklist: Iterable[ENode] = (),
    size_bound: int = 5000,
) -> ExtractionResult:
    """Globally minimal unique-node-cost selection via branch-and-bound.

    Semantics: one binary choice per e-node, exactly one node chosen in the
    root class, children classes of chosen nodes must be chosen, blacklisted
    nodes are excluded, chosen program must be acyclic. The bound is the sum
    of per-class minimum node costs over classes still undecided, seeded with
    the constituent-greedy solution as the incumbent when available.
    """
    if egraph.dirty:
        raise ExtractionError("extraction requires a rebuilt e-graph")
    n_nodes = egraph.size()[0]
    if n_nodes > size_bound:
        raise CapacityError(
            f"{n_nodes} e-nodes exceeds exact-extraction bound {size_bound}; use a greedy extractor"
        )
    banned = {egraph.canonicalize(n) for n in blacklist}
    root = egraph.canonical_root()

    candidates: dict[int, list[ENode]] = {}
    for cid in egraph.canonical_class_ids():
        nodes = [
            n for n in sorted(egraph.classes[cid].nodes, key=node_sort_key) if n not in banned
        ]
        candidates[cid] = nodes
    if not candidates[root]:
        raise InfeasibleExtraction("every e-node in the root e-class is blacklisted")
    min_cost = {
        cid: min((costs[n] for n in nodes), default=math.inf)
        for cid, nodes in candidates.items()
    }

    best_cost = math.inf
    best_sel: Optional[dict[int, ENode]] = None
    try:
        seed = extract_ocf_greedy(egraph, costs)
        seeded = {cid: n for cid, n in seed.chosen.items() if n not in banned}
        if seeded == seed.chosen:
            best_cost = selection_dag_cost(egraph, seed.chosen, costs)
            best_sel = dict(seed.chosen)
    except ExtractionError:
        pass

    chosen: dict[int, ENode] = {}

    def reaches(start: int, goal: int) -> bool:
        # reachability through already-chosen edges only
        stack, seen = [start], set()
        while stack:
            cid = stack.pop()
            if cid == goal:
                return True
            if cid in seen or cid not in chosen:
                continue
            seen.add(cid)
            stack.extend(_class_children(chosen[cid], egraph))
        return False

    def search(need: list[int], cost_so_far: float) -> None:
        nonlocal best_cost, best_sel
        if not need:
            if cost_so_far < best_cost - 1e-12:
                best_cost = cost_so_far
                best_sel = dict(chosen)
            return
        bound = cost_so_far + sum(min_cost[c] for c in need)
        if bound >= best_cost - 1e-12:
            return
        cid = need[0]
        rest = need[1:]
        for node in candidates[cid]:
            kids = _class_children(node, egraph)
            if any(reaches(k, cid) for k in kids):
                continue  # would close a cycle through already-chosen edges
            chosen[cid] = node
            new_need = [k for k in kids if k not in chosen and k not in rest]
            search(sorted(set(rest) | set(new_need)), cost_so_far + costs[node])
            del chosen[cid]

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 2 * len(candidates) + 100))
    try:
        search([root], 0.0)
    finally:
        sys.setrecursionlimit(old_limit)

    if best_sel is None:
        raise InfeasibleExtraction("no acyclic selection satisfies the constraints")
    result = ExtractionResult(best_cost, _reachable_chosen(egraph, best_sel), "exact")
    validate_extraction(egraph, result)
    return result


def brute_force_oracle(egraph: EGraph, costs: Costs, max_nodes: int = 30) -> ExtractionResult:
    """Exhaustive enumeration of every constraint-satisfying selection (test oracle)."""
    if egraph.dirty:
        raise ExtractionError("extraction requires a rebuilt e-graph")
    n_nodes = egraph.size()[0]
    if n_nodes > max_nodes:
        raise CapacityError(f"{n_nodes} e-nodes exceeds oracle guard {max_nodes}")
    root = egraph.canonical_root()
    best: list = [math.inf, None]

    def is_acyclic(sel: dict[int, ENode]) -> bool:
        state: dict[int, int] = {}

        def visit(cid: int) -> bool:
            if state.get(cid) == 2:
                return True
            if state.get(cid) == 1:
                return False
            state[cid] = 1
            ok = all(visit(c) for c in _class_children(sel[cid], egraph))
            state[cid] = 2
            return ok

        return visit(root)

    def enumerate_from(need: list[int], sel: dict[int, ENode]) -> None:
        if not need:
            if not is_acyclic(sel):
                return
            total = sum(costs[n] for n in sel.values())
            if total < best[0] - 1e-12:
                best[0], best[1] = total, dict(sel)
            return
        cid = need[0]
        for node in sorted(egraph.classes[cid].nodes, key=node_sort_key):
            sel[cid] = node
            new = [
                k
                for k in _class_children(node, egraph)
                if k not in sel and k not in need[1:]
            ]
            enumerate_from(sorted(set(need[1:]) | set(new)), sel)
            del sel[cid]

    enumerate_from([root], {})
    if best[1] is None:
        raise InfeasibleExtraction("no acyclic selection exists")
    result = ExtractionResult(best[0], _reachable_chosen(egraph, best[1]), "oracle")
    validate_extraction(egraph, result)
    return result


# -- LP export -----------------------------------------------------------------


def export_ilp(egraph: EGraph, costs: Costs, path: str, blacklist: Iterable[ENode] = ()) -> None:
    """Write the extraction problem in LP text format (variables x_i per e-node).

    Constraints: exactly one root node, x_i <= sum of x_j over each child
    class of node i, and x_k = 0 for blacklisted nodes. No solver is invoked.
    """
    if egraph.dirty:
        raise ExtractionError("export requires a rebuilt e-graph")
    banned = {egraph.canonicalize(n) for n in blacklist}
    index: dict[ENode, int] = {}
    by_class: dict[int, list[int]] = {}
    ordered: list[tuple[int, ENode]] = []
    for cid, node in egraph.enodes():
        index[node] = len(index)
        by_class.setdefault(cid, []).append(index[node])
        ordered.append((cid, node))

    lines = ["\\ e-graph extraction problem", "Minimize"]
    terms = " + ".join(f"{costs[node]:.12g} x{index[node]}" for _, node in ordered)
    lines.append(f" obj: {terms}")
    lines.append("Subject To")
    root = egraph.canonical_root()
    root_vars = " + ".join(f"x{i}" for i in by_class[root])
    lines.append(f" root: {root_vars} = 1")
    for cid, node in ordered:
        i = index[node]
        for k, child in enumerate(dict.fromkeys(egraph.find(c) for c in node.children)):
            child_vars = " - ".join(f"x{j}" for j in by_class[child])
            lines.append(f" c{i}_{k}: x{i} - {child_vars} <= 0")
    for b, node in enumerate(sorted(banned, key=node_sort_key)):
        if node in index:
            lines.append(f" bl{b}: x{index[node]} = 0")
    lines.append("Binary")
    lines.append(" " + " ".join(f"x{i}" for i in range(len(index))))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
