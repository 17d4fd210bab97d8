"""Typed tensor computation-graph IR plus the toy arithmetic fixture.

A TensorGraph is a DAG of shaped operator nodes (NCHW layout, OIHW weights).
Graphs convert to e-graphs (one hash-consed e-node per unique node, shapes
carried in symbol payloads) and back from extraction results. The module also
bundles deterministic desk-scale model generators and JSON (de)serialization.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .egraph import EGraph, ENode, Symbol
from .extraction import ExtractionResult
from .rewrite import InstantiationError, Language, TermLanguage


class ShapeError(InstantiationError):
    pass


class GraphFormatError(ValueError):
    pass


Shape = tuple[int, ...]

# arity per operator kind; params lists the attribute order exposed to patterns
OPS: dict[str, dict] = {
    "input": {"arity": 0, "params": ("name",)},
    "weight": {"arity": 0, "params": ("name",)},
    "ewadd": {"arity": 2, "params": ()},
    "ewmul": {"arity": 2, "params": ()},
    "matmul": {"arity": 2, "params": ()},
    "conv2d": {"arity": 2, "params": ("stride", "padding", "activation")},
    "relu": {"arity": 1, "params": ()},
    "tanh": {"arity": 1, "params": ()},
    "sigmoid": {"arity": 1, "params": ()},
    "concat": {"arity": 2, "params": ("axis",)},
    "split": {"arity": 1, "params": ("axis", "index")},
    "maxpool": {"arity": 1, "params": ("kernel", "stride")},
    "transpose": {"arity": 1, "params": ()},
    "noop": {"arity": 1, "params": ()},
}

_SINK = "noop"  # synthetic multi-output sink; arity carried in the payload


def check_shape(shape: Iterable[int]) -> Shape:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= 4 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid tensor shape {dims}")
    return dims


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def infer_shape(op: str, params: dict, input_shapes: list[Shape]) -> Shape:
    """Deterministic output shape for one operator application."""
    if op in ("input", "weight"):
        _require("shape" in params, op, "leaf shape missing")
        return check_shape(params["shape"])
    spec = OPS.get(op)
    if spec is None:
        raise ShapeError(f"unknown operator {op!r}")
    expect = spec["arity"] if op != _SINK else max(1, len(input_shapes))
    _require(len(input_shapes) == expect, op, f"expected {expect} inputs")
    shapes = [check_shape(s) for s in input_shapes]

    if op in ("ewadd", "ewmul"):
        _require(shapes[0] == shapes[1], op, f"operand shapes differ: {shapes}")
        return shapes[0]
    if op == "matmul":
        _require(len(shapes[0]) == 2 and len(shapes[1]) == 2, op, "operands must be 2-d")
        _require(shapes[0][1] == shapes[1][0], op, f"inner dims differ: {shapes}")
        return (shapes[0][0], shapes[1][1])
    if op == "conv2d":
        x, w = shapes
        _require(len(x) == 4 and len(w) == 4, op, "expects NCHW input and OIHW weight")
        n, c, h, width = x
        o, i, kh, kw = w
        _require(c == i, op, f"channel mismatch: input {c} vs weight {i}")
        stride, padding = int(params["stride"]), int(params["padding"])
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (width + 2 * padding - kw) // stride + 1
        _require(oh >= 1 and ow >= 1, op, "kernel larger than padded input")
        return (n, o, oh, ow)
    if op in ("relu", "tanh", "sigmoid"):
        return shapes[0]
    if op == "transpose":
        _require(len(shapes[0]) == 2, op, "defined for 2-d tensors")
        return (shapes[0][1], shapes[0][0])
    if op == "concat":
        axis = int(params["axis"])
        a, b = shapes
        _require(len(a) == len(b) and 0 <= axis < len(a), op, f"bad axis {axis} for {shapes}")
        _require(
            a[:axis] == b[:axis] and a[axis + 1 :] == b[axis + 1 :],
            op,
            f"shapes differ off-axis: {shapes}",
        )
        return a[:axis] + (a[axis] + b[axis],) + a[axis + 1 :]
    if op == "split":
        axis, index = int(params["axis"]), int(params["index"])
        s = shapes[0]
        _require(0 <= axis < len(s), op, f"bad axis {axis} for {s}")
        _require(index in (0, 1), op, "index must be 0 or 1")
        _require(s[axis] % 2 == 0, op, f"axis {axis} of {s} not evenly splittable")
        return s[:axis] + (s[axis] // 2,) + s[axis + 1 :]
    if op == "maxpool":
        k, stride = int(params["kernel"]), int(params["stride"])
        s = shapes[0]
        _require(len(s) == 4, op, "expects NCHW input")
        oh = (s[2] - k) // stride + 1
        ow = (s[3] - k) // stride + 1
        _require(oh >= 1 and ow >= 1, op, "window larger than input")
        return (s[0], s[1], oh, ow)
    if op == _SINK:
        return shapes[0]
    raise ShapeError(f"unknown operator {op!r}")


# -- graphs --------------------------------------------------------------------


@dataclass(frozen=True)
class TensorNode:
    id: int
    op: str
    params: tuple[tuple[str, object], ...]
    inputs: tuple[int, ...]
    shape: Shape

    def params_dict(self) -> dict:
        return dict(self.params)


def _params_tuple(params: dict) -> tuple:
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in params.items()))


@dataclass
class TensorGraph:
    nodes: list[TensorNode] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)

    def node(self, nid: int) -> TensorNode:
        return self._index[nid]

    @property
    def _index(self) -> dict[int, TensorNode]:
        return {n.id: n for n in self.nodes}

    def validate(self) -> "TensorGraph":
        index = {}
        for n in self.nodes:
            if n.id in index:
                raise GraphFormatError(f"duplicate node id {n.id}")
            index[n.id] = n
        if not self.outputs:
            raise GraphFormatError("graph has no outputs")
        for out in self.outputs:
            if out not in index:
                raise GraphFormatError(f"unknown output id {out}")
        # topological check (inputs must be defined, no cycles)
        state: dict[int, int] = {}

        def visit(nid: int) -> None:
            if state.get(nid) == 2:
                return
            if state.get(nid) == 1:
                raise GraphFormatError(f"cycle through node {nid}")
            state[nid] = 1
            node = index.get(nid)
            if node is None:
                raise GraphFormatError(f"unknown node id {nid}")
            for i in node.inputs:
                visit(i)
            state[nid] = 2

        for n in self.nodes:
            visit(n.id)
        for n in self.nodes:
            spec = OPS.get(n.op)
            if spec is None:
                raise GraphFormatError(f"node {n.id}: unknown op {n.op!r}")
            if n.op != _SINK and len(n.inputs) != spec["arity"]:
                raise GraphFormatError(
                    f"node {n.id}: op {n.op} expects {spec['arity']} inputs, got {len(n.inputs)}"
                )
            in_shapes = [index[i].shape for i in n.inputs]
            params = n.params_dict()
            if n.op in ("input", "weight"):
                params = dict(params, shape=n.shape)
            inferred = infer_shape(n.op, params, in_shapes)
            if inferred != n.shape:
                raise GraphFormatError(
                    f"node {n.id}: declared shape {n.shape} != inferred {inferred}"
                )
        return self

    def op_nodes(self) -> list[TensorNode]:
        return [n for n in self.nodes if n.op not in ("input", "weight")]


class GraphBuilder:
    """Incremental TensorGraph construction with shape inference."""

    def __init__(self) -> None:
        self.nodes: list[TensorNode] = []
        self._next = 0

    def _emit(self, op: str, params: dict, inputs: tuple[int, ...], shape: Shape) -> int:
        nid = self._next
        self._next += 1
        self.nodes.append(TensorNode(nid, op, _params_tuple(params), inputs, shape))
        return nid

    def input(self, name: str, shape: Iterable[int]) -> int:
        return self._emit("input", {"name": name}, (), check_shape(shape))

    def weight(self, name: str, shape: Iterable[int]) -> int:
        return self._emit("weight", {"name": name}, (), check_shape(shape))

    def op(self, op: str, *inputs: int, **params) -> int:
        by_id = {n.id: n for n in self.nodes}
        shapes = [by_id[i].shape for i in inputs]
        shape = infer_shape(op, params, shapes)
        return self._emit(op, params, tuple(inputs), shape)

    def build(self, *outputs: int) -> TensorGraph:
        return TensorGraph(list(self.nodes), list(outputs)).validate()


# -- tensor language for the rewrite engine -----------------------------------


class TensorLanguage(Language):
    """Symbols are (op, attributes, output shape); shapes re-inferred on instantiation."""

    def node_params(self, symbol: Symbol) -> tuple:
        return symbol.payload[0]

    def symbol_shape(self, symbol: Symbol) -> Shape:
        return symbol.payload[1]

    def make_symbol(self, name: str, params: tuple, child_shapes: tuple) -> Symbol:
        spec = OPS.get(name)
        if spec is None:
            raise InstantiationError(f"unknown tensor operator {name!r}")
        names = spec["params"]
        if name in ("input", "weight"):
            raise InstantiationError(f"{name} leaves cannot be introduced by rewrites")
        if len(params) != len(names):
            raise InstantiationError(f"{name} expects attributes {names}, got {params}")
        if any(s is None for s in child_shapes):
            raise InstantiationError(f"{name}: missing child shape")
        shape = infer_shape(name, dict(zip(names, params)), list(child_shapes))
        return Symbol(name, len(child_shapes), (tuple(params), shape))


TENSOR_LANGUAGE = TensorLanguage()


def _leaf_symbol(node: TensorNode) -> Symbol:
    params = tuple(v for _, v in sorted(node.params))
    return Symbol(node.op, 0, (params, node.shape))


def graph_to_egraph(graph: TensorGraph) -> EGraph:
    """One e-node per unique (op, attributes, children) node; root = single output.

    Multi-output graphs are wrapped under a zero-cost synthetic sink whose arity
    is carried in its payload, keeping one root e-class.
    """
    graph.validate()
    egraph = EGraph(TENSOR_LANGUAGE)
    by_id = {n.id: n for n in graph.nodes}
    classes: dict[int, int] = {}

    def convert(nid: int) -> int:
        if nid in classes:
            return classes[nid]
        node = by_id[nid]
        child_ids = tuple(convert(i) for i in node.inputs)
        if node.op in ("input", "weight"):
            symbol = _leaf_symbol(node)
        else:
            params = tuple(node.params_dict()[k] for k in OPS[node.op]["params"])
            symbol = Symbol(node.op, len(child_ids), (params, node.shape))
        cid = egraph.add(ENode(symbol, child_ids))
        classes[nid] = cid
        return cid

    out_classes = [convert(o) for o in graph.outputs]
    if len(out_classes) == 1:
        egraph.root = out_classes[0]
    else:
        shape = by_id[graph.outputs[0]].shape
        sink = Symbol(_SINK, len(out_classes), (("sink", len(out_classes)), shape))
        egraph.root = egraph.add(ENode(sink, tuple(out_classes)))
    egraph.rebuild()
    return egraph


def _is_sink(symbol: Symbol) -> bool:
    return symbol.name == _SINK and symbol.payload[0][:1] == ("sink",)


def extraction_to_graph(egraph: EGraph, selection: ExtractionResult) -> TensorGraph:
    """Materialize a chosen-node-per-class selection as a TensorGraph.

    Shared e-classes come out as shared nodes (emitted once); the synthetic
    sink, when present at the root, is unwrapped back into multiple outputs.
    """
    ids: dict[int, int] = {}
    order: list[TensorNode] = []
    visiting: set[int] = set()

    def build(cid: int) -> int:
        cid = egraph.find(cid)
        if cid in ids:
            return ids[cid]
        if cid in visiting:
            raise GraphFormatError(f"cyclic selection through e-class {cid}")
        visiting.add(cid)
        node = selection.chosen[cid]
        child_ids = tuple(build(c) for c in node.children)
        params, shape = node.symbol.payload
        names = OPS[node.symbol.name]["params"]
        params_dict = dict(zip(names, params)) if not _is_sink(node.symbol) else {}
        nid = len(order)
        order.append(
            TensorNode(nid, node.symbol.name, _params_tuple(params_dict), child_ids, shape)
        )
        visiting.discard(cid)
        ids[cid] = nid
        return nid

    root = egraph.canonical_root()
    root_node = selection.chosen[root]
    if _is_sink(root_node.symbol):
        outputs = [build(c) for c in root_node.children]
        return TensorGraph(order, outputs).validate()
    build(root)
    return TensorGraph(order, [ids[root]]).validate()


# -- toy fixture ---------------------------------------------------------------

ToyTerm = Union[str, int, tuple]


def toy_term_to_egraph(term: ToyTerm) -> EGraph:
    """E-graph for a nested-tuple arithmetic term like ("div", ("mul", "a", 2), 2)."""
    egraph = EGraph(TermLanguage())

    def add(t: ToyTerm) -> int:
        if isinstance(t, tuple):
            op, *args = t
            child_ids = tuple(add(a) for a in args)
            return egraph.add(ENode(Symbol(str(op), len(child_ids)), child_ids))
        if isinstance(t, int):
            return egraph.add(ENode(Symbol(str(t), 0, t)))
        return egraph.add(ENode(Symbol(str(t), 0)))

    egraph.root = add(term)
    egraph.rebuild()
    return egraph


# -- model zoo -----------------------------------------------------------------


@dataclass
class TensorModel:
    name: str
    graph: TensorGraph

    kind = "tensor"

    def to_egraph(self) -> EGraph:
        return graph_to_egraph(self.graph)


@dataclass
class ToyModel:
    name: str
    term: ToyTerm

    kind = "toy"

    def to_egraph(self) -> EGraph:
        return toy_term_to_egraph(self.term)


Model = Union[TensorModel, ToyModel]


def _resblock_stack(k: int) -> TensorGraph:
    b = GraphBuilder()
    x = b.input("x", (1, 8, 16, 16))
    w = b.weight("w", (8, 8, 3, 3))  # one shared kernel keeps every block C -> C
    for _ in range(k):
        c1 = b.op("conv2d", x, w, stride=1, padding=1, activation="none")
        c2 = b.op("conv2d", c1, w, stride=1, padding=1, activation="none")
        x = b.op("ewadd", c1, c2)
    out = b.op("relu", x)
    return b.build(out)


def _mlp(depth: int, width: int) -> TensorGraph:
    b = GraphBuilder()
    h = b.input("x", (8, width))
    for i in range(depth):
        w = b.weight(f"w{i}", (width, width))
        h = b.op("relu", b.op("matmul", h, w))
    return b.build(h)


def _attention_block(d: int, heads: int) -> TensorGraph:
    seq = 4 * heads
    b = GraphBuilder()
    x = b.input("x", (seq, d))
    wq = b.weight("wq", (d, d))
    wk = b.weight("wk", (d, d))
    wv = b.weight("wv", (d, d))
    q = b.op("matmul", x, wq)
    k = b.op("matmul", x, wk)
    v = b.op("matmul", x, wv)
    scores = b.op("matmul", q, b.op("transpose", k))
    ctx = b.op("matmul", scores, v)
    w1 = b.weight("wo1", (d, 2 * d))
    w2 = b.weight("wo2", (2 * d, d))
    out = b.op("matmul", b.op("matmul", ctx, w1), w2)
    return b.build(out)


def _inception_cell(branches: int) -> TensorGraph:
    if branches < 2:
        raise GraphFormatError("inception_cell needs at least 2 branches")
    b = GraphBuilder()
    x = b.input("x", (1, 8, 16, 16))
    outs = []
    for i in range(branches):
        w = b.weight(f"w{i}", (4, 8, 1, 1))
        outs.append(b.op("conv2d", x, w, stride=1, padding=0, activation="none"))
    merged = outs[0]
    for nxt in outs[1:]:
        merged = b.op("concat", merged, nxt, axis=1)
    return b.build(merged)


_ZOO = {
    "resblock_stack": (_resblock_stack, 1),
    "mlp": (_mlp, 2),
    "attention_block": (_attention_block, 2),
    "inception_cell": (_inception_cell, 1),
}


def zoo_generate(spec: str) -> Model:
    """Deterministic desk-scale models: resblock_stack(k), mlp(depth,width),
    attention_block(d,heads), inception_cell(branches), toy_expr."""
    spec = spec.strip()
    if spec == "toy_expr":
        return ToyModel("toy_expr", ("div", ("mul", "a", 2), 2))
    m = re.fullmatch(r"(\w+)\(([\d,\s]*)\)", spec)
    if not m or m.group(1) not in _ZOO:
        raise GraphFormatError(f"unknown zoo spec {spec!r}")
    builder, n_args = _ZOO[m.group(1)]
    args = [int(a) for a in m.group(2).split(",") if a.strip()]
    if len(args) != n_args:
        raise GraphFormatError(f"{m.group(1)} expects {n_args} integer argument(s)")
    return TensorModel(spec, builder(*args))


# -- serialization -------------------------------------------------------------


def save_graph(graph: TensorGraph, path: str) -> None:
    graph.validate()
    data = {
        "nodes": [
            {
                "id": n.id,
                "op": n.op,
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in n.params},
                "inputs": list(n.inputs),
                "shape": list(n.shape),
            }
            for n in graph.nodes
        ],
        "outputs": list(graph.outputs),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graph(path: str) -> TensorGraph:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, dict) or "nodes" not in data or "outputs" not in data:
        raise GraphFormatError("expected object with 'nodes' and 'outputs'")
    nodes = []
    for raw in data["nodes"]:
        try:
            nodes.append(
                TensorNode(
                    int(raw["id"]),
                    str(raw["op"]),
                    _params_tuple(raw.get("params", {})),
                    tuple(int(i) for i in raw["inputs"]),
                    check_shape(raw["shape"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"bad node record {raw!r}: {exc}") from exc
    graph = TensorGraph(nodes, [int(o) for o in data["outputs"]])
    return graph.validate()
