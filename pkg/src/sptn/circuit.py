"""Probabilistic circuits with Gaussian leaves and invertible transform nodes.

A circuit is a rooted DAG of four node kinds:

* Leaf: standard normal N(0, I) over its scope.
* Sum: mixture of children sharing the same scope; weights are stored as
  unconstrained logits and normalized with log-softmax at evaluation time.
* Product: independent factors over disjoint child scopes.
* Transform: wraps a child C with an invertible layer g; its density is
  T(x) = C(g(x)) |det J_g(x)|.

Children may be shared between parents (a DAG, not a tree). Because a
transform changes the coordinates its subtree sees, a node shared under two
different transform paths must be evaluated at two different inputs. The
evaluator therefore expands the circuit once into (node, input) *instances*,
groups instances into vectorized waves (transforms batched over instances
with stacked parameters), and caches that plan on the circuit. Structure is
immutable after construction; parameter arrays may be mutated freely.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from . import affine, unitary
from .errors import (
    CircuitInvalidError,
    DimensionMismatchError,
    ExpansionCapError,
    NotTractableError,
    SptnError,
)
from .gaussian import LOG_2PI, log_softmax, logsumexp

MAX_INSTANCES = 500_000
DEFAULT_EXPANSION_CAP = 100_000
EVAL_CHUNK_ROWS = 2048
SAMPLE_MAX_ROUNDS = 200


# ---------------------------------------------------------------------------
# nodes


@dataclass
class LeafNode:
    pass


@dataclass
class SumNode:
    children: list[int]
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)

    @property
    def log_weights(self) -> np.ndarray:
        """Normalized mixture log-weights (log-sum-exp exactly 0)."""
        return log_softmax(self.logits)


@dataclass
class ProductNode:
    children: list[int]


@dataclass
class TransformNode:
    child: int
    layer: affine.SvdAffine


Node = LeafNode | SumNode | ProductNode | TransformNode


@dataclass
class ValidationIssue:
    code: str
    node: int
    message: str

    def __str__(self):
        return f"[{self.code}] node {self.node}: {self.message}"


class Circuit:
    """Immutable-structure circuit; see module docstring.

    logpdf/grad/sample keep all scratch state on the stack, so concurrent
    evaluation of one circuit from several threads is safe; parameter writes
    (set_params, training steps) need exclusive access in between.
    """

    def __init__(self, nodes: list[Node], root: int, scopes: list[tuple[int, ...]], dim: int):
        self.nodes = list(nodes)
        self.root = root
        self.scopes = [tuple(s) for s in scopes]
        self.dim = dim
        self._plan = None
        self._plan_lock = threading.Lock()
        self._layout = None
        self._validated = False

    # -- validation ---------------------------------------------------------

    def validate(self) -> list[ValidationIssue]:
        issues = validate(self)
        self._validated = not issues
        return issues

    def _ensure_valid(self):
        if not self._validated:
            issues = self.validate()
            if issues:
                raise CircuitInvalidError(issues)

    # -- evaluation ---------------------------------------------------------

    def plan(self) -> "_Plan":
        self._ensure_valid()
        if self._plan is None:
            # plan construction rebinds layer storage, so it must run once
            with self._plan_lock:
                if self._plan is None:
                    self._plan = _Plan(self)
        return self._plan

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Log-density per row; chunks large batches."""
        x = self._check_input(x)
        plan = self.plan()
        if x.shape[0] <= EVAL_CHUNK_ROWS:
            return plan.forward(x)[0]
        parts = [plan.forward(x[i : i + EVAL_CHUNK_ROWS])[0]
                 for i in range(0, x.shape[0], EVAL_CHUNK_ROWS)]
        return np.concatenate(parts)

    def grad(self, x: np.ndarray, upstream: np.ndarray | None = None):
        """Reverse-mode gradients of L = sum_i upstream_i * logpdf(x_i).

        Returns (values, flat_grad) where values are the per-row log-densities
        and flat_grad follows param_layout(). Defaults to upstream of ones.
        Shared parameters accumulate contributions from every parent path.
        """
        x = self._check_input(x)
        if upstream is None:
            upstream = np.ones(x.shape[0])
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if upstream.shape[0] != x.shape[0]:
            raise DimensionMismatchError(x.shape[0], upstream.shape[0], "upstream")
        plan = self.plan()
        values, state = plan.forward(x, keep=True)
        grad_flat = plan.backward(state, upstream)
        return values, grad_flat

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionMismatchError((None, self.dim), x.shape, "input batch")
        if x.size and not np.isfinite(x).all():
            raise ValueError("non-finite values in input batch")
        return x

    # -- parameters ---------------------------------------------------------

    def param_layout(self) -> "ParamLayout":
        if self._layout is None:
            self._layout = ParamLayout(self)
        return self._layout

    def get_params(self) -> np.ndarray:
        return self.param_layout().gather()

    def set_params(self, flat: np.ndarray) -> None:
        self.param_layout().scatter(flat)

    def project_invertibility(self) -> None:
        """Clamp every layer diagonal back to the |d_i| >= 1e-6 floor."""
        for layer in self.unique_layers():
            layer.diag[:] = affine.project_diag(layer.diag)

    @property
    def num_parameters(self) -> int:
        return self.param_layout().total

    def unique_layers(self) -> list[affine.SvdAffine]:
        seen: dict[int, affine.SvdAffine] = {}
        for node in self.nodes:
            if isinstance(node, TransformNode) and id(node.layer) not in seen:
                seen[id(node.layer)] = node.layer
        return list(seen.values())

    def copy(self) -> "Circuit":
        """Deep copy preserving the sharing topology of layers and nodes."""
        layer_map: dict[int, affine.SvdAffine] = {}
        nodes2: list[Node] = []
        for node in self.nodes:
            if isinstance(node, SumNode):
                nodes2.append(SumNode(list(node.children), node.logits.copy()))
            elif isinstance(node, ProductNode):
                nodes2.append(ProductNode(list(node.children)))
            elif isinstance(node, TransformNode):
                if id(node.layer) not in layer_map:
                    layer_map[id(node.layer)] = node.layer.copy()
                nodes2.append(TransformNode(node.child, layer_map[id(node.layer)]))
            else:
                nodes2.append(LeafNode())
        return Circuit(nodes2, self.root, list(self.scopes), self.dim)

    # -- structural queries / sampling --------------------------------------

    def count_induced_trees(self) -> int:
        return count_induced_trees(self)

    def to_gmm(self, cap: int = DEFAULT_EXPANSION_CAP):
        return to_gmm(self, cap)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return sample(self, rng, n)


class CircuitBuilder:
    """Incremental construction with scope derivation; build() validates."""

    def __init__(self, dim: int):
        self.dim = dim
        self.nodes: list[Node] = []
        self.scopes: list[tuple[int, ...]] = []

    def _add(self, node: Node, scope: tuple[int, ...]) -> int:
        self.nodes.append(node)
        self.scopes.append(tuple(scope))
        return len(self.nodes) - 1

    def leaf(self, scope) -> int:
        return self._add(LeafNode(), tuple(scope))

    def sum(self, children: list[int], logits=None) -> int:
        if logits is None:
            logits = np.zeros(len(children))
        return self._add(SumNode(list(children), logits), self.scopes[children[0]])

    def product(self, children: list[int]) -> int:
        scope = tuple(itertools.chain.from_iterable(self.scopes[c] for c in children))
        return self._add(ProductNode(list(children)), scope)

    def transform(self, child: int, layer: affine.SvdAffine) -> int:
        return self._add(TransformNode(child, layer), self.scopes[child])

    def build(self, root: int | None = None) -> Circuit:
        if root is None:
            root = len(self.nodes) - 1
        circuit = Circuit(self.nodes, root, self.scopes, self.dim)
        issues = circuit.validate()
        if issues:
            raise CircuitInvalidError(issues)
        return circuit


# ---------------------------------------------------------------------------
# validation


def validate(circuit: Circuit) -> list[ValidationIssue]:
    """Structural checks; returns an empty list for a well-formed circuit."""
    issues: list[ValidationIssue] = []
    n = len(circuit.nodes)
    if not 0 <= circuit.root < n:
        return [ValidationIssue("root", circuit.root, "root id out of range")]
    if len(circuit.scopes) != n:
        return [ValidationIssue("scope", -1, "scope table size mismatch")]

    def children_of(i):
        node = circuit.nodes[i]
        if isinstance(node, SumNode) or isinstance(node, ProductNode):
            return node.children
        if isinstance(node, TransformNode):
            return [node.child]
        return []

    for i in range(n):
        for c in children_of(i):
            if not 0 <= c < n:
                issues.append(ValidationIssue("child", i, f"child id {c} out of range"))
    if issues:
        return issues

    # cycle detection (iterative three-color DFS from the root)
    color = [0] * n
    stack = [(circuit.root, iter(children_of(circuit.root)))]
    color[circuit.root] = 1
    while stack:
        node_id, it = stack[-1]
        advanced = False
        for c in it:
            if color[c] == 1:
                issues.append(ValidationIssue("cycle", c, "cycle through this node"))
                return issues
            if color[c] == 0:
                color[c] = 1
                stack.append((c, iter(children_of(c))))
                advanced = True
                break
        if not advanced:
            color[node_id] = 2
            stack.pop()

    for i in range(n):
        node = circuit.nodes[i]
        scope = circuit.scopes[i]
        if len(set(scope)) != len(scope):
            issues.append(ValidationIssue("scope", i, "duplicate variables in scope"))
        if any(not 0 <= v < circuit.dim for v in scope):
            issues.append(ValidationIssue("scope", i, "scope variable out of range"))
        if isinstance(node, LeafNode):
            if not scope:
                issues.append(ValidationIssue("scope", i, "leaf with empty scope"))
        elif isinstance(node, SumNode):
            if not node.children:
                issues.append(ValidationIssue("arity", i, "sum with no children"))
                continue
            if len(node.logits) != len(node.children):
                issues.append(ValidationIssue("weights", i, "logits/children length mismatch"))
            for c in node.children:
                if circuit.scopes[c] != scope:
                    issues.append(ValidationIssue(
                        "completeness", i,
                        f"child {c} scope {circuit.scopes[c]} != sum scope {scope}"))
            if node.children and abs(logsumexp(node.log_weights)) > 1e-10:
                issues.append(ValidationIssue("weights", i, "log-weights not normalized"))
        elif isinstance(node, ProductNode):
            if not node.children:
                issues.append(ValidationIssue("arity", i, "product with no children"))
                continue
            seen: set[int] = set()
            for c in node.children:
                cs = set(circuit.scopes[c])
                if cs & seen:
                    issues.append(ValidationIssue(
                        "decomposability", i, f"child {c} scope overlaps a sibling"))
                seen |= cs
            if seen != set(scope):
                issues.append(ValidationIssue(
                    "decomposability", i, "children scopes do not partition the scope"))
        elif isinstance(node, TransformNode):
            if node.layer.dim != len(scope):
                issues.append(ValidationIssue(
                    "transform_dim", i,
                    f"layer dim {node.layer.dim} != scope size {len(scope)}"))
            if circuit.scopes[node.child] != scope:
                issues.append(ValidationIssue(
                    "scope", i, "transform child scope differs from own scope"))

    root_scope = set(circuit.scopes[circuit.root])
    if root_scope != set(range(circuit.dim)):
        issues.append(ValidationIssue(
            "root_scope", circuit.root,
            f"root scope covers {sorted(root_scope)}, expected all {circuit.dim} variables"))
    return issues


# ---------------------------------------------------------------------------
# evaluation plan: instances, waves, gather/scatter specs


@dataclass
class _Instance:
    kind: str                    # leaf | sum | product | transform
    node: int
    src: tuple                   # ("root"|wave_idx, row_or_None, cols_or_None)
    children: list[int] = field(default_factory=list)
    width: int = 0
    wave: int = -1               # down-wave index (transforms only)
    wave_row: int = -1
    height: int = 0


class _Gather:
    """Vectorized assembly of an (I, B, k) input stack from slot sources.

    Sources are per-instance (origin, row, cols) triples where origin is
    "root" or a down-wave index. A single-origin wave uses fancy indexing;
    mixed origins fall back to a per-instance loop.
    """

    def __init__(self, sources: list[tuple], width: int):
        self.sources = sources
        self.width = width
        origins = {s[0] for s in sources}
        self.single_origin = origins.pop() if len(origins) == 1 else None
        self.tile = None       # rows == tile(arange(m), k): scatter by reshape-sum
        self.rows_unique = False
        if self.single_origin is not None:
            self.rows = None if self.single_origin == "root" else np.array(
                [s[1] for s in sources])
            if all(s[2] is None for s in sources):
                self.cols = None
            else:
                self.cols = np.stack([
                    s[2] if s[2] is not None else np.arange(width) for s in sources])
            if self.rows is not None:
                self.rows_unique = np.unique(self.rows).size == self.rows.size
                m = int(self.rows.max()) + 1 if self.rows.size else 0
                if m and self.rows.size % m == 0:
                    k = self.rows.size // m
                    block = self.rows[:m]
                    if np.unique(block).size == m and np.array_equal(
                            self.rows, np.tile(block, k)):
                        arange = bool(np.array_equal(block, np.arange(m)))
                        self.tile = (k, m, block, arange)

    def gather(self, root: np.ndarray, wave_ys: list) -> np.ndarray:
        n_inst = len(self.sources)
        batch = root.shape[0]
        if self.single_origin is not None:
            if self.single_origin == "root":
                base = np.broadcast_to(root[None], (n_inst, batch, root.shape[1]))
            else:
                base = wave_ys[self.single_origin][self.rows]
            if self.cols is None:
                return base if base.shape[2] == self.width else base[:, :, : self.width]
            return np.take_along_axis(base, self.cols[:, None, :], axis=2)
        out = np.empty((n_inst, batch, self.width))
        for i, (origin, row, cols) in enumerate(self.sources):
            buf = root if origin == "root" else wave_ys[origin][row]
            out[i] = buf if cols is None else buf[:, cols]
        return out

    def scatter_add(self, contrib: np.ndarray, root_cot: np.ndarray, wave_cots: list) -> None:
        if self.single_origin is not None:
            if self.single_origin == "root":
                if self.cols is None:
                    root_cot += contrib.sum(axis=0)
                else:
                    np.add.at(root_cot,
                              (np.arange(root_cot.shape[0])[None, :, None],
                               self.cols[:, None, :]), contrib)
                return
            target = wave_cots[self.single_origin]
            if self.cols is None:
                if self.tile is not None:
                    k, m, block, arange = self.tile
                    summed = contrib if k == 1 else contrib.reshape(
                        (k, m) + contrib.shape[1:]).sum(axis=0)
                    if arange:
                        target[:m] += summed
                    else:
                        target[block] += summed
                elif self.rows_unique:
                    target[self.rows] += contrib
                else:
                    np.add.at(target, self.rows, contrib)
            else:
                np.add.at(target,
                          (self.rows[:, None, None],
                           np.arange(target.shape[1])[None, :, None],
                           self.cols[:, None, :]), contrib)
            return
        for i, (origin, row, cols) in enumerate(self.sources):
            if origin == "root":
                tgt, sel = root_cot, cols
            else:
                tgt, sel = wave_cots[origin][row], cols
            if sel is None:
                tgt += contrib[i]
            else:
                tgt[:, sel] += contrib[i]


@dataclass
class _DownWave:
    key: tuple                       # (depth, kind, dim, nonlinearity)
    instances: list[int]
    layers: list[affine.SvdAffine]
    gather: _Gather = None
    unique_layers: list = None
    owner_rows: np.ndarray = None    # instance row -> row in unique grads
    foreign: list = None             # (owner_wave, owner_row, local_unique_row)
    group_count: int = 0             # instances per unique layer when uniform
    group_starts: np.ndarray = None  # reduceat offsets otherwise
    matmul: bool = False             # uniform groups: use the materialized form
    param_store: affine.LayerStack = None   # contiguous storage of unique layers
    static_stack: affine.LayerStack = None  # = param_store when no foreign layers

    def aggregate(self, arr: np.ndarray) -> np.ndarray:
        """Sum per-instance rows into per-unique-layer rows. Instances are
        ordered so rows of one layer are contiguous."""
        nu = len(self.unique_layers)
        if nu == len(self.layers):
            return arr
        if self.group_count:
            return arr.reshape((nu, self.group_count) + arr.shape[1:]).sum(axis=1)
        return np.add.reduceat(arr, self.group_starts, axis=0)

    def expand(self, stack: affine.LayerStack) -> affine.LayerStack:
        """Broadcast a unique-layer stack to one row per instance."""
        if len(self.unique_layers) == len(self.layers):
            return stack
        r = self.owner_rows
        return affine.LayerStack(stack.kind, stack.nonlinearity,
                                 stack.u[r], stack.v[r], stack.diag[r], stack.bias[r])


@dataclass
class _ValueGroup:
    kind: str
    height: int
    rows: np.ndarray                 # instance indices
    child_idx: np.ndarray = None     # (I, C) for sum/product; (I,) for transform
    nodes: list[int] = None          # sum node ids (logits access)
    wave: int = -1                   # transforms: their down wave
    wave_rows: np.ndarray = None
    gather: _Gather = None           # leaves: input assembly
    width: int = 0
    child_unique: bool = False       # no repeats in child_idx: fancy += is safe
    logit_index: np.ndarray = None   # lazy (I, C) flat param indices for sums
    logit_unique: bool = False
    logit_take: np.ndarray = None    # (I, C) rows into the plan's logit buffer


class _Plan:
    def __init__(self, circuit: Circuit):
        self.circuit = circuit
        nodes, scopes = circuit.nodes, circuit.scopes
        root_scope = scopes[circuit.root]
        self.root_cols = np.array(root_scope, dtype=np.intp)

        instances: list[_Instance] = []
        memo: dict = {}
        # scope position lookup per node: variable -> position
        pos_maps = [
            {v: p for p, v in enumerate(s)} for s in scopes
        ]

        def build(node_id: int, origin, row, cols) -> int:
            cols_key = None if cols is None else tuple(cols)
            key = (node_id, origin, row, cols_key)
            if key in memo:
                return memo[key]
            if len(instances) >= MAX_INSTANCES:
                raise SptnError(
                    f"evaluation would expand more than {MAX_INSTANCES} node instances; "
                    "shared sums below transforms multiply instance counts")
            node = nodes[node_id]
            scope = scopes[node_id]
            inst = _Instance(kind="", node=node_id, src=(origin, row, cols),
                             width=len(scope))
            instances.append(inst)
            idx = len(instances) - 1
            memo[key] = idx
            if isinstance(node, LeafNode):
                inst.kind = "leaf"
            elif isinstance(node, SumNode):
                inst.kind = "sum"
                inst.children = [build(c, origin, row, cols) for c in node.children]
            elif isinstance(node, ProductNode):
                inst.kind = "product"
                pm = pos_maps[node_id]
                for c in node.children:
                    positions = np.array([pm[v] for v in scopes[c]], dtype=np.intp)
                    ccols = positions if cols is None else np.asarray(cols)[positions]
                    inst.children.append(build(c, origin, row, ccols))
            else:
                inst.kind = "transform"
                inst.wave = -2  # assigned below
                inst.children = [build(node.child, ("pending", idx), None, None)]
            return idx

        # two-phase: first discover instances with placeholder origins for
        # transform outputs, then assign waves by slot depth and patch origins.
        root_idx = build(circuit.root, "root", None, None)
        assert root_idx == 0

        # slot depth per instance input: root = 0, below transform = depth+1
        depth = {}

        def inst_depth(i: int) -> int:
            if i in depth:
                return depth[i]
            origin = instances[i].src[0]
            if origin == "root":
                d = 0
            else:
                d = inst_depth(origin[1]) + 1
            depth[i] = d
            return d

        for i in range(len(instances)):
            inst_depth(i)

        # heights (children first: instances were appended parents-first, so
        # iterate reversed)
        for i in reversed(range(len(instances))):
            inst = instances[i]
            if inst.children:
                inst.height = 1 + max(instances[c].height for c in inst.children)

        # group transforms into down waves
        wave_map: dict[tuple, list[int]] = {}
        for i, inst in enumerate(instances):
            if inst.kind == "transform":
                layer = nodes[inst.node].layer
                key = (depth[i], layer.kind, layer.dim,
                       layer.nonlinearity.tag, layer.nonlinearity.alpha)
                wave_map.setdefault(key, []).append(i)
        self.down_waves: list[_DownWave] = []
        for key in sorted(wave_map, key=lambda k: (k[0], str(k[1:]))):
            rows = wave_map[key]
            # group instances of one layer contiguously (discovery order of
            # unique layers preserved) so gradient aggregation is a reshape
            # or reduceat instead of a scattered add
            uniq: dict[int, int] = {}
            for i in rows:
                layer = nodes[instances[i].node].layer
                if id(layer) not in uniq:
                    uniq[id(layer)] = len(uniq)
            rows = sorted(rows, key=lambda i: uniq[id(nodes[instances[i].node].layer)])
            wave = _DownWave(key=key, instances=rows,
                             layers=[nodes[instances[i].node].layer for i in rows])
            widx = len(self.down_waves)
            for r, i in enumerate(rows):
                instances[i].wave = widx
                instances[i].wave_row = r
            self.down_waves.append(wave)

        # resolve input sources now that wave rows exist
        def resolve(src):
            origin, row, cols = src
            if origin == "root":
                return ("root", None, cols)
            producer = instances[origin[1]]
            return (producer.wave, producer.wave_row, cols)

        for wave in self.down_waves:
            sources = [resolve(instances[i].src) for i in wave.instances]
            wave.gather = _Gather(sources, wave.key[2])
            uniq: dict[int, int] = {}
            owner_rows = []
            wave.foreign = []
            wave.unique_layers = []
            for li, layer in enumerate(wave.layers):
                if id(layer) not in uniq:
                    uniq[id(layer)] = len(wave.unique_layers)
                    wave.unique_layers.append(layer)
                owner_rows.append(uniq[id(layer)])
            wave.owner_rows = np.array(owner_rows, dtype=np.intp)
            # instances were sorted by owner, so owner_rows is a staircase
            counts = np.bincount(wave.owner_rows, minlength=len(wave.unique_layers))
            if counts.size and counts.min() == counts.max():
                wave.group_count = int(counts[0])
                wave.group_starts = None
                wave.matmul = True
            else:
                wave.group_count = 0
                wave.group_starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.intp)

        # cross-wave layer sharing: later waves forward grads to the owner
        owner_of_layer: dict[int, tuple[int, int]] = {}
        for w, wave in enumerate(self.down_waves):
            for u, layer in enumerate(wave.unique_layers):
                if id(layer) in owner_of_layer:
                    wave.foreign.append((*owner_of_layer[id(layer)], u))
                else:
                    owner_of_layer[id(layer)] = (w, u)

        # value groups
        group_map: dict[tuple, list[int]] = {}
        for i, inst in enumerate(instances):
            if inst.kind == "leaf":
                key = ("leaf", inst.height, inst.width)
            elif inst.kind == "sum":
                key = ("sum", inst.height, len(inst.children))
            elif inst.kind == "product":
                key = ("product", inst.height, len(inst.children))
            else:
                key = ("transform", inst.height, inst.wave)
            group_map.setdefault(key, []).append(i)
        self.value_groups: list[_ValueGroup] = []
        for key in sorted(group_map, key=lambda k: (k[1], k[0], str(k[2:]))):
            rows = group_map[key]
            kind = key[0]
            g = _ValueGroup(kind=kind, height=key[1], rows=np.array(rows, dtype=np.intp))
            if kind in ("sum", "product"):
                g.child_idx = np.array([instances[i].children for i in rows], dtype=np.intp)
                if kind == "sum":
                    g.nodes = [instances[i].node for i in rows]
                    g.logit_unique = len(set(g.nodes)) == len(g.nodes)
            elif kind == "transform":
                g.wave = key[2]
                g.child_idx = np.array([instances[i].children[0] for i in rows], dtype=np.intp)
                g.wave_rows = np.array([instances[i].wave_row for i in rows], dtype=np.intp)
            else:
                g.width = key[2]
                g.gather = _Gather([resolve(instances[i].src) for i in rows], key[2])
            if g.child_idx is not None:
                g.child_unique = np.unique(g.child_idx).size == g.child_idx.size
            self.value_groups.append(g)

        # contiguous parameter storage. Owned layer arrays are rebound to rows
        # of a per-wave buffer, making the per-step stack and the flat-vector
        # scatter single vectorized copies. A layer object hence belongs to one
        # compiled circuit; stale aliases of the original arrays go dead.
        bound: set[int] = set()
        for wave in self.down_waves:
            store = affine.stack_layers(wave.unique_layers)
            wave.param_store = store
            has_foreign = False
            for u, layer in enumerate(wave.unique_layers):
                if id(layer) in bound:
                    has_foreign = True
                    continue
                bound.add(id(layer))
                unitary.set_param_array(layer.u_param, store.u[u])
                unitary.set_param_array(layer.v_param, store.v[u])
                layer.diag = store.diag[u]
                layer.bias = store.bias[u]
            wave.static_stack = None if has_foreign else store

        # sum logits live in one buffer, giving vectorized per-group weight
        # lookups and a single-copy scatter for the logits region
        sum_ids = [nid for nid, node in enumerate(nodes) if isinstance(node, SumNode)]
        offs: dict[int, int] = {}
        off = 0
        for nid in sum_ids:
            offs[nid] = off
            off += nodes[nid].logits.size
        self.logit_buf = np.empty(off)
        for nid in sum_ids:
            sl = slice(offs[nid], offs[nid] + nodes[nid].logits.size)
            self.logit_buf[sl] = nodes[nid].logits
            nodes[nid].logits = self.logit_buf[sl]
        for g in self.value_groups:
            if g.kind == "sum":
                arity = g.child_idx.shape[1]
                base = np.array([offs[nid] for nid in g.nodes], dtype=np.intp)
                g.logit_take = base[:, None] + np.arange(arity, dtype=np.intp)[None, :]

        self.instances = instances
        self.num_instances = len(instances)

    # -- forward -------------------------------------------------------------

    def forward(self, x: np.ndarray, keep: bool = False):
        """One batched pass; all scratch state is local, so concurrent calls
        on the same circuit are safe as long as parameters are not mutated."""
        batch = x.shape[0]
        root = x[:, self.root_cols]
        waves = self.down_waves
        wave_state = []           # per wave: (stack, v, o, ld)
        wave_ys = []
        for wave in waves:  # top-down: transformed coordinates
            xin = wave.gather.gather(root, wave_ys)
            n_inst, _, dim = xin.shape
            src = wave.static_stack
            if src is None:
                src = affine.stack_layers(wave.unique_layers)
            if wave.matmul:
                nu, gc = len(wave.unique_layers), wave.group_count
                mat = affine.materialize_stack(src)
                xg = np.ascontiguousarray(xin).reshape(nu, gc * batch, dim)
                o, y, ld = affine.forward_matstack(mat, xg)
                if ld.shape[1] == 1:
                    ld = np.broadcast_to(np.repeat(ld[:, 0], gc)[:, None],
                                         (n_inst, batch))
                else:
                    ld = ld.reshape(n_inst, batch)
                wave_state.append((mat, xg, o, ld))
                wave_ys.append(y.reshape(n_inst, batch, dim))
            else:
                stack = wave.expand(src)
                v, o, y, ld = affine.forward_stacked(stack, xin)
                wave_state.append((stack, v, o, ld))
                wave_ys.append(y)

        values = np.empty((self.num_instances, batch))
        leaf_xs = {}
        sum_logw = {}
        for gi, g in enumerate(self.value_groups):  # bottom-up: log-densities
            if g.kind == "leaf":
                xin = g.gather.gather(root, wave_ys)
                values[g.rows] = (-0.5 * np.einsum("ibd,ibd->ib", xin, xin)
                                  - 0.5 * g.width * LOG_2PI)
                if keep:
                    leaf_xs[gi] = xin
            elif g.kind == "product":
                values[g.rows] = values[g.child_idx].sum(axis=1)
            elif g.kind == "transform":
                values[g.rows] = values[g.child_idx] + wave_state[g.wave][3][g.wave_rows]
            else:
                logw = log_softmax(self.logit_buf[g.logit_take], axis=1)
                values[g.rows] = logsumexp(logw[:, :, None] + values[g.child_idx], axis=1)
                if keep:
                    sum_logw[gi] = logw

        out = values[0].copy()
        if keep:
            return out, (root, values, wave_state, wave_ys, leaf_xs, sum_logw)
        return out, None

    # -- backward ------------------------------------------------------------

    def backward(self, state, upstream: np.ndarray) -> np.ndarray:
        root, values, wave_state, wave_ys, leaf_xs, sum_logw = state
        waves = self.down_waves
        layout = self.circuit.param_layout()
        grad = np.zeros(layout.total)

        vcot = np.zeros_like(values)
        vcot[0] = upstream

        for gi in range(len(self.value_groups) - 1, -1, -1):  # top-down cotangents
            g = self.value_groups[gi]
            if g.kind == "product":
                up = vcot[g.rows][:, None, :]
                if g.child_unique:
                    vcot[g.child_idx] += up
                else:
                    np.add.at(vcot, g.child_idx, up)
            elif g.kind == "transform":
                if g.child_unique:
                    vcot[g.child_idx] += vcot[g.rows]
                else:
                    np.add.at(vcot, g.child_idx, vcot[g.rows])
            elif g.kind == "sum":
                logw = sum_logw[gi]
                with np.errstate(invalid="ignore"):
                    resp = np.exp(logw[:, :, None] + values[g.child_idx]
                                  - values[g.rows][:, None, :])
                resp = np.nan_to_num(resp, nan=0.0, posinf=0.0)
                up = vcot[g.rows][:, None, :]
                scaled = up * resp
                if g.child_unique:
                    vcot[g.child_idx] += scaled
                else:
                    np.add.at(vcot, g.child_idx, scaled)
                glog = (scaled - up * np.exp(logw)[:, :, None]).sum(axis=2)
                if g.logit_index is None:
                    g.logit_index = np.array(
                        [np.arange(layout.logits_slice(nid).start,
                                   layout.logits_slice(nid).stop)
                         for nid in g.nodes], dtype=np.intp)
                if g.logit_unique:
                    grad[g.logit_index] += glog
                else:
                    np.add.at(grad, g.logit_index, glog)

        # slot cotangents flow bottom-up through the transform stack
        wave_cots = [np.zeros_like(y) for y in wave_ys]
        root_cot = np.zeros_like(root)
        for gi, g in enumerate(self.value_groups):
            if g.kind == "leaf":
                contrib = -leaf_xs[gi] * vcot[g.rows][:, :, None]
                g.gather.scatter_add(contrib, root_cot, wave_cots)

        for w in sorted(range(len(waves)), key=lambda i: waves[i].key[0], reverse=True):
            wave = waves[w]
            g_ld = vcot[wave.instances]
            if wave.matmul:
                mat, xg, o, _ = wave_state[w]
                n_inst, batch = g_ld.shape
                nu = len(wave.unique_layers)
                rows = xg.shape[1]
                g_u, g_v, g_diag, g_bias, g_xg = affine.backward_matstack(
                    mat, xg, o, wave_cots[w].reshape(xg.shape),
                    g_ld.reshape(nu, rows))
                acc = [g_u, g_v, g_diag, g_bias]
                g_x = g_xg.reshape(n_inst, batch, -1)
            else:
                stack, v, o, _ = wave_state[w]
                g_u, g_v, g_diag, g_bias, g_x = affine.backward_stacked(
                    stack, v, o, wave_cots[w], g_ld)
                acc = [wave.aggregate(arr) for arr in (g_u, g_v, g_diag, g_bias)]
            for fi, fname in enumerate(("u", "v", "diag", "bias")):
                sl, _ = layout.wave_field(w, fname)
                if sl is not None:
                    grad[sl] += acc[fi][layout.wave_owned_rows(w)].ravel()
            for owner_wave, owner_row, local_row in wave.foreign:
                for fi, fname in enumerate(("u", "v", "diag", "bias")):
                    sl, shape = layout.wave_field(owner_wave, fname)
                    block = grad[sl].reshape(shape)
                    block[owner_row] += acc[fi][local_row]
            wave.gather.scatter_add(g_x, root_cot, wave_cots)
        return grad


# ---------------------------------------------------------------------------
# parameter layout (flat vector order: down-wave layer blocks, then sum logits)


class ParamLayout:
    def __init__(self, circuit: Circuit):
        plan = circuit.plan()
        self.blocks: list[tuple[str, slice, tuple, str]] = []
        self._wave_fields: dict[tuple[int, str], tuple[slice, tuple]] = {}
        self._wave_owned: dict[int, np.ndarray] = {}
        self._logits: dict[int, slice] = {}
        offset = 0
        owned_layers: set[int] = set()
        for w, wave in enumerate(plan.down_waves):
            owned = [u for u, layer in enumerate(wave.unique_layers)
                     if id(layer) not in owned_layers]
            for u in owned:
                owned_layers.add(id(wave.unique_layers[u]))
            self._wave_owned[w] = np.array(owned, dtype=np.intp)
            if not owned:
                continue
            layers = [wave.unique_layers[u] for u in owned]
            fields = {
                "u": np.stack([unitary.param_arrays(l.u_param) for l in layers]),
                "v": np.stack([unitary.param_arrays(l.v_param) for l in layers]),
                "diag": np.stack([l.diag for l in layers]),
                "bias": np.stack([l.bias for l in layers]),
            }
            for fname, arr in fields.items():
                sl = slice(offset, offset + arr.size)
                offset += arr.size
                name = f"transforms{w}.{fname}"
                self.blocks.append((name, sl, arr.shape, fname))
                self._wave_fields[(w, fname)] = (sl, arr.shape)
        logits_start = offset
        for nid, node in enumerate(circuit.nodes):
            if isinstance(node, SumNode):
                sl = slice(offset, offset + node.logits.size)
                offset += node.logits.size
                self.blocks.append((f"sum{nid}.logits", sl, node.logits.shape, "logits"))
                self._logits[nid] = sl
        self.total = offset
        # blocks enumerate sum nodes in the same id order as the plan's logit
        # buffer, so the whole logits region transfers in one copy
        assert offset - logits_start == plan.logit_buf.size
        self._logits_region = slice(logits_start, offset)
        self._plan = plan
        self._circuit = circuit

    def wave_field(self, w: int, fname: str):
        entry = self._wave_fields.get((w, fname))
        return entry if entry else (None, None)

    def wave_owned_rows(self, w: int) -> np.ndarray:
        return self._wave_owned[w]

    def logits_slice(self, node_id: int) -> slice:
        return self._logits[node_id]

    def gather(self) -> np.ndarray:
        flat = np.empty(self.total)
        for name, sl, shape, fname in self.blocks:
            if fname == "logits":
                continue
            w = int(name[len("transforms") : name.index(".")])
            store = self._plan.down_waves[w].param_store
            flat[sl] = getattr(store, fname)[self._wave_owned[w]].reshape(-1)
        flat[self._logits_region] = self._plan.logit_buf
        return flat

    def scatter(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.shape[0] != self.total:
            raise DimensionMismatchError(self.total, flat.shape[0], "parameter vector")
        for name, sl, shape, fname in self.blocks:
            if fname == "logits":
                continue
            w = int(name[len("transforms") : name.index(".")])
            store = self._plan.down_waves[w].param_store
            arr = getattr(store, fname)
            arr[self._wave_owned[w]] = flat[sl].reshape(shape)
        self._plan.logit_buf[...] = flat[self._logits_region]

    def diag_slices(self) -> list[slice]:
        return [sl for name, sl, shape, fname in self.blocks if fname == "diag"]

    def nonfinite_blocks(self, flat: np.ndarray) -> list[str]:
        return [name for name, sl, _, _ in self.blocks
                if not np.isfinite(flat[sl]).all()]

    def grads_by_name(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[sl].reshape(shape)
                for name, sl, shape, _ in self.blocks}


# ---------------------------------------------------------------------------
# module-level operations


def logpdf(circuit: Circuit, x: np.ndarray) -> np.ndarray:
    return circuit.logpdf(x)


def grad(circuit: Circuit, x: np.ndarray, upstream: np.ndarray | None = None):
    return circuit.grad(x, upstream)


def count_induced_trees(circuit: Circuit) -> int:
    """Number of induced trees (mixture components), with shared-node memoization."""
    circuit._ensure_valid()
    memo: dict[int, int] = {}

    def count(i: int) -> int:
        if i in memo:
            return memo[i]
        node = circuit.nodes[i]
        if isinstance(node, LeafNode):
            c = 1
        elif isinstance(node, TransformNode):
            c = count(node.child)
        elif isinstance(node, SumNode):
            c = sum(count(ch) for ch in node.children)
        else:
            c = 1
            for ch in node.children:
                c *= count(ch)
        memo[i] = c
        return c

    return count(circuit.root)


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


def gaussian_components(circuit: Circuit, node_id: int, cap: int = DEFAULT_EXPANSION_CAP):
    """(log-weight, mean, cov) per induced tree of the subtree, in scope order.

    Requires identity nonlinearities below node_id. Shared nodes are expanded
    once (components do not depend on the path above the node).
    """
    circuit._ensure_valid()
    nodes, scopes = circuit.nodes, circuit.scopes
    memo: dict[int, list] = {}

    def expand(i: int):
        if i in memo:
            return memo[i]
        node = nodes[i]
        if isinstance(node, LeafNode):
            k = len(scopes[i])
            comps = [(0.0, np.zeros(k), np.eye(k))]
        elif isinstance(node, TransformNode):
            if not node.layer.nonlinearity.is_identity:
                raise NotTractableError(
                    f"node {i} applies a {node.layer.nonlinearity.tag} nonlinearity; "
                    "mixture expansion needs affine transforms", node_id=i)
            wtil, btil = affine.inverse_affine(node.layer)
            comps = [(lw, wtil @ m + btil, 0.5 * ((wtil @ c @ wtil.T) + (wtil @ c @ wtil.T).T))
                     for lw, m, c in expand(node.child)]
        elif isinstance(node, SumNode):
            logw = node.log_weights
            comps = [(lw + logw[j], m, c)
                     for j, ch in enumerate(node.children)
                     for lw, m, c in expand(ch)]
        else:
            parts = [expand(ch) for ch in node.children]
            # concat order: children order; reorder to this node's scope order
            concat_scope = tuple(itertools.chain.from_iterable(
                scopes[ch] for ch in node.children))
            perm = np.array([concat_scope.index(v) for v in scopes[i]], dtype=np.intp)
            comps = []
            for combo in itertools.product(*parts):
                lw = sum(c[0] for c in combo)
                mean = np.concatenate([c[1] for c in combo])[perm]
                k = mean.shape[0]
                cov = np.zeros((k, k))
                off = 0
                for _, m, c in combo:
                    cov[off : off + len(m), off : off + len(m)] = c
                    off += len(m)
                comps.append((lw, mean, cov[np.ix_(perm, perm)]))
        memo[i] = comps
        return comps

    trees = _subtree_tree_count(circuit, node_id)
    if trees > cap:
        raise ExpansionCapError(trees, cap)
    return expand(node_id)


def _subtree_tree_count(circuit: Circuit, node_id: int) -> int:
    memo: dict[int, int] = {}

    def count(i: int) -> int:
        if i in memo:
            return memo[i]
        node = circuit.nodes[i]
        if isinstance(node, LeafNode):
            c = 1
        elif isinstance(node, TransformNode):
            c = count(node.child)
        elif isinstance(node, SumNode):
            c = sum(count(ch) for ch in node.children)
        else:
            c = 1
            for ch in node.children:
                c *= count(ch)
        memo[i] = c
        return c

    return count(node_id)


def to_gmm(circuit: Circuit, cap: int = DEFAULT_EXPANSION_CAP) -> list[GaussianComponent]:
    """Expand the circuit into an explicit Gaussian mixture in variable order.

    Brute-force oracle: component count equals count_induced_trees(circuit),
    capped at `cap`. Weights are linear and sum to 1 up to rounding.
    """
    comps = gaussian_components(circuit, circuit.root, cap)
    scope = circuit.scopes[circuit.root]
    perm = np.array([scope.index(v) for v in range(circuit.dim)], dtype=np.intp)
    out = []
    for lw, mean, cov in comps:
        out.append(GaussianComponent(float(np.exp(lw)), mean[perm], cov[np.ix_(perm, perm)]))
    return out


def sample(circuit: Circuit, rng: np.random.Generator, n: int) -> np.ndarray:
    """Ancestral sampling; n rows in variable order, deterministic given rng.

    Rows whose transform inverse lands outside a nonlinearity's range (selu)
    are redrawn from the root, which renormalizes the density over the
    reachable support.
    """
    circuit._ensure_valid()
    if n < 0:
        raise ValueError("n must be nonnegative")
    nodes, scopes = circuit.nodes, circuit.scopes

    def draw(i: int, m: int):
        node = nodes[i]
        k = len(scopes[i])
        if isinstance(node, LeafNode):
            return rng.standard_normal((m, k)), np.ones(m, dtype=bool)
        if isinstance(node, SumNode):
            probs = np.exp(node.log_weights)
            idx = rng.choice(len(node.children), size=m, p=probs)
            vals = np.empty((m, k))
            ok = np.ones(m, dtype=bool)
            for j, ch in enumerate(node.children):
                mask = idx == j
                cnt = int(mask.sum())
                if cnt:
                    v, o = draw(ch, cnt)
                    vals[mask] = v
                    ok[mask] = o
            return vals, ok
        if isinstance(node, ProductNode):
            vals = np.empty((m, k))
            ok = np.ones(m, dtype=bool)
            pm = {v: p for p, v in enumerate(scopes[i])}
            for ch in node.children:
                v, o = draw(ch, m)
                cols = [pm[var] for var in scopes[ch]]
                vals[:, cols] = v
                ok &= o
            return vals, ok
        z, ok = draw(node.child, m)
        good = ok & node.layer.nonlinearity.in_range(z).all(axis=1)
        vals = np.zeros((m, k))
        if good.any():
            vals[good] = affine.inverse(node.layer, z[good])
        return vals, good

    out = np.empty((n, circuit.dim))
    cols = list(scopes[circuit.root])
    pending = np.arange(n)
    for _ in range(SAMPLE_MAX_ROUNDS):
        if pending.size == 0:
            return out
        vals, ok = draw(circuit.root, pending.size)
        accepted = pending[ok]
        out[np.ix_(accepted, cols)] = vals[ok]
        pending = pending[~ok]
    raise SptnError(
        f"sampling failed for {pending.size} rows after {SAMPLE_MAX_ROUNDS} rounds; "
        "transform inverses keep leaving the nonlinearity's range")
