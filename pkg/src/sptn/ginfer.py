"""Exact marginal and conditional inference for affine-Gaussian circuits.

Works on circuits whose transform layers all use the identity nonlinearity.
Each transform then states that its variables are an affine image of the
child's variables, X = A Z + c with A = (V diag^-1 U^T) and c = -A b, so the
subtree below any node is a Gaussian mixture and marginalization drops rows.

The recursion carries a pending affine map from the current node's output to
the still-needed query rows, composing transform inverses on the way down.
At a product node the map must be block-aligned with the child partition
(each needed row reads from a single child, off-block entries below 1e-12);
when a rotation above the product has mixed the blocks, that product's
subtree is expanded into explicit mixture components instead, subject to a
component cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import affine, circuit as circuit_mod, gaussian
from .errors import DimensionMismatchError, NotTractableError, NullEvidenceError

BLOCK_ALIGN_TOL = 1e-12
NULL_EVIDENCE_LOGPDF = -700.0


@dataclass
class Tractability:
    """Static answer to "can marginals be computed, and at what cost".

    status is one of:
      "no": a transform uses a non-identity nonlinearity, marginals are
            not available at all;
      "fully": no product node sits below a transform, so the pending map
            at every product is a row selection and never mixes blocks;
      "with_expansion": some product may need local mixture expansion;
            max_expansion bounds the number of components any single
            expansion can produce.
    """

    status: str
    max_expansion: int | None = None
    blocking_node: int | None = None

    def __bool__(self) -> bool:
        return self.status != "no"


def is_tractable(circuit: "circuit_mod.Circuit") -> Tractability:
    circuit._ensure_valid()
    nodes = circuit.nodes
    for i, node in enumerate(nodes):
        if isinstance(node, circuit_mod.TransformNode):
            if not node.layer.nonlinearity.is_identity:
                return Tractability("no", blocking_node=i)

    # products reachable through at least one transform
    exposed: set[int] = set()
    seen: set[tuple[int, bool]] = set()
    stack = [(circuit.root, False)]
    while stack:
        i, under = stack.pop()
        if (i, under) in seen:
            continue
        seen.add((i, under))
        node = nodes[i]
        if isinstance(node, circuit_mod.ProductNode):
            if under:
                exposed.add(i)
            stack.extend((c, under) for c in node.children)
        elif isinstance(node, circuit_mod.SumNode):
            stack.extend((c, under) for c in node.children)
        elif isinstance(node, circuit_mod.TransformNode):
            stack.append((node.child, True))

    if not exposed:
        return Tractability("fully")
    worst = max(circuit_mod._subtree_tree_count(circuit, p) for p in exposed)
    return Tractability("with_expansion", max_expansion=worst)


def _check_marginalized(circuit, marginalized) -> tuple[int, ...]:
    marg = tuple(int(v) for v in marginalized)
    if len(set(marg)) != len(marg):
        raise ValueError("duplicate variables in marginalized set")
    for v in marg:
        if not 0 <= v < circuit.dim:
            raise ValueError(f"marginalized variable {v} out of range for dim {circuit.dim}")
    return marg


def marginal_logpdf(circuit: "circuit_mod.Circuit", x: np.ndarray, marginalized,
                    cap: int = circuit_mod.DEFAULT_EXPANSION_CAP) -> np.ndarray:
    """Log-density of the kept variables with `marginalized` integrated out.

    x has full width; entries in marginalized columns are ignored (they may
    be anything, including NaN). With an empty marginalized set this returns
    exactly circuit.logpdf(x). Raises NotTractableError on non-identity
    nonlinearities and ExpansionCapError when a needed local expansion would
    exceed `cap` components.
    """
    circuit._ensure_valid()
    marg = _check_marginalized(circuit, marginalized)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != circuit.dim:
        raise DimensionMismatchError((None, circuit.dim), x.shape, "input batch")
    if not marg:
        return circuit.logpdf(x)
    kept = [v for v in range(circuit.dim) if v not in set(marg)]
    batch = x.shape[0]
    if not kept:
        return np.zeros(batch)
    if not np.isfinite(x[:, kept]).all():
        raise ValueError("non-finite values in kept input columns")

    nodes, scopes = circuit.nodes, circuit.scopes

    def descend(node_id: int, amat: np.ndarray, cvec: np.ndarray,
                qvals: np.ndarray) -> np.ndarray:
        # amat: (m, k) map from node output (scope order) to needed rows,
        # cvec: (m,), qvals: (batch, m) query values for those rows.
        node = nodes[node_id]
        if isinstance(node, circuit_mod.LeafNode):
            return gaussian.logpdf(qvals, cvec, amat @ amat.T)
        if isinstance(node, circuit_mod.TransformNode):
            if not node.layer.nonlinearity.is_identity:
                raise NotTractableError(
                    f"node {node_id} applies a {node.layer.nonlinearity.tag} "
                    "nonlinearity; marginals need affine transforms",
                    node_id=node_id)
            wtil, btil = affine.inverse_affine(node.layer)
            return descend(node.child, amat @ wtil, amat @ btil + cvec, qvals)
        if isinstance(node, circuit_mod.SumNode):
            logw = node.log_weights
            stacked = np.stack([descend(c, amat, cvec, qvals) for c in node.children])
            return gaussian.logsumexp(logw[:, None] + stacked, axis=0)

        # product: try to split rows by the child block structure
        pm = {v: p for p, v in enumerate(scopes[node_id])}
        child_cols = [np.array([pm[v] for v in scopes[c]], dtype=np.intp)
                      for c in node.children]
        m = amat.shape[0]
        owner = np.full(m, -1, dtype=np.intp)
        aligned = True
        for ci, cols in enumerate(child_cols):
            touched = np.abs(amat[:, cols]).max(axis=1) > BLOCK_ALIGN_TOL
            clash = touched & (owner >= 0)
            if clash.any():
                aligned = False
                break
            owner[touched] = ci
        if aligned:
            total = np.zeros(batch)
            for ci, (child, cols) in enumerate(zip(node.children, child_cols)):
                rows = np.nonzero(owner == ci)[0]
                if rows.size == 0:
                    continue  # child fully marginalized, integrates to 1
                total += descend(child, amat[np.ix_(rows, cols)], cvec[rows],
                                 qvals[:, rows])
            return total

        # fallback: expand this subtree into explicit Gaussian components
        comps = circuit_mod.gaussian_components(circuit, node_id, cap)
        parts = np.empty((len(comps), batch))
        for j, (lw, mean, cov) in enumerate(comps):
            parts[j] = lw + gaussian.logpdf(
                qvals, amat @ mean + cvec, amat @ cov @ amat.T)
        return gaussian.logsumexp(parts, axis=0)

    root_scope = scopes[circuit.root]
    pos = {v: p for p, v in enumerate(root_scope)}
    amat0 = np.zeros((len(kept), circuit.dim))
    for r, v in enumerate(kept):
        amat0[r, pos[v]] = 1.0
    return descend(circuit.root, amat0, np.zeros(len(kept)), x[:, kept])


def conditional_logpdf(circuit: "circuit_mod.Circuit", x: np.ndarray, evidence,
                       cap: int = circuit_mod.DEFAULT_EXPANSION_CAP) -> np.ndarray:
    """Log-density of the non-evidence variables given the evidence columns.

    Computed as logpdf(x) minus the evidence marginal. Raises
    NullEvidenceError when any row's evidence log-density falls below -700,
    where the ratio stops being numerically meaningful.
    """
    circuit._ensure_valid()
    evid = tuple(int(v) for v in evidence)
    if len(set(evid)) != len(evid):
        raise ValueError("duplicate variables in evidence set")
    for v in evid:
        if not 0 <= v < circuit.dim:
            raise ValueError(f"evidence variable {v} out of range for dim {circuit.dim}")
    targets = [v for v in range(circuit.dim) if v not in set(evid)]
    ev_marg = marginal_logpdf(circuit, x, targets, cap)
    bad = np.nonzero(ev_marg < NULL_EVIDENCE_LOGPDF)[0]
    if bad.size:
        raise NullEvidenceError(
            f"evidence log-density {ev_marg[bad[0]]:.3f} at row {bad[0]} is below "
            f"{NULL_EVIDENCE_LOGPDF:g}; the conditional is not defined there")
    return circuit.logpdf(np.asarray(x, dtype=np.float64)) - ev_marg


@dataclass
class EvidenceQuery:
    """Observed-variable pattern for conditional queries.

    mask is a string over {'o', 'm'} with one character per variable:
    'o' marks an observed (evidence) column, 'm' a column whose density is
    queried given the evidence.
    """

    observed: tuple[int, ...]
    targets: tuple[int, ...]

    @classmethod
    def from_mask(cls, mask: str, dim: int) -> "EvidenceQuery":
        if len(mask) != dim:
            raise ValueError(f"mask length {len(mask)} does not match dim {dim}")
        bad = sorted(set(mask) - {"o", "m"})
        if bad:
            raise ValueError(f"mask may only contain 'o' and 'm', got {bad}")
        observed = tuple(i for i, ch in enumerate(mask) if ch == "o")
        targets = tuple(i for i, ch in enumerate(mask) if ch == "m")
        return cls(observed, targets)
