"""Model persistence: a versioned JSON document with a shared-layer table.

Transform nodes reference rows of a layer table by index, so layers shared
between several transform nodes stay shared after a load instead of being
silently duplicated. Scopes are stored on leaves only; every other node's
scope is derived from its children, mirroring construction. Floats are
serialized with Python's shortest round-trip repr, which preserves the exact
bit pattern, and files are written atomically.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import affine, unitary
from .circuit import Circuit, LeafNode, ProductNode, SumNode, TransformNode
from .data import Standardization
from .errors import ModelFormatError

FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    circuit: Circuit
    standardization: Standardization | None = None
    arch_spec: dict | None = None
    train_config: dict | None = None
    seed: int | None = None


def _layer_to_dict(layer: affine.SvdAffine) -> dict:
    d = {"kind": layer.kind, "dim": layer.dim,
         "diag": layer.diag.tolist(), "bias": layer.bias.tolist(),
         "nonlinearity": layer.nonlinearity.to_dict()}
    if layer.kind == "givens":
        d["u_theta"] = layer.u_param.theta.tolist()
        d["v_theta"] = layer.v_param.theta.tolist()
    else:
        d["u_vectors"] = layer.u_param.vectors.tolist()
        d["v_vectors"] = layer.v_param.vectors.tolist()
    return d


def _layer_from_dict(d: dict) -> affine.SvdAffine:
    try:
        kind = d["kind"]
        dim = int(d["dim"])
        if kind == "givens":
            u = unitary.GivensParam(dim, np.asarray(d["u_theta"], dtype=np.float64))
            v = unitary.GivensParam(dim, np.asarray(d["v_theta"], dtype=np.float64))
        elif kind == "householder":
            u = unitary.HouseholderParam(dim, np.asarray(d["u_vectors"], dtype=np.float64))
            v = unitary.HouseholderParam(dim, np.asarray(d["v_vectors"], dtype=np.float64))
        else:
            raise ModelFormatError(f"unknown layer kind {kind!r}")
        return affine.SvdAffine(
            dim, u, v,
            np.asarray(d["diag"], dtype=np.float64),
            np.asarray(d["bias"], dtype=np.float64),
            affine.Nonlinearity.from_dict(d["nonlinearity"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad layer record: {exc}") from None


def model_document(circuit: Circuit, standardization: Standardization | None = None,
                   arch_spec: dict | None = None, train_config: dict | None = None,
                   seed: int | None = None) -> dict:
    layer_ids: dict[int, int] = {}
    layer_table: list[dict] = []
    node_table: list[dict] = []
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, LeafNode):
            node_table.append({"type": "leaf",
                               "scope": [int(v) for v in circuit.scopes[i]]})
        elif isinstance(node, SumNode):
            node_table.append({"type": "sum", "children": list(node.children),
                               "logits": node.logits.tolist()})
        elif isinstance(node, ProductNode):
            node_table.append({"type": "product", "children": list(node.children)})
        else:
            if id(node.layer) not in layer_ids:
                layer_ids[id(node.layer)] = len(layer_table)
                layer_table.append(_layer_to_dict(node.layer))
            node_table.append({"type": "transform", "child": node.child,
                               "layer": layer_ids[id(node.layer)]})
    doc = {"format_version": FORMAT_VERSION, "dim": circuit.dim,
           "root": circuit.root, "nodes": node_table, "layers": layer_table,
           "standardization": standardization.to_dict() if standardization else None,
           "arch_spec": arch_spec, "train_config": train_config, "seed": seed}
    return doc


def save_model(path, circuit: Circuit, standardization: Standardization | None = None,
               arch_spec: dict | None = None, train_config: dict | None = None,
               seed: int | None = None) -> None:
    doc = model_document(circuit, standardization, arch_spec, train_config, seed)
    text = json.dumps(doc, indent=1)
    directory = os.path.dirname(os.path.abspath(str(path))) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> ModelBundle:
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from None
    return model_from_document(doc, where=str(path))


def model_from_document(doc: dict, where: str = "model") -> ModelBundle:
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{where}: expected a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"{where}: unsupported format_version {version!r}; "
            f"this build reads version {FORMAT_VERSION}")
    try:
        dim = int(doc["dim"])
        root = int(doc["root"])
        layer_records = doc["layers"]
        node_records = doc["nodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: missing or malformed field: {exc}") from None

    layers = [_layer_from_dict(rec) for rec in layer_records]
    nodes = []
    for idx, rec in enumerate(node_records):
        try:
            kind = rec["type"]
            if kind == "leaf":
                nodes.append((LeafNode(), tuple(int(v) for v in rec["scope"])))
            elif kind == "sum":
                nodes.append((SumNode([int(c) for c in rec["children"]],
                                      np.asarray(rec["logits"], dtype=np.float64)),
                              None))
            elif kind == "product":
                nodes.append((ProductNode([int(c) for c in rec["children"]]), None))
            elif kind == "transform":
                nodes.append((TransformNode(int(rec["child"]), layers[rec["layer"]]),
                              None))
            else:
                raise ModelFormatError(f"{where}: node {idx}: unknown type {kind!r}")
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ModelFormatError(f"{where}: node {idx}: {exc}") from None

    # derive non-leaf scopes from children (leaves carry theirs)
    scopes: list = [s for _, s in nodes]
    node_objs = [n for n, _ in nodes]

    def scope_of(i: int, trail: tuple = ()) -> tuple:
        if scopes[i] is not None:
            return scopes[i]
        if i in trail:
            raise ModelFormatError(f"{where}: node {i}: cycle while deriving scopes")
        node = node_objs[i]
        trail = trail + (i,)
        if isinstance(node, SumNode):
            s = scope_of(node.children[0], trail) if node.children else ()
        elif isinstance(node, ProductNode):
            s = tuple(v for c in node.children for v in scope_of(c, trail))
        else:
            s = scope_of(node.child, trail)
        scopes[i] = s
        return s

    for i in range(len(node_objs)):
        try:
            scope_of(i)
        except RecursionError:
            raise ModelFormatError(f"{where}: node table too deep or cyclic") from None

    circuit = Circuit(node_objs, root, scopes, dim)
    issues = circuit.validate()
    if issues:
        raise ModelFormatError(
            f"{where}: invalid circuit: " + "; ".join(str(i) for i in issues[:5]))
    std = doc.get("standardization")
    return ModelBundle(
        circuit=circuit,
        standardization=Standardization.from_dict(std) if std else None,
        arch_spec=doc.get("arch_spec"),
        train_config=doc.get("train_config"),
        seed=doc.get("seed"))
