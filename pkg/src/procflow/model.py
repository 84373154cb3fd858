"""Tree-structured process model: types, JSON (de)serialization, validation, diffing.

Models are immutable value objects.  A model is a tree of nodes; `call` nodes
reference external functionality through an endpoint key, `manipulate` nodes
run a finalize script against the instance context, and the remaining kinds
provide control flow (sequence, parallel, choose, loop, terminate).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Optional

CONTAINER_KINDS = {"sequence", "parallel", "parallel_branch", "choose",
                   "alternative", "otherwise", "loop"}
LEAF_KINDS = {"call", "manipulate", "terminate"}
NODE_KINDS = CONTAINER_KINDS | LEAF_KINDS

SCRIPT_SLOTS = ("prepare", "finalize", "update", "rescue")


class ModelError(Exception):
    """Raised when a document cannot be parsed into a valid model."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class Scripts:
    prepare: Optional[str] = None
    finalize: Optional[str] = None
    update: Optional[str] = None
    rescue: Optional[str] = None

    def to_dict(self) -> dict[str, str]:
        return {k: v for k in SCRIPT_SLOTS if (v := getattr(self, k)) is not None}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Scripts":
        return cls(**{k: raw.get(k) for k in SCRIPT_SLOTS})

    def __bool__(self) -> bool:
        return any(getattr(self, k) is not None for k in SCRIPT_SLOTS)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    label: str = ""
    children: tuple["Node", ...] = ()
    endpoint_key: Optional[str] = None          # call only
    parameters: dict[str, Any] = field(default_factory=dict)  # call only
    scripts: Scripts = field(default_factory=Scripts)
    condition: Optional[str] = None             # alternative / loop
    loop_mode: str = "pre_test"                 # loop only
    wait: Any = "all"                           # parallel only: int or "all"

    def walk(self) -> Iterator["Node"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "kind": self.kind}
        if self.label:
            out["label"] = self.label
        if self.kind in CONTAINER_KINDS:
            out["children"] = [c.to_dict() for c in self.children]
        if self.kind == "call":
            out["endpoint_key"] = self.endpoint_key
            if self.parameters:
                out["parameters"] = self.parameters
        if self.scripts:
            out["scripts"] = self.scripts.to_dict()
        if self.kind in ("alternative", "loop") and self.condition is not None:
            out["condition"] = self.condition
        if self.kind == "loop":
            out["loop_mode"] = self.loop_mode
        if self.kind == "parallel":
            out["wait"] = self.wait
        return out


@dataclass(frozen=True)
class Position:
    node_id: str
    mode: str = "at"                 # "at" or "after"
    passthrough: Optional[str] = None  # callback id of a suspended async activity

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"node_id": self.node_id, "mode": self.mode}
        if self.passthrough:
            out["passthrough"] = self.passthrough
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Position":
        return cls(node_id=raw["node_id"], mode=raw.get("mode", "at"),
                   passthrough=raw.get("passthrough"))


@dataclass(frozen=True)
class ProcessModel:
    root: Node
    endpoints: dict[str, str] = field(default_factory=dict)
    dataelements: dict[str, Any] = field(default_factory=dict)
    attributes: dict[str, str] = field(default_factory=dict)

    def node(self, node_id: str) -> Optional[Node]:
        for n in self.root.walk():
            if n.id == node_id:
                return n
        return None

    def node_ids(self) -> list[str]:
        return [n.id for n in self.root.walk()]

    def to_dict(self) -> dict[str, Any]:
        return {
            "root": self.root.to_dict(),
            "endpoints": dict(self.endpoints),
            "dataelements": dict(self.dataelements),
            "attributes": dict(self.attributes),
        }


def empty_model() -> ProcessModel:
    return ProcessModel(root=Node(id="root", kind="sequence"))


def _parse_node(raw: Any, path: str, errors: list[str]) -> Optional[Node]:
    if not isinstance(raw, dict):
        errors.append(f"{path}: node must be an object")
        return None
    kind = raw.get("kind")
    nid = raw.get("id")
    if not isinstance(nid, str) or not nid:
        errors.append(f"{path}: missing node id")
        nid = f"<missing@{path}>"
    if kind not in NODE_KINDS:
        errors.append(f"{path} (id {nid}): unknown node kind {kind!r}")
        return None
    children: list[Node] = []
    raw_children = raw.get("children", [])
    if kind in LEAF_KINDS and raw.get("children"):
        errors.append(f"node {nid}: {kind} nodes must not have children")
        raw_children = []
    for i, rc in enumerate(raw_children):
        child = _parse_node(rc, f"{path}.children[{i}]", errors)
        if child is not None:
            children.append(child)
    scripts = Scripts.from_dict(raw.get("scripts", {}) or {})
    if kind == "manipulate" and (scripts.prepare or scripts.update or scripts.rescue):
        errors.append(f"node {nid}: manipulate nodes carry only a finalize script")
        scripts = Scripts(finalize=scripts.finalize)
    node = Node(
        id=nid,
        kind=kind,
        label=raw.get("label", ""),
        children=tuple(children),
        endpoint_key=raw.get("endpoint_key") if kind == "call" else None,
        parameters=raw.get("parameters", {}) if kind == "call" else {},
        scripts=scripts,
        condition=raw.get("condition"),
        loop_mode=raw.get("loop_mode", "pre_test"),
        wait=raw.get("wait", "all"),
    )
    _check_node(node, errors)
    return node


def _check_node(node: Node, errors: list[str]) -> None:
    if node.kind == "call" and not node.endpoint_key:
        errors.append(f"node {node.id}: call node lacks endpoint_key")
    if node.kind == "parallel":
        if any(c.kind != "parallel_branch" for c in node.children):
            errors.append(f"node {node.id}: parallel children must all be parallel_branch")
        if node.wait != "all":
            if not isinstance(node.wait, int) or isinstance(node.wait, bool) \
                    or not (1 <= node.wait <= max(len(node.children), 1)):
                errors.append(f"node {node.id}: wait {node.wait!r} out of range "
                              f"(1..{len(node.children)} or \"all\")")
    if node.kind == "choose":
        others = [c for c in node.children if c.kind == "otherwise"]
        if len(others) > 1:
            errors.append(f"node {node.id}: choose allows at most one otherwise")
        if any(c.kind not in ("alternative", "otherwise") for c in node.children):
            errors.append(f"node {node.id}: choose children must be alternatives/otherwise")
    if node.kind == "alternative" and node.condition is None:
        errors.append(f"node {node.id}: alternative requires a condition")
    if node.kind == "loop":
        if node.condition is None:
            errors.append(f"node {node.id}: loop requires a condition")
        if node.loop_mode not in ("pre_test", "post_test"):
            errors.append(f"node {node.id}: loop_mode must be pre_test or post_test")


def validate(model: ProcessModel, executable: bool = True) -> list[str]:
    """Structural validation; with executable=True also require endpoint bindings."""
    errors: list[str] = []
    seen: set[str] = set()
    for n in model.root.walk():
        if n.id in seen:
            errors.append(f"node {n.id}: duplicate node id")
        seen.add(n.id)
        if executable and n.kind == "call" and n.endpoint_key not in model.endpoints:
            errors.append(f"node {n.id}: endpoint key {n.endpoint_key!r} "
                          f"not bound in endpoints")
    return errors


def parse_model(document: str | dict[str, Any], executable: bool = True) -> ProcessModel:
    """Parse and validate a JSON model document.

    Raises ModelError carrying every structural error found, each naming the
    offending node id or path.
    """
    if isinstance(document, str):
        try:
            raw = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ModelError([f"malformed JSON: {exc}"]) from exc
    else:
        raw = document
    if not isinstance(raw, dict) or "root" not in raw:
        raise ModelError(["document must be an object with a \"root\" node"])
    errors: list[str] = []
    root = _parse_node(raw["root"], "root", errors)
    if root is None:
        raise ModelError(errors or ["unparseable root node"])
    model = ProcessModel(
        root=root,
        endpoints=dict(raw.get("endpoints", {})),
        dataelements=dict(raw.get("dataelements", {})),
        attributes={k: str(v) for k, v in dict(raw.get("attributes", {})).items()},
    )
    errors.extend(validate(model, executable=executable))
    if errors:
        raise ModelError(errors)
    return model


def serialize_model(model: ProcessModel) -> str:
    return json.dumps(model.to_dict(), indent=2, sort_keys=True)


def models_equal(a: ProcessModel, b: ProcessModel) -> bool:
    return a.to_dict() == b.to_dict()


# -- model diffing -----------------------------------------------------------

@dataclass(frozen=True)
class ChangeSet:
    """Node-level difference between two models.

    `inserted`/`deleted` are node ids; `modified` maps a node id to its new
    serialized form (including position among siblings).  Context maps
    (endpoints, dataelements, attributes) are compared wholesale.
    """
    inserted: tuple[str, ...] = ()
    deleted: tuple[str, ...] = ()
    modified: tuple[str, ...] = ()
    new_document: dict[str, Any] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.inserted or self.deleted or self.modified
                    or self.new_document.get("_context_changed"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "inserted": list(self.inserted),
            "deleted": list(self.deleted),
            "modified": list(self.modified),
        }


def _shallow_dict(node: Node) -> dict[str, Any]:
    d = node.to_dict()
    d.pop("children", None)
    d["child_ids"] = [c.id for c in node.children]
    return d


def diff_models(old: ProcessModel, new: ProcessModel) -> ChangeSet:
    old_nodes = {n.id: n for n in old.root.walk()}
    new_nodes = {n.id: n for n in new.root.walk()}
    inserted = sorted(set(new_nodes) - set(old_nodes))
    deleted = sorted(set(old_nodes) - set(new_nodes))
    modified = sorted(
        nid for nid in set(old_nodes) & set(new_nodes)
        if _shallow_dict(old_nodes[nid]) != _shallow_dict(new_nodes[nid])
    )
    doc = new.to_dict()
    doc["_context_changed"] = (
        old.endpoints != new.endpoints
        or old.dataelements != new.dataelements
        or old.attributes != new.attributes
    )
    return ChangeSet(inserted=tuple(inserted), deleted=tuple(deleted),
                     modified=tuple(modified), new_document=doc)


def apply_changeset(old: ProcessModel, change: ChangeSet) -> ProcessModel:
    """Applying a diff to its `old` model yields the `new` model."""
    if change.is_empty():
        return old
    doc = dict(change.new_document)
    doc.pop("_context_changed", None)
    return parse_model(doc, executable=False)
