"""Tree-ensemble representation, JSON ingestion, inference and coverage fitting.

Routing convention: an internal node sends ``x[feature] <= threshold`` to its
left child, everything else to the right child. Ties route left.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from ctxshap.errors import (
    EmptyBackgroundError,
    InvalidValueError,
    SchemaError,
    StructureError,
    WidthError,
)

OBJECTIVES = ("raw", "logistic")

_TOP_KEYS = {"features", "base_score", "objective", "trees"}
_TREE_KEYS = {"root", "nodes"}
_LEAF_KEYS = {"id", "leaf"}
_LEAF_OPTIONAL = {"cover"}
_SPLIT_KEYS = {"id", "feature", "threshold", "left", "right", "cover"}


@dataclass(frozen=True)
class FeatureSet:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise InvalidValueError("a model needs at least one feature")
        for name in names:
            if not isinstance(name, str) or not name:
                raise InvalidValueError(f"feature names must be non-empty strings, got {name!r}")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise InvalidValueError(f"duplicate feature names: {dupes}")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)


@dataclass(frozen=True)
class TreeNode:
    id: int
    split_feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    left_fraction: Optional[float] = None
    leaf_value: Optional[float] = None
    cover: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.leaf_value is not None

    @property
    def kind(self) -> str:
        return "leaf" if self.is_leaf else "internal"


@dataclass(frozen=True)
class _Compiled:
    # parallel arrays indexed by node position; children are positions, -1 for leaves
    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]
    fraction: tuple[Optional[float], ...]
    root: int


@dataclass(frozen=True)
class Tree:
    root: int
    nodes: tuple[TreeNode, ...]
    _compiled: _Compiled = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "_compiled", _compile(self.root, self.nodes))

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[self._position(node_id)]

    def _position(self, node_id: int) -> int:
        for pos, node in enumerate(self.nodes):
            if node.id == node_id:
                return pos
        raise KeyError(node_id)

    def split_features(self) -> set[int]:
        return {n.split_feature for n in self.nodes if not n.is_leaf}


def _compile(root: int, nodes: tuple[TreeNode, ...]) -> _Compiled:
    pos = {}
    for i, node in enumerate(nodes):
        if node.id in pos:
            raise StructureError(f"duplicate node id {node.id}")
        pos[node.id] = i
    if root not in pos:
        raise StructureError(f"root id {root} is not in the node table")

    for node in nodes:
        if node.is_leaf:
            continue
        for side, child in (("left", node.left), ("right", node.right)):
            if child not in pos:
                raise StructureError(f"node {node.id}: {side} child {child} does not exist")

    # every node must be reached exactly once from the root
    seen = set()
    stack = [root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise StructureError(f"node {nid} is reached twice (cycle or shared child)")
        seen.add(nid)
        node = nodes[pos[nid]]
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)
    orphans = sorted(set(pos) - seen)
    if orphans:
        raise StructureError(f"nodes not reachable from root {root}: {orphans}")

    return _Compiled(
        feature=tuple(-1 if n.is_leaf else n.split_feature for n in nodes),
        threshold=tuple(math.nan if n.is_leaf else n.threshold for n in nodes),
        left=tuple(-1 if n.is_leaf else pos[n.left] for n in nodes),
        right=tuple(-1 if n.is_leaf else pos[n.right] for n in nodes),
        value=tuple(n.leaf_value if n.is_leaf else math.nan for n in nodes),
        fraction=tuple(n.left_fraction for n in nodes),
        root=pos[root],
    )


@dataclass(frozen=True)
class TreeEnsemble:
    features: FeatureSet
    trees: tuple[Tree, ...]
    base_score: float = 0.0
    objective: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if self.objective not in OBJECTIVES:
            raise InvalidValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not math.isfinite(self.base_score):
            raise InvalidValueError("base_score must be finite")
        if not self.trees:
            raise StructureError("ensemble has no trees")
        for t, tree in enumerate(self.trees):
            for node in tree.nodes:
                if not node.is_leaf and not 0 <= node.split_feature < self.features.count:
                    raise StructureError(
                        f"tree {t} node {node.id}: feature index {node.split_feature} "
                        f"out of range for {self.features.count} features"
                    )

    @property
    def n_features(self) -> int:
        return self.features.count

    def used_features(self) -> set[int]:
        used = set()
        for tree in self.trees:
            used |= tree.split_features()
        return used

    def transform(self, margin: float) -> float:
        if self.objective == "logistic":
            return 1.0 / (1.0 + math.exp(-margin))
        return margin


@dataclass(frozen=True)
class Instance:
    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        for i, v in enumerate(values):
            if not math.isfinite(v):
                raise InvalidValueError(f"instance value {i} is not finite ({v}); missing values are not supported")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True)
class Dataset:
    features: FeatureSet
    rows: np.ndarray = field(compare=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim == 1 and rows.size:
            rows = rows.reshape(1, -1)
        if rows.size == 0:
            raise EmptyBackgroundError("dataset has no rows")
        if rows.ndim != 2 or rows.shape[1] != self.features.count:
            raise WidthError(f"dataset rows have shape {rows.shape}, expected width {self.features.count}")
        if not np.all(np.isfinite(rows)):
            bad = int(np.argwhere(~np.isfinite(rows))[0][0])
            raise InvalidValueError(f"row {bad} has a non-finite value; missing values are not supported")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def instance(self, i: int) -> Instance:
        return Instance(tuple(self.rows[i]))

    def instances(self) -> list[Instance]:
        return [self.instance(i) for i in range(len(self))]


# -- parsing -----------------------------------------------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_keys(obj, required: set, where: str, optional: set = frozenset()):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = required - obj.keys()
    extra = obj.keys() - required - optional
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unexpected fields {sorted(extra)}")


def _number(v, where: str) -> float:
    if not _is_number(v):
        raise SchemaError(f"{where}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise InvalidValueError(f"{where}: value must be finite, got {v}")
    return v


def _cover(v, where: str) -> int:
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    if not _is_int(v):
        raise SchemaError(f"{where}: cover must be an integer, got {v!r}")
    if v < 0:
        raise InvalidValueError(f"{where}: cover must be non-negative, got {v}")
    return v


def _parse_node(obj, where: str) -> TreeNode:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    if "leaf" in obj:
        _check_keys(obj, _LEAF_KEYS, where, _LEAF_OPTIONAL)
        if not _is_int(obj["id"]):
            raise SchemaError(f"{where}: id must be an integer")
        cover = _cover(obj["cover"], where) if "cover" in obj else None
        return TreeNode(id=obj["id"], leaf_value=_number(obj["leaf"], where + ".leaf"), cover=cover)
    _check_keys(obj, _SPLIT_KEYS, where)
    for key in ("id", "feature", "left", "right"):
        if not _is_int(obj[key]):
            raise SchemaError(f"{where}: {key} must be an integer, got {obj[key]!r}")
    return TreeNode(
        id=obj["id"],
        split_feature=obj["feature"],
        threshold=_number(obj["threshold"], where + ".threshold"),
        left=obj["left"],
        right=obj["right"],
        cover=_cover(obj["cover"], where),
    )


def _with_fractions(nodes: Sequence[TreeNode]) -> tuple[TreeNode, ...]:
    covers = {n.id: n.cover for n in nodes}
    out = []
    for n in nodes:
        frac = None
        if not n.is_leaf and n.cover and covers.get(n.left) is not None:
            frac = covers[n.left] / n.cover
        out.append(replace(n, left_fraction=frac))
    return tuple(out)


def model_from_dict(doc: Mapping[str, Any]) -> TreeEnsemble:
    _check_keys(doc, _TOP_KEYS, "model")
    names = doc["features"]
    if not isinstance(names, list):
        raise SchemaError("model.features: expected a list of strings")
    features = FeatureSet(tuple(names))
    base_score = _number(doc["base_score"], "model.base_score")
    objective = doc["objective"]
    if objective not in OBJECTIVES:
        raise SchemaError(f"model.objective: expected one of {OBJECTIVES}, got {objective!r}")
    if not isinstance(doc["trees"], list) or not doc["trees"]:
        raise SchemaError("model.trees: expected a non-empty list")
    trees = []
    for t, tree_doc in enumerate(doc["trees"]):
        where = f"trees[{t}]"
        _check_keys(tree_doc, _TREE_KEYS, where)
        if not _is_int(tree_doc["root"]):
            raise SchemaError(f"{where}.root must be an integer")
        if not isinstance(tree_doc["nodes"], list) or not tree_doc["nodes"]:
            raise SchemaError(f"{where}.nodes: expected a non-empty list")
        nodes = [_parse_node(n, f"{where}.nodes[{k}]") for k, n in enumerate(tree_doc["nodes"])]
        try:
            trees.append(Tree(root=tree_doc["root"], nodes=_with_fractions(nodes)))
        except StructureError as exc:
            raise StructureError(f"{where}: {exc}") from None
    return TreeEnsemble(features=features, trees=tuple(trees), base_score=base_score, objective=objective)


def parse_model(document: str) -> TreeEnsemble:
    """Parse a model JSON document and validate its structure."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model is not valid JSON: {exc}") from None
    return model_from_dict(doc)


def load_model(path) -> TreeEnsemble:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def model_to_dict(model: TreeEnsemble) -> dict:
    trees = []
    for tree in model.trees:
        nodes = []
        for n in tree.nodes:
            if n.is_leaf:
                d = {"id": n.id, "leaf": n.leaf_value}
                if n.cover is not None:
                    d["cover"] = n.cover
            else:
                d = {
                    "id": n.id,
                    "feature": n.split_feature,
                    "threshold": n.threshold,
                    "left": n.left,
                    "right": n.right,
                    "cover": n.cover,
                }
            nodes.append(d)
        trees.append({"root": tree.root, "nodes": nodes})
    return {
        "features": list(model.features.names),
        "base_score": model.base_score,
        "objective": model.objective,
        "trees": trees,
    }


def serialize_model(model: TreeEnsemble) -> str:
    return json.dumps(model_to_dict(model), indent=2)


# -- inference ---------------------------------------------------------------


def _as_values(model: TreeEnsemble, x) -> tuple[float, ...]:
    if not isinstance(x, Instance):
        x = Instance(tuple(x))
    if len(x) != model.n_features:
        raise WidthError(f"instance has {len(x)} values, model expects {model.n_features}")
    return x.values


def _leaf_value(c: _Compiled, x: Sequence[float]) -> float:
    j = c.root
    while c.left[j] >= 0:
        j = c.left[j] if x[c.feature[j]] <= c.threshold[j] else c.right[j]
    return c.value[j]


def predict_margin(model: TreeEnsemble, x) -> float:
    """Sum of routed leaf values plus ``base_score``, before the objective transform."""
    values = _as_values(model, x)
    total = 0.0
    for tree in model.trees:
        total += _leaf_value(tree._compiled, values)
    return total + model.base_score


def predict(model: TreeEnsemble, x) -> float:
    return model.transform(predict_margin(model, x))


# -- coverage ----------------------------------------------------------------


def fit_coverage(model: TreeEnsemble, background: Dataset) -> TreeEnsemble:
    """Recompute every node's cover and left fraction by routing the background rows."""
    if not isinstance(background, Dataset):
        background = Dataset(model.features, np.asarray(background, dtype=np.float64))
    if len(background) == 0:
        raise EmptyBackgroundError("background dataset is empty")
    if background.features.count != model.n_features:
        raise WidthError(
            f"background has {background.features.count} features, model expects {model.n_features}"
        )
    rows = background.rows
    trees = []
    for tree in model.trees:
        c = tree._compiled
        counts = [0] * len(tree.nodes)
        stack = [(c.root, np.arange(rows.shape[0]))]
        while stack:
            j, idx = stack.pop()
            counts[j] = int(idx.size)
            if c.left[j] < 0:
                continue
            goes_left = rows[idx, c.feature[j]] <= c.threshold[j]
            stack.append((c.left[j], idx[goes_left]))
            stack.append((c.right[j], idx[~goes_left]))
        nodes = [replace(n, cover=counts[k]) for k, n in enumerate(tree.nodes)]
        trees.append(Tree(root=tree.root, nodes=_with_fractions(nodes)))
    return replace(model, trees=tuple(trees))


# -- tabular data ------------------------------------------------------------


def read_csv(path, features: FeatureSet) -> Dataset:
    """Read a CSV with a header row into a Dataset ordered like ``features``.

    Columns not named by the model (targets, ids) are ignored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyBackgroundError(f"{path}: file is empty") from None
        missing = [n for n in features.names if n not in header]
        if missing:
            raise WidthError(f"{path}: missing columns for model features {missing}")
        cols = [header.index(n) for n in features.names]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append([float(rec[c]) for c in cols])
            except (ValueError, IndexError):
                raise InvalidValueError(f"{path}:{lineno}: non-numeric or missing value") from None
    if not rows:
        raise EmptyBackgroundError(f"{path}: no data rows")
    return Dataset(features, np.array(rows, dtype=np.float64))


def instance_from_mapping(features: FeatureSet, values: Mapping[str, float]) -> Instance:
    missing = [n for n in features.names if n not in values]
    if missing:
        raise WidthError(f"instance is missing features {missing}")
    extra = sorted(set(values) - set(features.names))
    if extra:
        raise WidthError(f"instance has unknown features {extra}")
    try:
        return Instance(tuple(float(values[n]) for n in features.names))
    except (TypeError, ValueError) as exc:
        raise InvalidValueError(f"instance values must be numbers: {exc}") from None


def iter_nodes(model: TreeEnsemble) -> Iterable[tuple[int, TreeNode]]:
    for t, tree in enumerate(model.trees):
        for node in tree.nodes:
            yield t, node
