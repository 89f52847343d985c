"""Class hierarchy: levels, parent-child edges, path validation and metrics.

Taxonomy files are line-oriented UTF-8 text::

    # comment
    level family: felidae, ursidae
    level species: felis catus, malaysia tiger, ...
    edge felidae -> felis catus
    edge family.* -> species.*      # qualified names and wildcards

Levels are kept in file order; edges always connect a class of one level to
a class of the next level. Class names may repeat across levels, in which
case edges must qualify them as ``level.class``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

LabelPath = Tuple[int, ...]


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class LevelSpec:
    index: int  # 1-based
    name: str
    classes: Tuple[str, ...]

    def __post_init__(self):
        if len(self.classes) < 2:
            raise TaxonomyError(f"level {self.name!r} needs at least 2 classes, has {len(self.classes)}")
        if len(set(self.classes)) != len(self.classes):
            dup = next(c for c in self.classes if self.classes.count(c) > 1)
            raise TaxonomyError(f"duplicate class {dup!r} in level {self.name!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise TaxonomyError(f"unknown class {name!r} in level {self.name!r}") from None


@dataclass
class Taxonomy:
    levels: List[LevelSpec]
    # edges[l] holds (parent, child) index pairs from level l to level l+1 (0-based l)
    edges: List[List[Tuple[int, int]]]
    _edge_sets: List[FrozenSet[Tuple[int, int]]] = field(init=False, repr=False)
    _paths: Optional[List[LabelPath]] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.levels:
            raise TaxonomyError("taxonomy has no levels")
        if len(self.edges) != len(self.levels) - 1:
            raise TaxonomyError("need one edge list per pair of consecutive levels")
        self._edge_sets = [frozenset(e) for e in self.edges]
        for l, es in enumerate(self._edge_sets):
            children = {c for _, c in es}
            child_level = self.levels[l + 1]
            for c in range(child_level.n_classes):
                if c not in children:
                    raise TaxonomyError(
                        f"class {child_level.classes[c]!r} in level {child_level.name!r} has no parent"
                    )
        if not self.valid_paths():
            raise TaxonomyError("taxonomy admits no complete label path")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def level_names(self) -> List[str]:
        return [lv.name for lv in self.levels]

    @property
    def class_counts(self) -> List[int]:
        return [lv.n_classes for lv in self.levels]

    def level(self, name: str) -> LevelSpec:
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise TaxonomyError(f"unknown level {name!r}")

    def has_edge(self, level: int, parent: int, child: int) -> bool:
        return (parent, child) in self._edge_sets[level]

    def is_valid_path(self, path: Sequence[int]) -> bool:
        """True iff every consecutive pair of the path is an edge."""
        if len(path) != self.n_levels:
            return False
        for l, lv in enumerate(self.levels):
            if not 0 <= int(path[l]) < lv.n_classes:
                return False
        return all((int(path[l]), int(path[l + 1])) in self._edge_sets[l] for l in range(self.n_levels - 1))

    def valid_paths(self) -> List[LabelPath]:
        if self._paths is None:
            children: List[Dict[int, List[int]]] = []
            for es in self.edges:
                d: Dict[int, List[int]] = {}
                for p, c in es:
                    d.setdefault(p, []).append(c)
                children.append(d)

            paths: List[LabelPath] = [(i,) for i in range(self.levels[0].n_classes)]
            for d in children:
                paths = [p + (c,) for p in paths for c in sorted(set(d.get(p[-1], ())))]
            self._paths = paths
        return self._paths

    def encode(self, names: Sequence[str]) -> LabelPath:
        if len(names) != self.n_levels:
            raise TaxonomyError(f"expected {self.n_levels} labels, got {len(names)}")
        return tuple(lv.index_of(n) for lv, n in zip(self.levels, names))

    def decode(self, path: Sequence[int]) -> Tuple[str, ...]:
        return tuple(lv.classes[int(i)] for lv, i in zip(self.levels, path))

    def to_text(self) -> str:
        lines = [f"level {lv.name}: {', '.join(lv.classes)}" for lv in self.levels]
        for l, es in enumerate(self.edges):
            pa, ch = self.levels[l], self.levels[l + 1]
            lines += [f"edge {pa.name}.{pa.classes[p]} -> {ch.name}.{ch.classes[c]}" for p, c in es]
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# parsing


def _resolve(ref: str, levels: List[LevelSpec], lineno: int) -> List[Tuple[int, List[int]]]:
    """Candidate (level, class indices) matches for an edge endpoint."""
    ref = ref.strip()
    if "." in ref:
        lvname, _, cname = ref.partition(".")
        for l, lv in enumerate(levels):
            if lv.name == lvname.strip():
                cname = cname.strip()
                if cname == "*":
                    return [(l, list(range(lv.n_classes)))]
                if cname in lv.classes:
                    return [(l, [lv.classes.index(cname)])]
                raise TaxonomyError(f"line {lineno}: dangling edge, no class {cname!r} in level {lv.name!r}")
    hits = [(l, [lv.classes.index(ref)]) for l, lv in enumerate(levels) if ref in lv.classes]
    if not hits:
        raise TaxonomyError(f"line {lineno}: dangling edge, unknown class {ref!r}")
    return hits


def parse_taxonomy(text: str) -> Taxonomy:
    levels: List[LevelSpec] = []
    raw_edges: List[Tuple[int, str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        if keyword == "level":
            name, sep, classes = rest.partition(":")
            if not sep or not name.strip():
                raise TaxonomyError(f"line {lineno}: expected 'level <name>: <class>, ...'")
            if raw_edges:
                raise TaxonomyError(f"line {lineno}: level declared after edges")
            names = tuple(c.strip() for c in classes.split(",") if c.strip())
            if not names:
                raise TaxonomyError(f"line {lineno}: level {name.strip()!r} is empty")
            if name.strip() in (lv.name for lv in levels):
                raise TaxonomyError(f"line {lineno}: level {name.strip()!r} declared twice")
            try:
                levels.append(LevelSpec(len(levels) + 1, name.strip(), names))
            except TaxonomyError as exc:
                raise TaxonomyError(f"line {lineno}: {exc}") from None
        elif keyword == "edge":
            parent, sep, child = rest.partition("->")
            if not sep or not parent.strip() or not child.strip():
                raise TaxonomyError(f"line {lineno}: expected 'edge <parent> -> <child>'")
            raw_edges.append((lineno, parent, child))
        else:
            raise TaxonomyError(f"line {lineno}: unknown directive {keyword!r}")

    if not levels:
        raise TaxonomyError("no levels declared")
    edges: List[List[Tuple[int, int]]] = [[] for _ in range(len(levels) - 1)]
    seen: List[Set[Tuple[int, int]]] = [set() for _ in edges]
    for lineno, parent, child in raw_edges:
        pcands = _resolve(parent, levels, lineno)
        ccands = _resolve(child, levels, lineno)
        pairs = [(pl, pi, ci) for pl, pi in pcands for cl, ci in ccands if cl == pl + 1]
        if not pairs:
            raise TaxonomyError(f"line {lineno}: edge must join a level to the next one")
        if len(pairs) > 1:
            raise TaxonomyError(f"line {lineno}: ambiguous edge, qualify names as level.class")
        l, pidx, cidx = pairs[0]
        for p, c in itertools.product(pidx, cidx):
            if (p, c) not in seen[l]:
                seen[l].add((p, c))
                edges[l].append((p, c))
    return Taxonomy(levels, edges)


def load_taxonomy(path: Union[str, Path]) -> Taxonomy:
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))


def builtin_taxonomy(name: str) -> Taxonomy:
    """Load one of the taxonomies shipped with the package ('shapes', 'animals')."""
    text = resources.files("hdlnet").joinpath("taxonomies", f"{name}.tax").read_text(encoding="utf-8")
    return parse_taxonomy(text)


def full_bipartite(levels: Sequence[Tuple[str, Sequence[str]]]) -> Taxonomy:
    """Taxonomy where every class of a level is a parent of every class of the next."""
    specs = [LevelSpec(i + 1, name, tuple(classes)) for i, (name, classes) in enumerate(levels)]
    edges = [
        list(itertools.product(range(a.n_classes), range(b.n_classes))) for a, b in zip(specs, specs[1:])
    ]
    return Taxonomy(specs, edges)


# ----------------------------------------------------------------------------
# metrics


def _as_matrix(paths, n_levels: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(paths, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, n_levels or 0)
    if arr.ndim != 2:
        raise ValueError(f"expected a sequence of label paths, got shape {arr.shape}")
    return arr


def violation_rate(tax: Taxonomy, predictions) -> float:
    """Fraction of predicted paths that break the hierarchy (0 for no predictions)."""
    preds = _as_matrix(predictions, tax.n_levels)
    if len(preds) == 0:
        return 0.0
    bad = sum(not tax.is_valid_path(p) for p in preds)
    return bad / len(preds)


def per_level_accuracy(predictions, truths) -> List[float]:
    p, t = _as_matrix(predictions), _as_matrix(truths)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truths {t.shape} differ in shape")
    if len(p) == 0:
        raise ValueError("no predictions to score")
    return [float(x) for x in (p == t).mean(axis=0)]


def path_accuracy(predictions, truths) -> float:
    """Fraction of samples whose whole label path is correct."""
    p, t = _as_matrix(predictions), _as_matrix(truths)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truths {t.shape} differ in shape")
    if len(p) == 0:
        raise ValueError("no predictions to score")
    return float((p == t).all(axis=1).mean())
