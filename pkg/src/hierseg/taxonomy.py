"""Label taxonomies: hierarchy definitions, parent-child mapping matrices, label projection.

A taxonomy is an ordered stack of label levels, coarsest first. Every class at
level ``h`` (h >= 1) has exactly one parent at level ``h - 1``, so adjacent
levels are linked by a binary mapping matrix whose rows are one-hot parent
indicators. The taxonomy file format is JSON::

    {
      "levels": [
        {"names": ["ground", "construction"]},
        {"names": ["grass", "road", "building"], "parents": [0, 0, 1]}
      ]
    }

The first level carries only names; every later level adds a ``parents`` list
aligned with ``names`` that holds the parent index at the previous level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

BUILTIN_TAXONOMIES = ("s3dis_h", "campus3d", "sensaturban_h", "toy_two_level")


@dataclass(frozen=True)
class HierarchySpec:
    """An ordered label hierarchy, coarsest level first.

    ``class_names[h]`` lists the class names of level ``h``;
    ``parents[h - 1][c]`` is the parent index (at level ``h - 1``) of class
    ``c`` at level ``h``, for every ``h >= 1``.
    """

    class_names: tuple[tuple[str, ...], ...]
    parents: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.class_names) < 1:
            raise ValueError("taxonomy needs at least one level")
        if len(self.parents) != len(self.class_names) - 1:
            raise ValueError(
                f"expected {len(self.class_names) - 1} parent lists for "
                f"{len(self.class_names)} levels, got {len(self.parents)}"
            )
        for h, names in enumerate(self.class_names):
            if len(names) == 0:
                raise ValueError(f"level {h} has no classes")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate class names at level {h}")
        for h in range(1, self.num_levels):
            n_child = len(self.class_names[h])
            n_parent = len(self.class_names[h - 1])
            if n_child < n_parent:
                raise ValueError(
                    f"level {h} has {n_child} classes, fewer than its parent level ({n_parent})"
                )
            par = self.parents[h - 1]
            if len(par) != n_child:
                raise ValueError(f"level {h}: {n_child} classes but {len(par)} parent entries")
            for c, p in enumerate(par):
                if not 0 <= p < n_parent:
                    raise ValueError(f"level {h}, class {c}: parent index {p} out of range")
            if len(set(par)) != n_parent:
                childless = sorted(set(range(n_parent)) - set(par))
                raise ValueError(f"level {h - 1}: classes {childless} have no children")

    @property
    def num_levels(self) -> int:
        return len(self.class_names)

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(len(names) for names in self.class_names)

    def ancestor_labels(self, fine_labels: np.ndarray) -> list[np.ndarray]:
        """Expand finest-level labels into a per-level label list (coarse first)."""
        fine_labels = np.asarray(fine_labels, dtype=np.int64)
        if fine_labels.size and (fine_labels.min() < 0 or fine_labels.max() >= self.class_counts[-1]):
            raise ValueError("finest-level label out of range")
        out = [fine_labels]
        for h in range(self.num_levels - 1, 0, -1):
            lookup = np.asarray(self.parents[h - 1], dtype=np.int64)
            out.append(lookup[out[-1]])
        return out[::-1]

    def to_dict(self) -> dict:
        levels: list[dict] = [{"names": list(self.class_names[0])}]
        for h in range(1, self.num_levels):
            levels.append({"names": list(self.class_names[h]), "parents": list(self.parents[h - 1])})
        return {"levels": levels}

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchySpec":
        try:
            levels = data["levels"]
        except (KeyError, TypeError) as exc:
            raise ValueError("taxonomy file must contain a 'levels' list") from exc
        names = tuple(tuple(level["names"]) for level in levels)
        parents = tuple(tuple(level["parents"]) for level in levels[1:])
        return cls(class_names=names, parents=parents)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "HierarchySpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_builtin(name: str) -> HierarchySpec:
    """Load one of the taxonomy fixtures shipped with the package."""
    if name not in BUILTIN_TAXONOMIES:
        raise ValueError(f"unknown builtin taxonomy {name!r}; available: {BUILTIN_TAXONOMIES}")
    text = resources.files("hierseg.taxonomies").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return HierarchySpec.from_dict(json.loads(text))


@dataclass(frozen=True)
class MappingMatrix:
    """Binary child-of indicator between one level and the next coarser one.

    ``entries[c, p] == 1`` iff class ``c`` at level ``level`` is a child of
    class ``p`` at level ``level - 1``. Rows sum to exactly 1.
    """

    entries: np.ndarray
    level: int

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries)
        if entries.ndim != 2:
            raise ValueError("mapping entries must be a 2-d matrix")
        if not np.isin(entries, (0, 1)).all():
            raise ValueError("mapping entries must be binary")
        row_sums = entries.sum(axis=1)
        if not (row_sums == 1).all():
            raise ValueError("every child must have exactly one parent")
        col_sums = entries.sum(axis=0)
        if not (col_sums >= 1).all():
            raise ValueError("every parent must have at least one child")
        object.__setattr__(self, "entries", entries.astype(np.int64))

    @property
    def num_children(self) -> int:
        return self.entries.shape[0]

    @property
    def num_parents(self) -> int:
        return self.entries.shape[1]

    def parent_lookup(self) -> np.ndarray:
        """Per-child parent index, shape (num_children,)."""
        return self.entries.argmax(axis=1)


def build_mapping(spec: HierarchySpec, level: int) -> MappingMatrix:
    """Mapping matrix between ``level`` (children) and ``level - 1`` (parents).

    ``level`` must be in ``1 .. spec.num_levels - 1``.
    """
    if not 1 <= level < spec.num_levels:
        raise ValueError(f"level must be in [1, {spec.num_levels - 1}], got {level}")
    n_child = len(spec.class_names[level])
    n_parent = len(spec.class_names[level - 1])
    entries = np.zeros((n_child, n_parent), dtype=np.int64)
    for child, parent in enumerate(spec.parents[level - 1]):
        entries[child, parent] = 1
    return MappingMatrix(entries=entries, level=level)


def all_mappings(spec: HierarchySpec) -> list[MappingMatrix]:
    """Mapping matrices for every adjacent level pair, finest side 1..H-1."""
    return [build_mapping(spec, level) for level in range(1, spec.num_levels)]


def derive_mapping_from_labels(
    coarse_labels: np.ndarray,
    fine_labels: np.ndarray,
    num_coarse: int,
    num_fine: int,
    level: int = 1,
) -> MappingMatrix:
    """Recover the child-of matrix from paired label observations.

    Each fine class is assigned to the coarse class it co-occurs with most
    often, which minimizes the number of entry-wise label mismatches under the
    one-parent-per-child constraint. Ties break toward the smaller coarse
    index, so the result is deterministic.
    """
    coarse_labels = np.asarray(coarse_labels, dtype=np.int64)
    fine_labels = np.asarray(fine_labels, dtype=np.int64)
    if coarse_labels.shape != fine_labels.shape or coarse_labels.ndim != 1:
        raise ValueError("coarse and fine labels must be 1-d arrays of equal length")
    if coarse_labels.size and (coarse_labels.min() < 0 or coarse_labels.max() >= num_coarse):
        raise ValueError("coarse label out of range")
    if fine_labels.size and (fine_labels.min() < 0 or fine_labels.max() >= num_fine):
        raise ValueError("fine label out of range")

    counts = np.zeros((num_fine, num_coarse), dtype=np.int64)
    np.add.at(counts, (fine_labels, coarse_labels), 1)
    missing = np.flatnonzero(counts.sum(axis=1) == 0)
    if missing.size:
        raise ValueError(f"fine classes absent from the labels: {missing.tolist()}")

    entries = np.zeros_like(counts)
    entries[np.arange(num_fine), counts.argmax(axis=1)] = 1
    return MappingMatrix(entries=entries, level=level)


def project_labels_down(coarse_onehot: np.ndarray, mapping: MappingMatrix) -> np.ndarray:
    """Expand a per-point coarse distribution into child-class space.

    Row ``i`` of the result places the coarse mass of point ``i`` on every
    child of the corresponding parent: one-hot rows become multi-hot child
    indicators, soft rows broadcast their probability to all children.
    """
    coarse_onehot = np.asarray(coarse_onehot, dtype=np.float64)
    if coarse_onehot.ndim != 2 or coarse_onehot.shape[1] != mapping.num_parents:
        raise ValueError(
            f"expected shape (N, {mapping.num_parents}), got {coarse_onehot.shape}"
        )
    return coarse_onehot @ mapping.entries.T.astype(np.float64)


def consistency_rate(
    pred_fine: np.ndarray, pred_coarse: np.ndarray, mapping: MappingMatrix
) -> float:
    """Fraction of points whose fine prediction is a child of their coarse prediction."""
    pred_fine = np.asarray(pred_fine, dtype=np.int64)
    pred_coarse = np.asarray(pred_coarse, dtype=np.int64)
    if pred_fine.shape != pred_coarse.shape or pred_fine.ndim != 1:
        raise ValueError("predictions must be 1-d arrays of equal length")
    if pred_fine.size == 0:
        raise ValueError("empty prediction arrays")
    if pred_fine.min() < 0 or pred_fine.max() >= mapping.num_children:
        raise ValueError("fine prediction out of range")
    if pred_coarse.min() < 0 or pred_coarse.max() >= mapping.num_parents:
        raise ValueError("coarse prediction out of range")
    return float(mapping.entries[pred_fine, pred_coarse].mean())
