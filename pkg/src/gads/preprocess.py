"""Landmark normalization relative to the nose and grouping into facial regions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import N_LANDMARKS, RawLandmarkSet

NOSE_INDEX = 30
REGION_ORDER = ("left_eye", "right_eye", "left_cheek", "right_cheek", "chin")


class DegenerateInputError(ValueError):
    pass


class GroupConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedLandmarks:
    points: np.ndarray  # (67, 3), the reference landmark removed
    reference_index: int

    def original_index(self, i: int) -> int:
        """Map a 68-point index to its row in ``points``."""
        if i == self.reference_index:
            raise GroupConfigError(f"index {i} is the removed reference landmark")
        return i if i < self.reference_index else i - 1


@dataclass(frozen=True)
class GroupSpec:
    """Named index lists into the 68-point ordering, in model input order."""

    regions: tuple[tuple[str, tuple[int, ...]], ...] = (
        ("left_eye", (36, 37, 38, 39, 40, 41)),
        ("right_eye", (42, 43, 44, 45, 46, 47)),
        ("left_cheek", (1, 2, 3, 4, 5)),
        ("right_cheek", (11, 12, 13, 14, 15)),
        ("chin", (6, 7, 8, 9, 10)),
    )
    reference_index: int = NOSE_INDEX

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.regions)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(idx) for _, idx in self.regions)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for _, idx in self.regions for i in idx)

    def validate(self) -> "GroupSpec":
        if not self.regions:
            raise GroupConfigError("group spec has no regions")
        if not 0 <= self.reference_index < N_LANDMARKS:
            raise GroupConfigError(f"reference index {self.reference_index} out of range")
        seen: set[int] = set()
        for name, idx in self.regions:
            if not idx:
                raise GroupConfigError(f"region {name!r} is empty")
            for i in idx:
                if not 0 <= i < N_LANDMARKS:
                    raise GroupConfigError(f"region {name!r}: index {i} outside 0..67")
                if i == self.reference_index:
                    raise GroupConfigError(f"region {name!r}: index {i} is the reference landmark")
                if i in seen:
                    raise GroupConfigError(f"region {name!r}: index {i} used twice")
                seen.add(i)
        return self

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[int]], reference_index: int = NOSE_INDEX) -> "GroupSpec":
        regions = tuple((str(k), tuple(int(i) for i in v)) for k, v in mapping.items())
        return cls(regions=regions, reference_index=reference_index).validate()

    def to_mapping(self) -> dict[str, list[int]]:
        return {name: list(idx) for name, idx in self.regions}


DEFAULT_GROUPS = GroupSpec().validate()


@dataclass(frozen=True)
class GroupedLandmarks:
    groups: tuple[np.ndarray, ...] = field()  # each (S_i, 3)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(g.shape[0] for g in self.groups)


def normalize_points(points: np.ndarray, reference_index: int = NOSE_INDEX) -> np.ndarray:
    """Per-axis ``(p - p_ref) / (max - min)`` over the full set; returns all 68 rows."""
    points = np.asarray(points, dtype=np.float64)
    span = points.max(axis=0) - points.min(axis=0)
    for axis, name in enumerate("xyz"):
        if not span[axis] > 0:
            raise DegenerateInputError(f"landmarks are degenerate along the {name} axis (max == min)")
    return (points - points[reference_index]) / span


def normalize(raw: RawLandmarkSet | np.ndarray, reference_index: int = NOSE_INDEX) -> NormalizedLandmarks:
    points = raw.points if isinstance(raw, RawLandmarkSet) else raw
    full = normalize_points(points, reference_index)
    return NormalizedLandmarks(np.delete(full, reference_index, axis=0), reference_index)


def group(norm: NormalizedLandmarks, spec: GroupSpec = DEFAULT_GROUPS) -> GroupedLandmarks:
    if spec.reference_index != norm.reference_index:
        raise GroupConfigError(
            f"spec reference {spec.reference_index} differs from normalization reference {norm.reference_index}"
        )
    spec.validate()
    rows = [[norm.original_index(i) for i in idx] for _, idx in spec.regions]
    return GroupedLandmarks(tuple(norm.points[r] for r in rows))


def ungroup(grouped: GroupedLandmarks, spec: GroupSpec = DEFAULT_GROUPS) -> dict[int, np.ndarray]:
    """Map each selected 68-point index back to its normalized coordinate."""
    out = {}
    for (_, idx), g in zip(spec.regions, grouped.groups):
        for i, p in zip(idx, g):
            out[i] = p
    return out


def preprocess(raw: RawLandmarkSet | np.ndarray, spec: GroupSpec = DEFAULT_GROUPS) -> GroupedLandmarks:
    return group(normalize(raw, spec.reference_index), spec)


def batch_groups(samples: Sequence[RawLandmarkSet | np.ndarray], spec: GroupSpec = DEFAULT_GROUPS) -> list[np.ndarray]:
    """Preprocess a batch into one (n, S_i, 3) array per region."""
    spec.validate()
    n = len(samples)
    full = np.empty((n, N_LANDMARKS, 3))
    for k, s in enumerate(samples):
        pts = s.points if isinstance(s, RawLandmarkSet) else s
        full[k] = normalize_points(pts, spec.reference_index)
    return [full[:, list(idx), :] for _, idx in spec.regions]
