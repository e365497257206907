"""Semantic address partition: split streets at intersections into named sub-streets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from . import geometry
from .geodata import Address, UtmCoord
from .synthcity import Street, StreetGraph

DEFAULT_THRESHOLD = 50.0
DEFAULT_MIN_LOCATIONS = 5
_END_TOL = 1e-6


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class IntersectionPoint:
    coord: UtmCoord
    along: float
    other_street: str


@dataclass(frozen=True)
class SubStreet:
    main_street: str
    span: tuple[float, float]
    start_cross: str | None = None
    end_cross: str | None = None
    location_ids: tuple[str, ...] = ()

    @property
    def bounding(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(c for c in (self.start_cross, self.end_cross) if c is not None))


def find_intersections(graph: StreetGraph) -> dict[str, list[IntersectionPoint]]:
    out: dict[str, list[IntersectionPoint]] = {}
    for main in graph.streets:
        pts = main.points()
        found: list[IntersectionPoint] = []
        for other in graph.streets:
            if other.name == main.name:
                continue
            opts = other.points()
            offset = 0.0
            for a, b in zip(pts[:-1], pts[1:]):
                seg_len = math.dist(a, b)
                for c, d in zip(opts[:-1], opts[1:]):
                    hit = geometry.segment_intersection(a, b, c, d)
                    if hit is None:
                        continue
                    (x, y), t, _ = hit
                    along = offset + t * seg_len
                    # a crossing at a shared polyline vertex is seen twice
                    if any(p.other_street == other.name and abs(p.along - along) <= _END_TOL for p in found):
                        continue
                    found.append(IntersectionPoint(UtmCoord(x, y), along, other.name))
                offset += seg_len
        found.sort(key=lambda p: (p.along, p.other_street))
        out[main.name] = found
    return out


def prune_close_intersections(points: Sequence[IntersectionPoint], threshold: float) -> list[IntersectionPoint]:
    if threshold < 0:
        raise PartitionError(f"threshold must be non-negative, got {threshold}")
    kept: list[IntersectionPoint] = []
    for p in points:
        if not kept or p.along - kept[-1].along >= threshold:
            kept.append(p)
    return kept


def split_street(street: Street, kept_points: Sequence[IntersectionPoint]) -> list[SubStreet]:
    """Cut a street at its interior kept points.

    A kept point sitting on a street end does not cut; it names the terminal
    sub-street that starts or ends there.
    """
    length = geometry.polyline_length(street.points())
    start_cross = end_cross = None
    interior: list[IntersectionPoint] = []
    for p in kept_points:
        if p.along <= _END_TOL:
            start_cross = start_cross or p.other_street
        elif p.along >= length - _END_TOL:
            end_cross = end_cross or p.other_street
        else:
            interior.append(p)
    cuts = [(0.0, start_cross)] + [(p.along, p.other_street) for p in interior] + [(length, end_cross)]
    return [
        SubStreet(street.name, (a, b), ca, cb)
        for (a, ca), (b, cb) in zip(cuts[:-1], cuts[1:])
    ]


def merge_short_substreets(subs: Sequence[SubStreet], min_locations: int) -> list[SubStreet]:
    """Fold sub-streets holding fewer than ``min_locations`` into a neighbor, leftmost first.

    The receiving neighbor is the one with more locations; ties go to the
    earlier span. A street left with a single under-populated sub-street
    keeps it unbounded, labeled by the street name alone.
    """
    subs = list(subs)
    while len(subs) > 1:
        short = [i for i, s in enumerate(subs) if len(s.location_ids) < min_locations]
        if not short:
            break
        i = short[0]
        left = subs[i - 1] if i > 0 else None
        right = subs[i + 1] if i + 1 < len(subs) else None
        if right is None or (left is not None and len(left.location_ids) >= len(right.location_ids)):
            lo, hi = i - 1, i
        else:
            lo, hi = i, i + 1
        a, b = subs[lo], subs[hi]
        merged = SubStreet(a.main_street, (a.span[0], b.span[1]), a.start_cross, b.end_cross,
                           a.location_ids + b.location_ids)
        subs[lo : hi + 1] = [merged]
    if len(subs) == 1 and len(subs[0].location_ids) < min_locations:
        subs[0] = replace(subs[0], start_cross=None, end_cross=None)
    return subs


def assign_streets(graph: StreetGraph, locations: Iterable[tuple[str, UtmCoord]]) -> dict[str, tuple[str, float]]:
    """Nearest street per location by perpendicular distance; ties go to the smaller name."""
    streets = sorted(graph.streets, key=lambda s: s.name)
    lines = [(s.name, s.points()) for s in streets]
    out = {}
    for loc, coord in locations:
        best = None
        for name, pts in lines:
            d, along = geometry.project_onto_polyline(coord.as_tuple(), pts)
            if best is None or d < best[0] - 1e-9:
                best = (d, name, along)
        out[loc] = (best[1], best[2])
    return out


def neighborhood_of(graph: StreetGraph, coord: UtmCoord) -> str | None:
    """Containing neighborhood (even-odd); boundary points go to the smallest matching name."""
    pt = coord.as_tuple()
    matches = [n.name for n in graph.neighborhoods if geometry.in_polygon(pt, n.points())]
    return min(matches) if matches else None


@dataclass
class PartitionResult:
    labels: dict[str, Address]
    substreets: dict[str, list[SubStreet]] = field(default_factory=dict)

    def locate(self, graph: StreetGraph, street: str, coord: UtmCoord) -> tuple[str, ...]:
        """Bounding cross streets of the sub-street of ``street`` nearest to ``coord``."""
        subs = self.substreets.get(street)
        if not subs:
            raise PartitionError(f"unknown street {street!r}")
        _, along = geometry.project_onto_polyline(coord.as_tuple(), graph.street(street).points())
        return subs[_span_index(subs, along)].bounding

    def report(self) -> dict:
        return {
            **level_counts(self.labels.values()),
            "locations": len(self.labels),
            "substreets_per_street": {k: len(v) for k, v in sorted(self.substreets.items())},
        }


def _span_index(subs: Sequence[SubStreet], along: float) -> int:
    for k, s in enumerate(subs):
        if along < s.span[1]:
            return k
    return len(subs) - 1


def level_counts(addresses: Iterable[Address]) -> dict[str, int]:
    addresses = list(addresses)
    return {
        "neighborhood": len({a.neighborhood for a in addresses}),
        "street": len({a.main_street for a in addresses}),
        "sub_street": len(set(addresses)),
    }


def run_partition(
    graph: StreetGraph,
    locations: Iterable[tuple[str, UtmCoord]] | Mapping[str, UtmCoord],
    threshold: float = DEFAULT_THRESHOLD,
    min_locations: int = DEFAULT_MIN_LOCATIONS,
) -> PartitionResult:
    if isinstance(locations, Mapping):
        locations = locations.items()
    locations = sorted(locations)
    coords = dict(locations)

    hoods = {}
    outside = []
    for loc, coord in locations:
        hood = neighborhood_of(graph, coord)
        if hood is None:
            outside.append(loc)
        hoods[loc] = hood
    if outside:
        raise PartitionError(f"locations outside every neighborhood: {outside}")

    assigned = assign_streets(graph, locations)
    intersections = find_intersections(graph)
    result = PartitionResult(labels={})
    for street in sorted(graph.streets, key=lambda s: s.name):
        kept = prune_close_intersections(intersections[street.name], threshold)
        subs = split_street(street, kept)
        members: list[list[str]] = [[] for _ in subs]
        for loc, (name, along) in assigned.items():
            if name != street.name:
                continue
            members[_span_index(subs, along)].append(loc)
        subs = [replace(s, location_ids=tuple(m)) for s, m in zip(subs, members)]
        subs = merge_short_substreets(subs, min_locations)
        result.substreets[street.name] = subs
        for s in subs:
            for loc in s.location_ids:
                result.labels[loc] = Address(street.name, s.bounding, hoods[loc])
    result.labels = {loc: result.labels[loc] for loc in coords}
    return result


def partition_city(
    graph: StreetGraph,
    locations,
    threshold: float = DEFAULT_THRESHOLD,
    min_locations: int = DEFAULT_MIN_LOCATIONS,
) -> dict[str, Address]:
    return run_partition(graph, locations, threshold, min_locations).labels
