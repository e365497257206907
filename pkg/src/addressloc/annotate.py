"""Reverse-geocoding annotation: fixture-backed client, ROOFTOP filtering with voting, nearest-neighbor fill."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .geodata import Address, GeoDataError, UtmCoord, parse_address_text
from .partition import PartitionResult, assign_streets, neighborhood_of
from .synthcity import StreetGraph

logger = logging.getLogger(__name__)


class AnnotateError(ValueError):
    pass


class LocationType(str, Enum):
    ROOFTOP = "ROOFTOP"
    RANGE_INTERPOLATED = "RANGE_INTERPOLATED"
    GEOMETRIC_CENTER = "GEOMETRIC_CENTER"
    APPROXIMATE = "APPROXIMATE"


@dataclass(frozen=True)
class GeocodeResult:
    formatted_address: str
    location_type: LocationType

    def __post_init__(self):
        if not self.formatted_address:
            raise AnnotateError("formatted_address must be non-empty")
        object.__setattr__(self, "location_type", LocationType(self.location_type))

    def to_json(self) -> dict:
        return {"formatted_address": self.formatted_address, "location_type": self.location_type.value}

    @classmethod
    def from_json(cls, obj: Mapping) -> "GeocodeResult":
        return cls(obj["formatted_address"], LocationType(obj["location_type"]))


def coord_key(coord: UtmCoord) -> str:
    """Fixture key: easting and northing rounded to 0.1 m."""
    return f"{coord.east:.1f},{coord.north:.1f}"


class GeocodeClient(Protocol):
    def reverse(self, coord: UtmCoord) -> list[GeocodeResult]: ...


@dataclass(frozen=True)
class GeocodeFixture:
    entries: Mapping[str, tuple[GeocodeResult, ...]]

    def reverse(self, coord: UtmCoord) -> list[GeocodeResult]:
        return list(self.entries.get(coord_key(coord), ()))

    def to_json(self) -> dict:
        return {k: [r.to_json() for r in v] for k, v in sorted(self.entries.items())}

    @classmethod
    def from_json(cls, obj: Mapping) -> "GeocodeFixture":
        return cls({k: tuple(GeocodeResult.from_json(r) for r in v) for k, v in obj.items()})


def load_fixture(path: str | Path) -> GeocodeFixture:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise AnnotateError(f"cannot read geocode fixture {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise AnnotateError(f"{path}: fixture must map coordinate keys to result lists")
    return GeocodeFixture.from_json(obj)


def save_fixture(fixture: GeocodeFixture, path: str | Path) -> None:
    Path(path).write_text(json.dumps(fixture.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class LiveGeocoder:
    """Placeholder for an HTTP geocoding service; no request code ships here."""

    endpoint: str

    def reverse(self, coord: UtmCoord) -> list[GeocodeResult]:
        raise AnnotateError(f"unsupported backend: live geocoding ({self.endpoint}) is not implemented")


def query_reverse_geocode(client: GeocodeClient, coord: UtmCoord) -> list[GeocodeResult]:
    return client.reverse(coord)


def parse_formatted(text: str) -> tuple[str, str] | None:
    """(street, neighborhood) from "<street>, <neighborhood>, <city>, <state>"; None if too coarse."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) < 4 or not parts[0] or not parts[1]:
        return None
    return parts[0], parts[1]


def extract_address(results: Sequence[GeocodeResult]) -> Address:
    """Most frequent (street, neighborhood) among non-ROOFTOP results; ties go to the earliest."""
    if not results:
        raise AnnotateError("no geocode results")
    parsed = [
        p for r in results
        if r.location_type is not LocationType.ROOFTOP and (p := parse_formatted(r.formatted_address))
    ]
    if not parsed:
        raise AnnotateError("no street-level result")
    counts = Counter(parsed)
    first = {}
    for i, p in enumerate(parsed):
        first.setdefault(p, i)
    street, hood = max(counts, key=lambda p: (counts[p], -first[p]))
    return Address(street, (), hood)


def interpolate_addresses(
    annotated: Mapping[str, Address], all_locations: Mapping[str, UtmCoord]
) -> dict[str, Address]:
    if not annotated:
        raise AnnotateError("interpolation needs at least one annotated location")
    unknown = set(annotated) - set(all_locations)
    if unknown:
        raise AnnotateError(f"annotated locations without coordinates: {sorted(unknown)[:5]}")
    sources = sorted(annotated)
    src = np.array([all_locations[s].as_tuple() for s in sources])
    out = {}
    for loc in sorted(all_locations):
        if loc in annotated:
            out[loc] = annotated[loc]
            continue
        d = np.hypot(*(src - np.array(all_locations[loc].as_tuple())).T)
        # argmin takes the first minimum, i.e. the smallest location id
        out[loc] = annotated[sources[int(np.argmin(d))]]
    return out


def load_corrections(path: str | Path) -> dict[str, Address]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        loc, sep, text = line.partition("\t")
        if not sep:
            raise AnnotateError(f"{path}:{n}: expected '<location_id>\\t<address>'")
        try:
            out[loc.strip()] = parse_address_text(text.strip())
        except GeoDataError as exc:
            raise AnnotateError(f"{path}:{n}: {exc}") from exc
    return out


@dataclass
class AnnotationRun:
    labels: dict[str, Address]
    queried: tuple[str, ...]
    misses: tuple[str, ...]
    corrected: tuple[str, ...]

    def summary(self) -> dict:
        return {
            "locations": len(self.labels),
            "queried": len(self.queried),
            "misses": len(self.misses),
            "interpolated": len(self.labels) - len(self.queried) + len(self.misses),
            "corrected": len(self.corrected),
        }


def annotate_locations(
    client: GeocodeClient,
    locations: Mapping[str, UtmCoord],
    sample_fraction: float = 1.0,
    seed: int = 0,
    corrections: Mapping[str, Address] | None = None,
) -> AnnotationRun:
    """Geocode a seeded uniform subset, fill the rest by nearest neighbor, then apply corrections."""
    if not 0 < sample_fraction <= 1:
        raise AnnotateError("sample_fraction must be in (0, 1]")
    ids = sorted(locations)
    if not ids:
        raise AnnotateError("no locations to annotate")
    n = max(1, round(sample_fraction * len(ids)))
    picked = np.random.default_rng(seed).choice(len(ids), size=n, replace=False)
    queried = sorted(ids[i] for i in picked)
    found, misses = {}, []
    for loc in queried:
        results = query_reverse_geocode(client, locations[loc])
        try:
            found[loc] = extract_address(results)
        except AnnotateError:
            misses.append(loc)
    if misses:
        logger.info("annotate: %d queried locations had no street-level result", len(misses))
    labels = interpolate_addresses(found, locations)
    corrected = []
    for loc, addr in sorted((corrections or {}).items()):
        if loc not in labels:
            raise AnnotateError(f"correction for unknown location {loc}")
        labels[loc] = addr
        corrected.append(loc)
    return AnnotationRun(labels, tuple(queried), tuple(misses), tuple(corrected))


def refine_with_partition(
    labels: Mapping[str, Address],
    locations: Mapping[str, UtmCoord],
    graph: StreetGraph,
    partition: PartitionResult,
) -> dict[str, Address]:
    """Fill cross streets of street-level labels from the partition of their main street."""
    out = {}
    for loc, a in sorted(labels.items()):
        bounding = partition.locate(graph, a.main_street, locations[loc])
        out[loc] = Address(a.main_street, bounding, a.neighborhood)
    return out


def synthetic_fixture(
    graph: StreetGraph,
    locations: Iterable[tuple[str, UtmCoord]],
    city: str = "Synth City",
    state: str = "SC",
) -> GeocodeFixture:
    """Fixture shaped like a real geocoder reply: a building hit, street-level hits, coarser areas."""
    locations = sorted(locations)
    streets = assign_streets(graph, locations)
    entries = {}
    for loc, coord in locations:
        street, along = streets[loc]
        hood = neighborhood_of(graph, coord)
        if hood is None:
            continue
        house = 2 * int(math.floor(along)) + 1
        entries[coord_key(coord)] = (
            GeocodeResult(f"{house} {street}, {hood}, {city}, {state}", LocationType.ROOFTOP),
            GeocodeResult(f"{street}, {hood}, {city}, {state}", LocationType.RANGE_INTERPOLATED),
            GeocodeResult(f"{street}, {hood}, {city}, {state}", LocationType.GEOMETRIC_CENTER),
            GeocodeResult(f"{hood}, {city}, {state}", LocationType.APPROXIMATE),
            GeocodeResult(f"{city}, {state}", LocationType.APPROXIMATE),
        )
    return GeocodeFixture(entries)
