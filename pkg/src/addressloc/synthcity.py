"""Seeded synthetic grid cities with geography-correlated features.

Horizontal streets run west to east, vertical streets south to north. Each
street optionally overhangs the outermost cross street by ``overhang``
meters. Locations sit strictly inside grid segments, never on an
intersection, so every location lies on exactly one street.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .geodata import Address, Dataset, Sample, UtmCoord, build_vocabulary, tokenize

H_WORDS = [
    "Elm", "Oak", "Pine", "Maple", "Cedar", "Walnut", "Spruce", "Birch",
    "Willow", "Hickory", "Chestnut", "Laurel", "Poplar", "Sycamore", "Magnolia", "Juniper",
]
V_WORDS = [
    "First", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh", "Eighth",
    "Ninth", "Tenth", "Eleventh", "Twelfth", "Thirteenth", "Fourteenth", "Fifteenth", "Sixteenth",
]
SCENE_WORDS = [
    "church", "bridge", "parking", "fountain", "school", "warehouse", "bakery", "mural",
    "stadium", "library", "garden", "tram", "museum", "hospital", "market", "tower",
]
EXTRA_WORDS = ["cars", "trees", "people", "buses", "bicycles", "signs", "shops", "lamps"]
CONNECTIVES = ["between", "and", "near"]


@dataclass(frozen=True)
class CityConfig:
    rows: int = 4
    cols: int = 6
    spacing: float = 100.0
    locations_per_segment: int = 8
    views_per_location: int = 6
    feature_dim: int = 32
    noise_sigma: float = 0.05
    signature_scale: float = 1.0
    seed: int = 0
    overhang: float = 0.0
    hood_rows: int = 2
    hood_cols: int = 2
    origin_east: float = 0.0
    origin_north: float = 0.0
    city_tag: str = "synth"

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("rows and cols must be >= 2")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.locations_per_segment < 1 or self.views_per_location < 1:
            raise ValueError("locations_per_segment and views_per_location must be >= 1")
        if self.overhang < 0 or self.hood_rows < 1 or self.hood_cols < 1:
            raise ValueError("overhang must be >= 0 and hood grid at least 1x1")
        if self.origin_east < 0 or self.origin_north < 0:
            raise ValueError("origin must be non-negative")


@dataclass(frozen=True)
class Street:
    name: str
    polyline: tuple[UtmCoord, ...]

    def points(self) -> list[tuple[float, float]]:
        return [c.as_tuple() for c in self.polyline]


@dataclass(frozen=True)
class Neighborhood:
    name: str
    polygon: tuple[UtmCoord, ...]

    def points(self) -> list[tuple[float, float]]:
        return [c.as_tuple() for c in self.polygon]


@dataclass(frozen=True)
class StreetGraph:
    streets: tuple[Street, ...]
    neighborhoods: tuple[Neighborhood, ...]

    def __post_init__(self):
        names = [s.name for s in self.streets]
        if len(set(names)) != len(names):
            raise ValueError("street names must be unique")
        for s in self.streets:
            if len(s.polyline) < 2:
                raise ValueError(f"street {s.name} needs at least two points")

    def street(self, name: str) -> Street:
        for s in self.streets:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "streets": [
                {"name": s.name, "polyline": [[c.east, c.north] for c in s.polyline]} for s in self.streets
            ],
            "neighborhoods": [
                {"name": n.name, "polygon": [[c.east, c.north] for c in n.polygon]} for n in self.neighborhoods
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "StreetGraph":
        return cls(
            tuple(Street(s["name"], tuple(UtmCoord(*p) for p in s["polyline"])) for s in obj["streets"]),
            tuple(
                Neighborhood(n["name"], tuple(UtmCoord(*p) for p in n["polygon"])) for n in obj["neighborhoods"]
            ),
        )


def save_graph(graph: StreetGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1) + "\n", encoding="utf-8")


def load_graph(path: str | Path) -> StreetGraph:
    return StreetGraph.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _word(words: list[str], i: int) -> str:
    base = words[i % len(words)]
    return base if i < len(words) else f"{base}{i // len(words) + 1}"


def h_street_name(i: int) -> str:
    return f"{_word(H_WORDS, i)} St"


def v_street_name(j: int) -> str:
    return f"{_word(V_WORDS, j)} Ave"


def neighborhood_name(r: int, c: int, cfg: CityConfig) -> str:
    if (cfg.hood_rows, cfg.hood_cols) == (2, 2):
        return ("South", "North")[r] + ("west", "east")[c]
    return f"Ward {chr(ord('A') + r)}{c + 1}"


@dataclass(frozen=True)
class _Frame:
    x0: float  # east of vertical street 0
    y0: float  # north of horizontal street 0
    min_x: float
    max_x: float
    min_y: float
    max_y: float


def _frame(cfg: CityConfig) -> _Frame:
    x0 = cfg.origin_east + cfg.overhang
    y0 = cfg.origin_north + cfg.overhang
    return _Frame(
        x0,
        y0,
        cfg.origin_east,
        x0 + (cfg.cols - 1) * cfg.spacing + cfg.overhang,
        cfg.origin_north,
        y0 + (cfg.rows - 1) * cfg.spacing + cfg.overhang,
    )


def build_graph(cfg: CityConfig) -> StreetGraph:
    f = _frame(cfg)
    streets = []
    for i in range(cfg.rows):
        y = f.y0 + i * cfg.spacing
        streets.append(Street(h_street_name(i), (UtmCoord(f.min_x, y), UtmCoord(f.max_x, y))))
    for j in range(cfg.cols):
        x = f.x0 + j * cfg.spacing
        streets.append(Street(v_street_name(j), (UtmCoord(x, f.min_y), UtmCoord(x, f.max_y))))
    bw = (f.max_x - f.min_x) / cfg.hood_cols
    bh = (f.max_y - f.min_y) / cfg.hood_rows
    hoods = []
    for r in range(cfg.hood_rows):
        for c in range(cfg.hood_cols):
            xa, xb = f.min_x + c * bw, (f.max_x if c == cfg.hood_cols - 1 else f.min_x + (c + 1) * bw)
            ya, yb = f.min_y + r * bh, (f.max_y if r == cfg.hood_rows - 1 else f.min_y + (r + 1) * bh)
            poly = (UtmCoord(xa, ya), UtmCoord(xb, ya), UtmCoord(xb, yb), UtmCoord(xa, yb))
            hoods.append(Neighborhood(neighborhood_name(r, c, cfg), poly))
    return StreetGraph(tuple(streets), tuple(hoods))


def location_layout(cfg: CityConfig) -> list[tuple[str, UtmCoord]]:
    """Deterministic (location_id, coord) list; no randomness involved."""
    f = _frame(cfg)
    L = cfg.locations_per_segment
    out: list[tuple[str, UtmCoord]] = []

    def segments(n_cross: int) -> list[tuple[float, float]]:
        # (start offset, length) along the street measured from the first cross street
        segs = []
        if cfg.overhang > 0:
            segs.append((-cfg.overhang, cfg.overhang))
        segs += [(k * cfg.spacing, cfg.spacing) for k in range(n_cross - 1)]
        if cfg.overhang > 0:
            segs.append(((n_cross - 1) * cfg.spacing, cfg.overhang))
        return segs

    for i in range(cfg.rows):
        y = f.y0 + i * cfg.spacing
        for start, length in segments(cfg.cols):
            for k in range(L):
                out.append((f"L{len(out):05d}", UtmCoord(f.x0 + start + (k + 0.5) / L * length, y)))
    for j in range(cfg.cols):
        x = f.x0 + j * cfg.spacing
        for start, length in segments(cfg.rows):
            for k in range(L):
                out.append((f"L{len(out):05d}", UtmCoord(x, f.y0 + start + (k + 0.5) / L * length)))
    return out


def _grid_position(value: float, origin: float, spacing: float) -> float:
    return (value - origin) / spacing


def _is_integral(g: float, spacing: float) -> bool:
    return abs(g - round(g)) * spacing <= 1e-9


def _block_candidates(value: float, lo: float, hi: float, n: int) -> list[int]:
    width = (hi - lo) / n
    g = (value - lo) / width
    k = round(g)
    if abs(g - k) * width <= 1e-9 and 0 < k < n:
        return [k - 1, k]
    return [min(max(int(math.floor(g)), 0), n - 1)]


def _oracle_neighborhood(coord: UtmCoord, cfg: CityConfig) -> str:
    f = _frame(cfg)
    cols = _block_candidates(coord.east, f.min_x, f.max_x, cfg.hood_cols)
    rows = _block_candidates(coord.north, f.min_y, f.max_y, cfg.hood_rows)
    return min(neighborhood_name(r, c, cfg) for r in rows for c in cols)


def _oracle_cross(g: float, n: int, name) -> tuple[str, ...]:
    # g: position in grid units along the street, 0 at the first cross street
    if g < 0:
        return (name(0),)
    if g > n - 1:
        return (name(n - 1),)
    k = min(int(math.floor(g)), n - 2)
    return (name(k), name(k + 1))


def oracle_address(coord: UtmCoord, cfg: CityConfig) -> Address:
    """Closed-form grid address, assuming no sub-street merging takes place."""
    f = _frame(cfg)
    gx = _grid_position(coord.east, f.x0, cfg.spacing)
    gy = _grid_position(coord.north, f.y0, cfg.spacing)
    on_h = _is_integral(gy, cfg.spacing) and 0 <= round(gy) < cfg.rows
    on_v = _is_integral(gx, cfg.spacing) and 0 <= round(gx) < cfg.cols
    in_x = f.min_x - 1e-9 <= coord.east <= f.max_x + 1e-9
    in_y = f.min_y - 1e-9 <= coord.north <= f.max_y + 1e-9
    if on_h and on_v:
        raise ValueError(f"location {coord} is on an intersection")
    if on_h and in_x:
        main = h_street_name(int(round(gy)))
        cross = _oracle_cross(gx, cfg.cols, v_street_name)
    elif on_v and in_y:
        main = v_street_name(int(round(gx)))
        cross = _oracle_cross(gy, cfg.rows, h_street_name)
    else:
        raise ValueError(f"location {coord} is off the street grid")
    return Address(main, cross, _oracle_neighborhood(coord, cfg))


def oracle_labels(graph: StreetGraph, cfg: CityConfig, locations=None) -> dict[str, Address]:
    """Ground-truth address per location from grid arithmetic alone.

    Valid when every segment holds at least the partition's merge threshold
    of locations, so that no merging happens.
    """
    expected = {h_street_name(i) for i in range(cfg.rows)} | {v_street_name(j) for j in range(cfg.cols)}
    if {s.name for s in graph.streets} != expected:
        raise ValueError("graph was not generated from this config")
    if locations is None:
        locations = location_layout(cfg)
    return {loc: oracle_address(coord, cfg) for loc, coord in locations}


def generate_city(cfg: CityConfig) -> tuple[StreetGraph, Dataset]:
    """Street graph plus an address-free dataset whose features encode the true sub-street."""
    graph = build_graph(cfg)
    layout = location_layout(cfg)
    labels = oracle_labels(graph, cfg, layout)
    rng = np.random.default_rng(cfg.seed)

    classes = sorted({a.text for a in labels.values()})
    sig = rng.standard_normal((len(classes), cfg.feature_dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    sig *= cfg.signature_scale
    scene = rng.integers(0, len(SCENE_WORDS), size=len(classes))
    class_idx = {text: k for k, text in enumerate(classes)}

    samples = []
    for loc, coord in layout:
        k = class_idx[labels[loc].text]
        for v in range(cfg.views_per_location):
            noise = rng.standard_normal(cfg.feature_dim) * cfg.noise_sigma
            extra = EXTRA_WORDS[int(rng.integers(0, len(EXTRA_WORDS)))]
            caption = ("a", "street", "view", "of", SCENE_WORDS[scene[k]], "with", extra)
            samples.append(Sample(loc, f"{loc}_v{v:02d}", coord, sig[k] + noise, caption))

    name_tokens = set(CONNECTIVES)
    for s in graph.streets:
        name_tokens.update(tokenize(s.name))
    for n in graph.neighborhoods:
        name_tokens.update(tokenize(n.name))
    vocab = build_vocabulary(samples, name_tokens)
    return graph, Dataset(tuple(samples), cfg.feature_dim, vocab, cfg.city_tag)


def config_dict(cfg: CityConfig) -> dict:
    return asdict(cfg)
