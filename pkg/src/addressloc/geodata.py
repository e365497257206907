"""Locations, addresses, datasets, splits and their on-disk formats."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

_PUNCT = ",.;:()\"'"
_NAMESPACE_SEP = ":"


class GeoDataError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class UtmCoord:
    east: float
    north: float

    def __post_init__(self):
        if not (math.isfinite(self.east) and math.isfinite(self.north)):
            raise GeoDataError(f"non-finite coordinate ({self.east}, {self.north})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.east, self.north)


@dataclass(frozen=True)
class Address:
    """Main street, up to two bounding cross streets, neighborhood.

    Cross streets behave as a set: they are stored sorted, so two addresses
    naming the same cross streets in a different order compare equal.
    """

    main_street: str
    cross_streets: tuple[str, ...] = ()
    neighborhood: str = ""

    def __post_init__(self):
        if not self.main_street or not self.neighborhood:
            raise GeoDataError(f"address needs a main street and neighborhood: {self!r}")
        cross = tuple(sorted(set(self.cross_streets)))
        if len(cross) > 2:
            raise GeoDataError(f"at most two cross streets allowed, got {cross}")
        object.__setattr__(self, "cross_streets", cross)

    @property
    def text(self) -> str:
        return address_to_text(self)

    def same_street(self, other: "Address") -> bool:
        return self.main_street == other.main_street and self.neighborhood == other.neighborhood

    def to_json(self) -> dict:
        return {
            "main_street": self.main_street,
            "cross_streets": list(self.cross_streets),
            "neighborhood": self.neighborhood,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Address":
        return cls(obj["main_street"], tuple(obj["cross_streets"]), obj["neighborhood"])


def address_to_text(a: Address) -> str:
    if len(a.cross_streets) == 2:
        street = f"{a.main_street} between {a.cross_streets[0]} and {a.cross_streets[1]}"
    elif len(a.cross_streets) == 1:
        street = f"{a.main_street} near {a.cross_streets[0]}"
    else:
        street = a.main_street
    return f"{street}, {a.neighborhood}"


_TEXT_RE = re.compile(
    r"^(?P<main>.+?)(?: between (?P<c1>.+?) and (?P<c2>.+?)| near (?P<c>.+?))?, (?P<hood>[^,]+)$"
)


def parse_address_text(text: str) -> Address:
    """Inverse of address_to_text for names free of ' between ', ' near ', ' and ' and commas."""
    m = _TEXT_RE.match(text.strip())
    if m is None:
        raise GeoDataError(f"cannot parse address text {text!r}")
    if m.group("c1") is not None:
        cross = (m.group("c1"), m.group("c2"))
    elif m.group("c") is not None:
        cross = (m.group("c"),)
    else:
        cross = ()
    return Address(m.group("main"), cross, m.group("hood"))


def tokenize(text: str) -> list[str]:
    """Lower-cased whitespace split with surrounding punctuation stripped."""
    out = []
    for word in text.lower().split():
        word = word.strip(_PUNCT)
        if word:
            out.append(word)
    return out


def address_tokens(a: Address) -> list[str]:
    return tokenize(address_to_text(a))


@dataclass(frozen=True, eq=False)
class Sample:
    location_id: str
    image_id: str
    coord: UtmCoord
    feature: np.ndarray
    caption_tokens: tuple[str, ...] = ()
    address: Address | None = None

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.float64)
        if feat.ndim != 1:
            raise GeoDataError(f"feature of {self.image_id} must be a vector")
        feat.flags.writeable = False
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "caption_tokens", tuple(self.caption_tokens))

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.location_id == other.location_id
            and self.image_id == other.image_id
            and self.coord == other.coord
            and self.caption_tokens == other.caption_tokens
            and self.address == other.address
            and self.feature.shape == other.feature.shape
            and bool(np.array_equal(self.feature, other.feature))
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "location_id": self.location_id,
            "image_id": self.image_id,
            "coord": {"east": self.coord.east, "north": self.coord.north},
            "feature": [float(x) for x in self.feature],
            "caption_tokens": list(self.caption_tokens),
            "address": None if self.address is None else self.address.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Sample":
        addr = obj.get("address")
        return cls(
            location_id=obj["location_id"],
            image_id=obj["image_id"],
            coord=UtmCoord(obj["coord"]["east"], obj["coord"]["north"]),
            feature=np.asarray(obj["feature"], dtype=np.float64),
            caption_tokens=tuple(obj["caption_tokens"]),
            address=None if addr is None else Address.from_json(addr),
        )


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    feature_dim: int
    vocabulary: tuple[str, ...]
    city_tag: str = "city"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        self.validate()

    def validate(self) -> None:
        seen = set()
        vocab = set(self.vocabulary)
        if len(vocab) != len(self.vocabulary):
            raise GeoDataError("vocabulary has duplicate entries")
        locs: dict[str, tuple[UtmCoord, Address | None]] = {}
        for s in self.samples:
            if s.image_id in seen:
                raise GeoDataError(f"duplicate image id {s.image_id}")
            seen.add(s.image_id)
            if s.feature.shape != (self.feature_dim,):
                raise GeoDataError(
                    f"sample {s.image_id} has feature dim {s.feature.shape[0]}, expected {self.feature_dim}"
                )
            prev = locs.setdefault(s.location_id, (s.coord, s.address))
            if prev != (s.coord, s.address):
                raise GeoDataError(f"location {s.location_id} has inconsistent coord/address")
            missing = [t for t in s.caption_tokens if t not in vocab]
            if s.address is not None:
                missing += [t for t in address_tokens(s.address) if t not in vocab]
            if missing:
                raise GeoDataError(f"tokens missing from vocabulary: {sorted(set(missing))}")

    @property
    def location_ids(self) -> list[str]:
        return sorted({s.location_id for s in self.samples})

    def locations(self) -> dict[str, tuple[UtmCoord, Address | None]]:
        out: dict[str, tuple[UtmCoord, Address | None]] = {}
        for s in self.samples:
            out.setdefault(s.location_id, (s.coord, s.address))
        return dict(sorted(out.items()))

    def by_location(self) -> dict[str, list[Sample]]:
        out: dict[str, list[Sample]] = {}
        for s in self.samples:
            out.setdefault(s.location_id, []).append(s)
        return out

    def select(self, location_ids: Iterable[str]) -> list[Sample]:
        keep = set(location_ids)
        return [s for s in self.samples if s.location_id in keep]

    def with_addresses(self, labels: Mapping[str, Address]) -> "Dataset":
        """Attach addresses per location and extend the vocabulary to cover them."""
        missing = {s.location_id for s in self.samples} - set(labels)
        if missing:
            raise GeoDataError(f"no address for locations {sorted(missing)[:5]}")
        samples = [replace(s, address=labels[s.location_id]) for s in self.samples]
        vocab = build_vocabulary(samples, self.vocabulary)
        return Dataset(tuple(samples), self.feature_dim, vocab, self.city_tag)


def build_vocabulary(samples: Iterable[Sample], extra: Iterable[str] = ()) -> tuple[str, ...]:
    tokens = set(extra)
    for s in samples:
        tokens.update(s.caption_tokens)
        if s.address is not None:
            tokens.update(address_tokens(s.address))
    return tuple(sorted(tokens))


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[str, ...]
    database: tuple[str, ...]
    query: tuple[str, ...]
    dropped_queries: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "train": list(self.train),
            "database": list(self.database),
            "query": list(self.query),
            "dropped_queries": list(self.dropped_queries),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitAssignment":
        return cls(
            tuple(obj["train"]),
            tuple(obj["database"]),
            tuple(obj["query"]),
            tuple(obj.get("dropped_queries", ())),
        )


def split_dataset(ds: Dataset, seed: int) -> SplitAssignment:
    """7:2:1 location-level split; queries whose address is absent from training are dropped."""
    locs = ds.locations()
    n = len(locs)
    if n == 0:
        raise GeoDataError("cannot split an empty dataset")
    if n < 10:
        raise GeoDataError(f"need at least 10 locations to split, got {n}")
    ids = list(locs)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n * 7 // 10
    n_db = n * 2 // 10
    train = shuffled[:n_train]
    database = shuffled[n_train : n_train + n_db]
    query_all = shuffled[n_train + n_db :]

    covered = {locs[i][1] for i in train}
    query = [q for q in query_all if locs[q][1] in covered]
    dropped = [q for q in query_all if locs[q][1] not in covered]
    if dropped:
        logger.info("split: dropped %d of %d queries with addresses absent from training", len(dropped), len(query_all))
    return SplitAssignment(tuple(train), tuple(database), tuple(query), tuple(dropped))


def subsample_views(ds: Dataset, per_location: int, seed: int) -> Dataset:
    if per_location < 1:
        raise GeoDataError("per_location must be >= 1")
    rng = np.random.default_rng(seed)
    groups = ds.by_location()
    keep: set[str] = set()
    for loc in sorted(groups):
        views = groups[loc]
        if len(views) <= per_location:
            keep.update(s.image_id for s in views)
            continue
        chosen = rng.choice(len(views), size=per_location, replace=False)
        keep.update(views[i].image_id for i in chosen)
    samples = tuple(s for s in ds.samples if s.image_id in keep)
    return Dataset(samples, ds.feature_dim, ds.vocabulary, ds.city_tag)


def _namespace(s: Sample, tag: str) -> Sample:
    if _NAMESPACE_SEP in s.location_id:
        return s
    addr = s.address
    if addr is not None:
        addr = Address(addr.main_street, addr.cross_streets, f"{addr.neighborhood} {tag}")
    return replace(
        s,
        location_id=f"{tag}{_NAMESPACE_SEP}{s.location_id}",
        image_id=f"{tag}{_NAMESPACE_SEP}{s.image_id}",
        address=addr,
    )


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Union of two cities; ids become ``<city_tag>:<id>`` and neighborhoods get the tag appended."""
    if a.feature_dim != b.feature_dim:
        raise GeoDataError(f"feature_dim mismatch: {a.feature_dim} vs {b.feature_dim}")
    samples = [_namespace(s, a.city_tag) for s in a.samples]
    samples += [_namespace(s, b.city_tag) for s in b.samples]
    tags = sorted(set(a.city_tag.split("+")) | set(b.city_tag.split("+")))
    if len(tags) < len(a.city_tag.split("+")) + len(b.city_tag.split("+")):
        raise GeoDataError(f"city tags overlap: {a.city_tag!r} and {b.city_tag!r}")
    vocab = build_vocabulary(samples, set(a.vocabulary) | set(b.vocabulary))
    return Dataset(tuple(samples), a.feature_dim, vocab, "+".join(tags))


def filter_city(ds: Dataset, city_tag: str) -> list[str]:
    """Location ids of a merged dataset that came from ``city_tag``."""
    prefix = f"{city_tag}{_NAMESPACE_SEP}"
    return [loc for loc in ds.location_ids if loc.startswith(prefix)]


def restrict_split(split: SplitAssignment, location_ids: Iterable[str]) -> SplitAssignment:
    keep = set(location_ids)
    return SplitAssignment(
        tuple(x for x in split.train if x in keep),
        tuple(x for x in split.database if x in keep),
        tuple(x for x in split.query if x in keep),
        tuple(x for x in split.dropped_queries if x in keep),
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = {"feature_dim": ds.feature_dim, "vocab": list(ds.vocabulary), "city_tag": ds.city_tag}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for s in ds.samples:
            f.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise GeoDataError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    samples = tuple(Sample.from_json(json.loads(line)) for line in lines[1:])
    return Dataset(samples, int(header["feature_dim"]), tuple(header["vocab"]), header.get("city_tag", "city"))


def save_split(split: SplitAssignment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=1) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    return SplitAssignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

