"""Two-stage retrieval baseline: nearest database feature, then its GPS turned into an address."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .align import EncoderParams, image_embeddings
from .annotate import AnnotateError, GeocodeClient, extract_address, query_reverse_geocode
from .geodata import Address, Dataset, UtmCoord
from .infer_eval import MetricsReport, evaluate

# reference-only numbers from full-scale runs on real imagery
REFERENCE_SSA1 = {
    "pitts_ial": {"retrieval_pipeline": 75.17, "end_to_end": 77.01},
}
REFERENCE_END_TO_END_SSA1 = {"pitts_ial": 80.39, "sf_ial_base": 86.32, "sf_ial_large": 85.92}

Locator = Callable[[str, UtmCoord], tuple[str, ...]]


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalDatabase:
    features: np.ndarray
    gps: tuple[UtmCoord, ...]
    location_ids: tuple[str, ...]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 2 or f.shape[0] != len(self.gps) or len(self.gps) != len(self.location_ids):
            raise BaselineError("features, gps and location_ids must have matching row counts")
        if f.shape[0] == 0:
            raise BaselineError("retrieval database is empty")
        if not np.all(np.isfinite(f)):
            raise BaselineError("database features must be finite")
        object.__setattr__(self, "features", f)

    def __len__(self):
        return len(self.location_ids)


def build_database(ds: Dataset, location_ids: Sequence[str], params: EncoderParams | None = None) -> RetrievalDatabase:
    """One row per image of the given locations; raw features unless ``params`` selects embedding space."""
    samples = ds.select(location_ids)
    if params is None:
        feats = np.stack([s.feature for s in samples]) if samples else np.zeros((0, ds.feature_dim))
    else:
        feats = image_embeddings(samples, params)
    return RetrievalDatabase(feats, tuple(s.coord for s in samples), tuple(s.location_id for s in samples))


def retrieve_nearest(query: np.ndarray, db: RetrievalDatabase) -> tuple[int, float]:
    """Row index and Euclidean distance of the closest database row; ties go to the smaller index."""
    q = np.asarray(query, dtype=float)
    if q.shape != (db.features.shape[1],):
        raise BaselineError(f"query dim {q.shape} does not match database dim {db.features.shape[1]}")
    d = np.sqrt(((db.features - q) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return i, float(d[i])


def pipeline_predict(
    query: np.ndarray,
    db: RetrievalDatabase,
    table: Mapping[str, Address] | None = None,
    client: GeocodeClient | None = None,
    locator: Locator | None = None,
) -> Address:
    """Retrieve, then geocode the retrieved GPS.

    With a client, the fixture results go through the same filtering and
    voting as annotation; ``locator`` then supplies the cross streets.
    Without one, the retrieved location's address comes from ``table``.
    """
    i, _ = retrieve_nearest(query, db)
    loc, coord = db.location_ids[i], db.gps[i]
    if client is not None:
        results = query_reverse_geocode(client, coord)
        if results:
            try:
                a = extract_address(results)
            except AnnotateError:
                a = None
            if a is not None:
                if locator is not None:
                    a = Address(a.main_street, locator(a.main_street, coord), a.neighborhood)
                return a
    if table is not None and loc in table:
        return table[loc]
    raise BaselineError(f"no geocode result and no table entry for location {loc} at {coord}")


def evaluate_pipeline(
    ds: Dataset,
    query_ids: Sequence[str],
    db: RetrievalDatabase,
    table: Mapping[str, Address] | None = None,
    client: GeocodeClient | None = None,
    locator: Locator | None = None,
    params: EncoderParams | None = None,
) -> MetricsReport:
    samples = ds.select(query_ids)
    feats = image_embeddings(samples, params) if params is not None else [s.feature for s in samples]
    preds = [[pipeline_predict(f, db, table, client, locator)] for f in feats]
    return evaluate(preds, [s.address for s in samples], [s.image_id for s in samples])


@dataclass
class Comparison:
    end_to_end: dict[str, float]
    pipeline: dict[str, float]
    delta: dict[str, float]
    n_queries: int

    def to_json(self) -> dict:
        return {
            "rows": {"end_to_end": self.end_to_end, "pipeline": self.pipeline},
            "delta_end_to_end_minus_pipeline": self.delta,
            "n_queries": self.n_queries,
            "reference_ssa1_percent": {
                "retrieval_vs_end_to_end": REFERENCE_SSA1,
                "end_to_end": REFERENCE_END_TO_END_SSA1,
                "note": "full-scale values on real imagery; not reproduced here",
            },
        }

    def table(self) -> str:
        keys = list(self.end_to_end)
        lines = ["method      " + " ".join(f"{k:>7}" for k in keys)]
        for name, row in (("end_to_end", self.end_to_end), ("pipeline", self.pipeline), ("delta", self.delta)):
            lines.append(f"{name:<11} " + " ".join(f"{row[k]:>7.4f}" for k in keys))
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def compare(end_to_end: MetricsReport, pipeline: MetricsReport) -> Comparison:
    if end_to_end.query_ids != pipeline.query_ids or end_to_end.n_queries != pipeline.n_queries:
        raise BaselineError("reports were computed on different query splits")
    a, b = end_to_end.rates(), pipeline.rates()
    return Comparison(a, b, {k: a[k] - b[k] for k in a}, end_to_end.n_queries)


def address_table(ds: Dataset) -> dict[str, Address]:
    table = {}
    for loc, (_, a) in ds.locations().items():
        if a is None:
            raise BaselineError(f"location {loc} has no address")
        table[loc] = a
    return table

