"""Candidate-set inference, SA/SSA metrics, prior-constrained search and similarity maps."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Mapping, Sequence

import numpy as np

from .align import EncoderParams, Vocab, address_embeddings, encode_image, image_embeddings
from .geodata import Address, Dataset, Sample, UtmCoord, address_to_text


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateIndex:
    addresses: tuple[Address, ...]
    embeddings: np.ndarray

    def __len__(self):
        return len(self.addresses)


@dataclass(frozen=True)
class Prediction:
    ranked: tuple[tuple[Address, float], ...]

    @property
    def addresses(self) -> list[Address]:
        return [a for a, _ in self.ranked]

    @property
    def top(self) -> Address:
        return self.ranked[0][0]


def build_candidate_index(addresses: Iterable[Address], params: EncoderParams, vocab) -> CandidateIndex:
    unique = sorted(set(addresses), key=address_to_text)
    if not unique:
        raise EvalError("candidate index needs at least one address")
    return CandidateIndex(tuple(unique), address_embeddings(unique, params, vocab))


def _rank(sims: np.ndarray, rows: np.ndarray, index: CandidateIndex, k: int) -> Prediction:
    if k < 1:
        raise EvalError("k must be >= 1")
    if k > len(rows):
        raise EvalError(f"k={k} exceeds the {len(rows)} available candidates")
    # stable sort keeps candidate-index order among equal scores
    order = np.argsort(-sims[rows], kind="stable")[:k]
    return Prediction(tuple((index.addresses[rows[i]], float(sims[rows[i]])) for i in order))


def predict_topk(feature: np.ndarray, index: CandidateIndex, params: EncoderParams, k: int = 5) -> Prediction:
    v = encode_image(feature, params)
    sims = index.embeddings @ v
    return _rank(sims, np.arange(len(index)), index, k)


def constrained_predict(
    feature: np.ndarray,
    index: CandidateIndex,
    params: EncoderParams,
    k: int = 5,
    neighborhood: str | None = None,
    streets: Collection[str] | None = None,
) -> Prediction:
    """Rank only candidates inside the prior: a neighborhood name and/or a set of main streets."""
    keep = np.array([
        (neighborhood is None or a.neighborhood == neighborhood) and (streets is None or a.main_street in streets)
        for a in index.addresses
    ])
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise EvalError("prior matches no candidate address")
    v = encode_image(feature, params)
    sims = index.embeddings @ v
    return _rank(sims, rows, index, min(k, rows.size))


@dataclass
class MetricsReport:
    ssa1: float
    ssa5: float
    sa1: float
    sa5: float
    n_queries: int
    query_ids: tuple[str, ...] = ()
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)

    def rates(self) -> dict[str, float]:
        return {"ssa1": self.ssa1, "ssa5": self.ssa5, "sa1": self.sa1, "sa5": self.sa5}

    def to_json(self) -> dict:
        return {**self.rates(), "n_queries": self.n_queries, "query_ids": list(self.query_ids),
                "confusion": self.confusion}

    @classmethod
    def from_json(cls, obj: Mapping) -> "MetricsReport":
        return cls(obj["ssa1"], obj["ssa5"], obj["sa1"], obj["sa5"], obj["n_queries"],
                   tuple(obj.get("query_ids", ())), obj.get("confusion", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(
    predictions: Sequence[Sequence[Address]],
    ground_truth: Sequence[Address],
    query_ids: Sequence[str] = (),
) -> MetricsReport:
    """SA-k / SSA-k over ranked address lists.

    A ranked list shorter than k (a candidate pool smaller than k) is scored
    on all of its entries.
    """
    if len(predictions) != len(ground_truth):
        raise EvalError("one prediction list per ground truth required")
    if not ground_truth:
        raise EvalError("empty query set")
    hits = Counter()
    confusion: dict[str, Counter] = defaultdict(Counter)
    for ranked, gt in zip(predictions, ground_truth):
        if not ranked:
            raise EvalError("empty prediction list")
        for k in (1, 5):
            top = ranked[:k]
            hits[f"ssa{k}"] += any(p == gt for p in top)
            hits[f"sa{k}"] += any(p.same_street(gt) for p in top)
        confusion[gt.text][ranked[0].text] += 1
    n = len(ground_truth)
    return MetricsReport(
        ssa1=hits["ssa1"] / n,
        ssa5=hits["ssa5"] / n,
        sa1=hits["sa1"] / n,
        sa5=hits["sa5"] / n,
        n_queries=n,
        query_ids=tuple(query_ids),
        confusion={gt: dict(sorted(c.items())) for gt, c in sorted(confusion.items())},
    )


def predict_samples(samples: Sequence[Sample], index: CandidateIndex, params: EncoderParams, k: int = 5) -> list[Prediction]:
    k = min(k, len(index))
    V = image_embeddings(samples, params)
    sims = V @ index.embeddings.T
    rows = np.arange(len(index))
    return [_rank(s, rows, index, k) for s in sims]


def evaluate_model(
    ds: Dataset, query_ids: Sequence[str], candidates: Iterable[Address], params: EncoderParams
) -> MetricsReport:
    """Score every image of the query locations against the candidate addresses."""
    vocab = Vocab(ds.vocabulary)
    index = build_candidate_index(candidates, params, vocab)
    samples = ds.select(query_ids)
    if not samples:
        raise EvalError("empty query set")
    preds = predict_samples(samples, index, params)
    return evaluate([p.addresses for p in preds], [s.address for s in samples], [s.image_id for s in samples])


def training_addresses(ds: Dataset, train_ids: Iterable[str]) -> list[Address]:
    locs = ds.locations()
    return sorted({locs[i][1] for i in train_ids}, key=address_to_text)


def similarity_map(
    address: Address, samples: Sequence[Sample], params: EncoderParams, vocab
) -> list[tuple[UtmCoord, float]]:
    t = address_embeddings([address], params, vocab)[0]
    sims = image_embeddings(samples, params) @ t
    return [(s.coord, float(v)) for s, v in zip(samples, sims)]


def write_similarity_csv(rows: Sequence[tuple[UtmCoord, float]], path: str | Path) -> None:
    lines = ["east,north,similarity"]
    lines += [f"{c.east:.9g},{c.north:.9g},{v:.9g}" for c, v in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def nested_street_priors(gt_street: str, streets: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Ground-truth street first, the rest in seeded order; prefixes give nested priors of every width."""
    others = sorted(s for s in set(streets) if s != gt_street)
    return [gt_street] + [others[i] for i in rng.permutation(len(others))]


def constrained_sweep(
    ds: Dataset,
    query_ids: Sequence[str],
    candidates: Iterable[Address],
    params: EncoderParams,
    widths: Sequence[int] | None = None,
    seed: int = 0,
) -> dict[int, MetricsReport]:
    """Metrics per prior width W; each query's prior always holds its true street."""
    vocab = Vocab(ds.vocabulary)
    index = build_candidate_index(candidates, params, vocab)
    samples = ds.select(query_ids)
    if not samples:
        raise EvalError("empty query set")
    streets = sorted({a.main_street for a in index.addresses})
    if widths is None:
        widths = range(len(streets), 0, -1)
    widths = list(widths)
    if any(not 1 <= w <= len(streets) for w in widths):
        raise EvalError(f"prior widths must lie in [1, {len(streets)}]")
    rng = np.random.default_rng(seed)
    orders = [nested_street_priors(s.address.main_street, streets, rng) for s in samples]
    out = {}
    for w in widths:
        preds = [
            constrained_predict(s.feature, index, params, 5, streets=set(order[:w])).addresses
            for s, order in zip(samples, orders)
        ]
        out[w] = evaluate(preds, [s.address for s in samples], [s.image_id for s in samples])
    return out


def neighborhood_constrained(
    ds: Dataset, query_ids: Sequence[str], candidates: Iterable[Address], params: EncoderParams
) -> MetricsReport:
    """Metrics when every query is told its true neighborhood."""
    vocab = Vocab(ds.vocabulary)
    index = build_candidate_index(candidates, params, vocab)
    samples = ds.select(query_ids)
    if not samples:
        raise EvalError("empty query set")
    preds = [
        constrained_predict(s.feature, index, params, 5, neighborhood=s.address.neighborhood).addresses
        for s in samples
    ]
    return evaluate(preds, [s.address for s in samples], [s.image_id for s in samples])
