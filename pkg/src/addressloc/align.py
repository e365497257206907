"""Image/text encoders, the address, caption and geography losses, and their gradients.

Encoders are deliberately small: an affine map of the image feature, and a
mean-pooled token table followed by an affine map for text. Both outputs are
L2-normalized. One text encoder serves addresses and captions alike.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geodata import Sample, address_tokens

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 100.0
DEGENERATE_NORM = 1e-12
CHECKPOINT_FORMAT = "addressloc-checkpoint"
CHECKPOINT_VERSION = 1

PARAM_ORDER = ("image_proj", "image_bias", "token_table", "text_proj", "text_bias", "log_temp")
IMAGE_PARAMS = ("image_proj", "image_bias")
TEXT_PARAMS = ("token_table", "text_proj", "text_bias")
GEO_TARGETS = ("raw", "inverted")


class AlignError(ValueError):
    pass


@dataclass
class EncoderParams:
    image_proj: np.ndarray  # (F, d)
    image_bias: np.ndarray  # (d,)
    token_table: np.ndarray  # (|vocab|, d_tok)
    text_proj: np.ndarray  # (d_tok, d)
    text_bias: np.ndarray  # (d,)
    log_temp: float = math.log(TAU_INIT)

    @classmethod
    def init(cls, feature_dim: int, vocab_size: int, embed_dim: int = 32, token_dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(
            image_proj=rng.standard_normal((feature_dim, embed_dim)) / math.sqrt(feature_dim),
            image_bias=np.zeros(embed_dim),
            token_table=rng.standard_normal((vocab_size, token_dim)),
            text_proj=rng.standard_normal((token_dim, embed_dim)) / math.sqrt(token_dim),
            text_bias=np.zeros(embed_dim),
            log_temp=math.log(TAU_INIT),
        )

    @property
    def dims(self) -> dict[str, int]:
        return {
            "F": self.image_proj.shape[0],
            "d": self.image_proj.shape[1],
            "d_tok": self.token_table.shape[1],
            "vocab_size": self.token_table.shape[0],
        }

    @property
    def tau(self) -> float:
        return temperature(self.log_temp)[0]

    def arrays(self) -> list[np.ndarray]:
        return [np.atleast_1d(np.asarray(getattr(self, k), dtype=np.float64)) for k in PARAM_ORDER]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        out = {}
        pos = 0
        for key, arr in zip(PARAM_ORDER, self.arrays()):
            n = arr.size
            chunk = np.array(vec[pos : pos + n], dtype=np.float64).reshape(arr.shape)
            out[key] = float(chunk[0]) if key == "log_temp" else chunk
            pos += n
        if pos != len(vec):
            raise AlignError(f"flat vector has {len(vec)} entries, expected {pos}")
        return EncoderParams(**out)

    def mask(self, freeze_image: bool = False, freeze_text: bool = False) -> np.ndarray:
        """1 for trainable coordinates of the flat layout, 0 for frozen ones."""
        parts = []
        for key, arr in zip(PARAM_ORDER, self.arrays()):
            frozen = (freeze_image and key in IMAGE_PARAMS) or (freeze_text and key in TEXT_PARAMS)
            parts.append(np.full(arr.size, 0.0 if frozen else 1.0))
        return np.concatenate(parts)

    def copy(self) -> "EncoderParams":
        return self.with_flat(self.flat())


def temperature(log_temp: float) -> tuple[float, float]:
    """Clamped temperature and its derivative with respect to ``log_temp``."""
    tau = math.exp(log_temp)
    if tau <= TAU_MIN:
        return TAU_MIN, 0.0
    if tau >= TAU_MAX:
        return TAU_MAX, 0.0
    return tau, tau


def _normalize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        raise AlignError("degenerate embedding: projected vector has (near) zero norm")
    return Z / norms[:, None], norms


def _normalize_backward(dV: np.ndarray, V: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (dV - V * np.sum(V * dV, axis=1, keepdims=True)) / norms[:, None]


class Vocab:
    """Token to row index lookup over an ordered vocabulary."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise AlignError("vocabulary has duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        if len(tokens) == 0:
            raise AlignError("cannot encode an empty token list")
        out = []
        for t in tokens:
            if t not in self.index:
                raise AlignError(f"out-of-vocabulary token {t!r}")
            out.append(self.index[t])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def _as_vocab(vocab) -> Vocab:
    return vocab if isinstance(vocab, Vocab) else Vocab(vocab)


def pooling_matrix(id_lists: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    M = np.zeros((len(id_lists), vocab_size))
    for i, ids in enumerate(id_lists):
        np.add.at(M[i], ids, 1.0 / len(ids))
    return M


def encode_images(X: np.ndarray, params: EncoderParams) -> np.ndarray:
    V, _ = _normalize_rows(np.atleast_2d(X) @ params.image_proj + params.image_bias)
    return V


def encode_image(feature: np.ndarray, params: EncoderParams) -> np.ndarray:
    return encode_images(np.asarray(feature, dtype=np.float64)[None, :], params)[0]


def encode_token_lists(token_lists: Sequence[Sequence[str]], params: EncoderParams, vocab) -> np.ndarray:
    vocab = _as_vocab(vocab)
    M = pooling_matrix([vocab.ids(t) for t in token_lists], params.token_table.shape[0])
    T, _ = _normalize_rows(M @ params.token_table @ params.text_proj + params.text_bias)
    return T


def encode_text(tokens: Sequence[str], params: EncoderParams, vocab) -> np.ndarray:
    return encode_token_lists([tokens], params, vocab)[0]


def _check_logits(S: np.ndarray) -> None:
    if not np.all(np.isfinite(S)):
        raise AlignError("non-finite logits in contrastive loss")


def _logsumexp(S: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(S, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(S - m), axis=axis, keepdims=True))


def _contrastive(A: np.ndarray, B: np.ndarray, tau: float, grads: bool):
    N = A.shape[0]
    if N < 1:
        raise AlignError("contrastive loss needs at least one pair")
    if not tau > 0:
        raise AlignError("temperature must be positive")
    sim = A @ B.T
    S = sim / tau
    _check_logits(S)
    lse_row = _logsumexp(S, axis=1)
    lse_col = _logsumexp(S, axis=0)
    diag = np.diag(S)
    loss = float((np.sum(lse_row[:, 0] - diag) + np.sum(lse_col[0, :] - diag)) / (2 * N))
    if not grads:
        return loss, None, None, None
    eye = np.eye(N)
    G = ((np.exp(S - lse_row) - eye) + (np.exp(S - lse_col) - eye)) / (2 * N)
    dA = G @ B / tau
    dB = G.T @ A / tau
    dtau = -float(np.sum(G * sim)) / tau**2
    return loss, dA, dB, dtau


def contrastive_loss(A: np.ndarray, B: np.ndarray, tau: float) -> float:
    """Symmetric InfoNCE over matched rows of A and B."""
    return _contrastive(np.atleast_2d(A), np.atleast_2d(B), tau, grads=False)[0]


def spatial_distance_matrix(U: np.ndarray) -> np.ndarray:
    """Pairwise L1 distance after per-axis min-max scaling over the batch.

    An axis with zero range contributes nothing.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    lo = U.min(axis=0)
    span = U.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    Uh = np.where(span > 0, (U - lo) / safe, 0.0)
    return np.sum(np.abs(Uh[:, None, :] - Uh[None, :, :]), axis=2)


def feature_similarity_matrix(V: np.ndarray) -> np.ndarray:
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise AlignError("zero-norm row in similarity matrix input")
    Vn = V / norms[:, None]
    D = Vn @ Vn.T
    np.fill_diagonal(D, 1.0)
    return D


def geography_target(DU: np.ndarray, mode: str = "raw") -> np.ndarray:
    if mode == "raw":
        return DU
    if mode == "inverted":
        return 1.0 - DU / 2.0
    raise AlignError(f"unknown geography target mode {mode!r}")


def geography_loss(DV: np.ndarray, DU: np.ndarray) -> float:
    if DV.shape != DU.shape or DV.ndim != 2:
        raise AlignError(f"shape mismatch: {DV.shape} vs {DU.shape}")
    return float(np.mean((DV - DU) ** 2))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.8
    use_address: bool = True
    use_caption: bool = True
    use_geography: bool = True
    geo_target: str = "raw"

    def effective(self) -> tuple[float, float, float]:
        return (
            self.alpha if self.use_address else 0.0,
            self.beta if self.use_caption else 0.0,
            self.gamma if self.use_geography else 0.0,
        )


@dataclass
class Batch:
    X: np.ndarray  # (N, F) raw features
    address_ids: list[list[int]]
    caption_ids: list[list[int]]  # caption tokens followed by address tokens
    U: np.ndarray  # (N, 2) UTM east/north

    def __len__(self):
        return self.X.shape[0]


def make_batch(samples: Sequence[Sample], vocab) -> Batch:
    vocab = _as_vocab(vocab)
    addr, cap = [], []
    for s in samples:
        if s.address is None:
            raise AlignError(f"sample {s.image_id} has no address")
        a = address_tokens(s.address)
        addr.append(vocab.ids(a))
        cap.append(vocab.ids(list(s.caption_tokens) + a))
    return Batch(
        X=np.stack([s.feature for s in samples]),
        address_ids=addr,
        caption_ids=cap,
        U=np.array([s.coord.as_tuple() for s in samples], dtype=np.float64),
    )


@dataclass
class LossReport:
    l_address: float
    l_caption: float
    l_geography: float
    l_total: float
    grads: EncoderParams | None = field(default=None, repr=False)

    @property
    def gradients(self) -> np.ndarray:
        return self.grads.flat()

    def components(self) -> dict[str, float]:
        return {
            "l_address": self.l_address,
            "l_caption": self.l_caption,
            "l_geography": self.l_geography,
            "l_total": self.l_total,
        }


def total_loss_and_grads(
    batch: Batch, params: EncoderParams, weights: LossWeights = LossWeights(), grads: bool = True
) -> LossReport:
    a_w, c_w, g_w = weights.effective()
    N = len(batch)
    tau, dtau_dlog = temperature(params.log_temp)
    V_size = params.token_table.shape[0]

    Z = batch.X @ params.image_proj + params.image_bias
    V, zn = _normalize_rows(Z)
    MA = pooling_matrix(batch.address_ids, V_size)
    MC = pooling_matrix(batch.caption_ids, V_size)
    PA = MA @ params.token_table
    PC = MC @ params.token_table
    TA, an = _normalize_rows(PA @ params.text_proj + params.text_bias)
    TC, cn = _normalize_rows(PC @ params.text_proj + params.text_bias)

    la, dVa, dTA, dtau_a = _contrastive(V, TA, tau, grads)
    lc, dVc, dTC, dtau_c = _contrastive(V, TC, tau, grads)

    DU = geography_target(spatial_distance_matrix(batch.U), weights.geo_target)
    DV = V @ V.T
    np.fill_diagonal(DV, 1.0)
    lg = geography_loss(DV, DU)
    total = a_w * la + c_w * lc + g_w * lg
    report = LossReport(la, lc, lg, total)
    if not grads:
        return report

    Gg = 2.0 * (DV - DU) / N**2
    np.fill_diagonal(Gg, 0.0)  # the diagonal is constant 1
    dV = a_w * dVa + c_w * dVc + g_w * ((Gg + Gg.T) @ V)
    dZ = _normalize_backward(dV, V, zn)

    dYA = _normalize_backward(a_w * dTA, TA, an)
    dYC = _normalize_backward(c_w * dTC, TC, cn)
    d_text_proj = PA.T @ dYA + PC.T @ dYC
    d_text_bias = dYA.sum(axis=0) + dYC.sum(axis=0)
    d_tokens = MA.T @ (dYA @ params.text_proj.T) + MC.T @ (dYC @ params.text_proj.T)
    dtau = a_w * dtau_a + c_w * dtau_c

    report.grads = EncoderParams(
        image_proj=batch.X.T @ dZ,
        image_bias=dZ.sum(axis=0),
        token_table=d_tokens,
        text_proj=d_text_proj,
        text_bias=d_text_bias,
        log_temp=dtau * dtau_dlog,
    )
    return report


def max_relative_error(
    fn: Callable[[np.ndarray], float], x0: np.ndarray, analytic: np.ndarray, step: float = 1e-5, floor: float = 1e-6
) -> float:
    """Worst |analytic - numeric| / max(|analytic|, |numeric|, floor) over central differences."""
    if not step > 0:
        raise AlignError("finite difference step must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        numeric = (fn(xp) - fn(xm)) / (2 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def finite_diff_check(
    params: EncoderParams,
    batch: Batch,
    weights: LossWeights = LossWeights(),
    step: float = 1e-5,
    analytic: np.ndarray | None = None,
) -> float:
    if analytic is None:
        analytic = total_loss_and_grads(batch, params, weights).gradients

    def loss_at(vec):
        return total_loss_and_grads(batch, params.with_flat(vec), weights, grads=False).l_total

    return max_relative_error(loss_at, params.flat(), analytic, step)


def save_checkpoint(params: EncoderParams, vocab, path: str | Path) -> None:
    vocab = _as_vocab(vocab)
    dims = params.dims
    if dims["vocab_size"] != len(vocab):
        raise AlignError("token table does not match vocabulary size")
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "F": dims["F"],
        "d": dims["d"],
        "d_tok": dims["d_tok"],
        "vocab_size": dims["vocab_size"],
        "vocab_sha256": vocab.digest(),
        "order": list(PARAM_ORDER),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [repr(float(x)) for x in params.flat()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, vocab=None) -> EncoderParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise AlignError(f"{path}: unsupported checkpoint format {header.get('format')}/{header.get('version')}")
    if vocab is not None and _as_vocab(vocab).digest() != header["vocab_sha256"]:
        raise AlignError(f"{path}: checkpoint vocabulary does not match the dataset vocabulary")
    values = np.array([float(x) for x in lines[1:]], dtype=np.float64)
    F, d, d_tok, nv = header["F"], header["d"], header["d_tok"], header["vocab_size"]
    template = EncoderParams(
        np.zeros((F, d)), np.zeros(d), np.zeros((nv, d_tok)), np.zeros((d_tok, d)), np.zeros(d), 0.0
    )
    return template.with_flat(values)


def address_embeddings(addresses, params: EncoderParams, vocab) -> np.ndarray:
    return encode_token_lists([address_tokens(a) for a in addresses], params, vocab)


def image_embeddings(samples: Sequence[Sample], params: EncoderParams) -> np.ndarray:
    return encode_images(np.stack([s.feature for s in samples]), params)



def random_case(rng: np.random.Generator, geo_target: str = "raw") -> tuple[EncoderParams, Batch, LossWeights]:
    """Small random problem: N <= 6, d <= 8, F <= 10, vocab <= 20."""
    N = int(rng.integers(2, 7))
    d = int(rng.integers(2, 9))
    F = int(rng.integers(2, 11))
    nv = int(rng.integers(3, 21))
    d_tok = int(rng.integers(2, 9))
    params = EncoderParams.init(F, nv, d, d_tok, seed=int(rng.integers(2**31)))
    params.image_bias = rng.standard_normal(d) * 0.1
    params.text_bias = rng.standard_normal(d) * 0.1
    params.log_temp = float(rng.uniform(math.log(0.05), math.log(1.0)))

    def ids():
        return [int(i) for i in rng.integers(0, nv, size=int(rng.integers(1, 5)))]

    batch = Batch(
        X=rng.standard_normal((N, F)),
        address_ids=[ids() for _ in range(N)],
        caption_ids=[ids() for _ in range(N)],
        U=rng.uniform(0, 500, size=(N, 2)),
    )
    weights = LossWeights(
        alpha=float(rng.uniform(0.1, 2)), beta=float(rng.uniform(0.1, 2)), gamma=float(rng.uniform(0.1, 2)),
        geo_target=geo_target,
    )
    return params, batch, weights


@dataclass
class GradcheckSummary:
    errors: list[float]
    corrupted_errors: list[float]

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def weakest_control(self) -> float:
        return min(self.corrupted_errors)

    def passed(self, tol: float = 1e-4, control: float = 0.1) -> bool:
        return bool(self.worst < tol and self.weakest_control > control)


def gradcheck_suite(trials: int = 20, seed: int = 0, step: float = 1e-5) -> GradcheckSummary:
    """Analytic vs central differences on random cases, each paired with a corrupted-gradient control."""
    rng = np.random.default_rng(seed)
    errors, corrupted = [], []
    for t in range(trials):
        params, batch, weights = random_case(rng, GEO_TARGETS[t % 2])
        analytic = total_loss_and_grads(batch, params, weights).gradients
        errors.append(finite_diff_check(params, batch, weights, step, analytic))
        bad = analytic.copy()
        k = int(rng.integers(bad.size))
        bad[k] += 1.0 + abs(bad[k])  # relative error > 0.5 whatever the true value
        corrupted.append(finite_diff_check(params, batch, weights, step, bad))
    return GradcheckSummary(errors, corrupted)
