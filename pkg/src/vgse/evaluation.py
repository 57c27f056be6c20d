"""Retrieval (Recall@N, median rank) and semantic similarity (Pearson r) evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .data import Corpus, StsPair
from .errors import DimensionError, ZeroVarianceError

RECALL_LEVELS = (1, 5, 10)
Z95 = 1.96


class EmbeddingModel(Protocol):
    def encode_captions(self, texts: Sequence[str]) -> np.ndarray: ...

    def encode_images(self, features: np.ndarray) -> np.ndarray: ...


# -- ranking metrics ----------------------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def rank_queries(
    query_emb: np.ndarray, candidate_emb: np.ndarray, relevance: Sequence[Iterable[int]]
) -> np.ndarray:
    """1-based rank of the best-placed relevant candidate for every query.

    Candidates are ordered by descending cosine similarity; ties keep the
    lower candidate index first.
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    candidate_emb = np.asarray(candidate_emb, dtype=np.float64)
    if query_emb.ndim != 2 or candidate_emb.ndim != 2 or query_emb.shape[1] != candidate_emb.shape[1]:
        raise DimensionError(f"query {query_emb.shape} and candidate {candidate_emb.shape} widths differ")
    if len(relevance) != len(query_emb):
        raise ValueError(f"{len(relevance)} relevance sets for {len(query_emb)} queries")
    sims = _unit_rows(query_emb) @ _unit_rows(candidate_emb).T
    order = np.argsort(-sims, axis=1, kind="stable")
    position = np.empty_like(order)
    np.put_along_axis(position, order, np.arange(order.shape[1])[None, :], axis=1)
    ranks = np.empty(len(query_emb), dtype=np.int64)
    for q, rel in enumerate(relevance):
        rel = list(rel)
        if not rel:
            raise ValueError(f"query {q} has no relevant candidate")
        ranks[q] = position[q, rel].min() + 1
    return ranks


def recall_at(ranks, n: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("recall of an empty rank list")
    return 100.0 * np.count_nonzero(ranks <= n) / ranks.size


def median_rank(ranks) -> float:
    ranks = np.sort(np.asarray(ranks, dtype=np.float64))
    if ranks.size == 0:
        raise ValueError("median of an empty rank list")
    mid = ranks.size // 2
    if ranks.size % 2:
        return float(ranks[mid])
    return float((ranks[mid - 1] + ranks[mid]) / 2)


def recall_ci(recall_pct: float, n: int) -> float:
    """Half-width (in percentage points) of the 95% Wald interval."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = recall_pct / 100.0
    return 100.0 * Z95 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _flat(v: np.ndarray) -> bool:
    # rounding noise on a constant series (e.g. cos(a, a) over many pairs) counts as constant
    return float(np.ptp(v)) <= 1e-12 * max(1.0, float(np.abs(v).max()))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson_r needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ValueError("pearson_r needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if _flat(x) or _flat(y):
        raise ZeroVarianceError("correlation undefined: one series has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def fisher_ci(r: float, n: int) -> tuple[float, float]:
    """95% interval for a correlation via the Fisher z-transform."""
    if not abs(r) < 1.0:
        raise ValueError("fisher_ci needs |r| < 1")
    if n < 4:
        raise ValueError("fisher_ci needs n >= 4")
    z = math.atanh(r)
    half = Z95 / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


# -- reports ----------------------------------------------------------------------


@dataclass
class RetrievalReport:
    direction: str  # "caption_to_image" or "image_to_caption"
    r_at: dict[int, float]
    ci: dict[int, float]  # symmetric half-widths, same keys as r_at
    median_rank: float
    n_queries: int

    @classmethod
    def from_ranks(cls, direction: str, ranks) -> "RetrievalReport":
        r_at = {n: recall_at(ranks, n) for n in RECALL_LEVELS}
        return cls(direction, r_at, {n: recall_ci(v, len(ranks)) for n, v in r_at.items()}, median_rank(ranks), len(ranks))

    @property
    def short(self) -> str:
        return "c2i" if self.direction == "caption_to_image" else "i2c"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_at"] = {str(k): v for k, v in self.r_at.items()}
        d["ci"] = {str(k): v for k, v in self.ci.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        return cls(
            d["direction"],
            {int(k): float(v) for k, v in d["r_at"].items()},
            {int(k): float(v) for k, v in d["ci"].items()},
            float(d["median_rank"]),
            int(d["n_queries"]),
        )

    def to_rows(self, prefix: str = "") -> list[list]:
        rows = [
            [f"{prefix}{self.short}_r@{n}", v, v - self.ci[n], v + self.ci[n], self.n_queries]
            for n, v in self.r_at.items()
        ]
        rows.append([f"{prefix}{self.short}_medr", self.median_rank, "", "", self.n_queries])
        return rows


@dataclass
class StsReport:
    task_name: str
    pearson_r: float
    ci_low: float
    ci_high: float
    n_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StsReport":
        return cls(d["task_name"], float(d["pearson_r"]), float(d["ci_low"]), float(d["ci_high"]), int(d["n_pairs"]))

    def to_rows(self) -> list[list]:
        return [[self.task_name, self.pearson_r, self.ci_low, self.ci_high, self.n_pairs]]


@dataclass
class RetrievalResult:
    caption_to_image: RetrievalReport
    image_to_caption: RetrievalReport
    folds: list[tuple[RetrievalReport, RetrievalReport]] = field(default_factory=list)

    @property
    def mean_r10(self) -> float:
        """Average R@10 of the two directions (the model-selection score)."""
        return (self.caption_to_image.r_at[10] + self.image_to_caption.r_at[10]) / 2

    def to_dict(self) -> dict:
        return {
            "caption_to_image": self.caption_to_image.to_dict(),
            "image_to_caption": self.image_to_caption.to_dict(),
            "folds": [[a.to_dict(), b.to_dict()] for a, b in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalResult":
        return cls(
            RetrievalReport.from_dict(d["caption_to_image"]),
            RetrievalReport.from_dict(d["image_to_caption"]),
            [(RetrievalReport.from_dict(a), RetrievalReport.from_dict(b)) for a, b in d.get("folds", [])],
        )

    def to_rows(self) -> list[list]:
        rows = self.caption_to_image.to_rows() + self.image_to_caption.to_rows()
        for k, (a, b) in enumerate(self.folds, start=1):
            rows += a.to_rows(f"fold{k}_") + b.to_rows(f"fold{k}_")
        return rows


CSV_HEADER = ["name", "value", "ci_low", "ci_high", "n"]


def write_report_csv(path, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sts_report_from_csv(path) -> list[StsReport]:
    return [
        StsReport(r["name"], float(r["value"]), float(r["ci_low"]), float(r["ci_high"]), int(r["n"]))
        for r in read_report_csv(path)
    ]


def write_json(path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- end-to-end evaluation -------------------------------------------------------------


def retrieval_from_embeddings(
    caption_emb: np.ndarray, image_emb: np.ndarray, caption_image: Sequence[int]
) -> tuple[RetrievalReport, RetrievalReport]:
    """Both retrieval directions given which image each caption belongs to."""
    caption_image = np.asarray(caption_image, dtype=np.int64)
    c2i = rank_queries(caption_emb, image_emb, [[i] for i in caption_image])
    owners: list[list[int]] = [[] for _ in range(len(image_emb))]
    for c, i in enumerate(caption_image):
        owners[i].append(c)
    i2c = rank_queries(image_emb, caption_emb, owners)
    return RetrievalReport.from_ranks("caption_to_image", c2i), RetrievalReport.from_ranks("image_to_caption", i2c)


def _mean_report(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    n = int(round(np.mean([r.n_queries for r in reports])))
    r_at = {k: float(np.mean([r.r_at[k] for r in reports])) for k in RECALL_LEVELS}
    return RetrievalReport(
        reports[0].direction,
        r_at,
        {k: recall_ci(v, n) for k, v in r_at.items()},
        float(np.mean([r.median_rank for r in reports])),
        n,
    )


def eval_retrieval(model: EmbeddingModel, corpus: Corpus, split: str, folds: Optional[int] = None) -> RetrievalResult:
    """Embed a split once and score both directions.

    With ``folds=k`` the split's images are cut into ``k`` contiguous folds
    (captions follow their image); the headline reports are the fold means.
    """
    image_ids = corpus.image_ids(split)
    captions = corpus.split_captions(split)
    if not image_ids or not captions:
        raise ValueError(f"split {split!r} has no images or captions")
    position = {i: k for k, i in enumerate(image_ids)}
    img = model.encode_images(np.stack([corpus.images[i] for i in image_ids]))
    cap = model.encode_captions([c.text for c in captions])
    owner = np.array([position[c.image_id] for c in captions])
    if not folds:
        c2i, i2c = retrieval_from_embeddings(cap, img, owner)
        return RetrievalResult(c2i, i2c)
    if folds > len(image_ids):
        raise ValueError(f"{folds} folds requested for {len(image_ids)} images")
    per_fold = []
    for members in np.array_split(np.arange(len(image_ids)), folds):
        local = {int(g): k for k, g in enumerate(members)}
        rows = [c for c in range(len(captions)) if int(owner[c]) in local]
        per_fold.append(
            retrieval_from_embeddings(cap[rows], img[members], [local[int(owner[c])] for c in rows])
        )
    return RetrievalResult(
        _mean_report([f[0] for f in per_fold]), _mean_report([f[1] for f in per_fold]), per_fold
    )


def sts_similarities(model: EmbeddingModel, pairs: Sequence[StsPair]) -> np.ndarray:
    a = model.encode_captions([p.sentence_a for p in pairs])
    b = model.encode_captions([p.sentence_b for p in pairs])
    return np.einsum("ij,ij->i", a, b)


def eval_sts(model: EmbeddingModel, pairs: Sequence[StsPair], task_name: str = "sts") -> StsReport:
    """Pearson correlation between embedding cosines and gold scores."""
    sims = sts_similarities(model, pairs)
    r = pearson_r(sims, [p.score for p in pairs])
    lo, hi = fisher_ci(r, len(pairs))
    return StsReport(task_name, r, lo, hi, len(pairs))
