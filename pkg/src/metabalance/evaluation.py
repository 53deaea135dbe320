"""Top-K evaluation of the target task against held-out purchases."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

POLICIES = ("all", "mask-train-positives")


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked: Sequence[int], truth: set, k: int) -> float | None:
    """Binary-gain NDCG@k; ``None`` when ``truth`` is empty (user is skipped)."""
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    if not truth:
        return None
    top = list(ranked[:k])
    disc = _discounts(k)
    dcg = sum(disc[r] for r, item in enumerate(top) if item in truth)
    idcg = disc[: min(len(truth), k)].sum()
    return float(dcg / idcg)


def recall_precision_at_k(ranked: Sequence[int], truth: set, k: int) -> tuple[float, float] | None:
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    if not truth:
        return None
    hits = sum(1 for item in ranked[:k] if item in truth)
    return hits / len(truth), hits / k


@dataclass
class RankingResult:
    metrics: dict[tuple[str, int], float]
    n_users: int
    top: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def get(self, metric: str, k: int) -> float:
        return self.metrics[(metric, k)]

    def flat(self) -> dict[str, float]:
        return {f"{m}@{k}": v for (m, k), v in sorted(self.metrics.items())}


def _score_matrix(model, users: np.ndarray, n_items: int, task: int) -> np.ndarray:
    u = np.repeat(users, n_items)
    i = np.tile(np.arange(n_items), len(users))
    return model.scores(u, i, task=task).reshape(len(users), n_items)


def rank_items(model, user: int, n_items: int, exclude: Iterable[int] = (), task: int = 0) -> np.ndarray:
    """All items by descending target probability, ties by ascending item id; ``exclude`` removed."""
    s = _score_matrix(model, np.array([user]), n_items, task)[0]
    order = np.argsort(-s, kind="stable")
    excl = set(exclude)
    return order if not excl else np.array([i for i in order if i not in excl], dtype=np.int64)


def evaluate(
    model,
    truth: dict[int, set],
    n_items: int,
    ks: Sequence[int] = (10, 20),
    exclude: dict[int, set] | None = None,
    workers: int = 1,
    chunk: int = 64,
    keep_top: bool = False,
    task: int = 0,
) -> RankingResult:
    """Rank the full catalog for every user with non-empty ``truth``; average NDCG/recall/precision.

    ``exclude`` (the mask-train-positives policy) removes a user's known
    positives from the candidate list. Chunks of users are scored
    independently, so ``workers > 1`` fans them out over a thread pool.
    """
    users = np.array(sorted(u for u, t in truth.items() if t), dtype=np.int64)
    kmax = max(ks)

    def run(chunk_users: np.ndarray):
        s = _score_matrix(model, chunk_users, n_items, task)
        if exclude:
            for row, u in enumerate(chunk_users.tolist()):
                ex = exclude.get(u)
                if ex:
                    s[row, list(ex)] = -np.inf
        order = np.argsort(-s, kind="stable")[:, :kmax]
        out = []
        for row, u in enumerate(chunk_users.tolist()):
            ranked = order[row]
            if exclude and exclude.get(u):
                ranked = ranked[np.isfinite(s[row, ranked])]
            vals = {}
            for k in ks:
                vals[("ndcg", k)] = ndcg_at_k(ranked, truth[u], k)
                vals[("recall", k)], vals[("precision", k)] = recall_precision_at_k(ranked, truth[u], k)
            out.append((u, vals, ranked, s[row, ranked]))
        return out

    parts = [users[i:i + chunk] for i in range(0, len(users), chunk)]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = [r for part in pool.map(run, parts) for r in part]
    else:
        results = [r for part in parts for r in run(part)]
    sums: dict[tuple[str, int], float] = {}
    top = {}
    for u, vals, ranked, scores in results:
        for key, v in vals.items():
            sums[key] = sums.get(key, 0.0) + v
        if keep_top:
            top[u] = (ranked, scores)
    n = len(results)
    metrics = {key: (v / n if n else math.nan) for key, v in sums.items()}
    return RankingResult(metrics, n, top)


def write_metrics_csv(fh, run_id: str, epoch: int, result: RankingResult | dict, header: bool = False) -> None:
    metrics = result.metrics if isinstance(result, RankingResult) else result
    w = csv.writer(fh)
    if header:
        w.writerow(["run_id", "epoch", "metric", "K", "value"])
    for (m, k), v in sorted(metrics.items()):
        w.writerow([run_id, epoch, m, k, repr(float(v))])
