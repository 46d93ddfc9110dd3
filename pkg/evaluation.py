"""
Evaluation
Target ranks, Recall@K and MRR@K, best-epoch selection, fold averaging and the
Wilcoxon signed-rank test.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from model import ModelParams, predict_proba
from preprocess import Example
from trainer import make_batches

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 20
EXACT_WILCOXON_LIMIT = 25


class EmptyInputError(ValueError):
    """Raised when a metric or selection receives nothing to work on."""


@dataclass
class EvalReport:
    """Per-example ranks plus Recall@K and MRR@K."""
    rows: List[Tuple[int, int, int]] = field(default_factory=list)
    recall: float = 0.0
    mrr: float = 0.0
    epoch: Optional[int] = None
    k: int = DEFAULT_CUTOFF

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def ranks(self) -> List[int]:
        return [rank for _, _, rank in self.rows]

    def reciprocal_ranks(self, k: Optional[int] = None) -> np.ndarray:
        k = self.k if k is None else k
        return np.array([1.0 / r if r <= k else 0.0 for r in self.ranks])

    def aggregate(self) -> dict:
        return {f'recall_at_{self.k}': self.recall, f'mrr_at_{self.k}': self.mrr,
                'n': self.n, 'epoch': self.epoch}

    def write_csv(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['session_id', 'target', 'rank'])
            writer.writerows(self.rows)

    def write_json(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.aggregate(), f, indent=2, sort_keys=True)
            f.write('\n')

    @classmethod
    def read_csv(cls, path: str, k: int = DEFAULT_CUTOFF, epoch: Optional[int] = None) -> 'EvalReport':
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ['session_id', 'target', 'rank']:
                raise ValueError(f"{path} is not an evaluation report")
            rows = [(int(s), int(t), int(r)) for s, t, r in reader]
        return report_from_rows(rows, k, epoch)


def rank_of_target(prob_row, target: int) -> int:
    """1 + items scored higher + equally scored items with a smaller index."""
    prob_row = np.asarray(prob_row, dtype=np.float64)
    if not 0 <= target < prob_row.size:
        raise IndexError(f"target {target} out of range for {prob_row.size} items")
    p = prob_row[target]
    return 1 + int(np.count_nonzero(prob_row > p)) + int(np.count_nonzero(prob_row[:target] == p))


def _check_ranks(ranks: Sequence[int]):
    if len(ranks) == 0:
        raise EmptyInputError("no ranks to aggregate")


def recall_at_k(ranks: Sequence[int], k: int = DEFAULT_CUTOFF) -> float:
    _check_ranks(ranks)
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mrr_at_k(ranks: Sequence[int], k: int = DEFAULT_CUTOFF) -> float:
    _check_ranks(ranks)
    return sum(1.0 / r if r <= k else 0.0 for r in ranks) / len(ranks)


def report_from_rows(rows: List[Tuple[int, int, int]], k: int = DEFAULT_CUTOFF,
                     epoch: Optional[int] = None) -> EvalReport:
    ranks = [r for _, _, r in rows]
    return EvalReport(rows, recall_at_k(ranks, k), mrr_at_k(ranks, k), epoch, k)


def evaluate(params: ModelParams, examples: Sequence[Example], batch_size: int = 256,
             k: int = DEFAULT_CUTOFF, epoch: Optional[int] = None,
             last_prefix_only: bool = False) -> EvalReport:
    """
    Rank every example's target under the model.

    With last_prefix_only, only the longest prefix of each session is scored.
    """
    if last_prefix_only:
        longest = {}
        for ex in examples:
            if ex.session_id not in longest or ex.length > longest[ex.session_id].length:
                longest[ex.session_id] = ex
        examples = [ex for ex in examples if longest[ex.session_id] is ex]
    if not examples:
        raise EmptyInputError("no evaluation examples")
    rows = []
    max_len = params.base_config.max_len
    for batch in make_batches(examples, batch_size, seed=0, epoch=0, shuffle=False, max_len=max_len):
        probs = predict_proba(params, batch)
        for row, sid, target in zip(probs, batch.session_ids, batch.targets):
            rows.append((int(sid), int(target), rank_of_target(row, int(target))))
    report = report_from_rows(rows, k, epoch)
    logger.debug("epoch %s: recall@%d %.4f, mrr@%d %.4f over %d examples",
                 epoch, k, report.recall, k, report.mrr, report.n)
    return report


def best_epoch(reports: Sequence[EvalReport]) -> EvalReport:
    """Report with the highest recall; ties go to the earliest epoch."""
    if not reports:
        raise EmptyInputError("no reports to choose from")
    best = reports[0]
    for report in reports[1:]:
        if report.recall > best.recall or (
                report.recall == best.recall and (report.epoch or 0) < (best.epoch or 0)):
            best = report
    return best


def fold_average(values: Sequence[float]) -> float:
    """Unweighted mean over folds."""
    if len(values) == 0:
        raise EmptyInputError("no fold values to average")
    return sum(values) / len(values)


@dataclass
class WilcoxonResult:
    n_effective: int
    statistic: float
    p_two_sided: float
    method: str


def _exact_lower_tail(doubled_ranks: np.ndarray, w_doubled: int) -> int:
    """Number of sign patterns whose positive rank sum is <= w (ranks doubled to integers)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r:reach + r + 1] += counts[:reach + 1].copy()
        reach += r
    return int(counts[:w_doubled + 1].sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         exact_limit: int = EXACT_WILCOXON_LIMIT) -> WilcoxonResult:
    """
    Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped and tied |d| get average ranks. Up to
    exact_limit non-zero pairs the null distribution over all sign patterns is
    counted exactly; above it a normal approximation with tie and continuity
    corrections is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"need two equal-length non-empty samples, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0, 0.0, 1.0, 'exact')

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= exact_limit:
        doubled = np.rint(ranks * 2).astype(np.int64)
        count = _exact_lower_tail(doubled, int(round(w * 2)))
        p = min(1.0, 2.0 * count / 2.0 ** n)
        return WilcoxonResult(n, w, p, 'exact')

    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    variance -= (tie_sizes ** 3 - tie_sizes).sum() / 48.0
    if variance <= 0:
        return WilcoxonResult(n, w, 1.0, 'normal-approximation')
    correction = 0.5 * np.sign(w - mean)
    z = (w - mean - correction) / np.sqrt(variance)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return WilcoxonResult(n, w, p, 'normal-approximation')
