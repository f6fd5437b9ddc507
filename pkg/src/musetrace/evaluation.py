"""Evaluation of attribution quality.

Two lenses: retraining rank correlation (how well estimated scores predict
the measured effect of deleting subsets and retraining) and musical-style
similarity across attribution-rank buckets (do highly ranked works sound
like the target). Correlation helpers return NaN as the undefined marker
when an input is constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._seeds import derive_seed
from .attribution import AttributionMatrix, AttributionTarget, retrain_without
from .errors import LengthMismatch
from .midi import DEFAULT_LAYOUT, VocabularyLayout
from .model import ModelConfig, TrainingExample, TrainSettings, sequence_log_likelihood


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson_correlation(xs, ys) -> float:
    """Pearson correlation in [-1, 1]; NaN when either side is constant."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 3:
        raise LengthMismatch(f"need equal lengths of at least 3, got {x.size} and {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return math.nan
    return float(min(1.0, max(-1.0, float(xc @ yc) / denom)))


def spearman_rank_correlation(xs, ys) -> float:
    """Spearman correlation: Pearson over average-tie ranks.

    NaN marks the undefined case (a constant list)."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 3:
        raise LengthMismatch(f"need equal lengths of at least 3, got {x.size} and {y.size}")
    return pearson_correlation(_average_ranks(x), _average_ranks(y))


# ---------------------------------------------------------------------------
# retraining rank correlation (deletion subsets)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubsetPlan:
    """Deletion subsets for ground-truth evaluation; each holds exactly
    round(fraction * n) distinct work ids."""

    subsets: tuple[frozenset, ...]
    fraction: float
    seed: int


def make_subset_plan(work_ids, count: int, fraction: float, seed: int) -> SubsetPlan:
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be strictly between 0 and 1")
    ids = list(work_ids)
    size = round(fraction * len(ids))
    if size < 1 or size >= len(ids) or count < 1:
        raise ValueError("subset plan would be empty or cover everything")
    rng = np.random.default_rng(seed)
    subsets = tuple(
        frozenset(ids[i] for i in rng.choice(len(ids), size=size, replace=False))
        for _ in range(count)
    )
    return SubsetPlan(subsets=subsets, fraction=fraction, seed=seed)


def lds_evaluate(
    estimated: AttributionMatrix,
    corpus: list[TrainingExample],
    plan: SubsetPlan,
    config: ModelConfig,
    settings: TrainSettings,
    targets: list[AttributionTarget],
    *,
    cache: dict | None = None,
) -> dict:
    """Spearman correlation between estimated and measured subset effects.

    For every subset S' the ground truth is the retrained-model change in
    target log-likelihood; the estimate is the sum of the target's stored
    scores over S'. Stored scores are positive-means-helpful while the
    measured change is negative for helpful works, so the correlation is
    taken against the negated ground truth. One model is retrained per
    subset and shared by all targets (plus one baseline model).
    """
    if cache is None:
        cache = {}
    col = {wid: i for i, wid in enumerate(estimated.work_ids)}
    missing = [ex.work_id for ex in corpus if ex.work_id not in col]
    if missing:
        raise ValueError(f"estimated scores lack columns for {missing[:3]}")

    base = retrain_without(corpus, frozenset(), config, settings, cache)
    base_ll = {
        t.target_id: sequence_log_likelihood(base, t.tokens, t.prompt) for t in targets
    }

    truth = np.zeros((len(targets), len(plan.subsets)), dtype=np.float64)
    estimate = np.zeros_like(truth)
    for si, subset in enumerate(plan.subsets):
        variant = retrain_without(corpus, subset, config, settings, cache)
        cols = [col[wid] for wid in sorted(subset)]
        for ti, target in enumerate(targets):
            ll = sequence_log_likelihood(variant, target.tokens, target.prompt)
            truth[ti, si] = ll - base_ll[target.target_id]
            estimate[ti, si] = estimated.scores[
                estimated.target_ids.index(target.target_id), cols
            ].sum()

    per_target = {
        t.target_id: spearman_rank_correlation(estimate[ti], -truth[ti])
        for ti, t in enumerate(targets)
    }
    rhos = np.array(list(per_target.values()), dtype=np.float64)
    finite = rhos[np.isfinite(rhos)]
    return {
        "per_target_rho": per_target,
        "mean_rho": float(finite.mean()) if finite.size else math.nan,
        "defined_targets": int(finite.size),
        "num_subsets": len(plan.subsets),
        "fraction": plan.fraction,
        "level": estimated.level,
    }


# ---------------------------------------------------------------------------
# style features and rank-bucket similarity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleFeatures:
    """Loudness (mean NOTE_ON velocity), key (mean NOTE_ON pitch), and
    duration (summed TIME_SHIFT seconds); NaN marks an empty category."""

    loudness: float
    key: float
    duration: float

    def as_dict(self) -> dict:
        return {"loudness": self.loudness, "key": self.key, "duration": self.duration}


FEATURE_NAMES = ("loudness", "key", "duration")


def style_features(events, layout: VocabularyLayout = DEFAULT_LAYOUT) -> StyleFeatures:
    """Compute the three style features from a token sequence.

    Loudness uses the reconstructed (bin midpoint) velocity in effect at
    each NOTE_ON; before any VELOCITY token the layout's default bin
    applies. The result is invariant to re-emitting an unchanged VELOCITY.
    """
    velocity = layout.velocity_midpoint(layout.default_velocity_bin)
    velocities: list[int] = []
    pitches: list[int] = []
    steps = 0
    for token in np.asarray(events).ravel():
        kind, value = layout.decode(int(token))
        if kind == "velocity":
            velocity = layout.velocity_midpoint(value)
        elif kind == "note_on":
            velocities.append(velocity)
            pitches.append(value)
        elif kind == "time_shift":
            steps += value
    return StyleFeatures(
        loudness=float(np.mean(velocities)) if velocities else math.nan,
        key=float(np.mean(pitches)) if pitches else math.nan,
        duration=steps * layout.shift_ms / 1000.0,
    )


def style_similarity_by_rank(
    scores: AttributionMatrix,
    work_features: list[StyleFeatures],
    target_features: dict[str, StyleFeatures],
    num_buckets: int = 10,
) -> dict:
    """Per-bucket, per-feature similarity between targets and ranked works.

    For each target the works are ordered by descending attribution score
    and cut into `num_buckets` contiguous rank buckets (deciles by default).
    (target feature, work feature) pairs are pooled across targets within a
    bucket; each bucket reports the Pearson correlation per feature plus
    quartiles of the absolute feature difference for box plots. NaN features
    and degenerate (zero variance) buckets are marked with None.
    """
    n = len(scores.work_ids)
    if len(work_features) != n:
        raise ValueError("one feature set is required per work")
    if num_buckets < 2 or num_buckets > n:
        raise ValueError("num_buckets must be between 2 and the work count")
    edges = [round(b * n / num_buckets) for b in range(num_buckets + 1)]

    pairs: dict[tuple[int, str], list[tuple[float, float]]] = {
        (b, f): [] for b in range(num_buckets) for f in FEATURE_NAMES
    }
    for ti, tid in enumerate(scores.target_ids):
        tf = target_features[tid].as_dict()
        order = np.argsort(-scores.scores[ti], kind="stable")
        for b in range(num_buckets):
            for wi in order[edges[b]:edges[b + 1]]:
                wf = work_features[wi].as_dict()
                for name in FEATURE_NAMES:
                    if math.isfinite(tf[name]) and math.isfinite(wf[name]):
                        pairs[(b, name)].append((tf[name], wf[name]))

    buckets = []
    for b in range(num_buckets):
        row: dict = {"bucket": b, "rank_range": [edges[b], edges[b + 1]]}
        features = {}
        for name in FEATURE_NAMES:
            pts = pairs[(b, name)]
            entry: dict = {"pairs": len(pts)}
            if len(pts) >= 3:
                t_vals = [p[0] for p in pts]
                w_vals = [p[1] for p in pts]
                rho = pearson_correlation(t_vals, w_vals)
                entry["pearson"] = None if math.isnan(rho) else rho
                diffs = np.abs(np.array(t_vals) - np.array(w_vals))
                entry["abs_diff_quartiles"] = [
                    float(q) for q in np.percentile(diffs, [0, 25, 50, 75, 100])
                ]
            else:
                entry["pearson"] = None
                entry["abs_diff_quartiles"] = None
            features[name] = entry
        row["features"] = features
        buckets.append(row)
    return {"num_buckets": num_buckets, "buckets": buckets}
