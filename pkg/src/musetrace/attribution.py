"""Attribution of generated music to training works.

Two routes are provided. The ground truth retrains the model without a set
of works and measures the change in the target's log-likelihood (negative
change means the removed works were helping). The estimator projects exact
per-work gradients through a random sign matrix, solves a ridge kernel per
ensemble member, and averages member scores; stored scores follow the
"positive means helpful" convention.

Score file format ("ASCR1"): the 5 magic bytes, a 32-bit little-endian
header length, a JSON header {level, sign_convention, n, target_count,
target_ids, work_ids, estimator_config}, then row-major float64 scores
(one row per target, one column per work).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seeds import derive_seed
from .errors import (
    DimensionMismatch,
    EmptyCorpusAfterRemoval,
    FormatError,
    SingularKernel,
)
from .model import (
    ModelCheckpoint,
    ModelConfig,
    TrainingExample,
    TrainSettings,
    event_gradient_matrix,
    params_hash,
    segment_feature,
    sequence_log_likelihood,
    train,
)

SCORES_MAGIC = b"ASCR1"
SIGN_CONVENTION = "positive-means-helpful"
PROJECTION_CHUNK = 4096  # rows of the sign matrix generated per block
RIDGE_RULE = 1e-6  # lambda = RIDGE_RULE * trace(phi' phi) / d when unset


@dataclass(frozen=True)
class AttributionTarget:
    """A generated event or segment with the prompt that conditioned it."""

    target_id: str
    kind: str  # "event" or "segment"
    prompt: np.ndarray
    tokens: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", np.asarray(self.prompt, dtype=np.uint16).ravel())
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.uint16).ravel())
        if self.kind not in ("event", "segment"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if (self.kind == "event") != (self.tokens.size == 1):
            raise ValueError("kind 'event' means exactly one token, 'segment' more")
        if self.tokens.size == 0:
            raise ValueError("a target needs at least one token")

    def event_subtargets(self) -> list["AttributionTarget"]:
        """One event-kind target per token, each with its running context."""
        subs = []
        for j in range(self.tokens.size):
            subs.append(AttributionTarget(
                target_id=f"{self.target_id}#e{j}",
                kind="event",
                prompt=np.concatenate([self.prompt, self.tokens[:j]]),
                tokens=self.tokens[j:j + 1],
            ))
        return subs


# ---------------------------------------------------------------------------
# exact retraining oracle
# ---------------------------------------------------------------------------

def retrain_without(
    corpus: list[TrainingExample],
    removed_ids,
    config: ModelConfig,
    settings: TrainSettings,
    cache: dict | None = None,
) -> ModelCheckpoint:
    """Train on the corpus minus the given work ids, from the same seed.

    `cache` maps frozensets of removed ids to finished checkpoints and is
    shared across calls so each subset is retrained once.
    """
    ids = [ex.work_id for ex in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("work ids must be unique")
    removed = frozenset(removed_ids)
    unknown = removed - set(ids)
    if unknown:
        raise ValueError(f"removal names unknown works: {sorted(unknown)}")
    if cache is not None and removed in cache:
        return cache[removed]
    keep = [i for i, wid in enumerate(ids) if wid not in removed]
    if not keep:
        raise EmptyCorpusAfterRemoval("removal set covers the whole corpus")
    ckpt = train(corpus, config, settings, subset_mask=keep)
    if cache is not None:
        cache[removed] = ckpt
    return ckpt


def exact_influence(
    corpus: list[TrainingExample],
    removal_set,
    target: AttributionTarget,
    config: ModelConfig,
    settings: TrainSettings,
    *,
    cache: dict | None = None,
) -> float:
    """Ground-truth influence of a removal set on a target.

    Returns f(target, model trained without the set) minus f(target, model
    trained on everything), where f is the log-likelihood of the target's
    tokens given its prompt. Removing helpful works yields a negative value.
    The empty set returns exactly 0.0.
    """
    removed = frozenset(removal_set)
    if not removed:
        return 0.0
    if cache is None:
        cache = {}
    base = retrain_without(corpus, frozenset(), config, settings, cache)
    variant = retrain_without(corpus, removed, config, settings, cache)
    f_variant = sequence_log_likelihood(variant, target.tokens, target.prompt)
    f_base = sequence_log_likelihood(base, target.tokens, target.prompt)
    return f_variant - f_base


def random_baseline_scores(n: int, seed: int) -> np.ndarray:
    """i.i.d. uniform(0, 1) scores; the comparison baseline."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return np.random.default_rng(seed).random(n)


# ---------------------------------------------------------------------------
# projected-gradient estimator
# ---------------------------------------------------------------------------

def _project(grads: np.ndarray, seed: int, dim: int) -> np.ndarray:
    """Multiply by the (1/sqrt(d))-scaled random sign matrix.

    The sign matrix is regenerated statelessly in fixed-size row blocks so
    fitting and scoring agree without ever storing it.
    """
    single = grads.ndim == 1
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    out = np.zeros((g.shape[0], dim), dtype=np.float64)
    for block, lo in enumerate(range(0, g.shape[1], PROJECTION_CHUNK)):
        hi = min(lo + PROJECTION_CHUNK, g.shape[1])
        rng = np.random.default_rng(derive_seed(seed, "sign-block", block))
        signs = rng.integers(0, 2, size=(hi - lo, dim), dtype=np.int8)
        signs = signs.astype(np.float64) * 2.0 - 1.0
        out += g[:, lo:hi] @ signs
    out /= np.sqrt(dim)
    return out[0] if single else out


@dataclass
class IndexMember:
    checkpoint: ModelCheckpoint
    params_hash: str
    subset_mask: list | None
    projection_seed: int
    phi: np.ndarray  # (n, d) projected per-work gradients
    q: np.ndarray  # (n,) mean of (1 - p_correct) over each work's events
    kernel_inverse: np.ndarray  # (d, d)
    ridge: float
    include: np.ndarray  # (n,) bool: works this member scores


@dataclass
class AttributionIndex:
    members: tuple[IndexMember, ...]
    projection_dim: int
    ridge: float | None  # None means the per-member trace rule
    output_fn: str
    work_ids: tuple[str, ...]
    restrict_to_subset: bool = False

    @property
    def n(self) -> int:
        return len(self.work_ids)


def fit_attribution_index(
    corpus: list[TrainingExample],
    ensemble: list[ModelCheckpoint],
    *,
    projection_dim: int = 512,
    ridge: float | None = None,
    output_fn: str = "logit_margin",
    restrict_to_subset: bool = False,
) -> AttributionIndex:
    """Featurize every work under every ensemble member and solve the ridge
    kernel per member.

    Per member: g_i is the gradient of the summed per-event psi over work i,
    phi_i its sign projection, q_i the mean of (1 - p_correct) over the
    work's events. The kernel (phi' phi + ridge I) must be positive definite
    or SingularKernel is raised with a condition estimate. With `ridge` unset
    each member uses RIDGE_RULE * trace(phi' phi) / d. By default every
    member featurizes the full corpus; `restrict_to_subset` limits each
    member to its own training subset (works outside it score zero for that
    member and the final mean counts only covering members).
    """
    if not ensemble:
        raise ValueError("ensemble must contain at least one checkpoint")
    if not corpus:
        raise ValueError("corpus must contain at least one work")
    ref = ensemble[0].config
    for ckpt in ensemble[1:]:
        same = (ckpt.config.vocab_size == ref.vocab_size
                and ckpt.config.context_length == ref.context_length
                and ckpt.params.size == ensemble[0].params.size)
        if not same:
            raise DimensionMismatch("ensemble members disagree on architecture")

    n = len(corpus)
    members = []
    for ckpt in ensemble:
        phash = params_hash(ckpt)
        seed = derive_seed(int(phash[:16], 16), "trak-projection")
        mask = ckpt.provenance.get("subset_mask")
        include = np.ones(n, dtype=bool)
        if restrict_to_subset and mask is not None:
            include[:] = False
            include[np.asarray(mask, dtype=int)] = True

        phi = np.zeros((n, projection_dim), dtype=np.float64)
        q = np.zeros(n, dtype=np.float64)
        for i, ex in enumerate(corpus):
            if not include[i]:
                continue
            g, qbar = segment_feature(ckpt, (), ex.tokens, output_fn)
            phi[i] = _project(g, seed, projection_dim)
            q[i] = qbar

        gram = phi.T @ phi
        lam = ridge if ridge is not None else RIDGE_RULE * float(np.trace(gram)) / projection_dim
        kernel = gram + lam * np.eye(projection_dim)
        try:
            np.linalg.cholesky(kernel)
        except np.linalg.LinAlgError:
            cond = float(np.linalg.cond(kernel))
            raise SingularKernel(
                f"kernel not positive definite at ridge {lam:.3e} "
                f"(condition estimate {cond:.3e}); increase the ridge"
            ) from None
        inverse = np.linalg.inv(kernel)
        inverse = (inverse + inverse.T) / 2.0  # keep the inverse exactly symmetric
        members.append(IndexMember(
            checkpoint=ckpt,
            params_hash=phash,
            subset_mask=list(mask) if mask is not None else None,
            projection_seed=seed,
            phi=phi,
            q=q,
            kernel_inverse=inverse,
            ridge=float(lam),
            include=include,
        ))

    return AttributionIndex(
        members=tuple(members),
        projection_dim=projection_dim,
        ridge=ridge,
        output_fn=output_fn,
        work_ids=tuple(ex.work_id for ex in corpus),
        restrict_to_subset=restrict_to_subset,
    )


def _event_rows(index: AttributionIndex, target: AttributionTarget) -> np.ndarray:
    """Per-event score rows (events, works), mean over members.

    Per member and event: tau = phi_works . kernel_inverse . phi(event),
    elementwise times q. All events of the target share one forward pass and
    one projection call per member; by causal masking the per-event gradients
    equal the ones a separate pass over each running context would give.
    """
    acc = np.zeros((int(np.asarray(target.tokens).size), index.n), dtype=np.float64)
    counts = np.zeros(index.n, dtype=np.float64)
    for member in index.members:
        grads, _ = event_gradient_matrix(
            member.checkpoint, target.prompt, target.tokens, index.output_fn
        )
        if grads.shape[1] != member.checkpoint.params.size:
            raise DimensionMismatch("target gradient length does not match the index")
        phi_t = _project(grads, member.projection_seed, index.projection_dim)
        acc += (member.phi @ (member.kernel_inverse @ phi_t.T)).T * member.q
        counts += member.include
    return acc / np.maximum(counts, 1.0)


def score_events(index: AttributionIndex, target: AttributionTarget) -> np.ndarray:
    """Scores of every work for a single generated event. Positive means the
    work pushed the model toward generating this event."""
    if target.kind != "event":
        raise ValueError("score_events needs a target of kind 'event'")
    return _event_rows(index, target)[0]


def score_segment(index: AttributionIndex, target: AttributionTarget) -> np.ndarray:
    """Scores of every work for a whole generated segment: the elementwise
    sum of the per-event scores, each event taken with its running context."""
    if target.kind != "segment":
        raise ValueError("score_segment needs a target of kind 'segment'")
    return _event_rows(index, target).sum(axis=0)


def _target_row(index: AttributionIndex, target: AttributionTarget, level: str) -> np.ndarray:
    if level == "event":
        return _event_rows(index, target).sum(axis=0)
    if level == "segment":
        if target.kind == "segment":
            return score_segment(index, target)
        return score_events(index, target)
    raise ValueError(f"unknown level {level!r}")


# ---------------------------------------------------------------------------
# score matrices
# ---------------------------------------------------------------------------

@dataclass
class AttributionMatrix:
    """Scores for a batch of targets: one row per target, one column per
    training work, positive meaning helpful."""

    scores: np.ndarray  # (targets, works) float64
    target_ids: tuple[str, ...]
    work_ids: tuple[str, ...]
    level: str  # "event", "segment", or "random"
    sign_convention: str = SIGN_CONVENTION
    estimator_config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.target_ids), len(self.work_ids)):
            raise DimensionMismatch("score matrix shape disagrees with the id lists")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def row(self, target_id: str) -> np.ndarray:
        return self.scores[self.target_ids.index(target_id)]


def attribute_targets(
    index: AttributionIndex,
    targets: list[AttributionTarget],
    level: str,
) -> AttributionMatrix:
    """Score every target at the requested level ("event" sums per-event
    score vectors; "segment" uses the segment decomposition directly)."""
    rows = np.stack([_target_row(index, t, level) for t in targets])
    return AttributionMatrix(
        scores=rows,
        target_ids=tuple(t.target_id for t in targets),
        work_ids=index.work_ids,
        level=level,
        estimator_config={
            "ensemble_size": len(index.members),
            "projection_dim": index.projection_dim,
            "ridge": index.ridge,
            "output_fn": index.output_fn,
            "restrict_to_subset": index.restrict_to_subset,
        },
    )


def save_scores(matrix: AttributionMatrix, path: str | os.PathLike) -> None:
    header = {
        "level": matrix.level,
        "sign_convention": matrix.sign_convention,
        "n": len(matrix.work_ids),
        "target_count": len(matrix.target_ids),
        "target_ids": list(matrix.target_ids),
        "work_ids": list(matrix.work_ids),
        "estimator_config": matrix.estimator_config,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SCORES_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(matrix.scores, dtype="<f8").tobytes())


def load_scores(path: str | os.PathLike) -> AttributionMatrix:
    raw = Path(path).read_bytes()
    mlen = len(SCORES_MAGIC)
    if len(raw) < mlen + 4 or raw[:mlen] != SCORES_MAGIC:
        raise FormatError(f"{path} is not an ASCR1 score file")
    (hlen,) = struct.unpack_from("<I", raw, mlen)
    start = mlen + 4
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    t, n = header["target_count"], header["n"]
    body = np.frombuffer(raw[start + hlen:], dtype="<f8")
    if body.size != t * n:
        raise FormatError(f"{path} holds {body.size} scores, header says {t * n}")
    return AttributionMatrix(
        scores=body.reshape(t, n).copy(),
        target_ids=tuple(header["target_ids"]),
        work_ids=tuple(header["work_ids"]),
        level=header["level"],
        sign_convention=header["sign_convention"],
        estimator_config=header.get("estimator_config", {}),
    )


def scores_to_csv(matrix: AttributionMatrix) -> str:
    lines = ["target_id,work_id,score"]
    for ti, tid in enumerate(matrix.target_ids):
        for wi, wid in enumerate(matrix.work_ids):
            lines.append(f"{tid},{wid},{float(matrix.scores[ti, wi])!r}")
    return "\n".join(lines) + "\n"
