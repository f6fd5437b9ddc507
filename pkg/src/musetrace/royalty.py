"""Royalty settlement: usage logs and attribution weights to integer cents.

The two-step model: a revenue pool is first allocated across generated
tracks pro rata by eligible stream counts, then each track's cents are split
between the platform and the rightsholders of the works that influenced the
track. Every split uses largest-remainder rounding over exact rational
arithmetic, so statements conserve each pool to the cent. Revenue that
cannot be assigned (no eligible streams, or a track without usable weights)
is reported on its own line, never absorbed silently.

Formats: the usage log is JSON-lines, one {track_id, timestamp (RFC 3339),
seconds_played} object per line. Statements export as CSV with the columns
period, pool_id, rightsholder_id, amount_cents, where the reserved ids
"__platform__" and "__unattributed__" label the non-rightsholder rows. The
JSON audit trail records every rounding step.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from pathlib import Path

from .errors import ConservationError, NegativeAmount

PLATFORM_ID = "__platform__"
UNATTRIBUTED_ID = "__unattributed__"

DEFAULT_MIN_SECONDS = 30.0


def _exact(value) -> Fraction:
    """Fraction from a float or string via its decimal text, so 0.3 means
    exactly 3/10 rather than the nearest binary float."""
    if isinstance(value, Fraction):
        return value
    try:
        return Fraction(str(value))
    except ValueError:
        return Fraction(value)


@dataclass(frozen=True)
class UsageEvent:
    track_id: str
    timestamp: str  # RFC 3339
    seconds_played: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.seconds_played) and self.seconds_played >= 0):
            raise ValueError(f"seconds_played must be finite and >= 0, got {self.seconds_played}")
        try:
            datetime.fromisoformat(self.timestamp.replace("Z", "+00:00"))
        except ValueError:
            raise ValueError(f"timestamp {self.timestamp!r} is not RFC 3339") from None


@dataclass(frozen=True)
class RevenuePool:
    pool_id: str
    source: str
    region: str | None
    period: str  # ISO month, e.g. "2026-01"
    amount_cents: int

    def __post_init__(self) -> None:
        if self.amount_cents < 0:
            raise NegativeAmount(f"pool {self.pool_id} has negative amount")


def read_usage_log(path: str | os.PathLike) -> list[UsageEvent]:
    """Load a JSON-lines usage log; blank lines are skipped."""
    events = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            events.append(UsageEvent(
                track_id=str(obj["track_id"]),
                timestamp=str(obj["timestamp"]),
                seconds_played=float(obj["seconds_played"]),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad usage event ({exc})") from None
    return events


def count_eligible_streams(events, min_seconds: float = DEFAULT_MIN_SECONDS) -> dict[str, int]:
    """Streams per track: plays of at least min_seconds count."""
    if min_seconds < 0:
        raise ValueError("min_seconds must be >= 0")
    counts: dict[str, int] = {}
    for ev in events:
        if ev.seconds_played >= min_seconds:
            counts[ev.track_id] = counts.get(ev.track_id, 0) + 1
    return counts


def build_pools(revenue_records, pool_config) -> list[RevenuePool]:
    """Group revenue records into one pool per configured bucket.

    `revenue_records` objects carry source, region (optional), period, and
    amount_cents. `pool_config` holds "sources" (required list) and
    "regions" (optional list; when omitted, region is ignored and each
    bucket covers all regions). A pool is emitted for every configured
    (source, region) pair crossed with every period seen in the records,
    zero-amount buckets included. Records naming an unconfigured source or
    region are rejected.
    """
    sources = list(pool_config["sources"])
    regions = pool_config.get("regions")
    records = []
    for rec in revenue_records:
        amount = int(rec["amount_cents"])
        if amount < 0:
            raise NegativeAmount(f"revenue record with amount {amount}")
        source, period = str(rec["source"]), str(rec["period"])
        region = rec.get("region")
        if source not in sources:
            raise ValueError(f"record names unconfigured source {source!r}")
        if regions is not None and region not in regions:
            raise ValueError(f"record names unconfigured region {region!r}")
        records.append((source, region if regions is not None else None, period, amount))

    periods = sorted({r[2] for r in records})
    pools = []
    for period in periods:
        for source in sources:
            for region in (regions if regions is not None else [None]):
                amount = sum(
                    a for s, g, p, a in records
                    if s == source and g == region and p == period
                )
                pool_id = f"{source}|{region if region is not None else '*'}|{period}"
                pools.append(RevenuePool(
                    pool_id=pool_id, source=source, region=region,
                    period=period, amount_cents=amount,
                ))
    return pools


def _largest_remainder(amount: int, shares: list[tuple[object, Fraction]], tie_rank) -> dict:
    """Apportion `amount` integer cents across parties with exact fractional
    shares summing to 1. Each party gets the floor of its exact target; the
    leftover cents go to the largest remainders, ties broken by tie_rank."""
    bases = {}
    remainders = {}
    for party, share in shares:
        target = amount * share
        bases[party] = int(target)  # floor: targets are non-negative
        remainders[party] = target - int(target)
    leftover = amount - sum(bases.values())
    order = sorted(shares, key=lambda ps: (-remainders[ps[0]], tie_rank(ps[0])))
    for party, _ in order[:leftover]:
        bases[party] += 1
    return bases


def pro_rata_allocation(pool_amount: int, counts: dict[str, int]) -> dict[str, int]:
    """Distribute a pool across tracks proportionally to stream counts.

    Largest-remainder rounding in exact integer arithmetic; leftover cents
    go to the largest fractional remainders, ties broken by ascending track
    id. A zero or empty count map yields an empty allocation (the caller
    reports the amount as unallocated). Allocations sum to the pool exactly.
    """
    if pool_amount < 0:
        raise NegativeAmount("pool_amount must be >= 0")
    for track, c in counts.items():
        if c < 0:
            raise ValueError(f"negative stream count for {track!r}")
    total = sum(counts.values())
    if total == 0:
        return {}
    bases = {}
    remainders = {}
    for track, c in counts.items():
        bases[track] = pool_amount * c // total
        remainders[track] = pool_amount * c % total
    leftover = pool_amount - sum(bases.values())
    for track in sorted(counts, key=lambda t: (-remainders[t], t))[:leftover]:
        bases[track] += 1
    return bases


def attribution_weights(scores, policy: dict | None = None, ids=None):
    """Turn one track's attribution scores into normalized payout weights.

    Negative scores are clipped to zero. `policy` may set "top_k" (zero all
    but the k best before normalizing) and "min_share" (zero weights below
    the floor after a first normalization, then renormalize). `ids` names
    each score's rightsholder; duplicate ids merge by summing their clipped
    scores. Returns a list of (id, weight) covering every id, or None when
    everything clips to zero (the unattributed marker).
    """
    policy = dict(policy or {})
    scores = [float(s) for s in scores]
    if ids is None:
        ids = [str(i) for i in range(len(scores))]
    ids = [str(i) for i in ids]
    if len(ids) != len(scores):
        raise ValueError("ids and scores must pair up")

    merged: dict[str, float] = {}
    for wid in ids:
        merged.setdefault(wid, 0.0)
    for wid, s in zip(ids, scores):
        if not math.isfinite(s):
            raise ValueError("scores must be finite")
        merged[wid] += max(s, 0.0) if policy.get("clip_negative", True) else s

    order = sorted(merged)
    clipped = {wid: max(merged[wid], 0.0) for wid in order}

    top_k = policy.get("top_k")
    if top_k is not None:
        keep = sorted(order, key=lambda w: (-clipped[w], w))[: int(top_k)]
        clipped = {wid: (clipped[wid] if wid in keep else 0.0) for wid in order}

    total = sum(clipped.values())
    if total <= 0.0:
        return None
    weights = {wid: clipped[wid] / total for wid in order}

    min_share = policy.get("min_share")
    if min_share is not None:
        weights = {wid: (w if w >= float(min_share) else 0.0) for wid, w in weights.items()}
        total = sum(weights.values())
        if total <= 0.0:
            return None
        weights = {wid: w / total for wid, w in weights.items()}

    return [(wid, weights[wid]) for wid in order]


@dataclass
class RoyaltyStatement:
    """One settlement: per-pool rows, aggregated rightsholder lines, and the
    audit trail of every rounding step. Conservation is checked at
    construction: lines + platform + unattributed equal the pool total."""

    period: str
    pool_breakdown: tuple[dict, ...]
    lines: tuple[tuple[str, int], ...]  # (rightsholder_id, cents), zero lines dropped
    platform_amount_cents: int
    unattributed_amount_cents: int
    pool_lines: tuple[tuple[str, str, str, int], ...]  # (period, pool_id, rightsholder_id, cents)
    audit: tuple[dict, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        pools_total = sum(p["amount_cents"] for p in self.pool_breakdown)
        paid = sum(c for _, c in self.lines)
        if paid + self.platform_amount_cents + self.unattributed_amount_cents != pools_total:
            raise ConservationError(
                f"lines {paid} + platform {self.platform_amount_cents} + "
                f"unattributed {self.unattributed_amount_cents} != pools {pools_total}"
            )

    def total_cents(self) -> int:
        return sum(p["amount_cents"] for p in self.pool_breakdown)


def settle(
    pools,
    stream_counts: dict[str, int],
    weights: dict[str, list | None],
    platform_cut: float,
) -> RoyaltyStatement:
    """Settle revenue pools into a royalty statement.

    Per pool the amount is allocated across tracks pro rata by stream count;
    per track one largest-remainder split covers the platform (share
    platform_cut, paid first on remainder ties) and the rightsholders
    (shares (1 - platform_cut) * weight, ties by ascending id). `weights`
    maps track ids to (rightsholder_id, weight) lists as produced by
    attribution_weights; a missing entry or None marks the track's revenue
    unattributed. Cents never vanish: the statement conserves every pool.
    """
    cut = _exact(platform_cut)
    if not 0 <= cut <= 1:
        raise ValueError("platform_cut must lie in [0, 1]")

    audit: list[dict] = []
    by_holder: dict[str, int] = {}
    platform_total = 0
    unattributed_total = 0
    pool_breakdown = []
    pool_lines: list[tuple[str, str, str, int]] = []

    for pool in pools:
        alloc = pro_rata_allocation(pool.amount_cents, stream_counts)
        audit.append({
            "step": "pro_rata",
            "pool_id": pool.pool_id,
            "amount_cents": pool.amount_cents,
            "counts": dict(sorted(stream_counts.items())),
            "allocation": dict(sorted(alloc.items())),
        })
        pool_platform = 0
        pool_unattributed = pool.amount_cents - sum(alloc.values())
        pool_holders: dict[str, int] = {}

        for track in sorted(alloc):
            cents = alloc[track]
            if cents == 0:
                continue
            entry = weights.get(track)
            if entry is None:
                pool_unattributed += cents
                audit.append({
                    "step": "unattributed_track",
                    "pool_id": pool.pool_id,
                    "track_id": track,
                    "amount_cents": cents,
                })
                continue
            holder_weights = [(str(wid), _exact(w)) for wid, w in entry]
            wsum = sum(w for _, w in holder_weights)
            if wsum == 0:
                pool_unattributed += cents
                continue
            shares: list[tuple[str, Fraction]] = [(PLATFORM_ID, cut)]
            shares += [(wid, (1 - cut) * w / wsum) for wid, w in holder_weights]
            split = _largest_remainder(
                cents, shares,
                tie_rank=lambda party: (0, "") if party == PLATFORM_ID else (1, party),
            )
            audit.append({
                "step": "track_split",
                "pool_id": pool.pool_id,
                "track_id": track,
                "amount_cents": cents,
                "platform_cut": str(cut),
                "split": dict(sorted(split.items())),
            })
            pool_platform += split.pop(PLATFORM_ID)
            for wid, c in split.items():
                if c:
                    pool_holders[wid] = pool_holders.get(wid, 0) + c

        for wid in sorted(pool_holders):
            pool_lines.append((pool.period, pool.pool_id, wid, pool_holders[wid]))
            by_holder[wid] = by_holder.get(wid, 0) + pool_holders[wid]
        if pool_platform:
            pool_lines.append((pool.period, pool.pool_id, PLATFORM_ID, pool_platform))
        if pool_unattributed:
            pool_lines.append((pool.period, pool.pool_id, UNATTRIBUTED_ID, pool_unattributed))
        platform_total += pool_platform
        unattributed_total += pool_unattributed
        pool_breakdown.append({
            "pool_id": pool.pool_id,
            "period": pool.period,
            "amount_cents": pool.amount_cents,
            "rightsholder_cents": sum(pool_holders.values()),
            "platform_cents": pool_platform,
            "unattributed_cents": pool_unattributed,
        })

    periods = sorted({p["period"] for p in pool_breakdown})
    return RoyaltyStatement(
        period=periods[0] if len(periods) == 1 else ",".join(periods),
        pool_breakdown=tuple(pool_breakdown),
        lines=tuple((wid, by_holder[wid]) for wid in sorted(by_holder) if by_holder[wid]),
        platform_amount_cents=platform_total,
        unattributed_amount_cents=unattributed_total,
        pool_lines=tuple(pool_lines),
        audit=tuple(audit),
    )


def statement_to_csv(statement: RoyaltyStatement) -> str:
    lines = ["period,pool_id,rightsholder_id,amount_cents"]
    for period, pool_id, wid, cents in statement.pool_lines:
        lines.append(f"{period},{pool_id},{wid},{cents}")
    return "\n".join(lines) + "\n"


def statement_audit_json(statement: RoyaltyStatement) -> str:
    doc = {
        "period": statement.period,
        "total_cents": statement.total_cents(),
        "platform_amount_cents": statement.platform_amount_cents,
        "unattributed_amount_cents": statement.unattributed_amount_cents,
        "lines": [{"rightsholder_id": w, "amount_cents": c} for w, c in statement.lines],
        "pool_breakdown": list(statement.pool_breakdown),
        "audit": list(statement.audit),
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
