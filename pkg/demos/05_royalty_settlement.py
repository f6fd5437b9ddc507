"""Turn a usage log and attribution scores into a royalty statement.

Follows the money end to end: eligible streams per generated track, revenue
pools per source and month, pro-rata allocation across tracks, then a
per-track split between the platform and the rightsholders the attribution
scores point at. Every step is integer cents and the statement conserves
each pool exactly.
"""

from pathlib import Path

import musetrace as mt

USAGE = Path(__file__).resolve().parent.parent / "data" / "toy_usage.jsonl"


def main() -> None:
    events = mt.read_usage_log(USAGE)
    counts = mt.count_eligible_streams(events, min_seconds=30.0)
    print(f"{len(events)} usage events -> eligible streams for "
          f"{len(counts)} tracks (plays under 30s dropped)")

    pools = mt.build_pools(
        [
            {"source": "subscription", "period": "2024-01", "amount_cents": 88000},
            {"source": "advertisement", "period": "2024-01", "amount_cents": 12000},
        ],
        {"sources": ["subscription", "advertisement"]},
    )
    for pool in pools:
        print(f"pool {pool.pool_id}: {pool.amount_cents} cents")

    # attribution scores for three tracks; negatives clip to zero and one
    # track stays unattributed on purpose
    holders = ["rh-style0", "rh-style1", "rh-style2"]
    weights = {
        "gen-000": mt.attribution_weights([0.62, 0.25, -0.10], ids=holders),
        "gen-001": mt.attribution_weights([0.05, 0.05, 0.40], ids=holders),
        "gen-002": None,
    }
    track_counts = {t: counts[t] for t in weights if t in counts}
    print("\nweights per track:")
    for track, entry in weights.items():
        if entry is None:
            print(f"  {track}: unattributed")
        else:
            print(f"  {track}: " + ", ".join(f"{w:.2f} {h}" for h, w in entry if w))

    statement = mt.settle(pools, track_counts, weights, platform_cut=0.3)
    print(f"\nstatement for {statement.period}:")
    for holder, cents in statement.lines:
        print(f"  {holder:<12} {cents:>7} cents")
    print(f"  {'platform':<12} {statement.platform_amount_cents:>7} cents")
    print(f"  {'unattributed':<12} {statement.unattributed_amount_cents:>7} cents")
    total = statement.total_cents()
    paid = sum(c for _, c in statement.lines)
    print(f"conservation: {paid} + {statement.platform_amount_cents} + "
          f"{statement.unattributed_amount_cents} = {total}")

    print("\nstatement CSV:")
    print(mt.statement_to_csv(statement), end="")


if __name__ == "__main__":
    main()
