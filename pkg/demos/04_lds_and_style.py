"""Measure estimator quality two ways on a compact benchmark.

First the retraining rank correlation: for a set of deletion subsets,
compare the estimator's predicted effect (sum of scores over the subset)
with the measured change from actually retraining. Then the style view:
bucket works by attribution rank and check that top-ranked works sound
more like the generations than bottom-ranked ones.

Takes around a minute; the full-size run lives in `musetrace pipeline`.
"""

import time
from pathlib import Path

import numpy as np

import musetrace as mt
from musetrace import derive_seed

TOY_MIDI = Path(__file__).resolve().parent.parent / "data" / "toy_midi"
SEED = 7


def main() -> None:
    t0 = time.time()
    examples = []
    for path in sorted(TOY_MIDI.iterdir()):
        tokens = mt.tokenize(mt.parse_midi(path))
        for k, win in enumerate(mt.make_training_windows(tokens, 64)[:4]):
            examples.append(mt.TrainingExample(tokens=win, work_id=f"{path.stem}:{k}"))
    n = len(examples)
    ids = [ex.work_id for ex in examples]
    config = mt.ModelConfig(vocab_size=388, context_length=64, embed_dim=32,
                            num_layers=2, num_heads=2, hidden_dim=64,
                            seed=derive_seed(SEED, "base-train"))
    settings = mt.TrainSettings(epochs=12, batch_size=8, learning_rate=1e-3)
    base = mt.train(examples, config, settings)

    rng = np.random.default_rng(derive_seed(SEED, "target-prompts"))
    targets = []
    for t, src in enumerate(rng.choice(n, 8, replace=False)):
        prompt = examples[src].tokens[:16]
        tokens = mt.generate(base, prompt, 16,
                             mt.SamplingSettings(temperature=0.8,
                                                 seed=derive_seed(SEED, "generate", t)))
        targets.append(mt.AttributionTarget(f"g{t}", "segment", prompt, tokens))

    members = [
        mt.train(examples,
                 mt.ModelConfig(**{**config.__dict__,
                                   "seed": derive_seed(SEED, "member-train", k)}),
                 settings,
                 subset_mask=sorted(int(i) for i in np.random.default_rng(
                     derive_seed(SEED, "member-subset", k)).choice(n, n // 2,
                                                                   replace=False)))
        for k in range(6)
    ]
    index = mt.fit_attribution_index(examples, members, projection_dim=16)
    matrix = mt.attribute_targets(index, targets, "event")
    print(f"setup: {n} works, 6-model ensemble, 8 targets "
          f"({time.time() - t0:.0f}s)")

    plan = mt.make_subset_plan(ids, 16, 0.5, derive_seed(SEED, "lds-plan"))
    cache: dict = {}
    report = mt.lds_evaluate(matrix, examples, plan, config, settings, targets,
                             cache=cache)
    random_matrix = mt.AttributionMatrix(
        scores=np.stack([mt.random_baseline_scores(n, derive_seed(SEED, "rb", t))
                         for t in range(len(targets))]),
        target_ids=matrix.target_ids, work_ids=matrix.work_ids, level="random")
    random_report = mt.lds_evaluate(random_matrix, examples, plan, config,
                                    settings, targets, cache=cache)
    print(f"\nretraining rank correlation over {len(plan.subsets)} deletion subsets:")
    print(f"  estimator mean rho {report['mean_rho']:+.3f}")
    print(f"  random    mean rho {random_report['mean_rho']:+.3f}")

    feats = [mt.style_features(ex.tokens) for ex in examples]
    tfeats = {t.target_id: mt.style_features(t.tokens) for t in targets}
    style = mt.style_similarity_by_rank(matrix, feats, tfeats, num_buckets=4)
    print("\nmedian |feature difference| by attribution-rank bucket "
          "(smaller = more similar):")
    print(f"  {'bucket':<10}" + "".join(f"{name:>12}" for name in mt.FEATURE_NAMES))
    for bucket in style["buckets"]:
        row = f"  ranks {bucket['rank_range'][0]:>2}-{bucket['rank_range'][1]:<2}  "
        for name in mt.FEATURE_NAMES:
            quartiles = bucket["features"][name]["abs_diff_quartiles"]
            row += f"{quartiles[2]:>12.2f}" if quartiles else f"{'-':>12}"
        print(row)
    print(f"\ntotal {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
