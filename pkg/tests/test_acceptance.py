"""Release gate: nine end-to-end checks covering the tokenizer, the exact
gradients, the retraining oracle, the scaled attribution benchmark, the
style trend, royalty conservation, the rank-correlation arithmetic, and
whole-pipeline determinism. Each check appends one pass/fail line to the
terminal summary."""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import musetrace as mt
from musetrace import derive_seed

import conftest
from conftest import TOY_MIDI, smf, track, vlq

DESK_SETTINGS = mt.TrainSettings(epochs=12, batch_size=8, learning_rate=1e-3)


def _desk_config(seed):
    return mt.ModelConfig(vocab_size=388, context_length=64, embed_dim=32,
                          num_layers=2, num_heads=2, hidden_dim=64, seed=seed)


def _toy_examples(windows_per_file: int):
    examples = []
    for path in sorted(TOY_MIDI.iterdir()):
        tokens = mt.tokenize(mt.parse_midi(path))
        for k, win in enumerate(mt.make_training_windows(tokens, 64)[:windows_per_file]):
            examples.append(mt.TrainingExample(tokens=win, work_id=f"{path.stem}:{k:03d}"))
    return examples


def _report(num, name, ok, detail):
    line = f"criterion {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# 1. tokenizer round trip
# ---------------------------------------------------------------------------

def test_criterion_1_tokenizer_round_trip():
    rng = np.random.default_rng(1001)
    t0 = time.time()
    worst_time = 0.0
    for _ in range(200):
        notes = []
        clock = 0.0
        busy_until = {}
        for _ in range(int(rng.integers(1, 50))):
            clock += float(rng.integers(0, 900)) / 1000.0
            pitch = int(rng.integers(0, 128))
            start = max(clock, busy_until.get(pitch, 0.0))
            dur = float(rng.integers(25, 900)) / 1000.0
            busy_until[pitch] = start + dur
            notes.append(mt.Note(pitch=pitch, velocity=int(rng.integers(1, 128)),
                                 start=start, end=start + dur))
        notes.sort(key=lambda n: (n.start, n.pitch))
        seq = mt.NoteSequence(notes=notes, duration=max(n.end for n in notes))

        back = mt.detokenize(mt.tokenize(seq))
        assert len(back.notes) == len(seq.notes)
        # both sides keyed on the emission grid so near-ties pair up
        key = lambda n: (math.floor(n.start * 100 + 0.5), n.pitch,
                         math.floor(n.end * 100 + 0.5))
        for a, b in zip(sorted(seq.notes, key=key), sorted(back.notes, key=key)):
            assert a.pitch == b.pitch
            assert abs(a.velocity - b.velocity) <= 3
            assert abs(a.start - b.start) <= 0.005 + 1e-9
            assert abs(a.end - b.end) <= 0.005 + 1e-9
            worst_time = max(worst_time, abs(a.start - b.start), abs(a.end - b.end))
    elapsed = time.time() - t0
    _report(1, "tokenizer round trip x200", elapsed < 10.0,
            f"worst timing error {worst_time * 1000:.2f}ms, {elapsed:.1f}s")
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_2_gradients_match_finite_differences():
    t0 = time.time()
    cfg = mt.ModelConfig(vocab_size=30, context_length=8, embed_dim=10,
                         num_layers=1, num_heads=2, hidden_dim=16,
                         seed=1002, precision="float64")
    rng = np.random.default_rng(1002)
    examples = [
        mt.TrainingExample(tokens=rng.integers(0, 30, size=8).astype(np.uint16),
                           work_id=f"w{i}")
        for i in range(5)
    ]
    model = mt.train(examples, cfg, mt.TrainSettings(epochs=3, batch_size=2,
                                                     learning_rate=2e-3))
    step = 1e-5
    worst = 0.0
    for ex in examples:
        context, events = ex.tokens[:3], ex.tokens[3:]
        grad = mt.per_example_gradient(model, context, events, output_fn="log_prob")
        for i in rng.choice(grad.size, 20, replace=False):
            up = model.params.copy(); up[i] += step
            dn = model.params.copy(); dn[i] -= step
            fd = (mt.sequence_log_likelihood(
                      mt.ModelCheckpoint(cfg, up, dict(model.provenance)), events, context)
                  - mt.sequence_log_likelihood(
                      mt.ModelCheckpoint(cfg, dn, dict(model.provenance)), events, context)
                  ) / (2 * step)
            rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8)
            worst = max(worst, rel)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    _report(2, "analytic vs central differences (100 coords)", ok,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 3. chain-rule identities
# ---------------------------------------------------------------------------

def test_criterion_3_chain_rule_identities(tiny_model):
    rng = np.random.default_rng(1003)
    worst_ll = 0.0

    corpus = [
        mt.TrainingExample(tokens=rng.integers(0, 60, size=12).astype(np.uint16),
                           work_id=f"w{i}")
        for i in range(8)
    ]
    cfg = tiny_model.config
    members = [
        mt.train(corpus, cfg, mt.TrainSettings(epochs=2, batch_size=4,
                                               learning_rate=1e-3),
                 subset_mask=[0, 1, 2, 4, 6, 7]),
    ]
    index = mt.fit_attribution_index(corpus, members, projection_dim=8)
    worst_score = 0.0

    for _ in range(20):
        prompt = rng.integers(0, 60, size=int(rng.integers(1, 6)))
        tokens = rng.integers(0, 60, size=int(rng.integers(2, 10)))
        target = mt.AttributionTarget("t", "segment", prompt, tokens)

        whole = mt.sequence_log_likelihood(tiny_model, tokens, prompt)
        parts = 0.0
        ctx = list(prompt)
        for tok in tokens:
            parts += float(np.log(mt.next_event_distribution(tiny_model, ctx)[tok]))
            ctx.append(int(tok))
        worst_ll = max(worst_ll, abs(whole - parts) / max(abs(whole), 1e-12))

        seg = mt.score_segment(index, target)
        summed = np.zeros_like(seg)
        for sub in target.event_subtargets():
            summed += mt.score_events(index, sub)
        denom = max(float(np.abs(seg).max()), 1e-12)
        worst_score = max(worst_score, float(np.abs(seg - summed).max()) / denom)

    ok = worst_ll <= 1e-9 and worst_score <= 1e-9
    _report(3, "log-lik and score decompositions x20", ok,
            f"worst rel err {worst_ll:.2e} / {worst_score:.2e}")
    assert worst_ll <= 1e-9
    assert worst_score <= 1e-9


# ---------------------------------------------------------------------------
# 4. exact retraining oracle
# ---------------------------------------------------------------------------

def test_criterion_4_exact_oracle_sanity():
    t0 = time.time()
    examples = _toy_examples(windows_per_file=2)  # 16 windows
    assert len(examples) == 16
    target0 = mt.AttributionTarget("t", "segment", examples[0].tokens[:16],
                                   examples[0].tokens[16:32])
    zero = mt.exact_influence(examples, frozenset(), target0,
                              _desk_config(1), DESK_SETTINGS)
    assert zero == 0.0

    negatives = 0
    for s in range(10):
        cfg = _desk_config(derive_seed(900, "seed", s))
        src = s % len(examples)
        target = mt.AttributionTarget(
            target_id=f"t{s}", kind="segment",
            prompt=examples[src].tokens[:16], tokens=examples[src].tokens[16:32])
        influence = mt.exact_influence(
            examples, frozenset({examples[src].work_id}), target, cfg,
            DESK_SETTINGS, cache={})
        negatives += influence < 0
    elapsed = time.time() - t0
    ok = negatives >= 7
    _report(4, "empty set zero; source removal hurts", ok,
            f"negative in {negatives}/10 seeds, {elapsed:.0f}s")
    assert negatives >= 7


# ---------------------------------------------------------------------------
# 5. scaled retraining benchmark
# ---------------------------------------------------------------------------

def test_criterion_5_scaled_lds_benchmark():
    t0 = time.time()
    SEED = 7
    examples = _toy_examples(windows_per_file=8)  # 64 windows
    assert len(examples) == 64
    n = len(examples)
    ids = [ex.work_id for ex in examples]

    base = mt.train(examples, _desk_config(derive_seed(SEED, "base-train")),
                    DESK_SETTINGS)
    assert base.params.size <= 200_000

    rng = np.random.default_rng(derive_seed(SEED, "target-prompts"))
    targets = []
    for t, src in enumerate(rng.choice(n, 20, replace=False)):
        prompt = examples[src].tokens[:16]
        tokens = mt.generate(base, prompt, 16,
                             mt.SamplingSettings(temperature=0.8,
                                                 seed=derive_seed(SEED, "generate", t)))
        targets.append(mt.AttributionTarget(target_id=f"g{t:02d}", kind="segment",
                                            prompt=prompt, tokens=tokens))

    members = []
    for k in range(10):
        mask = sorted(int(i) for i in np.random.default_rng(
            derive_seed(SEED, "member-subset", k)).choice(n, n // 2, replace=False))
        members.append(mt.train(
            examples, _desk_config(derive_seed(SEED, "member-train", k)),
            DESK_SETTINGS, subset_mask=mask))

    index = mt.fit_attribution_index(examples, members, projection_dim=32)
    event_matrix = mt.attribute_targets(index, targets, "event")
    segment_matrix = mt.attribute_targets(index, targets, "segment")
    random_matrix = mt.AttributionMatrix(
        scores=np.stack([
            mt.random_baseline_scores(n, derive_seed(SEED, "random-baseline", t.target_id))
            for t in targets]),
        target_ids=tuple(t.target_id for t in targets),
        work_ids=tuple(ids), level="random")

    plan = mt.make_subset_plan(ids, 40, 0.5, derive_seed(SEED, "lds-plan"))
    cache: dict = {}
    cfg = _desk_config(derive_seed(SEED, "base-train"))
    ev = mt.lds_evaluate(event_matrix, examples, plan, cfg, DESK_SETTINGS,
                         targets, cache=cache)
    sg = mt.lds_evaluate(segment_matrix, examples, plan, cfg, DESK_SETTINGS,
                         targets, cache=cache)
    rnd = mt.lds_evaluate(random_matrix, examples, plan, cfg, DESK_SETTINGS,
                          targets, cache=cache)
    elapsed = time.time() - t0

    ok = (ev["mean_rho"] > 0.1 and abs(rnd["mean_rho"]) < 0.1
          and ev["mean_rho"] > rnd["mean_rho"] and elapsed < 1800)
    _report(5, "retraining rank correlation at desk scale", ok,
            f"event rho {ev['mean_rho']:.3f}, segment rho {sg['mean_rho']:.3f} "
            f"(equal by linearity), random {rnd['mean_rho']:.3f}, "
            f"{len(targets)} targets, {elapsed:.0f}s")
    assert ev["mean_rho"] > 0.1
    assert abs(rnd["mean_rho"]) < 0.1
    assert ev["mean_rho"] > rnd["mean_rho"]
    assert elapsed < 1800


# ---------------------------------------------------------------------------
# 6. style-similarity trend
# ---------------------------------------------------------------------------

def _cluster_tokens(rng, lo_pitch, hi_pitch, vel_bins, shift_lo, shift_hi,
                    n_tokens=64):
    out = []
    bin_prev = -1
    while len(out) < n_tokens:
        b = int(rng.integers(vel_bins[0], vel_bins[1]))
        if b != bin_prev:
            out.append(356 + b)
            bin_prev = b
        p = int(rng.integers(lo_pitch, hi_pitch))
        out.append(p)
        out.append(256 + int(rng.integers(shift_lo, shift_hi)))
        out.append(128 + p)
        out.append(256 + int(rng.integers(shift_lo, shift_hi)))
    return np.array(out[:n_tokens], dtype=np.uint16)


def test_criterion_6_style_similarity_trend():
    t0 = time.time()
    settings = mt.TrainSettings(epochs=60, batch_size=8, learning_rate=1e-3)
    ok_seeds = 0
    per_seed = []
    for s in range(5):
        rng = np.random.default_rng(derive_seed(600, "cluster", s))
        examples = []
        for i in range(16):  # low, quiet, fast cluster
            examples.append(mt.TrainingExample(
                tokens=_cluster_tokens(rng, 30, 50, (4, 9), 1, 6),
                work_id=f"A{i:02d}"))
        for i in range(16):  # high, loud, slow cluster
            examples.append(mt.TrainingExample(
                tokens=_cluster_tokens(rng, 72, 92, (20, 28), 30, 60),
                work_id=f"B{i:02d}"))
        base = mt.train(examples, _desk_config(derive_seed(600, "base", s)),
                        settings)
        targets = []
        for t in range(6):
            src = t % 16  # prompts come from the first cluster
            tokens = mt.generate(base, examples[src].tokens[:24], 24,
                                 mt.SamplingSettings(temperature=0.5,
                                                     seed=derive_seed(600, "gen", s, t)))
            targets.append(mt.AttributionTarget(
                target_id=f"g{t}", kind="segment",
                prompt=examples[src].tokens[:24], tokens=tokens))
        members = []
        for k in range(4):
            mask = sorted(int(i) for i in np.random.default_rng(
                derive_seed(600, "msub", s, k)).choice(32, 16, replace=False))
            members.append(mt.train(
                examples, _desk_config(derive_seed(600, "mtrain", s, k)),
                settings, subset_mask=mask))
        index = mt.fit_attribution_index(examples, members, projection_dim=16)
        matrix = mt.attribute_targets(index, targets, "event")
        feats = [mt.style_features(ex.tokens) for ex in examples]
        tfeats = {t.target_id: mt.style_features(t.tokens) for t in targets}
        report = mt.style_similarity_by_rank(matrix, feats, tfeats, num_buckets=10)
        top, bottom = report["buckets"][0], report["buckets"][-1]
        wins = sum(
            1 for f in mt.FEATURE_NAMES
            if top["features"][f]["abs_diff_quartiles"][2]
            < bottom["features"][f]["abs_diff_quartiles"][2]
        )
        per_seed.append(wins)
        ok_seeds += wins >= 2
    elapsed = time.time() - t0
    ok = ok_seeds >= 4 and elapsed < 600
    _report(6, "top bucket more style-similar than bottom", ok,
            f"{ok_seeds}/5 seeds with >=2/3 features (wins {per_seed}), {elapsed:.0f}s")
    assert ok_seeds >= 4
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 7. royalty conservation
# ---------------------------------------------------------------------------

def test_criterion_7_settlement_conservation():
    statement = mt.settle(
        [mt.RevenuePool("subscription|*|2026-01", "subscription", None,
                        "2026-01", 10000)],
        {"t1": 3, "t2": 1, "t3": 1},
        {"t1": [("A", 0.75), ("B", 0.25)], "t2": [("A", 1.0)], "t3": None},
        platform_cut=0.3,
    )
    split = next(a for a in statement.audit
                 if a["step"] == "track_split" and a["track_id"] == "t1")
    assert split["split"]["A"] == 3150
    assert split["split"]["B"] == 1050

    rng = np.random.default_rng(1007)
    holders = [f"h{i}" for i in range(5)]
    checked = 0
    for _ in range(1000):
        pools = [
            mt.RevenuePool(f"s|*|2026-{m:02d}", "s", None, f"2026-{m:02d}",
                           int(rng.integers(0, 250_000)))
            for m in range(1, int(rng.integers(2, 5)))
        ]
        tracks = [f"t{i}" for i in range(int(rng.integers(1, 7)))]
        counts = {t: int(rng.integers(0, 60)) for t in tracks}
        weights = {}
        for t in tracks:
            if rng.random() < 0.15:
                weights[t] = None
            else:
                raw = rng.random(len(holders)) - 0.3  # some negatives clip away
                weights[t] = mt.attribution_weights(raw, ids=holders)
        cut = round(float(rng.random()), 3)
        statement = mt.settle(pools, counts, weights, cut)
        total = sum(p.amount_cents for p in pools)
        paid = sum(c for _, c in statement.lines)
        assert (paid + statement.platform_amount_cents
                + statement.unattributed_amount_cents) == total
        for p in statement.pool_breakdown:
            assert (p["rightsholder_cents"] + p["platform_cents"]
                    + p["unattributed_cents"]) == p["amount_cents"]
        checked += 1
    _report(7, "integer-cent conservation", True,
            f"{checked} randomized settlements plus the 3150/1050 hand split")
    assert checked == 1000


# ---------------------------------------------------------------------------
# 8. rank correlation oracle
# ---------------------------------------------------------------------------

def _reference_spearman(xs, ys):
    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        out = [0.0] * len(vals)
        i = 0
        while i < len(vals):
            j = i
            while j + 1 < len(vals) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            for k in range(i, j + 1):
                out[order[k]] = (i + j) / 2 + 1
            i = j + 1
        return out

    rx, ry = ranks(list(xs)), ranks(list(ys))
    mx, my = math.fsum(rx) / len(rx), math.fsum(ry) / len(ry)
    num = math.fsum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(math.fsum((a - mx) ** 2 for a in rx)
                    * math.fsum((b - my) ** 2 for b in ry))
    return num / den if den else math.nan


def test_criterion_8_spearman_matches_brute_force():
    rng = np.random.default_rng(1008)
    worst = 0.0
    compared = 0
    for _ in range(100):
        n = int(rng.integers(3, 21))
        x = rng.integers(0, 7, size=n).astype(float)  # heavy ties
        y = rng.integers(0, 7, size=n).astype(float)
        ref = _reference_spearman(x, y)
        ours = mt.spearman_rank_correlation(x, y)
        if math.isnan(ref):
            assert math.isnan(ours)
            continue
        worst = max(worst, abs(ours - ref))
        compared += 1
    ok = worst <= 1e-12
    _report(8, "rank correlation vs brute force x100", ok,
            f"max abs diff {worst:.2e} over {compared} defined cases")
    assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 9. whole-pipeline determinism
# ---------------------------------------------------------------------------

def _melody_bytes(base_pitch: int) -> bytes:
    events = b""
    for k in range(24):
        pitch = base_pitch + (k * 5) % 24
        vel = 40 + (k * 7) % 60
        events += vlq(0) + bytes([0x90, pitch, vel])
        events += vlq(120) + bytes([0x80, pitch, 0])
    return smf(0, [track(events + b"\x00\xff\x2f\x00")])


def test_criterion_9_pipeline_determinism(tmp_path):
    t0 = time.time()
    midi = tmp_path / "midi"
    midi.mkdir()
    for i, base in enumerate((40, 52, 64)):
        (midi / f"tune{i}.mid").write_bytes(_melody_bytes(base))
    usage = tmp_path / "usage.jsonl"
    usage.write_text("\n".join(
        json.dumps({"track_id": f"gen-{t:03d}",
                    "timestamp": "2026-01-10T12:00:00Z",
                    "seconds_played": 45.0})
        for t in range(3)) + "\n", encoding="utf-8")
    cfg = {
        "seed": 11,
        "paths": {"midi_dir": str(midi), "usage_log": str(usage)},
        "model": {"context_length": 16, "embed_dim": 8, "num_layers": 1,
                  "num_heads": 2, "hidden_dim": 16},
        "train": {"epochs": 2, "batch_size": 4},
        "generation": {"num_targets": 3, "prompt_len": 4, "segment_len": 4},
        "attribution": {"ensemble_size": 2, "projection_dim": 4},
        "evaluation": {"num_subsets": 4, "num_buckets": 2},
        "royalty": {"pool_sources": ["subscription"],
                    "revenue": [{"source": "subscription", "period": "2026-01",
                                 "amount_cents": 1000}]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")

    env = dict(os.environ, OPENBLAS_NUM_THREADS="1")
    for run_dir in ("run-a", "run-b"):
        proc = subprocess.run(
            [sys.executable, "-m", "musetrace.cli", "pipeline",
             "--config", str(cfg_path), "--work-dir", str(tmp_path / run_dir)],
            capture_output=True, text=True, env=env,
            cwd=Path(__file__).resolve().parent.parent)
        assert proc.returncode == 0, proc.stderr

    compared = []
    for rel in ("checkpoints/base.ackp",
                "checkpoints/members/member-00.ackp",
                "checkpoints/members/member-01.ackp",
                "scores/event.ascr", "scores/segment.ascr",
                "settlement/statement.csv"):
        a = (tmp_path / "run-a" / rel).read_bytes()
        b = (tmp_path / "run-b" / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"
        compared.append(rel)
    elapsed = time.time() - t0
    _report(9, "repeated pipeline runs byte-identical", True,
            f"{len(compared)} artifacts compared, {elapsed:.0f}s")
