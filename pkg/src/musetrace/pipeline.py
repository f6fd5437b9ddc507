"""Pipeline stages over on-disk artifacts.

Each stage reads its inputs from the work directory, writes its outputs in
the documented formats, and returns a JSON-ready summary. All randomness
derives from the single config seed through per-stage label hashing, so a
rerun with the same config and inputs reproduces every artifact byte for
byte. Relative paths resolve against the current working directory.
"""

from __future__ import annotations

import copy
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._seeds import derive_seed
from .attribution import (
    AttributionTarget,
    attribute_targets,
    fit_attribution_index,
    load_scores,
    random_baseline_scores,
    save_scores,
    scores_to_csv,
    AttributionMatrix,
)
from .errors import EmptyInput, MissingArtifact
from .evaluation import (
    FEATURE_NAMES,
    lds_evaluate,
    make_subset_plan,
    style_features,
    style_similarity_by_rank,
)
from .midi import (
    Corpus,
    WindowRecord,
    make_training_windows,
    parse_midi,
    read_corpus,
    tokenize,
    write_corpus,
)
from .model import (
    ModelConfig,
    SamplingSettings,
    TrainingExample,
    TrainSettings,
    generate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .royalty import (
    attribution_weights,
    build_pools,
    count_eligible_streams,
    read_usage_log,
    settle,
    statement_audit_json,
    statement_to_csv,
)

DEFAULTS: dict = {
    "seed": 7,
    "jobs": 1,
    "paths": {
        "midi_dir": "data/toy_midi",
        "work_dir": "runs/pipeline",
        "usage_log": "data/toy_usage.jsonl",
    },
    "ingest": {
        "apply_sustain": False,
        "always_emit_velocity": False,
    },
    "model": {
        "vocab_size": 388,
        "context_length": 64,
        "embed_dim": 32,
        "num_layers": 2,
        "num_heads": 2,
        "hidden_dim": 64,
        "precision": "float32",
    },
    "train": {
        "epochs": 12,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
    },
    "generation": {
        "num_targets": 20,
        "prompt_len": 16,
        "segment_len": 16,
        "temperature": 0.8,
        "top_k": None,
    },
    "attribution": {
        "ensemble_size": 10,
        "subset_fraction": 0.5,
        "projection_dim": 32,
        "ridge": None,
        "output_fn": "logit_margin",
        "restrict_to_subset": False,
    },
    "evaluation": {
        "num_subsets": 40,
        "subset_fraction": 0.5,
        "num_buckets": 10,
    },
    "royalty": {
        "platform_cut": 0.3,
        "min_seconds": 30.0,
        "weight_policy": {"clip_negative": True, "top_k": None, "min_share": None},
        "pool_sources": ["subscription", "advertisement"],
        "pool_regions": None,
        "revenue": [],
    },
    "catalog": {},
}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and here not in (
            "catalog", "royalty.weight_policy"
        ):
            if not isinstance(value, dict):
                raise ValueError(f"config key {here!r} must be an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Defaults, overlaid by the JSON config file, overlaid by overrides
    given as dotted keys (flags win over the file)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
    for dotted, value in (overrides or {}).items():
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return cfg


class ArtifactPaths:
    """Where each stage's outputs live under the work directory."""

    def __init__(self, cfg: dict):
        work = Path(cfg["paths"]["work_dir"])
        self.work_dir = work
        self.corpus = work / "corpus.arec"
        self.base_checkpoint = work / "checkpoints" / "base.ackp"
        self.member_dir = work / "checkpoints" / "members"
        self.targets = work / "targets.json"
        self.scores_event = work / "scores" / "event.ascr"
        self.scores_segment = work / "scores" / "segment.ascr"
        self.scores_event_csv = work / "scores" / "event.csv"
        self.scores_segment_csv = work / "scores" / "segment.csv"
        self.lds_report = work / "reports" / "lds.json"
        self.style_report = work / "reports" / "style.json"
        self.style_csv = work / "reports" / "style_buckets.csv"
        self.statement_csv = work / "settlement" / "statement.csv"
        self.audit_json = work / "settlement" / "audit.json"

    def member_checkpoint(self, k: int) -> Path:
        return self.member_dir / f"member-{k:02d}.ackp"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, hint)
    return path


def _sanitize(obj):
    """Make a structure strict-JSON safe: numpy scalars to Python numbers,
    NaN and infinities to None."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_sanitize(obj), sort_keys=True, indent=1, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _model_config(cfg: dict, seed: int) -> ModelConfig:
    return ModelConfig(seed=seed, **cfg["model"])


def _train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(**cfg["train"])


def _base_seed(cfg: dict) -> int:
    return derive_seed(cfg["seed"], "base-train")


def _examples(corpus: Corpus) -> list[TrainingExample]:
    return [
        TrainingExample(tokens=corpus.windows[i], work_id=corpus.records[i].work_id)
        for i in range(corpus.n)
    ]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_ingest(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    midi_dir = Path(cfg["paths"]["midi_dir"])
    _require(midi_dir, "directory of .mid files to ingest")
    files = sorted(p for p in midi_dir.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not files:
        raise MissingArtifact(midi_dir, "no .mid files to ingest")

    window_len = cfg["model"]["context_length"]
    windows = []
    records = []
    skipped = []
    warning_totals: dict[str, int] = {}
    for path in files:
        seq = parse_midi(path, apply_sustain=cfg["ingest"]["apply_sustain"])
        for key, count in seq.warnings.items():
            warning_totals[key] = warning_totals.get(key, 0) + count
        tokens = tokenize(
            seq, always_emit_velocity=cfg["ingest"]["always_emit_velocity"]
        )
        try:
            file_windows = make_training_windows(tokens, window_len)
        except EmptyInput:
            skipped.append(path.name)
            continue
        stem = path.stem
        holder = cfg["catalog"].get(stem, f"rh-{stem}")
        for k, win in enumerate(file_windows):
            windows.append(win)
            records.append(WindowRecord(
                work_id=f"{stem}:{k:03d}",
                rightsholder_id=holder,
                source=path.name,
                offset=k * window_len,
            ))
    if not windows:
        raise MissingArtifact(midi_dir, "every file was shorter than one window")

    corpus = Corpus(windows=np.stack(windows), records=tuple(records))
    paths.corpus.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, paths.corpus)
    return {
        "stage": "ingest",
        "files": len(files),
        "works": corpus.n,
        "window_len": window_len,
        "skipped_short": skipped,
        "parse_warnings": warning_totals,
        "corpus": str(paths.corpus),
    }


def run_train(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    config = _model_config(cfg, _base_seed(cfg))
    ckpt = train(_examples(corpus), config, _train_settings(cfg))
    paths.base_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, paths.base_checkpoint)
    return {
        "stage": "train",
        "works": corpus.n,
        "param_count": ckpt.param_count,
        "epochs": cfg["train"]["epochs"],
        "final_loss": ckpt.provenance["final_loss"],
        "checkpoint": str(paths.base_checkpoint),
    }


def run_generate(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    ckpt = load_checkpoint(_require(paths.base_checkpoint, "run the train stage first"))
    gen = cfg["generation"]
    num = gen["num_targets"]
    rng = np.random.default_rng(derive_seed(cfg["seed"], "target-prompts"))
    sources = rng.choice(corpus.n, size=num, replace=num > corpus.n)

    targets = []
    for t, src in enumerate(sources):
        prompt = corpus.windows[src][: gen["prompt_len"]]
        sampling = SamplingSettings(
            temperature=gen["temperature"],
            top_k=gen["top_k"],
            seed=derive_seed(cfg["seed"], "generate", t),
        )
        tokens = generate(ckpt, prompt, gen["segment_len"], sampling)
        targets.append({
            "target_id": f"gen-{t:03d}",
            "prompt": [int(x) for x in prompt],
            "tokens": [int(x) for x in tokens],
            "source_work": corpus.records[src].work_id,
        })
    write_json(paths.targets, {"targets": targets})
    return {
        "stage": "generate",
        "num_targets": num,
        "prompt_len": gen["prompt_len"],
        "segment_len": gen["segment_len"],
        "targets": str(paths.targets),
    }


def load_targets(path: Path) -> list[AttributionTarget]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for entry in doc["targets"]:
        tokens = entry["tokens"]
        out.append(AttributionTarget(
            target_id=entry["target_id"],
            kind="event" if len(tokens) == 1 else "segment",
            prompt=entry["prompt"],
            tokens=tokens,
        ))
    return out


def run_attribute(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    base = load_checkpoint(_require(paths.base_checkpoint, "run the train stage first"))
    targets = load_targets(_require(paths.targets, "run the generate stage first"))
    att = cfg["attribution"]
    examples = _examples(corpus)
    settings = _train_settings(cfg)

    k_members = att["ensemble_size"]
    subset_size = round(att["subset_fraction"] * corpus.n)

    def train_member(k: int):
        subset_rng = np.random.default_rng(derive_seed(cfg["seed"], "member-subset", k))
        mask = sorted(int(i) for i in subset_rng.choice(corpus.n, subset_size, replace=False))
        config = replace(base.config, seed=derive_seed(cfg["seed"], "member-train", k))
        return train(examples, config, settings, subset_mask=mask)

    jobs = max(1, int(cfg["jobs"]))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            ensemble = list(pool.map(train_member, range(k_members)))
    else:
        ensemble = [train_member(k) for k in range(k_members)]

    paths.member_dir.mkdir(parents=True, exist_ok=True)
    for k, member in enumerate(ensemble):
        save_checkpoint(member, paths.member_checkpoint(k))

    index = fit_attribution_index(
        examples,
        ensemble,
        projection_dim=att["projection_dim"],
        ridge=att["ridge"],
        output_fn=att["output_fn"],
        restrict_to_subset=att["restrict_to_subset"],
    )
    event_matrix = attribute_targets(index, targets, "event")
    segment_matrix = attribute_targets(index, targets, "segment")

    paths.scores_event.parent.mkdir(parents=True, exist_ok=True)
    save_scores(event_matrix, paths.scores_event)
    save_scores(segment_matrix, paths.scores_segment)
    paths.scores_event_csv.write_text(scores_to_csv(event_matrix), encoding="utf-8")
    paths.scores_segment_csv.write_text(scores_to_csv(segment_matrix), encoding="utf-8")
    return {
        "stage": "attribute",
        "ensemble_size": k_members,
        "subset_fraction": att["subset_fraction"],
        "projection_dim": att["projection_dim"],
        "ridge": att["ridge"] if att["ridge"] is not None else "trace-rule",
        "member_ridges": [m.ridge for m in index.members],
        "output_fn": att["output_fn"],
        "works": corpus.n,
        "targets": len(targets),
        "scores_event": str(paths.scores_event),
        "scores_segment": str(paths.scores_segment),
    }


def run_evaluate_lds(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    targets = load_targets(_require(paths.targets, "run the generate stage first"))
    event_matrix = load_scores(_require(paths.scores_event, "run the attribute stage first"))
    segment_matrix = load_scores(_require(paths.scores_segment, "run the attribute stage first"))
    examples = _examples(corpus)
    config = _model_config(cfg, _base_seed(cfg))
    settings = _train_settings(cfg)
    ev = cfg["evaluation"]

    plan = make_subset_plan(
        [ex.work_id for ex in examples],
        ev["num_subsets"],
        ev["subset_fraction"],
        derive_seed(cfg["seed"], "lds-plan"),
    )
    random_matrix = AttributionMatrix(
        scores=np.stack([
            random_baseline_scores(corpus.n, derive_seed(cfg["seed"], "random-baseline", t.target_id))
            for t in targets
        ]),
        target_ids=tuple(t.target_id for t in targets),
        work_ids=tuple(ex.work_id for ex in examples),
        level="random",
    )

    cache: dict = {}
    report = {
        "fraction": ev["subset_fraction"],
        "num_subsets": ev["num_subsets"],
        "event": lds_evaluate(event_matrix, examples, plan, config, settings, targets, cache=cache),
        "segment": lds_evaluate(segment_matrix, examples, plan, config, settings, targets, cache=cache),
        "random": lds_evaluate(random_matrix, examples, plan, config, settings, targets, cache=cache),
    }
    write_json(paths.lds_report, report)
    return {
        "stage": "evaluate-lds",
        "fraction": ev["subset_fraction"],
        "num_subsets": ev["num_subsets"],
        "targets": len(targets),
        "mean_rho_event": report["event"]["mean_rho"],
        "mean_rho_segment": report["segment"]["mean_rho"],
        "mean_rho_random": report["random"]["mean_rho"],
        "report": str(paths.lds_report),
    }


def run_evaluate_style(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    targets = load_targets(_require(paths.targets, "run the generate stage first"))
    event_matrix = load_scores(_require(paths.scores_event, "run the attribute stage first"))

    work_feats = [style_features(corpus.windows[i]) for i in range(corpus.n)]
    target_feats = {t.target_id: style_features(t.tokens) for t in targets}
    report = style_similarity_by_rank(
        event_matrix, work_feats, target_feats, cfg["evaluation"]["num_buckets"]
    )
    write_json(paths.style_report, report)

    lines = ["bucket,rank_lo,rank_hi,feature,pairs,pearson,q0,q1,q2,q3,q4"]
    for bucket in report["buckets"]:
        lo, hi = bucket["rank_range"]
        for name in FEATURE_NAMES:
            entry = bucket["features"][name]
            rho = entry["pearson"]
            qs = entry["abs_diff_quartiles"] or ["", "", "", "", ""]
            lines.append(
                f"{bucket['bucket']},{lo},{hi},{name},{entry['pairs']},"
                f"{'' if rho is None else repr(rho)},"
                + ",".join(str(q) for q in qs)
            )
    paths.style_csv.parent.mkdir(parents=True, exist_ok=True)
    paths.style_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def bucket_rho(b: int, name: str):
        return report["buckets"][b]["features"][name]["pearson"]

    return {
        "stage": "evaluate-style",
        "num_buckets": report["num_buckets"],
        "top_bucket": {n: bucket_rho(0, n) for n in FEATURE_NAMES},
        "bottom_bucket": {n: bucket_rho(report["num_buckets"] - 1, n) for n in FEATURE_NAMES},
        "report": str(paths.style_report),
        "table": str(paths.style_csv),
    }


def run_settle(cfg: dict) -> dict:
    paths = ArtifactPaths(cfg)
    corpus = read_corpus(_require(paths.corpus, "run the ingest stage first"))
    event_matrix = load_scores(_require(paths.scores_event, "run the attribute stage first"))
    usage_path = _require(Path(cfg["paths"]["usage_log"]), "usage log (JSON lines)")
    roy = cfg["royalty"]

    events = read_usage_log(usage_path)
    counts = count_eligible_streams(events, roy["min_seconds"])
    holders = [r.rightsholder_id for r in corpus.records]

    weights = {}
    for track in sorted(counts):
        if track in event_matrix.target_ids:
            row = event_matrix.row(track)
            weights[track] = attribution_weights(row, roy["weight_policy"], ids=holders)
        # tracks without scores stay absent and settle as unattributed

    pools = build_pools(
        roy["revenue"],
        {"sources": roy["pool_sources"], "regions": roy["pool_regions"]},
    )
    statement = settle(pools, counts, weights, roy["platform_cut"])

    paths.statement_csv.parent.mkdir(parents=True, exist_ok=True)
    paths.statement_csv.write_text(statement_to_csv(statement), encoding="utf-8")
    paths.audit_json.write_text(statement_audit_json(statement), encoding="utf-8")
    return {
        "stage": "settle",
        "period": statement.period,
        "pools": len(statement.pool_breakdown),
        "total_cents": statement.total_cents(),
        "rightsholder_cents": sum(c for _, c in statement.lines),
        "platform_cents": statement.platform_amount_cents,
        "unattributed_cents": statement.unattributed_amount_cents,
        "conserved": True,  # RoyaltyStatement construction verifies this
        "statement": str(paths.statement_csv),
        "audit": str(paths.audit_json),
    }


def run_pipeline(cfg: dict) -> dict:
    stages = [
        run_ingest, run_train, run_generate, run_attribute,
        run_evaluate_lds, run_evaluate_style, run_settle,
    ]
    summary = {"stage": "pipeline", "stages": []}
    for stage in stages:
        summary["stages"].append(stage(cfg))
    return summary


STAGES = {
    "ingest": run_ingest,
    "train": run_train,
    "generate": run_generate,
    "attribute": run_attribute,
    "evaluate-lds": run_evaluate_lds,
    "evaluate-style": run_evaluate_style,
    "settle": run_settle,
    "pipeline": run_pipeline,
}
