import io
import json
import struct
from contextlib import redirect_stderr, redirect_stdout

import pytest

import musetrace as mt
from musetrace.cli import run

from conftest import smf, track, vlq


def _melody_bytes(base_pitch: int) -> bytes:
    events = b""
    for k in range(24):
        pitch = base_pitch + (k * 5) % 24
        vel = 40 + (k * 7) % 60
        events += vlq(0) + bytes([0x90, pitch, vel])
        events += vlq(120) + bytes([0x80, pitch, 0])
    return smf(0, [track(events + b"\x00\xff\x2f\x00")])


def _cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = run(argv)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    midi = root / "midi"
    midi.mkdir()
    for i, base in enumerate((40, 52, 64)):
        (midi / f"tune{i}.mid").write_bytes(_melody_bytes(base))
    usage = root / "usage.jsonl"
    rows = []
    for t in range(3):
        for p in range(2):
            rows.append(json.dumps({
                "track_id": f"gen-{t:03d}",
                "timestamp": f"2026-01-{10 + p:02d}T12:00:00Z",
                "seconds_played": 45.0,
            }))
    usage.write_text("\n".join(rows) + "\n", encoding="utf-8")

    cfg = {
        "seed": 3,
        "paths": {"midi_dir": str(midi), "work_dir": str(root / "work"),
                  "usage_log": str(usage)},
        "model": {"context_length": 16, "embed_dim": 8, "num_layers": 1,
                  "num_heads": 2, "hidden_dim": 16},
        "train": {"epochs": 2, "batch_size": 4},
        "generation": {"num_targets": 3, "prompt_len": 4, "segment_len": 4},
        "attribution": {"ensemble_size": 2, "projection_dim": 4},
        "evaluation": {"num_subsets": 4, "num_buckets": 2},
        "royalty": {
            "pool_sources": ["subscription"],
            "revenue": [{"source": "subscription", "period": "2026-01",
                         "amount_cents": 1000}],
        },
    }
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
    return {"root": root, "config": str(cfg_path), "work": root / "work"}


def test_usage_errors_exit_two(workspace):
    code, _, _ = _cli([])
    assert code == 2
    code, _, _ = _cli(["ingest", "--no-such-flag"])
    assert code == 2
    code, _, _ = _cli(["not-a-stage"])
    assert code == 2


def test_missing_config_exits_one_and_names_it():
    code, out, err = _cli(["ingest", "--config", "/nowhere/missing.json"])
    assert code == 1
    assert "/nowhere/missing.json" in err
    assert out == ""


def test_stage_order_is_enforced(workspace):
    code, _, err = _cli(["attribute", "--config", workspace["config"]])
    assert code == 1
    assert "corpus.arec" in err  # the missing artifact is named
    code, _, err = _cli(["ingest", "--config", workspace["config"]])
    assert code == 0
    code, _, err = _cli(["attribute", "--config", workspace["config"]])
    assert code == 1
    assert "base.ackp" in err


def test_stages_run_in_sequence(workspace):
    for stage, checks in [
        ("ingest", ("works", "corpus")),
        ("train", ("final_loss", "checkpoint")),
        ("generate", ("num_targets",)),
        ("attribute", ("ensemble_size", "scores_event")),
        ("evaluate-lds", ("mean_rho_event", "fraction")),
        ("evaluate-style", ("num_buckets",)),
        ("settle", ("total_cents", "conserved")),
    ]:
        code, out, err = _cli([stage, "--config", workspace["config"]])
        assert code == 0, f"{stage} failed: {err}"
        summary = json.loads(out)
        assert summary["stage"] == stage
        for key in checks:
            assert key in summary, f"{stage} summary lacks {key}"


def test_artifacts_land_in_the_work_dir(workspace):
    work = workspace["work"]
    for rel in ("corpus.arec", "checkpoints/base.ackp", "targets.json",
                "scores/event.ascr", "scores/segment.ascr",
                "reports/lds.json", "reports/style_buckets.csv",
                "settlement/statement.csv", "settlement/audit.json"):
        assert (work / rel).exists(), rel


def test_settlement_output_conserves(workspace):
    doc = json.loads((workspace["work"] / "settlement/audit.json").read_text())
    paid = sum(l["amount_cents"] for l in doc["lines"])
    assert (paid + doc["platform_amount_cents"]
            + doc["unattributed_amount_cents"]) == doc["total_cents"] == 1000


def test_lds_summary_echoes_the_subset_fraction(workspace):
    code, out, _ = _cli(["evaluate-lds", "--config", workspace["config"],
                         "--subset-fraction", "0.4", "--num-subsets", "3"])
    assert code == 0
    summary = json.loads(out)
    assert summary["fraction"] == 0.4
    assert summary["num_subsets"] == 3


def test_flag_overrides_reach_the_stage(workspace, tmp_path):
    work = tmp_path / "override-work"
    code, out, _ = _cli(["train", "--config", workspace["config"],
                         "--work-dir", str(work), "--epochs", "1"])
    assert code == 1  # fresh work dir: no corpus yet
    code, out, err = _cli(["ingest", "--config", workspace["config"],
                           "--work-dir", str(work)])
    assert code == 0, err
    code, out, _ = _cli(["train", "--config", workspace["config"],
                         "--work-dir", str(work), "--epochs", "1"])
    assert code == 0
    assert json.loads(out)["epochs"] == 1
    ckpt = mt.load_checkpoint(work / "checkpoints" / "base.ackp")
    assert ckpt.provenance["settings"]["epochs"] == 1


def test_unknown_config_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"modle": {}}), encoding="utf-8")
    code, _, err = _cli(["ingest", "--config", str(bad)])
    assert code == 1
    assert "modle" in err
