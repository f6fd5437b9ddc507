import struct
from pathlib import Path

import numpy as np
import pytest

import musetrace as mt

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
TOY_MIDI = DATA_DIR / "toy_midi"

# one line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# tiny SMF byte assembly, spelled out delta by delta
# ---------------------------------------------------------------------------

def vlq(value: int) -> bytes:
    chunks = [value & 0x7F]
    value >>= 7
    while value:
        chunks.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(chunks))


def track(event_bytes: bytes) -> bytes:
    return b"MTrk" + struct.pack(">I", len(event_bytes)) + event_bytes


def smf(fmt: int, tracks: list[bytes], division: int = 480) -> bytes:
    head = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    return head + b"".join(tracks)


END = b"\x00\xff\x2f\x00"  # delta 0 + end-of-track meta


def tempo_meta(us_per_quarter: int, delta: int = 0) -> bytes:
    return vlq(delta) + b"\xff\x51\x03" + us_per_quarter.to_bytes(3, "big")


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_corpus():
    """64 works: the first 8 windows of each bundled toy file."""
    windows, records = [], []
    for path in sorted(TOY_MIDI.iterdir()):
        tokens = mt.tokenize(mt.parse_midi(path))
        for k, win in enumerate(mt.make_training_windows(tokens, 64)[:8]):
            windows.append(win)
            records.append(mt.WindowRecord(
                work_id=f"{path.stem}:{k:03d}",
                rightsholder_id=f"rh-{path.stem}",
                source=path.name,
                offset=k * 64,
            ))
    return mt.Corpus(windows=np.stack(windows), records=tuple(records))


@pytest.fixture(scope="session")
def tiny_model():
    """A very small trained checkpoint shared by tests that only need some
    plausible non-random parameters."""
    rng = np.random.default_rng(11)
    examples = [
        mt.TrainingExample(tokens=rng.integers(0, 60, size=12).astype(np.uint16),
                           work_id=f"w{i}")
        for i in range(8)
    ]
    config = mt.ModelConfig(vocab_size=60, context_length=12, embed_dim=12,
                            num_layers=1, num_heads=2, hidden_dim=24, seed=5)
    return mt.train(examples, config,
                    mt.TrainSettings(epochs=3, batch_size=4, learning_rate=1e-3))
