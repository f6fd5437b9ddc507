#!/usr/bin/env python3
"""Regenerate the committed toy dataset under data/.

Eight short MIDI files, one synthetic style each. A style fixes the pitch
register, the rhythm cycle, the velocity band, and a motif; inside a file
the line drifts (pitch walk, velocity swell, occasional rests and chords)
so no two windows of the same file repeat. Attribution then has both
coarse structure (styles) and fine structure (windows) to rank.
Deterministic, no RNG; rerunning reproduces the same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
MIDI_DIR = ROOT / "data" / "toy_midi"
USAGE_PATH = ROOT / "data" / "toy_usage.jsonl"

DIVISION = 500  # ticks per quarter; at 120 BPM one tick is one millisecond
NOTES_PER_FILE = 130

MOTIFS = [
    [0, 4, 7, 12, 7, 4],
    [0, 3, 7, 10, 7, 3],
    [0, 2, 4, 5, 7, 9],
    [0, 5, 7, 12, 10, 5],
    [0, -2, 3, 5, 8, 3],
    [0, 7, 4, 11, 7, 2],
    [0, 1, 5, 6, 10, 5],
    [0, 6, 2, 8, 4, 10],
]
RHYTHMS = [  # inter-onset gaps in ms; deliberately not all on the 10 ms grid
    [60, 60, 120, 60],
    [80, 45, 80, 155],
    [100, 100, 50, 150],
    [70, 140, 70, 70],
    [90, 45, 135, 90],
    [110, 55, 55, 110],
    [50, 105, 145, 100],
    [65, 130, 65, 240],
]
DURATIONS = [30, 60, 40, 90, 50]
WOBBLE = [0, 3, -3, 5, -5]
WALK_STEPS = [1, 2, -1, 3, -2, -3, 2, -2]


def vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def track_chunk(events: list[tuple[int, bytes]]) -> bytes:
    """events: (absolute tick, payload-without-delta). Applies running status."""
    events = sorted(events, key=lambda e: e[0])
    body = bytearray()
    last_tick = 0
    last_status = None
    for tick, payload in events:
        body += vlq(tick - last_tick)
        last_tick = tick
        status = payload[0]
        if status < 0xF0 and status == last_status:
            body += payload[1:]
        else:
            body += payload
        last_status = status if status < 0xF0 else None
    return b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)


def smf(fmt: int, tracks: list[bytes]) -> bytes:
    header = b"MThd" + (6).to_bytes(4, "big")
    header += fmt.to_bytes(2, "big") + len(tracks).to_bytes(2, "big")
    header += DIVISION.to_bytes(2, "big")
    return header + b"".join(tracks)


def triangle(k: int, period: int, amplitude: int) -> int:
    phase = k % period
    up = phase if phase < period // 2 else period - phase
    return amplitude * (2 * up - period // 2) // (period // 2)


def style_file(i: int) -> bytes:
    register = 26 + 8 * i
    center = 24 + 11 * i
    motif = MOTIFS[i]
    rhythm = RHYTHMS[i]
    channel = i % 4
    use_zero_vel_off = i % 2 == 1

    events: list[tuple[int, bytes]] = []
    clock = 0
    walk = 0
    for k in range(NOTES_PER_FILE):
        walk += WALK_STEPS[(k + i) % len(WALK_STEPS)]
        if abs(walk) > 10:
            walk = -walk // 2
        pitch = register + walk + motif[k % len(motif)]
        pitch = max(0, min(127, pitch))
        vel = center + triangle(k, 32, 14) + WOBBLE[k % len(WOBBLE)]
        vel = max(8, min(120, vel))
        dur = DURATIONS[k % len(DURATIONS)]

        events.append((clock, bytes([0x90 | channel, pitch, vel])))
        if use_zero_vel_off:
            events.append((clock + dur, bytes([0x90 | channel, pitch, 0])))
        else:
            events.append((clock + dur, bytes([0x80 | channel, pitch, 64])))
        if i % 2 == 0 and k % 16 == 7:
            third = min(127, pitch + 4)
            events.append((clock, bytes([0x90 | channel, third, max(8, vel - 6)])))
            off = bytes([0x90 | channel, third, 0]) if use_zero_vel_off \
                else bytes([0x80 | channel, third, 64])
            events.append((clock + dur, off))
        clock += rhythm[k % len(rhythm)]
        if k % 24 == 23:
            clock += 300 + 10 * i  # phrase rest

    end_meta = (clock + 100, bytes([0xFF, 0x2F, 0x00]))
    tempo_meta = (0, bytes([0xFF, 0x51, 0x03]) + (500000).to_bytes(3, "big"))

    if i == 3:
        # one multi-track file: conductor track with the tempo, notes apart
        conductor = track_chunk([tempo_meta, (0, bytes([0xFF, 0x2F, 0x00]))])
        notes = track_chunk(events + [end_meta])
        return smf(1, [conductor, notes])
    if i in (5, 6):
        events.append(tempo_meta)
    return smf(0, [track_chunk(events + [end_meta])])


def write_usage() -> int:
    lines = []
    seconds_cycle = [45.0, 31.5, 29.0, 62.0, 30.0, 12.5]
    for t in range(20):
        plays = 3 + t % 4
        for j in range(plays):
            lines.append({
                "track_id": f"gen-{t:03d}",
                "timestamp": f"2024-{1 + (t + j) % 2:02d}-{1 + (3 * t + j) % 28:02d}T{(7 * t + j) % 24:02d}:15:00Z",
                "seconds_played": seconds_cycle[(t + j) % len(seconds_cycle)],
            })
    # a track the catalog never attributed, so its share lands unattributed
    lines.append({"track_id": "gen-999", "timestamp": "2024-01-20T08:15:00Z",
                  "seconds_played": 200.0})
    USAGE_PATH.write_text(
        "\n".join(json.dumps(obj, sort_keys=True) for obj in lines) + "\n",
        encoding="utf-8",
    )
    return len(lines)


def main() -> None:
    MIDI_DIR.mkdir(parents=True, exist_ok=True)
    for i in range(8):
        path = MIDI_DIR / f"style{i}.mid"
        path.write_bytes(style_file(i))
        print(f"wrote {path} ({path.stat().st_size} bytes)")
    count = write_usage()
    print(f"wrote {USAGE_PATH} ({count} events)")


if __name__ == "__main__":
    main()
