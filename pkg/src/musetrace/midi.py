"""Standard MIDI File parsing and the 388-token performance vocabulary.

Token layout (DEFAULT_LAYOUT):

    0 .. 127     NOTE_ON(pitch)
    128 .. 255   NOTE_OFF(pitch)
    256 .. 355   TIME_SHIFT(t), t = 10 ms .. 1000 ms in 10 ms steps
    356 .. 387   VELOCITY(bin), bin = floor(velocity / 4), 32 bins of width 4

Timing is quantized to a 10 ms grid before emission, so every reconstructed
event time sits within 5 ms of the original. Gaps longer than one second are
emitted as maximal 1000 ms shifts followed by the remainder.

Corpus file format ("AREC1"): the 5 magic bytes, a 64-bit little-endian token
count, then that many 16-bit little-endian tokens (all windows concatenated).
A sidecar JSON manifest at `<path>.json` records the window length and one
entry per window index: {work_id, rightsholder_id, source, offset}.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyInput,
    FormatError,
    MalformedHeader,
    TruncatedChunk,
    UnsupportedFormat,
)

CORPUS_MAGIC = b"AREC1"

GRID_MS = 10
DEFAULT_TEMPO_US = 500000  # microseconds per quarter note (120 BPM)


@dataclass(frozen=True)
class Note:
    """One performed note with times in seconds."""

    pitch: int
    velocity: int
    start: float
    end: float

    def __post_init__(self) -> None:
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError("note times must be finite")
        if self.end < self.start:
            raise ValueError("note ends before it starts")


@dataclass
class NoteSequence:
    """Notes plus total duration and counters for tolerated oddities."""

    notes: list[Note] = field(default_factory=list)
    duration: float = 0.0
    warnings: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.notes)

    def _count(self, key: str, n: int = 1) -> None:
        if n:
            self.warnings[key] = self.warnings.get(key, 0) + n


@dataclass(frozen=True)
class VocabularyLayout:
    """The four token ranges; defaults give the 388-token layout."""

    note_on_base: int = 0
    note_off_base: int = 128
    time_shift_base: int = 256
    velocity_base: int = 356
    num_pitches: int = 128
    num_shifts: int = 100
    num_velocity_bins: int = 32
    shift_ms: int = GRID_MS
    default_velocity_bin: int = 16

    @property
    def total_size(self) -> int:
        return self.velocity_base + self.num_velocity_bins

    def validate(self) -> None:
        ranges = [
            (self.note_on_base, self.num_pitches),
            (self.note_off_base, self.num_pitches),
            (self.time_shift_base, self.num_shifts),
            (self.velocity_base, self.num_velocity_bins),
        ]
        ranges.sort()
        cursor = 0
        for base, size in ranges:
            if base != cursor:
                raise ValueError("token ranges must be disjoint and contiguous")
            cursor = base + size
        if cursor != self.total_size:
            raise ValueError("token ranges must cover the whole vocabulary")

    # -- encoders -----------------------------------------------------------

    def note_on(self, pitch: int) -> int:
        return self.note_on_base + pitch

    def note_off(self, pitch: int) -> int:
        return self.note_off_base + pitch

    def time_shift(self, steps: int) -> int:
        if not 1 <= steps <= self.num_shifts:
            raise ValueError(f"shift of {steps} steps is not encodable")
        return self.time_shift_base + steps - 1

    def velocity(self, bin_index: int) -> int:
        return self.velocity_base + bin_index

    def velocity_bin(self, velocity: int) -> int:
        return min(velocity // 4, self.num_velocity_bins - 1)

    def velocity_midpoint(self, bin_index: int) -> int:
        return max(1, min(127, bin_index * 4 + 2))

    # -- decoder ------------------------------------------------------------

    def decode(self, token: int) -> tuple[str, int]:
        """Map a token id to (kind, value); kind is one of
        "note_on", "note_off" (value = pitch), "time_shift" (value = grid
        steps), "velocity" (value = bin index)."""
        t = int(token)
        if self.note_on_base <= t < self.note_on_base + self.num_pitches:
            return "note_on", t - self.note_on_base
        if self.note_off_base <= t < self.note_off_base + self.num_pitches:
            return "note_off", t - self.note_off_base
        if self.time_shift_base <= t < self.time_shift_base + self.num_shifts:
            return "time_shift", t - self.time_shift_base + 1
        if self.velocity_base <= t < self.velocity_base + self.num_velocity_bins:
            return "velocity", t - self.velocity_base
        raise ValueError(f"token {t} outside the vocabulary")


DEFAULT_LAYOUT = VocabularyLayout()
DEFAULT_LAYOUT.validate()


# ---------------------------------------------------------------------------
# SMF parsing
# ---------------------------------------------------------------------------

def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    """Read a variable-length quantity; returns (value, next position)."""
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedChunk("track ends inside a variable-length value")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise TruncatedChunk("variable-length value longer than four bytes")


def _scan_track(data: bytes, start: int, length: int) -> list[tuple[int, int, str, int, int]]:
    """Collect the events this package cares about from one MTrk chunk.

    Returns (tick, order, kind, a, b) tuples where kind is "on" (a=pitch+
    channel<<8, b=velocity), "off" (same), "tempo" (a=us per quarter), or
    "cc64" (a=channel, b=value). `order` preserves in-track order for stable
    merging. Other events advance the clock but are otherwise ignored.
    """
    end = start + length
    pos = start
    tick = 0
    running: int | None = None
    order = 0
    events: list[tuple[int, int, str, int, int]] = []

    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise TruncatedChunk("track ends before an event status byte")
        status = data[pos]

        if status == 0xFF:  # meta event
            if pos + 2 > end:
                raise TruncatedChunk("truncated meta event")
            meta_type = data[pos + 1]
            size, body = _read_varlen(data, pos + 2, end)
            if body + size > end:
                raise TruncatedChunk("meta event payload runs past the chunk")
            if meta_type == 0x51 and size == 3:
                tempo = int.from_bytes(data[body:body + 3], "big")
                events.append((tick, order, "tempo", tempo, 0))
                order += 1
            if meta_type == 0x2F:  # end of track
                events.append((tick, order, "end", 0, 0))
                return events
            pos = body + size
            running = None
            continue

        if status in (0xF0, 0xF7):  # sysex: skip payload
            size, body = _read_varlen(data, pos + 1, end)
            if body + size > end:
                raise TruncatedChunk("sysex payload runs past the chunk")
            pos = body + size
            running = None
            continue

        if status >= 0x80:
            pos += 1
            running = status
        elif running is None:
            raise TruncatedChunk("data byte with no running status")
        else:
            status = running

        kind = status & 0xF0
        channel = status & 0x0F
        needs = 1 if kind in (0xC0, 0xD0) else 2
        if pos + needs > end:
            raise TruncatedChunk("channel event data runs past the chunk")
        d1 = data[pos]
        d2 = data[pos + 1] if needs == 2 else 0
        pos += needs

        if kind == 0x90 and d2 > 0:
            events.append((tick, order, "on", (channel << 8) | d1, d2))
            order += 1
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            events.append((tick, order, "off", (channel << 8) | d1, d2))
            order += 1
        elif kind == 0xB0 and d1 == 64:
            events.append((tick, order, "cc64", channel, d2))
            order += 1

    # no end-of-track meta seen; treat the chunk boundary as the end
    events.append((tick, order, "end", 0, 0))
    return events


def _tick_clock(division: int, tempo_events: list[tuple[int, int]]):
    """Build a tick -> seconds function from the header division and the
    merged (tick, microseconds-per-quarter) tempo change list."""
    if division & 0x8000:  # SMPTE: tempo-independent
        fps = 256 - (division >> 8)
        tpf = division & 0xFF
        if fps <= 0 or tpf == 0:
            raise MalformedHeader("invalid SMPTE division")
        per_tick = 1.0 / (fps * tpf)
        return lambda tick: tick * per_tick

    ppqn = division
    if ppqn == 0:
        raise MalformedHeader("division of zero ticks per quarter")

    # segments of constant tempo: (start_tick, seconds_at_start, sec_per_tick)
    segments: list[tuple[int, float, float]] = []
    cur_tick, cur_sec = 0, 0.0
    cur_rate = DEFAULT_TEMPO_US / (ppqn * 1e6)
    for tick, tempo in tempo_events:
        if tick > cur_tick:
            segments.append((cur_tick, cur_sec, cur_rate))
            cur_sec += (tick - cur_tick) * cur_rate
            cur_tick = tick
        cur_rate = tempo / (ppqn * 1e6)
    segments.append((cur_tick, cur_sec, cur_rate))

    starts = [s[0] for s in segments]

    def clock(tick: int) -> float:
        # binary search for the governing segment
        lo, hi = 0, len(starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if starts[mid] <= tick:
                lo = mid
            else:
                hi = mid - 1
        t0, s0, rate = segments[lo]
        return s0 + (tick - t0) * rate

    return clock


def parse_midi(data: bytes | str | os.PathLike, *, apply_sustain: bool = False) -> NoteSequence:
    """Parse a Standard MIDI File (format 0 or 1) into a NoteSequence.

    Notes are built by pairing each NOTE_ON (velocity > 0) with the next
    release on the same pitch and channel, first-in first-out; a NOTE_ON with
    velocity 0 counts as a release. Tempo meta events convert ticks to
    seconds, and the tracks of a format-1 file are merged into one timeline.
    With `apply_sustain`, releases that fall while the damper pedal (CC64) is
    down are deferred until the pedal rises.

    Tolerated oddities are counted in the result's `warnings` dict:
    "dangling_note_on" (closed at end of track) and "dropped_degenerate_note"
    (zero or negative duration after pairing).
    """
    if isinstance(data, (str, os.PathLike)):
        data = Path(data).read_bytes()
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("file does not start with an MThd chunk")
    header_len = struct.unpack_from(">I", data, 4)[0]
    if header_len < 6 or 8 + header_len > len(data):
        raise MalformedHeader(f"MThd length {header_len} is invalid")
    fmt, ntrks, division = struct.unpack_from(">HHH", data, 8)
    if fmt not in (0, 1):
        raise UnsupportedFormat(f"SMF format {fmt} is not supported")
    if fmt == 0 and ntrks != 1:
        raise MalformedHeader("format 0 requires exactly one track")

    # locate MTrk chunks, skipping unknown chunk types
    chunks: list[tuple[int, int]] = []
    pos = 8 + header_len
    while pos < len(data) and len(chunks) < ntrks:
        if pos + 8 > len(data):
            raise TruncatedChunk("chunk header runs past end of file")
        tag = data[pos:pos + 4]
        size = struct.unpack_from(">I", data, pos + 4)[0]
        if pos + 8 + size > len(data):
            raise TruncatedChunk(f"chunk {tag!r} of {size} bytes is truncated")
        if tag == b"MTrk":
            chunks.append((pos + 8, size))
        pos += 8 + size
    if len(chunks) != ntrks:
        raise TruncatedChunk(
            f"header declares {ntrks} tracks but only {len(chunks)} found"
        )

    merged: list[tuple[int, int, int, str, int, int]] = []
    for track_index, (start, size) in enumerate(chunks):
        for tick, order, kind, a, b in _scan_track(data, start, size):
            merged.append((tick, track_index, order, kind, a, b))
    merged.sort(key=lambda e: (e[0], e[1], e[2]))

    tempo_events = [(tick, a) for tick, _, _, kind, a, _ in merged if kind == "tempo"]
    clock = _tick_clock(division, tempo_events)

    seq = NoteSequence()
    open_notes: dict[int, list[tuple[float, int]]] = {}
    pedal_down: dict[int, bool] = {}
    deferred: dict[int, list[int]] = {}  # channel -> open-note keys awaiting pedal up
    final_tick = 0

    def close(key: int, at: float) -> None:
        starts = open_notes.get(key)
        if not starts:
            return
        start_sec, velocity = starts.pop(0)
        if at <= start_sec:
            seq._count("dropped_degenerate_note")
            return
        seq.notes.append(Note(key & 0xFF, velocity, start_sec, at))

    for tick, _, _, kind, a, b in merged:
        final_tick = max(final_tick, tick)
        sec = clock(tick)
        if kind == "on":
            open_notes.setdefault(a, []).append((sec, b))
        elif kind == "off":
            channel = a >> 8
            if apply_sustain and pedal_down.get(channel):
                if open_notes.get(a):
                    deferred.setdefault(channel, []).append(a)
            else:
                close(a, sec)
        elif kind == "cc64" and apply_sustain:
            down = b >= 64
            was_down = pedal_down.get(a, False)
            pedal_down[a] = down
            if was_down and not down:
                for key in deferred.pop(a, []):
                    close(key, sec)

    end_sec = clock(final_tick)
    for channel, keys in sorted(deferred.items()):
        for key in keys:
            close(key, end_sec)
    dangling = sum(len(v) for v in open_notes.values())
    if dangling:
        for key in sorted(open_notes):
            while open_notes[key]:
                close(key, end_sec)
        seq._count("dangling_note_on", dangling)

    seq.notes.sort(key=lambda n: (n.start, n.pitch, n.end))
    seq.duration = max([end_sec] + [n.end for n in seq.notes])
    return seq


# ---------------------------------------------------------------------------
# tokenize / detokenize
# ---------------------------------------------------------------------------

def _to_grid(seconds: float) -> int:
    """Quantize a time in seconds to 10 ms grid steps, rounding half up."""
    return int(np.floor(seconds * (1000.0 / GRID_MS) + 0.5))


def tokenize(
    seq: NoteSequence,
    layout: VocabularyLayout = DEFAULT_LAYOUT,
    *,
    always_emit_velocity: bool = False,
) -> np.ndarray:
    """Encode a NoteSequence as a uint16 token array.

    Event times are quantized to the 10 ms grid first; gaps between grid
    instants come out as maximal 1000 ms TIME_SHIFT tokens plus a remainder.
    A VELOCITY token precedes a NOTE_ON only when the velocity bin differs
    from the previous one (or always, with the flag). Releases sort before
    onsets at the same instant so back-to-back repeats stay paired, and a
    note whose quantized duration would be zero is stretched to one step.
    """
    events: list[tuple[int, int, int, int]] = []  # (grid, off_first, pitch, bin)
    for note in seq.notes:
        on = _to_grid(note.start)
        off = max(on + 1, _to_grid(note.end))
        events.append((on, 1, note.pitch, layout.velocity_bin(note.velocity)))
        events.append((off, 0, note.pitch, 0))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    out: list[int] = []
    clock = 0
    current_bin = -1
    for grid, is_on, pitch, vbin in events:
        gap = grid - clock
        while gap >= layout.num_shifts:
            out.append(layout.time_shift(layout.num_shifts))
            gap -= layout.num_shifts
        if gap > 0:
            out.append(layout.time_shift(gap))
        clock = grid
        if is_on:
            if always_emit_velocity or vbin != current_bin:
                out.append(layout.velocity(vbin))
                current_bin = vbin
            out.append(layout.note_on(pitch))
        else:
            out.append(layout.note_off(pitch))
    return np.asarray(out, dtype=np.uint16)


def detokenize(
    events: np.ndarray,
    layout: VocabularyLayout = DEFAULT_LAYOUT,
) -> NoteSequence:
    """Decode a token array back into notes.

    Velocities become bin midpoints; notes left open are closed at the end
    of the sequence, and NOTE_OFF tokens with no open note are counted under
    the "orphan_note_off" warning key.
    """
    seq = NoteSequence()
    open_notes: dict[int, list[tuple[float, int]]] = {}
    clock = 0.0
    velocity = layout.velocity_midpoint(layout.default_velocity_bin)
    step_sec = layout.shift_ms / 1000.0

    for token in np.asarray(events).ravel():
        kind, value = layout.decode(int(token))
        if kind == "time_shift":
            clock += value * step_sec
        elif kind == "velocity":
            velocity = layout.velocity_midpoint(value)
        elif kind == "note_on":
            open_notes.setdefault(value, []).append((clock, velocity))
        else:  # note_off
            starts = open_notes.get(value)
            if starts:
                start, vel = starts.pop(0)
                seq.notes.append(Note(value, vel, start, clock))
            else:
                seq._count("orphan_note_off")

    for pitch in sorted(open_notes):
        for start, vel in open_notes[pitch]:
            seq.notes.append(Note(pitch, vel, start, clock))
    if open_notes:
        seq._count("dangling_note_on", sum(len(v) for v in open_notes.values()))

    seq.notes.sort(key=lambda n: (n.start, n.pitch, n.end))
    seq.duration = clock
    return seq


def make_training_windows(events: np.ndarray, window_len: int) -> list[np.ndarray]:
    """Split a token stream into consecutive windows of exactly window_len.

    The trailing remainder is dropped. Raises EmptyInput when the stream is
    shorter than one window.
    """
    if window_len < 2:
        raise ValueError("window_len must be at least 2")
    tokens = np.asarray(events, dtype=np.uint16).ravel()
    count = len(tokens) // window_len
    if count == 0:
        raise EmptyInput(
            f"stream of {len(tokens)} tokens is shorter than one window of {window_len}"
        )
    return [
        tokens[i * window_len:(i + 1) * window_len].copy() for i in range(count)
    ]


# ---------------------------------------------------------------------------
# corpus container and AREC1 serialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowRecord:
    """Provenance for one training window."""

    work_id: str
    rightsholder_id: str
    source: str
    offset: int  # token offset of the window within its source stream


@dataclass
class Corpus:
    """Fixed-length training windows plus per-window provenance."""

    windows: np.ndarray  # (n, window_len) uint16
    records: tuple[WindowRecord, ...]

    def __post_init__(self) -> None:
        self.windows = np.asarray(self.windows, dtype=np.uint16)
        if self.windows.ndim != 2:
            raise ValueError("windows must be a 2-D array")
        if len(self.records) != self.windows.shape[0]:
            raise ValueError("one provenance record is required per window")

    @property
    def n(self) -> int:
        return self.windows.shape[0]

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    @property
    def work_ids(self) -> list[str]:
        return [r.work_id for r in self.records]

    @property
    def rightsholder_ids(self) -> list[str]:
        return [r.rightsholder_id for r in self.records]


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def write_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    """Write the AREC1 token file and its sidecar JSON manifest."""
    path = Path(path)
    flat = corpus.windows.astype("<u2").ravel()
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
    manifest = {
        "window_len": int(corpus.window_len),
        "windows": [
            {
                "work_id": r.work_id,
                "rightsholder_id": r.rightsholder_id,
                "source": r.source,
                "offset": int(r.offset),
            }
            for r in corpus.records
        ],
    }
    manifest_path(path).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def read_corpus(path: str | os.PathLike) -> Corpus:
    """Read a corpus written by write_corpus."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CORPUS_MAGIC) + 8 or raw[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise FormatError(f"{path} is not an AREC1 corpus")
    (count,) = struct.unpack_from("<Q", raw, len(CORPUS_MAGIC))
    body = raw[len(CORPUS_MAGIC) + 8:]
    if len(body) != 2 * count:
        raise FormatError(
            f"{path} declares {count} tokens but holds {len(body) // 2}"
        )
    tokens = np.frombuffer(body, dtype="<u2").astype(np.uint16)

    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"corpus manifest {mpath} is missing")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    window_len = int(manifest["window_len"])
    entries = manifest["windows"]
    if window_len <= 0 or len(entries) * window_len != count:
        raise FormatError(f"{mpath} disagrees with the token count in {path}")
    windows = tokens.reshape(len(entries), window_len)
    records = tuple(
        WindowRecord(
            work_id=str(e["work_id"]),
            rightsholder_id=str(e["rightsholder_id"]),
            source=str(e["source"]),
            offset=int(e["offset"]),
        )
        for e in entries
    )
    return Corpus(windows=windows, records=records)
