"""Minimal reference reader for Standard MIDI Files, used only to
cross-check the real parser. Deliberately written against the format spec
with a different structure (BytesIO streams, linear tempo walk, per-key
deques) so the two implementations share no code paths."""

from __future__ import annotations

import io
import struct
from collections import deque

DEFAULT_TEMPO = 500000  # microseconds per quarter note


class RefError(Exception):
    pass


def _read_exact(stream: io.BytesIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise RefError(f"wanted {n} bytes, got {len(data)}")
    return data


def _read_vlq(stream: io.BytesIO) -> int:
    value = 0
    for _ in range(4):
        byte = _read_exact(stream, 1)[0]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value
    raise RefError("variable-length quantity longer than 4 bytes")


def _scan(stream: io.BytesIO):
    """Yield (tick, kind, channel, data1, data2) from one MTrk body."""
    tick = 0
    status = None
    while True:
        tick += _read_vlq(stream)
        first = _read_exact(stream, 1)[0]
        if first == 0xFF:
            meta = _read_exact(stream, 1)[0]
            length = _read_vlq(stream)
            payload = _read_exact(stream, length)
            status = None
            if meta == 0x2F:
                yield tick, "end", 0, 0, 0
                return
            if meta == 0x51:
                yield tick, "tempo", 0, int.from_bytes(payload, "big"), 0
            continue
        if first in (0xF0, 0xF7):
            stream.seek(_read_vlq(stream), io.SEEK_CUR)
            status = None
            continue
        if first & 0x80:
            status = first
            data1 = _read_exact(stream, 1)[0]
        else:
            if status is None:
                raise RefError("data byte without running status")
            data1 = first
        kind = status >> 4
        channel = status & 0x0F
        if kind in (0xC, 0xD):
            yield tick, "other", channel, data1, 0
            continue
        data2 = _read_exact(stream, 1)[0]
        if kind == 0x9:
            yield tick, ("off" if data2 == 0 else "on"), channel, data1, data2
        elif kind == 0x8:
            yield tick, "off", channel, data1, data2
        else:
            yield tick, "other", channel, data1, data2


def read_notes(data: bytes):
    """Return (notes, duration): notes as (pitch, velocity, start, end)
    tuples sorted like the real parser sorts them."""
    stream = io.BytesIO(data)
    if _read_exact(stream, 4) != b"MThd":
        raise RefError("not an SMF file")
    header_len = struct.unpack(">I", _read_exact(stream, 4))[0]
    fmt, ntracks, division = struct.unpack(">HHH", _read_exact(stream, header_len)[:6])
    if fmt not in (0, 1):
        raise RefError(f"unsupported format {fmt}")

    events = []
    tempos = []
    order = 0
    for _ in range(ntracks):
        tag = _read_exact(stream, 4)
        length = struct.unpack(">I", _read_exact(stream, 4))[0]
        body = io.BytesIO(_read_exact(stream, length))
        if tag != b"MTrk":
            continue
        for tick, kind, channel, d1, d2 in _scan(body):
            if kind == "tempo":
                tempos.append((tick, d1))
            elif kind in ("on", "off", "end"):
                events.append((tick, order, kind, channel, d1, d2))
                order += 1
    events.sort(key=lambda e: (e[0], e[1]))
    tempos.sort()

    if division & 0x8000:
        fps = 256 - (division >> 8)
        tpf = division & 0xFF

        def to_seconds(tick: int) -> float:
            return tick / (fps * tpf)
    else:
        # walk the tempo map, accumulating seconds segment by segment
        segments = [(0, DEFAULT_TEMPO)]
        for tick, uspq in tempos:
            if tick == 0:
                segments = [(0, uspq)]
            else:
                segments.append((tick, uspq))

        def to_seconds(tick: int) -> float:
            seconds = 0.0
            for (start, uspq), nxt in zip(segments, segments[1:] + [(None, None)]):
                end = nxt[0]
                if end is None or tick < end:
                    return seconds + (tick - start) * uspq / (1e6 * division)
                seconds += (end - start) * uspq / (1e6 * division)
            raise RefError("unreachable")

    notes = []
    open_notes: dict[tuple[int, int], deque] = {}
    max_tick = 0
    for tick, _, kind, channel, pitch, vel in events:
        max_tick = max(max_tick, tick)
        key = (channel, pitch)
        if kind == "end":
            continue
        if kind == "on":
            open_notes.setdefault(key, deque()).append((tick, vel))
        else:
            if open_notes.get(key):
                on_tick, on_vel = open_notes[key].popleft()
                if tick > on_tick:
                    notes.append((pitch, on_vel, to_seconds(on_tick), to_seconds(tick)))
    for (channel, pitch) in sorted(open_notes):
        for on_tick, on_vel in open_notes[(channel, pitch)]:
            if max_tick > on_tick:
                notes.append((pitch, on_vel, to_seconds(on_tick), to_seconds(max_tick)))

    notes.sort(key=lambda n: (n[2], n[0], n[3]))
    duration = max([to_seconds(max_tick)] + [n[3] for n in notes]) if events else 0.0
    return notes, duration
