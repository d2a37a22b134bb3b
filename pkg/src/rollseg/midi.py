"""Standard MIDI File reading and writing (formats 0 and 1, PPQ division).

Only what ground-truth ingestion needs: note events and the tempo map.
Sustain pedal and other controllers are parsed but not interpreted.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core import FormatError, NoteEvent, sort_notes

DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 bpm)

_META_TEMPO = 0x51
_META_END_OF_TRACK = 0x2F


class MidiError(FormatError):
    """Structurally invalid or unsupported MIDI data."""


@dataclass(frozen=True)
class MidiEvent:
    """A raw track event.

    ``kind`` is ``"channel"``, ``"meta"`` or ``"sysex"``. For channel events
    ``status`` is the full status byte; for meta events ``meta_type`` holds
    the type byte. ``data`` is the payload without status/length bytes.
    """

    delta: int
    tick: int
    kind: str
    status: int
    data: bytes
    meta_type: int = -1

    @property
    def channel(self):
        return self.status & 0x0F

    @property
    def command(self):
        return self.status & 0xF0


@dataclass(frozen=True)
class SmfDocument:
    format: int
    ppq: int
    tracks: tuple
    tempo_map: tuple  # ((tick, us_per_quarter), ...) sorted, first at tick 0

    def ticks_to_seconds(self, ticks):
        """Piecewise-linear tick to seconds conversion over the tempo map."""
        ticks = np.asarray(ticks, dtype=float)
        tm_ticks = np.array([t for t, _ in self.tempo_map], dtype=float)
        tempi = np.array([u for _, u in self.tempo_map], dtype=float)
        seg_sec = np.diff(tm_ticks) * tempi[:-1] / (self.ppq * 1e6)
        starts = np.concatenate([[0.0], np.cumsum(seg_sec)])
        k = np.searchsorted(tm_ticks, ticks, side="right") - 1
        k = np.clip(k, 0, len(tm_ticks) - 1)
        return starts[k] + (ticks - tm_ticks[k]) * tempi[k] / (self.ppq * 1e6)


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf, pos=0, end=None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def need(self, n, what):
        if self.pos + n > self.end:
            raise MidiError(f"truncated {what} at byte offset {self.pos}")

    def byte(self, what="data"):
        self.need(1, what)
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def take(self, n, what="data"):
        self.need(n, what)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def vlq(self):
        start = self.pos
        value = 0
        for _ in range(4):
            if self.pos >= self.end:
                raise MidiError(f"truncated variable-length quantity at byte offset {start}")
            b = self.buf[self.pos]
            self.pos += 1
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError(f"variable-length quantity longer than 4 bytes at byte offset {start}")


def _chunk_header(r, expected):
    off = r.pos
    if r.pos + 8 > r.end:
        raise MidiError(f"truncated {expected} chunk header at byte offset {off}")
    magic = bytes(r.buf[r.pos:r.pos + 4])
    if magic != expected.encode("ascii"):
        raise MidiError(f"expected {expected!r} chunk at byte offset {off}, found {magic!r}")
    (length,) = struct.unpack(">I", bytes(r.buf[r.pos + 4:r.pos + 8]))
    r.pos += 8
    if r.pos + length > r.end:
        raise MidiError(f"{expected} chunk at byte offset {off} declares {length} bytes "
                        f"but only {r.end - r.pos} remain")
    return length


_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(buf, start, end):
    r = _Reader(buf, start, end)
    events = []
    tick = 0
    running = None
    while r.pos < r.end:
        delta = r.vlq()
        tick += delta
        off = r.pos
        b = r.byte("event")
        if b == 0xFF:
            running = None
            mtype = r.byte("meta event type")
            length = r.vlq()
            data = r.take(length, "meta event payload")
            if mtype == _META_TEMPO and length != 3:
                raise MidiError(f"tempo meta event at byte offset {off} has length {length}, expected 3")
            events.append(MidiEvent(delta, tick, "meta", 0xFF, data, mtype))
            if mtype == _META_END_OF_TRACK:
                break
            continue
        if b in (0xF0, 0xF7):
            running = None
            length = r.vlq()
            data = r.take(length, "sysex payload")
            events.append(MidiEvent(delta, tick, "sysex", b, data))
            continue
        if b >= 0xF0:
            raise MidiError(f"invalid status byte 0x{b:02X} in track data at byte offset {off}")
        if b & 0x80:
            status = b
            first = None
        else:
            if running is None:
                raise MidiError(f"running status without a previous status byte at byte offset {off}")
            status = running
            first = b
        n = _DATA_LEN[status & 0xF0]
        payload = bytearray()
        if first is not None:
            payload.append(first)
        while len(payload) < n:
            payload.append(r.byte("channel event data"))
        if any(v & 0x80 for v in payload):
            raise MidiError(f"data byte >= 0x80 in channel event at byte offset {off}")
        running = status
        events.append(MidiEvent(delta, tick, "channel", status, bytes(payload)))
    return events


def parse_smf(data) -> SmfDocument:
    """Parse a Standard MIDI File from a bytes-like object.

    Raises
    ------
    MidiError
        On a missing or corrupt ``MThd``/``MTrk`` chunk, truncated data,
        malformed events, SMPTE time division, or format 2.
    """
    buf = memoryview(bytes(data))
    r = _Reader(buf)
    hlen = _chunk_header(r, "MThd")
    if hlen < 6:
        raise MidiError(f"MThd chunk length {hlen} < 6")
    fmt, ntracks, division = struct.unpack(">HHH", bytes(buf[r.pos:r.pos + 6]))
    r.pos += hlen
    if fmt not in (0, 1):
        raise MidiError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE time division is not supported")
    if division == 0:
        raise MidiError("ticks per quarter note must be > 0")
    if fmt == 0 and ntracks != 1:
        raise MidiError(f"format 0 file declares {ntracks} tracks")

    tracks = []
    for _ in range(ntracks):
        length = _chunk_header(r, "MTrk")
        tracks.append(tuple(_parse_track(buf, r.pos, r.pos + length)))
        r.pos += length

    tempo = {}
    for ev in (tracks[0] if tracks else ()):
        if ev.kind == "meta" and ev.meta_type == _META_TEMPO:
            tempo[ev.tick] = (ev.data[0] << 16) | (ev.data[1] << 8) | ev.data[2]
    tempo.setdefault(0, DEFAULT_TEMPO)
    return SmfDocument(fmt, division, tuple(tracks), tuple(sorted(tempo.items())))


def smf_to_notes(doc: SmfDocument) -> list[NoteEvent]:
    """Pair note-on/note-off events into notes with times in seconds.

    Tracks are merged by absolute tick. Pairing is FIFO per (channel, pitch);
    a note-on with velocity 0 acts as a note-off. Dangling note-offs are
    ignored and note-ons still open at the end are closed at the last
    end-of-track tick; both are reported in a :class:`UserWarning`.
    """
    merged = []
    end_tick = 0
    for ti, track in enumerate(doc.tracks):
        for k, ev in enumerate(track):
            end_tick = max(end_tick, ev.tick)
            if ev.kind == "channel" and ev.command in (0x80, 0x90):
                merged.append((ev.tick, ti, k, ev))
    merged.sort(key=lambda item: item[:3])

    open_notes = {}
    spans = []
    dangling_off = 0
    for tick, _, _, ev in merged:
        key = (ev.channel, ev.data[0])
        vel = ev.data[1]
        if ev.command == 0x90 and vel > 0:
            open_notes.setdefault(key, []).append((tick, vel))
        else:
            queue = open_notes.get(key)
            if queue:
                on_tick, on_vel = queue.pop(0)
                spans.append((key[1], on_tick, tick, on_vel))
            else:
                dangling_off += 1
    unmatched = 0
    for key, queue in open_notes.items():
        for on_tick, on_vel in queue:
            spans.append((key[1], on_tick, end_tick, on_vel))
            unmatched += 1

    notes = []
    empty = 0
    if spans:
        arr = np.array([[s[1], s[2]] for s in spans], dtype=float)
        secs = doc.ticks_to_seconds(arr.ravel()).reshape(arr.shape)
        for (pitch, _, _, vel), (on, off) in zip(spans, secs):
            if off > on:
                notes.append(NoteEvent(pitch, float(on), float(off), vel))
            else:
                empty += 1
    if dangling_off or unmatched or empty:
        warnings.warn(f"MIDI pairing: {unmatched} unmatched note-on(s) closed at end of track, "
                      f"{dangling_off} dangling note-off(s) ignored, {empty} zero-length note(s) dropped",
                      stacklevel=2)
    return sort_notes(notes)


def _vlq_bytes(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_smf(notes, ppq=480, tempo=DEFAULT_TEMPO) -> bytes:
    """Encode notes as a format-0 SMF with a single tempo.

    Overlapping notes of the same pitch go to different channels so that
    FIFO pairing on read recovers them exactly (up to 16 simultaneous).
    """
    if not 0 < ppq < 0x8000:
        raise ValueError(f"ppq must be in 1..32767, got {ppq}")
    if not 0 < tempo < (1 << 24):
        raise ValueError(f"tempo must fit in 24 bits, got {tempo}")
    scale = ppq * 1e6 / tempo
    events = []  # (tick, order, bytes); order 0 = note-off first at equal ticks
    busy = {}  # pitch -> list of channel end ticks
    for n in sorted(notes, key=lambda n: (n.onset_s, n.pitch, n.offset_s)):
        if not 0 <= n.pitch <= 127:
            raise ValueError(f"pitch {n.pitch} outside MIDI range 0..127")
        on = int(round(n.onset_s * scale))
        off = max(int(round(n.offset_s * scale)), on + 1)
        ends = busy.setdefault(n.pitch, [0] * 16)
        ch = next((c for c in range(16) if ends[c] <= on), None)
        if ch is None:
            raise ValueError(f"more than 16 overlapping notes of pitch {n.pitch}")
        ends[ch] = off
        vel = int(min(max(n.velocity, 1), 127))
        events.append((on, 1, bytes([0x90 | ch, n.pitch, vel])))
        events.append((off, 0, bytes([0x80 | ch, n.pitch, 0x40])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray()
    body += b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big")
    last = 0
    for tick, _, payload in events:
        body += _vlq_bytes(tick - last) + payload
        last = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)
