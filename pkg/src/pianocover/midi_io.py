"""Standard MIDI File (format 0/1) reader and writer for PianoPerformance.

Only the events a piano performance needs are interpreted: note on/off,
tempo meta, and time signature meta (anything but 4/4 is rejected). Other
channel/meta/sysex events are skipped. SMPTE divisions and format 2 files
are unsupported.
"""

from __future__ import annotations

import struct
from pathlib import Path

from .core import (
    MeterError,
    NoteEvent,
    PianoCoverError,
    PianoPerformance,
    PITCH_MAX,
    PITCH_MIN,
    TempoEvent,
)

DEFAULT_TICKS_PER_QUARTER = 480
_DEFAULT_US_PER_QUARTER = 500_000  # 120 BPM

_META_TEMPO = 0x51
_META_TIME_SIGNATURE = 0x58
_META_END_OF_TRACK = 0x2F


class MidiError(PianoCoverError):
    """Malformed or unsupported Standard MIDI File content."""


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def vlq(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.u8()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise MidiError(f"variable-length quantity too long at offset {self.pos}")


def _parse_track(data: bytes) -> list[tuple[int, str, tuple]]:
    """Parse one MTrk payload into (abs_tick, kind, payload) events."""
    rd = _Reader(data)
    events: list[tuple[int, str, tuple]] = []
    tick = 0
    running: int | None = None
    while rd.pos < len(rd.data):
        tick += rd.vlq()
        status = rd.u8()
        if status < 0x80:
            if running is None:
                raise MidiError(f"data byte without running status at offset {rd.pos - 1}")
            status, rd.pos = running, rd.pos - 1
        if status == 0xFF:
            running = None
            meta_type = rd.u8()
            payload = rd.take(rd.vlq())
            if meta_type == _META_TEMPO:
                if len(payload) != 3:
                    raise MidiError("tempo meta must carry 3 bytes")
                us = int.from_bytes(payload, "big")
                if us == 0:
                    raise MidiError("tempo meta with zero microseconds per quarter")
                events.append((tick, "tempo", (us,)))
            elif meta_type == _META_TIME_SIGNATURE:
                if len(payload) < 2:
                    raise MidiError("time signature meta too short")
                num, denom_pow = payload[0], payload[1]
                if (num, 1 << denom_pow) != (4, 4):
                    raise MeterError(f"unsupported meter {num}/{1 << denom_pow}; only 4/4 accepted")
            elif meta_type == _META_END_OF_TRACK:
                events.append((tick, "eot", ()))
                break
        elif status in (0xF0, 0xF7):
            running = None
            rd.take(rd.vlq())
        else:
            running = status
            kind = status & 0xF0
            if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
                a, b = rd.u8(), rd.u8()
            elif kind in (0xC0, 0xD0):
                a, b = rd.u8(), 0
            else:
                raise MidiError(f"unknown status byte 0x{status:02x}")
            if kind == 0x90 and b > 0:
                events.append((tick, "on", (a, b)))
            elif kind == 0x80 or (kind == 0x90 and b == 0):
                events.append((tick, "off", (a,)))
    return events


def read_midi(path: str | Path) -> PianoPerformance:
    """Read a format 0/1 SMF into a PianoPerformance (seconds domain)."""
    data = Path(path).read_bytes()
    rd = _Reader(data)
    if rd.take(4) != b"MThd":
        raise MidiError("missing MThd header")
    if rd.u32() != 6:
        raise MidiError("unexpected MThd length")
    fmt, ntrks, division = rd.u16(), rd.u16(), rd.u16()
    if fmt not in (0, 1):
        raise MidiError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE time division not supported")
    if division == 0:
        raise MidiError("zero ticks per quarter")

    events: list[tuple[int, str, tuple]] = []
    for _ in range(ntrks):
        if rd.take(4) != b"MTrk":
            raise MidiError("missing MTrk chunk")
        events.extend(_parse_track(rd.take(rd.u32())))
    # Tempo changes sort ahead of notes sharing their tick.
    order = {"tempo": 0, "off": 1, "on": 2, "eot": 3}
    events.sort(key=lambda e: (e[0], order[e[1]]))

    notes: list[NoteEvent] = []
    tempi: list[TempoEvent] = []
    open_notes: dict[int, list[tuple[float, int]]] = {}
    cur_tick, cur_time, us_per_qn = 0, 0.0, _DEFAULT_US_PER_QUARTER
    for tick, kind, payload in events:
        cur_time += (tick - cur_tick) * us_per_qn / (division * 1e6)
        cur_tick = tick
        if kind == "tempo":
            us_per_qn = payload[0]
            tempi.append(TempoEvent(cur_time, 6e7 / us_per_qn))
        elif kind == "on":
            pitch, velocity = payload
            if not (PITCH_MIN <= pitch <= PITCH_MAX):
                raise MidiError(f"pitch {pitch} outside piano range {PITCH_MIN}..{PITCH_MAX}")
            open_notes.setdefault(pitch, []).append((cur_time, velocity))
        elif kind == "off":
            pitch = payload[0]
            stack = open_notes.get(pitch)
            if stack:
                onset, velocity = stack.pop(0)
                if cur_time > onset:
                    notes.append(NoteEvent(onset, pitch, cur_time - onset, max(1, velocity)))

    end_time = cur_time
    for pitch, stack in open_notes.items():
        for onset, velocity in stack:
            if end_time > onset:
                notes.append(NoteEvent(onset, pitch, end_time - onset, max(1, velocity)))
    if not tempi:
        tempi = [TempoEvent(0.0, 120.0)]
    length = max([end_time] + [n.offset for n in notes]) or 1.0
    return PianoPerformance(tuple(notes), tuple(tempi), length)


def _vlq_bytes(value: int) -> bytes:
    if value < 0:
        raise MidiError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


class _BeatClock:
    """Seconds -> beat phase under a piecewise-constant tempo map."""

    def __init__(self, tempo_events: tuple[TempoEvent, ...]):
        events = sorted(tempo_events) or [TempoEvent(0.0, 120.0)]
        if events[0].time > 0:
            events = [TempoEvent(0.0, events[0].bpm)] + list(events)
        self.times = [e.time for e in events]
        self.bpms = [e.bpm for e in events]
        self.phases = [0.0]
        for i in range(1, len(events)):
            dt = self.times[i] - self.times[i - 1]
            self.phases.append(self.phases[-1] + dt * self.bpms[i - 1] / 60.0)

    def phase(self, t: float) -> float:
        i = 0
        for k, start in enumerate(self.times):
            if start <= t:
                i = k
            else:
                break
        return self.phases[i] + (t - self.times[i]) * self.bpms[i] / 60.0


def write_midi(
    perf: PianoPerformance,
    path: str | Path,
    ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER,
) -> None:
    """Write a format 0 SMF; note times are converted to ticks through the
    performance's own tempo map."""
    clock = _BeatClock(perf.tempo_events)
    tick = lambda t: round(clock.phase(t) * ticks_per_quarter)

    # (tick, sort_rank, message bytes)
    msgs: list[tuple[int, int, bytes]] = []
    msgs.append((0, 0, bytes([0xFF, _META_TIME_SIGNATURE, 4, 4, 2, 24, 8])))
    tempo_events = perf.tempo_events or (TempoEvent(0.0, 120.0),)
    for ev in tempo_events:
        us = round(6e7 / ev.bpm)
        msgs.append((tick(ev.time), 0, bytes([0xFF, _META_TEMPO, 3]) + us.to_bytes(3, "big")))
    for n in perf.notes:
        on, off = tick(n.onset), tick(n.offset)
        if off <= on:
            off = on + 1
        msgs.append((on, 2, bytes([0x90, n.pitch, n.velocity])))
        msgs.append((off, 1, bytes([0x80, n.pitch, 0])))
    msgs.sort(key=lambda m: (m[0], m[1]))

    track = bytearray()
    prev = 0
    for t, _, msg in msgs:
        track += _vlq_bytes(t - prev) + msg
        prev = t
    end_tick = max(prev, tick(perf.length))
    track += _vlq_bytes(end_tick - prev) + bytes([0xFF, _META_END_OF_TRACK, 0])

    header = struct.pack(">4sIHHH", b"MThd", 6, 0, 1, ticks_per_quarter)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack(">4sI", b"MTrk", len(track)))
        fh.write(track)
