"""CAN frame domain model, log parsing, and synthetic traffic generation.

Supported log formats:
  - research-dataset CSV: ``timestamp,ID_hex,DLC,byte0,...,byte{DLC-1},flag``
    with flag ``R`` (regular) or ``T`` (injected). The attack class is
    capture-level: one attack type per file, supplied by the caller.
  - candump text: ``(seconds.micros) iface IDHEX#PAYLOADHEX`` (unlabeled).

The synthetic generator produces seeded, reproducible captures of background
traffic drawn from a fixed dictionary of plausible IDs, optionally mixed
with one of four injection attacks (DoS flooding, fuzzing, RPM spoofing,
gear spoofing).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

MAX_CAN_ID = 1 << 29  # 29-bit extended identifier space
CAPTURE_FORMAT_VERSION = 1

DEFAULT_DOS_ID = 0x000
DEFAULT_RPM_SPOOF_ID = 0x316
DEFAULT_GEAR_SPOOF_ID = 0x43F
FUZZ_ID_BITS = 11  # fuzzed IDs are drawn from the standard 11-bit space


class ClassLabel(IntEnum):
    """Five traffic classes. Integer codes are stable across serialization."""

    NORMAL = 0
    DOS = 1
    FUZZING = 2
    RPM_SPOOF = 3
    GEAR_SPOOF = 4


class FrameFlag(Enum):
    NORMAL = "R"
    INJECTED = "T"


class ParseError(ValueError):
    """Base class for log-line parse failures."""


class MalformedLine(ParseError):
    """Line does not match the expected grammar (wrong field count, bad hex...)."""


class IdOutOfRange(ParseError):
    """CAN identifier does not fit in 29 bits."""


class DlcMismatch(ParseError):
    """Declared DLC is outside the valid 0..8 range."""


class OddHexDigits(MalformedLine):
    """candump payload has an odd number of hex digits."""


class EmptyProfile(ValueError):
    """Synthesis profile has zero duration or zero background rate."""


@dataclass(frozen=True)
class CanFrame:
    """One CAN message.

    Invariants enforced at construction: ``can_id`` fits in 29 bits, DLC is
    0..8 and equals the payload length, and the flag/class pair is
    consistent (NORMAL flag iff NORMAL class).
    """

    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    flag: FrameFlag = FrameFlag.NORMAL
    attack_class: ClassLabel = ClassLabel.NORMAL

    def __post_init__(self):
        if not 0 <= self.can_id < MAX_CAN_ID:
            raise ValueError(f"CAN id 0x{self.can_id:X} outside 29-bit range")
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"DLC {self.dlc} outside 0..8")
        if len(self.payload) != self.dlc:
            raise ValueError(
                f"payload length {len(self.payload)} does not match DLC {self.dlc}"
            )
        if (self.flag is FrameFlag.NORMAL) != (self.attack_class is ClassLabel.NORMAL):
            raise ValueError(
                f"flag {self.flag.name} inconsistent with class {self.attack_class.name}"
            )

    @property
    def injected(self) -> bool:
        return self.flag is FrameFlag.INJECTED


@dataclass(frozen=True)
class CaptureMeta:
    """Provenance and class census of a capture."""

    source: dict
    frame_count: int
    class_histogram: dict[ClassLabel, int]

    def __post_init__(self):
        if sum(self.class_histogram.values()) != self.frame_count:
            raise ValueError("class histogram does not sum to frame count")

    @staticmethod
    def synthetic(seed: int, frames: Sequence[CanFrame]) -> "CaptureMeta":
        return CaptureMeta(
            source={"kind": "synthetic", "seed": seed},
            frame_count=len(frames),
            class_histogram=_histogram(frames),
        )

    @staticmethod
    def from_file(path: str, frames: Sequence[CanFrame]) -> "CaptureMeta":
        return CaptureMeta(
            source={"kind": "file", "path": str(path)},
            frame_count=len(frames),
            class_histogram=_histogram(frames),
        )


def _histogram(frames: Iterable[CanFrame]) -> dict[ClassLabel, int]:
    hist = {label: 0 for label in ClassLabel}
    for f in frames:
        hist[f.attack_class] += 1
    return hist


# ---------------------------------------------------------------------------
# Dataset CSV format
# ---------------------------------------------------------------------------

def parse_dataset_csv(line: str, capture_class: ClassLabel = ClassLabel.NORMAL) -> CanFrame:
    """Parse one research-dataset CSV line.

    ``capture_class`` is the capture-level attack type; it is applied to
    'T'-flagged frames only. An injected frame in a capture declared NORMAL
    is a contradiction and raises MalformedLine.
    """
    fields = line.strip().split(",")
    if len(fields) < 4:
        raise MalformedLine(f"expected at least 4 fields, got {len(fields)}: {line!r}")

    ts_s, id_s, dlc_s = fields[0], fields[1], fields[2]
    try:
        timestamp = float(ts_s)
    except ValueError:
        raise MalformedLine(f"bad timestamp {ts_s!r}") from None
    try:
        dlc = int(dlc_s)
    except ValueError:
        raise MalformedLine(f"bad DLC field {dlc_s!r}") from None
    if not 0 <= dlc <= 8:
        raise DlcMismatch(f"DLC {dlc} outside 0..8")
    # Grammar: timestamp, id, dlc, exactly DLC payload bytes, flag.
    if len(fields) != 4 + dlc:
        raise MalformedLine(
            f"expected {4 + dlc} fields for DLC {dlc}, got {len(fields)}: {line!r}"
        )

    can_id = _parse_hex_id(id_s, min_digits=3, max_digits=8)
    payload = bytes(_parse_hex_byte(b) for b in fields[3 : 3 + dlc])

    flag_s = fields[-1]
    if flag_s == "R":
        return CanFrame(timestamp, can_id, dlc, payload)
    if flag_s == "T":
        if capture_class is ClassLabel.NORMAL:
            raise MalformedLine("injected frame in a capture declared NORMAL")
        return CanFrame(timestamp, can_id, dlc, payload, FrameFlag.INJECTED, capture_class)
    raise MalformedLine(f"bad flag {flag_s!r}, expected R or T")


def serialize_dataset_csv(frame: CanFrame) -> str:
    """Canonical dataset-CSV form: %.6f timestamp, zero-padded lowercase id
    (4 digits, 8 if the id needs more), lowercase payload bytes."""
    id_s = f"{frame.can_id:04x}" if frame.can_id < 0x10000 else f"{frame.can_id:08x}"
    parts = [f"{frame.timestamp:.6f}", id_s, str(frame.dlc)]
    parts.extend(f"{b:02x}" for b in frame.payload)
    parts.append(frame.flag.value)
    return ",".join(parts)


def _parse_hex_id(text: str, min_digits: int, max_digits: int) -> int:
    if not (min_digits <= len(text) <= max_digits) or not _is_hex(text):
        raise MalformedLine(f"bad CAN id field {text!r}")
    value = int(text, 16)
    if value >= MAX_CAN_ID:
        raise IdOutOfRange(f"CAN id 0x{value:X} outside 29-bit range")
    return value


def _parse_hex_byte(text: str) -> int:
    if len(text) != 2 or not _is_hex(text):
        raise MalformedLine(f"bad payload byte {text!r}")
    return int(text, 16)


def _is_hex(text: str) -> bool:
    return len(text) > 0 and all(c in "0123456789abcdefABCDEF" for c in text)


# ---------------------------------------------------------------------------
# candump text format
# ---------------------------------------------------------------------------

def parse_candump(line: str) -> CanFrame:
    """Parse one ``(seconds.micros) iface IDHEX#PAYLOADHEX`` line.

    candump logs carry no labels, so the frame is always NORMAL.
    """
    parts = line.strip().split()
    if len(parts) != 3:
        raise MalformedLine(f"expected '(ts) iface id#payload', got {line!r}")
    ts_s, _iface, body = parts
    if not (ts_s.startswith("(") and ts_s.endswith(")")):
        raise MalformedLine(f"bad timestamp field {ts_s!r}")
    try:
        timestamp = float(ts_s[1:-1])
    except ValueError:
        raise MalformedLine(f"bad timestamp {ts_s!r}") from None

    if "#" not in body:
        raise MalformedLine(f"missing '#' separator in {body!r}")
    id_s, pay_s = body.split("#", 1)
    can_id = _parse_hex_id(id_s, min_digits=3, max_digits=8)
    if pay_s and not _is_hex(pay_s):
        raise MalformedLine(f"bad payload hex {pay_s!r}")
    if len(pay_s) % 2 != 0:
        raise OddHexDigits(f"payload {pay_s!r} has an odd number of hex digits")
    if len(pay_s) > 16:
        raise MalformedLine(f"payload {pay_s!r} longer than 8 bytes")
    payload = bytes.fromhex(pay_s)
    return CanFrame(timestamp, can_id, len(payload), payload)


def serialize_candump(frame: CanFrame, iface: str = "can0") -> str:
    """Canonical candump form: 3-digit uppercase id for the 11-bit range,
    8-digit otherwise, uppercase payload hex."""
    id_s = f"{frame.can_id:03X}" if frame.can_id < 0x800 else f"{frame.can_id:08X}"
    return f"({frame.timestamp:.6f}) {iface} {id_s}#{frame.payload.hex().upper()}"


# ---------------------------------------------------------------------------
# Synthetic traffic
# ---------------------------------------------------------------------------

# Background dictionary: id -> (base payload, index of the slowly-walking
# byte, index of the rolling message counter byte). Loosely modeled on
# powertrain/body traffic; ids 0x316 and 0x43F are the legitimate carriers
# later abused by the spoofing attacks.
BACKGROUND_DICTIONARY: dict[int, tuple[bytes, int, int]] = {
    0x130: (bytes([0x10, 0x80, 0x00, 0xFF, 0x20, 0x00, 0x00, 0x00]), 2, 7),
    0x153: (bytes([0x00, 0x21, 0x10, 0xFF, 0x00, 0xFF, 0x00, 0x00]), 2, 7),
    0x220: (bytes([0x08, 0x00, 0x40, 0x00, 0x00, 0x00, 0x00, 0x00]), 1, 7),
    0x2B0: (bytes([0x40, 0x00, 0x7F, 0x00, 0x00, 0x00, 0x00, 0x00]), 2, 7),
    0x316: (bytes([0x05, 0x21, 0x50, 0x09, 0x21, 0x21, 0x00, 0x00]), 2, 7),
    0x329: (bytes([0x60, 0x00, 0x00, 0x14, 0x00, 0x00, 0x00, 0x00]), 3, 7),
    0x43F: (bytes([0x00, 0x40, 0x20, 0xFF, 0x00, 0x00, 0x00, 0x00]), 2, 7),
    0x545: (bytes([0xD8, 0x00, 0x00, 0x8B, 0x00, 0x00, 0x00, 0x00]), 3, 7),
    0x5A0: (bytes([0x00, 0x00, 0x00, 0x00, 0x00, 0x30, 0x00, 0x00]), 5, 7),
    0x690: (bytes([0x00, 0x00, 0x00, 0x00, 0xFF, 0x00, 0x00, 0x00]), 4, 7),
}

# Fabricated spoof payloads: a pinned extreme value in the walking byte and
# a dead counter, unlike anything the background dictionary emits.
RPM_SPOOF_PAYLOAD = bytes([0x05, 0x21, 0xFF, 0x09, 0x21, 0x21, 0x00, 0x00])
GEAR_SPOOF_PAYLOAD = bytes([0x00, 0x40, 0xBB, 0xFF, 0x00, 0x00, 0x00, 0x00])


@dataclass(frozen=True)
class SynthProfile:
    """Parameters of one synthetic capture (a single attack type per capture)."""

    attack: ClassLabel = ClassLabel.NORMAL
    duration_s: float = 10.0
    background_rate: float = 100.0
    injection_rate: float = 50.0
    attack_intervals: tuple[tuple[float, float], ...] | None = None
    dos_id: int = DEFAULT_DOS_ID
    rpm_spoof_id: int = DEFAULT_RPM_SPOOF_ID
    gear_spoof_id: int = DEFAULT_GEAR_SPOOF_ID

    def intervals(self) -> tuple[tuple[float, float], ...]:
        if self.attack is ClassLabel.NORMAL:
            return ()
        if self.attack_intervals is None:
            return ((0.0, self.duration_s),)
        return self.attack_intervals


def synth_capture(profile: SynthProfile, seed: int) -> list[CanFrame]:
    """Generate one capture, deterministic for a given (profile, seed).

    Background frames cycle through the fixed ID dictionary with slowly
    varying payload bytes. Injected frames carry the profile's attack class:
    DoS floods the highest-priority id with a zero payload, fuzzing draws
    uniform 11-bit ids and uniform payloads, and the spoofs replay a
    fabricated payload on their designated legitimate id at high rate.
    """
    if profile.duration_s <= 0 or profile.background_rate <= 0:
        raise EmptyProfile("profile needs positive duration and background rate")

    rng = random.Random(seed)
    frames: list[CanFrame] = []

    ids = sorted(BACKGROUND_DICTIONARY)
    walkers = {i: BACKGROUND_DICTIONARY[i][0][BACKGROUND_DICTIONARY[i][1]] for i in ids}
    counters = {i: 0 for i in ids}
    n_background = round(profile.duration_s * profile.background_rate)
    spacing = 1.0 / profile.background_rate
    for k in range(n_background):
        can_id = ids[rng.randrange(len(ids))]
        base, walk_at, count_at = BACKGROUND_DICTIONARY[can_id]
        walkers[can_id] = max(0, min(0x7F, walkers[can_id] + rng.randint(-3, 3)))
        counters[can_id] = (counters[can_id] + 1) % 256
        payload = bytearray(base)
        payload[walk_at] = walkers[can_id]
        payload[count_at] = counters[can_id]
        t = k * spacing + rng.uniform(0.0, spacing / 2)
        frames.append(CanFrame(t, can_id, 8, bytes(payload)))

    for start, end in profile.intervals():
        n_injected = round((end - start) * profile.injection_rate)
        inj_spacing = 1.0 / profile.injection_rate
        for k in range(n_injected):
            t = start + k * inj_spacing
            frames.append(_injected_frame(profile, rng, t))

    frames.sort(key=lambda f: f.timestamp)
    return frames


def _injected_frame(profile: SynthProfile, rng: random.Random, t: float) -> CanFrame:
    attack = profile.attack
    if attack is ClassLabel.DOS:
        return CanFrame(t, profile.dos_id, 8, bytes(8), FrameFlag.INJECTED, attack)
    if attack is ClassLabel.FUZZING:
        can_id = rng.randrange(1 << FUZZ_ID_BITS)
        payload = bytes(rng.randrange(256) for _ in range(8))
        return CanFrame(t, can_id, 8, payload, FrameFlag.INJECTED, attack)
    if attack is ClassLabel.RPM_SPOOF:
        return CanFrame(t, profile.rpm_spoof_id, 8, RPM_SPOOF_PAYLOAD, FrameFlag.INJECTED, attack)
    if attack is ClassLabel.GEAR_SPOOF:
        return CanFrame(t, profile.gear_spoof_id, 8, GEAR_SPOOF_PAYLOAD, FrameFlag.INJECTED, attack)
    raise ValueError(f"profile with attack {attack!r} cannot inject frames")


def synth_mixed_capture(
    profiles: Sequence[SynthProfile], seed: int
) -> list[CanFrame]:
    """Concatenate one capture per profile on a shared, increasing timeline."""
    frames: list[CanFrame] = []
    offset = 0.0
    for i, profile in enumerate(profiles):
        segment = synth_capture(profile, seed + i)
        frames.extend(replace(f, timestamp=f.timestamp + offset) for f in segment)
        offset += profile.duration_s
    return frames


# ---------------------------------------------------------------------------
# Capture container (newline-delimited, versioned JSON header)
# ---------------------------------------------------------------------------

def write_capture(path: str | Path, frames: Sequence[CanFrame], meta: CaptureMeta) -> None:
    """Write a capture: one JSON header line, then one record per frame.

    Records reuse the dataset-CSV grammar; injected records append the
    class code so a single container can hold mixed-attack traffic.
    """
    header = {
        "v": CAPTURE_FORMAT_VERSION,
        "source": meta.source,
        "frame_count": meta.frame_count,
        "class_histogram": {str(int(k)): v for k, v in meta.class_histogram.items()},
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for frame in frames:
            line = serialize_dataset_csv(frame)
            if frame.injected:
                line += f",{int(frame.attack_class)}"
            fh.write(line + "\n")


def read_capture(path: str | Path) -> tuple[CaptureMeta, list[CanFrame]]:
    with open(path) as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError:
            raise MalformedLine(f"bad capture header: {header_line!r}") from None
        if header.get("v") != CAPTURE_FORMAT_VERSION:
            raise MalformedLine(f"unsupported capture version {header.get('v')!r}")
        frames = [_parse_capture_record(line) for line in fh if line.strip()]
    hist = {ClassLabel(int(k)): v for k, v in header["class_histogram"].items()}
    for label in ClassLabel:
        hist.setdefault(label, 0)
    meta = CaptureMeta(header["source"], header["frame_count"], hist)
    if meta.frame_count != len(frames):
        raise MalformedLine(
            f"header claims {meta.frame_count} frames, file holds {len(frames)}"
        )
    return meta, frames


def _parse_capture_record(line: str) -> CanFrame:
    fields = line.strip().split(",")
    # Injected records carry a trailing class code after the T flag.
    if len(fields) >= 5 and fields[-2] == "T":
        try:
            label = ClassLabel(int(fields[-1]))
        except ValueError:
            raise MalformedLine(f"bad class code in record {line!r}") from None
        return parse_dataset_csv(",".join(fields[:-1]), capture_class=label)
    return parse_dataset_csv(line)


def load_frames(path: str | Path, capture_class: ClassLabel = ClassLabel.NORMAL) -> list[CanFrame]:
    """Load frames from a capture container, dataset CSV, or candump log.

    The format is sniffed from the first line. ``capture_class`` applies to
    'T' rows of a bare dataset CSV (capture containers carry their own
    class codes; candump logs are unlabeled).
    """
    with open(path) as fh:
        first = fh.readline()
        rest = fh.read()
    first_stripped = first.strip()
    if first_stripped.startswith("{"):
        return read_capture(path)[1]
    if first_stripped.startswith("("):
        lines = [first] + rest.splitlines()
        return [parse_candump(ln) for ln in lines if ln.strip()]
    lines = [first] + rest.splitlines()
    return [parse_dataset_csv(ln, capture_class) for ln in lines if ln.strip()]
