"""Binary feature construction: frames -> fixed-size 2-D bit matrices.

Each frame becomes a 93-bit row: 29 identifier bits (MSB first) followed by
the 8 payload bytes (each MSB first), zero-padded when DLC < 8. The DLC
itself is not encoded; frames differing only in trailing zero bytes encode
identically. W consecutive rows form one window, labeled NORMAL iff the
window contains no injected frame, otherwise with the class of the earliest
injected frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .frames import CanFrame, ClassLabel

ID_BITS = 29
PAYLOAD_BITS = 64
BITS_PER_FRAME = ID_BITS + PAYLOAD_BITS  # 93
DATASET_FORMAT_VERSION = 1


class ConfigInvalid(ValueError):
    """Window/split configuration violates its constraints."""


class EmptyInput(ValueError):
    """An operation that needs at least one element got none."""


@dataclass(frozen=True)
class WindowConfig:
    """Windowing parameters. Stride defaults to the window length
    (non-overlapping), streaming callers typically use stride 1."""

    window_len: int = 16
    stride: int | None = None

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigInvalid(f"window_len {self.window_len} < 1")
        if self.stride is not None and self.stride < 1:
            raise ConfigInvalid(f"stride {self.stride} < 1")

    @property
    def effective_stride(self) -> int:
        return self.window_len if self.stride is None else self.stride


@dataclass(frozen=True)
class FeatureWindow:
    """W x 93 binary matrix with a window-level class label."""

    bits: np.ndarray  # uint8, shape (W, BITS_PER_FRAME), entries in {0, 1}
    label: ClassLabel
    origin: tuple[str, int]  # (capture id, start frame index)

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.shape[1] != BITS_PER_FRAME:
            raise ValueError(f"bad window shape {self.bits.shape}")


def encode_frame(frame: CanFrame) -> np.ndarray:
    """Encode one frame as a 93-entry 0/1 vector."""
    return encode_frames([frame])[0]


def encode_frames(frames: Sequence[CanFrame]) -> np.ndarray:
    """Vectorized encoding of many frames, shape (n, 93) uint8."""
    n = len(frames)
    ids = np.fromiter((f.can_id for f in frames), dtype=np.uint32, count=n)
    shifts = np.arange(ID_BITS - 1, -1, -1, dtype=np.uint32)
    id_bits = ((ids[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    raw = b"".join(f.payload.ljust(8, b"\x00") for f in frames)
    payload = np.frombuffer(raw, dtype=np.uint8).reshape(n, 8)
    payload_bits = np.unpackbits(payload, axis=1)
    return np.concatenate([id_bits, payload_bits], axis=1)


def window_stream(
    frames: Sequence[CanFrame],
    cfg: WindowConfig = WindowConfig(),
    capture_id: str = "",
) -> list[FeatureWindow]:
    """Slice a time-ordered frame sequence into labeled feature windows.

    Any trailing remainder shorter than W is dropped. With stride == W the
    windows partition the prefix of length floor(n/W)*W.
    """
    w, stride = cfg.window_len, cfg.effective_stride
    n = len(frames)
    if n < w:
        return []
    bits = encode_frames(frames)
    classes = np.fromiter((int(f.attack_class) for f in frames), dtype=np.int64, count=n)
    windows = []
    for start in range(0, n - w + 1, stride):
        segment = classes[start : start + w]
        injected = np.flatnonzero(segment)
        label = ClassLabel(int(segment[injected[0]])) if injected.size else ClassLabel.NORMAL
        windows.append(FeatureWindow(bits[start : start + w], label, (capture_id, start)))
    return windows


def split_dataset(
    windows: Sequence[FeatureWindow],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[FeatureWindow], list[FeatureWindow], list[FeatureWindow]]:
    """Deterministic stratified train/val/test split.

    Within each class, indices are shuffled and allocated by largest
    remainder, so per-class proportions track the ratios as closely as
    integer counts allow.
    """
    if not windows:
        raise EmptyInput("no windows to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigInvalid(f"ratios {ratios} must be non-negative and sum to 1")

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, win in enumerate(windows):
        by_class.setdefault(int(win.label), []).append(i)

    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        idx = idx[rng.permutation(len(idx))]
        counts = _largest_remainder(len(idx), ratios)
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(idx[offset : offset + count].tolist())
            offset += count

    out = []
    for part in parts:
        order = rng.permutation(len(part))
        out.append([windows[part[j]] for j in order])
    return out[0], out[1], out[2]


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    exact = [total * r for r in ratios]
    counts = [int(e) for e in exact]
    leftovers = sorted(
        range(len(ratios)), key=lambda i: exact[i] - counts[i], reverse=True
    )
    for i in range(total - sum(counts)):
        counts[leftovers[i % len(ratios)]] += 1
    return counts


# ---------------------------------------------------------------------------
# Encoded dataset file: JSON header line, then per window the packed bitmap
# (row-major, MSB first within bytes) followed by one label byte.
# ---------------------------------------------------------------------------

def write_dataset(path: str | Path, windows: Sequence[FeatureWindow]) -> None:
    if not windows:
        raise EmptyInput("refusing to write an empty dataset")
    w = windows[0].bits.shape[0]
    hist = {str(int(label)): 0 for label in ClassLabel}
    for win in windows:
        if win.bits.shape[0] != w:
            raise ConfigInvalid("all windows in a dataset must share one window length")
        hist[str(int(win.label))] += 1
    header = {
        "v": DATASET_FORMAT_VERSION,
        "window_len": w,
        "bits_per_frame": BITS_PER_FRAME,
        "count": len(windows),
        "class_histogram": hist,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for win in windows:
            fh.write(np.packbits(win.bits.reshape(-1)).tobytes())
            fh.write(bytes([int(win.label)]))


def read_dataset(path: str | Path) -> tuple[dict, list[FeatureWindow]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("v") != DATASET_FORMAT_VERSION:
            raise ConfigInvalid(f"unsupported dataset version {header.get('v')!r}")
        w = header["window_len"]
        n_bits = w * header["bits_per_frame"]
        record = (n_bits + 7) // 8 + 1
        blob = fh.read()
    if len(blob) != record * header["count"]:
        raise ConfigInvalid(
            f"dataset body is {len(blob)} bytes, expected {record * header['count']}"
        )
    windows = []
    name = str(path)
    for i in range(header["count"]):
        chunk = blob[i * record : (i + 1) * record]
        bits = np.unpackbits(
            np.frombuffer(chunk[:-1], dtype=np.uint8), count=n_bits
        ).reshape(w, BITS_PER_FRAME)
        windows.append(FeatureWindow(bits, ClassLabel(chunk[-1]), (name, i)))
    return header, windows


def balanced_synthetic_windows(
    per_class: int,
    cfg: WindowConfig = WindowConfig(),
    seed: int = 0,
    background_rate: float = 100.0,
    injection_rate: float = 50.0,
) -> list[FeatureWindow]:
    """Seeded balanced dataset: ``per_class`` windows for each of the five
    classes, drawn from one synthetic capture per class."""
    from .frames import SynthProfile, synth_capture

    if per_class < 1:
        raise ConfigInvalid(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    windows: list[FeatureWindow] = []
    for label in ClassLabel:
        rate = background_rate + (injection_rate if label is not ClassLabel.NORMAL else 0.0)
        duration = 1.15 * per_class * cfg.window_len / rate  # slack for off-label windows
        profile = SynthProfile(
            attack=label,
            duration_s=duration,
            background_rate=background_rate,
            injection_rate=injection_rate,
        )
        capture = synth_capture(profile, seed=int(rng.integers(1 << 62)))
        candidates = [
            w
            for w in window_stream(capture, cfg, capture_id=f"synthetic:{label.name}")
            if w.label is label
        ]
        if len(candidates) < per_class:
            raise ConfigInvalid(
                f"could not form {per_class} {label.name} windows, got {len(candidates)}"
            )
        keep = rng.choice(len(candidates), size=per_class, replace=False)
        windows.extend(candidates[i] for i in sorted(keep))
    order = rng.permutation(len(windows))
    return [windows[i] for i in order]


def stack_windows(windows: Sequence[FeatureWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into (n, 1, W, B) uint8 inputs and (n,) int64 labels."""
    if not windows:
        raise EmptyInput("no windows to stack")
    x = np.stack([w.bits for w in windows])[:, None, :, :]
    y = np.fromiter((int(w.label) for w in windows), dtype=np.int64, count=len(windows))
    return x, y
