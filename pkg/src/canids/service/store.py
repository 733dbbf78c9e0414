"""Embedded persistence for the triage loop.

An append-only JSONL event log is the source of truth; a periodic JSON
snapshot bounds recovery time. Item status only ever moves Pending ->
Labeled or Pending -> Dismissed, and the log keeps the full audit trail.
"""

from __future__ import annotations

import base64
import json
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ..features import BITS_PER_FRAME, FeatureWindow
from ..frames import ClassLabel


class TriageStatus(Enum):
    PENDING = "pending"
    LABELED = "labeled"
    DISMISSED = "dismissed"


class StoreConflict(Exception):
    """Illegal status transition (item is no longer pending)."""


class UnknownItem(KeyError):
    pass


@dataclass
class TriageItem:
    id: str
    created_at: float
    bits: np.ndarray  # (W, BITS_PER_FRAME) uint8
    frames: list[str]  # raw frame records for display
    summary: dict  # prediction-export JSON for this window
    status: TriageStatus = TriageStatus.PENDING
    label: int | None = None
    engineer: str | None = None
    labeled_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "created_at": self.created_at,
            "window_len": int(self.bits.shape[0]),
            "bits_b64": base64.b64encode(np.packbits(self.bits.reshape(-1)).tobytes()).decode(),
            "frames": self.frames,
            "summary": self.summary,
            "status": self.status.value,
            "label": self.label,
            "engineer": self.engineer,
            "labeled_at": self.labeled_at,
        }

    @staticmethod
    def from_dict(d: dict) -> "TriageItem":
        n_bits = d["window_len"] * BITS_PER_FRAME
        packed = np.frombuffer(base64.b64decode(d["bits_b64"]), dtype=np.uint8)
        bits = np.unpackbits(packed, count=n_bits).reshape(d["window_len"], BITS_PER_FRAME)
        return TriageItem(
            id=d["id"],
            created_at=d["created_at"],
            bits=bits,
            frames=list(d["frames"]),
            summary=d["summary"],
            status=TriageStatus(d["status"]),
            label=d.get("label"),
            engineer=d.get("engineer"),
            labeled_at=d.get("labeled_at"),
        )


@dataclass
class TriageStore:
    """In-memory queue/label state backed by the event log."""

    root: Path
    snapshot_every: int = 200
    items: dict[str, TriageItem] = field(default_factory=dict)
    model_version: int = 1
    model_path: str | None = None
    seq: int = 0
    _since_snapshot: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "models").mkdir(exist_ok=True)
        self._recover()

    @property
    def events_path(self) -> Path:
        return self.root / "events.jsonl"

    @property
    def snapshot_path(self) -> Path:
        return self.root / "snapshot.json"

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        snap_seq = 0
        if self.snapshot_path.exists():
            snap = json.loads(self.snapshot_path.read_text())
            snap_seq = snap["seq"]
            self.seq = snap_seq
            self.model_version = snap["model_version"]
            self.model_path = snap.get("model_path")
            self.items = {d["id"]: TriageItem.from_dict(d) for d in snap["items"]}
        if self.events_path.exists():
            with open(self.events_path) as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    event = json.loads(line)
                    if event["seq"] > snap_seq:
                        self._apply(event)
                        self.seq = event["seq"]

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "item_added":
            item = TriageItem.from_dict(event["item"])
            self.items[item.id] = item
        elif kind == "item_labeled":
            item = self.items[event["id"]]
            item.status = TriageStatus.LABELED
            item.label = event["label"]
            item.engineer = event["engineer"]
            item.labeled_at = event["ts"]
        elif kind == "item_dismissed":
            item = self.items[event["id"]]
            item.status = TriageStatus.DISMISSED
            item.engineer = event["engineer"]
            item.labeled_at = event["ts"]
        elif kind == "model_swapped":
            self.model_version = event["version"]
            self.model_path = event.get("path")

    # -- event emission ----------------------------------------------------

    def _emit(self, event: dict) -> None:
        self.seq += 1
        event["seq"] = self.seq
        with open(self.events_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        self._apply(event)
        self._since_snapshot += 1
        if self._since_snapshot >= self.snapshot_every:
            self.write_snapshot()

    def write_snapshot(self) -> None:
        snap = {
            "seq": self.seq,
            "model_version": self.model_version,
            "model_path": self.model_path,
            "items": [item.to_dict() for item in self.items.values()],
        }
        tmp = self.snapshot_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(snap, sort_keys=True))
        tmp.replace(self.snapshot_path)
        self._since_snapshot = 0

    # -- operations --------------------------------------------------------

    def add_item(self, bits: np.ndarray, frames: list[str], summary: dict) -> TriageItem:
        item = TriageItem(
            id=uuid.uuid4().hex,
            created_at=time.time(),
            bits=np.asarray(bits, dtype=np.uint8),
            frames=frames,
            summary=summary,
        )
        self._emit({"type": "item_added", "item": item.to_dict()})
        return self.items[item.id]

    def label_item(self, item_id: str, label: int, engineer: str) -> TriageItem:
        item = self._pending(item_id)
        self._emit(
            {
                "type": "item_labeled",
                "id": item.id,
                "label": int(label),
                "engineer": engineer,
                "ts": time.time(),
            }
        )
        return item

    def dismiss_item(self, item_id: str, engineer: str) -> TriageItem:
        item = self._pending(item_id)
        self._emit(
            {"type": "item_dismissed", "id": item.id, "engineer": engineer, "ts": time.time()}
        )
        return item

    def _pending(self, item_id: str) -> TriageItem:
        if item_id not in self.items:
            raise UnknownItem(item_id)
        item = self.items[item_id]
        if item.status is not TriageStatus.PENDING:
            raise StoreConflict(f"item {item_id} is {item.status.value}")
        return item

    def record_model_swap(self, version: int, path: str) -> None:
        self._emit({"type": "model_swapped", "version": version, "path": path, "ts": time.time()})

    # -- queries -----------------------------------------------------------

    def by_status(self, status: TriageStatus) -> list[TriageItem]:
        out = [i for i in self.items.values() if i.status is status]
        out.sort(key=lambda i: (i.created_at, i.id))
        return out

    def labeled_windows(self) -> list[FeatureWindow]:
        out = []
        for i, item in enumerate(self.by_status(TriageStatus.LABELED)):
            out.append(
                FeatureWindow(item.bits, ClassLabel(item.label), ("triage", i))
            )
        return out
