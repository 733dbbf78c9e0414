"""Runtime core behind the HTTP layer: rolling window buffers, model slot
with atomic version swap, triage queue wiring, and the async retrain job.

Ingestion keeps serving the old model while a retrain runs; the swap is a
single slot replacement under the lock, so any one request is answered
entirely by one model version.
"""

from __future__ import annotations

import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..checkpoint import load_checkpoint, save_checkpoint
from ..features import (
    BITS_PER_FRAME,
    FeatureWindow,
    encode_frames,
    read_dataset,
    split_dataset,
)
from ..frames import CanFrame, ClassLabel, serialize_dataset_csv
from ..models import Mode, ModelSpec, ModelState, init_model, run_layers
from ..training import EpochMetrics, TrainConfig, train
from ..uncertainty import (
    TriagePolicy,
    derive_window_seed,
    deterministic_summary,
    mc_predict,
    prediction_export,
    triage_decide,
)
from .config import ServiceConfig
from .store import TriageStatus, TriageStore


class RetrainConflict(Exception):
    """A retrain job is already running."""


class NoTrainingData(Exception):
    """Neither a base dataset nor labeled windows are available."""


@dataclass
class ModelSlot:
    version: int
    state: ModelState
    path: str | None = None
    last_training: list[EpochMetrics] | None = None


@dataclass
class RetrainJob:
    id: str
    state: str = "running"  # running | succeeded | failed
    progress: float = 0.0
    error: str | None = None
    model_version: int | None = None


@dataclass
class _StreamBuffer:
    frames: deque
    total: int = 0


@dataclass
class IngestResult:
    windows_formed: int
    results: list[dict] = field(default_factory=list)


class ServiceRuntime:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.policy = TriagePolicy(config.max_prob_threshold, config.entropy_threshold)
        self.store = TriageStore(config.store_dir, snapshot_every=config.snapshot_every)
        self.lock = threading.RLock()
        self._buffers: dict[str, _StreamBuffer] = {}
        self._jobs: dict[str, RetrainJob] = {}
        self._active_job: RetrainJob | None = None
        self._slot = self._initial_slot()

    # -- model slot ---------------------------------------------------------

    def _initial_slot(self) -> ModelSlot:
        path = self.store.model_path or self.config.model_path
        if path:
            state, _meta = load_checkpoint(path)
            return ModelSlot(version=self.store.model_version, state=state, path=path)
        spec = ModelSpec(
            input_shape=(1, self.config.window_len, BITS_PER_FRAME), mode=Mode.BAYESIAN
        )
        return ModelSlot(
            version=self.store.model_version,
            state=init_model(spec, seed=self.config.root_seed),
        )

    def model_slot(self) -> ModelSlot:
        with self.lock:
            return self._slot

    def model_info(self) -> dict:
        slot = self.model_slot()
        spec = slot.state.spec
        last = None
        if slot.last_training:
            final = slot.last_training[-1]
            last = {
                "epochs": len(slot.last_training),
                "train_acc": final.train_acc,
                "val_acc": final.val_acc,
                "train_loss": final.train_loss,
                "val_loss": final.val_loss,
            }
        with self.lock:
            labeled = len(self.store.labeled_windows())
            pending = len(self.store.by_status(TriageStatus.PENDING))
        return {
            "version": slot.version,
            "mode": spec.mode.value,
            "input_shape": list(spec.input_shape),
            "layers": [type(layer).__name__ for layer in spec.layers],
            "policy": {
                "max_prob_threshold": self.policy.max_prob_threshold,
                "entropy_threshold": self.policy.entropy_threshold,
            },
            "labeled_count": labeled,
            "pending_count": pending,
            "last_training": last,
        }

    # -- ingestion ----------------------------------------------------------

    def ingest(self, stream_id: str, frames: list[CanFrame], labeled: bool) -> IngestResult:
        cfg = self.config
        with self.lock:
            buf = self._buffers.setdefault(
                stream_id, _StreamBuffer(frames=deque(maxlen=cfg.window_len))
            )
            windows: list[tuple[str, list[CanFrame]]] = []
            for frame in frames:
                buf.frames.append(frame)
                buf.total += 1
                if (
                    buf.total >= cfg.window_len
                    and (buf.total - cfg.window_len) % cfg.stride == 0
                ):
                    start = buf.total - cfg.window_len
                    windows.append((f"{stream_id}:{start}", list(buf.frames)))
            slot = self._slot

        result = IngestResult(windows_formed=len(windows))
        for window_id, window_frames in windows:
            bits = encode_frames(window_frames)
            summary = self._classify(slot.state, bits, window_id)
            decision = triage_decide(summary, self.policy)
            true_label = _window_label(window_frames) if labeled else None
            export = prediction_export(window_id, summary, decision, true_label)
            export["model_version"] = slot.version
            if decision.flagged:
                frame_rows = [serialize_dataset_csv(f) for f in window_frames]
                with self.lock:
                    item = self.store.add_item(bits, frame_rows, export)
                export["triage_id"] = item.id
            result.results.append(export)
        return result

    def _classify(self, state: ModelState, bits: np.ndarray, window_id: str):
        if state.spec.mode is Mode.BAYESIAN:
            seed = derive_window_seed(self.config.root_seed, window_id)
            return mc_predict(state, bits, s=self.config.mc_samples, seed=seed)
        from ..autodiff import Tensor

        weights = [Tensor(p.data) for p in state.params]
        log_probs = run_layers(state.spec, weights, bits[None, None, :, :].astype(np.float64))
        return deterministic_summary(log_probs.data[0])

    # -- retraining ---------------------------------------------------------

    def start_retrain(self, overrides: dict | None = None) -> RetrainJob:
        with self.lock:
            if self._active_job is not None and self._active_job.state == "running":
                raise RetrainConflict("a retrain job is already running")
            base = self._base_windows()
            labeled = self.store.labeled_windows()
            if not base and not labeled:
                raise NoTrainingData("labeled store is empty and no base dataset configured")
            job = RetrainJob(id=uuid.uuid4().hex)
            self._jobs[job.id] = job
            self._active_job = job
        windows = base + labeled
        thread = threading.Thread(
            target=self._retrain_worker, args=(job, windows, overrides or {}), daemon=True
        )
        thread.start()
        return job

    def job_status(self, job_id: str) -> RetrainJob | None:
        with self.lock:
            return self._jobs.get(job_id)

    def _base_windows(self) -> list[FeatureWindow]:
        if not self.config.base_data_path:
            return []
        _, windows = read_dataset(self.config.base_data_path)
        return windows

    def _retrain_worker(self, job: RetrainJob, windows: list[FeatureWindow], overrides: dict):
        try:
            slot = self.model_slot()
            cfg = TrainConfig(
                epochs=int(overrides.get("epochs", self.config.retrain_epochs)),
                batch_size=int(overrides.get("batch_size", self.config.retrain_batch_size)),
                learning_rate=float(overrides.get("learning_rate", 1e-3)),
                seed=int(overrides.get("seed", self.config.root_seed)),
            )
            if len(windows) < 10:
                # tiny label-only stores still retrain: lean on a pure split
                train_part = windows
                val_part = windows
            else:
                train_part, val_part, _ = split_dataset(windows, (0.8, 0.1, 0.1), seed=cfg.seed)
            state = init_model(slot.state.spec, seed=cfg.seed)

            def on_epoch(metrics: EpochMetrics) -> None:
                job.progress = metrics.epoch / cfg.epochs

            state, history = train(state, (train_part, val_part), cfg, on_epoch=on_epoch)
            with self.lock:
                new_version = self._slot.version + 1
                path = self.store.root / "models" / f"v{new_version}.npz"
                save_checkpoint(path, state, cfg.prior, cfg)
                self.store.record_model_swap(new_version, str(path))
                self._slot = ModelSlot(
                    version=new_version, state=state, path=str(path), last_training=history
                )
                job.state = "succeeded"
                job.progress = 1.0
                job.model_version = new_version
        except Exception as err:  # noqa: BLE001 - job must record any failure
            job.state = "failed"
            job.error = f"{type(err).__name__}: {err}"
        finally:
            with self.lock:
                if self._active_job is job:
                    self._active_job = None


def _window_label(frames: list[CanFrame]) -> ClassLabel:
    for frame in frames:
        if frame.injected:
            return frame.attack_class
    return ClassLabel.NORMAL
