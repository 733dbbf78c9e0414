"""Monte Carlo predictive summaries and confidence-based triage.

A weight-uncertain model is sampled S times per window; the resulting
softmax rows are reduced to a mean distribution, per-class sample spread,
predictive entropy of the mean (nats), and the Pearson correlation between
class-probability columns across samples. Because the mean probabilities
are normalized they overstate confidence on their own, so the summary
always carries the spread and entropy alongside, and the triage policy
flags windows whose top mean probability is low or whose entropy is high.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .frames import ClassLabel
from .models import (
    NUM_CLASSES,
    Mode,
    ModelState,
    ModeMismatch,
    run_layers,
    sample_weight_values,
)

MAX_ENTROPY = math.log(NUM_CLASSES)
_ZERO_VAR_STD = 1e-12  # columns spread less than this count as constant


class TooFewSamples(ValueError):
    """Sample statistics need at least two Monte Carlo draws."""


class TriageReason(Enum):
    LOW_MAX_PROB = "low_max_prob"
    HIGH_ENTROPY = "high_entropy"


@dataclass(frozen=True)
class TriagePolicy:
    """Flag a window when mean-max probability < tau OR entropy > eta."""

    max_prob_threshold: float = 0.9
    entropy_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.max_prob_threshold <= 1.0:
            raise ValueError(f"max_prob_threshold {self.max_prob_threshold} outside (0, 1]")
        if not 0.0 <= self.entropy_threshold <= MAX_ENTROPY:
            raise ValueError(
                f"entropy_threshold {self.entropy_threshold} outside [0, ln {NUM_CLASSES}]"
            )


@dataclass(frozen=True)
class TriageDecision:
    flagged: bool
    predicted: ClassLabel
    reasons: tuple[TriageReason, ...]


@dataclass(frozen=True)
class PredictiveSummary:
    """Statistics of S softmax samples for one window."""

    s: int
    probs: np.ndarray  # (S, NUM_CLASSES)
    mean: np.ndarray  # (NUM_CLASSES,)
    std: np.ndarray  # (NUM_CLASSES,), unbiased per-class sample std
    entropy: float  # H(mean) in nats
    predicted: ClassLabel
    corr: np.ndarray  # (NUM_CLASSES, NUM_CLASSES)

    def __post_init__(self):
        if self.probs.shape != (self.s, NUM_CLASSES):
            raise ValueError(f"probs shape {self.probs.shape} != ({self.s}, {NUM_CLASSES})")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("every probs row must sum to 1")
        if abs(self.mean.sum() - 1.0) > 1e-9:
            raise ValueError("mean must sum to 1")
        if not -1e-12 <= self.entropy <= MAX_ENTROPY + 1e-12:
            raise ValueError(f"entropy {self.entropy} outside [0, ln {NUM_CLASSES}]")
        if not np.allclose(self.corr, self.corr.T) or not np.allclose(
            np.diag(self.corr), 1.0
        ):
            raise ValueError("corr must be symmetric with unit diagonal")


def entropy_nats(dist: np.ndarray) -> float:
    """Shannon entropy with the 0*log(0) = 0 convention."""
    dist = np.asarray(dist, dtype=np.float64)
    nz = dist[dist > 0]
    return float(-(nz * np.log(nz)).sum())


def correlation_matrix(probs: np.ndarray) -> np.ndarray:
    """Pearson correlation between class-probability columns across the S
    samples. A zero-variance column keeps its unit diagonal and gets zero
    off-diagonals so the matrix stays well-defined for near-deterministic
    posteriors."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 sample rows, got shape {probs.shape}")
    s = probs.shape[0]
    centered = probs - probs.mean(axis=0)
    cov = centered.T @ centered / (s - 1)
    std = np.sqrt(np.diag(cov))
    live = std > _ZERO_VAR_STD
    corr = np.zeros_like(cov)
    if live.any():
        denom = np.outer(std[live], std[live])
        corr[np.ix_(live, live)] = np.clip(cov[np.ix_(live, live)] / denom, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def summarize_probs(probs: np.ndarray) -> PredictiveSummary:
    """Reduce S softmax rows into a PredictiveSummary."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 sample rows, got shape {probs.shape}")
    mean = probs.mean(axis=0)
    std = probs.std(axis=0, ddof=1)
    return PredictiveSummary(
        s=probs.shape[0],
        probs=probs,
        mean=mean,
        std=std,
        entropy=entropy_nats(mean),
        predicted=ClassLabel(int(mean.argmax())),
        corr=correlation_matrix(probs),
    )


def mc_predict(
    state: ModelState,
    window_bits: np.ndarray,
    s: int = 30,
    seed: int = 0,
) -> PredictiveSummary:
    """S independent weight draws for one window of bits (W, B)."""
    if state.spec.mode is not Mode.BAYESIAN:
        raise ModeMismatch("mc_predict needs a bayesian model state")
    if s < 2:
        raise TooFewSamples(f"need s >= 2, got {s}")
    if window_bits.shape != tuple(state.spec.input_shape[1:]):
        raise ValueError(
            f"window shape {window_bits.shape} != {tuple(state.spec.input_shape[1:])}"
        )
    x = window_bits[None, None, :, :].astype(np.float64)
    rng = np.random.default_rng(seed)
    probs = np.empty((s, NUM_CLASSES))
    for i in range(s):
        weights = sample_weight_values(state, rng)
        probs[i] = np.exp(run_layers(state.spec, weights, x).data[0])
    return summarize_probs(probs)


def mc_predict_batch(
    state: ModelState,
    x: np.ndarray,
    s: int = 30,
    seed: int = 0,
    batch_size: int = 256,
) -> list[PredictiveSummary]:
    """Summaries for a whole (n, 1, W, B) batch.

    For tractability the S weight draws are shared across the batch
    (standard practice); results depend only on (seed, s), not on how
    windows are grouped into batches.
    """
    if state.spec.mode is not Mode.BAYESIAN:
        raise ModeMismatch("mc_predict_batch needs a bayesian model state")
    if s < 2:
        raise TooFewSamples(f"need s >= 2, got {s}")
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    probs = np.empty((s, n, NUM_CLASSES))
    for i in range(s):
        weights = sample_weight_values(state, rng)
        for start in range(0, n, batch_size):
            bx = x[start : start + batch_size].astype(np.float64)
            probs[i, start : start + len(bx)] = np.exp(
                run_layers(state.spec, weights, bx).data
            )
    return [summarize_probs(probs[:, j]) for j in range(n)]


def derive_window_seed(root_seed: int, window_id: str | int) -> int:
    """Stable per-window seed: prediction of one window is reproducible
    from (root seed, window id) regardless of arrival order."""
    digest = hashlib.sha256(f"{root_seed}:{window_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def triage_decide(summary: PredictiveSummary, policy: TriagePolicy) -> TriageDecision:
    """Flag iff mean-max < tau or entropy > eta, with the firing rules listed."""
    reasons = []
    if float(summary.mean.max()) < policy.max_prob_threshold:
        reasons.append(TriageReason.LOW_MAX_PROB)
    if summary.entropy > policy.entropy_threshold:
        reasons.append(TriageReason.HIGH_ENTROPY)
    return TriageDecision(
        flagged=bool(reasons), predicted=summary.predicted, reasons=tuple(reasons)
    )


def prediction_export(
    window_id: str,
    summary: PredictiveSummary,
    decision: TriageDecision,
    true_label: ClassLabel | None = None,
) -> dict:
    """The JSON object consumed by the CLI exporter and the triage UI."""
    out = {
        "window_id": window_id,
        "predicted": int(decision.predicted),
        "mean": [float(v) for v in summary.mean],
        "std": [float(v) for v in summary.std],
        "entropy": float(summary.entropy),
        "corr": [[float(v) for v in row] for row in summary.corr],
        "flagged": decision.flagged,
        "reasons": [r.value for r in decision.reasons],
    }
    if true_label is not None:
        out["true_label"] = int(true_label)
    return out


def deterministic_summary(log_probs_row: np.ndarray) -> PredictiveSummary:
    """Degenerate summary for a deterministic model: two identical sample
    rows, zero spread, identity correlation (zero-variance rule)."""
    p = np.exp(np.asarray(log_probs_row, dtype=np.float64))
    return summarize_probs(np.stack([p, p]))
