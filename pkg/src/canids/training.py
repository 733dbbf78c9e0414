"""Minibatch training for both classifier modes, with metrics and curves.

Deterministic models minimize batch-mean cross-entropy. Weight-uncertain
models minimize the variational objective with the uniform rule
kl_weight = 1/num_batches, so the kl_weight values of one epoch sum to 1
and the per-epoch totals reproduce the dataset-level objective. Runs are
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import NumericalError, ShapeMismatch, Tensor
from .checkpoint import save_checkpoint
from .features import EmptyInput, FeatureWindow, stack_windows
from .models import Mode, ModelState, forward, predict_classes, run_layers
from .variational import PriorSpec, elbo_mc, kl_analytic_graph


class ConfigInvalid(ValueError):
    """Training configuration violates its constraints."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    s_train: int = 1
    kl_mode: str = "mc"  # "mc" (faithful estimator) or "analytic" (fast path)
    prior: PriorSpec = field(default_factory=PriorSpec)
    patience: int | None = None
    checkpoint_dir: str | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.s_train < 1:
            raise ConfigInvalid("epochs, batch_size and s_train must be positive")
        if self.learning_rate <= 0:
            raise ConfigInvalid(f"learning rate must be > 0, got {self.learning_rate}")
        if self.kl_mode not in ("mc", "analytic"):
            raise ConfigInvalid(f"unknown kl_mode {self.kl_mode!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigInvalid("patience must be positive when set")

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items() if k != "prior"}
        d["prior"] = self.prior.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        import dataclasses

        known = {f.name for f in dataclasses.fields(TrainConfig)}
        d = {k: v for k, v in d.items() if k in known}
        prior = d.pop("prior", None)
        if prior is not None:
            d["prior"] = PriorSpec.from_dict(prior)
        return TrainConfig(**d)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    kl: float = 0.0
    nll: float = 0.0


class Adam:
    """Adam with bias correction; moments are registered lazily on the
    first step and updates happen in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    @staticmethod
    def from_config(cfg: TrainConfig) -> "Adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None]) -> None:
        """One update. A None gradient counts as zero: the parameter stays
        put while its moments decay."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise ShapeMismatch(f"expected {len(self.m)} parameter tensors, got {len(params)}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape:
                raise ShapeMismatch(f"parameter {i} shape {p.shape} vs {self.m[i].shape}")
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise ShapeMismatch(f"gradient {i} shape {g.shape} vs {p.shape}")
            _kernels.adam_update(
                p, g, self.m[i], self.v[i],
                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2,
            )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: Adam
) -> None:
    state.step(params, grads)


def categorical_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.size == 0:
        raise EmptyInput("accuracy of an empty prediction set is undefined")
    return float((preds == labels).mean())


def train(
    state: ModelState,
    splits: tuple[Sequence[FeatureWindow], Sequence[FeatureWindow]],
    cfg: TrainConfig,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[ModelState, list[EpochMetrics]]:
    """Train in place and return (state, per-epoch metrics).

    One optimizer step per minibatch; per-epoch train metrics are the
    unweighted means over batches, val metrics come from a full pass with
    the posterior-mean weights (which for deterministic models are just
    the weights). Checkpoints ("last", plus "best" by val accuracy) are
    written when cfg.checkpoint_dir is set. A non-finite loss aborts with
    NumericalError; the last epoch's checkpoint remains on disk.
    """
    train_windows, val_windows = splits
    if not train_windows or not val_windows:
        raise EmptyInput("train and val splits must be non-empty")

    x_train, y_train = stack_windows(train_windows)
    x_val, y_val = stack_windows(val_windows)
    bayesian = state.spec.mode is Mode.BAYESIAN

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam.from_config(cfg)
    tensors = state.trainable_tensors()
    arrays = [t.data for t in tensors]

    n = len(train_windows)
    num_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    kl_weight = 1.0 / num_batches

    metrics: list[EpochMetrics] = []
    best_val = -1.0
    stale = 0
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        loss_acc = kl_acc = nll_acc = 0.0
        correct = 0
        for b in range(num_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = x_train[idx].astype(np.float64)
            y = y_train[idx]
            ad.zero_grads(tensors)
            try:
                if bayesian:
                    loss, log_probs, kl_val, nll_val = _bayes_batch_loss(
                        state, x, y, cfg, kl_weight, rng
                    )
                else:
                    log_probs = forward(state, x)
                    loss = ad.cross_entropy(log_probs, y)
                    kl_val, nll_val = 0.0, loss.item()
                loss.backward()
            except NumericalError as err:
                raise NumericalError(
                    f"training aborted at epoch {state.epoch + 1}: {err}"
                ) from err
            optimizer.step(arrays, [t.grad for t in tensors])
            loss_acc += loss.item()
            kl_acc += kl_val
            nll_acc += nll_val
            correct += int((predict_classes(log_probs) == y).sum())

        state.epoch += 1
        val_loss, val_acc = evaluate(state, x_val, y_val, cfg.eval_batch_size)
        em = EpochMetrics(
            epoch=state.epoch,
            train_loss=loss_acc / num_batches,
            train_acc=correct / n,
            val_loss=val_loss,
            val_acc=val_acc,
            kl=kl_acc / num_batches,
            nll=nll_acc / num_batches,
        )
        metrics.append(em)
        if on_epoch:
            on_epoch(em)

        if ckpt_dir:
            save_checkpoint(ckpt_dir / "last.npz", state, cfg.prior, cfg)
            if em.val_acc > best_val:
                save_checkpoint(ckpt_dir / "best.npz", state, cfg.prior, cfg)
        if em.val_acc > best_val:
            best_val = em.val_acc
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break

    return state, metrics


def _bayes_batch_loss(state, x, y, cfg, kl_weight, rng):
    thetas = state.variational_params()
    model_forward = lambda bx, samples: forward(state, bx, sample=samples)
    if cfg.kl_mode == "analytic":
        parts = elbo_mc(
            thetas, cfg.prior, (x, y), model_forward,
            s_samples=cfg.s_train, kl_weight=0.0, rng=rng,
        )
        kl_graph = kl_analytic_graph(thetas[0], cfg.prior)
        for t in thetas[1:]:
            kl_graph = kl_graph + kl_analytic_graph(t, cfg.prior)
        loss = kl_weight * kl_graph + parts.loss
        return loss, parts.log_probs, kl_graph.item(), parts.nll
    parts = elbo_mc(
        thetas, cfg.prior, (x, y), model_forward,
        s_samples=cfg.s_train, kl_weight=kl_weight, rng=rng,
    )
    return parts.loss, parts.log_probs, parts.kl, parts.nll


def evaluate(
    state: ModelState, x: np.ndarray, y: np.ndarray, batch_size: int = 512
) -> tuple[float, float]:
    """Cross-entropy and accuracy with posterior-mean (or plain) weights."""
    total_nll = 0.0
    correct = 0
    if state.spec.mode is Mode.BAYESIAN:
        # zero noise makes w = mu exactly; no graph needed for evaluation
        weights = [Tensor(theta.mu.data) for theta in state.variational_params()]
    else:
        weights = [Tensor(p.data) for p in state.params]
    for start in range(0, len(y), batch_size):
        bx = x[start : start + batch_size].astype(np.float64)
        by = y[start : start + batch_size]
        log_probs = run_layers(state.spec, weights, bx)
        total_nll += ad.cross_entropy(log_probs, by).item() * len(by)
        correct += int((predict_classes(log_probs) == by).sum())
    return total_nll / len(y), correct / len(y)


# ---------------------------------------------------------------------------
# Metrics export: CSV plus one SVG line chart per metric column.
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("train_loss", "train_acc", "val_loss", "val_acc", "kl", "nll")


def export_curves(metrics: Sequence[EpochMetrics], out_dir: str | Path) -> list[Path]:
    """Write metrics.csv and per-metric SVG charts; output is byte-stable
    for identical inputs. Returns the written paths."""
    if not metrics:
        raise EmptyInput("no metrics to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "metrics.csv"]
    with open(paths[0], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch",) + METRIC_COLUMNS)
        for m in metrics:
            writer.writerow(
                [m.epoch] + [repr(getattr(m, col)) for col in METRIC_COLUMNS]
            )
    epochs = [m.epoch for m in metrics]
    for col in METRIC_COLUMNS:
        path = out_dir / f"{col}.svg"
        _write_line_chart(path, epochs, [getattr(m, col) for m in metrics], col)
        paths.append(path)
    return paths


def parse_metrics_csv(path: str | Path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochMetrics(
                epoch=int(row["epoch"]),
                **{col: float(row[col]) for col in METRIC_COLUMNS},
            )
            for row in reader
        ]


def _write_line_chart(path: Path, xs: Sequence[float], ys: Sequence[float], title: str) -> None:
    width, height, margin = 640, 400, 50
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>\n'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>\n'
        f'<text x="{margin}" y="{height - margin + 20}" font-size="11" '
        f'font-family="sans-serif">{x_lo:g}</text>\n'
        f'<text x="{width - margin}" y="{height - margin + 20}" text-anchor="end" '
        f'font-size="11" font-family="sans-serif">{x_hi:g}</text>\n'
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" font-size="11" '
        f'font-family="sans-serif">{y_lo:.6g}</text>\n'
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" font-size="11" '
        f'font-family="sans-serif">{y_hi:.6g}</text>\n'
        f'<polyline points="{points}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>\n'
        f"</svg>\n"
    )
    with open(path, "w") as fh:
        fh.write(svg)
