"""Versioned model checkpoints: layer topology, weights (plain, or mu/rho
pairs), prior, training config, and RNG seed lineage in one npz container."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import Mode, ModelSpec, ModelState
from .variational import GaussianVariationalParam, PriorSpec

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    prior: PriorSpec | None = None,
    train_config=None,
    seed_lineage: list | None = None,
) -> None:
    meta = {
        "v": CHECKPOINT_VERSION,
        "spec": state.spec.to_dict(),
        "epoch": state.epoch,
        "prior": (prior or PriorSpec()).to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "seed_lineage": seed_lineage or [],
    }
    arrays: dict[str, np.ndarray] = {}
    for i, p in enumerate(state.params):
        if state.spec.mode is Mode.DETERMINISTIC:
            arrays[f"param{i}"] = p.data
        else:
            arrays[f"param{i}_mu"] = p.mu.data
            arrays[f"param{i}_rho"] = p.rho.data
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)  # atomic on POSIX: readers never see a partial file


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    """Returns the reconstructed state and the metadata dict (with
    ``prior`` already parsed into a PriorSpec)."""
    with np.load(path) as npz:
        meta = json.loads(str(npz["meta"]))
        if meta.get("v") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('v')!r}")
        spec = ModelSpec.from_dict(meta["spec"])
        params = []
        i = 0
        while (spec.mode is Mode.DETERMINISTIC and f"param{i}" in npz) or (
            spec.mode is Mode.BAYESIAN and f"param{i}_mu" in npz
        ):
            if spec.mode is Mode.DETERMINISTIC:
                params.append(ad.parameter(npz[f"param{i}"]))
            else:
                params.append(
                    GaussianVariationalParam(npz[f"param{i}_mu"], npz[f"param{i}_rho"])
                )
            i += 1
    state = ModelState(spec=spec, params=params, epoch=meta["epoch"])
    # Sanity: the stored arrays must match the declared topology.
    from .models import _param_shapes

    expected = [shape for _, _, shape in _param_shapes(spec)]
    actual = [tuple(p.shape) if spec.mode is Mode.BAYESIAN else tuple(p.data.shape) for p in params]
    if expected != actual:
        raise ValueError(f"checkpoint arrays {actual} do not match topology {expected}")
    meta["prior"] = PriorSpec.from_dict(meta["prior"])
    return state, meta
