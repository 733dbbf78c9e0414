"""Model assembly: forward contracts, mode reduction, checkpointing."""

import numpy as np
import pytest

from canids.autodiff import ShapeMismatch
from canids.checkpoint import load_checkpoint, save_checkpoint
from canids.models import (
    ConvSpec,
    DenseSpec,
    FlattenSpec,
    LogSoftmaxSpec,
    MaxPoolSpec,
    Mode,
    ModeMismatch,
    ModelSpec,
    ReluSpec,
    default_layers,
    draw_sample,
    forward,
    infer_shapes,
    init_model,
    predict_classes,
)
from canids.variational import PriorSpec


def tiny_spec(mode=Mode.DETERMINISTIC, w=6, b=8):
    return ModelSpec(
        input_shape=(1, w, b),
        layers=(
            ConvSpec(filters=2, kernel=3, stride=1, padding=1),
            ReluSpec(),
            MaxPoolSpec(size=2),
            FlattenSpec(),
            DenseSpec(units=4),
            ReluSpec(),
            DenseSpec(units=5),
            LogSoftmaxSpec(),
        ),
        mode=mode,
    )


def test_default_spec_shapes_chain():
    spec = ModelSpec()
    shapes = infer_shapes(spec)
    assert shapes[0] == (1, 16, 93)
    assert shapes[-1] == (5,)
    assert (8, 16, 93) in shapes  # conv keeps spatial size at pad 1
    assert (8, 8, 46) in shapes  # pool halves and drops the odd column


def test_spec_must_end_in_five_way_log_softmax():
    with pytest.raises(ShapeMismatch):
        ModelSpec(layers=(FlattenSpec(), DenseSpec(units=4), LogSoftmaxSpec()))
    with pytest.raises(ShapeMismatch):
        ModelSpec(layers=(FlattenSpec(), DenseSpec(units=5)))


def test_spec_dict_roundtrip():
    spec = tiny_spec(Mode.BAYESIAN)
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec


def test_zero_weights_give_uniform_rows():
    state = init_model(tiny_spec(), seed=0)
    for p in state.params:
        p.data[...] = 0.0
    rng = np.random.default_rng(1)
    x = rng.integers(0, 2, size=(3, 1, 6, 8)).astype(np.float64)
    out = forward(state, x)
    np.testing.assert_allclose(out.data, np.log(0.2), atol=1e-12)


def test_rows_normalize_for_random_weights():
    state = init_model(tiny_spec(), seed=2)
    rng = np.random.default_rng(3)
    x = rng.integers(0, 2, size=(4, 1, 6, 8)).astype(np.float64)
    out = forward(state, x)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-9)


def test_forward_rejects_wrong_batch_shape():
    state = init_model(tiny_spec(), seed=0)
    with pytest.raises(ShapeMismatch):
        forward(state, np.zeros((2, 1, 5, 8)))


def test_bayesian_eps_zero_equals_deterministic_at_mu():
    rng = np.random.default_rng(5)
    det = init_model(tiny_spec(Mode.DETERMINISTIC), seed=7)
    bay = init_model(tiny_spec(Mode.BAYESIAN), seed=11)
    for det_p, bay_p in zip(det.params, bay.params):
        det_p.data[...] = bay_p.mu.data
    x = rng.integers(0, 2, size=(5, 1, 6, 8)).astype(np.float64)
    sample = draw_sample(bay, PriorSpec(), eps=[np.zeros(p.shape) for p in bay.params])
    out_bay = forward(bay, x, sample=sample)
    out_det = forward(det, x)
    np.testing.assert_array_equal(out_bay.data, out_det.data)


def test_forward_mode_guards():
    det = init_model(tiny_spec(Mode.DETERMINISTIC), seed=0)
    bay = init_model(tiny_spec(Mode.BAYESIAN), seed=0)
    x = np.zeros((1, 1, 6, 8))
    sample = draw_sample(bay, PriorSpec(), eps=[np.zeros(p.shape) for p in bay.params])
    with pytest.raises(ModeMismatch):
        forward(det, x, sample=sample)
    with pytest.raises(ValueError):
        forward(bay, x)  # no sample and no rng


def test_bayesian_forward_draws_when_given_rng():
    bay = init_model(tiny_spec(Mode.BAYESIAN), seed=0)
    x = np.zeros((2, 1, 6, 8))
    out1 = forward(bay, x, rng=np.random.default_rng(1))
    out2 = forward(bay, x, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(out1.data, out2.data)


def test_predict_classes_tie_break():
    row = np.log(np.array([[0.9, 0.025, 0.025, 0.025, 0.025]]))
    assert predict_classes(row).tolist() == [0]
    tie = np.array([[-3.0, -1.0, -1.0, -4.0, -4.0]])
    assert predict_classes(tie).tolist() == [1]
    uniform = np.full((1, 5), np.log(0.2))
    assert predict_classes(uniform).tolist() == [0]


def test_deterministic_init_is_seeded():
    a = init_model(tiny_spec(), seed=4)
    b = init_model(tiny_spec(), seed=4)
    c = init_model(tiny_spec(), seed=5)
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.params, c.params))


def test_bayesian_init_values():
    state = init_model(tiny_spec(Mode.BAYESIAN), seed=6)
    for p in state.params:
        assert np.all(np.abs(p.mu.data) <= 0.1)
        np.testing.assert_array_equal(p.rho.data, np.full(p.shape, -3.0))


class TestCheckpoint:
    def test_deterministic_roundtrip(self, tmp_path):
        state = init_model(tiny_spec(), seed=8)
        path = tmp_path / "det.npz"
        save_checkpoint(path, state, seed_lineage=[8])
        loaded, meta = load_checkpoint(path)
        assert meta["seed_lineage"] == [8]
        assert loaded.spec == state.spec
        x = np.random.default_rng(9).integers(0, 2, size=(2, 1, 6, 8)).astype(float)
        np.testing.assert_array_equal(forward(loaded, x).data, forward(state, x).data)

    def test_bayesian_roundtrip_preserves_posterior(self, tmp_path):
        state = init_model(tiny_spec(Mode.BAYESIAN), seed=10)
        state.epoch = 17
        path = tmp_path / "bay.npz"
        save_checkpoint(path, state, prior=PriorSpec(sigma=1.5))
        loaded, meta = load_checkpoint(path)
        assert loaded.epoch == 17
        assert meta["prior"].sigma == 1.5
        for a, b in zip(state.params, loaded.params):
            np.testing.assert_array_equal(a.mu.data, b.mu.data)
            np.testing.assert_array_equal(a.rho.data, b.rho.data)

    def test_corrupt_topology_rejected(self, tmp_path):
        state = init_model(tiny_spec(), seed=1)
        path = tmp_path / "x.npz"
        save_checkpoint(path, state)
        import json

        import numpy as np_

        with np_.load(path) as npz:
            arrays = {k: npz[k] for k in npz.files if k != "meta"}
            meta = json.loads(str(npz["meta"]))
        meta["spec"]["layers"][4]["units"] = 9999
        meta["spec"]["layers"][6]["units"] = 5
        arrays["meta"] = np_.array(json.dumps(meta))
        np_.savez(path, **arrays)
        with pytest.raises(ValueError):
            load_checkpoint(path)
