"""Fusion, classifier, hybrid/baseline forward contracts, and the
branch-separation invariant."""

import numpy as np
import pytest

from qviton import quantum
from qviton import tensor as T
from qviton.errors import DimensionError
from qviton.model import HybridModel, ModelConfig, fuse
from qviton.quanv import QuanvConfig
from qviton.tensor import Tensor
from qviton.verify import gradcheck
from qviton.vit import ViTConfig


def toy_model(mode="hybrid", seed=7, dtype=np.float32, use_circuit=True):
    cfg = ModelConfig(vit=ViTConfig.toy(),
                      quanv=QuanvConfig(use_circuit=use_circuit), mode=mode)
    return HybridModel(cfg, seed=seed, dtype=dtype)


# -- fuse ---------------------------------------------------------------------


def test_fuse_widths():
    q = Tensor(np.zeros((1, 64)))
    v = Tensor(np.zeros((1, 1024)))
    assert fuse(q, v).shape == (1, 1088)
    assert fuse(Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 64)))).shape == (1, 128)


def test_fuse_keeps_context_entries_after_offset_64(rng):
    v = rng.normal(size=(2, 64)).astype(np.float32)
    fused = fuse(Tensor(np.zeros((2, 64), dtype=np.float32)), Tensor(v))
    assert np.array_equal(fused.data[:, 64:], v)
    assert np.all(fused.data[:, :64] == 0.0)


def test_fuse_rejects_mismatched_batches():
    with pytest.raises(DimensionError):
        fuse(Tensor(np.zeros((2, 64))), Tensor(np.zeros((3, 64))))


def test_model_fuse_checks_declared_widths():
    model = toy_model()
    with pytest.raises(DimensionError):
        model.fuse(Tensor(np.zeros((1, 32))), Tensor(np.zeros((1, 64))))
    with pytest.raises(DimensionError):
        model.fuse(Tensor(np.zeros((1, 64))), Tensor(np.zeros((1, 128))))


# -- classifier --------------------------------------------------------------------


def test_classifier_outputs_two_logits(rng):
    model = toy_model()
    fused = Tensor(rng.normal(size=(5, 128)).astype(np.float32))
    assert model.classify(fused).shape == (5, 2)


def test_classifier_rejects_wrong_width(rng):
    model = toy_model()
    with pytest.raises(DimensionError):
        model.classify(Tensor(rng.normal(size=(1, 100)).astype(np.float32)))


def test_classifier_eval_mode_bit_identical(rng):
    model = toy_model().eval()
    fused = Tensor(rng.normal(size=(3, 128)).astype(np.float32))
    a = model.classify(fused).data
    b = model.classify(fused).data
    assert np.array_equal(a, b)


def test_classifier_train_mode_uses_dropout(rng):
    model = toy_model().train()
    fused = Tensor(rng.normal(size=(3, 128)).astype(np.float32))
    a = model.classify(fused).data
    b = model.classify(fused).data
    assert not np.array_equal(a, b)


def test_classifier_gradcheck_double(rng):
    model = toy_model(dtype=np.float64).eval()
    fused = Tensor(rng.normal(size=(2, 128)), requires_grad=True,
                   dtype=np.float64)
    labels = np.array([0, 1])
    clf_params = [t for n, t in model.store.items() if n.startswith("clf.")]
    err = gradcheck(
        lambda: T.softmax_cross_entropy(model.classify(fused), labels),
        [fused] + clf_params, max_coords=4, rng=np.random.default_rng(2))
    assert err <= 1e-6


# -- forward -------------------------------------------------------------------------


def test_hybrid_forward_widths_toy(rng):
    model = toy_model().eval()
    x = Tensor(rng.normal(size=(2, 3, 56, 56)).astype(np.float32))
    v = model.vit(x, train=False)
    q = model.quanv.forward(x, train=False)
    fused = model.fuse(q, v)
    logits = model.classify(fused)
    assert (q.shape, v.shape, fused.shape, logits.shape) == (
        (2, 64), (2, 64), (2, 128), (2, 2))
    assert np.array_equal(model(x).data, logits.data)


def test_single_image_forward_squeezes(rng):
    model = toy_model().eval()
    x = Tensor(rng.normal(size=(3, 56, 56)).astype(np.float32))
    assert model(x).shape == (2,)


def test_baseline_never_invokes_simulator(rng):
    quantum.reset_eval_count()
    model = toy_model(mode="baseline").eval()
    x = Tensor(rng.normal(size=(2, 3, 56, 56)).astype(np.float32))
    logits = model(x)
    assert logits.shape == (2, 2)
    assert quantum.eval_count() == 0
    assert model.quanv is None
    assert model.config.fused_width == 64


def test_toy_hybrid_backward_grads_finite(rng):
    model = toy_model().train()
    x = Tensor(rng.normal(size=(2, 3, 56, 56)).astype(np.float32))
    loss = T.softmax_cross_entropy(model(x), np.array([0, 1]))
    model.store.zero_grad()
    T.backward(loss, model.store)
    for name, t in model.store.items():
        assert np.all(np.isfinite(t.grad)), name


def test_argmax_invariant_under_logit_shift(rng):
    model = toy_model().eval()
    x = Tensor(rng.normal(size=(4, 3, 56, 56)).astype(np.float32))
    logits = model(x).data
    shifted = logits + 17.5
    assert np.array_equal(np.argmax(logits, axis=1), np.argmax(shifted, axis=1))


def test_param_count_stable_across_runs():
    a = toy_model(seed=5)
    b = toy_model(seed=5)
    assert a.param_count() == b.param_count() == a.store.total_parameters()
    for (na, ta), (nb, tb) in zip(a.store.items(), b.store.items()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_branch_separation_matches_baseline_gradients(rng):
    """Constant quantum output + zeroed quantum classifier rows makes the
    hybrid's ViT gradients equal the baseline's."""
    hybrid = toy_model(use_circuit=False, dtype=np.float64, seed=11).eval()
    baseline = toy_model(mode="baseline", dtype=np.float64, seed=11).eval()

    # align shared weights: ViT copied; classifier keeps only context columns
    for name, t in baseline.store.items():
        if name.startswith("vit."):
            t.data[...] = hybrid.store[name].data
    hw = hybrid.store["clf.fc1.w"]
    hybrid_rows = hw.data.copy()
    hw.data[:64, :] = 0.0  # kill the quantum-input rows
    baseline.store["clf.fc1.w"].data[...] = hybrid_rows[64:, :]
    for name in ("clf.fc1.b", "clf.ln1.gamma", "clf.ln1.beta", "clf.fc2.w",
                 "clf.fc2.b", "clf.ln2.gamma", "clf.ln2.beta", "clf.out.w",
                 "clf.out.b"):
        baseline.store[name].data[...] = hybrid.store[name].data

    x = Tensor(rng.normal(size=(2, 3, 56, 56)), dtype=np.float64)
    labels = np.array([1, 0])
    for model in (hybrid, baseline):
        model.store.zero_grad()
        T.backward(T.softmax_cross_entropy(model(x), labels), model.store)

    for name, t in baseline.store.items():
        if name.startswith("vit."):
            assert np.abs(t.grad - hybrid.store[name].grad).max() <= 1e-12, name
