"""Gradient correctness (finite-difference oracle) and model-state contracts."""

import dataclasses

import numpy as np
import pytest

from decaph.models import (
    Arch,
    ModelState,
    apply_update,
    init_model,
    load_model,
    per_example_grads,
    predict,
    save_model,
)
from decaph.numerics import Prng

FD_STEP = 1e-5


def fd_gradient(model: ModelState, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Central finite differences of the single-example regularized loss."""
    out = np.empty_like(model.params)
    for j in range(len(model.params)):
        wp = model.params.copy()
        wp[j] += FD_STEP
        wm = model.params.copy()
        wm[j] -= FD_STEP
        _, lp = per_example_grads(dataclasses.replace(model, params=wp), x, y)
        _, lm = per_example_grads(dataclasses.replace(model, params=wm), x, y)
        out[j] = (lp[0] - lm[0]) / (2 * FD_STEP)
    return out


def sample_far_from_kinks(model: ModelState, gen, n: int, n_classes: int):
    """Random (x, y) where no ReLU or margin term sits within 1e-3 of its kink,
    so the loss is locally smooth and central differences are valid."""
    head = model.arch.head
    while True:
        x = gen.standard_normal((n, model.arch.n_in))
        if head == "sigmoid_bce":
            y = gen.integers(0, 2, n)
        elif head == "multilabel_bce":
            y = gen.integers(0, 2, (n, model.arch.n_out))
        else:
            y = gen.integers(0, n_classes, n)
        smooth = True
        a = x
        layers = model.arch.widths
        off = 0
        for i, (fi, fo) in enumerate(zip(layers, layers[1:])):
            w = model.params[off : off + fi * fo].reshape(fo, fi)
            off += fi * fo
            b = model.params[off : off + fo]
            off += fo
            z = a @ w.T + b
            if i < len(layers) - 2:
                if np.abs(z).min() < 1e-3:
                    smooth = False
                    break
                a = np.maximum(z, 0.0)
            else:
                a = z
        if smooth and head == "multi_margin":
            margins = 1.0 - a[np.arange(n), y][:, None] + a
            margins[np.arange(n), y] = 1.0  # exclude the true-class slot
            if np.abs(margins).min() < 1e-3:
                smooth = False
        if smooth:
            return x, y


HEAD_CASES = [
    ("sigmoid_bce", (5, 4, 1), 2),
    ("softmax_ce", (5, 4, 3), 3),
    ("multi_margin", (5, 3), 3),
    ("multilabel_bce", (5, 4, 3), 3),
]


class TestPerExampleGrads:
    @pytest.mark.parametrize("head,widths,k", HEAD_CASES)
    def test_finite_difference_agreement(self, head, widths, k):
        gen = Prng(100).derive("fd", head).generator()
        for trial in range(10):
            arch = Arch(widths=widths, head=head)
            model = init_model(arch, Prng(200 + trial), 0.1, l2_weight_decay=0.0002)
            x, y = sample_far_from_kinks(model, gen, 1, k)
            grads, _ = per_example_grads(model, x, y)
            fd = fd_gradient(model, x, y)
            rel = np.linalg.norm(fd - grads[0]) / max(np.linalg.norm(grads[0]), 1e-12)
            assert rel <= 1e-4, f"{head} trial {trial}: rel err {rel:.2e}"

    def test_logistic_gradient_at_zero_weights(self):
        arch = Arch(widths=(3, 1), head="sigmoid_bce")
        model = ModelState(np.zeros(arch.n_params), arch)
        x = np.array([[1.0, 2.0, 3.0]])
        grads, losses = per_example_grads(model, x, np.array([0]))
        # p = 0.5 at W=0: dL/dz = 0.5, so weight block is 0.5*x, bias 0.5
        assert np.allclose(grads[0], [0.5, 1.0, 1.5, 0.5])
        assert losses[0] == pytest.approx(np.log(2))
        grads1, _ = per_example_grads(model, x, np.array([1]))
        assert np.allclose(grads1[0], [-0.5, -1.0, -1.5, -0.5])

    def test_duplicate_examples_get_identical_rows(self):
        arch = Arch(widths=(4, 3, 2), head="softmax_ce")
        model = init_model(arch, Prng(7))
        x = Prng(8).generator().standard_normal((1, 4))
        batch = np.vstack([x, x])
        grads, losses = per_example_grads(model, batch, np.array([1, 1]))
        assert np.array_equal(grads[0], grads[1])
        assert losses[0] == losses[1]

    def test_mean_of_rows_is_gradient_of_mean_loss(self):
        arch = Arch(widths=(4, 3, 1), head="sigmoid_bce")
        model = init_model(arch, Prng(9), l2_weight_decay=0.001)
        gen = Prng(10).generator()
        x = gen.standard_normal((8, 4))
        y = gen.integers(0, 2, 8)
        grads, losses = per_example_grads(model, x, y)
        h = 1e-6
        direction = gen.standard_normal(arch.n_params)
        direction /= np.linalg.norm(direction)
        mp = dataclasses.replace(model, params=model.params + h * direction)
        mm = dataclasses.replace(model, params=model.params - h * direction)
        _, lp = per_example_grads(mp, x, y)
        _, lm = per_example_grads(mm, x, y)
        fd_dir = (lp.mean() - lm.mean()) / (2 * h)
        assert fd_dir == pytest.approx(grads.mean(axis=0) @ direction, rel=1e-5)

    def test_weight_decay_adds_lambda_w_to_each_row(self):
        arch = Arch(widths=(3, 1), head="sigmoid_bce")
        params = Prng(11).generator().standard_normal(arch.n_params)
        bare = ModelState(params, arch, l2_weight_decay=0.0)
        reg = ModelState(params, arch, l2_weight_decay=0.01)
        x = np.array([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]])
        y = np.array([1, 0])
        g0, l0 = per_example_grads(bare, x, y)
        g1, l1 = per_example_grads(reg, x, y)
        assert np.allclose(g1 - g0, 0.01 * params)
        assert np.allclose(l1 - l0, 0.5 * 0.01 * params @ params)

    def test_dimension_mismatch_rejected(self):
        model = init_model(Arch(widths=(4, 1), head="sigmoid_bce"), Prng(1))
        with pytest.raises(ValueError):
            per_example_grads(model, np.zeros((2, 3)), np.array([0, 1]))
        with pytest.raises(ValueError):
            per_example_grads(model, np.zeros((0, 4)), np.array([]))


class TestPredict:
    def test_zero_weights_give_half_probability(self):
        arch = Arch(widths=(6, 1), head="sigmoid_bce")
        model = ModelState(np.zeros(arch.n_params), arch)
        scores = predict(model, Prng(1).generator().standard_normal((5, 6)))
        assert np.all(scores == 0.5)

    def test_softmax_rows_sum_to_one(self):
        arch = Arch(widths=(4, 8, 5), head="softmax_ce")
        model = init_model(arch, Prng(2))
        scores = predict(model, Prng(3).generator().standard_normal((50, 4)))
        assert np.abs(scores.sum(axis=1) - 1.0).max() < 1e-9
        assert scores.min() >= 0.0

    def test_softmax_monotone_in_logit(self):
        arch = Arch(widths=(2, 3), head="softmax_ce")
        base = np.zeros(arch.n_params)
        x = np.array([[1.0, 0.0]])
        prev = None
        for bias_c in (0.0, 0.5, 1.0, 2.0):
            params = base.copy()
            params[6] = bias_c  # bias of class 0
            score = predict(ModelState(params, arch), x)[0, 0]
            if prev is not None:
                assert score > prev
            prev = score

    def test_margin_head_returns_raw_scores(self):
        arch = Arch(widths=(3, 4), head="multi_margin")
        model = init_model(arch, Prng(4))
        scores = predict(model, Prng(5).generator().standard_normal((10, 3)))
        assert scores.shape == (10, 4)
        assert scores.min() < 0 or scores.max() > 1  # not squashed


class TestApplyUpdate:
    def test_zero_gradient_is_identity(self):
        model = init_model(Arch(widths=(3, 1), head="sigmoid_bce"), Prng(1))
        assert np.array_equal(apply_update(model, np.zeros_like(model.params)).params,
                              model.params)

    def test_arithmetic(self):
        arch = Arch(widths=(1, 1), head="sigmoid_bce")
        model = ModelState(np.array([1.0, 0.0]), arch, learning_rate=0.1)
        out = apply_update(model, np.array([1.0, 0.0]))
        assert out.params[0] == pytest.approx(0.9)

    def test_two_steps_commute_with_summed_step_for_fixed_grads(self):
        arch = Arch(widths=(2, 1), head="sigmoid_bce")
        model = ModelState(np.array([1.0, -1.0, 0.5]), arch, learning_rate=0.2)
        g1 = np.array([0.3, -0.1, 0.2])
        g2 = np.array([-0.5, 0.4, 0.1])
        seq = apply_update(apply_update(model, g1), g2)
        summed = apply_update(model, g1 + g2)
        assert np.allclose(seq.params, summed.params)

    def test_non_finite_gradient_rejected(self):
        model = init_model(Arch(widths=(2, 1), head="sigmoid_bce"), Prng(1))
        grad = np.zeros_like(model.params)
        grad[0] = np.nan
        with pytest.raises(ValueError, match="diverged"):
            apply_update(model, grad)

    def test_length_mismatch_rejected(self):
        model = init_model(Arch(widths=(2, 1), head="sigmoid_bce"), Prng(1))
        with pytest.raises(ValueError):
            apply_update(model, np.zeros(5))


class TestArchitectures:
    def test_reference_architectures_constructible(self):
        deep = Arch(widths=(436, 300, 100, 50, 10, 1), head="sigmoid_bce")
        assert deep.n_params == 166_771
        wide = Arch(widths=(15558, 1000, 100, 4), head="softmax_ce")
        assert wide.n_params == 15_659_504
        logistic = Arch(widths=(436, 1), head="sigmoid_bce")
        assert logistic.n_params == 437
        svc = Arch(widths=(15558, 4), head="multi_margin")
        assert svc.n_params == 62_236

        model = init_model(deep, Prng(33), 0.1, 0.0002)
        scores = predict(model, np.zeros((2, 436)))
        assert scores.shape == (2, 1)

    def test_params_length_checked(self):
        arch = Arch(widths=(3, 1), head="sigmoid_bce")
        with pytest.raises(ValueError):
            ModelState(np.zeros(3), arch)

    def test_non_finite_params_rejected(self):
        arch = Arch(widths=(3, 1), head="sigmoid_bce")
        with pytest.raises(ValueError):
            ModelState(np.full(4, np.inf), arch)

    def test_bad_head_rejected(self):
        with pytest.raises(ValueError):
            Arch(widths=(3, 2), head="sigmoid_bce")
        with pytest.raises(ValueError):
            Arch(widths=(3, 1), head="nope")

    def test_init_deterministic_and_fan_in_bounded(self):
        arch = Arch(widths=(100, 10, 1), head="sigmoid_bce")
        a = init_model(arch, Prng(5))
        b = init_model(arch, Prng(5))
        assert np.array_equal(a.params, b.params)
        assert np.abs(a.params[:1000]).max() <= 1 / np.sqrt(100)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        arch = Arch(widths=(7, 3, 2), head="softmax_ce")
        model = init_model(arch, Prng(77), learning_rate=0.05, l2_weight_decay=0.01)
        save_model(model, tmp_path / "ckpt")
        back = load_model(tmp_path / "ckpt")
        assert np.array_equal(back.params, model.params)
        assert back.arch == model.arch
        assert back.learning_rate == model.learning_rate
        assert back.l2_weight_decay == model.l2_weight_decay
