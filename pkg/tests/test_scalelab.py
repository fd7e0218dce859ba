"""FLOP accounting, parameter counts, parabola minima, power-law fits."""

import warnings
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_spec
from maskfuse.scalelab import (
    ParabolaFit,
    ScalingPoint,
    count_params,
    fit_isoflop_minimum,
    fit_power_law,
    fit_scaling_pipeline,
    flop_budget,
    isoflop_sweep,
    planted_loss_surface,
    planted_optimal_exponent,
    sweep_planted_surface,
    tokens_for_budget,
)
from maskfuse.transformer import build_transformer
from maskfuse.vocab import JointVocab, ModalityLayout


@pytest.fixture(scope="module")
def world():
    return JointVocab(8, 2), ModalityLayout(2, 2, 4)


def default_grid(vocab, layout):
    base = small_spec(vocab, layout)
    triples = [(2, 2, 32), (2, 4, 48), (3, 4, 64), (4, 4, 96), (4, 8, 128), (6, 8, 160)]
    return [replace(base, n_layers=l, n_heads=h, d_model=d) for l, h, d in triples]


class TestFlopBudget:
    def test_six_nd(self):
        assert flop_budget(1000, 2000) == 12_000_000

    def test_inversion(self):
        assert tokens_for_budget(12_000_000, 2000) == 1000

    def test_doubling_n_halves_d(self):
        c = flop_budget(4000, 5000)
        assert tokens_for_budget(c, 8000) == 2500

    def test_positive_required(self):
        with pytest.raises(ValueError):
            flop_budget(0, 10)


class TestCountParams:
    def test_zero_layer_head_only(self, world):
        vocab, layout = world
        spec = small_spec(vocab, layout, n_layers=0)
        assert count_params(spec) == spec.d_model * vocab.total_size

    def test_doubling_layers_doubles_block_params(self, world):
        vocab, layout = world
        two = count_params(small_spec(vocab, layout, n_layers=2))
        four = count_params(small_spec(vocab, layout, n_layers=4))
        head_and_final = small_spec(vocab, layout).d_model * (vocab.total_size + 1)
        assert four - head_and_final == 2 * (two - head_and_final)

    def test_closed_form_matches_tensor_enumeration(self, world):
        vocab, layout = world
        for spec in [
            small_spec(vocab, layout),
            small_spec(vocab, layout, n_layers=3, sandwich_norm=False),
            small_spec(vocab, layout, qk_norm=False),
            small_spec(vocab, layout, n_layers=0),
            small_spec(vocab, layout, d_model=64, n_heads=4, ffn_multiplier=2),
        ]:
            model = build_transformer(spec, seed=0)
            assert count_params(spec) == model.non_embedding_param_count()

    def test_grid_monotone_ordering(self, world):
        vocab, layout = world
        ns = [count_params(s) for s in default_grid(vocab, layout)]
        assert ns == sorted(ns)
        assert len(set(ns)) == len(ns)


class TestIsoflopSweep:
    def test_emitted_points_exact(self, world):
        vocab, layout = world
        grid = default_grid(vocab, layout)[:3]
        surface = planted_loss_surface(1.0, 10.0, 0.5, 10.0, 0.5)
        points = sweep_planted_surface([int(1e12), int(1e13)], grid, surface)
        assert len(points) == 6
        for p in points:
            assert p.flops == 6 * p.params * p.tokens
            assert p.flops <= p.budget

    def test_infeasible_cells_skipped_with_warning(self, world):
        vocab, layout = world
        grid = default_grid(vocab, layout)[:2]

        def train_fn(spec, n_tokens):
            return 1.0, n_tokens

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            points = isoflop_sweep([10], grid, train_fn)  # 10 flops: no tokens fit
        assert points == []
        assert any("skipping" in str(w.message) for w in caught)

    def test_c_6nd_invariant_enforced(self):
        with pytest.raises(ValueError, match="6ND"):
            ScalingPoint(flops=100, params=2, tokens=3, final_loss=1.0)


class TestParabolaFit:
    def test_exact_vertex_recovery(self):
        logn_star = np.log(5e4)
        ns = [int(n) for n in np.logspace(4, 6, 7)]
        points = [
            ScalingPoint(
                flops=6 * n * 100,
                params=n,
                tokens=100,
                final_loss=float(2.0 + 0.7 * (np.log(n) - logn_star) ** 2),
                budget=int(1e12),
            )
            for n in ns
        ]
        fit = fit_isoflop_minimum(points)
        assert fit.vertex_in_range and not fit.concave
        assert np.log(fit.n_opt) == pytest.approx(logn_star, abs=1e-9)

    def test_noisy_vertex_within_five_percent(self):
        rng = np.random.default_rng(4)
        logn_star = np.log(2e5)
        ns = np.logspace(4.5, 6.0, 9)
        points = [
            ScalingPoint(
                flops=6 * int(n) * 100,
                params=int(n),
                tokens=100,
                final_loss=float(2.0 + 0.8 * (np.log(n) - logn_star) ** 2 + rng.normal(0, 0.01)),
                budget=int(1e12),
            )
            for n in ns
        ]
        fit = fit_isoflop_minimum(points)
        assert abs(np.log(fit.n_opt) - logn_star) / logn_star < 0.05

    def test_monotone_points_flagged_outside_range(self):
        ns = np.logspace(4, 5, 5)
        points = [
            ScalingPoint(
                flops=6 * int(n) * 10,
                params=int(n),
                tokens=10,
                final_loss=float(5.0 - 0.1 * np.log(n) + 0.001 * np.log(n) ** 2),
                budget=7,
            )
            for n in ns
        ]
        fit = fit_isoflop_minimum(points)
        assert not fit.vertex_in_range

    def test_concave_fit_flagged(self):
        ns = np.logspace(4, 5, 5)
        points = [
            ScalingPoint(
                flops=6 * int(n) * 10,
                params=int(n),
                tokens=10,
                final_loss=float(1.0 - 0.5 * (np.log(n) - np.log(3e4)) ** 2),
                budget=7,
            )
            for n in ns
        ]
        assert fit_isoflop_minimum(points).concave

    def test_needs_three_points(self):
        p = ScalingPoint(flops=60, params=10, tokens=1, final_loss=1.0)
        with pytest.raises(ValueError):
            fit_isoflop_minimum([p, p])


class TestPowerLawFit:
    def test_exact_recovery(self):
        c = np.logspace(10, 14, 6)
        minima = [(float(x), 2.0 * x**0.5) for x in c]
        fit = fit_power_law(minima)
        assert fit.exponent == pytest.approx(0.5, abs=1e-6)
        assert fit.coefficient == pytest.approx(2.0, rel=1e-6)
        assert fit.residual < 1e-12

    def test_multiplicative_noise_within_five_percent(self):
        rng = np.random.default_rng(9)
        c = np.logspace(10, 15, 8)
        minima = [(float(x), 3.0 * x**0.42 * float(np.exp(rng.normal(0, 0.02)))) for x in c]
        fit = fit_power_law(minima)
        assert abs(fit.exponent - 0.42) / 0.42 < 0.05

    def test_two_budgets_insufficient(self):
        with pytest.raises(ValueError):
            fit_power_law([(1e10, 1e4), (1e11, 2e4)])

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            fit_power_law([(1e10, 1e4), (1e11, -2e4), (1e12, 3e4)])


class TestPlantedPipeline:
    def test_exponent_recovered_within_five_percent(self, world):
        vocab, layout = world
        grid = default_grid(vocab, layout)
        surface = planted_loss_surface(a=1.2, b_coef=40.0, alpha=0.6, e_coef=60.0, beta=0.4)
        budgets = [int(1e13), int(3e13), int(1e14), int(3e14), int(1e15)]
        points = sweep_planted_surface(budgets, grid, surface)
        summary = fit_scaling_pipeline(points)
        assert all(f.vertex_in_range for _, f in summary.minima)
        truth = planted_optimal_exponent(0.6, 0.4)
        rel_err = abs(summary.power_law.exponent - truth) / truth
        assert rel_err < 0.05
