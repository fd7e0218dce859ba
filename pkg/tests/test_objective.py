"""Losses and likelihood bounds against enumeration ground truth."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from maskfuse.data import ToyWorldConfig, generate_toy_dataset
from maskfuse.denoiser import OracleDenoiser, uniform_toy_distribution
from maskfuse.objective import (
    IMAGE_GIVEN_TEXT,
    ar_loss,
    diffusion_loss,
    elbo_estimate,
    joint_likelihood_score,
)
from maskfuse.schedule import ScheduleKind
from maskfuse.util import NEG_INF, substream
from maskfuse.vocab import IMAGE, JointVocab, MaskedSequence, ModalityLayout, build_vocab

LINEAR = ScheduleKind.linear()


def perfect_logits(x0, total_size):
    logits = np.full((x0.shape[0], total_size), NEG_INF)
    logits[np.arange(x0.shape[0]), x0] = 0.0
    return logits


@pytest.fixture
def four_pos():
    v = build_vocab(4, 4)
    lay = ModalityLayout(2, 1, 2)
    x0 = np.array([4, 5, 0, 1])
    return v, lay, x0


class TestDiffusionLoss:
    def test_perfect_logits_zero(self, four_pos):
        v, lay, x0 = four_pos
        x_t = np.full(4, v.mask_id)
        res = diffusion_loss(perfect_logits(x0, v.total_size), x0, x_t, 1.0, v)
        assert res.nats == 0.0
        assert not res.degenerate

    def test_uniform_logits_all_masked(self, four_pos):
        v, lay, x0 = four_pos
        x_t = np.full(4, v.mask_id)
        res = diffusion_loss(np.zeros((4, v.total_size)), x0, x_t, 1.0, v)
        assert res.nats == pytest.approx(np.log(v.total_size))

    def test_half_masked_weight_four(self, four_pos):
        # hand computation: 2 of 4 masked, uniform CE = ln V each,
        # mean over masked = ln V, scaled by weight 4
        v, lay, x0 = four_pos
        x_t = x0.copy()
        x_t[[1, 3]] = v.mask_id
        res = diffusion_loss(np.zeros((4, v.total_size)), x0, x_t, 4.0, v)
        assert res.masked_count == 2
        assert res.nats == pytest.approx(4.0 * np.log(v.total_size))

    def test_zero_masked_degenerate_flag(self, four_pos):
        v, lay, x0 = four_pos
        res = diffusion_loss(np.zeros((4, v.total_size)), x0, x0, 3.0, v)
        assert res.nats == 0.0
        assert res.degenerate

    def test_visible_logits_do_not_matter(self, four_pos):
        v, lay, x0 = four_pos
        x_t = x0.copy()
        x_t[0] = v.mask_id
        rng = substream(0, "vis")
        logits = rng.normal(size=(4, v.total_size))
        base = diffusion_loss(logits, x0, x_t, 2.0, v).nats
        perturbed = logits.copy()
        perturbed[1:] = rng.normal(size=(3, v.total_size)) * 100
        assert diffusion_loss(perturbed, x0, x_t, 2.0, v).nats == base

    def test_per_position_weights(self, four_pos):
        v, lay, x0 = four_pos
        x_t = np.full(4, v.mask_id)
        w = np.array([1.0, 2.0, 3.0, 4.0])
        res = diffusion_loss(np.zeros((4, v.total_size)), x0, x_t, w, v)
        assert res.nats == pytest.approx(np.log(v.total_size) * w.mean())

    def test_matches_torch_training_path(self, four_pos):
        v, lay, x0 = four_pos
        x_t = x0.copy()
        x_t[[0, 2]] = v.mask_id
        rng = substream(1, "torch")
        logits = rng.normal(size=(4, v.total_size))
        w = np.array([1.3, 0.7, 2.0, 5.0])
        ours = diffusion_loss(logits, x0, x_t, w, v).nats
        ce = F.cross_entropy(
            torch.from_numpy(logits), torch.from_numpy(x0), reduction="none"
        ).numpy()
        masked = x_t == v.mask_id
        theirs = (ce * w * masked).sum() / masked.sum()
        assert ours == pytest.approx(theirs, rel=1e-12)


class TestArLoss:
    def test_deterministic_correct_zero(self, four_pos):
        v, lay, x0 = four_pos
        assert ar_loss(perfect_logits(x0, v.total_size), x0) == 0.0

    def test_uniform_logits_ln_v(self, four_pos):
        v, lay, x0 = four_pos
        assert ar_loss(np.zeros((4, v.total_size)), x0) == pytest.approx(np.log(v.total_size))

    def test_length_two_single_term(self):
        v = build_vocab(2, 2)
        x = np.array([2, 0])
        logits = np.zeros((2, v.total_size))
        logits[1, 0] = 3.0
        expected = -np.log(np.exp(3.0) / (np.exp(3.0) + v.total_size - 1))
        assert ar_loss(logits, x) == pytest.approx(expected)

    def test_agrees_with_diffusion_at_uniform(self, four_pos):
        # the common calibration point: both losses read ln V on uniform logits
        v, lay, x0 = four_pos
        uniform = np.zeros((4, v.total_size))
        d = diffusion_loss(uniform, x0, np.full(4, v.mask_id), 1.0, v).nats
        a = ar_loss(uniform, x0)
        assert d == pytest.approx(a)


class TestElbo:
    def test_single_sequence_support_zero_nats(self):
        vocab = JointVocab(2, 2)
        layout = ModalityLayout(1, 1, 1)
        dist = uniform_toy_distribution(np.array([[3, 1]]), layout, vocab)
        oracle = OracleDenoiser(dist)
        est = elbo_estimate(
            oracle, MaskedSequence(np.array([3, 1]), layout), 200, LINEAR, substream(0, "e")
        )
        assert est.nats_per_token == pytest.approx(0.0, abs=1e-12)
        assert est.perplexity == pytest.approx(1.0)

    def test_uniform_eight_support_tight(self):
        ds = generate_toy_dataset(ToyWorldConfig(rows=1, cols=3, palette_size=2))
        assert ds.dist.size == 8
        oracle = OracleDenoiser(ds.dist)
        seq = MaskedSequence(ds.sequences[3], ds.layout)
        exact = ds.dist.exact_nll(ds.sequences[3]) / ds.layout.length
        est = elbo_estimate(oracle, seq, 1000, LINEAR, substream(1, "e8"))
        assert est.nats_per_token + 3 * est.std_error >= exact
        assert est.nats_per_token == pytest.approx(exact, abs=5 * est.std_error + 1e-3)

    def test_std_error_shrinks_with_draws(self, toy_2x2, oracle_2x2):
        seq = MaskedSequence(toy_2x2.sequences[2], toy_2x2.layout)
        se_small = elbo_estimate(oracle_2x2, seq, 100, LINEAR, substream(2, "s")).std_error
        se_large = elbo_estimate(oracle_2x2, seq, 6400, LINEAR, substream(3, "s")).std_error
        assert se_large < se_small / 2

    def test_cosine_schedule_also_tight(self, toy_2x2, oracle_2x2):
        seq = MaskedSequence(toy_2x2.sequences[9], toy_2x2.layout)
        exact = toy_2x2.dist.exact_nll(toy_2x2.sequences[9]) / toy_2x2.layout.length
        est = elbo_estimate(oracle_2x2, seq, 2000, ScheduleKind.cosine(), substream(4, "c"))
        assert est.nats_per_token == pytest.approx(exact, abs=4 * est.std_error + 1e-3)


class TestJointLikelihoodScore:
    def test_true_pair_beats_zero_probability_distractor(self, toy_2x2, oracle_2x2):
        lay = toy_2x2.layout
        true = toy_2x2.sequences[0]
        # image from one grid, caption from a grid with different counts
        distractor_img = toy_2x2.sequences[15][lay.image_slice]
        true_txt = true[lay.text_slice]
        mixed = np.concatenate([distractor_img, true_txt])
        assert toy_2x2.dist.sequence_prob(mixed) == 0.0
        s_true = joint_likelihood_score(
            oracle_2x2, true[lay.image_slice], true_txt, 64, substream(5, "crn"), layout=lay
        )
        s_mix = joint_likelihood_score(
            oracle_2x2, distractor_img, true_txt, 64, substream(5, "crn"), layout=lay
        )
        assert s_true > s_mix

    def test_identical_candidates_equal_scores(self, toy_2x2, oracle_2x2):
        lay = toy_2x2.layout
        seq = toy_2x2.sequences[4]
        a = joint_likelihood_score(
            oracle_2x2, seq[lay.image_slice], seq[lay.text_slice], 32, substream(6, "crn"), layout=lay
        )
        b = joint_likelihood_score(
            oracle_2x2, seq[lay.image_slice], seq[lay.text_slice], 32, substream(6, "crn"), layout=lay
        )
        assert a == b

    def test_conditional_image_given_text(self, toy_2x2, oracle_2x2):
        from maskfuse.objective import elbo_estimate

        lay = toy_2x2.layout
        seq = toy_2x2.sequences[6]
        est = elbo_estimate(
            oracle_2x2,
            MaskedSequence(seq, lay),
            4000,
            LINEAR,
            substream(7, "cond"),
            scored=IMAGE_GIVEN_TEXT,
        )
        score = joint_likelihood_score(
            oracle_2x2,
            seq[lay.image_slice],
            seq[lay.text_slice],
            4000,
            substream(7, "cond"),
            layout=lay,
            mode=IMAGE_GIVEN_TEXT,
        )
        assert score == -est.nats_per_token  # same draws, same estimate
        exact = toy_2x2.dist.conditional_nll(seq, lay.tags == IMAGE)
        n_img = int((lay.tags == IMAGE).sum())
        assert est.nats_per_token * n_img == pytest.approx(
            exact, abs=4 * est.std_error * n_img + 1e-3
        )


class TestUpperBoundProperty:
    def test_twenty_random_toys(self):
        # random supports with Dirichlet masses; oracle ELBO + 3 SE >= exact NLL
        for trial in range(20):
            rng = substream(trial, "toys")
            vocab = JointVocab(int(rng.integers(2, 5)), int(rng.integers(2, 4)))
            layout = ModalityLayout(1, int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            space = vocab.image_size**layout.image_len * vocab.text_size**layout.text_len
            n_support = int(rng.integers(2, min(9, space + 1)))
            rows = set()
            while len(rows) < n_support:
                img = rng.integers(vocab.image_start, vocab.image_start + vocab.image_size, layout.image_len)
                txt = rng.integers(0, vocab.text_size, layout.text_len)
                rows.add(tuple(np.concatenate([img, txt])))
            support = np.array(sorted(rows))
            probs = rng.dirichlet(np.ones(len(support)))
            from maskfuse.denoiser import ToyJointDistribution

            dist = ToyJointDistribution(support, probs / probs.sum(), layout, vocab)
            oracle = OracleDenoiser(dist)
            x0 = dist.sample(rng, 1)[0]
            est = elbo_estimate(oracle, MaskedSequence(x0, layout), 500, LINEAR, rng)
            exact = dist.exact_nll(x0) / layout.length
            assert est.nats_per_token + 3 * est.std_error >= exact - 1e-12
