"""Training loops: determinism, schedules, fine-tuning, sweep adapter."""

import numpy as np
import pytest

from conftest import train_config
from maskfuse.data import ToyDataset, ToyWorldConfig
from maskfuse.train import lr_lambda, make_sweep_train_fn, smoothed_final_loss, train_model
from maskfuse.transformer import save_checkpoint


class TestPlumbing:
    def test_smoothed_final_is_tail_mean(self):
        losses = list(range(100))
        assert smoothed_final_loss(losses) == pytest.approx(np.mean(range(95, 100)))
        assert smoothed_final_loss([3.0]) == 3.0

    def test_lr_schedule_shape(self):
        warmup, total = 10, 100
        lrs = [lr_lambda(s, warmup, total) for s in range(total)]
        assert lrs[0] < lrs[5] < lrs[9]  # warming up
        assert lrs[9] == pytest.approx(1.0)
        assert lrs[-1] < 0.01  # cosine decays toward zero
        assert all(a >= b - 1e-12 for a, b in zip(lrs[9:], lrs[10:]))


class TestDeterminism:
    def test_same_seed_identical_curve(self, toy_2x2):
        cfg = train_config(**{"train.steps": 25, "train.batch_size": 16})
        a = train_model(cfg, toy_2x2)
        b = train_model(cfg, toy_2x2)
        assert [x[1] for x in a.curve] == [x[1] for x in b.curve]

    def test_different_seed_differs(self, toy_2x2):
        a = train_model(train_config(**{"train.steps": 10, "seed": 0}), toy_2x2)
        b = train_model(train_config(**{"train.steps": 10, "seed": 1}), toy_2x2)
        assert [x[1] for x in a.curve] != [x[1] for x in b.curve]


class TestModes:
    def test_ar_mode_trains(self, toy_2x2):
        cfg = train_config(**{"model.attention": "causal", "train.steps": 60})
        result = train_model(cfg, toy_2x2)
        first = np.mean([x[1] for x in result.curve[:10]])
        assert result.final_smoothed < first

    def test_finetune_direction_on_two_token_toy(self, minimal_pair_dist, tmp_path):
        # AR pretrain, then the shifted diffusion objective keeps improving it
        dataset = ToyDataset(
            sequences=minimal_pair_dist.support,
            layout=minimal_pair_dist.layout,
            vocab=minimal_pair_dist.vocab,
            config=ToyWorldConfig(rows=1, cols=1, palette_size=2),
            dist=minimal_pair_dist,
        )
        pair_world = {
            "vocab.text_size": 2,
            "vocab.image_size": 2,
            "data.grid_rows": 1,
            "data.grid_cols": 1,
            "data.palette_size": 2,
            "data.text_len": 1,
        }
        ar_cfg = train_config(
            **{
                "model.attention": "causal",
                "model.n_layers": 1,
                "model.d_model": 32,
                "model.n_heads": 2,
                "train.steps": 40,
                "train.batch_size": 8,
                "forward.p_uncond": 0.0,
                **pair_world,
            }
        )
        ar = train_model(ar_cfg, dataset)
        ckpt = tmp_path / "ar.ckpt"
        save_checkpoint(ckpt, ar.model)

        ft_cfg = train_config(
            **{
                "finetune.from_ar_checkpoint": str(ckpt),
                "train.steps": 150,
                "train.batch_size": 8,
                "train.lr": 3e-3,
                **pair_world,
            }
        )
        result = train_model(ft_cfg, dataset)
        assert result.model.spec.attention == "causal"  # checkpoint arch preserved
        head = np.mean([x[1] for x in result.curve[:15]])
        assert result.final_smoothed < head  # shifted objective converges

    def test_finetune_requires_causal_checkpoint(self, toy_2x2, tmp_path, trained_diffusion):
        _, diff, _ = trained_diffusion
        ckpt = tmp_path / "diff.ckpt"
        save_checkpoint(ckpt, diff.model)
        from maskfuse.vocab import ConfigError

        cfg = train_config(**{"finetune.from_ar_checkpoint": str(ckpt), "train.steps": 2})
        with pytest.raises(ConfigError, match="causal"):
            train_model(cfg, toy_2x2)


class TestSweepAdapter:
    def test_tokens_accounted_in_batches(self, toy_2x2):
        cfg = train_config(**{"train.steps": 5})
        fn = make_sweep_train_fn(cfg, toy_2x2, batch_size=8)
        per_step = 8 * toy_2x2.layout.length
        loss, used = fn(cfg.model_spec(), per_step * 3 + 17)
        assert used == per_step * 3
        assert np.isfinite(loss)

    def test_budget_below_one_batch_skipped(self, toy_2x2):
        cfg = train_config()
        fn = make_sweep_train_fn(cfg, toy_2x2, batch_size=8)
        loss, used = fn(cfg.model_spec(), 10)
        assert used == 0
