"""Training loops: diffusion denoiser, AR baseline, and AR-to-diffusion
fine-tuning with left-shifted targets. One loop serves all three; only the
corruption, targets, and supervised-position mask differ."""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from maskfuse.config import RunConfig
from maskfuse.data import ToyDataset, batch_iterator
from maskfuse.denoiser import UNSUPERVISED, shift_targets_for_finetune
from maskfuse.forward import cfg_dropout_batch, corrupt_tokens, sample_timestep_pairs
from maskfuse.schedule import ScheduleKind, mc_scale, weight_at
from maskfuse.transformer import (
    CAUSAL,
    ModelSpec,
    TransformerDenoiser,
    _ar_forward,
    build_transformer,
    load_checkpoint,
    save_checkpoint,
)
from maskfuse.util import configure_torch_threads, substream
from maskfuse.vocab import TEXT, ConfigError


@dataclass
class TrainResult:
    model: TransformerDenoiser
    curve: list  # (step, loss, lr)
    final_smoothed: float


def smoothed_final_loss(losses) -> float:
    """Mean of the last 5% of steps (at least one)."""
    losses = list(losses)
    tail = max(1, len(losses) // 20)
    return float(np.mean(losses[-tail:]))


def lr_lambda(step: int, warmup: int, total: int) -> float:
    if total <= 0:
        return 1.0
    if step < warmup:
        return (step + 1) / max(1, warmup)
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _per_position_weights(
    kind: ScheduleKind,
    t_text: np.ndarray,
    t_image: np.ndarray,
    tags: np.ndarray,
    weighting: str,
    clamp: float,
) -> np.ndarray:
    if weighting == "none":
        return np.ones((t_text.shape[0], tags.shape[0]))
    cap = clamp if weighting == "clamped" else np.inf
    w_text = weight_at(kind, t_text, cap)
    w_image = weight_at(kind, t_image, cap)
    w = np.where(tags[None, :] == TEXT, w_text[:, None], w_image[:, None])
    return w * mc_scale(kind)


def _diffusion_batch_loss(module, batch, x0, kind, cfg, vocab, rng) -> torch.Tensor:
    b = x0.shape[0]
    t_text, t_image, _ = sample_timestep_pairs(
        b, cfg["forward.k_ratio"], cfg["forward.n_min"], cfg["forward.n_max"], rng
    )
    x_t = corrupt_tokens(x0, batch.layout, t_text, t_image, kind, vocab, rng)
    x_t, _ = cfg_dropout_batch(x_t, batch.layout, cfg["forward.p_uncond"], vocab, rng)
    weights = _per_position_weights(
        kind, t_text, t_image, batch.layout.tags, cfg["train.weighting"], cfg["schedule.weight_clamp"]
    )
    masked = torch.from_numpy(x_t == vocab.mask_id)
    logits = module(torch.from_numpy(x_t), batch.layout)
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        torch.from_numpy(x0.reshape(-1)),
        reduction="none",
    ).reshape(x0.shape)
    w = torch.from_numpy(weights).to(ce.dtype)
    per_row = (ce * w * masked).sum(dim=1) / masked.sum(dim=1).clamp_min(1)
    return per_row.mean()


def _ar_batch_loss(module, batch, x0, cfg, vocab, rng) -> torch.Tensor:
    layout = batch.layout
    b, l = x0.shape
    inputs = x0.copy()
    drop = rng.random(b) < cfg["forward.p_uncond"]
    first = layout.image_slice if layout.image_first else layout.text_slice
    inputs[drop, first] = vocab.mask_id
    logits = _ar_forward(module, torch.from_numpy(inputs), layout)
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        torch.from_numpy(x0.reshape(-1)),
        reduction="none",
    ).reshape(x0.shape)
    supervised = np.ones((b, l), dtype=bool)
    supervised[:, 0] = False  # first position has no trained prediction
    block = np.zeros(l, dtype=bool)
    block[first] = True
    supervised[drop] &= ~block[None, :]
    sup = torch.from_numpy(supervised)
    per_row = (ce * sup).sum(dim=1) / sup.sum(dim=1).clamp_min(1)
    return per_row.mean()


def _finetune_batch_loss(module, batch, x0, kind, cfg, vocab, rng) -> torch.Tensor:
    """Diffusion corruption, causal model, left-shifted supervision."""
    b = x0.shape[0]
    t_text, t_image, _ = sample_timestep_pairs(
        b, cfg["forward.k_ratio"], cfg["forward.n_min"], cfg["forward.n_max"], rng
    )
    x_t = corrupt_tokens(x0, batch.layout, t_text, t_image, kind, vocab, rng)
    shifted = shift_targets_for_finetune(x0, x_t, vocab)
    # row j of the causal forward predicts position j from inputs < j; the
    # shifted array indexes the predicting position, so roll it right by one
    row_targets = np.full_like(shifted, UNSUPERVISED)
    row_targets[:, 1:] = shifted[:, :-1]
    weights = _per_position_weights(
        kind, t_text, t_image, batch.layout.tags, cfg["train.weighting"], cfg["schedule.weight_clamp"]
    )
    logits = _ar_forward(module, torch.from_numpy(x_t), batch.layout)
    targets = torch.from_numpy(np.maximum(row_targets, 0))
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).reshape(x0.shape)
    sup = torch.from_numpy(row_targets != UNSUPERVISED)
    w = torch.from_numpy(weights).to(ce.dtype)
    per_row = (ce * w * sup).sum(dim=1) / sup.sum(dim=1).clamp_min(1)
    return per_row.mean()


def train_model(
    cfg: RunConfig,
    dataset: ToyDataset,
    out_dir: str | None = None,
    steps: int | None = None,
    spec: ModelSpec | None = None,
) -> TrainResult:
    """Train per the config; returns the wrapped model and the loss curve."""
    configure_torch_threads()
    vocab = dataset.vocab
    kind = cfg.schedule_kind()
    steps = steps if steps is not None else cfg["train.steps"]
    seed = cfg["seed"]

    finetune_from = cfg["finetune.from_ar_checkpoint"]
    if finetune_from:
        model = load_checkpoint(finetune_from)
        if model.spec.attention != CAUSAL:
            raise ConfigError("finetune.from_ar_checkpoint must point at a causal model")
        spec = model.spec
    else:
        spec = spec or cfg.model_spec()
        model = build_transformer(spec, seed=seed)
    if spec.text_size != vocab.text_size or spec.image_size != vocab.image_size:
        raise ConfigError("model spec vocab does not match the dataset vocab")
    module = model.module
    mode = (
        "finetune"
        if finetune_from
        else ("ar" if spec.attention == CAUSAL else "diffusion")
    )

    optimizer = torch.optim.AdamW(
        module.parameters(),
        lr=cfg["train.lr"],
        betas=(0.9, 0.95),
        weight_decay=cfg["train.weight_decay"],
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_lambda(s, cfg["train.warmup_steps"], steps)
    )

    data_rng = substream(seed, "data")
    corrupt_rng = substream(seed, "corrupt")
    flip_prob = cfg["data.flip_modality_prob"] if mode == "ar" else 0.0
    batches = batch_iterator(dataset, cfg["train.batch_size"], data_rng, flip_prob)

    curve = []
    module.train()
    for step in range(steps):
        batch = next(batches)
        x0 = batch.tokens
        if mode == "diffusion":
            loss = _diffusion_batch_loss(module, batch, x0, kind, cfg, vocab, corrupt_rng)
        elif mode == "ar":
            loss = _ar_batch_loss(module, batch, x0, cfg, vocab, corrupt_rng)
        else:
            loss = _finetune_batch_loss(module, batch, x0, kind, cfg, vocab, corrupt_rng)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        scheduler.step()
        curve.append((step, float(loss.item()), float(scheduler.get_last_lr()[0])))
    module.eval()

    result = TrainResult(
        model=model,
        curve=curve,
        final_smoothed=smoothed_final_loss([c[1] for c in curve]) if curve else float("nan"),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model)
        with open(os.path.join(out_dir, "loss_curve.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            for row in curve:
                writer.writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.8g}"])
    return result


def make_sweep_train_fn(cfg: RunConfig, dataset: ToyDataset, batch_size: int | None = None):
    """Adapter for scalelab.isoflop_sweep: trains for a token budget.

    Tokens are counted as supervised sequence positions (batch x L per step);
    the same seed and data order are used for every grid cell.
    """
    batch = batch_size or cfg["scale.batch_size"]
    tokens_per_step = batch * dataset.layout.length

    def train_fn(spec: ModelSpec, n_tokens: int):
        n_steps = n_tokens // tokens_per_step
        if n_steps < 1:
            return float("nan"), 0
        local = RunConfig(dict(cfg.values))
        local.values["train.batch_size"] = batch
        result = train_model(local, dataset, steps=n_steps, spec=spec)
        return result.final_smoothed, n_steps * tokens_per_step

    return train_fn
