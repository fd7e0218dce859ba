"""Generation-quality metrics and the retrieval protocol.

Entropy and likelihood are reported side by side on purpose: a constant
repeated token scores excellent likelihood under a repetition-friendly
scorer while its entropy collapses to zero, so neither metric alone is
trustworthy.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from maskfuse.denoiser import ToyJointDistribution
from maskfuse.objective import (
    IMAGE_GIVEN_TEXT,
    JOINT,
    TEXT_GIVEN_IMAGE,
    joint_likelihood_score,
)
from maskfuse.schedule import ScheduleKind
from maskfuse.transformer import CAUSAL, TransformerDenoiser, ar_logits_batch
from maskfuse.util import substream
from maskfuse.vocab import IMAGE, TEXT, ModalityLayout

RETRIEVAL_MODES = (JOINT, IMAGE_GIVEN_TEXT, TEXT_GIVEN_IMAGE)


@dataclass(frozen=True)
class EntropyReport:
    overall: float
    text: float
    image: float


def _unigram_entropy(tokens: np.ndarray) -> float:
    if tokens.size == 0:
        return 0.0
    _, counts = np.unique(tokens, return_counts=True)
    p = counts / counts.sum()
    return float(max(0.0, -(p * np.log(p)).sum()))


def token_entropy(samples: np.ndarray, layout: ModalityLayout) -> EntropyReport:
    """Empirical unigram entropy (nats) of generated tokens, overall and per
    modality. Permutation-invariant over the sample set and nonnegative."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty (N, L) array")
    return EntropyReport(
        overall=_unigram_entropy(samples),
        text=_unigram_entropy(samples[:, layout.tags == TEXT]),
        image=_unigram_entropy(samples[:, layout.tags == IMAGE]),
    )


def generative_perplexity(samples: np.ndarray, scorer: ToyJointDistribution) -> float:
    """exp(mean NLL per token) of the samples under a scoring distribution.

    The desk-scale stand-in for scoring generations with an external model;
    gameable by low-entropy repetition, which is exactly what the entropy
    report is there to expose.
    """
    samples = np.asarray(samples, dtype=np.int64)
    l = samples.shape[1]
    nlls = np.array([scorer.exact_nll(row) for row in samples])
    return float(math.exp(nlls.mean() / l))


@dataclass
class RetrievalTask:
    """One retrieval instance: candidate (image, text) pairs, one correct."""

    mode: str
    images: np.ndarray  # (C, image_len)
    texts: np.ndarray  # (C, text_len)
    correct_index: int
    layout: ModalityLayout

    def __post_init__(self):
        if self.mode not in RETRIEVAL_MODES:
            raise ValueError(f"unknown retrieval mode {self.mode!r}")
        if self.images.shape[0] != self.texts.shape[0]:
            raise ValueError("images and texts must pair up")
        if self.images.shape[0] < 2:
            raise ValueError("need at least 2 candidates")
        if not 0 <= self.correct_index < self.images.shape[0]:
            raise ValueError("correct_index out of range")

    @property
    def n_candidates(self) -> int:
        return self.images.shape[0]


def make_retrieval_task(
    dist: ToyJointDistribution,
    mode: str,
    rng: np.random.Generator,
    n_candidates: int = 16,
    out_of_support: bool = True,
) -> RetrievalTask:
    """Plant a task from a toy distribution: the true pair plus distractors.

    Conditional modes share the conditioning modality across candidates and
    vary the other. out_of_support distractors pair items from different
    support sequences (zero joint probability); otherwise distractors are
    other support pairs.
    """
    layout = dist.layout
    img_sl, txt_sl = layout.image_slice, layout.text_slice
    true = dist.sample(rng, 1)[0]
    images = [true[img_sl]]
    texts = [true[txt_sl]]
    for _ in range(n_candidates - 1):
        if out_of_support:
            for attempt in range(1000):
                a = dist.sample(rng, 1)[0]
                b = dist.sample(rng, 1)[0]
                img = a[img_sl] if mode != TEXT_GIVEN_IMAGE else true[img_sl]
                txt = b[txt_sl] if mode != IMAGE_GIVEN_TEXT else true[txt_sl]
                cand = np.empty(layout.length, dtype=np.int64)
                cand[img_sl], cand[txt_sl] = img, txt
                if dist.sequence_prob(cand) == 0.0:
                    break
            else:
                raise ValueError("could not draw an out-of-support distractor; toy too small")
        else:
            other = dist.sample(rng, 1)[0]
            img = other[img_sl] if mode != TEXT_GIVEN_IMAGE else true[img_sl]
            txt = other[txt_sl] if mode != IMAGE_GIVEN_TEXT else true[txt_sl]
        images.append(img)
        texts.append(txt)
    order = rng.permutation(n_candidates)
    images = np.stack(images)[order]
    texts = np.stack(texts)[order]
    correct = int(np.nonzero(order == 0)[0][0])
    return RetrievalTask(mode, images, texts, correct, layout)


@dataclass(frozen=True)
class RetrievalResult:
    correct: bool
    scores: np.ndarray


def _is_ar(model) -> bool:
    return isinstance(model, TransformerDenoiser) and model.spec.attention == CAUSAL


def _ar_exact_score(model: TransformerDenoiser, tokens: np.ndarray, mode: str) -> float:
    """-NLL of the scored span under the causal chain (position 0 skipped).

    Conditional modes put the conditioning modality first so the scored
    tokens sit entirely after their context.
    """
    base = model.layout
    if mode == IMAGE_GIVEN_TEXT:
        layout = base if not base.image_first else base.flipped()
    elif mode == TEXT_GIVEN_IMAGE:
        layout = base if base.image_first else base.flipped()
    else:
        layout = base
    reordered = np.empty_like(tokens)
    reordered[layout.image_slice] = tokens[base.image_slice]
    reordered[layout.text_slice] = tokens[base.text_slice]
    logits = ar_logits_batch(model, reordered[None, :], layout)[0]
    logp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
    token_logp = logp[np.arange(layout.length), reordered]
    if mode == JOINT:
        scored = np.ones(layout.length, dtype=bool)
    elif mode == IMAGE_GIVEN_TEXT:
        scored = layout.tags == IMAGE
    else:
        scored = layout.tags == TEXT
    scored[0] = False  # first position carries no trained prediction
    return float(token_logp[scored].sum())


def run_retrieval(
    model,
    task: RetrievalTask,
    n_mc: int,
    rng_seed: int,
    kind: ScheduleKind | None = None,
    cfg_weight: float = 0.0,
) -> RetrievalResult:
    """Score all candidates and check the true pair attains the strict max.

    Diffusion-style models score with the Monte-Carlo likelihood bound under
    common random numbers (every candidate sees the same seeded stream);
    causal models score with the exact chain NLL. Ties involving the correct
    candidate count as incorrect.
    """
    kind = kind or ScheduleKind.linear()
    scores = np.empty(task.n_candidates)
    for c in range(task.n_candidates):
        if _is_ar(model):
            tokens = np.empty(task.layout.length, dtype=np.int64)
            tokens[task.layout.image_slice] = task.images[c]
            tokens[task.layout.text_slice] = task.texts[c]
            scores[c] = _ar_exact_score(model, tokens, task.mode)
        else:
            rng = substream(rng_seed, "retrieval-score")
            scores[c] = joint_likelihood_score(
                model,
                task.images[c],
                task.texts[c],
                n_mc,
                rng,
                layout=task.layout,
                kind=kind,
                mode=task.mode,
                cfg_weight=cfg_weight,
            )
    best = scores.max()
    strict = (scores == best).sum() == 1 and scores[task.correct_index] == best
    return RetrievalResult(correct=bool(strict), scores=scores)


def retrieval_accuracy(
    model,
    tasks,
    n_mc: int,
    seed: int,
    kind: ScheduleKind | None = None,
    cfg_weight: float = 0.0,
) -> float:
    hits = [
        run_retrieval(model, task, n_mc, seed + i, kind, cfg_weight).correct
        for i, task in enumerate(tasks)
    ]
    return float(np.mean(hits))


def retrieval_vs_steps_sweep(
    model,
    tasks,
    n_mc_values,
    cfg_weights,
    seed: int = 0,
    kind: ScheduleKind | None = None,
) -> list[dict]:
    """Accuracy grid over (MC-sample count, guidance weight) cells."""
    grid = []
    for n_mc in n_mc_values:
        for w in cfg_weights:
            acc = retrieval_accuracy(model, tasks, n_mc, seed, kind, cfg_weight=w)
            grid.append({"n_mc": int(n_mc), "cfg_weight": float(w), "accuracy": acc})
    return grid


def write_grid_csv(grid: list[dict], path) -> None:
    if not grid:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(grid[0].keys()))
        writer.writeheader()
        writer.writerows(grid)


def config_hash(resolved_text: str) -> str:
    return hashlib.sha256(resolved_text.encode("utf-8")).hexdigest()[:12]


def write_metrics_jsonl(records, path, resolved_config: str = "", seed: int = 0) -> None:
    """Append metric records as JSON lines: {metric, value, config_hash, seed}."""
    h = config_hash(resolved_config)
    with open(path, "a") as f:
        for metric, value in records:
            f.write(json.dumps({"metric": metric, "value": value, "config_hash": h, "seed": seed}) + "\n")
