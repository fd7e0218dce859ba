"""Losses and likelihood bounds: the reweighted masked diffusion objective,
the autoregressive next-token loss, and Monte-Carlo bound estimators."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from maskfuse.denoiser import OracleInconsistencyError
from maskfuse.schedule import ScheduleKind, alpha_at, raw_weight_at
from maskfuse.util import substream
from maskfuse.vocab import IMAGE, TEXT, JointVocab, MaskedSequence, StructuralError

JOINT = "joint"
IMAGE_GIVEN_TEXT = "image_given_text"
TEXT_GIVEN_IMAGE = "text_given_image"


@dataclass(frozen=True)
class DiffusionLossResult:
    nats: float
    masked_count: int
    degenerate: bool  # no masked positions in the batch

    def __float__(self) -> float:
        return self.nats


def _ce_at(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position cross-entropy, logits (..., V) against integer targets."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def diffusion_loss(
    logits: np.ndarray,
    x0: np.ndarray,
    x_t: np.ndarray,
    weight,
    vocab: JointVocab,
) -> DiffusionLossResult:
    """weight x mean cross-entropy over masked positions.

    Visible positions contribute nothing, so their logits are free. `weight`
    may be a scalar or a per-position array (per-modality timesteps give
    different weights to text and image positions). Zero masked positions is
    the degenerate case: 0 nats, flagged.
    """
    logits = np.asarray(logits, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.int64)
    x_t = np.asarray(x_t, dtype=np.int64)
    if logits.shape[:-1] != x0.shape or x0.shape != x_t.shape:
        raise StructuralError(
            f"shape mismatch: logits {logits.shape}, x0 {x0.shape}, x_t {x_t.shape}"
        )
    masked = x_t == vocab.mask_id
    count = int(masked.sum())
    if count == 0:
        return DiffusionLossResult(0.0, 0, True)
    ce = _ce_at(logits[masked], x0[masked])
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), x0.shape)[masked]
    return DiffusionLossResult(float((w * ce).mean()), count, False)


def ar_loss(next_token_logits: np.ndarray, x: np.ndarray) -> float:
    """Mean next-token cross-entropy over every position except the first.

    Row i of the logits is the model's distribution for token i (see
    ar_predict); the first token carries no trained prediction.
    """
    x = np.asarray(x, dtype=np.int64)
    logits = np.asarray(next_token_logits, dtype=np.float64)
    if logits.shape[0] != x.shape[0]:
        raise StructuralError(f"{logits.shape[0]} logit rows for {x.shape[0]} tokens")
    if x.shape[0] < 2:
        raise ValueError("ar_loss needs at least two positions")
    return float(_ce_at(logits[1:], x[1:]).mean())


@dataclass(frozen=True)
class ElboEstimate:
    nats_per_token: float
    std_error: float
    n_samples: int

    @property
    def perplexity(self) -> float:
        return float(math.exp(self.nats_per_token))


def _scored_flags(layout, scored: str) -> np.ndarray:
    if scored == JOINT:
        return np.ones(layout.length, dtype=bool)
    if scored == IMAGE_GIVEN_TEXT:
        return layout.tags == IMAGE
    if scored == TEXT_GIVEN_IMAGE:
        return layout.tags == TEXT
    raise ValueError(f"unknown scoring mode {scored!r}")


def _logits_tolerating_inconsistency(model, tokens, layout):
    """Model logits plus a per-row flag for draws whose visible evidence has
    zero support mass under an enumeration oracle.

    Such a draw certifies the scored sequence is impossible (its NLL is
    infinite), which is a scoring outcome, not an error; the sampler path
    keeps the hard OracleInconsistencyError contract.
    """
    try:
        return model.logits(tokens, layout), None
    except OracleInconsistencyError:
        pass
    out = np.zeros((tokens.shape[0], layout.length, model.vocab.total_size))
    bad = np.zeros(tokens.shape[0], dtype=bool)
    for i in range(tokens.shape[0]):
        try:
            out[i] = model.logits(tokens[i][None, :], layout)[0]
        except OracleInconsistencyError:
            bad[i] = True
    return out, bad


def elbo_draws(
    model,
    x0: MaskedSequence,
    n_mc: int,
    kind: ScheduleKind,
    rng: np.random.Generator,
    scored: str = JOINT,
    cfg_weight: float = 0.0,
) -> np.ndarray:
    """Per-draw negative-ELBO terms, nats per scored token.

    Each draw corrupts the scored positions at one shared t ~ U(0,1) and
    accumulates -alpha'/(1-alpha) x sum of masked cross-entropies, divided by
    the scored-position count. The expectation upper-bounds the exact NLL and
    is tight (exactly the NLL) under the enumeration oracle.

    Draw j consumes exactly (1 + n_scored) uniforms, so candidates scored
    with identically seeded streams share their corruption patterns (common
    random numbers). Times are stratified over [0,1] (draw j uniform in its
    own 1/n_mc stratum): the mean stays unbiased and the heavy 1/t tail of
    the linear-schedule weight is tamed; the reported standard error treats
    draws as independent and is conservative under stratification.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    layout = x0.layout
    vocab = model.vocab
    scored_flags = _scored_flags(layout, scored)
    n_scored = int(scored_flags.sum())

    t = (np.arange(n_mc) + rng.random(n_mc)) / n_mc
    u = rng.random((n_mc, n_scored))
    keep = alpha_at(kind, t)[:, None]
    masked = u >= keep  # (n_mc, n_scored)

    tokens = np.repeat(x0.tokens[None, :], n_mc, axis=0)
    scored_idx = np.nonzero(scored_flags)[0]
    cols = np.broadcast_to(scored_idx[None, :], masked.shape)
    rows = np.broadcast_to(np.arange(n_mc)[:, None], masked.shape)
    tokens[rows[masked], cols[masked]] = vocab.mask_id

    logits, bad = _logits_tolerating_inconsistency(model, tokens, layout)
    if cfg_weight != 0.0:
        uncond_tokens = tokens.copy()
        uncond_tokens[:, ~scored_flags] = vocab.mask_id
        uncond, bad_u = _logits_tolerating_inconsistency(model, uncond_tokens, layout)
        logits = (1.0 + cfg_weight) * logits - cfg_weight * uncond
        if bad_u is not None:
            bad = bad_u if bad is None else (bad | bad_u)

    logp = log_softmax(logits[:, scored_idx, :], axis=-1)
    ce = -np.take_along_axis(logp, x0.tokens[scored_idx][None, :, None].repeat(n_mc, 0), axis=-1)[..., 0]
    ce_sum = (ce * masked).sum(axis=1)

    w = raw_weight_at(kind, t)
    terms = np.zeros(n_mc)
    nz = ce_sum > 0.0
    terms[nz] = w[nz] * ce_sum[nz]
    terms /= n_scored
    if kind.name == "discrete":
        terms = terms * kind.steps
    if bad is not None:
        terms[bad] = np.inf
    return terms


def elbo_estimate(
    model,
    x0: MaskedSequence,
    n_mc: int,
    kind: ScheduleKind,
    rng: np.random.Generator,
    scored: str = JOINT,
    cfg_weight: float = 0.0,
) -> ElboEstimate:
    """Monte-Carlo likelihood bound: mean and standard error over n_mc draws."""
    terms = elbo_draws(model, x0, n_mc, kind, rng, scored, cfg_weight)
    if not np.all(np.isfinite(terms)):
        return ElboEstimate(nats_per_token=float("inf"), std_error=0.0, n_samples=n_mc)
    mean = float(terms.mean())
    se = float(terms.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    return ElboEstimate(nats_per_token=mean, std_error=se, n_samples=n_mc)


def joint_likelihood_score(
    model,
    x_img: np.ndarray,
    x_txt: np.ndarray,
    n_mc: int,
    rng: np.random.Generator,
    layout=None,
    kind: ScheduleKind | None = None,
    mode: str = JOINT,
    cfg_weight: float = 0.0,
) -> float:
    """Comparable likelihood score, higher = more probable (-ELBO in nats).

    Conditional modes clamp the conditioning modality visible and corrupt
    only the scored one. Pass identically seeded rngs across a candidate set
    for common-random-numbers comparisons.
    """
    layout = layout or getattr(model, "layout", None)
    if layout is None:
        raise ValueError("a layout is required to assemble the pair")
    kind = kind or ScheduleKind.linear()
    tokens = np.empty(layout.length, dtype=np.int64)
    tokens[layout.image_slice] = np.asarray(x_img, dtype=np.int64)
    tokens[layout.text_slice] = np.asarray(x_txt, dtype=np.int64)
    seq = MaskedSequence(tokens, layout)
    est = elbo_estimate(model, seq, n_mc, kind, rng, scored=mode, cfg_weight=cfg_weight)
    return -est.nats_per_token


def make_score_rng(seed: int, group: str) -> np.random.Generator:
    """Stream shared by every candidate of one scoring group (CRN)."""
    return substream(seed, "score", group)
