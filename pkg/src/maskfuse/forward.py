"""Absorbing forward process: masking corruption, verification transition
matrices, per-modality timestep offsets, and modality dropout for guidance."""

from dataclasses import dataclass

import numpy as np

from maskfuse.schedule import ScheduleKind, alpha_at
from maskfuse.vocab import (
    IMAGE,
    TEXT,
    ConfigError,
    JointVocab,
    MaskedSequence,
    ModalityLayout,
    validate_sequence,
)


@dataclass(frozen=True)
class TimestepPair:
    """Per-modality diffusion times; the image runs at most `delta` behind."""

    t_text: float
    t_image: float
    delta: float = 0.0

    def __post_init__(self):
        for name, t in (("t_text", self.t_text), ("t_image", self.t_image)):
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {t}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        lo = max(0.0, self.t_text - self.delta)
        if not lo - 1e-12 <= self.t_image <= self.t_text + 1e-12:
            raise ValueError(
                f"t_image {self.t_image} outside [max(0, t_text - delta), t_text] "
                f"= [{lo}, {self.t_text}]"
            )


def transition_matrix(alpha: float, vocab: JointVocab) -> np.ndarray:
    """Absorbing one-step matrix: alpha*I + (1-alpha) * ones @ e_mask^T.

    Row-stochastic by construction: diagonal alpha off the mask row, mass
    1-alpha into the mask column, mask row fixed at identity. Only used for
    small-vocab verification; the hot path masks tokens directly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    v = vocab.total_size
    q = alpha * np.eye(v)
    q[:, vocab.mask_id] += 1.0 - alpha
    return q


def compose_transitions(alphas, vocab: JointVocab) -> np.ndarray:
    """Product of per-step matrices; closed under composition at prod(alphas)."""
    alphas = list(alphas)
    if not alphas:
        raise ValueError("need at least one alpha to compose")
    out = transition_matrix(alphas[0], vocab)
    for a in alphas[1:]:
        out = out @ transition_matrix(a, vocab)
    return out


def corrupt_tokens(
    tokens: np.ndarray,
    layout: ModalityLayout,
    t_text: np.ndarray,
    t_image: np.ndarray,
    kind: ScheduleKind,
    vocab: JointVocab,
    rng: np.random.Generator,
) -> np.ndarray:
    """Batched masking: each position masked independently at its modality's rate.

    tokens is (B, L); t_text/t_image are (B,). Returns a fresh array; inputs
    must be mask-free (the absorbing kernel never un-masks, so feeding an
    already-corrupted batch would double-count).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != layout.length:
        raise ValueError(f"tokens must be (B, {layout.length}), got {tokens.shape}")
    keep_text = alpha_at(kind, np.asarray(t_text, dtype=np.float64))[:, None]
    keep_image = alpha_at(kind, np.asarray(t_image, dtype=np.float64))[:, None]
    keep = np.where(layout.tags[None, :] == TEXT, keep_text, keep_image)
    u = rng.random(tokens.shape)
    out = tokens.copy()
    out[u >= keep] = vocab.mask_id
    return out


def corrupt(
    x0: MaskedSequence,
    pair: TimestepPair,
    kind: ScheduleKind,
    vocab: JointVocab,
    rng: np.random.Generator,
) -> MaskedSequence:
    """Apply the forward process to a clean sequence at the pair's times."""
    if np.any(x0.mask_flags(vocab)):
        raise ValueError("corrupt() expects a clean sequence with no mask tokens")
    report = validate_sequence(x0, vocab)
    if not report:
        raise ValueError(f"invalid input sequence at position {report.position}")
    out = corrupt_tokens(
        x0.tokens[None, :],
        x0.layout,
        np.array([pair.t_text]),
        np.array([pair.t_image]),
        kind,
        vocab,
        rng,
    )[0]
    return MaskedSequence(out, x0.layout, t_text=pair.t_text, t_image=pair.t_image)


def sample_timestep_pairs(
    n: int,
    k_ratio: float,
    n_min: int,
    n_max: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized draw of (t_text, t_image, delta) triples.

    t_text ~ U(0,1); delta ~ U(K/N_max, K/N_min); t_image ~ U(max(0, t_text -
    delta), t_text), so the image clock trails the text clock by at most delta.
    """
    if not 1 <= n_min <= n_max:
        raise ConfigError(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    if k_ratio <= 0:
        raise ConfigError(f"k_ratio must be > 0, got {k_ratio}")
    t_text = rng.random(n)
    delta = rng.uniform(k_ratio / n_max, k_ratio / n_min, size=n)
    lo = np.maximum(0.0, t_text - delta)
    t_image = lo + rng.random(n) * (t_text - lo)
    return t_text, t_image, delta


def sample_timestep_pair(
    k_ratio: float, n_min: int, n_max: int, rng: np.random.Generator
) -> TimestepPair:
    t_text, t_image, delta = sample_timestep_pairs(1, k_ratio, n_min, n_max, rng)
    return TimestepPair(float(t_text[0]), float(t_image[0]), float(delta[0]))


def cfg_dropout_batch(
    tokens: np.ndarray,
    layout: ModalityLayout,
    p_uncond: float,
    vocab: JointVocab,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row modality dropout; returns (tokens, dropped) where dropped is
    (B,) holding -1 (none), TEXT, or IMAGE."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b = tokens.shape[0]
    hit = rng.random(b) < p_uncond
    pick_image = rng.random(b) < 0.5
    dropped = np.full(b, -1, dtype=np.int64)
    dropped[hit & pick_image] = IMAGE
    dropped[hit & ~pick_image] = TEXT
    out = tokens.copy()
    out[dropped == IMAGE] = np.where(
        layout.tags == IMAGE, vocab.mask_id, out[dropped == IMAGE]
    )
    out[dropped == TEXT] = np.where(layout.tags == TEXT, vocab.mask_id, out[dropped == TEXT])
    return out, dropped


def cfg_dropout(
    x_t: MaskedSequence,
    p_uncond: float,
    vocab: JointVocab,
    rng: np.random.Generator,
) -> MaskedSequence:
    """With probability p_uncond, mask every token of one coin-flipped modality."""
    out, _ = cfg_dropout_batch(x_t.tokens[None, :], x_t.layout, p_uncond, vocab, rng)
    return MaskedSequence(out[0], x_t.layout, x_t.t_text, x_t.t_image)
