"""Denoiser contract, the exact enumeration oracle, and fine-tune target shifts.

A denoiser maps a partially masked token batch to per-position logits over
the joint vocabulary. Two realizations live in this package: the enumeration
oracle below (exact posteriors over a small support, used to verify
everything else) and the trainable transformer in maskfuse.transformer.
"""

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from maskfuse.util import NEG_INF
from maskfuse.vocab import (
    JointVocab,
    MaskedSequence,
    ModalityLayout,
    StructuralError,
    validate_tokens,
)


class OracleInconsistencyError(RuntimeError):
    """No support sequence is consistent with the visible tokens.

    Can only happen if a sampler escapes the support, which invalid-token
    suppression is meant to prevent.
    """


@runtime_checkable
class Denoiser(Protocol):
    vocab: JointVocab
    supports_cache: bool

    def logits(self, tokens: np.ndarray, layout: ModalityLayout | None = None) -> np.ndarray:
        """(B, L) int tokens -> (B, L, V) float64 logits."""
        ...


@dataclass
class DenoiserOutput:
    """Per-position logits over the joint vocabulary for one sequence."""

    logits: np.ndarray  # (L, V) float64
    cache: object | None = None

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyJointDistribution:
    """Explicit finite joint distribution over clean sequences.

    The substrate for every exact check: posteriors, NLLs, and sampling are
    all computed by enumeration over the support.
    """

    support: np.ndarray  # (S, L) int64
    probs: np.ndarray  # (S,) float64
    layout: ModalityLayout
    vocab: JointVocab
    _cum: np.ndarray = field(init=False, repr=False)
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.ndim != 2 or self.support.shape[0] != self.probs.shape[0]:
            raise StructuralError("support and probs shapes disagree")
        if self.support.shape[1] != self.layout.length:
            raise StructuralError("support sequence length != layout length")
        if np.any(self.probs < 0.0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1 within 1e-12")
        for row in self.support:
            report = validate_tokens(row, self.layout, self.vocab)
            if not report:
                raise ValueError(f"support sequence invalid at position {report.position}")
        keys = [tuple(row) for row in self.support]
        if len(set(keys)) != len(keys):
            raise ValueError("support sequences must be unique")
        self._index = {k: i for i, k in enumerate(keys)}
        self._cum = np.cumsum(self.probs)

    @property
    def size(self) -> int:
        return self.support.shape[0]

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        idx = np.searchsorted(self._cum, rng.random(n), side="right")
        return self.support[np.minimum(idx, self.size - 1)]

    def index_of(self, tokens: np.ndarray) -> int | None:
        return self._index.get(tuple(np.asarray(tokens, dtype=np.int64)))

    def sequence_prob(self, tokens: np.ndarray) -> float:
        i = self.index_of(tokens)
        return 0.0 if i is None else float(self.probs[i])

    def exact_nll(self, tokens: np.ndarray) -> float:
        """-ln p(sequence) in nats; inf off support."""
        p = self.sequence_prob(tokens)
        return float(np.inf) if p == 0.0 else -float(np.log(p))

    def entropy(self) -> float:
        """Shannon entropy of the joint in nats per sequence."""
        p = self.probs[self.probs > 0.0]
        return float(-(p * np.log(p)).sum())

    def conditional_nll(self, tokens: np.ndarray, scored: np.ndarray) -> float:
        """-ln p(tokens[scored] | tokens[~scored]) by enumeration."""
        tokens = np.asarray(tokens, dtype=np.int64)
        scored = np.asarray(scored, dtype=bool)
        match_cond = np.all(self.support[:, ~scored] == tokens[~scored], axis=1)
        denom = self.probs[match_cond].sum()
        if denom == 0.0:
            return float(np.inf)
        match_all = match_cond & np.all(self.support[:, scored] == tokens[scored], axis=1)
        num = self.probs[match_all].sum()
        return float(np.inf) if num == 0.0 else -float(np.log(num / denom))


def uniform_toy_distribution(
    sequences: np.ndarray, layout: ModalityLayout, vocab: JointVocab
) -> ToyJointDistribution:
    sequences = np.asarray(sequences, dtype=np.int64)
    n = sequences.shape[0]
    return ToyJointDistribution(sequences, np.full(n, 1.0 / n), layout, vocab)


class OracleDenoiser:
    """Exact p(x0_i = v | visible tokens) by summing consistent support mass."""

    supports_cache = False

    def __init__(self, dist: ToyJointDistribution, suppress_invalid: bool = True):
        if dist.size == 0:
            raise ValueError("oracle needs a nonempty support")
        self.dist = dist
        self.vocab = dist.vocab
        self.layout = dist.layout
        self.suppress_invalid = suppress_invalid
        s, l = dist.support.shape
        onehot = np.zeros((s, l, self.vocab.total_size), dtype=np.float64)
        rows = np.repeat(np.arange(s), l)
        cols = np.tile(np.arange(l), s)
        onehot[rows, cols, dist.support.ravel()] = 1.0
        self._onehot = onehot

    def logits(self, tokens: np.ndarray, layout: ModalityLayout | None = None) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.layout.length:
            raise StructuralError(f"tokens must be (B, {self.layout.length})")
        if layout is not None and layout.key() != self.layout.key():
            raise StructuralError("oracle layout mismatch")
        visible = tokens != self.vocab.mask_id
        # (B, S): support row consistent with every visible token of the batch row
        agree = tokens[:, None, :] == self.dist.support[None, :, :]
        consistent = np.all(agree | ~visible[:, None, :], axis=2)
        weights = consistent * self.dist.probs[None, :]
        totals = weights.sum(axis=1)
        if np.any(totals == 0.0):
            bad = int(np.nonzero(totals == 0.0)[0][0])
            raise OracleInconsistencyError(
                f"batch row {bad}: no support sequence matches the visible tokens"
            )
        weights /= totals[:, None]
        posterior = np.einsum("bs,slv->blv", weights, self._onehot)
        with np.errstate(divide="ignore"):
            out = np.where(posterior > 0.0, np.log(np.maximum(posterior, 1e-300)), NEG_INF)
        return out


def predict(model: Denoiser, x_t: MaskedSequence) -> DenoiserOutput:
    """Single-sequence denoiser call; see Denoiser.logits for the batch form."""
    logits = model.logits(x_t.tokens[None, :], x_t.layout)
    return DenoiserOutput(logits=logits[0])


def oracle_posterior(dist: ToyJointDistribution, x_t: MaskedSequence) -> DenoiserOutput:
    """Exact conditional logits for one masked sequence."""
    return predict(OracleDenoiser(dist), x_t)


UNSUPERVISED = -1


def shift_targets_for_finetune(
    x0: np.ndarray, x_t: np.ndarray, vocab: JointVocab
) -> np.ndarray:
    """Left-shifted supervision for fine-tuning causal checkpoints.

    Position i is supervised with x0[i+1] exactly when x_t[i+1] is masked, so
    the token *before* each mask predicts it, mirroring next-token training.
    The final position is never supervised. Works on (L,) or (B, L) arrays;
    unsupervised entries hold UNSUPERVISED (-1).
    """
    x0 = np.asarray(x0, dtype=np.int64)
    x_t = np.asarray(x_t, dtype=np.int64)
    if x0.shape != x_t.shape:
        raise StructuralError(f"x0 {x0.shape} and x_t {x_t.shape} must align")
    targets = np.full_like(x0, UNSUPERVISED)
    masked_next = x_t[..., 1:] == vocab.mask_id
    targets[..., :-1] = np.where(masked_next, x0[..., 1:], UNSUPERVISED)
    return targets
