"""Reverse-process generation over the joint vocabulary.

Strategies: confidence-ranked quota decoding (maskgit), schedule-driven
random reveal (ddpm), and one-position-per-step reveal (one_per_step, the
exact any-order sampler used for distribution-fidelity checks). All share
the same filtering, temperature, guidance-blending, and clamping machinery;
image-KV caching is a policy layered on the same loop, so cache_period=1 is
bit-identical to the uncached path.
"""

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax

from maskfuse.denoiser import OracleInconsistencyError
from maskfuse.schedule import ScheduleKind, alpha_at
from maskfuse.transformer import CapabilityError
from maskfuse.util import NEG_INF, substream
from maskfuse.vocab import (
    TEXT,
    ConfigError,
    JointVocab,
    MaskedSequence,
    ModalityLayout,
    validate_sequence,
)

MASKGIT = "maskgit"
DDPM = "ddpm"
ONE_PER_STEP = "one_per_step"

POST_FILTER = "post_filter"
PRE_FILTER = "pre_filter"


class GenerationError(RuntimeError):
    """Sampling failed to make progress or the model broke mid-run."""


@dataclass
class SamplerConfig:
    steps: int = 16
    strategy: str = MASKGIT
    schedule: ScheduleKind = field(default_factory=ScheduleKind.linear)
    top_k: int | None = None
    top_p: float | None = None
    temperature: float = 1.0
    anneal: str = "none"  # "none" or "linear" (temperature -> 0 across steps)
    temperature_fn: Callable[[int, int], float] | None = None  # (step_no, steps) -> tau
    cfg_weight: float = 1.5
    cfg_step_window: tuple[int, int] | None = None  # inclusive step_no range, 1-based
    cfg_paper_sign: bool = False
    cache_period: int | None = None
    confidence: str = POST_FILTER
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.strategy not in (MASKGIT, DDPM, ONE_PER_STEP):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.top_k is not None and self.top_p is not None:
            raise ConfigError("top_k and top_p are mutually exclusive")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.cfg_weight < 0.0:
            raise ConfigError("cfg_weight must be >= 0")
        if self.temperature < 0.0:
            raise ConfigError("temperature must be >= 0")
        if self.confidence not in (POST_FILTER, PRE_FILTER):
            raise ConfigError(f"unknown confidence mode {self.confidence!r}")
        if self.cache_period is not None and self.cache_period < 1:
            raise ConfigError("cache_period must be >= 1")

    def temperature_at(self, step_no: int, total: int) -> float:
        if self.temperature_fn is not None:
            return float(self.temperature_fn(step_no, total))
        if self.anneal == "linear" and total > 1:
            return self.temperature * (total - step_no) / (total - 1)
        return self.temperature

    def cfg_active(self, step_no: int) -> bool:
        if self.cfg_step_window is None:
            return True
        lo, hi = self.cfg_step_window
        return lo <= step_no <= hi


def unmask_quotas(steps: int, kind: ScheduleKind, n_tokens: int) -> np.ndarray:
    """Per-step unmask counts in execution order (first entry = earliest step).

    Step executed at countdown index t gets floor(f(t) * n_tokens) with
    f(t) = (1 - alpha(t/T)) / sum over the grid; the final step absorbs the
    floor shortfall so the quotas sum to n_tokens exactly.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    t = np.arange(steps, 0, -1) / steps
    f = 1.0 - alpha_at(kind, t)
    f = f / f.sum()
    m = np.floor(f * n_tokens).astype(np.int64)
    m[-1] += n_tokens - m.sum()
    return m


def unmask_quota(t_index: int, steps: int, kind: ScheduleKind, n_tokens: int) -> int:
    """Quota for countdown index t_index (steps first, 1 last)."""
    if not 1 <= t_index <= steps:
        raise ValueError(f"t_index must lie in [1, {steps}], got {t_index}")
    return int(unmask_quotas(steps, kind, n_tokens)[steps - t_index])


def unmask_quota_table(steps: int, kind: ScheduleKind, n_tokens) -> np.ndarray:
    """unmask_quotas for many token counts at once: (len(n_tokens), steps)."""
    n_tokens = np.asarray(n_tokens, dtype=np.int64)
    t = np.arange(steps, 0, -1) / steps
    f = 1.0 - alpha_at(kind, t)
    f = f / f.sum()
    m = np.floor(f[None, :] * n_tokens[:, None]).astype(np.int64)
    m[:, -1] += n_tokens - m.sum(axis=1)
    return m


def cfg_blend(cond: np.ndarray, uncond: np.ndarray, w: float, paper_sign: bool = False) -> np.ndarray:
    """(1+w)*cond - w*uncond; w=0 returns cond itself (bit-exact).

    paper_sign flips the uncond term to "+" to reproduce the printed formula
    for comparison runs.
    """
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {cond.shape} vs {uncond.shape}")
    if w == 0.0:
        return cond
    sign = 1.0 if paper_sign else -1.0
    return (1.0 + w) * cond + sign * w * uncond


def filter_logits(logits: np.ndarray, top_k: int | None, top_p: float | None) -> np.ndarray:
    """Keep the top-k ids or the top-p nucleus per row; the rest go to NEG_INF."""
    if top_k is None and top_p is None:
        return logits
    logits = np.asarray(logits, dtype=np.float64)
    order = np.argsort(-logits, axis=-1, kind="stable")
    out = np.full_like(logits, NEG_INF)
    rows = np.arange(logits.shape[0])[:, None]
    if top_k is not None:
        keep = order[:, :top_k]
        out[rows, keep] = logits[rows, keep]
        return out
    probs = softmax(logits, axis=-1)
    sorted_probs = np.take_along_axis(probs, order, axis=-1)
    cum_before = np.cumsum(sorted_probs, axis=-1) - sorted_probs
    keep_sorted = cum_before < top_p  # smallest set reaching mass top_p
    keep_flat = np.zeros_like(keep_sorted)
    np.put_along_axis(keep_flat, order, keep_sorted, axis=-1)
    out[keep_flat] = logits[keep_flat]
    return out


def _sample_rows(
    filtered: np.ndarray,
    raw: np.ndarray,
    tau: float,
    confidence_mode: str,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one token per row from filtered logits at temperature tau.

    Returns (tokens, confidences). tau=0 is the greedy limit: argmax token,
    confidence taken from the untempered distribution. Confidence is the
    sampled token's probability under the filtered (post_filter) or raw
    (pre_filter) distribution.
    """
    n = filtered.shape[0]
    idx = np.arange(n)
    if tau <= 0.0:
        tokens = np.argmax(filtered, axis=-1)
        post = softmax(filtered, axis=-1)[idx, tokens]
    else:
        logp = log_softmax(filtered / tau, axis=-1)
        p = np.exp(logp)
        cum = np.cumsum(p, axis=-1)
        cum /= cum[:, -1:]
        u = rng.random(n)
        tokens = np.argmax(cum > u[:, None], axis=-1)
        post = p[idx, tokens]
    if confidence_mode == PRE_FILTER:
        base = raw if tau <= 0.0 else raw / tau
        conf = softmax(base, axis=-1)[idx, tokens]
    else:
        conf = post
    return tokens, conf


@dataclass
class SamplerState:
    """Single-sequence decoding state for the step-level operations."""

    tokens: np.ndarray
    layout: ModalityLayout
    cond: np.ndarray  # positions visible at start; clamped for the whole run
    n_initial_masked: int

    @classmethod
    def from_sequence(cls, seq: MaskedSequence, vocab: JointVocab) -> "SamplerState":
        masked = seq.mask_flags(vocab)
        return cls(
            tokens=seq.tokens.copy(),
            layout=seq.layout,
            cond=~masked,
            n_initial_masked=int(masked.sum()),
        )

    def masked(self, vocab: JointVocab) -> np.ndarray:
        return self.tokens == vocab.mask_id


@dataclass
class StepTrace:
    step: int
    masked_count: int
    mean_confidence: float
    cfg_gap: float


def write_trace_csv(traces, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "masked_count", "mean_confidence", "cfg_gap"])
        for tr in traces:
            writer.writerow([tr.step, tr.masked_count, f"{tr.mean_confidence:.8g}", f"{tr.cfg_gap:.8g}"])


class _Engine:
    """Batched decoding loop shared by every strategy and the cache policy."""

    def __init__(
        self,
        model,
        tokens: np.ndarray,
        layout: ModalityLayout,
        config: SamplerConfig,
        rng: np.random.Generator,
        cache_period: int | None,
        collect_trace: bool,
    ):
        self.model = model
        self.vocab: JointVocab = model.vocab
        self.layout = layout
        self.config = config
        self.rng = rng
        self.collect_trace = collect_trace
        self.tokens = np.array(tokens, dtype=np.int64)
        self.masked = self.tokens == self.vocab.mask_id
        self.cond = ~self.masked
        self.has_cond = bool(self.cond.any())
        self.text_cols = layout.tags == TEXT
        self.cache_period = cache_period
        if cache_period is not None and not getattr(model, "supports_cache", False):
            raise CapabilityError(f"{type(model).__name__} does not support KV caching")
        self.cache_cond = None
        self.cache_uncond = None
        self.trace: list[StepTrace] = []

    # -- model evaluation -------------------------------------------------
    def _full_logits(self, tokens: np.ndarray, which: str) -> np.ndarray:
        if self.cache_period is not None:
            logits, cache = self.model.logits_with_cache(tokens, self.layout)
            if which == "cond":
                self.cache_cond = cache
            else:
                self.cache_uncond = cache
            return logits
        return self.model.logits(tokens, self.layout)

    def _text_only_logits(self, tokens: np.ndarray, cache) -> np.ndarray:
        b = tokens.shape[0]
        out = np.zeros((b, self.layout.length, self.vocab.total_size))
        out[:, self.layout.text_slice] = self.model.text_logits(tokens, self.layout, cache)
        return out

    def _uncond_tokens(self) -> np.ndarray:
        out = self.tokens.copy()
        out[self.cond] = self.vocab.mask_id
        return out

    # -- one step ----------------------------------------------------------
    def step(self, step_no: int, t_index: int, total_steps: int, refresh: bool) -> None:
        cfg = self.config
        eligible = self.masked.copy()
        if not refresh:
            eligible &= self.text_cols[None, :]

        w = cfg.cfg_weight if cfg.cfg_active(step_no) else 0.0
        need_uncond = self.has_cond and (w != 0.0 or self.collect_trace)

        try:
            if refresh:
                logits = self._full_logits(self.tokens, "cond")
                uncond = self._full_logits(self._uncond_tokens(), "uncond") if need_uncond else None
            else:
                logits = self._text_only_logits(self.tokens, self.cache_cond)
                uncond = (
                    self._text_only_logits(self._uncond_tokens(), self.cache_uncond)
                    if need_uncond
                    else None
                )
        except OracleInconsistencyError as exc:
            raise GenerationError(f"model inconsistency at step {step_no}: {exc}") from exc

        gap = 0.0
        if self.collect_trace and eligible.any() and uncond is not None:
            gap = _logit_gap(logits[eligible], uncond[eligible])

        blended = cfg_blend(logits, uncond, w, cfg.cfg_paper_sign) if uncond is not None else logits

        rows, cols = np.nonzero(eligible)
        if rows.size == 0:
            if self.collect_trace:
                self.trace.append(StepTrace(step_no, int(self.masked.sum()), 0.0, gap))
            return

        flat = blended[rows, cols]
        flat[:, self.vocab.mask_id] = NEG_INF  # the clean-data posterior has no mask state
        filtered = filter_logits(flat, cfg.top_k, cfg.top_p)
        tau = cfg.temperature_at(step_no, total_steps)
        sampled, conf = _sample_rows(filtered, flat, tau, cfg.confidence, self.rng)

        reveal_flat = self._select(step_no, t_index, total_steps, eligible, rows, cols, conf)

        self.tokens[rows[reveal_flat], cols[reveal_flat]] = sampled[reveal_flat]
        self.masked[rows[reveal_flat], cols[reveal_flat]] = False
        if self.collect_trace:
            mean_conf = float(conf[reveal_flat].mean()) if reveal_flat.any() else 0.0
            self.trace.append(StepTrace(step_no, int(self.masked.sum()), mean_conf, gap))

    def _select(
        self,
        step_no: int,
        t_index: int,
        total_steps: int,
        eligible: np.ndarray,
        rows: np.ndarray,
        cols: np.ndarray,
        conf: np.ndarray,
    ) -> np.ndarray:
        """Boolean flags over the flat eligible entries: which ones to reveal."""
        cfg = self.config
        b = self.tokens.shape[0]
        if cfg.strategy == MASKGIT:
            planned = self._planned_cum[:, step_no - 1]
            revealed = self._n_initial - self.masked.sum(axis=1)
            target = np.clip(planned - revealed, 0, None)
            elig_count = eligible.sum(axis=1)
            if t_index == 1:
                target = self.masked.sum(axis=1)
            target = np.minimum(target, elig_count)
            conf_grid = np.full(self.tokens.shape, -np.inf)
            conf_grid[rows, cols] = conf
            order = np.argsort(-conf_grid, axis=1, kind="stable")
            ranks = np.empty_like(order)
            np.put_along_axis(ranks, order, np.arange(self.tokens.shape[1])[None, :].repeat(b, 0), axis=1)
            chosen = (ranks < target[:, None]) & eligible
            return chosen[rows, cols]
        if cfg.strategy == DDPM:
            t = t_index / total_steps
            s = (t_index - 1) / total_steps
            p = reveal_probability(cfg.schedule, t, s)
            u = self.rng.random(rows.size)
            return u < p
        # one_per_step: each row with eligible positions reveals exactly one,
        # uniformly chosen. rows is sorted (row-major nonzero), so per-row
        # segments are contiguous.
        u = self.rng.random(b)
        counts = np.bincount(rows, minlength=b)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        active = counts > 0
        picks = starts[active] + np.minimum(
            (u[active] * counts[active]).astype(np.int64), counts[active] - 1
        )
        reveal = np.zeros(rows.size, dtype=bool)
        reveal[picks] = True
        return reveal

    # -- full run ---------------------------------------------------------
    def run(self) -> np.ndarray:
        cfg = self.config
        if cfg.strategy == ONE_PER_STEP:
            total = int(self.masked.sum(axis=1).max())
            if total == 0:
                return self.tokens
            limit = total * max(1, self.cache_period or 1) + (self.cache_period or 0) + 4
            step_no = 0
            while self.masked.any():
                step_no += 1
                if step_no > limit:
                    raise GenerationError("one_per_step failed to terminate")
                t_index = max(total - step_no + 1, 1)
                refresh = self._refresh_due(step_no, t_index)
                self.step(step_no, t_index, total, refresh)
            return self.tokens

        self._n_initial = self.masked.sum(axis=1)
        if cfg.strategy == MASKGIT:
            plans = [unmask_quotas(cfg.steps, cfg.schedule, int(n)) for n in self._n_initial]
            self._planned_cum = np.cumsum(np.stack(plans), axis=1)
        for step_no, t_index in enumerate(range(cfg.steps, 0, -1), start=1):
            refresh = self._refresh_due(step_no, t_index)
            self.step(step_no, t_index, cfg.steps, refresh)
        if self.masked.any():
            raise GenerationError("masked positions remain after the final step")
        return self.tokens

    def _refresh_due(self, step_no: int, t_index: int) -> bool:
        if self.cache_period is None:
            return True
        if self.cache_cond is None:
            return True  # nothing cached yet
        if t_index == 1 and bool((self.masked & ~self.text_cols[None, :]).any()):
            return True  # last chance to unmask frozen image positions
        if self.config.strategy == ONE_PER_STEP:
            return (step_no - 1) % self.cache_period == 0
        return t_index % self.cache_period == 0


GAP_FLOOR = -30.0


def _logit_gap(cond: np.ndarray, uncond: np.ndarray) -> float:
    """Mean L2 distance between conditional and unconditional predictions.

    Computed on log-softmax values floored at GAP_FLOOR nats so suppression
    sentinels (effectively -inf) cannot dominate the diagnostic; identical
    inputs give exactly 0.
    """
    a = np.maximum(log_softmax(cond, axis=-1), GAP_FLOOR)
    b = np.maximum(log_softmax(uncond, axis=-1), GAP_FLOOR)
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1)).mean())


def reveal_probability(kind: ScheduleKind, t: float, s: float) -> float:
    """Per-token reveal probability (alpha_s - alpha_t) / (1 - alpha_t).

    s = t reveals nothing; s = 0 reveals everything (alpha_0 = 1). The
    degenerate 0/0 at alpha_t = 1 resolves to 1 when s = 0 so termination
    never hinges on a snapped discrete schedule.
    """
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"need 0 <= s <= t <= 1, got s={s} t={t}")
    a_t = float(alpha_at(kind, t))
    a_s = float(alpha_at(kind, s))
    if 1.0 - a_t <= 0.0:
        return 1.0 if s == 0.0 else 0.0
    return (a_s - a_t) / (1.0 - a_t)


def generate_batch(
    model,
    tokens: np.ndarray,
    layout: ModalityLayout,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    cache_period: int | None = None,
    collect_trace: bool = False,
):
    """Decode a (B, L) batch until no masks remain. Visible input tokens are
    clamped bit-exactly. Returns the tokens, or (tokens, trace) when tracing."""
    rng = rng if rng is not None else substream(config.seed, "sampler")
    engine = _Engine(model, tokens, layout, config, rng, cache_period, collect_trace)
    out = engine.run()
    if collect_trace:
        return out, engine.trace
    return out


def generate(
    model,
    initial: MaskedSequence,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
):
    """Single-sequence generation; any pre-filled positions are inpainting
    clamps and survive unchanged."""
    report = validate_sequence(initial, model.vocab)
    if not report:
        raise ValueError(f"initial sequence invalid at position {report.position}")
    result = generate_batch(
        model, initial.tokens[None, :], initial.layout, config, rng, None, collect_trace
    )
    if collect_trace:
        tokens, trace = result
        return MaskedSequence(tokens[0], initial.layout), trace
    return MaskedSequence(result[0], initial.layout)


def generate_cached(
    model,
    initial: MaskedSequence,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
):
    """Generation with the image-KV cache policy from config.cache_period.

    Between cache refreshes only text logits are computed and image tokens
    stay frozen; cache_period=1 refreshes every step and is bit-identical to
    generate() under the same seed.
    """
    if config.cache_period is None:
        raise ConfigError("generate_cached needs config.cache_period >= 1")
    report = validate_sequence(initial, model.vocab)
    if not report:
        raise ValueError(f"initial sequence invalid at position {report.position}")
    result = generate_batch(
        model,
        initial.tokens[None, :],
        initial.layout,
        config,
        rng,
        config.cache_period,
        collect_trace,
    )
    if collect_trace:
        tokens, trace = result
        return MaskedSequence(tokens[0], initial.layout), trace
    return MaskedSequence(result[0], initial.layout)


def maskgit_step(
    state: SamplerState,
    model,
    config: SamplerConfig,
    step_index: int,
    rng: np.random.Generator,
) -> SamplerState:
    """One confidence-ranked reveal at countdown index step_index (T..1)."""
    vocab = model.vocab
    masked = state.masked(vocab)
    if not masked.any():
        raise ValueError("maskgit_step needs at least one masked position")
    engine = _Engine(model, state.tokens[None, :], state.layout, config, rng, None, False)
    engine.cond = state.cond[None, :]
    engine.has_cond = bool(state.cond.any())
    engine._n_initial = np.array([state.n_initial_masked])
    plan = unmask_quotas(config.steps, config.schedule, state.n_initial_masked)
    engine._planned_cum = np.cumsum(plan)[None, :]
    step_no = config.steps - step_index + 1
    engine.step(step_no, step_index, config.steps, refresh=True)
    return replace(state, tokens=engine.tokens[0])


def ddpm_step(
    state: SamplerState,
    model,
    config: SamplerConfig,
    t: float,
    s: float,
    rng: np.random.Generator,
) -> SamplerState:
    """Random-reveal step from time t to s < t."""
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError(f"need 0 <= s <= t <= 1, got s={s} t={t}")
    vocab = model.vocab
    cfg = replace(config, strategy=DDPM)
    engine = _Engine(model, state.tokens[None, :], state.layout, cfg, rng, None, False)
    engine.cond = state.cond[None, :]
    engine.has_cond = bool(state.cond.any())

    eligible = engine.masked.copy()
    rows, cols = np.nonzero(eligible)
    if rows.size == 0:
        return replace(state, tokens=engine.tokens[0])
    logits = engine.model.logits(engine.tokens, engine.layout)
    w = cfg.cfg_weight if engine.has_cond else 0.0
    if w != 0.0:
        uncond = engine.model.logits(engine._uncond_tokens(), engine.layout)
        logits = cfg_blend(logits, uncond, w, cfg.cfg_paper_sign)
    flat = logits[rows, cols]
    flat[:, vocab.mask_id] = NEG_INF
    filtered = filter_logits(flat, cfg.top_k, cfg.top_p)
    sampled, _ = _sample_rows(filtered, flat, cfg.temperature, cfg.confidence, rng)
    p = reveal_probability(cfg.schedule, t, s) if t > s else 0.0
    reveal = rng.random(rows.size) < p
    tokens = engine.tokens.copy()
    tokens[rows[reveal], cols[reveal]] = sampled[reveal]
    return replace(state, tokens=tokens[0])


def cfg_logit_gap_trace(
    model,
    initial: MaskedSequence,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-step mean L2 distance between conditional and unconditional logits
    over the currently masked positions."""
    _, trace = generate(model, initial, config, rng, collect_trace=True)
    return np.array([tr.cfg_gap for tr in trace])


def edit_best_of_n(
    model,
    pair: MaskedSequence,
    n: int,
    noise_level: float,
    config: SamplerConfig,
    rng: np.random.Generator,
    clamp_text: bool = False,
    n_mc: int = 64,
    kind: ScheduleKind | None = None,
) -> MaskedSequence:
    """Corrupt the pair under n independent masks at noise_level, denoise each,
    and return the candidate with the highest model likelihood (ties go to the
    lowest candidate index). clamp_text keeps the text intact so only the
    image region can change.
    """
    from maskfuse.objective import joint_likelihood_score

    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < noise_level < 1.0:
        raise ValueError("noise_level must lie in (0, 1)")
    kind = kind or config.schedule
    layout = pair.layout
    vocab = model.vocab

    from maskfuse.forward import corrupt_tokens

    candidates = []
    scores = np.empty(n)
    for j in range(n):
        t_text = 0.0 if clamp_text else noise_level
        corrupted = corrupt_tokens(
            pair.tokens[None, :],
            layout,
            np.array([t_text]),
            np.array([noise_level]),
            kind,
            vocab,
            rng,
        )[0]
        initial = MaskedSequence(corrupted, layout)
        result = generate(model, initial, config, rng)
        candidates.append(result)
        score_rng = substream(config.seed, "edit_score")
        scores[j] = joint_likelihood_score(
            model,
            result.tokens[layout.image_slice],
            result.tokens[layout.text_slice],
            n_mc,
            score_rng,
            layout=layout,
            kind=kind,
        )
    best = int(np.argmax(scores))
    return candidates[best]
