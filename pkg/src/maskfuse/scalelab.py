"""IsoFLOP sweeps, the C = 6ND budget rule, parabola minima, power-law fits."""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from maskfuse.transformer import ModelSpec


@dataclass(frozen=True)
class ScalingPoint:
    flops: int  # exact 6*N*D after token rounding
    params: int  # non-embedding, head included
    tokens: int
    final_loss: float
    budget: int = 0  # requested budget the cell was scheduled under (0 = flops)

    def __post_init__(self):
        if self.flops <= 0 or self.params <= 0 or self.tokens <= 0:
            raise ValueError("flops, params, tokens must be positive")
        if self.flops != 6 * self.params * self.tokens:
            raise ValueError(
                f"C = 6ND violated: {self.flops} != 6*{self.params}*{self.tokens}"
            )
        if self.budget == 0:
            object.__setattr__(self, "budget", self.flops)


@dataclass(frozen=True)
class ParabolaFit:
    n_opt: float
    coeffs: tuple[float, float, float]  # a2, a1, a0 over log N
    vertex_in_range: bool
    concave: bool  # True when the fit opens downward (fit failure)


@dataclass(frozen=True)
class PowerLawFit:
    coefficient: float
    exponent: float
    residual: float


def flop_budget(params: int, tokens: int) -> int:
    """Training compute approximation C = 6 N D."""
    if params <= 0 or tokens <= 0:
        raise ValueError("params and tokens must be positive")
    return 6 * int(params) * int(tokens)


def count_params(spec: ModelSpec) -> int:
    """Closed-form non-embedding parameter count (output head included).

    Excludes the token and modality embedding tables. Mirrors the tensors of
    the built model exactly: per block qkv + out projections, the FFN pair,
    two or three RMSNorm gains, the per-head qk scale when enabled; plus the
    final norm (absent for zero-layer models) and the head.
    """
    d = spec.d_model
    v = spec.vocab().total_size
    per_block = 4 * d * d + 2 * d * spec.ffn_hidden
    per_block += d * (3 if spec.sandwich_norm else 2)
    if spec.qk_norm:
        per_block += spec.n_heads
    total = spec.n_layers * per_block + d * v
    if spec.n_layers > 0:
        total += d  # final norm gain
    return total


def tokens_for_budget(budget: int, params: int) -> int:
    """D = floor(C / 6N)."""
    return int(budget) // (6 * int(params))


def isoflop_sweep(
    budgets,
    model_grid,
    train_fn,
    tokens_rounding: int = 1,
) -> list[ScalingPoint]:
    """Train every (budget, spec) cell for D = C/(6N) tokens and record loss.

    train_fn(spec, n_tokens) -> (final_loss, tokens_used) runs one training
    job; tokens_used may undershoot the request when batch granularity bites,
    and the emitted point's budget is recomputed so C = 6ND holds exactly.
    Cells whose token allowance rounds to < tokens_rounding are skipped with
    a warning.
    """
    points = []
    for budget in budgets:
        for spec in model_grid:
            n = count_params(spec)
            d_request = tokens_for_budget(budget, n)
            if d_request < tokens_rounding:
                warnings.warn(
                    f"skipping budget={budget:g} params={n}: token allowance {d_request} too small",
                    stacklevel=2,
                )
                continue
            loss, d_used = train_fn(spec, d_request)
            if d_used <= 0:
                warnings.warn(
                    f"skipping budget={budget:g} params={n}: no full batch fits", stacklevel=2
                )
                continue
            points.append(
                ScalingPoint(
                    flops=flop_budget(n, d_used),
                    params=n,
                    tokens=d_used,
                    final_loss=float(loss),
                    budget=int(budget),
                )
            )
    return points


def fit_isoflop_minimum(points: list[ScalingPoint]) -> ParabolaFit:
    """Least-squares parabola of loss against log N; vertex is the optimum.

    Refuses to extrapolate: when the vertex falls outside the sampled N range
    (or the fit opens downward) the flags say so and n_opt is clamped to the
    best sampled point.
    """
    if len(points) < 3:
        raise ValueError("need at least 3 points per budget to fit a parabola")
    logn = np.log(np.array([p.params for p in points], dtype=np.float64))
    loss = np.array([p.final_loss for p in points], dtype=np.float64)
    a2, a1, a0 = np.polyfit(logn, loss, 2)
    if a2 <= 0.0:
        best = points[int(np.argmin(loss))]
        return ParabolaFit(float(best.params), (float(a2), float(a1), float(a0)), False, True)
    vertex = -a1 / (2.0 * a2)
    in_range = bool(logn.min() <= vertex <= logn.max())
    if not in_range:
        vertex = float(np.clip(vertex, logn.min(), logn.max()))
    return ParabolaFit(float(np.exp(vertex)), (float(a2), float(a1), float(a0)), in_range, False)


def fit_power_law(minima) -> PowerLawFit:
    """Log-log linear regression of N_opt against budget C.

    minima: iterable of (C, N_opt) with at least 3 distinct budgets.
    """
    minima = list(minima)
    if len(minima) < 3:
        raise ValueError("need at least 3 budgets to fit a power law")
    c = np.array([m[0] for m in minima], dtype=np.float64)
    n = np.array([m[1] for m in minima], dtype=np.float64)
    if np.any(c <= 0.0) or np.any(n <= 0.0):
        raise ValueError("power-law fit needs positive budgets and sizes")
    slope, intercept = np.polyfit(np.log(c), np.log(n), 1)
    pred = intercept + slope * np.log(c)
    residual = float(np.sqrt(np.mean((np.log(n) - pred) ** 2)))
    return PowerLawFit(coefficient=float(np.exp(intercept)), exponent=float(slope), residual=residual)


@dataclass(frozen=True)
class ScalingSummary:
    points: list
    minima: list  # (budget, ParabolaFit)
    power_law: PowerLawFit


def fit_scaling_pipeline(points: list[ScalingPoint]) -> ScalingSummary:
    """Group points by scheduled budget, fit per-budget minima, then the law."""
    budgets = sorted({p.budget for p in points})
    minima = []
    for b in budgets:
        group = [p for p in points if p.budget == b]
        if len(group) >= 3:
            minima.append((b, fit_isoflop_minimum(group)))
    usable = [(b, f.n_opt) for b, f in minima if not f.concave]
    law = fit_power_law(usable)
    return ScalingSummary(points=points, minima=minima, power_law=law)


def planted_loss_surface(a: float, b_coef: float, alpha: float, e_coef: float, beta: float):
    """L(N, D) = a + b*N^-alpha + e*D^-beta, the synthetic surface for pipeline
    checks. Its compute-optimal size scales as N_opt ~ C^(beta/(alpha+beta))."""

    def loss(params: int, tokens: int) -> float:
        return a + b_coef * params ** (-alpha) + e_coef * tokens ** (-beta)

    return loss


def planted_optimal_exponent(alpha: float, beta: float) -> float:
    return beta / (alpha + beta)


def sweep_planted_surface(budgets, model_grid, surface) -> list[ScalingPoint]:
    """Run the sweep against a planted surface instead of real training."""

    def train_fn(spec: ModelSpec, n_tokens: int):
        return surface(count_params(spec), n_tokens), n_tokens

    return isoflop_sweep(budgets, model_grid, train_fn)


def write_points_csv(points: list[ScalingPoint], path, seed: int = 0) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["budget", "params", "tokens", "loss", "seed"])
        for p in points:
            writer.writerow([p.budget, p.params, p.tokens, f"{p.final_loss:.8g}", seed])


def read_points_csv(path) -> list[ScalingPoint]:
    points = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            n, d = int(row["params"]), int(row["tokens"])
            points.append(
                ScalingPoint(
                    flops=6 * n * d,
                    params=n,
                    tokens=d,
                    final_loss=float(row["loss"]),
                    budget=int(row["budget"]),
                )
            )
    return points


@dataclass(frozen=True)
class OffsetReport:
    """Horizontal gap between two loss-vs-compute frontiers.

    factor k means family B needs k times the compute of family A to reach
    the same loss (geometric mean over the overlapping loss range).
    """

    factor: float
    slope_a: float
    slope_b: float
    loss_range: tuple[float, float]


def _frontier_fit(points: list[ScalingPoint]) -> tuple[float, float, np.ndarray]:
    """Per-budget best loss, fit as loss = m*log(C) + b."""
    budgets = sorted({p.budget for p in points})
    if len(budgets) < 2:
        raise ValueError("need at least 2 budgets per family for an offset")
    best = np.array([min(p.final_loss for p in points if p.budget == b) for b in budgets])
    logc = np.log(np.array(budgets, dtype=np.float64))
    m, b = np.polyfit(logc, best, 1)
    if m >= 0:
        raise ValueError("loss frontier is not decreasing in compute; offset undefined")
    return float(m), float(b), best


def compute_offset_factor(points_a, points_b) -> OffsetReport:
    """How much more compute family B needs than family A at equal loss.

    Both frontiers are fit linearly in loss vs log-compute; the per-loss
    ratio C_B(L)/C_A(L) is averaged geometrically over the overlap of the
    two observed best-loss ranges.
    """
    m_a, b_a, best_a = _frontier_fit(list(points_a))
    m_b, b_b, best_b = _frontier_fit(list(points_b))
    lo = max(best_a.min(), best_b.min())
    hi = min(best_a.max(), best_b.max())
    if not lo < hi:
        lo = hi = 0.5 * (best_a.mean() + best_b.mean())
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, 17)
    log_ratio = (grid - b_b) / m_b - (grid - b_a) / m_a
    return OffsetReport(
        factor=float(np.exp(log_ratio.mean())),
        slope_a=m_a,
        slope_b=m_b,
        loss_range=(float(lo), float(hi)),
    )
