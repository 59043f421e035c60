"""Evolutionary search over length configurations with Pareto bookkeeping.

The population is the frontier itself: each iteration samples parents from
the current front, produces mutated and crossed-over offspring, evaluates
them (cached per unique configuration), and keeps only non-dominated points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costmodel import flops_count
from .errors import BudgetInfeasibleError, ConfigError, ContractError
from .model import LengthConfig, ModelParams
from .rng import make_rng
from .training import evaluate, sample_length_config


@dataclass(frozen=True)
class Candidate:
    lc: LengthConfig
    macs: int
    accuracy: float  # token_f1 on the evaluation split


@dataclass
class SearchConfig:
    population_size: int = 20
    iterations: int = 30
    mutation_prob: float = 0.3
    mutations_per_iter: int = 15
    crossovers_per_iter: int = 15
    eval_subset_size: int | None = None  # None = full split
    seed: int = 0
    allowed_values: tuple[int, ...] | None = None  # restrict l_i to a grid
    max_span_len: int = 16

    def __post_init__(self):
        for name in ("population_size", "iterations", "mutations_per_iter", "crossovers_per_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.mutation_prob <= 1.0:
            raise ConfigError(f"mutation_prob must be in (0, 1], got {self.mutation_prob}")
        if self.allowed_values is not None:
            if not self.allowed_values or any(v < 1 for v in self.allowed_values):
                raise ConfigError("allowed_values must be positive and non-empty")


def _monotone(values) -> LengthConfig:
    return LengthConfig(tuple(int(v) for v in np.minimum.accumulate(list(values))))


def _snap(values, allowed: tuple[int, ...] | None):
    if allowed is None:
        return values
    grid = np.asarray(sorted(allowed))
    out = []
    for v in values:
        j = int(np.argmin(np.abs(grid - v)))  # nearest, ties toward smaller
        out.append(int(grid[j]))
    return out


def init_population(n: int, L: int, sc: SearchConfig, rng: np.random.Generator) -> list[LengthConfig]:
    """population_size configs sampled with per-layer drop ratio ~ U[0,1),
    always including the full-length configuration."""
    full = _monotone(_snap([n] * L, sc.allowed_values))
    population = [full]
    while len(population) < sc.population_size:
        lc = sample_length_config(n, L, 1.0, rng)
        population.append(_monotone(_snap(lc.retain, sc.allowed_values)))
    return population


def mutate(lc: LengthConfig, n: int, mutation_prob: float, rng: np.random.Generator,
           allowed: tuple[int, ...] | None = None) -> LengthConfig:
    """Independently resample each l_i within its neighbor bounds, then
    re-enforce monotonicity with a cumulative-min pass."""
    L = len(lc)
    values = list(lc.retain)
    for i in range(L):
        if rng.random() >= mutation_prob:
            continue
        high = n if i == 0 else lc.retain[i - 1]
        low = 1 if i == L - 1 else lc.retain[i + 1]
        values[i] = int(rng.integers(low, high + 1))
    return _monotone(_snap(values, allowed))


def crossover(a: LengthConfig, b: LengthConfig, rng: np.random.Generator,
              allowed: tuple[int, ...] | None = None) -> LengthConfig:
    """Per-layer uniform pick from either parent, then the monotone pass."""
    if len(a) != len(b):
        raise ContractError(f"crossover needs equal layer counts: {len(a)} vs {len(b)}")
    picks = [a.retain[i] if rng.random() < 0.5 else b.retain[i] for i in range(len(a))]
    return _monotone(_snap(picks, allowed))


class Evaluator:
    """Caching accuracy/MACs evaluator; one forward sweep per unique lc."""

    def __init__(self, params: ModelParams, split, eval_subset_size: int | None = None,
                 max_span_len: int = 16):
        if not split:
            raise ConfigError("evaluation split is empty")
        self.params = params
        self.split = split[:eval_subset_size] if eval_subset_size else split
        self.n = len(self.split[0].tokens)
        self.max_span_len = max_span_len
        self.cache: dict[tuple[int, ...], Candidate] = {}
        self.eval_count = 0

    def __call__(self, lc: LengthConfig) -> Candidate:
        key = lc.retain
        if key not in self.cache:
            self.eval_count += 1
            metrics = evaluate(self.params, self.split, lc=lc, max_span_len=self.max_span_len)
            macs = flops_count(self.params.config, self.n, lc)
            self.cache[key] = Candidate(lc, macs, metrics["token_f1"])
        return self.cache[key]


def evaluate_candidate(params: ModelParams, split, lc: LengthConfig,
                       max_span_len: int = 16) -> Candidate:
    return Evaluator(params, split, max_span_len=max_span_len)(lc)


def _dominates_or_ties(a: Candidate, b: Candidate) -> bool:
    """a makes b redundant: no worse on both axes (equal on both counts)."""
    return a.macs <= b.macs and a.accuracy >= b.accuracy


def _strictly_dominates(a: Candidate, b: Candidate) -> bool:
    return a.macs <= b.macs and a.accuracy >= b.accuracy and (
        a.macs < b.macs or a.accuracy > b.accuracy
    )


def pareto_insert(front: list[Candidate], c: Candidate) -> list[Candidate]:
    """Insert c unless an incumbent dominates it (ties keep the incumbent);
    drop incumbents c strictly dominates; keep macs-ascending order."""
    for inc in front:
        if _dominates_or_ties(inc, c):
            return front
    kept = [inc for inc in front if not _strictly_dominates(c, inc)]
    kept.append(c)
    kept.sort(key=lambda x: x.macs)
    return kept


def hypervolume(front: list[Candidate], ref_macs: int) -> float:
    """Dominated area against the reference point (ref_macs, accuracy 0)."""
    total = 0.0
    prev_acc = 0.0
    for c in sorted(front, key=lambda x: x.macs):
        if c.macs > ref_macs:
            break
        total += (ref_macs - c.macs) * (c.accuracy - prev_acc)
        prev_acc = c.accuracy
    return total


def evolutionary_search(params: ModelParams, split, sc: SearchConfig):
    """Iterated mutation/crossover from the frontier. Returns (front, history)."""
    evaluator = Evaluator(params, split, sc.eval_subset_size, sc.max_span_len)
    n = evaluator.n
    L = params.config.num_layers
    if sc.allowed_values is not None and any(v > n for v in sc.allowed_values):
        raise ConfigError("allowed_values exceed the split's sequence length")
    rng = make_rng(sc.seed)
    ref_macs = flops_count(params.config, n, None)
    front: list[Candidate] = []
    for lc in init_population(n, L, sc, rng):
        front = pareto_insert(front, evaluator(lc))
    history = [_history_row(0, front, evaluator, ref_macs)]
    for iteration in range(1, sc.iterations + 1):
        parents = list(front)
        offspring: list[LengthConfig] = []
        for _ in range(sc.mutations_per_iter):
            parent = parents[int(rng.integers(0, len(parents)))]
            offspring.append(mutate(parent.lc, n, sc.mutation_prob, rng, sc.allowed_values))
        for _ in range(sc.crossovers_per_iter):
            pa = parents[int(rng.integers(0, len(parents)))]
            pb = parents[int(rng.integers(0, len(parents)))]
            offspring.append(crossover(pa.lc, pb.lc, rng, sc.allowed_values))
        for lc in offspring:
            front = pareto_insert(front, evaluator(lc))
        history.append(_history_row(iteration, front, evaluator, ref_macs))
    return front, history


def _history_row(iteration: int, front: list[Candidate], evaluator: Evaluator, ref_macs: int) -> dict:
    return {
        "iteration": iteration,
        "front_size": len(front),
        "evaluations": evaluator.eval_count,
        "hypervolume": hypervolume(front, ref_macs),
        "best_accuracy": max((c.accuracy for c in front), default=0.0),
        "min_macs": min((c.macs for c in front), default=0),
    }


def brute_force_front(params: ModelParams, split, lcs, max_span_len: int = 16) -> list[Candidate]:
    """Evaluate every configuration and dominance-filter; the search oracle."""
    lcs = list(lcs)
    if len(lcs) > 10_000:
        raise ConfigError(f"brute force refused for {len(lcs)} configurations (limit 10000)")
    evaluator = Evaluator(params, split, max_span_len=max_span_len)
    front: list[Candidate] = []
    for lc in lcs:
        front = pareto_insert(front, evaluator(lc))
    return front


def pick_for_budget(front: list[Candidate], budget_macs: int) -> Candidate:
    """Highest-accuracy member within the budget."""
    if not front:
        raise ConfigError("empty Pareto front")
    feasible = [c for c in front if c.macs <= budget_macs]
    if not feasible:
        raise BudgetInfeasibleError(
            f"budget {budget_macs} MACs below the frontier minimum "
            f"{min(c.macs for c in front)}"
        )
    return max(feasible, key=lambda c: c.accuracy)


def grid_configs(values: tuple[int, ...], L: int) -> list[LengthConfig]:
    """All monotone non-increasing configurations over a value grid."""
    values = sorted(set(values))
    out: list[LengthConfig] = []

    def extend(prefix):
        if len(prefix) == L:
            out.append(LengthConfig(tuple(prefix)))
            return
        cap = prefix[-1] if prefix else max(values)
        for v in values:
            if v <= cap:
                extend(prefix + [v])

    extend([])
    return out
