"""The top-p overlap indicator R_p between two weight collections.

R_p counts, layer by layer, how many of the top-p largest-magnitude weights of one
collection are also top-p in the other, normalized by the realized top-p set sizes.
Independent weights give R_p ≈ p; identical weights give exactly 1.
"""

from dataclasses import dataclass, field
import logging
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import hypergeom

from .errors import ConfigurationError, CongruenceError, DomainError
from .masking import Mask, check_mask_invariant, sparsity
from .model import ParamSet
from .pruning import keep_count, topk_indices
from .rng import stream

logger = logging.getLogger(__name__)

SCENARIOS = ("dense_dense", "sparse_sparse", "sparse_dense")

WeightsLike = Union[ParamSet, np.ndarray, Sequence[np.ndarray]]


@dataclass(frozen=True)
class TopPIndexSet:
    layer: int
    domain_size: int
    p: float
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def as_set(self) -> set:
        return set(int(i) for i in self.indices)


def _check_p(p: float) -> None:
    if not 0 < p <= 1:
        raise ConfigurationError(f"p must be in (0, 1], got {p}")


def top_p_indices(
    tensor: np.ndarray,
    p: float,
    support: Optional[np.ndarray] = None,
    layer: int = 0,
    count: Optional[int] = None,
) -> TopPIndexSet:
    """The round(p·|domain|) largest-magnitude flat indices of `tensor` (at least 1).

    Args:
        support: Optional boolean array; when given, only its True positions form the domain.
        count: Explicit set size overriding round(p·|domain|).
    """
    _check_p(p)
    tensor = np.asarray(tensor)
    if support is not None:
        support = np.asarray(support, dtype=bool)
        domain = int(support.sum())
        if domain == 0:
            raise ConfigurationError(f"layer {layer}: the support is empty")
    else:
        domain = int(tensor.size)
    k = keep_count(domain, p) if count is None else count
    if k > domain:
        raise DomainError(f"layer {layer}: cannot select {k} of {domain} candidate weights")
    idx = topk_indices(tensor, k, support)
    return TopPIndexSet(layer, domain, p, np.sort(idx))


def _layers(weights: WeightsLike) -> list[np.ndarray]:
    if isinstance(weights, ParamSet):
        return [e.value for e in weights.prunable()]
    if isinstance(weights, np.ndarray):
        return [weights]
    return [np.asarray(w) for w in weights]


def _supports(supports, n_layers: int) -> list[Optional[np.ndarray]]:
    if supports is None:
        return [None] * n_layers
    if isinstance(supports, Mask):
        supports = [m for _, m in supports.entries]
    supports = list(supports)
    if len(supports) != n_layers:
        raise CongruenceError(f"{len(supports)} supports for {n_layers} layers")
    return supports


def _check_congruent(a: list[np.ndarray], b: list[np.ndarray]) -> None:
    if len(a) != len(b):
        raise CongruenceError(f"{len(a)} layers vs {len(b)} layers")
    for i, (x, y) in enumerate(zip(a, b)):
        if x.shape != y.shape:
            raise CongruenceError(f"layer {i}: shape {x.shape} vs {y.shape}")


@dataclass
class Overlap:
    """Per-layer intersection cardinalities, set sizes and domain sizes for one p."""

    p: float
    intersections: list[int]
    set_sizes: list[int]
    domain_sizes: list[int]

    @property
    def value(self) -> float:
        return sum(self.intersections) / sum(self.set_sizes)


def _overlap(a, b, p, supports_a, supports_b, counts=None) -> Overlap:
    inter, sizes, domains = [], [], []
    for i, (x, y, sa, sb) in enumerate(zip(a, b, supports_a, supports_b)):
        count = None if counts is None else counts[i]
        ta = top_p_indices(x, p, sa, layer=i, count=count)
        tb = top_p_indices(y, p, sb, layer=i, count=count)
        inter.append(int(np.intersect1d(ta.indices, tb.indices, assume_unique=True).size))
        sizes.append(len(ta))
        domains.append(ta.domain_size)
    return Overlap(p, inter, sizes, domains)


def correlation_indicator(theta_a: WeightsLike, theta_b: WeightsLike, p: float, supports=None) -> float:
    """R_p = Σ_l |T_p(a, l) ∩ T_p(b, l)| / Σ_l |T_p(a, l)|.

    Args:
        theta_a, theta_b: ParamSets (their prunable entries are compared), single arrays or
            lists of per-layer arrays.
        supports: Optional per-layer boolean domains (or a Mask) applied to both sides.
    """
    a, b = _layers(theta_a), _layers(theta_b)
    _check_congruent(a, b)
    s = _supports(supports, len(a))
    return _overlap(a, b, p, s, s).value


def _sparse_sparse_overlap(params_a: ParamSet, params_b: ParamSet, mask: Mask, p: float) -> Overlap:
    for params in (params_a, params_b):
        mask.check_congruent(params)
        check_mask_invariant(params, mask)
    a, b = _layers(params_a), _layers(params_b)
    supports = [m for _, m in mask.entries]
    return _overlap(a, b, p, supports, supports)


def correlation_sparse_sparse(params_a: ParamSet, params_b: ParamSet, mask: Mask, p: float) -> float:
    """R_p between two sparse networks sharing `mask`; domains are the kept weights.

    Raises:
        MaskInvariantError: either network has a nonzero weight outside the mask.
    """
    return _sparse_sparse_overlap(params_a, params_b, mask, p).value


def _sparse_dense_counts(mask: Mask, p: float) -> list[int]:
    s = sparsity(mask)
    if p >= 1.0 - s:
        raise DomainError(f"sparse-dense correlation needs p < 1 - sparsity = {1.0 - s:.6g}, got p={p}")
    counts = []
    for (name, m), size in zip(mask.entries, mask.sizes()):
        k = keep_count(size, p)
        if k > int(m.sum()):
            raise DomainError(f"{name}: p={p} selects {k} weights but only {int(m.sum())} are kept")
        counts.append(k)
    return counts


def _sparse_dense_overlap(params_sparse: ParamSet, mask: Mask, params_dense: ParamSet, p: float) -> Overlap:
    _check_p(p)
    mask.check_congruent(params_sparse)
    check_mask_invariant(params_sparse, mask)
    a, b = _layers(params_sparse), _layers(params_dense)
    _check_congruent(a, b)
    counts = _sparse_dense_counts(mask, p)
    return _overlap(a, b, p, [m for _, m in mask.entries], [None] * len(b), counts)


def correlation_sparse_dense(params_sparse: ParamSet, mask: Mask, params_dense: ParamSet, p: float) -> float:
    """R_p between a sparse network (kept-weight domain) and a dense one (full domain).

    Both sides select round(p·N_l) weights per layer, so p must stay below 1 − sparsity.

    Raises:
        DomainError: p ≥ 1 − sparsity(mask), or some layer keeps fewer than round(p·N_l) weights.
    """
    return _sparse_dense_overlap(params_sparse, mask, params_dense, p).value


def null_expectation(p: float, layer_sizes: Sequence[int]) -> tuple[float, float]:
    """Mean and standard deviation of R_p for independent weights.

    Each layer's intersection is hypergeometric: k_l draws from N_l with k_l successes.
    """
    _check_p(p)
    counts = [keep_count(int(n), p) for n in layer_sizes]
    mean = var = 0.0
    for n, k in zip(layer_sizes, counts):
        dist = hypergeom(int(n), k, k)
        mean += float(dist.mean())
        var += float(dist.var())
    total = sum(counts)
    return mean / total, var**0.5 / total


def _quantile_band(values: np.ndarray) -> tuple[float, float]:
    # R_p lives on a lattice; both ends snap outward to observed values
    low = np.quantile(values, 0.005, method="lower")
    high = np.quantile(values, 0.995, method="higher")
    return float(low), float(high)


def null_band(p: float, layer_sizes: Sequence[int], trials: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo 0.5% / 99.5% quantiles of R_p for independent random weight pairs.

    The top-p sets of two independent continuous weight draws are independent uniform
    k_l-subsets, so each trial samples the per-layer intersections directly.
    """
    _check_p(p)
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    if trials < 100:
        logger.warning("null_band with %d trials; quantiles are unreliable below 100", trials)
    rng = stream(seed, "null")
    counts = [keep_count(int(n), p) for n in layer_sizes]
    inter = np.zeros(trials, dtype=np.int64)
    for n, k in zip(layer_sizes, counts):
        inter += rng.hypergeometric(k, int(n) - k, k, size=trials)
    return _quantile_band(inter / sum(counts))


def sparse_dense_null(p: float, mask: Mask, trials: int = 1000, seed: int = 0) -> tuple[float, tuple[float, float]]:
    """Null mean and band when one side draws k_l of its kept weights and the other k_l of all N_l."""
    counts = _sparse_dense_counts(mask, p)
    mean = sum(k * k / n for k, n in zip(counts, mask.sizes())) / sum(counts)
    rng = stream(seed, "null")
    inter = np.zeros(trials, dtype=np.int64)
    for k, kept, n in zip(counts, mask.kept_counts(), mask.sizes()):
        in_domain = rng.hypergeometric(kept, n - kept, k, size=trials)
        inter += rng.hypergeometric(k, kept - k, in_domain)
    return mean, _quantile_band(inter / sum(counts))


@dataclass
class CorrelationReport:
    """R_p over a p grid for one pair of weight collections."""

    scenario: str
    a: str
    b: str
    p_grid: list[float]
    values: list[float] = field(default_factory=list)
    intersections: list[list[int]] = field(default_factory=list)
    set_sizes: list[list[int]] = field(default_factory=list)
    domain_sizes: list[list[int]] = field(default_factory=list)
    null_mean: list[float] = field(default_factory=list)
    null_low: list[float] = field(default_factory=list)
    null_high: list[float] = field(default_factory=list)

    def add(self, overlap: Overlap, null_mean: float, band: tuple[float, float]) -> None:
        self.values.append(overlap.value)
        self.intersections.append(overlap.intersections)
        self.set_sizes.append(overlap.set_sizes)
        self.domain_sizes.append(overlap.domain_sizes)
        self.null_mean.append(null_mean)
        self.null_low.append(band[0])
        self.null_high.append(band[1])

    def to_rows(self) -> list[dict]:
        return [
            {
                "scenario": self.scenario,
                "a": self.a,
                "b": self.b,
                "p": p,
                "r_p": self.values[i],
                "null_mean": self.null_mean[i],
                "null_low": self.null_low[i],
                "null_high": self.null_high[i],
                "intersections": self.intersections[i],
                "set_sizes": self.set_sizes[i],
                "domain_sizes": self.domain_sizes[i],
            }
            for i, p in enumerate(self.p_grid)
        ]


def correlation_report(
    theta_a: WeightsLike,
    theta_b: WeightsLike,
    p_grid: Sequence[float],
    scenario: str = "dense_dense",
    mask: Optional[Mask] = None,
    null_trials: int = 1000,
    seed: int = 0,
    labels: tuple[str, str] = ("a", "b"),
) -> CorrelationReport:
    """R_p over `p_grid` with the analytic null mean and a Monte-Carlo band per p.

    `mask` is required for the sparse scenarios; for sparse_dense, `theta_a` is the sparse side.
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"Unknown correlation scenario: {scenario}. Expected one of {SCENARIOS}.")
    if scenario != "dense_dense" and mask is None:
        raise ConfigurationError(f"the {scenario} scenario needs a mask")
    report = CorrelationReport(scenario, labels[0], labels[1], list(p_grid))
    for p in p_grid:
        if scenario == "sparse_dense":
            overlap = _sparse_dense_overlap(theta_a, mask, theta_b, p)
            null_mean, band = sparse_dense_null(p, mask, null_trials, seed)
        else:
            if scenario == "sparse_sparse":
                overlap = _sparse_sparse_overlap(theta_a, theta_b, mask, p)
            else:
                a, b = _layers(theta_a), _layers(theta_b)
                _check_congruent(a, b)
                overlap = _overlap(a, b, p, [None] * len(a), [None] * len(b))
            # the domains are the full layers or the kept weights
            null_mean, _ = null_expectation(p, overlap.domain_sizes)
            band = null_band(p, overlap.domain_sizes, null_trials, seed)
        report.add(overlap, null_mean, band)
    return report
