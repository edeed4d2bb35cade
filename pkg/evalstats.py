"""Evaluation statistics: partition distances, agreement, hypothesis tests, effect sizes and simulations."""
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Hashable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from scipy.optimize import linear_sum_assignment

from errors import DataFormatError, InvariantViolation, UndefinedMetricError

# Configure logging
logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_OBJECTS = 10
CLOSED_FORM_VALIDATION_MAX = 8
EXACT_MANN_WHITNEY_MAX = 20
CLIFF_THRESHOLDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))
LIKERT_LOW, LIKERT_HIGH = 1, 5
RATING_COLUMNS = ["segment_id", "k", "rater", "interpretability", "extra_segments"]


@dataclass(frozen=True)
class Partition:
    labels: Mapping[Hashable, Hashable]

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[Hashable]]) -> "Partition":
        labels = {}
        for number, group in enumerate(groups):
            if not group:
                raise ValueError("partition groups must be non-empty")
            for item in group:
                if item in labels:
                    raise ValueError(f"object {item!r} appears in more than one group")
                labels[item] = number
        return cls(labels=labels)

    @property
    def objects(self) -> frozenset:
        return frozenset(self.labels)

    @property
    def n(self) -> int:
        return len(self.labels)

    def groups(self) -> List[frozenset]:
        members: Dict[Hashable, set] = {}
        for item, label in self.labels.items():
            members.setdefault(label, set()).add(item)
        return sorted((frozenset(m) for m in members.values()), key=lambda g: sorted(map(repr, g)))

    @property
    def g(self) -> int:
        return len(set(self.labels.values()))

    def profile(self) -> Tuple[int, ...]:
        """Group sizes, largest first"""
        return tuple(sorted((len(g) for g in self.groups()), reverse=True))


@dataclass(frozen=True)
class RatingSample:
    scores: Tuple[int, ...]

    def __post_init__(self):
        for score in self.scores:
            if int(score) != score or not LIKERT_LOW <= score <= LIKERT_HIGH:
                raise ValueError(f"rating {score!r} outside [{LIKERT_LOW}, {LIKERT_HIGH}]")


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    observed: float
    expected: float
    degenerate: bool = False


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float
    method: str


@dataclass(frozen=True)
class CliffsDelta:
    delta: float
    magnitude: str


@dataclass(frozen=True)
class LikertSimulation:
    min: float
    max: float
    mean: float


@dataclass(frozen=True)
class VariantComparison:
    first: str
    second: str
    u: float
    p_value: float
    p_adjusted: float
    delta: float
    magnitude: str


# Partition distances

def _contingency(A: Partition, B: Partition) -> np.ndarray:
    if A.objects != B.objects:
        raise ValueError("partitions cover different object sets")
    a_codes = {label: n for n, label in enumerate(sorted(set(A.labels.values()), key=repr))}
    b_codes = {label: n for n, label in enumerate(sorted(set(B.labels.values()), key=repr))}
    table = np.zeros((len(a_codes), len(b_codes)), dtype=np.int64)
    for item, label in A.labels.items():
        table[a_codes[label], b_codes[B.labels[item]]] += 1
    return table


def _mno_from_table(w: np.ndarray) -> int:
    l_a = w.shape[0]
    if l_a == 0:
        return 0
    row_max = w.max(axis=1)
    # pairing group i with a distinct tag j earns w_ij + 1 over its best shared tag; dummy columns leave it unpaired
    gain = np.hstack([w + 1 - row_max[:, None], np.zeros((l_a, l_a), dtype=np.int64)])
    rows, cols = linear_sum_assignment(gain, maximize=True)
    total = int(row_max.sum() + gain[rows, cols].sum())
    return int(w.sum()) + l_a - total


def mno(A: Partition, B: Partition) -> int:
    """Minimum number of Move and Join operations turning A into B"""
    return _mno_from_table(_contingency(A, B))


def mno_exhaustive(A: Partition, B: Partition) -> int:
    """Same quantity by trying every tagging of A's groups with B's groups"""
    w = _contingency(A, B)
    l_a, l_b = w.shape
    n = int(w.sum())
    best = None
    for tags in itertools.product(range(l_b), repeat=l_a):
        kept = sum(int(w[i, t]) for i, t in enumerate(tags))
        cost = (n - kept) + (l_a - len(set(tags)))
        best = cost if best is None else min(best, cost)
    return 0 if best is None else best


def set_partitions(n: int) -> Iterator[np.ndarray]:
    """Every partition of n objects as a restricted growth string"""
    if n == 0:
        yield np.zeros(0, dtype=np.int64)
        return
    labels = [0] * n
    maxima = [0] * n

    def extend(position):
        if position == n:
            yield np.array(labels, dtype=np.int64)
            return
        for label in range(maxima[position - 1] + 2):
            labels[position] = label
            maxima[position] = max(maxima[position - 1], label)
            yield from extend(position + 1)

    yield from extend(1)


def _profile_labels(profile: Tuple[int, ...]) -> np.ndarray:
    return np.repeat(np.arange(len(profile)), profile)


@lru_cache(maxsize=None)
def max_mno_exhaustive(profile: Tuple[int, ...]) -> int:
    """Largest mno(A, B) over every partition A, for B with the given group sizes"""
    b = _profile_labels(profile)
    l_b = len(profile)
    best = 0
    for a in set_partitions(len(b)):
        l_a = int(a.max()) + 1 if a.size else 0
        w = np.bincount(a * l_b + b, minlength=l_a * l_b).reshape(l_a, l_b)
        best = max(best, _mno_from_table(w))
    return best


def max_mno_closed_form(profile: Tuple[int, ...]) -> int:
    """n − min over q of (q + size of the (q+1)-th largest group)"""
    sizes = sorted(profile, reverse=True) + [0]
    return sum(profile) - min(q + sizes[q] for q in range(len(profile) + 1))


def integer_partitions(n: int, largest: Optional[int] = None) -> Iterator[Tuple[int, ...]]:
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    for first in range(min(n, largest), 0, -1):
        for rest in integer_partitions(n - first, first):
            yield (first,) + rest


@lru_cache(maxsize=None)
def validate_closed_form(up_to: int = CLOSED_FORM_VALIDATION_MAX) -> bool:
    """Compare the closed form with enumeration for every group-size profile with up to `up_to` objects"""
    for n in range(1, up_to + 1):
        for profile in integer_partitions(n):
            if max_mno_closed_form(profile) != max_mno_exhaustive(profile):
                logger.error(f"Closed-form max mno disagrees with enumeration for profile {profile}")
                return False
    logger.info(f"Closed-form max mno validated on all profiles up to {up_to} objects")
    return True


def max_mno(B: Partition, validate_up_to: int = CLOSED_FORM_VALIDATION_MAX) -> int:
    profile = B.profile()
    if B.n <= EXHAUSTIVE_MAX_OBJECTS:
        return max_mno_exhaustive(profile)
    if not validate_closed_form(validate_up_to):
        raise InvariantViolation("closed-form max mno failed validation; refusing large-partition MoJoFM")
    return max_mno_closed_form(profile)


def mojo_fm(A: Partition, B: Partition, validate_up_to: int = CLOSED_FORM_VALIDATION_MAX) -> float:
    """100 when A equals B, 0 when A is as far from B as any partition can be"""
    distance = mno(A, B)
    denominator = max_mno(B, validate_up_to)
    if denominator == 0:
        raise UndefinedMetricError(f"MoJoFM undefined: no partition of {B.n} object(s) differs from B")
    return 100.0 - distance / denominator * 100.0


def mojo_fm_exhaustive(A: Partition, B: Partition) -> float:
    denominator = max_mno_exhaustive(B.profile())
    if denominator == 0:
        raise UndefinedMetricError(f"MoJoFM undefined: no partition of {B.n} object(s) differs from B")
    return 100.0 - mno_exhaustive(A, B) / denominator * 100.0


# Agreement and tests

def cohens_kappa(ratings1: Sequence, ratings2: Sequence) -> KappaResult:
    if len(ratings1) != len(ratings2):
        raise ValueError(f"rating sequences differ in length: {len(ratings1)} vs {len(ratings2)}")
    if not ratings1:
        raise ValueError("kappa needs at least one rated item")
    n = len(ratings1)
    categories = sorted(set(ratings1) | set(ratings2), key=repr)
    first = np.array([sum(1 for r in ratings1 if r == c) for c in categories]) / n
    second = np.array([sum(1 for r in ratings2 if r == c) for c in categories]) / n
    observed = sum(1 for a, b in zip(ratings1, ratings2) if a == b) / n
    expected = float(first @ second)
    if math.isclose(expected, 1.0):
        logger.warning("Kappa is degenerate: both raters used a single category")
        return KappaResult(kappa=1.0 if observed == 1.0 else 0.0, observed=observed, expected=expected,
                           degenerate=True)
    return KappaResult(kappa=(observed - expected) / (1.0 - expected), observed=observed, expected=expected)


def u_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    """Count of pairs with x above y, ties counting one half"""
    x = np.asarray(x, dtype=np.float64)[:, None]
    y = np.asarray(y, dtype=np.float64)[None, :]
    return float((x > y).sum() + 0.5 * (x == y).sum())


def _exact_p(x: np.ndarray, y: np.ndarray, u: float) -> float:
    n1, n2 = len(x), len(y)
    ranks = stats.rankdata(np.concatenate([x, y]))
    count = math.comb(n1 + n2, n1)
    chosen = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n1 + n2), n1)),
                         dtype=np.int64, count=count * n1).reshape(count, n1)
    u_all = ranks[chosen].sum(axis=1) - n1 * (n1 + 1) / 2.0
    centre = n1 * n2 / 2.0
    extreme = np.abs(u_all - centre) >= abs(u - centre) - 1e-9
    return float(extreme.mean())


def mann_whitney_u(x: Sequence[float], y: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; exact by enumeration for small samples"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("Mann-Whitney U needs two non-empty samples")
    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    u = u_statistic(x, y)
    if method == "exact" or (method == "auto" and x.size + y.size <= EXACT_MANN_WHITNEY_MAX):
        return MannWhitneyResult(u=u, p_value=_exact_p(x, y, u), method="exact")
    if np.all(np.concatenate([x, y]) == x[0]):
        return MannWhitneyResult(u=u, p_value=1.0, method="asymptotic")
    result = stats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
    return MannWhitneyResult(u=u, p_value=float(result.pvalue), method="asymptotic")


def cliffs_delta(x: Sequence[float], y: Sequence[float]) -> CliffsDelta:
    x = np.asarray(x, dtype=np.float64)[:, None]
    y = np.asarray(y, dtype=np.float64)[None, :]
    if x.size == 0 or y.size == 0:
        raise ValueError("Cliff's delta needs two non-empty samples")
    delta = float(((x > y).sum() - (x < y).sum()) / (x.size * y.size))
    magnitude = next((name for bound, name in CLIFF_THRESHOLDS if abs(delta) < bound), "large")
    return CliffsDelta(delta=delta, magnitude=magnitude)


def benjamini_hochberg(p_values: Sequence[float]) -> np.ndarray:
    """Step-up adjusted p-values in input order"""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return p
    if np.any(~np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ValueError("p-values must lie in [0, 1]")
    return np.asarray(stats.false_discovery_control(p, method="bh"), dtype=np.float64)


# Sampling and simulation

def z_value(confidence: float) -> float:
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return float(stats.norm.ppf(1 - (1 - confidence) / 2))


def margin_of_error(n: int, confidence: float = 0.95) -> float:
    """Worst-case (p = 0.5) half-width of a proportion interval, infinite population"""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    return z_value(confidence) * math.sqrt(0.25 / n)


def simulate_likert_std(n_sims: int, group_size: int, seed: int, low: int = LIKERT_LOW,
                        high: int = LIKERT_HIGH) -> LikertSimulation:
    """Sample standard deviations of uniformly random Likert scores"""
    if n_sims < 1 or group_size < 2:
        raise ValueError("need n_sims >= 1 and group_size >= 2")
    rng = np.random.default_rng(seed)
    scores = rng.integers(low, high + 1, size=(n_sims, group_size))
    stds = scores.std(axis=1, ddof=1)
    return LikertSimulation(min=float(stds.min()), max=float(stds.max()), mean=float(stds.mean()))


def bimodal_likert_std(group_size: int, low: int = LIKERT_LOW, high: int = LIKERT_HIGH) -> float:
    """Sample std when half the scores are the lowest and half the highest"""
    if group_size < 2 or group_size % 2:
        raise ValueError("group_size must be even and >= 2")
    scores = np.repeat([low, high], group_size // 2)
    return float(scores.std(ddof=1))


def _power_chunk(seed_seq, size, group_size, mean_shift, sd, alpha, test) -> int:
    rng = np.random.default_rng(seed_seq)
    x = rng.normal(0.0, sd, size=(size, group_size))
    y = rng.normal(mean_shift, sd, size=(size, group_size))
    if test == "t":
        p = stats.ttest_ind(x, y, axis=1).pvalue
    else:
        p = stats.mannwhitneyu(x, y, axis=1, alternative="two-sided", method="asymptotic").pvalue
    return int((p < alpha).sum())


def simulate_power(group_size: int, mean_shift: float, sd: float, alpha: float = 0.05, n_sims: int = 10000,
                   seed: int = 0, test: str = "t", chunk_size: int = 2000, n_jobs: int = 1) -> float:
    """Fraction of simulated two-group comparisons rejecting at level alpha"""
    if sd <= 0:
        raise ValueError("sd must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if test not in ("t", "mann_whitney"):
        raise ValueError(f"unknown test {test!r}")
    if n_sims < 1 or group_size < 2:
        raise ValueError("need n_sims >= 1 and group_size >= 2")
    sizes = [min(chunk_size, n_sims - start) for start in range(0, n_sims, chunk_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    hits = Parallel(n_jobs=n_jobs)(
        delayed(_power_chunk)(s, size, group_size, mean_shift, sd, alpha, test) for s, size in zip(seeds, sizes)
    )
    return sum(hits) / n_sims


# Annotation scoring

def atomicity_score(extra_segments: int) -> int:
    if extra_segments < 0:
        raise ValueError("extra_segments must be >= 0")
    return max(5 - int(extra_segments), 1)


def summarize_ratings(sample: RatingSample) -> Dict[str, float]:
    scores = np.asarray(sample.scores, dtype=np.float64)
    if scores.size == 0:
        return {"n": 0, "mean": 0.0, "median": 0.0, "std": 0.0}
    return {
        "n": int(scores.size),
        "mean": float(scores.mean()),
        "median": float(np.median(scores)),
        "std": float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
    }


def compare_variants(groups: Mapping[str, Sequence[float]]) -> List[VariantComparison]:
    """Pairwise Mann-Whitney tests between variants, BH-adjusted, with Cliff's delta"""
    names = sorted(groups)
    pairs = list(itertools.combinations(names, 2))
    tests = [mann_whitney_u(groups[a], groups[b]) for a, b in pairs]
    adjusted = benjamini_hochberg([t.p_value for t in tests])
    comparisons = []
    for (a, b), test, p_adj in zip(pairs, tests, adjusted):
        effect = cliffs_delta(groups[a], groups[b])
        comparisons.append(VariantComparison(first=a, second=b, u=test.u, p_value=test.p_value,
                                             p_adjusted=float(p_adj), delta=effect.delta,
                                             magnitude=effect.magnitude))
    return comparisons


def load_ratings_csv(path) -> pd.DataFrame:
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype={"segment_id": str, "rater": str})
    except (pd.errors.ParserError, ValueError) as e:
        raise DataFormatError(f"{path}: {e}") from e
    missing = [c for c in RATING_COLUMNS if c not in table.columns]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing}")
    bad = ~table["interpretability"].between(LIKERT_LOW, LIKERT_HIGH) | (table["extra_segments"] < 0)
    if bad.any():
        raise DataFormatError(f"{path}: rating out of range on row {int(bad.idxmax()) + 2}")
    return table


def segmentation_study(ratings: pd.DataFrame) -> Dict:
    """Scores per segment, rater agreement and variant comparison for a two-annotator study"""
    table = ratings.copy()
    table["atomicity"] = table["extra_segments"].apply(atomicity_score)
    raters = sorted(table["rater"].unique())
    if len(raters) != 2:
        raise DataFormatError(f"expected two raters, found {raters}")
    paired = table.pivot_table(index=["segment_id", "k"], columns="rater",
                               values=["interpretability", "atomicity"], aggfunc="first").dropna()
    agreement = {
        criterion: asdict(cohens_kappa(paired[criterion][raters[0]].astype(int).tolist(),
                                       paired[criterion][raters[1]].astype(int).tolist()))
        for criterion in ("interpretability", "atomicity")
    } if len(paired) else {}

    per_segment = table.groupby(["k", "segment_id"])[["interpretability", "atomicity"]].agg(["mean", "median"])
    ks = sorted(per_segment.index.get_level_values("k").unique())
    variants: Dict[str, Dict] = {f"k={k}": {} for k in ks}
    comparisons: Dict[str, List[Dict]] = {}
    for criterion in ("interpretability", "atomicity"):
        groups = {}
        for k in ks:
            rows = per_segment.xs(k, level="k")
            groups[f"k={k}"] = rows[(criterion, "mean")].tolist()
            variants[f"k={k}"][criterion] = {
                "n_segments": len(rows),
                "mean": float(rows[(criterion, "mean")].mean()),
                "median": float(rows[(criterion, "median")].median()),
            }
        comparisons[criterion] = [asdict(c) for c in compare_variants(groups)] if len(groups) > 1 else []
    return {"raters": raters, "agreement": agreement, "variants": variants, "comparisons": comparisons}
