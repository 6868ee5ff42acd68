"""Relaxation planning: which filter pairs leave the correlation loss.

Over-determined layers (more filters than background dimensions) keep d
structural filters; the remaining filters are freed.  Less-determined layers
use a transition dimension as their structural size.  Freed filters are
dropped at random into one box per structural filter, and every pair sharing a
box counts as one relaxed pair.  A per-module ratio map scales that count for
less-determined layers.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .measures import PairMask, pair_count
from .tensor import LayerDescriptor

DEFAULT_TRIALS = 10_000


class DeterminacyClass(str, enum.Enum):
    OVER_DETERMINED = "over_determined"
    LESS_DETERMINED = "less_determined"


class Pattern(str, enum.Enum):
    LINEAR = "linear"
    LOG = "log"
    EXP = "exp"


@dataclass(frozen=True)
class TransitionConfig:
    attribute: int
    intrinsic: int = 30
    max_transition: int = 100

    def __post_init__(self):
        for k in ("attribute", "intrinsic", "max_transition"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class RatioMapConfig:
    least_ratio: float = 0.0
    pattern: Pattern = Pattern.LOG

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if not 0.0 <= self.least_ratio <= 1.0:
            raise ValueError(f"least_ratio must lie in [0, 1], got {self.least_ratio}")


@dataclass(frozen=True)
class RelaxationPlanEntry:
    layer: str
    o: int
    d: int
    determinacy: DeterminacyClass
    structural_dim: int
    freed_count: int
    expected_relaxed_pairs: float
    ratio: float
    exempt_total: int
    exempt_positive: int
    exempt_negative: int

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "o": self.o,
            "d": self.d,
            "determinacy": self.determinacy.value,
            "structural_dim": self.structural_dim,
            "freed_count": self.freed_count,
            "expected_relaxed_pairs": _sig6(self.expected_relaxed_pairs),
            "ratio": _sig6(self.ratio),
            "exempt_total": self.exempt_total,
            "exempt_positive": self.exempt_positive,
            "exempt_negative": self.exempt_negative,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelaxationPlanEntry":
        return cls(d["layer"], int(d["o"]), int(d["d"]), DeterminacyClass(d["determinacy"]),
                   int(d["structural_dim"]), int(d["freed_count"]),
                   float(d["expected_relaxed_pairs"]), float(d["ratio"]),
                   int(d["exempt_total"]), int(d["exempt_positive"]), int(d["exempt_negative"]))


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def classify(o: int, d: int) -> DeterminacyClass:
    return DeterminacyClass.OVER_DETERMINED if o > d else DeterminacyClass.LESS_DETERMINED


def transition_dimension(cfg: TransitionConfig) -> int:
    return min(max(cfg.attribute, cfg.intrinsic), cfg.max_transition)


def structural_dimension(o: int, d: int, cfg: TransitionConfig) -> int:
    if classify(o, d) is DeterminacyClass.OVER_DETERMINED:
        return d
    return min(transition_dimension(cfg), o)


def simulate_relaxed_pairs(freed: int, boxes: int, trials: int = DEFAULT_TRIALS,
                           seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mean and standard error of same-box pair counts.

    ``freed`` items land uniformly at random in ``boxes`` boxes; a trial
    scores sum over boxes of C(n_box, 2).
    """
    if boxes < 1 or freed < 0 or trials < 1:
        raise ValueError("need boxes >= 1, freed >= 0, trials >= 1")
    if freed < 2:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    pairs = np.empty(trials, dtype=np.float64)
    # chunked so memory stays bounded for large freed * trials
    chunk = max(1, min(trials, 4_000_000 // max(freed, boxes)))
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        draws = rng.integers(0, boxes, size=(n, freed))
        flat = draws + boxes * np.arange(n)[:, None]
        counts = np.bincount(flat.ravel(), minlength=n * boxes).reshape(n, boxes)
        pairs[start:start + n] = (counts * (counts - 1) // 2).sum(axis=1)
    mean = float(pairs.mean())
    stderr = float(pairs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, stderr


def expected_relaxed_pairs(freed: int, boxes: int, trials: int = DEFAULT_TRIALS,
                           seed: int = 0) -> float:
    return simulate_relaxed_pairs(freed, boxes, trials, seed)[0]


def closed_form_pairs(freed: int, boxes: int) -> float:
    """Exact expectation C(f, 2) / b: each pair shares a box with probability 1/b."""
    return math.comb(freed, 2) / boxes


def build_ratio_map(module_count: int, cfg: RatioMapConfig) -> list[float]:
    if module_count < 1:
        raise ValueError("module_count must be >= 1")
    M = module_count - 1
    if M == 0:
        return [1.0]
    least = cfg.least_ratio
    span = 1.0 - least
    out = []
    for i in range(M + 1):
        if cfg.pattern is Pattern.LINEAR:
            frac = i / M
        elif cfg.pattern is Pattern.LOG:
            frac = math.log1p(i) / math.log1p(M)
        else:
            frac = -math.expm1(-i / M)
        out.append(least + span * frac)
    if cfg.pattern is not Pattern.EXP:
        out[-1] = 1.0
    return out


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def exemption_counts(expected_pairs: float, ratio: float,
                     available: Optional[int] = None) -> tuple[int, int]:
    total = _round_half_away(expected_pairs * ratio)
    total = max(total, 0)
    if available is not None:
        total = min(total, available)
    return (total + 1) // 2, total // 2


def build_exemption_mask(tril: np.ndarray, n_pos: int, n_neg: int, o: Optional[int] = None) -> PairMask:
    """Exempt the n_pos largest positive and n_neg most negative correlations.

    Requests larger than the number of qualifying entries are clamped.  Ties
    go to the smaller pair index.
    """
    tril = np.asarray(tril, dtype=np.float64)
    if o is None:
        o = int((1 + math.isqrt(1 + 8 * tril.size)) // 2)
    if pair_count(o) != tril.size:
        raise ValueError(f"{tril.size} entries do not form the lower triangle of o={o}")
    idx = np.arange(tril.size)
    pos = idx[tril > 0]
    neg = idx[tril < 0]
    # lexsort: last key is primary
    pos = pos[np.lexsort((pos, -tril[pos]))][:max(n_pos, 0)]
    neg = neg[np.lexsort((neg, tril[neg]))][:max(n_neg, 0)]
    return PairMask(o, frozenset(pos.tolist()) | frozenset(neg.tolist()))


def build_plan(layers: list[LayerDescriptor], transition: TransitionConfig,
               ratio_cfg: RatioMapConfig, trials: int = DEFAULT_TRIALS,
               seed: int = 0) -> list[RelaxationPlanEntry]:
    group_sizes: dict[str, int] = {}
    for l in layers:
        group_sizes[l.group] = group_sizes.get(l.group, 0) + 1
    ratio_maps = {g: build_ratio_map(n, ratio_cfg) for g, n in group_sizes.items()}

    plan = []
    for n, l in enumerate(layers):
        o, d = l.o, l.d
        cls = classify(o, d)
        structural = structural_dimension(o, d, transition)
        freed = o - structural if o > structural else 0
        # one seed stream per layer so plans do not depend on layer order elsewhere
        expected = expected_relaxed_pairs(freed, structural, trials, seed=_layer_seed(seed, n))
        if cls is DeterminacyClass.OVER_DETERMINED:
            ratio = 1.0
        else:
            ratio = ratio_maps[l.group][l.module_index]
        pos, neg = exemption_counts(expected, ratio, available=pair_count(o))
        plan.append(RelaxationPlanEntry(l.name, o, d, cls, structural, freed, expected,
                                        ratio, pos + neg, pos, neg))
    return plan


def _layer_seed(seed: int, n: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, n])


def dump_plan(plan: list[RelaxationPlanEntry]) -> str:
    return json.dumps([e.to_dict() for e in plan], indent=2) + "\n"


def load_plan(text: str) -> list[RelaxationPlanEntry]:
    return [RelaxationPlanEntry.from_dict(d) for d in json.loads(text)]
