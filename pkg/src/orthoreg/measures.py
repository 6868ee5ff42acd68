"""Orthogonality measures on kernel matrices.

Four regularizers are provided, each a function of the o x d kernel matrix K
(rows are filters):

* ``frobenius``        ||K K^T - I||_F
* ``scaled_frobenius`` ||K K^T - I||_F / sqrt(o)
* ``srip``             spectral norm of K K^T - I estimated by power iteration
* ``disentangled``     ||tril(corr(K))||_F + lambda * ||diag(K K^T) - 1||_2

plus a relaxed form of the disentangled norm which drops a set of exempt
filter pairs from the correlation term.  All arithmetic is float64.
"""
from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import as_matrix

NORM_FLOOR = 1e-12


class DegenerateFilterError(ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"degenerate filter: row {row} has norm {norm:.3g} below {NORM_FLOOR}")
        self.row = row


class Variant(str, enum.Enum):
    FROBENIUS = "frobenius"
    SCALED_FROBENIUS = "scaled_frobenius"
    SRIP = "srip"
    DISENTANGLED = "disentangled"
    RELAXED_DISENTANGLED = "relaxed_disentangled"


# --- pair indexing --------------------------------------------------------

def pair_count(o: int) -> int:
    return o * (o - 1) // 2


def pair_index(r: int, c: int) -> int:
    """Position of pair (r, c), r > c, in the flattened lower triangle."""
    if not r > c >= 0:
        raise IndexError(f"need r > c >= 0, got ({r}, {c})")
    return r * (r - 1) // 2 + c


def pair_from_index(p: int) -> tuple[int, int]:
    if p < 0:
        raise IndexError(p)
    r = int((1 + math.isqrt(1 + 8 * p)) // 2)
    while r * (r - 1) // 2 > p:
        r -= 1
    while (r + 1) * r // 2 <= p:
        r += 1
    return r, p - r * (r - 1) // 2


def tril_indices(o: int) -> tuple[np.ndarray, np.ndarray]:
    # numpy walks the strict lower triangle row by row, which is our pair order
    return np.tril_indices(o, -1)


@dataclass(frozen=True)
class PairMask:
    """Pairs of the correlation lower triangle exempt from the correlation loss."""

    o: int
    exempt: frozenset = frozenset()

    def __post_init__(self):
        exempt = frozenset(int(p) for p in self.exempt)
        n = pair_count(self.o)
        bad = [p for p in exempt if not 0 <= p < n]
        if bad:
            raise ValueError(f"pair indices out of range for o={self.o}: {sorted(bad)[:5]}")
        object.__setattr__(self, "exempt", exempt)

    def keep(self) -> np.ndarray:
        """Boolean vector over pairs, True where the pair is still penalized."""
        k = np.ones(pair_count(self.o), dtype=bool)
        if self.exempt:
            k[sorted(self.exempt)] = False
        return k

    def to_dict(self) -> dict:
        return {"o": self.o, "exempt": sorted(self.exempt)}

    @classmethod
    def from_dict(cls, d: dict) -> "PairMask":
        return cls(int(d["o"]), frozenset(d.get("exempt", ())))


# --- domain types ---------------------------------------------------------

@dataclass(frozen=True)
class RegularizerSpec:
    variant: Variant = Variant.DISENTANGLED
    lambda_diag: float = 0.1
    power_iterations: int = 2
    seed: int = 0
    exemption_mask: Optional[PairMask] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.lambda_diag < 0:
            raise ValueError("lambda_diag must be non-negative")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")
        relaxed = self.variant is Variant.RELAXED_DISENTANGLED
        if relaxed != (self.exemption_mask is not None):
            raise ValueError("exemption_mask is required for, and only allowed with, the relaxed variant")

    def with_mask(self, mask: PairMask) -> "RegularizerSpec":
        return RegularizerSpec(Variant.RELAXED_DISENTANGLED, self.lambda_diag,
                               self.power_iterations, self.seed, mask)

    def to_dict(self) -> dict:
        d = {"variant": self.variant.value, "lambda_diag": self.lambda_diag,
             "power_iterations": self.power_iterations, "seed": self.seed}
        if self.exemption_mask is not None:
            d["exemption_mask"] = self.exemption_mask.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerSpec":
        mask = d.get("exemption_mask")
        return cls(Variant(d.get("variant", "disentangled")), float(d.get("lambda_diag", 0.1)),
                   int(d.get("power_iterations", 2)), int(d.get("seed", 0)),
                   PairMask.from_dict(mask) if mask is not None else None)


@dataclass
class RegularizerResult:
    total: float
    corr_component: float = 0.0
    diag_component: float = 0.0
    gradient: Optional[np.ndarray] = field(default=None, repr=False)
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = {"total": self.total, "corr_component": self.corr_component,
             "diag_component": self.diag_component, "degenerate": self.degenerate}
        if self.gradient is not None:
            d["gradient"] = self.gradient.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerResult":
        g = d.get("gradient")
        return cls(d["total"], d.get("corr_component", 0.0), d.get("diag_component", 0.0),
                   np.asarray(g, dtype=np.float64) if g is not None else None,
                   bool(d.get("degenerate", False)))


@dataclass
class NearOrthReport:
    tril_mean: float
    tril_std: float
    diag_mean: float
    layer_name: str = ""
    undefined_tril: bool = False

    def format(self) -> str:
        return f"{_fmt2(self.tril_mean)} ± {_fmt2(self.tril_std)}/{_fmt2(self.diag_mean)}"

    def to_dict(self) -> dict:
        return {"layer_name": self.layer_name, "tril_mean": self.tril_mean,
                "tril_std": self.tril_std, "diag_mean": self.diag_mean,
                "undefined_tril": self.undefined_tril}

    @classmethod
    def from_dict(cls, d: dict) -> "NearOrthReport":
        return cls(d["tril_mean"], d["tril_std"], d["diag_mean"], d.get("layer_name", ""),
                   bool(d.get("undefined_tril", False)))


def _fmt2(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


# --- building blocks ------------------------------------------------------

def gram(K) -> np.ndarray:
    """K K^T with exact symmetry: the lower triangle is computed and mirrored."""
    K = as_matrix(K)
    G = K @ K.T
    lower = np.tril(G)
    return lower + np.tril(G, -1).T


def diagonal(K) -> np.ndarray:
    K = as_matrix(K)
    return np.einsum("ij,ij->i", K, K)


def _row_norms(K: np.ndarray) -> np.ndarray:
    norms = np.sqrt(diagonal(K))
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise DegenerateFilterError(int(bad[0]), float(norms[bad[0]]))
    return norms


def correlation_tril(K) -> np.ndarray:
    """Flattened strict lower triangle of the filter correlation matrix."""
    K = as_matrix(K)
    N = K / _row_norms(K)[:, None]
    r, c = tril_indices(K.shape[0])
    # normalized Gram, lower half only
    return np.einsum("ij,ij->i", N[r], N[c])


def inner_products_tril(K) -> np.ndarray:
    """Flattened strict lower triangle of K K^T (raw inner products, not correlations)."""
    K = as_matrix(K)
    r, c = tril_indices(K.shape[0])
    return np.einsum("ij,ij->i", K[r], K[c])


# --- regularizers ---------------------------------------------------------

def _frobenius(K: np.ndarray, scale: float, with_grad: bool) -> RegularizerResult:
    A = gram(K) - np.eye(K.shape[0])
    norm = float(np.linalg.norm(A))
    total = norm / scale
    grad = None
    if with_grad:
        grad = np.zeros_like(K) if norm == 0.0 else 2.0 * (A @ K) / (norm * scale)
    return RegularizerResult(total, gradient=grad)


def frobenius_loss(K) -> RegularizerResult:
    return _frobenius(as_matrix(K), 1.0, False)


def scaled_frobenius_loss(K) -> RegularizerResult:
    K = as_matrix(K)
    return _frobenius(K, math.sqrt(K.shape[0]), False)


def _srip(K: np.ndarray, spec: RegularizerSpec, with_grad: bool) -> RegularizerResult:
    o = K.shape[0]
    A = gram(K) - np.eye(o)
    rng = np.random.default_rng(spec.seed)
    steps = 2 * spec.power_iterations

    for _attempt in range(2):
        v = rng.standard_normal(o)
        v /= np.linalg.norm(v)
        xs = [v]      # normalized inputs of each matvec
        ys = []       # raw outputs of each matvec
        ok = True
        for s in range(steps):
            y = A @ xs[-1]
            ys.append(y)
            ny = np.linalg.norm(y)
            if s < steps - 1:
                if ny < NORM_FLOOR:
                    ok = False
                    break
                xs.append(y / ny)
        if ok:
            break
    else:
        return RegularizerResult(0.0, gradient=np.zeros_like(K) if with_grad else None,
                                 degenerate=True)

    # with every input normalized, ||v|| / ||u|| of the last round is ||A x_last||
    total = float(np.linalg.norm(ys[-1]))
    grad = None
    if with_grad:
        if total < NORM_FLOOR:
            grad = np.zeros_like(K)
        else:
            gA = np.zeros_like(A)
            gy = ys[-1] / total
            for s in range(steps - 1, -1, -1):
                gA += np.outer(gy, xs[s])
                if s == 0:
                    break
                gx = A @ gy
                x, ny = xs[s], np.linalg.norm(ys[s - 1])
                gy = (gx - x * (x @ gx)) / ny
            grad = (gA + gA.T) @ K
    return RegularizerResult(total, gradient=grad)


def srip_loss(K, spec: Optional[RegularizerSpec] = None) -> RegularizerResult:
    spec = spec or RegularizerSpec(Variant.SRIP)
    return _srip(as_matrix(K), spec, False)


def _disentangled(K: np.ndarray, spec: RegularizerSpec, with_grad: bool) -> RegularizerResult:
    o = K.shape[0]
    sq = diagonal(K)
    norms = np.sqrt(sq)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        if with_grad:
            return RegularizerResult(0.0, gradient=np.zeros_like(K), degenerate=True)
        raise DegenerateFilterError(int(bad[0]), float(norms[bad[0]]))

    N = K / norms[:, None]
    r, c = tril_indices(o)
    corr = np.einsum("ij,ij->i", N[r], N[c])
    if spec.exemption_mask is not None:
        if spec.exemption_mask.o != o:
            raise ValueError(f"mask is for o={spec.exemption_mask.o}, kernel has o={o}")
        keep = spec.exemption_mask.keep()
        r, c, corr = r[keep], c[keep], corr[keep]

    corr_loss = float(np.sqrt(np.sum(corr * corr)))
    resid = sq - 1.0
    diag_loss = float(np.sqrt(np.sum(resid * resid)))
    lam = spec.lambda_diag
    total = corr_loss + lam * diag_loss

    grad = None
    if with_grad:
        gN = np.zeros_like(K)
        if corr_loss > 0.0:
            W = np.zeros((o, o))
            W[r, c] = corr / corr_loss
            gN = (W + W.T) @ N
        # back through row normalization
        grad = (gN - N * np.einsum("ij,ij->i", N, gN)[:, None]) / norms[:, None]
        if diag_loss > 0.0 and lam != 0.0:
            grad += (2.0 * lam / diag_loss) * resid[:, None] * K
    return RegularizerResult(total, corr_loss, diag_loss, grad)


def disentangled_loss(K, spec: Optional[RegularizerSpec] = None) -> RegularizerResult:
    spec = spec or RegularizerSpec(Variant.DISENTANGLED)
    return _disentangled(as_matrix(K), spec, False)


def evaluate(K, spec: RegularizerSpec, with_grad: bool = False) -> RegularizerResult:
    """Dispatch on ``spec.variant``."""
    K = as_matrix(K)
    v = spec.variant
    if v is Variant.FROBENIUS:
        return _frobenius(K, 1.0, with_grad)
    if v is Variant.SCALED_FROBENIUS:
        return _frobenius(K, math.sqrt(K.shape[0]), with_grad)
    if v is Variant.SRIP:
        return _srip(K, spec, with_grad)
    return _disentangled(K, spec, with_grad)


def regularizer_gradient(K, spec: RegularizerSpec) -> RegularizerResult:
    """Loss value, components and the gradient with respect to K.

    Degenerate inputs (a zero filter for the disentangled variants, a
    vanishing power-iteration vector for SRIP) give a zero gradient and set
    ``degenerate``.
    """
    return evaluate(K, spec, with_grad=True)


# --- analysis -------------------------------------------------------------

def decomposed_frobenius(K) -> float:
    """||K K^T - I||_F rebuilt from the diagonal and the raw lower triangle."""
    diag = diagonal(K)
    tril = inner_products_tril(K)
    return math.sqrt(float(np.sum((diag - 1.0) ** 2) + 2.0 * np.sum(tril * tril)))


def near_orth_report(K, name: str = "") -> NearOrthReport:
    K = as_matrix(K)
    diag_mean = float(np.mean(diagonal(K)))
    if K.shape[0] < 2:
        return NearOrthReport(0.0, 0.0, diag_mean, name, undefined_tril=True)
    corr = correlation_tril(K)
    return NearOrthReport(float(np.mean(corr)), float(np.std(corr)), diag_mean, name)


def aggregate_reports(groups: dict) -> "OrderedDict":
    """Average each statistic over the layers of every group.

    ``groups`` maps a key (usually the (o, d) shape) to a list of reports;
    the result keeps the key order.
    """
    out = OrderedDict()
    for key, reports in groups.items():
        reports = list(reports)
        if not reports:
            continue
        out[key] = NearOrthReport(
            float(np.mean([r.tril_mean for r in reports])),
            float(np.mean([r.tril_std for r in reports])),
            float(np.mean([r.diag_mean for r in reports])),
            layer_name=_group_label(key),
            undefined_tril=all(r.undefined_tril for r in reports),
        )
    return out


def _group_label(key) -> str:
    if isinstance(key, tuple) and len(key) == 2:
        return f"[{key[0]},{key[1]}]"
    return str(key)


def group_by_shape(named: Iterable[tuple[str, np.ndarray]]) -> "OrderedDict":
    """Reports for (name, K) pairs, grouped by (o, d) in first-seen order."""
    groups: OrderedDict = OrderedDict()
    for name, K in named:
        K = as_matrix(K)
        groups.setdefault(K.shape, []).append(near_orth_report(K, name))
    return groups
