"""Small dense-network trainer for exercising the regularizers end to end.

Each layer's weight is an o x d matrix with one filter per row, i.e. a
convolution with a 1 x 1 kernel, so the measures apply to it unchanged.
Hidden layers use ReLU and the output layer feeds softmax cross-entropy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import measures
from .measures import PairMask, RegularizerSpec, Variant
from .relaxation import (DEFAULT_TRIALS, RatioMapConfig, RelaxationPlanEntry, TransitionConfig,
                         build_exemption_mask, build_plan)
from .scheduler import BalanceConfig, CoefficientState, adjustment_epochs, share
from .tensor import LayerDescriptor


class TrainingError(RuntimeError):
    pass


# --- data -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 2
    input_dim: int = 8
    samples_per_class: int = 100
    separation: float = 10.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray


def make_synthetic_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian clusters with means on a sphere of radius ``separation``.

    The shuffled samples are split 90/10 into train and validation.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    means = rng.standard_normal((spec.classes, spec.input_dim))
    means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
    n = spec.samples_per_class
    x = np.concatenate([m + rng.standard_normal((n, spec.input_dim)) for m in means])
    y = np.repeat(np.arange(spec.classes), n)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_train = int(round(0.9 * len(y)))
    return Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:])


# --- network --------------------------------------------------------------

@dataclass
class ToyNetwork:
    weights: list
    biases: list

    def __post_init__(self):
        for n in range(1, len(self.weights)):
            if self.weights[n].shape[1] != self.weights[n - 1].shape[0]:
                raise ValueError(f"layer {n} expects {self.weights[n].shape[1]} inputs, "
                                 f"layer {n - 1} produces {self.weights[n - 1].shape[0]}")

    @classmethod
    def init(cls, sizes: list[int], seed: int = 0) -> "ToyNetwork":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        weights = [rng.standard_normal((o, d)) * math.sqrt(2.0 / d) for d, o in zip(sizes, sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(weights, biases)

    @property
    def layer_names(self) -> list[str]:
        return [f"layer{n}" for n in range(len(self.weights))]

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "ToyNetwork":
        return ToyNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if n < last:
                h = np.maximum(h, 0.0)
        return h

    def accuracy(self, data: Dataset) -> float:
        if len(data.y) == 0:
            return float("nan")
        return float(np.mean(np.argmax(self.forward(data.x), axis=1) == data.y))


def task_loss_and_grads(net: ToyNetwork, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradients (weights, biases)."""
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for n, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if n < last else z
        acts.append(h)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    m = len(y)
    loss = float(np.mean(logsum - shifted[np.arange(m), y]))

    g = np.exp(shifted - logsum[:, None])
    g[np.arange(m), y] -= 1.0
    g /= m
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for n in range(last, -1, -1):
        if n < last:
            g = g * (pre[n] > 0)
        gw[n] = g.T @ acts[n]
        gb[n] = g.sum(axis=0)
        g = g @ net.weights[n]
    return loss, gw, gb


# --- configuration --------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_milestones: tuple = ()
    lr_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    seed: int = 0
    hidden: tuple = (8,)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    regularizer: Optional[RegularizerSpec] = None
    c_reg: float = 0.1
    balance: Optional[BalanceConfig] = None
    regularize: Optional[tuple] = None
    relaxation: Optional[dict] = None
    plan: Optional[list] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.c_reg < 0:
            raise ValueError("c_reg must be non-negative")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        self.lr_milestones = tuple(sorted(int(m) for m in self.lr_milestones))
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.regularizer is not None and self.regularizer.variant is Variant.RELAXED_DISENTANGLED:
            raise ValueError("use variant 'disentangled' with a plan or relaxation block; "
                             "masks are rebuilt every step")

    @property
    def sizes(self) -> list[int]:
        return [self.dataset.input_dim, *self.hidden, self.dataset.classes]

    def regularized_layers(self) -> list[int]:
        n_layers = len(self.sizes) - 1
        if self.regularize is None:
            return list(range(n_layers - 1)) or [0]
        idx = [int(i) for i in self.regularize]
        if any(not 0 <= i < n_layers for i in idx):
            raise ValueError(f"regularize indices must lie in [0, {n_layers})")
        return sorted(set(idx))

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_factor ** k

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = DatasetSpec(**d["dataset"])
        reg = d.get("regularizer")
        d["regularizer"] = RegularizerSpec.from_dict(reg) if reg else None
        bal = d.get("balance")
        if bal is not None:
            bal = dict(bal)
            bal.setdefault("milestone_epochs", d.get("lr_milestones", ()))
            d["balance"] = BalanceConfig.from_dict(bal)
        for k in ("lr_milestones", "hidden", "regularize"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "lr_milestones": list(self.lr_milestones), "lr_factor": self.lr_factor,
            "momentum": self.momentum, "nesterov": self.nesterov, "seed": self.seed,
            "hidden": list(self.hidden),
            "dataset": {"classes": self.dataset.classes, "input_dim": self.dataset.input_dim,
                        "samples_per_class": self.dataset.samples_per_class,
                        "separation": self.dataset.separation},
            "regularizer": self.regularizer.to_dict() if self.regularizer else None,
            "c_reg": self.c_reg,
            "balance": self.balance.to_dict() if self.balance else None,
            "regularize": list(self.regularize) if self.regularize is not None else None,
            "relaxation": self.relaxation,
            "plan": self.plan,
        }


def architecture_of(config: TrainConfig) -> list[LayerDescriptor]:
    """Layer descriptors for the network, grouped by (o, d) in front-to-back order."""
    sizes = config.sizes
    counters: dict[str, int] = {}
    layers = []
    for n, (d, o) in enumerate(zip(sizes, sizes[1:])):
        group = f"{o}x{d}"
        idx = counters.get(group, 0)
        counters[group] = idx + 1
        layers.append(LayerDescriptor(f"layer{n}", o, d, 1, 1, group, idx,
                                      "stem" if n == 0 else "conv"))
    return layers


def resolve_plan(config: TrainConfig) -> dict[str, RelaxationPlanEntry]:
    """Plan entries for the regularized layers, keyed by layer name."""
    if config.plan is not None:
        entries = [e if isinstance(e, RelaxationPlanEntry) else RelaxationPlanEntry.from_dict(e)
                   for e in config.plan]
    elif config.relaxation is not None:
        r = dict(config.relaxation)
        transition = TransitionConfig(int(r.get("attribute", config.dataset.classes)),
                                      int(r.get("intrinsic", 30)), int(r.get("max_transition", 100)))
        ratio = RatioMapConfig(float(r.get("least_ratio", 0.0)), r.get("pattern", "log"))
        reg = set(config.regularized_layers())
        arch = [l for n, l in enumerate(architecture_of(config)) if n in reg]
        entries = build_plan(arch, transition, ratio, int(r.get("trials", DEFAULT_TRIALS)),
                             int(r.get("seed", config.seed)))
    else:
        return {}
    by_name = {e.layer: e for e in entries}
    sizes = config.sizes
    for n in config.regularized_layers():
        e = by_name.get(f"layer{n}")
        if e is not None and (e.o, e.d) != (sizes[n + 1], sizes[n]):
            raise ValueError(f"plan entry for layer{n} is for {e.o}x{e.d}, "
                             f"network has {sizes[n + 1]}x{sizes[n]}")
    return by_name


# --- objective ------------------------------------------------------------

def layer_masks(net: ToyNetwork, layers: list[int], plan: dict) -> dict[int, PairMask]:
    """Exemption masks from the current correlations of each planned layer."""
    masks = {}
    for n in layers:
        e = plan.get(f"layer{n}")
        if e is None or e.exempt_total == 0:
            continue
        W = net.weights[n]
        try:
            tril = measures.correlation_tril(W)
        except measures.DegenerateFilterError:
            continue
        masks[n] = build_exemption_mask(tril, e.exempt_positive, e.exempt_negative, o=W.shape[0])
    return masks


def _layer_spec(spec: RegularizerSpec, lambda_diag: float, mask: Optional[PairMask]) -> RegularizerSpec:
    s = RegularizerSpec(spec.variant if spec.variant is not Variant.RELAXED_DISENTANGLED
                        else Variant.DISENTANGLED, lambda_diag, spec.power_iterations, spec.seed)
    return s.with_mask(mask) if mask is not None else s


def regularizer_terms(net: ToyNetwork, spec: RegularizerSpec, lambda_diag: float,
                      layers: list[int], masks: dict, with_grad: bool = True):
    """Summed raw regularizer over ``layers`` plus per-layer results."""
    results = {}
    for n in layers:
        results[n] = measures.evaluate(net.weights[n], _layer_spec(spec, lambda_diag, masks.get(n)),
                                       with_grad=with_grad)
    total = sum(r.total for r in results.values())
    corr = sum(r.corr_component for r in results.values())
    diag = sum(r.diag_component for r in results.values())
    return total, corr, diag, results


def objective(net: ToyNetwork, x, y, spec: Optional[RegularizerSpec], c_reg: float,
              lambda_diag: float, layers: list[int], masks: dict):
    """Task loss + c_reg * regularizer and its gradient for every parameter."""
    loss, gw, gb = task_loss_and_grads(net, x, y)
    if spec is not None and c_reg != 0.0:
        reg, _, _, results = regularizer_terms(net, spec, lambda_diag, layers, masks)
        loss += c_reg * reg
        for n, r in results.items():
            gw[n] = gw[n] + c_reg * r.gradient
    return loss, gw, gb


# --- training -------------------------------------------------------------

@dataclass
class MetricsHistory:
    epochs: list = field(default_factory=list)
    scheduler: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.epochs)

    def scheduler_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.scheduler)

    @property
    def final(self) -> dict:
        return self.epochs[-1]

    def summary_table(self) -> str:
        f = self.final
        lines = [f"epochs {len(self.epochs)}  val_acc {f['val_acc']:.4f}  task_loss {f['task_loss']:.4f}  "
                 f"c_reg {f['c_reg']:.6g}  lambda {f['lambda_diag']:.6g}",
                 f"{'layer':<10} {'shape':>9} {'near-orth':>20} {'frobenius':>10} {'corr':>10} {'masked':>10}"]
        for l in f["layers"]:
            lines.append(f"{l['name']:<10} {l['o']:>4}x{l['d']:<4} {l['near_orth']:>20} "
                         f"{l['frobenius']:>10.4f} {l['corr']:>10.4f} {l['masked_corr']:>10.4f}")
        return "\n".join(lines) + "\n"


def _layer_stats(net: ToyNetwork, n: int, mask: Optional[PairMask]) -> dict:
    W = net.weights[n]
    report = measures.near_orth_report(W, f"layer{n}")
    out = {"name": f"layer{n}", "o": W.shape[0], "d": W.shape[1],
           "tril_mean": report.tril_mean, "tril_std": report.tril_std,
           "diag_mean": report.diag_mean, "near_orth": report.format(),
           "frobenius": measures.frobenius_loss(W).total}
    try:
        corr = measures.correlation_tril(W)
        out["abs_corr_mean"] = float(np.mean(np.abs(corr))) if corr.size else 0.0
        out["corr"] = float(np.sqrt(np.sum(corr ** 2)))
        keep = mask.keep() if mask is not None else np.ones(corr.size, dtype=bool)
        out["masked_corr"] = float(np.sqrt(np.sum(corr[keep] ** 2)))
    except measures.DegenerateFilterError:
        out["abs_corr_mean"] = out["corr"] = out["masked_corr"] = float("nan")
    return out


def train(config: TrainConfig, data: Optional[tuple] = None) -> tuple[ToyNetwork, MetricsHistory]:
    train_set, val_set = data or make_synthetic_dataset(config.dataset, config.seed)
    if train_set.x.shape[1] != config.dataset.input_dim:
        raise ValueError(f"data has {train_set.x.shape[1]} features, config expects {config.dataset.input_dim}")
    net = ToyNetwork.init(config.sizes, config.seed)
    spec = config.regularizer
    layers = config.regularized_layers()
    plan = resolve_plan(config) if spec is not None else {}
    disentangled = spec is not None and spec.variant in (Variant.DISENTANGLED, Variant.RELAXED_DISENTANGLED)
    state = CoefficientState(config.c_reg, spec.lambda_diag if spec else 0.0)
    balance = config.balance if spec is not None else None
    adjust_at = set(adjustment_epochs(balance, config.epochs)) if balance else set()

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    velocity = [np.zeros_like(p) for p in net.params()]
    history = MetricsHistory()
    prev = None  # epoch averages feeding the scheduler
    n = len(train_set.y)

    for epoch in range(config.epochs):
        if balance is not None and prev is not None:
            if epoch == balance.calibration_epoch:
                if disentangled:
                    state.calibrate(epoch, balance, prev["task"], corr_loss=prev["corr"], diag_loss=prev["diag"])
                else:
                    state.calibrate(epoch, balance, prev["task"], reg_loss=prev["reg"])
            if epoch in adjust_at:
                reg = prev["corr"] + state.lambda_diag * prev["diag"] if disentangled else prev["reg"]
                state.adjust(epoch, balance, prev["task"], reg)

        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        sums = {"task": 0.0, "reg": 0.0, "corr": 0.0, "diag": 0.0}
        batches = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = train_set.x[idx], train_set.y[idx]
            task, gw, gb = task_loss_and_grads(net, x, y)
            if spec is not None:
                masks = layer_masks(net, layers, plan)
                reg, corr, diag, results = regularizer_terms(net, spec, state.lambda_diag, layers, masks)
                for k, r in results.items():
                    gw[k] = gw[k] + state.c_reg * r.gradient
            else:
                reg = corr = diag = 0.0
            if not (math.isfinite(task) and math.isfinite(reg)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} "
                                    f"(task={task}, reg={reg})")
            for p, g, v in zip(net.params(), gw + gb, velocity):
                v *= config.momentum
                v += g
                p -= lr * (g + config.momentum * v if config.nesterov else v)
            sums["task"] += task
            sums["reg"] += reg
            sums["corr"] += corr
            sums["diag"] += diag
            batches += 1
        prev = {k: v / batches for k, v in sums.items()}

        masks = layer_masks(net, layers, plan) if spec is not None else {}
        raw_reg = prev["corr"] + state.lambda_diag * prev["diag"] if disentangled else prev["reg"]
        record = {
            "epoch": epoch,
            "lr": lr,
            "task_loss": prev["task"],
            "reg_loss": raw_reg,
            "corr_loss": prev["corr"],
            "diag_loss": prev["diag"],
            "c_reg": state.c_reg,
            "lambda_diag": state.lambda_diag,
            "reg_share": share(prev["task"], state.c_reg, raw_reg) if spec is not None else 0.0,
            "train_acc": net.accuracy(train_set),
            "val_acc": net.accuracy(val_set),
            "layers": [_layer_stats(net, k, masks.get(k)) for k in range(len(net.weights))],
        }
        if not all(np.isfinite(p).all() for p in net.params()):
            raise TrainingError(f"non-finite weights after epoch {epoch}")
        history.epochs.append(record)

    history.scheduler = [r.to_dict() for r in state.history]
    return net, history


# --- inaccessible orthogonality demo --------------------------------------

@dataclass
class DemoRow:
    c_reg: float
    frobenius: float
    floor: float
    val_acc: float

    @property
    def above_floor(self) -> bool:
        return self.frobenius >= self.floor - 1e-6


@dataclass
class DemoReport:
    layer: str
    o: int
    d: int
    rows: list
    strict_corr: float
    relaxed_masked_corr: float
    relaxed_exempt: tuple

    @property
    def floor(self) -> float:
        return math.sqrt(self.o - self.d)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "o": self.o, "d": self.d, "floor": self.floor,
            "rows": [{"c_reg": r.c_reg, "frobenius": r.frobenius, "floor": r.floor,
                      "val_acc": r.val_acc, "above_floor": r.above_floor} for r in self.rows],
            "strict_corr": self.strict_corr, "relaxed_masked_corr": self.relaxed_masked_corr,
            "relaxed_exempt": list(self.relaxed_exempt),
        }

    def table(self) -> str:
        lines = [f"{self.layer} {self.o}x{self.d}: Frobenius floor sqrt(o-d) = {self.floor:.4f}",
                 f"{'c_reg':>10} {'frobenius':>10} {'val_acc':>8} {'>=floor':>8}"]
        for r in self.rows:
            lines.append(f"{r.c_reg:>10.4g} {r.frobenius:>10.4f} {r.val_acc:>8.4f} {str(r.above_floor):>8}")
        lines.append(f"disentangled corr loss: strict {self.strict_corr:.4f}, "
                     f"relaxed (masked, exempt {self.relaxed_exempt[0]}+{self.relaxed_exempt[1]}) "
                     f"{self.relaxed_masked_corr:.4f}")
        return "\n".join(lines) + "\n"


DEFAULT_SWEEP = (0.0, 0.01, 0.1, 1.0)


def inaccessible_orthogonality_demo(config: TrainConfig, c_regs=DEFAULT_SWEEP) -> DemoReport:
    """Sweep strict Frobenius strength on an over-determined layer.

    Also trains the same network under strict and relaxed disentangled
    regularization and compares their correlation losses.  The scheduler is
    not used: each run keeps its c_reg fixed.
    """
    sizes = config.sizes
    over = [n for n in config.regularized_layers() if sizes[n + 1] > sizes[n]]
    if not over:
        raise ValueError("demo needs an over-determined regularized layer (o > d)")
    target = over[0]
    o, d = sizes[target + 1], sizes[target]
    floor = math.sqrt(o - d)
    base = config.to_dict()
    base.update(balance=None, regularize=[target])

    def run(**changes):
        cfg = TrainConfig.from_dict({**base, **changes})
        return train(cfg)

    rows = []
    for c in c_regs:
        net, hist = run(regularizer={"variant": "frobenius"}, c_reg=float(c), relaxation=None, plan=None)
        rows.append(DemoRow(float(c), measures.frobenius_loss(net.weights[target]).total, floor,
                            hist.final["val_acc"]))

    reg = config.regularizer.to_dict() if config.regularizer and \
        config.regularizer.variant in (Variant.DISENTANGLED,) else {"variant": "disentangled", "lambda_diag": 0.1}
    relaxation = config.relaxation or {"attribute": config.dataset.classes}
    _, strict = run(regularizer=reg, relaxation=None, plan=None)
    cfg_relaxed = TrainConfig.from_dict({**base, "regularizer": reg, "relaxation": relaxation,
                                         "plan": config.plan})
    _, relaxed = train(cfg_relaxed)
    entry = resolve_plan(cfg_relaxed).get(f"layer{target}")
    exempt = (entry.exempt_positive, entry.exempt_negative) if entry else (0, 0)
    return DemoReport(f"layer{target}", o, d, rows,
                      strict.final["layers"][target]["corr"],
                      relaxed.final["layers"][target]["masked_corr"], exempt)
