"""Loss-share balancing for the regularizer coefficient and lambda.

The regularizer share of the objective is ``c * reg / (task + c * reg)``.
Calibration solves that equation for ``c`` in closed form; at the scheme
change epochs the share is cut back to ``cap_target`` if it has grown past
``cap_share``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class BalanceConfig:
    target_reg_share: float = 0.10
    eps_reg: float = 0.01
    target_diag_share: float = 0.10
    eps_diag: float = 0.05
    cap_share: float = 0.40
    cap_target: float = 0.35
    calibration_epoch: int = 10
    milestone_epochs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "milestone_epochs", tuple(int(m) for m in self.milestone_epochs))
        if not 0 < self.target_reg_share < self.cap_share < 1:
            raise ValueError("need 0 < target_reg_share < cap_share < 1")
        if not 0 < self.cap_target <= self.cap_share:
            raise ValueError("need 0 < cap_target <= cap_share")
        if not 0 <= self.target_diag_share < 1:
            raise ValueError("target_diag_share must lie in [0, 1)")
        if self.eps_reg <= 0 or self.eps_diag <= 0:
            raise ValueError("eps values must be positive")
        if self.calibration_epoch < 1:
            raise ValueError("calibration_epoch must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BalanceConfig":
        return cls(**{k: (tuple(v) if k == "milestone_epochs" else v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {
            "target_reg_share": self.target_reg_share, "eps_reg": self.eps_reg,
            "target_diag_share": self.target_diag_share, "eps_diag": self.eps_diag,
            "cap_share": self.cap_share, "cap_target": self.cap_target,
            "calibration_epoch": self.calibration_epoch,
            "milestone_epochs": list(self.milestone_epochs),
        }


class AlreadyOrthogonal(Exception):
    """The raw loss is zero, so no coefficient can reach the target share."""


def share(task_loss: float, c: float, raw_reg_loss: float) -> float:
    reg = c * raw_reg_loss
    denom = task_loss + reg
    return reg / denom if denom > 0 else 0.0


def _solve(target: float, fixed: float, raw: float) -> float:
    # c * raw / (fixed + c * raw) = target
    return (target / (1.0 - target)) * fixed / raw


def calibrate_reg_coefficient(task_loss: float, raw_reg_loss: float, target: float) -> float:
    if raw_reg_loss <= 0:
        raise AlreadyOrthogonal("regularizer loss is zero")
    if task_loss <= 0:
        raise ValueError("task_loss must be positive")
    return _solve(target, task_loss, raw_reg_loss)


def calibrate_lambda(corr_loss: float, raw_diag_loss: float, target_diag_share: float) -> float:
    if raw_diag_loss <= 0:
        raise AlreadyOrthogonal("diagonal loss is zero")
    if corr_loss <= 0:
        return 0.0
    return _solve(target_diag_share, corr_loss, raw_diag_loss)


def enforce_cap(task_loss: float, c: float, raw_reg_loss: float, cfg: BalanceConfig) -> float:
    if raw_reg_loss <= 0 or task_loss <= 0:
        return c
    if share(task_loss, c, raw_reg_loss) > cfg.cap_share:
        return _solve(cfg.cap_target, task_loss, raw_reg_loss)
    return c


def adjustment_epochs(cfg: BalanceConfig, total_epochs: int) -> list[int]:
    """Start and midpoint of stages 2 and 3, and the start of stage 4.

    Stage k runs from milestone k-1 to milestone k (the last stage ends at
    ``total_epochs``).  Stages that do not exist are skipped.
    """
    bounds = sorted(m for m in set(cfg.milestone_epochs) if 0 < m < total_epochs)
    if not bounds:
        return []
    edges = [0] + bounds + [total_epochs]
    # stage k (1-based) spans edges[k-1] .. edges[k]
    out = []
    for k in (2, 3):
        if k < len(edges):
            begin, end = edges[k - 1], edges[k]
            out += [begin, (begin + end) // 2]
    if len(edges) > 4:
        out.append(edges[3])
    return sorted(set(out))


@dataclass
class HistoryRecord:
    epoch: int
    action: str
    coefficient: str
    old: float
    new: float
    share_before: float
    share_after: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "action": self.action, "coefficient": self.coefficient,
                "old": self.old, "new": self.new,
                "share_before": self.share_before, "share_after": self.share_after}


@dataclass
class CoefficientState:
    c_reg: float = 1.0
    lambda_diag: float = 0.1
    history: list = field(default_factory=list)

    def _log(self, epoch, action, coefficient, old, new, before, after):
        self.history.append(HistoryRecord(epoch, action, coefficient, old, new, before, after))

    def calibrate(self, epoch: int, cfg: BalanceConfig, task_loss: float,
                  corr_loss: Optional[float] = None, diag_loss: Optional[float] = None,
                  reg_loss: Optional[float] = None) -> None:
        """Set lambda (disentangled variants) and then c_reg from averaged losses.

        Pass ``corr_loss`` and ``diag_loss`` for the disentangled norm, or
        ``reg_loss`` for any other regularizer.
        """
        if corr_loss is not None and diag_loss is not None:
            old = self.lambda_diag
            before = share(corr_loss, old, diag_loss)
            try:
                self.lambda_diag = calibrate_lambda(corr_loss, diag_loss, cfg.target_diag_share)
            except AlreadyOrthogonal:
                pass
            self._log(epoch, "calibrate", "lambda_diag", old, self.lambda_diag,
                      before, share(corr_loss, self.lambda_diag, diag_loss))
            reg_loss = corr_loss + self.lambda_diag * diag_loss
        if reg_loss is None:
            raise ValueError("need either corr_loss and diag_loss, or reg_loss")
        old = self.c_reg
        before = share(task_loss, old, reg_loss)
        try:
            self.c_reg = calibrate_reg_coefficient(task_loss, reg_loss, cfg.target_reg_share)
        except AlreadyOrthogonal:
            pass
        self._log(epoch, "calibrate", "c_reg", old, self.c_reg, before,
                  share(task_loss, self.c_reg, reg_loss))

    def adjust(self, epoch: int, cfg: BalanceConfig, task_loss: float, reg_loss: float) -> None:
        old = self.c_reg
        before = share(task_loss, old, reg_loss)
        self.c_reg = enforce_cap(task_loss, old, reg_loss, cfg)
        self._log(epoch, "cap" if self.c_reg != old else "check", "c_reg", old, self.c_reg,
                  before, share(task_loss, self.c_reg, reg_loss))

    def history_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.history)

    @classmethod
    def replay(cls, records, c_reg: float = 1.0, lambda_diag: float = 0.1) -> "CoefficientState":
        """Rebuild a state by applying logged transitions in order."""
        state = cls(c_reg, lambda_diag)
        for r in records:
            if isinstance(r, dict):
                r = HistoryRecord(**r)
            if not math.isclose(getattr(state, r.coefficient), r.old, rel_tol=0, abs_tol=0):
                raise ValueError(f"history out of order at epoch {r.epoch}: "
                                 f"{r.coefficient}={getattr(state, r.coefficient)} but record says {r.old}")
            setattr(state, r.coefficient, r.new)
            state.history.append(r)
        return state
