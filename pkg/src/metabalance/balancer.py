"""Auxiliary-gradient magnitude balancing (MetaBalance).

For every shared parameter group, moving averages of the target and auxiliary
gradient L2 norms are updated each iteration; each auxiliary gradient whose
magnitude passes the strategy gate is then multiplied by

    w = (m_tar / m_aux - 1) * r + 1

which moves its norm a fraction ``r`` of the way towards the target's
(w.r.t. the moving averages). Directions are never changed.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import GradientSet
from .errors import ConfigurationError, ContractViolation, TrainingFault


class Strategy(str, enum.Enum):
    A = "A"  # shrink auxiliaries that dominate the target
    B = "B"  # enlarge auxiliaries weaker than the target
    C = "C"  # both
    OFF = "Off"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, Strategy):
            return value
        for s in cls:
            if str(value).lower() == s.value.lower():
                return s
        raise ConfigurationError(f"unknown strategy {value!r}; expected one of A, B, C, Off")


@dataclass(frozen=True)
class BalancerConfig:
    strategy: Strategy = Strategy.C
    relax_factor: float = 0.7
    beta: float = 0.9
    epsilon: float = 1e-12
    max_weight: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if not 0.0 <= self.relax_factor <= 1.0:
            raise ConfigurationError(f"relax_factor must be in [0, 1], got {self.relax_factor}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must be in [0, 1), got {self.beta}")
        if self.epsilon <= 0.0:
            raise ConfigurationError("epsilon must be positive")


@dataclass
class MagnitudeState:
    """Moving-average magnitudes per shared group; zero-initialised."""

    m_tar: dict[str, float]
    m_aux: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, groups: Iterable[str], n_aux: int) -> "MagnitudeState":
        groups = list(groups)
        return cls({g: 0.0 for g in groups}, {g: np.zeros(n_aux) for g in groups})

    @property
    def groups(self) -> list[str]:
        return list(self.m_tar)

    def copy(self) -> "MagnitudeState":
        return MagnitudeState(dict(self.m_tar), {g: v.copy() for g, v in self.m_aux.items()}, self.t)

    def nbytes(self) -> int:
        return 8 * (len(self.m_tar) + sum(v.size for v in self.m_aux.values()) + 1)


@dataclass
class BalanceRow:
    group: str
    task: int  # auxiliary task index, 1-based
    weight: float
    pre_norm: float
    post_norm: float
    gated: bool
    m_tar: float
    m_aux: float


@dataclass
class BalanceReport:
    iteration: int
    rows: list[BalanceRow] = field(default_factory=list)

    CSV_FIELDS = ("iteration", "group", "task", "pre_norm", "post_norm", "weight", "gated")

    def write_csv(self, fh, header: bool = False) -> None:
        w = csv.writer(fh)
        if header:
            w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([self.iteration, r.group, r.task, repr(r.pre_norm), repr(r.post_norm), repr(r.weight), int(r.gated)])


def compute_weight(m_tar: float, m_aux: float, r: float, epsilon: float = 1e-12, max_weight: float = 1e6) -> float:
    w = (m_tar / max(m_aux, epsilon) - 1.0) * r + 1.0
    return min(w, max_weight)


def update_ema(previous: float, current_norm: float, beta: float) -> float:
    return beta * previous + (1.0 - beta) * current_norm


def strategy_gate(strategy: Strategy, m_tar: float, m_aux: float) -> bool:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.A:
        return m_aux > m_tar
    if strategy is Strategy.B:
        return m_aux < m_tar
    if strategy is Strategy.C:
        return m_aux != m_tar
    return False


def _norm(x: np.ndarray) -> float:
    return math.sqrt(float(np.dot(x.ravel(), x.ravel())))


def balance_step(
    target: GradientSet,
    auxiliaries: Sequence[GradientSet],
    state: MagnitudeState,
    config: BalancerConfig,
) -> tuple[list[GradientSet], BalanceReport, MagnitudeState]:
    """One iteration of balancing over the groups tracked by ``state``.

    Groups outside ``state`` (task towers) and the target gradient pass through
    untouched; gated-out auxiliary arrays are passed through as the same objects.
    """
    keys = set(target)
    for a in auxiliaries:
        if set(a) != keys:
            raise ContractViolation("balance_step: gradient sets have different group keys")
    if not set(state.m_tar) <= keys:
        raise ContractViolation("balance_step: state tracks groups missing from the gradients")
    if any(v.size != len(auxiliaries) for v in state.m_aux.values()):
        raise ContractViolation("balance_step: state auxiliary count does not match")

    new = state.copy()
    new.t += 1
    report = BalanceReport(new.t)
    out = [GradientSet(a, task=a.task) for a in auxiliaries]
    r = config.relax_factor
    for g in state.m_tar:
        tar_norm = _norm(target[g])
        if not math.isfinite(tar_norm):
            raise TrainingFault(f"non-finite target gradient norm in group {g!r}")
        new.m_tar[g] = m_tar = update_ema(state.m_tar[g], tar_norm, config.beta)
        for i, aux in enumerate(auxiliaries):
            pre = _norm(aux[g])
            if not math.isfinite(pre):
                raise TrainingFault(f"non-finite gradient norm in group {g!r}, auxiliary task {i + 1}")
            m_aux = update_ema(float(state.m_aux[g][i]), pre, config.beta)
            new.m_aux[g][i] = m_aux
            gated = strategy_gate(config.strategy, m_tar, m_aux)
            w, post = 1.0, pre
            if gated and r != 0.0:
                w = compute_weight(m_tar, m_aux, r, config.epsilon, config.max_weight)
                out[i][g] = aux[g] * w
                post = _norm(out[i][g])
            report.rows.append(BalanceRow(g, i + 1, w, pre, post, gated, m_tar, m_aux))
    return out, report, new


def sum_gradients(target: GradientSet, auxiliaries: Sequence[GradientSet]) -> GradientSet:
    keys = set(target)
    for a in auxiliaries:
        if set(a) != keys:
            raise ContractViolation("sum_gradients: gradient sets have different group keys")
    total = GradientSet(task="total")
    for g, arr in target.items():
        acc = arr.copy()
        for a in auxiliaries:
            acc += a[g]
        total[g] = acc
    return total


class MetaBalance:
    """Stateful wrapper exposing the common balancing-method interface."""

    name = "metabalance"

    def __init__(self, shared_groups: Iterable[str], n_aux: int, config: BalancerConfig | None = None):
        self.config = config or BalancerConfig()
        self.state = MagnitudeState.create(shared_groups, n_aux)
        self.last_report: BalanceReport | None = None

    def balance(self, target: GradientSet, auxiliaries: Sequence[GradientSet], losses=None):
        balanced, self.last_report, self.state = balance_step(target, auxiliaries, self.state, self.config)
        return target, balanced

    def state_nbytes(self) -> int:
        return self.state.nbytes()
