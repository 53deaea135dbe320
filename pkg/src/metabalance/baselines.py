"""Comparison methods sharing the balancing interface of :class:`MetaBalance`.

Every method object exposes ``balance(target, auxiliaries, losses)`` and
returns ``(target, auxiliaries)``, possibly reweighted. Gradient-level methods
(GradSimilarity, GradSurgery) act per shared parameter group; loss-weighting
methods scale a task's whole gradient set, which is what weighting its loss
would do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientSet, ParameterGroup, Tensor
from .balancer import BalancerConfig, MetaBalance
from .errors import ConfigurationError, ContractViolation
from .optimizers import Adam


def _scaled(gs: GradientSet, w: float) -> GradientSet:
    if w == 1.0:
        return gs
    return GradientSet({k: v * w for k, v in gs.items()}, task=gs.task)


def _check_keys(target: GradientSet, aux: GradientSet) -> None:
    if set(target) != set(aux):
        raise ContractViolation("gradient sets have different group keys")


# ---------------------------------------------------------------------------
# direction-based


def grad_similarity_filter(target: GradientSet, aux: GradientSet, groups: Iterable[str] | None = None) -> GradientSet:
    """Zero the auxiliary array of every group whose cosine with the target is negative."""
    _check_keys(target, aux)
    out = GradientSet(aux, task=aux.task)
    for g in target if groups is None else groups:
        if float(np.dot(target[g].ravel(), aux[g].ravel())) < 0.0:
            out[g] = np.zeros_like(aux[g])
    return out


def grad_surgery_project(target: GradientSet, aux: GradientSet, groups: Iterable[str] | None = None) -> GradientSet:
    """Project conflicting auxiliary arrays onto the normal plane of the target array."""
    _check_keys(target, aux)
    out = GradientSet(aux, task=aux.task)
    for g in target if groups is None else groups:
        t, a = target[g].ravel(), aux[g].ravel()
        dot = float(np.dot(a, t))
        sq = float(np.dot(t, t))
        if dot < 0.0 and sq > 0.0:
            out[g] = aux[g] - (dot / sq) * target[g]
    return out


class GradSimilarity:
    name = "gradsimilarity"

    def __init__(self, shared_groups: Iterable[str]):
        self.groups = list(shared_groups)

    def balance(self, target, auxiliaries, losses=None):
        return target, [grad_similarity_filter(target, a, self.groups) for a in auxiliaries]


class GradSurgery:
    name = "gradsurgery"

    def __init__(self, shared_groups: Iterable[str]):
        self.groups = list(shared_groups)

    def balance(self, target, auxiliaries, losses=None):
        return target, [grad_surgery_project(target, a, self.groups) for a in auxiliaries]


@dataclass
class OLAuxState:
    weights: np.ndarray
    lr: float = 1.0
    window: int = 1
    buffer: list[np.ndarray] = field(default_factory=list)


def olaux_update(state: OLAuxState, dot_sums: np.ndarray) -> np.ndarray:
    """Ascend the N-step target-loss decrease: ``w += lr * sum of dot(G_tar, G_aux)``."""
    state.weights = state.weights + state.lr * np.asarray(dot_sums, dtype=float)
    state.buffer.clear()
    return state.weights


class OLAux:
    name = "olaux"

    def __init__(self, shared_groups: Iterable[str], n_aux: int, lr: float = 1.0, window: int = 1):
        if window < 1:
            raise ConfigurationError("OL-AUX window must be >= 1")
        self.groups = list(shared_groups)
        self.state = OLAuxState(np.ones(n_aux), lr, window)

    def balance(self, target, auxiliaries, losses=None):
        t = np.concatenate([target[g].ravel() for g in self.groups])
        dots = np.array([float(np.dot(t, np.concatenate([a[g].ravel() for g in self.groups]))) for a in auxiliaries])
        out = [_scaled(a, float(w)) for a, w in zip(auxiliaries, self.state.weights)]
        self.state.buffer.append(dots)
        if len(self.state.buffer) >= self.state.window:
            olaux_update(self.state, np.sum(self.state.buffer, axis=0))
        return target, out


# ---------------------------------------------------------------------------
# loss-weighting


def fixed_weights(target: GradientSet, auxiliaries: Sequence[GradientSet], weights: Sequence[float]):
    weights = [float(w) for w in weights]
    if len(weights) != len(auxiliaries) + 1:
        raise ConfigurationError(f"expected {len(auxiliaries) + 1} task weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ConfigurationError("task weights must be non-negative")
    return _scaled(target, weights[0]), [_scaled(a, w) for a, w in zip(auxiliaries, weights[1:])]


class FixedWeights:
    """Vanilla-Multi (all ones), Single-Loss (1, 0, ...) or tuned fixed weights."""

    def __init__(self, weights: Sequence[float], name: str = "weights-tuning"):
        self.weights = [float(w) for w in weights]
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("task weights must be non-negative")
        self.name = name

    def balance(self, target, auxiliaries, losses=None):
        return fixed_weights(target, auxiliaries, self.weights)


@dataclass
class DWAState:
    n_tasks: int
    temperature: float = 2.0
    window: int = 10
    history: list[np.ndarray] = field(default_factory=list)
    _acc: np.ndarray | None = None
    _count: int = 0

    def record(self, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=float)
        self._acc = losses.copy() if self._acc is None else self._acc + losses
        self._count += 1
        if self._count >= self.window:
            self.history = (self.history + [self._acc / self._count])[-2:]
            self._acc, self._count = None, 0


def dwa_weights(state: DWAState) -> np.ndarray:
    n = state.n_tasks
    if len(state.history) < 2:
        return np.ones(n)
    prev, prev2 = state.history[-1], state.history[-2]
    p = np.ones(n)
    ok = prev2 != 0
    p[ok] = prev[ok] / prev2[ok]
    e = np.exp((p - p.max()) / state.temperature)
    return n * e / e.sum()


class DWA:
    name = "dwa"

    def __init__(self, n_tasks: int, temperature: float = 2.0, window: int = 10):
        self.state = DWAState(n_tasks, temperature, window)

    def balance(self, target, auxiliaries, losses=None):
        w = dwa_weights(self.state)
        if losses is not None:
            self.state.record(losses)
        return fixed_weights(target, auxiliaries, w)


@dataclass
class UncertaintyParams:
    log_var: ParameterGroup  # s_j = log sigma_j^2

    @classmethod
    def create(cls, n_tasks: int) -> "UncertaintyParams":
        return cls(ParameterGroup("uncertainty.log_var", np.zeros(n_tasks)))


def uncertainty_total_loss(task_losses: Sequence[Tensor], log_var: Tensor) -> Tensor:
    """sum_j exp(-s_j) * L_j + sum_j s_j / 2, i.e. 1/sigma^2 weighting plus log sigma."""
    total = None
    for j, loss in enumerate(task_losses):
        s_j = ad.reshape(_pick(log_var, j), ())
        term = ad.add(ad.mul(ad.exp(ad.scale(s_j, -1.0)), loss), ad.scale(s_j, 0.5))
        total = term if total is None else ad.add(total, term)
    return total


def _pick(x: Tensor, j: int) -> Tensor:
    onehot = np.zeros(x.shape)
    onehot[j] = 1.0
    return ad.sum_all(ad.mul(x, onehot))


class Uncertainty:
    name = "uncertainty"

    def __init__(self, n_tasks: int, lr: float = 1e-3):
        self.params = UncertaintyParams.create(n_tasks)
        self.opt = Adam(lr=lr)

    @property
    def log_var(self) -> np.ndarray:
        return self.params.log_var.value

    def balance(self, target, auxiliaries, losses=None):
        w = np.exp(-self.log_var)
        out = fixed_weights(target, auxiliaries, w)
        if losses is not None:
            g = self.params.log_var
            val, tape = ad.forward(lambda xs, ps: uncertainty_total_loss(
                [xs[f"L{j}"] for j in range(len(losses))], ps[g.name]),
                {f"L{j}": np.asarray(float(l)) for j, l in enumerate(losses)}, [g])
            self.opt.apply_update({g.name: g.value}, ad.backward(tape, val))
        return out


@dataclass
class GradNormState:
    weights: np.ndarray
    alpha: float = 0.0
    lr: float = 0.025
    initial_losses: np.ndarray | None = None


def gradnorm_loss_ratios(losses: np.ndarray, initial: np.ndarray) -> np.ndarray:
    init = np.where(initial > 0, initial, 1.0)
    p = np.asarray(losses, dtype=float) / init
    m = p.mean()
    return p / m if m > 0 else np.ones_like(p)


def gradnorm_step(norms: np.ndarray, loss_ratios: np.ndarray, state: GradNormState) -> np.ndarray:
    """One descent step on sum_j |w_j*|G_j| - mean_k(w_k*|G_k|) * r_j^alpha|.

    Gradient norms and the mean target are treated as constants, so the
    derivative w.r.t. w_j is sign(residual_j) * |G_j|. Weights are then
    renormalised to sum to the task count.
    """
    norms = np.asarray(norms, dtype=float)
    weighted = state.weights * norms
    target = weighted.mean() * np.asarray(loss_ratios, dtype=float) ** state.alpha
    grad = np.sign(weighted - target) * norms
    w = np.maximum(state.weights - state.lr * grad, 1e-6)
    state.weights = w * (len(w) / w.sum())
    return state.weights


class GradNorm:
    name = "gradnorm"

    def __init__(self, shared_groups: Sequence[str], n_tasks: int, alpha: float = 0.0, lr: float = 0.025,
                 group: str | None = None):
        shared_groups = list(shared_groups)
        self.group = group or shared_groups[-1]
        self.state = GradNormState(np.ones(n_tasks), alpha, lr)

    def balance(self, target, auxiliaries, losses=None):
        out = fixed_weights(target, auxiliaries, self.state.weights)
        if losses is not None:
            losses = np.asarray(losses, dtype=float)
            if self.state.initial_losses is None:
                self.state.initial_losses = losses.copy()
            norms = np.array([np.linalg.norm(gs[self.group].ravel()) for gs in [target, *auxiliaries]])
            gradnorm_step(norms, gradnorm_loss_ratios(losses, self.state.initial_losses), self.state)
        return out


class Chain:
    """Apply several methods in sequence (e.g. MetaBalance then GradSurgery)."""

    def __init__(self, methods: Sequence):
        self.methods = list(methods)
        self.name = "+".join(m.name for m in self.methods)

    def balance(self, target, auxiliaries, losses=None):
        for m in self.methods:
            target, auxiliaries = m.balance(target, auxiliaries, losses)
        return target, auxiliaries


METHODS = (
    "metabalance", "vanilla", "single-loss", "weights-tuning", "gradsimilarity",
    "gradsurgery", "olaux", "dwa", "uncertainty", "gradnorm",
)


def build_method(name: str, shared_groups: Sequence[str], n_tasks: int, params: dict | None = None):
    """Instantiate a balancing method by name; ``params`` holds its hyper-parameters."""
    p = dict(params or {})
    n_aux = n_tasks - 1
    if "+" in name:
        return Chain([build_method(part, shared_groups, n_tasks, p.get(part, p)) for part in name.split("+")])
    if name == "metabalance":
        keys = ("strategy", "relax_factor", "beta", "epsilon", "max_weight")
        return MetaBalance(shared_groups, n_aux, BalancerConfig(**{k: p[k] for k in keys if k in p}))
    if name == "vanilla":
        return FixedWeights([1.0] * n_tasks, name="vanilla")
    if name == "single-loss":
        return FixedWeights([1.0] + [0.0] * n_aux, name="single-loss")
    if name == "weights-tuning":
        return FixedWeights(p.get("weights", [1.0] * n_tasks), name="weights-tuning")
    if name == "gradsimilarity":
        return GradSimilarity(shared_groups)
    if name == "gradsurgery":
        return GradSurgery(shared_groups)
    if name == "olaux":
        return OLAux(shared_groups, n_aux, lr=p.get("lr", 1.0), window=p.get("window", 1))
    if name == "dwa":
        return DWA(n_tasks, temperature=p.get("temperature", 2.0), window=p.get("window", 10))
    if name == "uncertainty":
        return Uncertainty(n_tasks, lr=p.get("lr", 1e-3))
    if name == "gradnorm":
        return GradNorm(shared_groups, n_tasks, alpha=p.get("alpha", 0.0), lr=p.get("lr", 0.025))
    raise ConfigurationError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
