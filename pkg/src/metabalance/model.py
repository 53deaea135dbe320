"""Shared-bottom multi-task recommendation network.

User and item embeddings feed two shared branches: an elementwise-product
(matrix factorization) branch and an MLP over the concatenated embeddings.
Their outputs are concatenated and fed to one MLP tower per task, each ending
in a single logit. Task 0 is the target task.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterGroup, Tape, Tensor
from .errors import ConfigurationError, ContractViolation, DataError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_users: int
    n_items: int
    n_tasks: int = 4
    embedding_dim: int = 64
    shared_layers: tuple[int, ...] = (32, 16, 8)
    tower_layers: tuple[int, ...] = (64, 32)
    dropout: float = 0.5
    embedding_std: float = 0.01

    def __post_init__(self):
        self.shared_layers = tuple(int(x) for x in self.shared_layers)
        self.tower_layers = tuple(int(x) for x in self.tower_layers)
        if self.n_users < 1 or self.n_items < 1 or self.n_tasks < 1:
            raise ConfigurationError("model needs at least one user, item and task")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout}")


@dataclass
class Batch:
    """Records of (user, item) with one label and one supervision mask column per task."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray  # (B, n_tasks) in {0, 1}
    mask: np.ndarray  # (B, n_tasks) in {0, 1}

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class TaskLosses:
    tensors: list[Tensor]
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.array([t.item() for t in self.tensors])

    def __len__(self) -> int:
        return len(self.tensors)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MultiTaskModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        groups = [
            ParameterGroup("user_embedding", rng.normal(0.0, c.embedding_std, (c.n_users, c.embedding_dim))),
            ParameterGroup("item_embedding", rng.normal(0.0, c.embedding_std, (c.n_items, c.embedding_dim))),
        ]
        width = 2 * c.embedding_dim
        for i, n in enumerate(c.shared_layers):
            groups.append(ParameterGroup(f"shared_mlp.{i}.weight", _glorot(rng, width, n)))
            groups.append(ParameterGroup(f"shared_mlp.{i}.bias", np.zeros(n)))
            width = n
        tower_in = c.embedding_dim + (c.shared_layers[-1] if c.shared_layers else 2 * c.embedding_dim)
        for t in range(c.n_tasks):
            width = tower_in
            for i, n in enumerate(c.tower_layers):
                groups.append(ParameterGroup(f"tower{t}.{i}.weight", _glorot(rng, width, n), task=t))
                groups.append(ParameterGroup(f"tower{t}.{i}.bias", np.zeros(n), task=t))
                width = n
            groups.append(ParameterGroup(f"tower{t}.out.weight", _glorot(rng, width, 1), task=t))
            groups.append(ParameterGroup(f"tower{t}.out.bias", np.zeros(1), task=t))
        self.groups: list[ParameterGroup] = groups
        self.by_name = {g.name: g for g in groups}

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    def parameter_groups(self) -> list[ParameterGroup]:
        return list(self.groups)

    def shared_names(self) -> list[str]:
        return [g.name for g in self.groups if g.shared]

    def params(self) -> dict[str, np.ndarray]:
        return {g.name: g.value for g in self.groups}

    def state_copy(self) -> dict[str, np.ndarray]:
        return {g.name: g.value.copy() for g in self.groups}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for g in self.groups:
            g.value[...] = state[g.name]

    # -- graph -------------------------------------------------------------

    def _check_ids(self, users: np.ndarray, items: np.ndarray) -> None:
        for kind, ids, bound in (("user", users, self.config.n_users), ("item", items, self.config.n_items)):
            bad = np.flatnonzero((ids < 0) | (ids >= bound))
            if bad.size:
                r = int(bad[0])
                raise DataError(f"record {r}: {kind} id {int(ids[r])} outside [0, {bound})")

    def logits(self, p: dict[str, Tensor], users, items, tasks=None, rows=None) -> list[Tensor]:
        """Build the graph on the tape behind ``p`` and return one (B,) logit tensor per task.

        ``rows`` (one index array per task) restricts each tower to those
        records; its logits then have shape (len(rows[t]),).
        """
        c = self.config
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_ids(users, items)
        u = ad.embedding(p["user_embedding"], users)
        v = ad.embedding(p["item_embedding"], items)
        mf = ad.mul(u, v)
        h = ad.concat([u, v], axis=1)
        for i in range(len(c.shared_layers)):
            h = ad.relu(ad.affine(h, p[f"shared_mlp.{i}.weight"], p[f"shared_mlp.{i}.bias"]))
            h = ad.dropout(h, c.dropout)
        fused = ad.concat([mf, h], axis=1)
        out = []
        for t in range(c.n_tasks) if tasks is None else tasks:
            z = fused if rows is None else ad.embedding(fused, rows[t])
            for i in range(len(c.tower_layers)):
                z = ad.relu(ad.affine(z, p[f"tower{t}.{i}.weight"], p[f"tower{t}.{i}.bias"]))
                z = ad.dropout(z, c.dropout)
            z = ad.affine(z, p[f"tower{t}.out.weight"], p[f"tower{t}.out.bias"])
            out.append(ad.reshape(z, (z.shape[0],)))
        return out

    def predict(self, users, items, mode: str = "eval", seed: int | None = None) -> np.ndarray:
        """Per-task logits, shape (B, n_tasks); scalar ids give shape (n_tasks,)."""
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        scalar = np.ndim(users) == 0
        users, items = np.atleast_1d(users), np.atleast_1d(items)
        tape = Tape(seed=seed, train=mode == "train", record=False)
        p = {g.name: tape.watch(g) for g in self.groups}
        out = np.stack([z.data for z in self.logits(p, users, items)], axis=1)
        return out[0] if scalar else out

    def scores(self, users, items, task: int = 0) -> np.ndarray:
        """Eval-mode probabilities of one task for aligned (user, item) arrays."""
        tape = Tape(train=False, record=False)
        p = {g.name: tape.watch(g) for g in self.groups}
        (z,) = self.logits(p, users, items, tasks=[task])
        return ad._sigmoid(z.data)

    def batch_losses(
        self,
        batch: Batch,
        seed: int | None = None,
        loss_scales=None,
        train: bool = True,
    ) -> tuple[TaskLosses, Tape]:
        """One forward pass; returns per-task masked-mean BCE losses and the tape.

        ``loss_scales`` (one multiplier per task) is applied on the tape, so the
        backward pass sees the scaled losses.
        """
        if len(batch) == 0:
            raise ContractViolation("batch_losses: empty batch")
        T = self.n_tasks
        if batch.labels.shape != (len(batch), T) or batch.mask.shape != (len(batch), T):
            raise ConfigurationError(f"batch labels/mask must have shape ({len(batch)}, {T})")
        tape = Tape(seed=seed, train=train)
        p = {g.name: tape.watch(g) for g in self.groups}
        # each tower only sees the records supervised for its task
        rows = [np.flatnonzero(batch.mask[:, t]) for t in range(T)]
        logits = self.logits(p, batch.users, batch.items, rows=rows)
        losses = []
        for t, z in enumerate(logits):
            if rows[t].size == 0:
                losses.append(tape.constant(np.zeros(())))
                continue
            loss = ad.bce_with_logits(z, batch.labels[rows[t], t], batch.mask[rows[t], t])
            if loss_scales is not None and loss_scales[t] != 1.0:
                loss = ad.scale(loss, loss_scales[t])
            losses.append(loss)
        return TaskLosses(losses), tape


def parameter_groups(model: MultiTaskModel) -> list[ParameterGroup]:
    return model.parameter_groups()


def save_checkpoint(model: MultiTaskModel, path: str | Path, metadata: dict | None = None) -> None:
    """Write an ``.npz`` with every group plus a JSON header (version, names, shapes, scopes)."""
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "groups": [{"name": g.name, "shape": list(g.value.shape), "scope": g.scope} for g in model.groups],
        "metadata": metadata or {},
    }
    arrays = {f"param/{g.name}": g.value for g in model.groups}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[MultiTaskModel, dict]:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {header.get('version')}")
        model = MultiTaskModel(ModelConfig(**header["model_config"]))
        for spec in header["groups"]:
            g = model.by_name.get(spec["name"])
            if g is None or g.scope != spec["scope"] or list(g.value.shape) != spec["shape"]:
                raise ConfigurationError(f"checkpoint group {spec['name']} does not match the model layout")
            g.value[...] = npz[f"param/{spec['name']}"]
    return model, header["metadata"]
