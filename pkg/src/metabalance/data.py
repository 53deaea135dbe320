"""Implicit-feedback interactions: ingestion, filtering, splitting, sampling.

Pipeline for a public log::

    table = load_interactions(path, "userbehavior2017")
    table = filter_by_count(table, min_user=10, min_item=10)
    bundle = split(table, seed=0)
    for batch in iter_batches(bundle, batch_size=256, negatives=4, seed=epoch_seed): ...

``generate_synthetic`` produces a table with a planted preference model for
desk-scale experiments.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigurationError, DataError, EmptyDatasetError
from .model import Batch

log = logging.getLogger(__name__)

BEHAVIORS = ("purchase", "click", "add-to-cart", "add-to-favorite")
TARGET = "purchase"


@dataclass
class InteractionTable:
    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray  # codes into behavior_names
    behavior_names: tuple[str, ...] = BEHAVIORS
    timestamps: np.ndarray | None = None
    user_labels: np.ndarray | None = None  # dense index -> raw id
    item_labels: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.behaviors = np.asarray(self.behaviors, dtype=np.int64)
        self.behavior_names = tuple(self.behavior_names)
        if self.user_labels is None:
            self.user_labels = np.arange(self.users.max() + 1 if len(self.users) else 0)
        if self.item_labels is None:
            self.item_labels = np.arange(self.items.max() + 1 if len(self.items) else 0)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_labels)

    @property
    def n_items(self) -> int:
        return len(self.item_labels)

    def code(self, behavior: str) -> int:
        try:
            return self.behavior_names.index(behavior)
        except ValueError:
            raise ConfigurationError(f"behavior {behavior!r} not in {self.behavior_names}") from None

    def select(self, keep: np.ndarray) -> "InteractionTable":
        return InteractionTable(
            self.users[keep], self.items[keep], self.behaviors[keep], self.behavior_names,
            None if self.timestamps is None else self.timestamps[keep], self.user_labels, self.item_labels,
        )

    def rows(self, behavior: str) -> "InteractionTable":
        return self.select(self.behaviors == self.code(behavior))

    def dedup(self) -> "InteractionTable":
        """Keep the first (earliest if timestamped) record per (user, item, behavior)."""
        order = np.arange(len(self)) if self.timestamps is None else np.argsort(self.timestamps, kind="stable")
        key = np.stack([self.users[order], self.items[order], self.behaviors[order]], axis=1)
        _, first = np.unique(key, axis=0, return_index=True)
        return self.select(np.sort(order[first]))

    def reindex(self) -> "InteractionTable":
        """Make user and item ids dense, keeping raw labels of the survivors."""
        u_old, users = np.unique(self.users, return_inverse=True)
        i_old, items = np.unique(self.items, return_inverse=True)
        return InteractionTable(users, items, self.behaviors, self.behavior_names, self.timestamps,
                                self.user_labels[u_old], self.item_labels[i_old])

    def pair_keys(self, n_items: int | None = None) -> np.ndarray:
        return self.users * (n_items or self.n_items) + self.items


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class FormatDescriptor:
    """Column layout of a delimiter-separated log.

    ``columns`` maps user/item/behavior[/timestamp] to a column index or, with
    a header, a column name. ``behavior_map`` translates raw labels to
    canonical behavior names; unmapped labels are rejected.
    """

    columns: dict
    behavior_map: dict
    delimiter: str = ","
    header: bool = False

    @classmethod
    def load(cls, spec) -> "FormatDescriptor":
        if isinstance(spec, FormatDescriptor):
            return spec
        if isinstance(spec, Mapping):
            return cls(**spec)
        path = Path(str(spec))
        if not path.exists():
            name = f"{spec}.yaml"
            try:
                text = resources.files("metabalance").joinpath("formats", name).read_text()
            except FileNotFoundError:
                raise ConfigurationError(f"unknown format descriptor {spec!r}") from None
        else:
            text = path.read_text()
        return cls(**yaml.safe_load(text))


def load_interactions(path: str | Path, fmt, id_map_dir: str | Path | None = None) -> InteractionTable:
    fmt = FormatDescriptor.load(fmt)
    bmap = {str(k): v for k, v in fmt.behavior_map.items()}
    for v in bmap.values():
        if v not in BEHAVIORS:
            raise ConfigurationError(f"format maps to unknown behavior {v!r}")
    users, items, behs, stamps = [], [], [], []
    cols = dict(fmt.columns)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        if fmt.header:
            head = next(reader, [])
            cols = {k: head.index(v) if isinstance(v, str) else v for k, v in cols.items()}
        has_ts = "timestamp" in cols
        need = max(cols.values()) + 1
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < need:
                raise DataError(f"{path}:{line}: expected at least {need} columns, got {len(row)}")
            label = row[cols["behavior"]].strip()
            if label not in bmap:
                raise DataError(f"{path}:{line}: unknown behavior label {label!r}")
            users.append(row[cols["user"]].strip())
            items.append(row[cols["item"]].strip())
            behs.append(BEHAVIORS.index(bmap[label]))
            if has_ts:
                try:
                    stamps.append(float(row[cols["timestamp"]]))
                except ValueError:
                    raise DataError(f"{path}:{line}: bad timestamp {row[cols['timestamp']]!r}") from None
    if not users:
        raise EmptyDatasetError(f"{path}: no interactions")
    u_labels, u_idx = np.unique(np.array(users), return_inverse=True)
    i_labels, i_idx = np.unique(np.array(items), return_inverse=True)
    table = InteractionTable(u_idx, i_idx, behs, BEHAVIORS, np.array(stamps) if has_ts else None,
                             u_labels, i_labels).dedup().reindex()
    if id_map_dir is not None:
        save_id_maps(table, id_map_dir)
    return table


def save_id_maps(table: InteractionTable, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, labels in (("user_map.csv", table.user_labels), ("item_map.csv", table.item_labels)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "raw_id"])
            w.writerows(enumerate(labels.tolist()))


def filter_by_count(
    table: InteractionTable,
    min_user: int,
    min_item: int,
    behavior: str = TARGET,
    fixpoint: bool = True,
) -> InteractionTable:
    """Drop users with < ``min_user`` distinct purchased items and items with < ``min_item`` purchasers.

    Counts use ``behavior`` records only; removal drops every behavior of the
    user or item. With ``fixpoint`` the two rules are re-applied until stable.
    """
    if min_user < 0 or min_item < 0:
        raise ConfigurationError("count thresholds must be >= 0")
    code = table.code(behavior)
    t = table.dedup()
    while True:
        buy = t.behaviors == code
        u_cnt = np.bincount(t.users[buy], minlength=t.n_users)
        i_cnt = np.bincount(t.items[buy], minlength=t.n_items)
        keep = (u_cnt[t.users] >= min_user) & (i_cnt[t.items] >= min_item)
        if keep.all():
            break
        t = t.select(keep)
        if not fixpoint:
            break
    if len(t) == 0:
        raise EmptyDatasetError(f"no interactions left after filtering (min_user={min_user}, min_item={min_item})")
    return t.reindex()


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitBundle:
    train: InteractionTable
    valid: np.ndarray  # (n, 2) target (user, item) pairs
    test: np.ndarray
    tasks: tuple[str, ...]  # task order; tasks[0] is the target
    seed: int = 0

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def truth(self, which: str) -> dict[int, set[int]]:
        pairs = {"valid": self.valid, "test": self.test}[which]
        out: dict[int, set[int]] = {}
        for u, i in pairs.tolist():
            out.setdefault(u, set()).add(i)
        return out

    def train_positives(self, task: int = 0) -> dict[int, set[int]]:
        t = self.train.rows(self.tasks[task])
        out: dict[int, set[int]] = {}
        for u, i in zip(t.users.tolist(), t.items.tolist()):
            out.setdefault(u, set()).add(i)
        return out

    @cached_property
    def positives(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Training positives as (users, items, task index); behaviors outside ``tasks`` dropped."""
        codes = np.array([self.train.code(b) for b in self.tasks])
        task_of = np.full(len(self.train.behavior_names), -1)
        task_of[codes] = np.arange(len(codes))
        t = task_of[self.train.behaviors]
        keep = t >= 0
        return self.train.users[keep], self.train.items[keep], t[keep]

    @cached_property
    def _known(self) -> list[np.ndarray]:
        u, i, t = self.positives
        keys = u * self.n_items + i
        return [np.unique(keys[t == k]) for k in range(self.n_tasks)]


def split(
    table: InteractionTable,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    target: str = TARGET,
    aux: Sequence[str] | None = None,
) -> SplitBundle:
    """Random train/valid/test split of target pairs; auxiliary records go to train.

    Auxiliary records whose (user, item) pair appears among validation or test
    target pairs are then removed from train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    table = table.dedup()
    code = table.code(target)
    if aux is None:
        present = set(np.unique(table.behaviors).tolist())
        aux = [b for i, b in enumerate(table.behavior_names) if i != code and i in present]
    tasks = (target, *aux)
    is_tar = table.behaviors == code
    tar_idx = np.flatnonzero(is_tar)
    rng = np.random.default_rng(seed)
    perm = tar_idx[rng.permutation(len(tar_idx))]
    n = len(perm)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    held = np.concatenate([table.pair_keys()[va], table.pair_keys()[te]])
    aux_codes = [table.code(b) for b in aux]
    aux_rows = np.flatnonzero(np.isin(table.behaviors, aux_codes) & ~np.isin(table.pair_keys(), held))
    train = table.select(np.sort(np.concatenate([tr, aux_rows])))
    pairs = lambda idx: np.stack([table.users[np.sort(idx)], table.items[np.sort(idx)]], axis=1)
    return SplitBundle(train, pairs(va), pairs(te), tasks, seed)


def save_split(bundle: SplitBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = bundle.train
    with open(out / "train.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "behavior"])
        w.writerows(zip(t.users.tolist(), t.items.tolist(), [t.behavior_names[b] for b in t.behaviors]))
    for name, pairs in (("valid.csv", bundle.valid), ("test.csv", bundle.test)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "item"])
            w.writerows(pairs.tolist())
    save_id_maps(t, out)
    manifest = {"tasks": list(bundle.tasks), "n_users": bundle.n_users, "n_items": bundle.n_items,
                "train": len(t), "valid": len(bundle.valid), "test": len(bundle.test), "seed": bundle.seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_split(in_dir: str | Path) -> SplitBundle:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())

    def read(name):
        with open(d / name, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return rows

    tr = read("train.csv")
    labels = lambda name: np.array([r[1] for r in read(name)], dtype=object)
    train = InteractionTable(
        [int(r[0]) for r in tr], [int(r[1]) for r in tr], [BEHAVIORS.index(r[2]) for r in tr], BEHAVIORS,
        None, labels("user_map.csv"), labels("item_map.csv"))
    pairs = lambda name: np.array([[int(a), int(b)] for a, b in read(name)], dtype=np.int64).reshape(-1, 2)
    return SplitBundle(train, pairs("valid.csv"), pairs("test.csv"), tuple(manifest["tasks"]), manifest["seed"])


# ---------------------------------------------------------------------------
# sampling


def _draw_negatives(bundle: SplitBundle, users, tasks, rng, max_rounds: int = 50):
    """Uniform negatives per (user, task); returns (items, ok) with ok False where the cap was hit."""
    n_items = bundle.n_items
    items = rng.integers(0, n_items, size=len(users))
    bad = np.ones(len(users), dtype=bool)
    for _ in range(max_rounds):
        keys = users * n_items + items
        bad[:] = False
        for k, known in enumerate(bundle._known):
            sel = tasks == k
            if sel.any() and known.size:
                pos = np.searchsorted(known, keys[sel])
                pos = np.minimum(pos, known.size - 1)
                bad[sel] = known[pos] == keys[sel]
        if not bad.any():
            break
        items[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    return items, ~bad


def _make_batch(bundle: SplitBundle, pos_idx: np.ndarray, negatives: int, rng) -> Batch:
    pu, pi, pt = bundle.positives
    u, i, t = pu[pos_idx], pi[pos_idx], pt[pos_idx]
    nu = np.repeat(u, negatives)
    nt = np.repeat(t, negatives)
    ni, ok = _draw_negatives(bundle, nu, nt, rng)
    if not ok.all():
        log.warning("skipped %d negatives: users interact with every item under that behavior", int((~ok).sum()))
        nu, ni, nt = nu[ok], ni[ok], nt[ok]
    users = np.concatenate([u, nu])
    items = np.concatenate([i, ni])
    task = np.concatenate([t, nt])
    T = bundle.n_tasks
    mask = np.zeros((len(users), T))
    mask[np.arange(len(users)), task] = 1.0
    labels = np.zeros((len(users), T))
    labels[np.arange(len(u)), t] = 1.0
    return Batch(users, items, labels, mask)


def sample_batch(bundle: SplitBundle, batch_size: int, negatives: int = 4, seed: int | None = None) -> Batch:
    """``batch_size`` training positives drawn without replacement, each followed by ``negatives`` negatives."""
    if batch_size <= 0:
        raise ConfigurationError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    n = len(bundle.positives[0])
    idx = rng.choice(n, size=min(batch_size, n), replace=False)
    return _make_batch(bundle, idx, negatives, rng)


def iter_batches(bundle: SplitBundle, batch_size: int, negatives: int = 4, seed: int | None = None) -> Iterator[Batch]:
    """One epoch: every training positive exactly once, shuffled, in chunks of ``batch_size``."""
    if batch_size <= 0:
        raise ConfigurationError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(bundle.positives[0]))
    for start in range(0, len(perm), batch_size):
        yield _make_batch(bundle, perm[start:start + batch_size], negatives, rng)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Planted-preference multi-behavior data.

    Each behavior's affinity matrix mixes the purchase affinity (weight
    ``correlation``) with an independent low-rank component, so auxiliary
    behaviors carry transferable signal. Each user gets ``density * n_items``
    items per behavior, sampled without replacement in proportion to
    ``exp(affinity / temperature)``.

    ``imbalance`` multiplies the loss of ``imbalance_task`` (and its density by
    ``imbalance ** frequency_exponent``) so its gradients dominate.
    ``loss_jitter`` is the log-std of a per-batch multiplicative loss-scale
    noise applied by the trainer to every task.
    """

    n_users: int = 300
    n_items: int = 200
    latent_dim: int = 4
    densities: dict = field(default_factory=lambda: {
        "purchase": 0.05, "click": 0.15, "add-to-cart": 0.03, "add-to-favorite": 0.03})
    correlations: dict = field(default_factory=lambda: {
        "click": 0.7, "add-to-cart": 0.8, "add-to-favorite": 0.6})
    temperature: float = 0.5
    popularity_std: float = 0.5
    imbalance: float = 1.0
    imbalance_task: str = "click"
    frequency_exponent: float = 0.0
    loss_jitter: float = 0.0

    def __post_init__(self):
        for b, d in self.densities.items():
            if b not in BEHAVIORS:
                raise ConfigurationError(f"unknown behavior {b!r} in synthetic densities")
            if not 0.0 < d <= 1.0:
                raise ConfigurationError(f"density of {b} must be in (0, 1], got {d}")
        if TARGET not in self.densities:
            raise ConfigurationError("synthetic spec needs a purchase density")
        if self.imbalance <= 0:
            raise ConfigurationError("imbalance must be positive")

    @property
    def behaviors(self) -> list[str]:
        return [b for b in BEHAVIORS if b in self.densities]

    def effective_density(self, behavior: str) -> float:
        d = self.densities[behavior]
        if behavior == self.imbalance_task:
            d *= self.imbalance ** self.frequency_exponent
        return min(d, 1.0)

    def loss_scales(self, tasks: Sequence[str]) -> list[float]:
        return [self.imbalance if t == self.imbalance_task else 1.0 for t in tasks]

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> InteractionTable:
    rng = np.random.default_rng(seed)
    U, I, d = spec.n_users, spec.n_items, spec.latent_dim

    def low_rank():
        a = rng.normal(size=(U, d)) @ rng.normal(size=(d, I)) / np.sqrt(d)
        return a

    base = low_rank() + rng.normal(0.0, spec.popularity_std, size=(1, I))
    base = (base - base.mean()) / base.std()
    users, items, behs = [], [], []
    for b in spec.behaviors:
        if b == TARGET:
            aff = base
        else:
            rho = spec.correlations.get(b, 0.0)
            own = low_rank()
            own = (own - own.mean()) / own.std()
            aff = rho * base + np.sqrt(max(0.0, 1.0 - rho * rho)) * own
        k = max(1, int(round(spec.effective_density(b) * I)))
        keys = aff / spec.temperature + rng.gumbel(size=(U, I))
        chosen = np.argpartition(-keys, k - 1, axis=1)[:, :k] if k < I else np.tile(np.arange(I), (U, 1))
        users.append(np.repeat(np.arange(U), k))
        items.append(np.sort(chosen, axis=1).ravel())
        behs.append(np.full(U * k, BEHAVIORS.index(b)))
    return InteractionTable(np.concatenate(users), np.concatenate(items), np.concatenate(behs), BEHAVIORS,
                            None, np.arange(U), np.arange(I))
