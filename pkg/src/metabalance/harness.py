"""Experiment driver.

Each training iteration runs one forward pass, one backward pass per task on
the shared tape, the configured balancing method, the gradient sum and the
optimizer update, in that order. Validation target NDCG@10 (configurable)
drives early stopping and every model selection.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import balancer as bal
from . import data as data_mod
from .baselines import build_method
from .config import ExperimentConfig
from .errors import TrainingFault
from .evaluation import evaluate, write_metrics_csv
from .model import Batch, ModelConfig, MultiTaskModel, save_checkpoint
from .optimizers import make_optimizer

log = logging.getLogger(__name__)

PHASES = ("forward", "backward", "balance", "sum", "update")


@dataclass
class Dataset:
    bundle: data_mod.SplitBundle
    synthetic: data_mod.SyntheticSpec | None = None

    def loss_scales(self) -> list[float]:
        if self.synthetic is None:
            return [1.0] * self.bundle.n_tasks
        return self.synthetic.loss_scales(self.bundle.tasks)


@lru_cache(maxsize=8)
def _cached_dataset(key: str) -> Dataset:
    d = json.loads(key)
    aux = d["tasks"][1:] if d.get("tasks") else None
    spec = None
    if d.get("processed"):
        return Dataset(data_mod.load_split(d["processed"]))
    if d.get("synthetic") is not None:
        spec = data_mod.SyntheticSpec(**d["synthetic"])
        table = data_mod.generate_synthetic(spec, seed=d["seed"])
    else:
        table = data_mod.load_interactions(d["path"], d["format"])
    if d["min_user"] or d["min_item"]:
        table = data_mod.filter_by_count(table, d["min_user"], d["min_item"], fixpoint=d["fixpoint"])
    bundle = data_mod.split(table, tuple(d["ratios"]), seed=d["seed"], aux=aux)
    return Dataset(bundle, spec)


def build_dataset(config: ExperimentConfig) -> Dataset:
    return _cached_dataset(json.dumps(asdict(config.dataset), sort_keys=True))


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config: dict
    tasks: list[str]
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("-inf")
    test: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)
    iterations: int = 0

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = asdict(self)
        if not wall_clock:
            d.pop("timing")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def _norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(x.ravel(), x.ravel())))


class _Trace:
    """Per-epoch sums of instantaneous gradient norms, before and after balancing."""

    def __init__(self, groups: list[str], n_tasks: int):
        self.groups = groups
        self.n_tasks = n_tasks
        self.reset()

    def reset(self):
        self.pre = np.zeros((len(self.groups), self.n_tasks))
        self.post = np.zeros_like(self.pre)
        self.count = 0

    def add(self, pre_sets, post_sets):
        for gi, g in enumerate(self.groups):
            for t in range(self.n_tasks):
                self.pre[gi, t] += _norm(pre_sets[t][g])
                self.post[gi, t] += _norm(post_sets[t][g])
        self.count += 1

    def rows(self, epoch: int) -> list[dict]:
        n = max(self.count, 1)
        return [
            {"epoch": epoch, "group": g, "task": t, "pre_mean": self.pre[gi, t] / n, "post_mean": self.post[gi, t] / n}
            for gi, g in enumerate(self.groups) for t in range(self.n_tasks)
        ]


def _evaluate(model, bundle, split: str, config: ExperimentConfig, exclude):
    res = evaluate(model, bundle.truth(split), bundle.n_items, ks=config.training.eval_ks,
                   exclude=exclude, workers=config.training.eval_workers)
    return res


def _build_model(config: ExperimentConfig, bundle, seed: int) -> MultiTaskModel:
    m = config.model
    mc = ModelConfig(bundle.n_users, bundle.n_items, bundle.n_tasks, m.embedding_dim, tuple(m.shared_layers),
                     tuple(m.tower_layers), m.dropout, m.embedding_std)
    return MultiTaskModel(mc, seed=seed)


def train_step(model, batch: Batch, method, optimizer, seed, loss_scales, weight_decay: float = 0.0,
               timing: dict | None = None, trace: _Trace | None = None):
    """One iteration; returns the per-task loss values (after loss scaling)."""
    t0 = time.perf_counter()
    losses, tape = model.batch_losses(batch, seed=seed, loss_scales=loss_scales)
    if not np.isfinite(losses.values).all():
        raise TrainingFault(f"non-finite task losses {losses.values.tolist()}")
    t1 = time.perf_counter()
    grads = [ad.backward(tape, loss, task=t) for t, loss in enumerate(losses.tensors)]
    if weight_decay:
        for g in model.groups:
            grads[0][g.name] = grads[0][g.name] + weight_decay * g.value
    t2 = time.perf_counter()
    target, aux = method.balance(grads[0], grads[1:], losses.values)
    t3 = time.perf_counter()
    total = bal.sum_gradients(target, aux)
    t4 = time.perf_counter()
    optimizer.apply_update(model.params(), total)
    t5 = time.perf_counter()
    if timing is not None:
        for name, dt in zip(PHASES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4)):
            timing[name] = timing.get(name, 0.0) + dt
    if trace is not None:
        trace.add(grads, [target, *aux])
    return losses.values


def train(config: ExperimentConfig, seed: int | None = None, dataset: Dataset | None = None,
          output_dir: str | Path | None = None) -> RunRecord:
    seed = config.seed if seed is None else seed
    dataset = dataset or build_dataset(config)
    bundle = dataset.bundle
    tc = config.training
    model = _build_model(config, bundle, seed)
    shared = model.shared_names()
    method = build_method(config.method.name, shared, bundle.n_tasks, config.method.params)
    optimizer = make_optimizer(config.optimizer.name, **config.optimizer.params)
    base_scales = np.array(dataset.loss_scales(), dtype=float)
    if tc.loss_scales is not None:
        base_scales = base_scales * np.asarray(tc.loss_scales, dtype=float)
    jitter = tc.loss_jitter if tc.loss_jitter is not None else (dataset.synthetic.loss_jitter if dataset.synthetic else 0.0)
    exclude = bundle.train_positives(0) if tc.candidates == "mask-train-positives" else None
    metric, k = config.select

    rng = np.random.default_rng([seed, 1])
    record = RunRecord(config.run_id, seed, config.to_dict(), list(bundle.tasks))
    timing = {p: 0.0 for p in PHASES}
    timing["eval"] = 0.0
    tracer = _Trace(shared, bundle.n_tasks) if config.trace else None
    best_state = model.state_copy()
    for epoch in range(1, tc.max_epochs + 1):
        loss_sum = np.zeros(bundle.n_tasks)
        n_iter = 0
        if tracer:
            tracer.reset()
        for batch in data_mod.iter_batches(bundle, tc.batch_size, tc.negatives, seed=int(rng.integers(2**63))):
            scales = base_scales
            if jitter:
                scales = base_scales * np.exp(jitter * rng.standard_normal(bundle.n_tasks) - 0.5 * jitter ** 2)
            step_seed = int(rng.integers(2**63))
            try:
                values = train_step(model, batch, method, optimizer, step_seed, scales, tc.weight_decay,
                                    timing, tracer)
            except TrainingFault as exc:
                raise TrainingFault(f"epoch {epoch}, iteration {n_iter + 1}: {exc}") from None
            loss_sum += values / np.where(scales > 0, scales, 1.0)
            n_iter += 1
        record.iterations += n_iter
        t0 = time.perf_counter()
        valid = _evaluate(model, bundle, "valid", config, exclude)
        timing["eval"] += time.perf_counter() - t0
        score = valid.get(metric, k)
        record.epochs.append({"epoch": epoch, "losses": (loss_sum / max(n_iter, 1)).tolist(), "valid": valid.flat()})
        if tracer:
            record.trace.extend(tracer.rows(epoch))
        if score > record.best_valid:
            record.best_valid, record.best_epoch = score, epoch
            best_state = model.state_copy()
        elif epoch - record.best_epoch >= tc.patience:
            break
    model.load_state(best_state)
    record.test = _evaluate(model, bundle, "test", config, exclude).flat()
    record.timing = timing
    out = output_dir or config.output_dir
    if out:
        write_outputs(record, model, out)
    return record


def write_outputs(record: RunRecord, model: MultiTaskModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{record.run_id}-seed{record.seed}"
    (out / f"{tag}.record.json").write_text(record.to_json())
    save_checkpoint(model, out / f"{tag}.npz", {"config": record.config, "run_id": record.run_id, "seed": record.seed})
    with open(out / f"{tag}.metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "epoch", "metric", "K", "value"])
        for ep in record.epochs:
            for key, v in ep["valid"].items():
                m, k = key.split("@")
                w.writerow([record.run_id, ep["epoch"], f"valid_{m}", k, repr(v)])
        for key, v in record.test.items():
            m, k = key.split("@")
            w.writerow([record.run_id, record.best_epoch, f"test_{m}", k, repr(v)])
    if record.trace:
        (out / f"{tag}.trace.csv").write_text(trace_magnitudes(record))


TRACE_FIELDS = ("epoch", "group", "task", "pre_mean", "post_mean")


def trace_magnitudes(run: RunRecord) -> str:
    """Trace rows as CSV text: per epoch, shared group and task, mean gradient norm pre/post balancing."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_FIELDS)
    w.writeheader()
    for row in run.trace:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def magnitude_ratios(run: RunRecord, stage: str = "post", epochs=None) -> np.ndarray:
    """Ratio of each task's mean norm to the target's, averaged over shared groups (geometric) and epochs.

    Returns an array of length n_tasks (entry 0 is 1).
    """
    col = f"{stage}_mean"
    rows = [r for r in run.trace if epochs is None or r["epoch"] in epochs]
    groups = sorted({r["group"] for r in rows})
    eps_ = sorted({r["epoch"] for r in rows})
    n_tasks = len(run.tasks)
    table = {(r["epoch"], r["group"], r["task"]): r[col] for r in rows}
    logs = np.zeros(n_tasks)
    n = 0
    for e in eps_:
        for g in groups:
            tar = table[(e, g, 0)]
            if tar <= 0:
                continue
            logs += np.log(np.maximum([table[(e, g, t)] for t in range(n_tasks)], 1e-300) / tar)
            n += 1
    return np.exp(logs / max(n, 1))


# ---------------------------------------------------------------------------
# sweeps and multi-seed runs


def _run_one(args):
    config_dict, seed = args
    return train(ExperimentConfig.from_dict(config_dict), seed=seed).to_dict()


def run_seeds(config: ExperimentConfig, seeds=None, workers: int = 1) -> list[RunRecord]:
    seeds = list(config.seeds if seeds is None else seeds)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            dicts = list(pool.map(_run_one, [(config.to_dict(), s) for s in seeds]))
        return [RunRecord(**d) for d in dicts]
    return [train(config, seed=s) for s in seeds]


def median_valid(records: list[RunRecord]) -> float:
    return float(statistics.median(r.best_valid for r in records))


@dataclass
class SweepResult:
    best: dict
    points: list[dict]
    test: dict
    records: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"best": self.best, "points": self.points, "test": self.test}


def sweep(config: ExperimentConfig, seeds=None) -> SweepResult:
    """Train every (strategy, relax factor) grid point from scratch over the seeds.

    The winner maximises the median validation metric (first grid point wins
    ties); its test metrics are medians over its own runs, each evaluated at
    that run's early-stopping checkpoint.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    grid = [(s, float(r)) for s in config.sweep.strategies for r in config.sweep.relax_factors]
    points, records = [], {}
    for strategy, r in grid:
        params = {**config.method.params, "strategy": strategy, "relax_factor": r}
        cfg = config.replace(**{"method.name": "metabalance", "method.params": params,
                                "run_id": f"{config.run_id}-{strategy}-r{r:g}"})
        recs = run_seeds(cfg, seeds, config.sweep.workers)
        records[(strategy, r)] = recs
        points.append({"strategy": strategy, "relax_factor": r, "valid": median_valid(recs),
                       "valid_per_seed": [x.best_valid for x in recs]})
        log.info("sweep %s r=%g: median valid %.5f", strategy, r, points[-1]["valid"])
    best = max(points, key=lambda p: p["valid"])  # max keeps the first of equal maxima
    recs = records[(best["strategy"], best["relax_factor"])]
    test = {k: float(statistics.median(x.test[k] for x in recs)) for k in recs[0].test}
    return SweepResult(best, points, test, records)


# ---------------------------------------------------------------------------
# overhead benchmark


def random_batch(n_users: int, n_items: int, n_tasks: int, records: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    task = rng.integers(0, n_tasks, records)
    mask = np.zeros((records, n_tasks))
    mask[np.arange(records), task] = 1.0
    labels = mask * (rng.random((records, 1)) < 0.2)
    return Batch(rng.integers(0, n_users, records), rng.integers(0, n_items, records), labels, mask)


def benchmark_overhead(config: ExperimentConfig, n_tasks: int = 4, iterations: int = 30, records: int = 1280,
                       n_users: int = 300, n_items: int = 200, seed: int = 0, warmup: int = 3) -> dict:
    """Time each phase of ``iterations`` training steps on a fixed random workload."""
    m = config.model
    mc = ModelConfig(n_users, n_items, n_tasks, m.embedding_dim, tuple(m.shared_layers), tuple(m.tower_layers),
                     m.dropout, m.embedding_std)
    model = MultiTaskModel(mc, seed=seed)
    method = build_method(config.method.name, model.shared_names(), n_tasks, config.method.params)
    optimizer = make_optimizer(config.optimizer.name, **config.optimizer.params)
    batches = [random_batch(n_users, n_items, n_tasks, records, seed + i) for i in range(iterations + warmup)]
    scales = np.ones(n_tasks)
    timing = {p: 0.0 for p in PHASES}
    for i, b in enumerate(batches):
        train_step(model, b, method, optimizer, i, scales, config.training.weight_decay,
                   timing if i >= warmup else None)
    step = sum(timing.values())
    state_bytes = method.state_nbytes() if hasattr(method, "state_nbytes") else 0
    return {
        "method": config.method.name, "n_tasks": n_tasks, "iterations": iterations,
        "seconds": timing, "step_seconds": step,
        "balance_share": timing["balance"] / step if step else 0.0,
        "balancer_state_bytes": state_bytes,
    }


def write_metrics(fh, record: RunRecord) -> None:
    for i, ep in enumerate(record.epochs):
        metrics = {tuple((k.split("@")[0], int(k.split("@")[1]))): v for k, v in ep["valid"].items()}
        write_metrics_csv(fh, record.run_id, ep["epoch"], metrics, header=i == 0)
