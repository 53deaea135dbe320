import numpy as np
import pytest

from metabalance import autodiff as ad
from metabalance.errors import ContractViolation, DataError
from metabalance.model import Batch, ModelConfig, MultiTaskModel, load_checkpoint, save_checkpoint


def tiny(dropout=0.5, seed=0, tasks=4):
    return MultiTaskModel(ModelConfig(10, 10, tasks, embedding_dim=4, dropout=dropout), seed=seed)


def full_batch(n=12, tasks=4, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((n, tasks))
    mask[np.arange(n), np.arange(n) % tasks] = 1.0
    labels = mask * (rng.random((n, 1)) < 0.5)
    return Batch(rng.integers(0, 10, n), rng.integers(0, 10, n), labels, mask)


def test_zero_parameters_give_zero_logits():
    m = tiny()
    for g in m.groups:
        g.value[...] = 0.0
    np.testing.assert_array_equal(m.predict([1, 2], [3, 4], mode="train", seed=1), np.zeros((2, 4)))
    np.testing.assert_array_equal(m.scores(np.array([1]), np.array([3])), [0.5])


def test_train_mode_deterministic_per_seed_and_dropout_semantics():
    m = tiny()
    u, i = np.arange(10), np.arange(10)[::-1]
    np.testing.assert_array_equal(m.predict(u, i, "train", 3), m.predict(u, i, "train", 3))
    assert not np.array_equal(m.predict(u, i, "train", 3), m.predict(u, i, "eval"))
    m0 = tiny(dropout=0.0)
    np.testing.assert_array_equal(m0.predict(u, i, "train", 3), m0.predict(u, i, "eval"))


def test_out_of_range_id_names_record():
    with pytest.raises(DataError, match="record 1"):
        tiny().predict([0, 10], [0, 0])


def test_default_parameter_groups():
    m = MultiTaskModel(ModelConfig(5, 6), seed=0)
    names = [g.name for g in m.groups]
    assert len(names) == len(set(names))
    shared = m.shared_names()
    assert shared == ["user_embedding", "item_embedding"] + [f"shared_mlp.{i}.{k}" for i in range(3) for k in ("weight", "bias")]
    assert len(names) == 8 + 4 * 6
    assert m.groups[0].value.shape == (5, 64) and m.groups[2].value.shape == (128, 32)
    assert all(g.scope == "shared" for g in m.groups[:8])
    assert {g.value.shape for g in m.groups if g.name.startswith("tower0.0.weight")} == {(72, 64)}
    assert names == [g.name for g in MultiTaskModel(ModelConfig(5, 6), seed=9).groups]


def test_bce_zero_logit_and_masked_out_task():
    m = tiny()
    for g in m.groups:
        g.value[...] = 0.0
    b = full_batch()
    b.labels[:] = b.mask
    b.mask[:, 2] = 0.0
    losses, tape = m.batch_losses(b, seed=0)
    assert losses.values[0] == pytest.approx(np.log(2.0))
    assert losses.values[2] == 0.0
    g2 = ad.backward(tape, losses.tensors[2])
    assert all(not v.any() for v in g2.values())


def test_empty_batch_rejected():
    with pytest.raises(ContractViolation):
        tiny().batch_losses(Batch(np.array([], int), np.array([], int), np.zeros((0, 4)), np.zeros((0, 4))))


def test_tower_isolation_and_shared_wiring():
    m = tiny(seed=2)
    losses, tape = m.batch_losses(full_batch(seed=5), seed=1)
    grads = [ad.backward(tape, l, task=t) for t, l in enumerate(losses.tensors)]
    for t, g in enumerate(grads):
        for name, arr in g.items():
            if name.startswith("tower") and not name.startswith(f"tower{t}."):
                assert not arr.any()
        for name in m.shared_names():
            if name.endswith("weight") or "embedding" in name:
                assert np.abs(g[name]).sum() > 0, (t, name)


def test_permutation_invariance():
    m = tiny(seed=4)
    u, i = np.arange(10), (np.arange(10) * 3) % 10
    perm = np.random.default_rng(0).permutation(10)
    np.testing.assert_allclose(m.predict(u, i)[perm], m.predict(u[perm], i[perm]), rtol=0, atol=1e-15)


def test_full_model_grad_check():
    m = tiny(seed=1)
    b = full_batch(seed=3)

    def graph(xs, ps):
        losses = [ad.bce_with_logits(z, b.labels[:, t], b.mask[:, t])
                  for t, z in enumerate(m.logits(ps, b.users, b.items))]
        total = losses[0]
        for j, l in enumerate(losses[1:], 2):
            total = ad.add(total, ad.scale(l, j))
        return total

    rep = ad.grad_check(graph, m.groups, tolerance=1e-4, seed=11, max_entries=25)
    assert rep.passed, rep.per_group


def test_checkpoint_round_trip(tmp_path):
    m = tiny(seed=6)
    save_checkpoint(m, tmp_path / "m.npz", {"note": "x"})
    m2, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta["note"] == "x"
    for a, b in zip(m.groups, m2.groups):
        assert a.name == b.name and a.scope == b.scope and np.array_equal(a.value, b.value)
