import logging

import numpy as np
import pytest

from conftest import TOY_FORMAT, labelled
from metabalance import data as d
from metabalance.errors import ConfigurationError, DataError, EmptyDatasetError


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


FMT = {"columns": {"user": 0, "item": 1, "behavior": 2}, "behavior_map": {"buy": "purchase", "pv": "click"}}


def test_load_three_rows_and_dedup(tmp_path):
    t = d.load_interactions(write(tmp_path, "a,x,buy\nb,y,pv\na,y,pv\n"), FMT)
    assert len(t) == 3 and t.n_users == 2 and t.n_items == 2
    t = d.load_interactions(write(tmp_path, "a,x,buy\na,x,buy\n"), FMT)
    assert len(t) == 1


def test_unknown_label_and_malformed_row(tmp_path):
    with pytest.raises(DataError, match=":2: unknown behavior label 'view'"):
        d.load_interactions(write(tmp_path, "a,x,buy\nb,y,view\n"), FMT)
    with pytest.raises(DataError, match=":3:"):
        d.load_interactions(write(tmp_path, "a,x,buy\nb,y,pv\nc,z\n"), FMT)
    with pytest.raises(EmptyDatasetError):
        d.load_interactions(write(tmp_path, "\n"), FMT)


def test_id_maps_written(tmp_path):
    d.load_interactions(write(tmp_path, "a,x,buy\nb,y,pv\n"), FMT, id_map_dir=tmp_path / "maps")
    assert (tmp_path / "maps" / "user_map.csv").read_text().splitlines() == ["index,raw_id", "0,a", "1,b"]


def test_packaged_formats(tmp_path):
    p = write(tmp_path, "user_id,item_id,cat_id,seller_id,brand_id,time_stamp,action_type\n"
                        "1,10,0,0,0,1111,2\n1,11,0,0,0,1111,0\n")
    t = d.load_interactions(p, "ijcai2015")
    assert labelled(t) == [("1", "10", "purchase"), ("1", "11", "click")]
    p = write(tmp_path, "1,10,5,buy,100\n1,11,5,fav,101\n", "ub.csv")
    assert labelled(d.load_interactions(p, "userbehavior2017")) == [("1", "10", "purchase"), ("1", "11", "add-to-favorite")]
    with pytest.raises(ConfigurationError):
        d.FormatDescriptor.load("nope")


def test_dedup_keeps_earliest(toy_path, toy_expected):
    t = d.load_interactions(toy_path, TOY_FORMAT)
    assert len(t) == toy_expected["rows_after_dedup"]
    row = [k for k, (u, i, b) in enumerate(zip(t.users, t.items, t.behaviors))
           if (t.user_labels[u], t.item_labels[i], t.behavior_names[b]) == ("u1", "i1", "purchase")]
    assert len(row) == 1 and t.timestamps[row[0]] == toy_expected["dedup_kept_ts"]


def test_filter_trivial_cases(toy_path):
    t = d.load_interactions(toy_path, TOY_FORMAT)
    assert labelled(d.filter_by_count(t, 0, 0)) == labelled(t)
    single = d.load_interactions(toy_path, TOY_FORMAT).select(np.arange(1))
    with pytest.raises(EmptyDatasetError):
        d.filter_by_count(single, 2, 0)
    with pytest.raises(ConfigurationError):
        d.filter_by_count(t, -1, 0)


def test_filter_chain_and_fixpoint(toy_path, toy_expected):
    t = d.load_interactions(toy_path, TOY_FORMAT)
    f = d.filter_by_count(t, 2, 2)
    exp = toy_expected["fixpoint"]
    assert labelled(f, "purchase") == sorted(map(tuple, exp["purchase"]))
    assert labelled(f, "aux") == sorted(map(tuple, exp["auxiliary"]))
    assert sorted(map(str, f.user_labels)) == exp["users"]
    assert labelled(d.filter_by_count(f, 2, 2)) == labelled(f)
    one = d.filter_by_count(t, 2, 2, fixpoint=False)
    assert sorted(map(str, one.user_labels)) == toy_expected["single_pass"]["users"]
    assert len(labelled(one, "purchase")) == toy_expected["single_pass"]["purchase_count"]


def test_split_counts_leakage_and_determinism(toy_path, toy_expected):
    f = d.filter_by_count(d.load_interactions(toy_path, TOY_FORMAT), 2, 2)
    exp = toy_expected["split"]
    for seed in range(10):
        b = d.split(f, seed=seed)
        assert (len(b.valid), len(b.test)) == (exp["valid"], exp["test"])
        assert len(labelled(b.train, "purchase")) == exp["train_purchase"]
        assert len(labelled(b.train, "aux")) == exp["train_auxiliary"]
        held = {(int(u), int(i)) for u, i in np.concatenate([b.valid, b.test])}
        assert not held & set(zip(b.train.users.tolist(), b.train.items.tolist()))
    a, c = d.split(f, seed=3), d.split(f, seed=3)
    assert np.array_equal(a.valid, c.valid) and np.array_equal(a.test, c.test) and labelled(a.train) == labelled(c.train)


def test_split_without_auxiliaries_and_bad_ratios(toy_path):
    t = d.load_interactions(toy_path, TOY_FORMAT)
    buys = t.rows("purchase")
    b = d.split(buys, aux=[])
    assert b.tasks == ("purchase",) and len(b.train) + len(b.valid) + len(b.test) == len(buys)
    with pytest.raises(ConfigurationError):
        d.split(t, ratios=(0.5, 0.1, 0.1))


def test_split_round_trip(tmp_path, toy_path):
    b = d.split(d.filter_by_count(d.load_interactions(toy_path, TOY_FORMAT), 2, 2), seed=1)
    d.save_split(b, tmp_path / "proc")
    b2 = d.load_split(tmp_path / "proc")
    assert np.array_equal(b.valid, b2.valid) and np.array_equal(b.test, b2.test)
    assert labelled(b.train) == labelled(b2.train) and b.tasks == b2.tasks


def _bundle(seed=0, **kw):
    return d.split(d.generate_synthetic(d.SyntheticSpec(n_users=30, n_items=40, **kw), seed=seed), seed=seed)


def test_sample_batch_contract():
    b = _bundle()
    batch = d.sample_batch(b, 50, negatives=0, seed=0)
    assert len(batch) == 50 and (batch.labels.sum(1) == 1).all()
    batch = d.sample_batch(b, 64, negatives=4, seed=1)
    pos = batch.labels.sum(0)
    np.testing.assert_array_equal(batch.mask.sum(0), 5 * pos)
    assert (batch.mask.sum(1) == 1).all() and ((batch.labels <= batch.mask)).all()
    neg = batch.labels.sum(1) == 0
    task = batch.mask.argmax(1)
    for u, i, t in zip(batch.users[neg], batch.items[neg], task[neg]):
        assert i not in b.train_positives(t).get(u, set())
    again = d.sample_batch(b, 64, negatives=4, seed=1)
    assert np.array_equal(again.items, batch.items)


def test_epoch_covers_each_positive_once():
    b = _bundle()
    seen = []
    for batch in d.iter_batches(b, 37, negatives=1, seed=2):
        pos = batch.labels.sum(1) == 1
        seen += list(zip(batch.users[pos].tolist(), batch.items[pos].tolist(), batch.labels[pos].argmax(1).tolist()))
    u, i, t = b.positives
    assert sorted(seen) == sorted(zip(u.tolist(), i.tolist(), t.tolist()))


def test_negatives_uniform_over_eligible_items():
    t = d.InteractionTable([0, 0, 0], [0, 1, 2], [0, 0, 0], d.BEHAVIORS, None, np.arange(1), np.arange(8))
    b = d.SplitBundle(t, np.zeros((0, 2), int), np.zeros((0, 2), int), ("purchase",))
    batch = d.sample_batch(b, 3, negatives=4000, seed=0)
    neg = batch.items[batch.labels[:, 0] == 0]
    counts = np.bincount(neg, minlength=8)
    assert counts[:3].sum() == 0
    expected = len(neg) / 5
    chi2 = ((counts[3:] - expected) ** 2 / expected).sum()
    assert chi2 < 18.47  # 0.999 quantile, 4 degrees of freedom


def test_saturated_user_negatives_skipped(caplog):
    t = d.InteractionTable([0, 0], [0, 1], [0, 0], d.BEHAVIORS, None, np.arange(1), np.arange(2))
    b = d.SplitBundle(t, np.zeros((0, 2), int), np.zeros((0, 2), int), ("purchase",))
    with caplog.at_level(logging.WARNING):
        batch = d.sample_batch(b, 2, negatives=3, seed=0)
    assert len(batch) == 2 and "skipped 6 negatives" in caplog.text


def test_synthetic_generator():
    full = d.generate_synthetic(d.SyntheticSpec(n_users=5, n_items=7, densities={b: 1.0 for b in d.BEHAVIORS}), seed=0)
    assert len(full) == 4 * 35
    a = d.generate_synthetic(d.SyntheticSpec(), seed=4)
    b = d.generate_synthetic(d.SyntheticSpec(), seed=4)
    assert np.array_equal(a.users, b.users) and np.array_equal(a.items, b.items)
    spec = d.SyntheticSpec(imbalance=10.0, frequency_exponent=0.5)
    assert spec.loss_scales(["purchase", "click"]) == [1.0, 10.0]
    assert spec.effective_density("click") == pytest.approx(0.15 * 10 ** 0.5)
    with pytest.raises(ConfigurationError):
        d.SyntheticSpec(densities={"purchase": 0.0})


def test_synthetic_auxiliaries_correlate_with_target():
    t = d.generate_synthetic(d.SyntheticSpec(n_users=100, n_items=200), seed=0)
    buy = set(zip(*[x.tolist() for x in (t.rows("purchase").users, t.rows("purchase").items)]))
    clicks = list(zip(*[x.tolist() for x in (t.rows("click").users, t.rows("click").items)]))
    hit = np.mean([p in buy for p in clicks])
    assert hit > 2 * 0.05  # well above the purchase base rate
