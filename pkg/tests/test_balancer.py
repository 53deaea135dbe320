import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metabalance import balancer as bal
from metabalance.autodiff import GradientSet
from metabalance.balancer import BalancerConfig, MagnitudeState, Strategy, balance_step
from metabalance.errors import ConfigurationError, ContractViolation, TrainingFault


def gs(task=None, **arrays):
    return GradientSet({k: np.asarray(v, dtype=float) for k, v in arrays.items()}, task=task)


@pytest.mark.parametrize("m_tar,m_aux,r,w", [(5, 5, 0.7, 1.0), (2, 5, 1.0, 0.4), (2, 5, 0.5, 0.7)])
def test_weight_examples(m_tar, m_aux, r, w):
    assert bal.compute_weight(m_tar, m_aux, r) == pytest.approx(w, abs=1e-15)


def test_weight_zero_aux_is_clamped():
    assert bal.compute_weight(1.0, 0.0, 1.0) == 1e6
    assert bal.compute_weight(1.0, 0.0, 1.0, max_weight=50.0) == 50.0
    assert bal.compute_weight(0.0, 0.0, 0.5) == 0.5


def test_ema_examples():
    assert bal.update_ema(0.0, 1.0, 0.9) == pytest.approx(0.1, abs=1e-15)
    assert bal.update_ema(0.1, 1.0, 0.9) == pytest.approx(0.19, abs=1e-15)


@given(st.floats(0, 1e6), st.floats(0, 0.999))
def test_ema_fixed_point(x, beta):
    assert bal.update_ema(x, x, beta) == pytest.approx(x, rel=1e-15, abs=0)


def test_gate_examples():
    assert bal.strategy_gate(Strategy.A, 1.0, 2.0)
    assert not bal.strategy_gate(Strategy.B, 1.0, 2.0)
    assert not bal.strategy_gate(Strategy.C, 1.0, 1.0)
    assert not bal.strategy_gate("Off", 1.0, 2.0)
    assert bal.strategy_gate("b", 2.0, 1.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BalancerConfig(relax_factor=1.5)
    with pytest.raises(ConfigurationError):
        BalancerConfig(beta=1.0)
    with pytest.raises(ConfigurationError):
        BalancerConfig(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        BalancerConfig(strategy="D")


def _one_aux(tar, aux):
    return gs(s=tar), [gs(s=aux)], MagnitudeState.create(["s"], 1)


def test_exact_match_at_r1():
    t, a, st_ = _one_aux([2.0, 0.0], [3.0, 4.0])
    out, rep, _ = balance_step(t, a, st_, BalancerConfig("C", 1.0, beta=0.0))
    assert np.linalg.norm(out[0]["s"]) == pytest.approx(2.0, rel=1e-15)
    np.testing.assert_allclose(out[0]["s"] / 2.0, [0.6, 0.8], rtol=1e-15)
    assert rep.rows[0].weight == pytest.approx(0.4)


def test_half_relax_interpolates_norm():
    t, a, st_ = _one_aux([2.0, 0.0], [3.0, 4.0])
    out, _, _ = balance_step(t, a, st_, BalancerConfig("C", 0.5, beta=0.0))
    assert np.linalg.norm(out[0]["s"]) == pytest.approx(3.5, rel=1e-15)


@pytest.mark.parametrize("strategy", ["A", "B", "C", "Off"])
def test_zero_relax_is_identity(strategy):
    t, a, st_ = _one_aux([2.0, 0.0], [3.0, 4.0])
    out, _, new = balance_step(t, a, st_, BalancerConfig(strategy, 0.0))
    assert out[0]["s"] is a[0]["s"]
    assert new.t == 1 and new.m_aux["s"][0] == pytest.approx(0.5)


def test_task_groups_and_target_untouched():
    t = gs(s=[1.0, 1.0], tower=[9.0])
    a = [gs(s=[10.0, 0.0], tower=[7.0])]
    t_before = {k: v.copy() for k, v in t.items()}
    out, _, _ = balance_step(t, a, MagnitudeState.create(["s"], 1), BalancerConfig("C", 1.0, beta=0.0))
    assert out[0]["tower"] is a[0]["tower"]
    for k in t:
        assert np.array_equal(t[k], t_before[k])


def test_ema_updated_even_when_gated_out():
    t, a, st_ = _one_aux([1.0], [5.0])
    out, rep, new = balance_step(t, a, st_, BalancerConfig("B", 1.0))
    assert not rep.rows[0].gated and out[0]["s"] is a[0]["s"]
    assert new.m_aux["s"][0] == pytest.approx(0.5) and new.m_tar["s"] == pytest.approx(0.1)


def test_gate_uses_moving_averages_not_instant_norms():
    # history says aux > target even though this batch's aux norm is smaller
    st_ = MagnitudeState.create(["s"], 1)
    st_.m_tar["s"], st_.m_aux["s"][0] = 1.0, 10.0
    _, rep, new = balance_step(gs(s=[2.0]), [gs(s=[1.0])], st_, BalancerConfig("A", 0.5, beta=0.9))
    assert rep.rows[0].gated
    assert rep.rows[0].weight == pytest.approx(bal.compute_weight(1.1, 9.1, 0.5))


def test_state_not_mutated_in_place():
    t, a, st_ = _one_aux([1.0], [5.0])
    balance_step(t, a, st_, BalancerConfig())
    assert st_.t == 0 and st_.m_tar["s"] == 0.0 and st_.m_aux["s"][0] == 0.0


def test_key_mismatch_and_non_finite():
    st_ = MagnitudeState.create(["s"], 1)
    with pytest.raises(ContractViolation):
        balance_step(gs(s=[1.0]), [gs(x=[1.0])], st_, BalancerConfig())
    with pytest.raises(TrainingFault, match="auxiliary task 1"):
        balance_step(gs(s=[1.0]), [gs(s=[np.nan])], st_, BalancerConfig())
    with pytest.raises(ContractViolation):
        bal.sum_gradients(gs(s=[1.0]), [gs(x=[1.0])])


def test_order_ema_then_gate_then_weight(monkeypatch):
    calls = []
    for name in ("update_ema", "strategy_gate", "compute_weight"):
        orig = getattr(bal, name)
        monkeypatch.setattr(bal, name, lambda *a, _o=orig, _n=name, **k: (calls.append(_n), _o(*a, **k))[1])
    balance_step(gs(s=[1.0]), [gs(s=[4.0])], MagnitudeState.create(["s"], 1), BalancerConfig())
    assert calls == ["update_ema", "update_ema", "strategy_gate", "compute_weight"]


def test_sum_examples():
    tot = bal.sum_gradients(gs(s=[1.0, 1.0]), [gs(s=[2.0, -1.0])])
    np.testing.assert_array_equal(tot["s"], [3.0, 0.0])
    t = gs(s=[1.0, 2.0])
    assert np.array_equal(bal.sum_gradients(t, [gs(s=[0.0, 0.0])])["s"], t["s"])
    a, b, c = gs(s=[0.1, 0.2]), gs(s=[0.3, -0.7]), gs(s=[1e-3, 5.0])
    np.testing.assert_allclose(bal.sum_gradients(a, [b, c])["s"], bal.sum_gradients(bal.sum_gradients(a, [b]), [c])["s"])


def test_equal_relax_different_weights():
    st_ = MagnitudeState.create(["s"], 2)
    _, rep, _ = balance_step(gs(s=[1.0]), [gs(s=[3.0]), gs(s=[6.0])], st_, BalancerConfig("C", 0.5, beta=0.0))
    assert rep.rows[0].weight != rep.rows[1].weight


def test_report_csv_columns():
    _, rep, _ = balance_step(gs(s=[1.0]), [gs(s=[3.0])], MagnitudeState.create(["s"], 1), BalancerConfig())
    buf = io.StringIO()
    rep.write_csv(buf, header=True)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "iteration,group,task,pre_norm,post_norm,weight,gated"
    assert lines[1].startswith("1,s,1,")


def test_state_memory_is_small():
    m = bal.MetaBalance([f"g{i}" for i in range(10)], 3)
    assert m.state_nbytes() < 1024


@settings(max_examples=200, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.sampled_from(["A", "B", "C"]),
    st.floats(0.0, 1.0),
    st.floats(0.0, 0.99),
)
def test_balanced_aux_properties(seed, strategy, r, beta):
    rng = np.random.default_rng(seed)
    dims = rng.integers(1, 50, size=2)
    target = gs(a=rng.normal(size=dims[0]) * 10 ** rng.uniform(-3, 2), b=rng.normal(size=dims[1]))
    auxes = [gs(a=rng.normal(size=dims[0]) * 10 ** rng.uniform(-3, 2), b=rng.normal(size=dims[1])) for _ in range(3)]
    state = MagnitudeState.create(["a", "b"], 3)
    state.m_tar = {"a": rng.uniform(0, 5), "b": rng.uniform(0, 5)}
    state.m_aux = {"a": rng.uniform(0, 5, 3), "b": rng.uniform(0, 5, 3)}
    out, rep, _ = balance_step(target, auxes, state, BalancerConfig(strategy, r, beta))
    for row in rep.rows:
        orig, new = auxes[row.task - 1][row.group], out[row.task - 1][row.group]
        if row.m_tar > 0:
            assert row.weight > 0
        if np.linalg.norm(orig) > 0 and row.weight > 0:
            cos = float(np.dot(orig, new) / (np.linalg.norm(orig) * np.linalg.norm(new)))
            assert math.isclose(cos, 1.0, abs_tol=1e-9)
        assert math.isclose(row.post_norm, abs(row.weight) * row.pre_norm, rel_tol=1e-9, abs_tol=1e-300)
        if strategy == "A":
            assert row.post_norm <= row.pre_norm * (1 + 1e-12)
        if strategy == "B":
            assert row.post_norm >= row.pre_norm * (1 - 1e-12)
