"""Tests for the finite-difference layer check."""
import numpy as np
import pytest

from app.exceptions import ParameterError
from app.services.gradcheck import KINDS, gradcheck_table, run_gradcheck
from app.services.layers import Dense, Softmax2


def test_every_kind_passes():
    rows = run_gradcheck(instances=3, seed=0)
    assert [row.kind for row in rows] == list(KINDS)
    for row in rows:
        assert row.passed, f"{row.kind}: {row.worst_rel_error:.3e}"
    assert "PASS" in gradcheck_table(rows)


def test_broken_backward_is_detected(monkeypatch):
    original = Dense.backward

    def negated(self, grad):
        dx = original(self, grad)
        for key in self.grads:
            self.grads[key] = -self.grads[key]
        return -dx

    monkeypatch.setattr(Dense, "backward", negated)
    rows = {row.kind: row for row in run_gradcheck(instances=2, seed=1, kinds=["dense", "relu"])}
    assert not rows["dense"].passed
    assert rows["relu"].passed
    assert "FAIL" in gradcheck_table(rows.values())


def test_rejects_unknown_kinds_and_zero_instances():
    with pytest.raises(ParameterError):
        run_gradcheck(kinds=["lstm"])
    with pytest.raises(ParameterError):
        run_gradcheck(instances=0)


def test_standalone_softmax_backward_is_checked(monkeypatch):
    monkeypatch.setattr(Softmax2, "backward", lambda self, grad: np.zeros_like(grad))
    rows = {row.kind: row for row in run_gradcheck(instances=2, seed=2, kinds=["softmax2", "softmax_bce"])}
    assert not rows["softmax2"].passed
    assert rows["softmax_bce"].passed
