import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from app.rcrn.cells import (
    CellParams,
    ControllerParams,
    ControllerState,
    GateParams,
    GATES,
    cell_param_count,
    controller_step,
    glorot_bound,
    gru_step,
    init_controller_params,
    init_params,
    lstm_step,
)
from app.rcrn.errors import DimensionError
from app.rcrn.numerics import Parameter, constant, finite_diff_check, sum_all, mul, add
from tests import reference


def zero_params(atom, input_dim, hidden_dim, **biases):
    gates = {}
    for g in GATES[atom]:
        gates[g] = GateParams(
            W=Parameter(np.zeros((hidden_dim, input_dim))),
            U=Parameter(np.zeros((hidden_dim, hidden_dim))),
            b=Parameter(np.full(hidden_dim, biases.get(g, 0.0))),
        )
    return CellParams(atom=atom, input_dim=input_dim, hidden_dim=hidden_dim, gates=gates)


class TestLstmStep(unittest.TestCase):
    def test_zero_params_zero_state(self):
        p = zero_params("lstm", 3, 2)
        h, c = lstm_step(p, constant(np.ones((1, 3))), constant(np.zeros((1, 2))), constant(np.zeros((1, 2))))
        assert_array_equal(h.data, np.zeros((1, 2)))
        assert_array_equal(c.data, np.zeros((1, 2)))

    def test_saturated_forget_gate_carries_cell(self):
        p = zero_params("lstm", 3, 2, f=100.0)
        c_prev = constant([[0.7, -1.3]])
        _, c = lstm_step(p, constant(np.ones((1, 3))), constant(np.zeros((1, 2))), c_prev)
        assert_array_equal(c.data, c_prev.data)

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for case in range(100):
            D, d = int(rng.integers(1, 8)), int(rng.integers(1, 7))
            p = init_params("lstm", D, d, case)
            x, h0, c0 = rng.standard_normal(D), rng.standard_normal(d), rng.standard_normal(d)
            h, c = lstm_step(p, constant(x[None]), constant(h0[None]), constant(c0[None]))
            h_ref, c_ref = reference.lstm(p, x, h0, c0)
            assert_allclose(h.data[0], h_ref, rtol=0, atol=1e-12)
            assert_allclose(c.data[0], c_ref, rtol=0, atol=1e-12)

    def test_cell_state_bound(self):
        rng = np.random.default_rng(1)
        for case in range(100):
            p = init_params("lstm", 3, 4, case)
            c = constant(rng.standard_normal((1, 4)))
            bound = np.abs(c.data) + 1.0
            _, c_new = lstm_step(p, constant(rng.standard_normal((1, 3)) * 5), constant(rng.standard_normal((1, 4))), c)
            self.assertTrue((np.abs(c_new.data) <= bound).all())

    def test_rejects_wrong_input_width(self):
        p = init_params("lstm", 3, 2, 0)
        with self.assertRaises(DimensionError):
            lstm_step(p, constant(np.zeros((1, 4))), constant(np.zeros((1, 2))), constant(np.zeros((1, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        p = init_params("lstm", 7, 6, 3)
        x, h0, c0 = (constant(rng.standard_normal((2, n))) for n in (7, 6, 6))
        R1, R2 = constant(rng.standard_normal((2, 6))), constant(rng.standard_normal((2, 6)))

        def loss():
            h, c = lstm_step(p, x, h0, c0)
            return add(sum_all(mul(h, R1)), sum_all(mul(c, R2)))

        for name, param in p.named("lstm").items():
            self.assertLessEqual(finite_diff_check(loss, param), 1e-4, name)


class TestGruStep(unittest.TestCase):
    def test_zero_params_zero_state(self):
        p = zero_params("gru", 3, 2)
        h = gru_step(p, constant(np.ones((1, 3))), constant(np.zeros((1, 2))))
        assert_array_equal(h.data, np.zeros((1, 2)))

    def test_saturated_update_gate_carries_state(self):
        p = zero_params("gru", 3, 2, z=100.0)
        h_prev = constant([[0.4, -0.9]])
        h = gru_step(p, constant(np.ones((1, 3))), h_prev)
        assert_array_equal(h.data, h_prev.data)

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        for case in range(100):
            D, d = int(rng.integers(1, 8)), int(rng.integers(1, 7))
            p = init_params("gru", D, d, case)
            x, h0 = rng.standard_normal(D), rng.standard_normal(d)
            h = gru_step(p, constant(x[None]), constant(h0[None]))
            assert_allclose(h.data[0], reference.gru(p, x, h0), rtol=0, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        p = init_params("gru", 5, 4, 5)
        x, h0 = constant(rng.standard_normal((2, 5))), constant(rng.standard_normal((2, 4)))
        R = constant(rng.standard_normal((2, 4)))
        for name, param in p.named("gru").items():
            self.assertLessEqual(finite_diff_check(lambda: sum_all(mul(gru_step(p, x, h0), R)), param), 1e-4, name)


class TestController(unittest.TestCase):
    def test_zero_params_zero_state(self):
        p = ControllerParams(branch1=zero_params("lstm", 3, 2), branch2=zero_params("lstm", 3, 2))
        zero = constant(np.zeros((1, 2)))
        st = controller_step(p, constant(np.ones((1, 3))), ControllerState(h1=zero, h2=zero, c1=zero, c2=zero))
        assert_array_equal(st.h1.data, np.zeros((1, 2)))
        assert_array_equal(st.h2.data, np.zeros((1, 2)))

    def test_equals_two_independent_lstm_steps(self):
        rng = np.random.default_rng(5)
        p = init_controller_params("lstm", 4, 3, 7)
        x = constant(rng.standard_normal((2, 4)))
        s = [constant(rng.standard_normal((2, 3))) for _ in range(4)]
        st = controller_step(p, x, ControllerState(h1=s[0], h2=s[1], c1=s[2], c2=s[3]))
        h1, c1 = lstm_step(p.branch1, x, s[0], s[2])
        h2, c2 = lstm_step(p.branch2, x, s[1], s[3])
        for got, want in ((st.h1, h1), (st.c1, c1), (st.h2, h2), (st.c2, c2)):
            assert_array_equal(got.data, want.data)

    def test_branches_are_independent(self):
        rng = np.random.default_rng(6)
        for atom in ("lstm", "gru"):
            for case in range(50):
                p = init_controller_params(atom, 3, 2, case)
                x = constant(rng.standard_normal((1, 3)))
                s = [constant(rng.standard_normal((1, 2))) for _ in range(4)]
                prev = ControllerState(h1=s[0], h2=s[1], c1=s[2], c2=s[3]) if atom == "lstm" else ControllerState(h1=s[0], h2=s[1])
                before = controller_step(p, x, prev)
                for param in p.branch1.named("k1").values():
                    param.assign(param.data + rng.standard_normal(param.shape))
                after = controller_step(p, x, prev)
                assert_array_equal(before.h2.data, after.h2.data)
                if atom == "lstm":
                    assert_array_equal(before.c2.data, after.c2.data)
                self.assertFalse(np.array_equal(before.h1.data, after.h1.data))


class TestInit(unittest.TestCase):
    def test_same_seed_bit_identical(self):
        a = init_params("lstm", 4, 3, 11).named("x")
        b = init_params("lstm", 4, 3, 11).named("x")
        for name in a:
            assert_array_equal(a[name].data, b[name].data)

    def test_forget_bias_is_one(self):
        p = init_params("lstm", 4, 3, 0)
        assert_array_equal(p.gates["f"].b.data, np.ones(3))
        assert_array_equal(p.gates["i"].b.data, np.zeros(3))

    def test_glorot_bound(self):
        self.assertAlmostEqual(glorot_bound(4, 4), np.sqrt(6.0 / 8.0), places=12)
        p = init_params("lstm", 4, 4, 1)
        for g in "ifoc":
            self.assertTrue((np.abs(p.gates[g].W.data) <= glorot_bound(4, 4)).all())

    def test_param_count_matches_arrays(self):
        for atom in ("lstm", "gru"):
            p = init_params(atom, 5, 3, 0)
            total = sum(t.data.size for t in p.named("x").values())
            self.assertEqual(total, cell_param_count(atom, 5, 3))

    def test_rejects_unknown_scheme(self):
        with self.assertRaises(ValueError):
            init_params("lstm", 2, 2, 0, scheme="orthogonal")


if __name__ == "__main__":
    unittest.main()
