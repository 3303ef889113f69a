"""Energy potential, equilibrium loss, and descent tests, including the
closed-form gradient identity the coordination mechanism rests on."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equifuse import autodiff as ad
from equifuse import energy as en
from equifuse.errors import ContractError


def scalar(v):
    return ad.Tensor([[float(v)]])


def watched_scalars(values):
    tape = ad.Tape()
    ts = [tape.watch(scalar(v)) for v in values]
    return tape, ts


class TestEntropyUncertainty:
    def test_uniform_rows(self):
        p = ad.Tensor(np.full((3, 4), 0.25))
        assert en.entropy_uncertainty(p).item() == pytest.approx(np.log(4), abs=1e-12)

    def test_one_hot_rows(self):
        p = ad.Tensor(np.eye(4))
        assert en.entropy_uncertainty(p).item() == pytest.approx(0.0, abs=1e-12)

    def test_mixed_fixture(self):
        p = ad.Tensor([[0.5, 0.5], [1.0, 0.0]])
        expected = np.log(2) / 2
        assert en.entropy_uncertainty(p).item() == pytest.approx(expected, abs=1e-12)

    def test_invalid_row_sum_rejected(self):
        with pytest.raises(ContractError, match="sums to"):
            en.entropy_uncertainty(ad.Tensor([[0.5, 0.4]]))

    def test_include_mask(self):
        p = ad.Tensor([[0.5, 0.5], [1.0, 0.0], [0.25, 0.75]])
        got = en.entropy_uncertainty(p, include=np.array([True, False, False]))
        assert got.item() == pytest.approx(np.log(2), abs=1e-12)


class TestModalityEnergy:
    def test_hand_fixture(self):
        # mean ||z||^2 = 4, task loss 0.5, uncertainty ln 2, coeffs all 1.
        z = ad.Tensor([[2.0, 0.0]])
        me = en.modality_energy(
            en.EnergyCoefficients(1.0, 1.0, 1.0), z, scalar(0.5), scalar(np.log(2))
        )
        assert me.total_value == pytest.approx(4 + 0.5 + np.log(2), abs=1e-9)
        assert me.total_value == pytest.approx(5.19315, abs=1e-5)

    def test_zero_coefficients(self):
        me = en.modality_energy(
            en.EnergyCoefficients(0.0, 0.0, 0.0), ad.Tensor([[3.0]]), scalar(2.0), scalar(1.0)
        )
        assert me.total_value == 0.0

    def test_uncertainty_monotone(self):
        z = ad.Tensor([[1.0, 1.0]])
        lo = en.modality_energy(
            en.EnergyCoefficients(1.0, 1.0, 0.5), z, scalar(0.1), scalar(0.2)
        )
        hi = en.modality_energy(
            en.EnergyCoefficients(1.0, 1.0, 0.5), z, scalar(0.1), scalar(0.9)
        )
        assert hi.total_value > lo.total_value

    def test_exact_component_sum(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            coeffs = en.EnergyCoefficients(*rng.uniform(0.1, 2.0, size=3))
            me = en.modality_energy(
                coeffs,
                ad.Tensor(rng.normal(size=(4, 3))),
                scalar(rng.uniform(0, 2)),
                scalar(rng.uniform(0, 2)),
            )
            assert (
                abs(me.total_value - (me.magnitude + me.task_loss + me.uncertainty))
                < 1e-12
            )

    def test_negative_coefficient_rejected(self):
        with pytest.raises(ContractError):
            en.EnergyCoefficients(alpha_e=-1.0)


class TestLossGap:
    def test_equal_energies_zero(self):
        assert en.loss_gap([scalar(1), scalar(1), scalar(1)]).item() == 0.0

    def test_arithmetic_fixture(self):
        assert en.loss_gap([scalar(0), scalar(1), scalar(2)]).item() == 6.0

    def test_pair_shift_fixture(self):
        for a in (-3.0, 0.0, 11.5):
            assert en.loss_gap([scalar(a), scalar(a + 2.5)]).item() == pytest.approx(
                2.5**2, abs=1e-12
            )

    def test_needs_two(self):
        with pytest.raises(ContractError):
            en.loss_gap([scalar(1.0)])

    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=5),
        st.floats(-50, 50),
    )
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance_exact(self, energies, shift):
        base = en.loss_gap([scalar(e) for e in energies]).item()
        moved = en.loss_gap([scalar(e + shift) for e in energies]).item()
        assert base == pytest.approx(moved, rel=1e-12, abs=1e-9)

    def test_closed_form_gradient(self):
        # d/dE_m of the unordered-pairs gap loss is 2*|M|*(E_m - mean E).
        rng = np.random.default_rng(11)
        for _ in range(200):
            values = rng.normal(size=rng.integers(2, 5))
            tape, ts = watched_scalars(values)
            ad.backward(en.loss_gap(ts))
            mean = values.mean()
            m = len(values)
            for v, t in zip(values, ts):
                assert t.grad[0, 0] == pytest.approx(2 * m * (v - mean), abs=1e-10)


class TestDescentAndPenalty:
    def test_lambda_zero_returns_same_tensor(self):
        z = ad.Tensor([[1.0, 2.0]])
        g = ad.Tensor([[5.0, 5.0]])
        assert en.energy_descent_step(z, g, 0.0) is z

    def test_pure_quadratic_contraction(self):
        # beta = gamma = 0: one step is exactly z <- (1 - 2*lambda*alpha) z.
        rng = np.random.default_rng(3)
        zdata = rng.normal(size=(4, 3))
        coeffs = en.EnergyCoefficients(alpha_e=0.8, beta_e=0.0, gamma_e=0.0, lambda_flow=0.1)
        tape = ad.Tape()
        z = tape.watch(ad.Tensor(zdata.copy()))
        parts = en.energy_gradient_parts(coeffs, z, scalar(0.0), scalar(0.0))
        z1 = en.energy_descent_step(z, parts.label_free(), coeffs.lambda_flow)
        expected = (1 - 2 * 0.1 * 0.8) * zdata
        assert np.allclose(z1.data, expected, atol=1e-14)
        assert np.linalg.norm(z1.data) < np.linalg.norm(zdata)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractError):
            en.energy_descent_step(ad.Tensor([[1.0]]), ad.Tensor([[1.0]]), -0.1)

    def test_equal_energies_zero_gradients_zero_loss(self):
        gap = en.loss_gap([scalar(2.0), scalar(2.0), scalar(2.0)])
        norms = [scalar(0.0) for _ in range(3)]
        assert en.coordination_loss(gap, norms, 0.1).item() == 0.0

    def test_delta_zero_reduces_to_gap(self):
        gap = en.loss_gap([scalar(0.0), scalar(1.0), scalar(2.0)])
        total = en.coordination_loss(gap, [scalar(9.0)] * 3, 0.0)
        assert total.item() == 6.0

    def test_stationary_point_gradient_vanishes(self):
        # Teachers with zero weights: logits are constant, so the loss
        # and uncertainty gradients w.r.t. z vanish; with z = 0 the
        # quadratic term vanishes too and energies are equal across
        # modalities. The total coordination loss must then have zero
        # gradient w.r.t. every z_m.
        n, d, k = 4, 3, 2
        labels = np.array([0, 1, 0, 1])
        coeffs = en.EnergyCoefficients(1.0, 1.0, 1.0, 0.05, 0.1)
        tape = ad.Tape()
        zs = [tape.watch(ad.Tensor(np.zeros((n, d)))) for _ in range(3)]
        w = ad.Tensor(np.zeros((d, k)))  # frozen zero teacher
        energies, norms = [], []
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        for z in zs:
            logits = ad.matmul(z, w)
            lsm = ad.log_softmax_rows(logits)
            ce = ad.scale(ad.mean_all(ad.row_sum(ad.mul(lsm, ad.Tensor(onehot)))), -1.0)
            probs = ad.softmax_rows(logits)
            u = en.entropy_uncertainty(probs)
            energies.append(en.modality_energy(coeffs, z, ce, u))
            parts = en.energy_gradient_parts(coeffs, z, ce, u)
            norms.append(en.gradient_norm_sq(parts.full()))
        total = en.coordination_loss(
            en.loss_gap([e.total for e in energies]), norms, coeffs.delta_e
        )
        ad.backward(total)
        for z in zs:
            assert np.all(np.abs(z.grad) < 1e-10)


class TestImplicitWeights:
    def test_fixture(self):
        w = en.implicit_weights({"a": 2.0, "b": 1.0, "c": 1.0})
        assert w["a"] == pytest.approx(2 / 3, abs=1e-12)
        assert w["b"] == pytest.approx(-1 / 3, abs=1e-12)
        assert w["c"] == pytest.approx(-1 / 3, abs=1e-12)

    def test_equal_energies_all_zero(self):
        w = en.implicit_weights({"a": 5.0, "b": 5.0})
        assert all(v == 0.0 for v in w.values())

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_weights_sum_to_zero(self, values):
        w = en.implicit_weights({f"m{i}": v for i, v in enumerate(values)})
        assert sum(w.values()) == pytest.approx(0.0, abs=1e-9)

    def test_negative_feedback_signs(self):
        # The gap-loss gradient w.r.t. each energy has the sign of
        # E(m) - mean: above-mean modalities are amplified, below-mean
        # suppressed.
        rng = np.random.default_rng(21)
        for _ in range(300):
            values = rng.normal(size=3)
            tape, ts = watched_scalars(values)
            ad.backward(en.loss_gap(ts))
            mean = values.mean()
            for v, t in zip(values, ts):
                assert t.grad[0, 0] * (v - mean) >= 0.0
                if abs(v - mean) > 1e-9:
                    assert np.sign(t.grad[0, 0]) == np.sign(v - mean)


class TestReport:
    def test_report_invariants(self):
        rng = np.random.default_rng(2)
        names = ("a", "b", "c")
        coeffs = en.EnergyCoefficients(0.7, 1.1, 0.9)
        energies = {}
        for m in names:
            energies[m] = en.modality_energy(
                coeffs,
                ad.Tensor(rng.normal(size=(5, 4))),
                scalar(rng.uniform(0, 2)),
                scalar(rng.uniform(0, 1)),
            )
        report = en.build_report(names, energies, {m: 0.5 for m in names})
        assert sum(report.implicit_weights.values()) == pytest.approx(0.0, abs=1e-12)
        for m in names:
            assert report.pairwise_gaps[(m, m)] == 0.0
            total = report.e_magnitude[m] + report.e_loss[m] + report.e_uncertainty[m]
            assert abs(report.e_total[m] - total) < 1e-12
        for a in names:
            for b in names:
                assert report.pairwise_gaps[(a, b)] == report.pairwise_gaps[(b, a)]
