"""Decomposition and loss tests. The contrastive alignment loss is
checked against a brute-force loop oracle that implements the documented
definition directly."""

import numpy as np
import pytest

from equifuse import autodiff as ad
from equifuse import disentangle as dz
from equifuse import synthetic as syn
from equifuse.errors import ContractError

EPS = ad.NORM_EPS


def cos(a, b):
    na = np.linalg.norm(a) + EPS
    nb = np.linalg.norm(b) + EPS
    return float(np.dot(a, b) / (na * nb))


def align_loss_oracle(shared, present, tau):
    """Loop implementation of the documented alignment loss.

    Anchors: (i, m) with sample i present in >= 2 modalities and in m.
    Positive: cosine(anchor, mean of sample i's present components).
    Denominator: exp(pos/tau) plus exp(cos/tau) over all present
    components of every other sample, any modality.
    """
    names = list(shared)
    n = present.shape[0]
    counts = present.sum(axis=1)
    total, anchors = 0.0, 0
    for i in range(n):
        if counts[i] < 2:
            continue
        agg = np.mean(
            [shared[m][i] for k, m in enumerate(names) if present[i, k]], axis=0
        )
        for mi, m in enumerate(names):
            if not present[i, mi]:
                continue
            pos = cos(shared[m][i], agg) / tau
            den = np.exp(pos)
            for kj, m2 in enumerate(names):
                for j in range(n):
                    if j == i or not present[j, kj]:
                        continue
                    den += np.exp(cos(shared[m][i], shared[m2][j]) / tau)
            total += np.log(den) - pos
            anchors += 1
    return total / anchors if anchors else 0.0


def random_shared(rng, n=6, h=5, names=("a", "b", "c")):
    return {m: rng.normal(size=(n, h)) for m in names}


class TestLossAlign:
    def test_matches_loop_oracle(self, rng):
        shared_np = random_shared(rng)
        present = np.ones((6, 3), dtype=bool)
        present[2, 0] = False  # one missing component
        present[4, :2] = False  # one single-modality sample (excluded anchor)
        expected = align_loss_oracle(shared_np, present, tau=0.1)
        shared = {m: ad.Tensor(v) for m, v in shared_np.items()}
        got = dz.loss_align(shared, present, tau=0.1).item()
        assert got == pytest.approx(expected, rel=1e-10)

    def test_single_sample_two_equal_modalities_is_zero(self):
        # One sample, no negatives: denominator is just the positive
        # term, so the loss collapses to log(1) = 0.
        v = np.array([[0.3, -0.7, 1.1]])
        shared = {"a": ad.Tensor(v), "b": ad.Tensor(v)}
        present = np.ones((1, 2), dtype=bool)
        assert dz.loss_align(shared, present, tau=0.1).item() == pytest.approx(
            0.0, abs=1e-12
        )

    def test_identical_components_give_log_candidate_count(self):
        # Every cosine is 1, so each anchor's loss is log of the number
        # of denominator terms: 1 positive + negatives.
        n, names = 4, ("a", "b")
        v = np.tile(np.array([[1.0, 2.0]]), (n, 1))
        shared = {m: ad.Tensor(v) for m in names}
        present = np.ones((n, 2), dtype=bool)
        negatives = (n - 1) * len(names)
        got = dz.loss_align(shared, present, tau=0.5).item()
        assert got == pytest.approx(np.log(1 + negatives), abs=1e-9)

    def test_tau_contract(self, rng):
        shared = {m: ad.Tensor(v) for m, v in random_shared(rng).items()}
        with pytest.raises(ContractError):
            dz.loss_align(shared, np.ones((6, 3), dtype=bool), tau=0.0)

    def test_gradient_matches_finite_differences(self, rng):
        base = random_shared(rng, n=4, h=3, names=("a", "b"))
        present = np.ones((4, 2), dtype=bool)
        other = ad.Tensor(base["b"])

        def f(x):
            return dz.loss_align({"a": x, "b": other}, present, tau=0.2)

        err = ad.grad_check(f, ad.Tensor(base["a"]))
        assert err < 1e-4


class TestLossDecorrelate:
    def test_orthogonal_pairs_zero(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([[0.0, 3.0], [1.5, 0.0]])
        out = dz.loss_decorrelate(
            {"a": ad.Tensor(a), "b": ad.Tensor(b)}, np.ones((2, 2), dtype=bool)
        )
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_three_modalities_gives_three(self, rng):
        v = rng.normal(size=(5, 4))
        specific = {m: ad.Tensor(v) for m in ("a", "b", "c")}
        out = dz.loss_decorrelate(specific, np.ones((5, 3), dtype=bool))
        assert out.item() == pytest.approx(3.0, abs=1e-9)

    def test_antiparallel_pair_gives_minus_one(self, rng):
        v = rng.normal(size=(4, 3))
        out = dz.loss_decorrelate(
            {"a": ad.Tensor(v), "b": ad.Tensor(-v)}, np.ones((4, 2), dtype=bool)
        )
        assert out.item() == pytest.approx(-1.0, abs=1e-9)

    def test_masked_rows_excluded(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        present = np.ones((5, 2), dtype=bool)
        present[3, 1] = False
        got = dz.loss_decorrelate(
            {"a": ad.Tensor(a), "b": ad.Tensor(b)}, present
        ).item()
        keep = [0, 1, 2, 4]
        expected = np.mean([cos(a[i], b[i]) for i in keep])
        assert got == pytest.approx(expected, rel=1e-10)

    def test_gradient(self, rng):
        b = ad.Tensor(rng.normal(size=(4, 3)))
        present = np.ones((4, 2), dtype=bool)

        def f(x):
            return dz.loss_decorrelate({"a": x, "b": b}, present)

        assert ad.grad_check(f, ad.Tensor(rng.normal(size=(4, 3)))) < 1e-4


class TestLossUnimodal:
    def _nets(self, rng, k=4):
        cfg = dz.DisentangleConfig(encoder_dim=6, shared_dim=4, specific_dim=4, hidden=5)
        return dz.DisentangleNetworks({"a": 5, "b": 5}, k, cfg, seed=0)

    def test_zero_teachers_give_uniform_ce(self, rng):
        nets = self._nets(rng)
        for mn in nets.nets.values():
            for _, p in mn.teacher.named_params("t"):
                p.data[:] = 0.0
        reps = {
            m: dz.DisentangledRep(
                z=ad.Tensor(rng.normal(size=(6, 6))),
                z_shared=ad.Tensor(rng.normal(size=(6, 4))),
                z_specific=ad.Tensor(rng.normal(size=(6, 4))),
            )
            for m in ("a", "b")
        }
        labels = np.array([0, 1, 2, 3, 0, 1])
        out = dz.loss_unimodal(nets, reps, labels, np.ones((6, 2), dtype=bool))
        assert out.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_equals_mean_of_per_modality_crossentropies(self, rng):
        nets = self._nets(rng)
        reps = {
            m: dz.DisentangledRep(
                z=ad.Tensor(rng.normal(size=(6, 6))),
                z_shared=ad.Tensor(rng.normal(size=(6, 4))),
                z_specific=ad.Tensor(rng.normal(size=(6, 4))),
            )
            for m in ("a", "b")
        }
        labels = np.array([0, 1, 2, 3, 0, 1])
        present = np.ones((6, 2), dtype=bool)
        got = dz.loss_unimodal(nets, reps, labels, present).item()

        def np_ce(logits, labels):
            z = logits - logits.max(axis=1, keepdims=True)
            lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return float(-lsm[np.arange(len(labels)), labels].mean())

        per_mod = [
            np_ce(nets.nets[m].teacher(reps[m].z_specific).data, labels)
            for m in ("a", "b")
        ]
        assert got == pytest.approx(np.mean(per_mod), rel=1e-12)

    def test_perfect_logits_near_zero(self):
        logits = np.full((4, 3), -50.0)
        labels = np.array([0, 1, 2, 0])
        logits[np.arange(4), labels] = 50.0
        loss, cnt = dz.masked_cross_entropy(
            ad.Tensor(logits), labels, np.ones(4, dtype=bool)
        )
        assert cnt == 4
        assert loss.item() == pytest.approx(0.0, abs=1e-12)


class TestCombineAndDisentangle:
    def test_exact_sum_invariant(self):
        total, parts = dz.combine_losses(
            ad.Tensor([[1.0]]), ad.Tensor([[2.0]]), ad.Tensor([[3.0]]), 0.1, 0.1
        )
        assert parts.total == pytest.approx(1.5, abs=1e-12)
        recomputed = parts.align + parts.lambda_dis * parts.decorrelate \
            + parts.lambda_uni * parts.unimodal
        assert abs(parts.total - recomputed) < 1e-12

    def test_zero_weights_reduce_to_align(self, rng):
        total, parts = dz.combine_losses(
            ad.Tensor([[0.7]]), ad.Tensor([[5.0]]), ad.Tensor([[9.0]]), 0.0, 0.0
        )
        assert total.item() == 0.7

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractError):
            dz.combine_losses(
                ad.Tensor([[1.0]]), ad.Tensor([[1.0]]), ad.Tensor([[1.0]]), -0.1, 0.1
            )

    def test_shapes(self):
        cfg = dz.DisentangleConfig(
            encoder_dim=12, shared_dim=8, specific_dim=8, hidden=10
        )
        spec = syn.GeneratorSpec(
            num_classes=3,
            modalities=(
                syn.ModalityConfig("a", 16, 1.0),
                syn.ModalityConfig("b", 16, 1.0),
            ),
            seed=0,
        )
        batch = syn.generate(spec, 5)
        nets = dz.DisentangleNetworks({"a": 16, "b": 16}, 3, cfg, seed=1)
        reps = dz.disentangle(nets, batch)
        assert reps["a"].z.shape == (5, 12)
        assert reps["a"].z_shared.shape == (5, 8)
        assert reps["a"].z_specific.shape == (5, 8)

    def test_zero_weight_nets_emit_bias_image(self, rng):
        cfg = dz.DisentangleConfig(encoder_dim=6, shared_dim=4, specific_dim=3, hidden=5)
        nets = dz.DisentangleNetworks({"a": 7, "b": 7}, 2, cfg, seed=2)
        mn = nets.nets["a"]
        # zero every weight matrix, keep biases
        for net in (mn.to_shared, mn.to_specific):
            net.hidden.w.data[:] = 0.0
            net.out.w.data[:] = 0.0
        z = ad.Tensor(rng.normal(size=(4, 6)))
        rep = dz.decompose(nets, "a", z, np.ones(4, dtype=bool))
        assert np.allclose(rep.z_shared.data, np.tile(mn.to_shared.out.b.data, (4, 1)))
        assert np.allclose(rep.z_specific.data, np.tile(mn.to_specific.out.b.data, (4, 1)))

    def test_masked_sample_contributes_nothing(self, rng):
        # Dropping a sample via the mask must equal removing its row.
        shared_np = random_shared(rng, n=5, h=4, names=("a", "b"))
        present = np.ones((5, 2), dtype=bool)
        present[2, :] = False
        masked_val = dz.loss_align(
            {m: ad.Tensor(np.where(present[:, i, None], v, 0.0)) for i, (m, v) in enumerate(shared_np.items())},
            present,
            tau=0.3,
        ).item()
        keep = [0, 1, 3, 4]
        shrunk = {m: ad.Tensor(v[keep]) for m, v in shared_np.items()}
        shrunk_val = dz.loss_align(shrunk, np.ones((4, 2), dtype=bool), tau=0.3).item()
        assert masked_val == pytest.approx(shrunk_val, rel=1e-10)
