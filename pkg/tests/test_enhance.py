"""Enhancement network wiring and loss tests."""

import numpy as np
import pytest

from equifuse import autodiff as ad
from equifuse import disentangle as dz
from equifuse import enhance as eh
from equifuse.errors import ContractError


def make_reps(rng, n=5, h=6, hc=4, hs=3, names=("a", "b", "c")):
    return {
        m: dz.DisentangledRep(
            z=ad.Tensor(rng.normal(size=(n, h))),
            z_shared=ad.Tensor(rng.normal(size=(n, hc))),
            z_specific=ad.Tensor(rng.normal(size=(n, hs))),
        )
        for m in names
    }


def make_nets(names=("a", "b", "c"), hc=4, hs=3, h=6, noise_scale=0.1, seed=0):
    cfg = eh.EnhanceConfig(noise_scale=noise_scale, noise_dim=2, hidden=5)
    return eh.EnhanceNetworks(tuple(names), hc, hs, h, cfg, seed=seed)


class TestEnhance:
    def test_output_shapes(self, rng):
        reps = make_reps(rng)
        nets = make_nets()
        out = eh.enhance(nets, reps, np.ones((5, 3), dtype=bool), rng_seed=1)
        for m in ("a", "b", "c"):
            assert out[m].shape == (5, 6)

    def test_zero_noise_deterministic(self, rng):
        reps = make_reps(rng)
        nets = make_nets(noise_scale=0.0)
        mask = np.ones((5, 3), dtype=bool)
        a = eh.enhance(nets, reps, mask, rng_seed=1)
        b = eh.enhance(nets, reps, mask, rng_seed=2)
        for m in ("a", "b", "c"):
            assert np.array_equal(a[m].data, b[m].data)

    def test_no_seed_means_zero_noise(self, rng):
        reps = make_reps(rng)
        nets = make_nets(noise_scale=0.5)
        mask = np.ones((5, 3), dtype=bool)
        a = eh.enhance(nets, reps, mask, rng_seed=None)
        b = eh.enhance(nets, reps, mask, rng_seed=None)
        for m in ("a", "b", "c"):
            assert np.array_equal(a[m].data, b[m].data)

    def test_seeded_noise_reproducible(self, rng):
        reps = make_reps(rng)
        nets = make_nets(noise_scale=0.5)
        mask = np.ones((5, 3), dtype=bool)
        a = eh.enhance(nets, reps, mask, rng_seed=42)
        b = eh.enhance(nets, reps, mask, rng_seed=42)
        c = eh.enhance(nets, reps, mask, rng_seed=43)
        assert np.array_equal(a["a"].data, b["a"].data)
        assert not np.array_equal(a["a"].data, c["a"].data)

    def test_single_modality_rows_pass_through(self, rng):
        reps = make_reps(rng)
        nets = make_nets()
        mask = np.ones((5, 3), dtype=bool)
        mask[1, 1:] = False  # row 1: only modality a present
        mask[3, :] = [False, True, False]  # row 3: only b
        out = eh.enhance(nets, reps, mask, rng_seed=5)
        assert np.array_equal(out["a"].data[1], reps["a"].z.data[1])
        assert np.array_equal(out["b"].data[3], reps["b"].z.data[3])
        # missing rows are exactly zero
        assert np.all(out["b"].data[1] == 0.0)
        assert np.all(out["a"].data[3] == 0.0)


class TestLossEnhance:
    def _head(self, rng, k=3):
        w = ad.Tensor(rng.normal(size=(6, k)))

        def head(name, enhanced):
            return ad.matmul(enhanced, w)

        return head

    def test_zero_distance_when_enhanced_equals_raw(self, rng):
        reps = make_reps(rng)
        enhanced = {m: reps[m].z for m in reps}
        labels = np.array([0, 1, 2, 0, 1])
        total, parts = eh.loss_enhance(
            enhanced, reps, self._head(rng), labels,
            np.ones((5, 3), dtype=bool), gamma_task=0.0,
        )
        assert parts.reconstruction == pytest.approx(0.0, abs=1e-12)
        assert total.item() == pytest.approx(0.0, abs=1e-12)

    def test_all_ones_offset_in_four_dims(self, rng):
        reps = make_reps(rng, h=4)
        enhanced = {
            m: ad.add(reps[m].z, ad.Tensor(np.ones((5, 4)))) for m in reps
        }
        labels = np.array([0, 1, 2, 0, 1])
        _, parts = eh.loss_enhance(
            enhanced, reps, lambda n, e: ad.matmul(e, ad.Tensor(np.zeros((4, 3)))),
            labels, np.ones((5, 3), dtype=bool), gamma_task=0.0,
        )
        assert parts.reconstruction == pytest.approx(4.0, abs=1e-12)

    def test_gamma_zero_drops_task_term(self, rng):
        reps = make_reps(rng)
        enhanced = {m: ad.tanh(reps[m].z) for m in reps}
        labels = np.array([0, 1, 2, 0, 1])
        total, parts = eh.loss_enhance(
            enhanced, reps, self._head(rng), labels,
            np.ones((5, 3), dtype=bool), gamma_task=0.0,
        )
        assert total.item() == parts.reconstruction

    def test_exact_sum_invariant(self, rng):
        reps = make_reps(rng)
        enhanced = {m: ad.tanh(reps[m].z) for m in reps}
        labels = np.array([0, 1, 2, 0, 1])
        total, parts = eh.loss_enhance(
            enhanced, reps, self._head(rng), labels,
            np.ones((5, 3), dtype=bool), gamma_task=0.1,
        )
        assert abs(parts.total - (parts.reconstruction + 0.1 * parts.task)) < 1e-12

    def test_negative_gamma_rejected(self, rng):
        reps = make_reps(rng)
        with pytest.raises(ContractError):
            eh.loss_enhance(
                {m: reps[m].z for m in reps}, reps, self._head(rng),
                np.array([0, 1, 2, 0, 1]), np.ones((5, 3), dtype=bool),
                gamma_task=-0.5,
            )

    def test_gradient_with_frozen_noise(self, rng):
        # Full enhancement pipeline differentiated w.r.t. one modality's
        # raw representation, noise fixed by the seed.
        names = ("a", "b")
        nets = make_nets(names=names, noise_scale=0.1, seed=3)
        mask = np.ones((4, 2), dtype=bool)
        labels = np.array([0, 1, 2, 0])
        fixed = {
            "b": dz.DisentangledRep(
                z=ad.Tensor(rng.normal(size=(4, 6))),
                z_shared=ad.Tensor(rng.normal(size=(4, 4))),
                z_specific=ad.Tensor(rng.normal(size=(4, 3))),
            )
        }
        w_c = ad.Tensor(rng.normal(size=(6, 4)))
        w_s = ad.Tensor(rng.normal(size=(6, 3)))
        head_w = ad.Tensor(rng.normal(size=(6, 3)))

        def f(z_a):
            reps = {
                "a": dz.DisentangledRep(
                    z=z_a,
                    z_shared=ad.matmul(z_a, w_c),
                    z_specific=ad.matmul(z_a, w_s),
                ),
                "b": fixed["b"],
            }
            enhanced = eh.enhance(nets, reps, mask, rng_seed=77)
            total, _ = eh.loss_enhance(
                enhanced, reps, lambda n, e: ad.matmul(e, head_w),
                labels, mask, gamma_task=0.1,
            )
            return total

        assert ad.grad_check(f, ad.Tensor(rng.normal(size=(4, 6)))) < 1e-4
