"""MIL heads: exact parameter counts, forward semantics, permutation
behavior, attention validity, and Nystrom consistency."""

import numpy as np
import pytest

from milsurv import autodiff as ad
from milsurv.errors import ConfigurationError, ContractError
from milsurv.heads import (
    HEAD_KINDS,
    TransmilConfig,
    build_head,
    head_config,
    nystrom_attention_reference,
    nystrom_attention_single,
    parameter_count,
)
from milsurv.rng import Rng
from milsurv.survival import nll_loss, survival_output

SMALL_TRANSMIL = TransmilConfig(heads=2, head_dim=4)


def small_config(kind, **kw):
    return head_config(kind, 16, hidden_dim=8, attn_dim=4, transmil=SMALL_TRANSMIL, **kw)


class TestParameterCount:
    @pytest.mark.parametrize("kind,expected", [
        ("mean", 526_852),
        ("max", 526_852),
        ("abmil", 592_645),
        ("transmil", 2_673_172),
    ])
    def test_published_counts_at_1024(self, kind, expected):
        assert parameter_count(head_config(kind, 1024)) == expected

    def test_derived_counts_other_dims(self):
        assert parameter_count(head_config("mean", 768)) == 768 * 512 + 512 + 512 * 4 + 4
        assert parameter_count(head_config("mean", 2048)) == 2048 * 512 + 512 + 2052

    def test_abmil_layer_breakdown(self):
        # embed + (H->A) + (A->1) + classifier
        assert parameter_count(head_config("abmil", 1024)) == (
            524_800 + 65_664 + 129 + 2_052)

    def test_transmil_layer_breakdown(self):
        per_layer = 1_024 + 786_432 + 262_656 + 264
        assert parameter_count(head_config("transmil", 1024)) == (
            524_800 + 512 + 2 * per_layer + 44_032 + 1_024 + 2_052)

    def test_non_default_bins_rejected(self):
        with pytest.raises(ConfigurationError):
            head_config("mean", 1024, bins=1)

    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_formula_matches_built_parameters(self, kind):
        cfg = small_config(kind)
        head = build_head(cfg, Rng(0))
        assert head.parameter_count() == parameter_count(cfg)

    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_count_equals_grad_buffers_touched(self, kind):
        cfg = small_config(kind)
        head = build_head(cfg, Rng(0), dtype=np.float64)
        bag = Rng(1).normal(shape=(6, 16))
        tape = ad.Tape()
        logits = head.forward(bag, training=False, tape=tape)
        loss = nll_loss(survival_output(logits, tape=tape), 1, False, tape=tape)
        ad.backward(loss, tape)
        touched = sum(t.size for _, t in head.named_parameters() if t.grad is not None)
        assert touched == parameter_count(cfg)


class TestForwardSemantics:
    def test_mean_of_identical_instances_equals_single(self):
        head = build_head(small_config("mean"), Rng(2))
        v = Rng(3).normal(shape=(1, 16))
        bag = np.repeat(v, 9, axis=0)
        one = head.forward(v).data
        many = head.forward(bag).data
        np.testing.assert_allclose(many, one, rtol=1e-5)

    def test_max_dominating_instance_wins(self):
        head = build_head(small_config("max"), Rng(4))
        rng = Rng(5)
        v = rng.normal(shape=(1, 16))
        logits_v = head.forward(v).data
        # search for a partner whose per-instance logits are dominated
        for _ in range(200):
            w = rng.normal(shape=(1, 16))
            if np.all(head.forward(w).data < logits_v):
                bag = np.concatenate([v, w], axis=0)
                np.testing.assert_allclose(head.forward(bag).data, logits_v, rtol=1e-6)
                return
        pytest.skip("no dominated partner found")

    def test_abmil_single_instance_attention_is_one(self):
        head = build_head(small_config("abmil"), Rng(6))
        v = Rng(7).normal(shape=(1, 16))
        alpha = head.instance_attention(v)
        assert alpha.shape == (1,)
        assert alpha[0] == pytest.approx(1.0, abs=1e-12)

    def test_abmil_attention_is_probability_vector(self):
        head = build_head(small_config("abmil"), Rng(8))
        bag = Rng(9).normal(shape=(23, 16))
        alpha = head.instance_attention(bag)
        assert np.all(alpha >= 0)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-6)

    def test_dimension_mismatch(self):
        head = build_head(small_config("mean"), Rng(0))
        with pytest.raises(ContractError):
            head.forward(np.ones((4, 17)))

    def test_outputs_finite_and_right_shape(self):
        for kind in HEAD_KINDS:
            head = build_head(small_config(kind), Rng(10))
            for m in (1, 2, 5, 30):
                out = head.forward(Rng(m).normal(shape=(m, 16))).data
                assert out.shape == (4,)
                assert np.isfinite(out).all(), kind

    def test_eval_mode_deterministic_and_ignores_rng(self):
        head = build_head(small_config("transmil"), Rng(11))
        bag = Rng(12).normal(shape=(10, 16))
        a = head.forward(bag, training=False).data
        b = head.forward(bag, training=False, rng=Rng(999)).data
        assert a.tobytes() == b.tobytes()

    def test_build_deterministic_per_seed(self):
        a = build_head(small_config("transmil"), Rng(21))
        b = build_head(small_config("transmil"), Rng(21))
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()


class TestPermutationBehavior:
    @pytest.mark.parametrize("kind", ["mean", "max", "abmil"])
    def test_invariant_heads(self, kind):
        head = build_head(small_config(kind), Rng(31))
        bag = Rng(32).normal(shape=(17, 16)).astype(np.float32)
        base = head.forward(bag).data
        rng = Rng(33)
        for _ in range(25):
            perm = rng.permutation(17)
            out = head.forward(bag[perm]).data
            np.testing.assert_allclose(out, base, rtol=1e-5, atol=1e-6)

    def test_transmil_is_order_dependent_but_deterministic(self):
        # positional encoding is spatial, so permuting instances may change
        # the output; determinism and finiteness are the contract instead
        head = build_head(small_config("transmil"), Rng(34))
        bag = Rng(35).normal(shape=(12, 16))
        a = head.forward(bag).data
        b = head.forward(bag).data
        assert a.tobytes() == b.tobytes()
        perm = Rng(36).permutation(12)
        out = head.forward(bag[perm]).data
        assert np.isfinite(out).all()
        assert not np.allclose(out, a, rtol=1e-5)


class TestNystrom:
    def test_matches_exact_attention_with_full_landmarks(self):
        rng = Rng(41)
        for n in (4, 9, 25):
            q = rng.normal(shape=(2, n, 4)) * 4 ** -0.5
            k = rng.normal(shape=(2, n, 4))
            v = rng.normal(shape=(2, n, 4))
            approx = nystrom_attention_single(q, k, v, landmarks=256,
                                              pinv_iterations=16).data
            exact = nystrom_attention_reference(q, k, v)
            rel = np.abs(approx - exact) / np.maximum(1.0, np.abs(exact))
            assert rel.max() < 1e-4

    def test_landmark_path_with_uneven_segments(self):
        rng = Rng(42)
        q = rng.normal(shape=(2, 23, 4)) * 4 ** -0.5
        k = rng.normal(shape=(2, 23, 4))
        v = rng.normal(shape=(2, 23, 4))
        out = nystrom_attention_single(q, k, v, landmarks=5).data
        assert out.shape == (2, 23, 4)
        assert np.isfinite(out).all()

    def test_gradient_through_landmark_subsampling(self):
        from milsurv import autodiff as ad
        from milsurv.gradcheck import all_passed, grad_check

        rng = Rng(44)
        q = ad.Tensor(rng.normal(shape=(1, 7, 3)), requires_grad=True)
        k = ad.Tensor(rng.normal(shape=(1, 7, 3)), requires_grad=True)
        v = ad.Tensor(rng.normal(shape=(1, 7, 3)), requires_grad=True)
        readout = ad.as_tensor(np.linspace(0.2, 1.4, 21).reshape(1, 7, 3))

        def loss(tape):
            out = nystrom_attention_single(q, k, v, landmarks=3, tape=tape)
            return ad.reduce_sum(ad.mul(out, readout, tape), tape=tape)

        res = grad_check(loss, [("q", q), ("k", k), ("v", v)], tol=1e-6)
        assert all_passed(res), [str(r) for r in res]

    def test_full_landmarks_exact_on_larger_kernel(self):
        # bigger kernels have smaller singular values, so the iterative
        # pseudo-inverse needs more sweeps to converge
        rng = Rng(43)
        n = 48
        q = rng.normal(shape=(1, n, 8)) * 8 ** -0.5
        k = rng.normal(shape=(1, n, 8))
        v = rng.normal(shape=(1, n, 8))
        exact = nystrom_attention_reference(q, k, v)
        approx = nystrom_attention_single(q, k, v, landmarks=n, pinv_iterations=24).data
        assert np.abs(approx - exact).max() < 1e-4


class TestCheckpointInterop:
    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_round_trip(self, tmp_path, kind):
        from milsurv.checkpoint import load_checkpoint, save_checkpoint

        head = build_head(small_config(kind), Rng(51))
        path = tmp_path / "head.milc"
        save_checkpoint(path, head, seed=51, epoch=7)
        back, meta = load_checkpoint(path)
        assert meta["epoch"] == 7
        assert meta["kind"] == kind
        bag = Rng(52).normal(shape=(5, 16)).astype(np.float32)
        np.testing.assert_array_equal(head.forward(bag).data, back.forward(bag).data)

    def test_corruption_detected(self, tmp_path):
        from milsurv.checkpoint import load_checkpoint, save_checkpoint
        from milsurv.errors import CorruptFileError

        head = build_head(small_config("mean"), Rng(53))
        path = tmp_path / "head.milc"
        save_checkpoint(path, head, seed=53, epoch=1)
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)
