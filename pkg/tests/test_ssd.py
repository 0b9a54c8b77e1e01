"""Selective-scan kernels: discretization, three-mode equivalence, FLOPs."""

import numpy as np
import pytest

from mac import ssd
from mac import tensor as tz
from mac.tensor import ContractError, Tensor

from conftest import check_gradients, rel_err

E_NEG1 = 0.3678794411714423215955237701614609
ONE_MINUS_E_NEG1 = 0.6321205588285576784044762298385391


def random_params(rng, t=16, h=4, p=16, g=1, n=16, batch=None):
    lead = () if batch is None else (batch,)
    return ssd.SelectiveParams(
        dt=tz.softplus(Tensor(rng.standard_normal(lead + (t, h)))),
        a=tz.neg(tz.exp(Tensor(rng.standard_normal(h)))),
        B=Tensor(rng.standard_normal(lead + (t, g, n))),
        C=Tensor(rng.standard_normal(lead + (t, g, n))),
        x=Tensor(rng.standard_normal(lead + (t, h, p))),
    )


def scalar_params(abar, bcoef, c, xs):
    """1-head 1-dim chain with prescribed abar/bbar via dt=1, a=ln(abar), B=bbar."""
    t = len(xs)
    return ssd.SelectiveParams(
        dt=tz.ones((t, 1)),
        a=Tensor(np.array([np.log(abar)])),
        B=Tensor(np.full((t, 1, 1), bcoef)),
        C=Tensor(np.full((t, 1, 1), c)),
        x=Tensor(np.asarray(xs, dtype=float).reshape(t, 1, 1)),
    )


class TestDiscretizeZoh:
    def test_exact_scalar_case(self):
        abar, bbar = ssd.discretize_zoh(
            Tensor([[1.0]]), Tensor([-1.0]), Tensor([[[1.0]]]), exact=True
        )
        assert abs(abar.item() - E_NEG1) < 1e-15
        assert abs(bbar.item() - ONE_MINUS_E_NEG1) < 1e-15

    def test_vanishing_decay_limit(self):
        # dt*a -> 0 takes the series branch: abar -> 1, bbar -> dt*B
        dt, a, b = Tensor([[0.5]]), Tensor([-1e-9]), Tensor([[[3.0]]])
        abar, bbar = ssd.discretize_zoh(dt, a, b, exact=True)
        assert abs(abar.item() - 1.0) < 1e-9
        assert abs(bbar.item() - 1.5) < 1e-9

    def test_simplified_mode(self):
        abar, bbar = ssd.discretize_zoh(
            Tensor([[0.5]]), Tensor([-2.0]), Tensor([[[3.0]]]), exact=False
        )
        assert abs(abar.item() - E_NEG1) < 1e-15
        assert abs(bbar.item() - 1.5) < 1e-15

    def test_exact_mode_series_matches_expm1_oracle(self):
        # both branches of phi(z) = (e^z - 1)/z against the stable oracle
        b = Tensor([[[1.0]]])
        for a_val, tol in ((-9.9e-7, 1e-12), (-1.1e-6, 1e-9), (-0.3, 1e-12)):
            got = ssd.discretize_zoh(Tensor([[1.0]]), Tensor([a_val]), b, exact=True)[1].item()
            expect = np.expm1(a_val) / a_val
            assert abs(got - expect) < tol, a_val

    def test_group_expansion_shapes(self):
        rng = np.random.default_rng(0)
        abar, bbar = ssd.discretize_zoh(
            Tensor(rng.uniform(0.1, 1.0, (5, 4))),
            Tensor(-rng.uniform(0.5, 2.0, 4)),
            Tensor(rng.standard_normal((5, 2, 3))),
        )
        assert abar.shape == (5, 4) and bbar.shape == (5, 4, 3)


class TestScanRecurrent:
    def test_hand_unrolled_chain(self):
        params = scalar_params(abar=0.5, bcoef=1.0, c=1.0, xs=[1.0, 1.0, 1.0])
        y, final = ssd.scan_recurrent(params)
        np.testing.assert_allclose(y.data.reshape(-1), [1.0, 1.5, 1.75], atol=1e-15)
        assert final.step_index == 3

    def test_zero_input_coupling(self):
        params = scalar_params(abar=0.5, bcoef=0.0, c=1.0, xs=[1.0, 2.0, 3.0])
        y, _ = ssd.scan_recurrent(params)
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))

    def test_split_scan_invariance(self):
        rng = np.random.default_rng(1)
        params = random_params(rng, t=20)
        with tz.no_grad():
            full, _ = ssd.scan_recurrent(params)
            for k in (1, 7, 13, 19):
                head = ssd.SelectiveParams(params.dt[:k], params.a, params.B[:k],
                                           params.C[:k], params.x[:k])
                tail = ssd.SelectiveParams(params.dt[k:], params.a, params.B[k:],
                                           params.C[k:], params.x[k:])
                y1, carry = ssd.scan_recurrent(head)
                y2, _ = ssd.scan_recurrent(tail, initial=carry)
                joined = np.concatenate([y1.data, y2.data], axis=0)
                assert np.abs(joined - full.data).max() <= 1e-12

    def test_rejects_nonpositive_dt(self):
        params = scalar_params(0.5, 1.0, 1.0, [1.0])
        params.dt = Tensor([[0.0]])
        with pytest.raises(ContractError, match="dt"):
            ssd.scan_recurrent(params)

    def test_rejects_nonnegative_a(self):
        params = scalar_params(0.5, 1.0, 1.0, [1.0])
        params.a = Tensor([0.1])
        with pytest.raises(ContractError, match="a"):
            ssd.scan_recurrent(params)


class TestScanConvolutional:
    def test_time_invariant_kernel(self):
        # impulse input reads out the kernel (C bbar, C abar bbar, ...)
        params = scalar_params(abar=0.5, bcoef=1.0, c=1.0, xs=[1.0, 0.0, 0.0])
        y = ssd.scan_convolutional(params)
        np.testing.assert_allclose(y.data.reshape(-1), [1.0, 0.5, 0.25], atol=1e-15)

    def test_zero_input(self):
        params = scalar_params(abar=0.7, bcoef=1.0, c=1.0, xs=[0.0, 0.0, 0.0, 0.0])
        y = ssd.scan_convolutional(params)
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))

    def test_matches_recurrent_oracle_time_varying(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, t=17, g=2, n=6, p=5)
        with tz.no_grad():
            expect, _ = ssd.scan_recurrent(params)
            got = ssd.scan_convolutional(params)
        assert np.abs(got.data - expect.data).max() <= 1e-10

    def test_nonzero_initial_state_rejected(self):
        params = scalar_params(0.5, 1.0, 1.0, [1.0, 1.0])
        bad = ssd.ScanState(tz.ones((1, 1, 1)), 0)
        with pytest.raises(ContractError, match="zero initial state"):
            ssd.scan_convolutional(params, initial=bad)
        ok = ssd.ScanState(tz.zeros((1, 1, 1)), 0)
        ssd.scan_convolutional(params, initial=ok)  # explicit zero is fine


class TestScanChunked:
    def test_single_chunk_equals_convolutional_with_carry(self):
        rng = np.random.default_rng(3)
        params = random_params(rng, t=12)
        with tz.no_grad():
            y_conv = ssd.scan_convolutional(params)
            y_chunk, final = ssd.scan_chunked(params, chunk_len=12)
            y_rec, final_rec = ssd.scan_recurrent(params)
        assert np.abs(y_chunk.data - y_conv.data).max() <= 1e-12
        assert np.abs(final.h.data - final_rec.h.data).max() <= 1e-10

    def test_chunk_len_one_is_recurrent_path(self):
        rng = np.random.default_rng(4)
        params = random_params(rng, t=9)
        with tz.no_grad():
            y1, f1 = ssd.scan_chunked(params, chunk_len=1)
            y2, f2 = ssd.scan_recurrent(params)
        np.testing.assert_array_equal(y1.data, y2.data)
        np.testing.assert_array_equal(f1.h.data, f2.h.data)

    def test_random_chunked_matches_recurrent(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, t=64)
        with tz.no_grad():
            expect, ef = ssd.scan_recurrent(params)
            got, gf = ssd.scan_chunked(params, chunk_len=16)
        assert np.abs(got.data - expect.data).max() <= 1e-8
        assert np.abs(gf.h.data - ef.h.data).max() <= 1e-8

    def test_ragged_tail_and_initial_state(self):
        rng = np.random.default_rng(6)
        params = random_params(rng, t=23)
        init = ssd.ScanState(Tensor(rng.standard_normal((4, 16, 16))), 5)
        with tz.no_grad():
            expect, _ = ssd.scan_recurrent(params, initial=init)
            got, final = ssd.scan_chunked(params, chunk_len=7, initial=init)
        assert np.abs(got.data - expect.data).max() <= 1e-8
        assert final.step_index == 28

    def test_chunk_len_zero_rejected(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ContractError):
            ssd.scan_chunked(random_params(rng, t=4), chunk_len=0)

    def test_float32_inputs_carry_state_in_float64(self):
        rng = np.random.default_rng(8)
        with tz.using_dtype(np.float32):
            params = ssd.SelectiveParams(
                dt=tz.softplus(Tensor(rng.standard_normal((40, 4)), dtype=np.float32)),
                a=tz.neg(tz.exp(Tensor(rng.standard_normal(4), dtype=np.float32))),
                B=Tensor(rng.standard_normal((40, 1, 16)), dtype=np.float32),
                C=Tensor(rng.standard_normal((40, 1, 16)), dtype=np.float32),
                x=Tensor(rng.standard_normal((40, 4, 16)), dtype=np.float32),
            )
            with tz.no_grad():
                y, final = ssd.scan_chunked(params, chunk_len=8)
        assert y.dtype == np.float32 and final.h.dtype == np.float32


class TestProperties:
    def test_three_mode_equivalence_property(self):
        rng = np.random.default_rng(9)
        for case in range(40):
            t = int(rng.integers(1, 65))
            g = int(rng.choice([1, 2]))
            params = random_params(rng, t=t, g=g, n=8, p=6, h=4)
            with tz.no_grad():
                y_rec, _ = ssd.scan_recurrent(params)
                y_conv = ssd.scan_convolutional(params)
                y_chunk, _ = ssd.scan_chunked(params, chunk_len=16)
            assert np.abs(y_rec.data - y_conv.data).max() <= 1e-8, f"case {case}"
            assert np.abs(y_rec.data - y_chunk.data).max() <= 1e-8, f"case {case}"

    def test_exact_zoh_mode_equivalence(self):
        rng = np.random.default_rng(10)
        params = random_params(rng, t=31)
        with tz.no_grad():
            y_rec, _ = ssd.scan_recurrent(params, exact_zoh=True)
            y_conv = ssd.scan_convolutional(params, exact_zoh=True)
            y_chunk, _ = ssd.scan_chunked(params, chunk_len=8, exact_zoh=True)
        assert np.abs(y_rec.data - y_conv.data).max() <= 1e-8
        assert np.abs(y_rec.data - y_chunk.data).max() <= 1e-8
        # exact mode deviates from the simplified rule (phi(z) != 1)
        y_simple, _ = ssd.scan_recurrent(params)
        assert np.abs(y_simple.data - y_rec.data).max() > 1e-4

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(11)
        batched = random_params(rng, t=21, batch=3)
        with tz.no_grad():
            yb, fb = ssd.scan_chunked(batched, chunk_len=8)
            for i in range(3):
                single = ssd.SelectiveParams(
                    batched.dt[i], batched.a, batched.B[i], batched.C[i], batched.x[i]
                )
                ys, fs = ssd.scan_chunked(single, chunk_len=8)
                assert np.abs(yb.data[i] - ys.data).max() <= 1e-12
                assert np.abs(fb.h.data[i] - fs.h.data).max() <= 1e-12

    def test_stability_no_state_explosion(self):
        rng = np.random.default_rng(12)
        t = 4096
        params = random_params(rng, t=t, h=2, p=3, n=4)
        with tz.no_grad():
            _, final, traj = ssd.scan_recurrent(params, collect_states=True)
            abar = np.exp(params.dt.data * params.a.data)
            bbar_x = (
                params.dt.data[:, :, None, None]
                * params.B.data[:, 0][:, None, None, :]
                * params.x.data[:, :, :, None]
            )
        worst_decay = abar.max()
        bound = np.abs(bbar_x).max() / (1.0 - worst_decay)
        assert np.abs(traj.data).max() <= bound + 1e-9
        assert np.isfinite(final.h.data).all()

    def test_gradients_match_across_modes_and_fd(self):
        rng = np.random.default_rng(13)
        t, h, p, g, n = 7, 2, 3, 1, 4
        dt_raw = Tensor(rng.standard_normal((t, h)), requires_grad=True)
        log_a = Tensor(rng.standard_normal(h), requires_grad=True)
        bmat = Tensor(rng.standard_normal((t, g, n)), requires_grad=True)
        cmat = Tensor(rng.standard_normal((t, g, n)), requires_grad=True)
        x = Tensor(rng.standard_normal((t, h, p)), requires_grad=True)
        w = Tensor(rng.standard_normal((t, h, p)))
        leaves = [dt_raw, log_a, bmat, cmat, x]

        def loss_for(mode):
            def fn():
                params = ssd.SelectiveParams(
                    dt=tz.softplus(dt_raw), a=tz.neg(tz.exp(log_a)), B=bmat, C=cmat, x=x
                )
                if mode == "recurrent":
                    y, _ = ssd.scan_recurrent(params)
                elif mode == "chunked":
                    y, _ = ssd.scan_chunked(params, chunk_len=3)
                else:
                    y = ssd.scan_convolutional(params)
                return tz.tsum(tz.mul(y, w))
            return fn

        grads = {}
        for mode in ("recurrent", "chunked", "convolutional"):
            tz.zero_grad(leaves)
            grads[mode] = loss_for(mode)().backward()
        for leaf in leaves:
            assert rel_err(grads["recurrent"][leaf], grads["chunked"][leaf]) < 1e-9
            assert rel_err(grads["recurrent"][leaf], grads["convolutional"][leaf]) < 1e-9

        tz.zero_grad(leaves)
        check_gradients(loss_for("chunked"), leaves)


class TestCountFlops:
    def test_recurrent_linearity_exact(self):
        base = ssd.count_flops(512, 16, 4, 16, "recurrent")
        assert ssd.count_flops(1024, 16, 4, 16, "recurrent") == 2 * base

    def test_chunked_at_least_recurrent_default_dims(self):
        rec = ssd.count_flops(512, 16, 4, 16, "recurrent")
        chunk = ssd.count_flops(512, 16, 4, 16, "chunked", chunk_len=16)
        assert chunk >= rec

    def test_chunked_ratio_exactly_two(self):
        a = ssd.count_flops(512, 16, 4, 16, "chunked", chunk_len=16)
        b = ssd.count_flops(1024, 16, 4, 16, "chunked", chunk_len=16)
        assert b == 2 * a

    def test_convolutional_is_quadratic(self):
        a = ssd.count_flops(256, 16, 4, 16, "convolutional")
        b = ssd.count_flops(512, 16, 4, 16, "convolutional")
        assert b / a > 3.5  # T^2-dominated

    def test_chunk_len_one_equals_recurrent_count(self):
        assert ssd.count_flops(64, 16, 4, 16, "chunked", chunk_len=1) == ssd.count_flops(
            64, 16, 4, 16, "recurrent"
        )

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            ssd.count_flops(0, 16, 4, 16, "recurrent")
        with pytest.raises(ContractError):
            ssd.count_flops(8, 16, 4, 16, "nonsense")
