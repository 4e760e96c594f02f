import numpy as np
import pytest

import depthkit
import depthkit_bridge as bridge
from depthkit import DepthMap, eg_ssi_loss, select_patches
from depthkit.metrics import AlignmentMode, ause, depth_metrics, spearman


def _case(seed, h=48, w=56):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.2, 2.0, (h, w))
    gt = rng.uniform(0.2, 2.0, (h, w))
    mask = rng.uniform(size=(h, w)) < 0.9
    rgb = rng.uniform(0, 255, (h, w, 3))
    return pred, gt, mask, rgb


class TestVersion:
    def test_matches_core(self):
        assert bridge.api_version() == depthkit.__version__


class TestEgSsiParity:
    def test_parity_64bit(self):
        for seed in range(10):
            pred, gt, mask, rgb = _case(seed)
            patches = select_patches(rgb, seed=seed, count=16)
            core = eg_ssi_loss(pred, gt, mask, patches, want_grad=True)
            value, grad = bridge.bound_eg_ssi(pred, gt, mask, rgb, seed=seed, count=16)
            assert abs(value - core.value) <= 1e-12
            assert np.abs(grad - core.grads["inv_depth"]).max() <= 1e-12

    def test_parity_32bit_staging(self):
        pred, gt, mask, rgb = _case(123)
        p32 = pred.astype(np.float32)
        g32 = gt.astype(np.float32)
        v32, grad32 = bridge.bound_eg_ssi(p32, g32, mask, rgb, seed=1, count=16)
        # staged exactly once: identical to running the core on the upcast data
        patches = select_patches(rgb, seed=1, count=16)
        core = eg_ssi_loss(p32.astype(np.float64), g32.astype(np.float64),
                           mask, patches, want_grad=True)
        assert abs(v32 - core.value) <= 1e-12
        # and within float32 resolution of the float64 pipeline
        v64, _ = bridge.bound_eg_ssi(pred, gt, mask, rgb, seed=1, count=16)
        assert abs(v32 - v64) <= 1e-7 * max(1.0, abs(v64))
        assert grad32.dtype == np.float64

    def test_zero_on_identical(self):
        pred, _, mask, rgb = _case(7)
        value, grad = bridge.bound_eg_ssi(pred, pred.copy(), mask, rgb, seed=0)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_wrong_shape_typed_error(self):
        pred, gt, mask, rgb = _case(8)
        with pytest.raises(bridge.InputMismatchError):
            bridge.bound_eg_ssi(pred, gt[:-1], mask, rgb, seed=0)
        with pytest.raises(bridge.InputMismatchError):
            bridge.bound_eg_ssi(pred, gt, mask[:, :-1], rgb, seed=0)
        with pytest.raises(bridge.InputMismatchError):
            bridge.bound_eg_ssi(pred, gt, mask, rgb[..., :2], seed=0)

    def test_wrong_dtype_typed_error(self):
        pred, gt, mask, rgb = _case(9)
        with pytest.raises(bridge.InputMismatchError):
            bridge.bound_eg_ssi(pred.astype(np.int32), gt, mask, rgb, seed=0)

    def test_noncontiguous_rejected(self):
        pred, gt, mask, rgb = _case(10)
        with pytest.raises(bridge.InputMismatchError):
            bridge.bound_eg_ssi(np.asfortranarray(pred), gt, mask, rgb, seed=0)

    def test_degenerate_mapped(self):
        flat = np.full((32, 32), 2.0)
        rgb = np.zeros((32, 32, 3))
        rgb[:, 16:] = 255.0
        with pytest.raises(bridge.DegenerateInputError):
            bridge.bound_eg_ssi(flat, flat, None, rgb, seed=0)


class TestMetricsParity:
    def test_parity_random_cases(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            g = rng.uniform(1, 10, (20, 24))
            d = g * np.exp(rng.normal(0, 0.2, g.shape))
            sigma = rng.uniform(0.01, 1.0, g.shape)
            rec = bridge.bound_metrics(d, g, sigma=sigma, align="median")
            core = depth_metrics(DepthMap(d), DepthMap(g), AlignmentMode.MEDIAN_SCALE)
            for key in ("delta1", "delta2", "delta3", "arel", "rms", "si_log"):
                assert abs(rec[key] - getattr(core, key)) <= 1e-12
            a, na, _ = ause(DepthMap(d), DepthMap(g), sigma)
            assert rec["ause"] == a and rec["nause"] == na
            err = np.abs(np.log(d) - np.log(g))
            assert abs(rec["spearman"] - spearman(sigma, err)) <= 1e-12

    def test_perfect_input(self):
        rng = np.random.default_rng(11)
        g = rng.uniform(1, 10, (16, 16))
        rec = bridge.bound_metrics(g, g.copy())
        assert rec["delta1"] == 100.0 and rec["arel"] == 0.0

    def test_empty_overlap_typed_error(self):
        bad = np.full((8, 8), np.nan)
        good = np.full((8, 8), 2.0)
        with pytest.raises(bridge.DegenerateInputError):
            bridge.bound_metrics(bad, good)

    def test_unknown_alignment_typed_error(self):
        g = np.full((8, 8), 2.0)
        with pytest.raises(bridge.UsageError):
            bridge.bound_metrics(g, g, align="nope")


class TestGilRelease:
    def test_concurrent_calls_overlap(self):
        # the patch kernel drops the interpreter lock: two concurrent calls
        # must finish in well under twice the serial time on a 2+ core host
        import os
        import time
        from concurrent.futures import ThreadPoolExecutor

        if (os.cpu_count() or 1) < 2:
            pytest.skip("needs >= 2 cores")
        rng = np.random.default_rng(12)
        pred = rng.uniform(0.2, 2.0, (768, 768))
        gt = rng.uniform(0.2, 2.0, (768, 768))
        rgb = rng.uniform(0, 255, (768, 768, 3))

        def call():
            return bridge.bound_eg_ssi(pred, gt, None, rgb, seed=3, count=512)

        call()  # warmup
        t0 = time.perf_counter()
        call()
        serial = time.perf_counter() - t0
        t0 = time.perf_counter()
        with ThreadPoolExecutor(2) as pool:
            list(pool.map(lambda _: call(), range(2)))
        parallel = time.perf_counter() - t0
        assert parallel < 1.8 * serial
