import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdvae_vc import features as ft


def _frame(values):
    raw = np.zeros(ft.SP_DIM)
    raw[: len(values)] = values
    return raw


class TestNormalizeSp:
    def test_small_frame(self):
        unit, energy = ft.normalize_sp(_frame([2, 3, 5]))
        assert energy == 10
        np.testing.assert_array_equal(unit[:3], [0.2, 0.3, 0.5])
        assert np.all(unit[3:] == 0)

    def test_uniform_frame(self):
        unit, energy = ft.normalize_sp(np.full(ft.SP_DIM, 0.7))
        np.testing.assert_allclose(unit, 1 / 513, rtol=1e-15)
        assert energy == pytest.approx(513 * 0.7, rel=1e-15)

    def test_zero_frame_rejected(self):
        with pytest.raises(ft.DegenerateFrameError):
            ft.normalize_sp(np.zeros(ft.SP_DIM))

    def test_zero_row_in_stack_rejected(self):
        raw = np.ones((3, 8))
        raw[1] = 0
        with pytest.raises(ft.DegenerateFrameError, match=r"\[1\]"):
            ft.normalize_sp(raw)

    @given(arrays(np.float64, (4, 16), elements=st.floats(1e-6, 1e6)))
    def test_roundtrip(self, raw):
        unit, energy = ft.normalize_sp(raw)
        np.testing.assert_allclose(unit.sum(1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(ft.denormalize_sp(unit, energy), raw, rtol=1e-13)


class TestMcc:
    def test_flat_frame(self):
        c = ft.extract_mcc(np.full(ft.SP_DIM, 1 / ft.SP_DIM))
        assert c.shape == (35,)
        assert abs(c[0]) > 0
        assert np.max(np.abs(c[1:])) < 1e-8
        assert c[0] == pytest.approx(0.5 * math.log(1 / 513), abs=1e-10)

    def test_default_dimension(self, rng):
        sp = rng.uniform(0.1, 1, (7, ft.SP_DIM))
        assert ft.extract_mcc(sp).shape == (7, 35)

    def test_projection_idempotent(self, rng):
        sp, _ = ft.normalize_sp(rng.uniform(0.05, 1.0, (5, ft.SP_DIM)))
        c = ft.extract_mcc(sp)
        rebuilt = np.exp(2 * ft.mcc_to_log_amplitude(c))
        np.testing.assert_allclose(ft.extract_mcc(rebuilt), c, atol=1e-6)

    @pytest.mark.parametrize("k", [1e-3, 0.5, 7.0, 1e4])
    def test_scaling_only_moves_c0(self, rng, k):
        sp = rng.uniform(0.01, 1.0, (3, ft.SP_DIM))
        c, ck = ft.extract_mcc(sp), ft.extract_mcc(sp * k)
        np.testing.assert_allclose(ck[:, 1:], c[:, 1:], atol=1e-10)
        np.testing.assert_allclose(ck[:, 0] - c[:, 0], 0.5 * math.log(k), atol=1e-10)

    @pytest.mark.parametrize("order", [0, 1, 514])
    def test_bad_order(self, order):
        with pytest.raises(ft.ConfigurationError):
            ft.extract_mcc(np.ones(ft.SP_DIM), order=order)

    def test_floor_keeps_zero_bins_finite(self):
        c = ft.extract_mcc(_frame([1.0]))
        assert np.all(np.isfinite(c))

    def test_mcc_to_sp_is_unit_sum(self, rng):
        sp = ft.mcc_to_sp(rng.normal(0, 0.1, (4, 35)))
        np.testing.assert_allclose(sp.sum(1), 1.0, rtol=1e-12)


class TestContinuousF0:
    def test_interior_gap(self):
        cf, uv = ft.continuous_f0(np.array([100.0, 0, 0, 160]))
        np.testing.assert_allclose(cf, [100, 120, 140, 160])
        np.testing.assert_array_equal(uv, [1, 0, 0, 1])

    def test_fully_voiced(self):
        f0 = np.array([110.0, 120.5, 99.0])
        cf, uv = ft.continuous_f0(f0)
        np.testing.assert_array_equal(cf, f0)
        np.testing.assert_array_equal(uv, 1)

    def test_edge_hold(self):
        cf, uv = ft.continuous_f0(np.array([0.0, 0, 150]))
        np.testing.assert_array_equal(cf, [150, 150, 150])
        np.testing.assert_array_equal(uv, [0, 0, 1])

    def test_trailing_edge_hold(self):
        cf, _ = ft.continuous_f0(np.array([0.0, 90, 0, 0]))
        np.testing.assert_array_equal(cf, [90, 90, 90, 90])

    def test_all_unvoiced(self):
        with pytest.raises(ft.AllUnvoicedError):
            ft.continuous_f0(np.zeros(5))

    @given(arrays(np.float64, st.integers(1, 40),
                  elements=st.one_of(st.just(0.0), st.floats(50, 400))))
    def test_idempotent_on_voiced_projection(self, f0):
        if not np.any(f0 > 0):
            return
        cf, uv = ft.continuous_f0(f0)
        assert np.all(cf > 0)
        cf2, uv2 = ft.continuous_f0(cf * uv)
        np.testing.assert_array_equal(cf2, cf)
        np.testing.assert_array_equal(uv2, uv)


def _utt(f0, speaker="A"):
    f0 = np.asarray(f0, dtype=np.float64)
    n = len(f0)
    cf, uv = ft.continuous_f0(f0)
    sp = np.full((n, 4), 0.25)
    return ft.UtteranceFeatures(sp, np.ones(n), np.zeros((n, 3)), np.zeros((n, 4)), f0, cf, uv, speaker)


class TestF0Stats:
    def test_constant_f0_is_degenerate(self):
        with pytest.raises(ft.InsufficientDataError):
            ft.f0_statistics([_utt([100.0, 100.0]), _utt([100.0, 0.0])])

    def test_two_values(self):
        s = ft.f0_statistics([_utt([100.0, 0.0, 100 * math.e])])
        assert s.log_mean == pytest.approx(math.log(100) + 0.5, abs=1e-12)
        # population std of {a, a+1}
        assert s.log_std == pytest.approx(0.5, abs=1e-12)
        assert s.voiced_frame_count == 2

    def test_unvoiced_frames_ignored(self):
        a = ft.f0_statistics([_utt([120.0, 130.0, 150.0])])
        b = ft.f0_statistics([_utt([0.0, 120.0, 0.0, 130.0, 150.0, 0.0]), _utt([0.0, 0.0, 130.0])])
        c = ft.f0_statistics([_utt([120.0, 130.0, 150.0]), _utt([130.0])])
        assert ft.f0_statistics([_utt([0.0, 120.0, 0.0, 130.0, 150.0, 0.0])]) == a
        assert b == c

    def test_too_few_frames(self):
        with pytest.raises(ft.InsufficientDataError):
            ft.f0_statistics([_utt([0.0, 120.0, 0.0])])


class TestConvertF0:
    def test_identity(self):
        s = ft.F0Stats("a", 5.0, 0.2, 10)
        f0 = np.array([0.0, 100.0, 180.0, 0.0])
        np.testing.assert_array_equal(ft.convert_f0(f0, s, s), f0)

    def test_mean_shift(self):
        sig = 0.3
        src, tgt = ft.F0Stats("a", math.log(100), sig, 5), ft.F0Stats("b", math.log(200), sig, 5)
        out = ft.convert_f0(np.array([100.0, 100 * math.exp(sig), 0.0]), src, tgt)
        np.testing.assert_allclose(out, [200.0, 200 * math.exp(sig), 0.0], rtol=1e-12)

    def test_bad_stats(self):
        with pytest.raises(ft.ConfigurationError):
            ft.convert_f0(np.ones(3), ft.F0Stats("a", 0, 0, 1), ft.F0Stats("b", 0, 1, 1))

    @given(st.floats(3, 6), st.floats(0.05, 0.5), st.floats(3, 6), st.floats(0.05, 0.5),
           arrays(np.float64, 12, elements=st.one_of(st.just(0.0), st.floats(40, 600))))
    def test_swapped_stats_invert(self, m1, s1, m2, s2, f0):
        a, b = ft.F0Stats("a", m1, s1, 2), ft.F0Stats("b", m2, s2, 2)
        back = ft.convert_f0(ft.convert_f0(f0, a, b), b, a)
        voiced = f0 > 0
        np.testing.assert_allclose(back[voiced], f0[voiced], rtol=1e-9)
        assert np.all(back[~voiced] == 0)

    def test_corpus_moments_match_target(self, small_corpus):
        src_utts = [u for u in small_corpus if u.speaker == "F1"]
        src = ft.f0_statistics(src_utts)
        tgt = ft.F0Stats("x", 4.7, 0.11, 1)
        conv = np.concatenate([ft.convert_f0(u.f0.astype(np.float64), src, tgt) for u in src_utts])
        lf0 = np.log(conv[conv > 0])
        assert lf0.mean() == pytest.approx(tgt.log_mean, abs=1e-6)
        assert lf0.std() == pytest.approx(tgt.log_std, abs=1e-6)


class TestContainer:
    def test_roundtrip_bit_exact(self, tmp_path, small_corpus):
        u = small_corpus[0]
        ft.save_features(u, tmp_path / "a.feat")
        v = ft.load_features(tmp_path / "a.feat")
        for name in ft.ARRAY_FIELDS:
            a = getattr(u, name).astype(np.float32)
            b = getattr(v, name)
            assert b.dtype == np.float32
            assert a.tobytes() == b.tobytes(), name
        assert (v.speaker, v.frame_period_ms, v.sample_rate_hz) == (u.speaker, 5.0, 22050)
        assert v.meta == u.meta

    def test_missing_array(self, tmp_path, small_corpus):
        import cdvae_vc.features as mod
        u = small_corpus[0]
        orig = mod.ARRAY_FIELDS
        try:
            mod.ARRAY_FIELDS = tuple(n for n in orig if n != "uv")
            ft.save_features(u, tmp_path / "a.feat")
        finally:
            mod.ARRAY_FIELDS = orig
        with pytest.raises(ft.FeatureFormatError, match="uv"):
            ft.load_features(tmp_path / "a.feat")

    def test_frame_count_mismatch_on_save(self, tmp_path, small_corpus):
        u = small_corpus[0]
        bad = ft.UtteranceFeatures(**{**u.arrays(), "f0": u.f0[:-1]}, speaker=u.speaker)
        with pytest.raises(ft.FeatureFormatError):
            ft.save_features(bad, tmp_path / "a.feat")

    def test_frame_count_mismatch_on_load(self, tmp_path, small_corpus):
        import json
        u = small_corpus[0]
        path = ft.save_features(u, tmp_path / "a.feat")
        meta = json.loads(path.with_suffix(".json").read_text())
        meta["n_frames"] += 1
        path.with_suffix(".json").write_text(json.dumps(meta))
        with pytest.raises(ft.FeatureFormatError, match="frames"):
            ft.load_features(path)

    def test_missing_sidecar(self, tmp_path, small_corpus):
        path = ft.save_features(small_corpus[0], tmp_path / "a.feat")
        path.with_suffix(".json").unlink()
        with pytest.raises(ft.FeatureFormatError):
            ft.load_features(path)

    def test_no_temp_files_left(self, tmp_path, small_corpus):
        ft.save_features(small_corpus[0], tmp_path / "a.feat")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["a.feat", "a.json"]

    def test_byte_layout(self, tmp_path):
        import struct
        u = _utt([100.0, 0.0])
        path = ft.save_features(u, tmp_path / "x.feat")
        blob = path.read_bytes()
        assert blob[:4] == b"CDVF"
        assert struct.unpack_from("<II", blob, 4) == (1, 7)
        (nlen,) = struct.unpack_from("<H", blob, 12)
        assert blob[14:14 + nlen] == b"sp"
        assert struct.unpack_from("<II", blob, 14 + nlen) == (2, 4)
        first = np.frombuffer(blob, "<f4", count=1, offset=22 + nlen)
        assert first[0] == np.float32(0.25)


def test_nonsilent_mask():
    e = np.array([1.0, 1e-4, 1e-2, 2e-3])
    np.testing.assert_array_equal(ft.nonsilent_mask(e), [True, False, True, True])
