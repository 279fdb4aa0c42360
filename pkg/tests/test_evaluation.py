import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdvae_vc import evaluation as ev
from cdvae_vc import training as tr

SMALL_PROBE = ev.ProbeConfig(steps=30, batch_size=4, crop_frames=32, conv_channels=(4, 4), freq_strides=(2, 2))


def mcd_reference(ref, cnv, pairs):
    # per-pair loop, written against the textbook definition
    total = 0.0
    for i, j in pairs:
        s = 0.0
        for d in range(1, len(ref[i])):
            s += (float(ref[i][d]) - float(cnv[j][d])) ** 2
        total += 10.0 / math.log(10.0) * math.sqrt(2.0 * s)
    return total / len(pairs)


def brute_force_dtw(a, b):
    na, nb = len(a), len(b)
    d = [[math.sqrt(sum((a[i][k] - b[j][k]) ** 2 for k in range(1, len(a[i])))) for j in range(nb)] for i in range(na)]
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += d[i][j]
        if (i, j) == (na - 1, nb - 1):
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < na and j + dj < nb:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


class TestMcd:
    def test_identity(self, rng):
        x = rng.normal(size=(20, 35))
        assert ev.mcd(x, x) == 0.0

    def test_single_dimension(self):
        a, b = np.zeros((1, 35)), np.zeros((1, 35))
        b[0, 7] = 1.0
        assert ev.mcd(a, b) == pytest.approx(10 / math.log(10) * math.sqrt(2), abs=1e-12)
        assert ev.mcd(a, b) == pytest.approx(6.1418, abs=1e-4)

    def test_energy_excluded(self):
        a, b = np.zeros((3, 35)), np.zeros((3, 35))
        b[:, 0] = 5.0
        assert ev.mcd(a, b) == 0.0

    def test_symmetric(self, rng):
        a, b = rng.normal(size=(10, 35)), rng.normal(size=(10, 35))
        assert ev.mcd(a, b) == pytest.approx(ev.mcd(b, a), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_matches_reference(self, na, nb, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(na, 35)), r.normal(size=(nb, 35))
        pairs = ev.dtw_align(a, b)
        assert abs(ev.mcd(a, b, pairs) - mcd_reference(a.tolist(), b.tolist(), pairs.tolist())) < 1e-9

    def test_nonsilent_filter(self, rng):
        a, b = rng.normal(size=(4, 35)), rng.normal(size=(4, 35))
        mask = np.array([True, False, True, False])
        pairs = [(0, 0), (2, 2)]
        assert ev.mcd(a, b, nonsilent=mask) == pytest.approx(mcd_reference(a, b, pairs), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.mcd(np.zeros((2, 35)), np.zeros((2, 35)), nonsilent=np.zeros(2, bool))

    def test_unequal_needs_alignment(self):
        with pytest.raises(ev.EvaluationError, match="alignment"):
            ev.mcd(np.zeros((2, 35)), np.zeros((3, 35)))


class TestDtw:
    def test_same_sequence_is_diagonal(self, rng):
        a = rng.normal(size=(9, 35))
        path, cost = ev.dtw(a, a)
        assert np.array_equal(path, np.stack([np.arange(9)] * 2, 1)) and cost == 0.0

    def test_duplicated_frame(self, rng):
        a = rng.normal(size=(4, 35))
        b = np.insert(a, 2, a[2], axis=0)
        path, cost = ev.dtw(a, b)
        assert len(path) == 5 and cost == 0.0
        assert brute_force_dtw(a.tolist(), b.tolist()) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_matches_exhaustive(self, na, nb, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(na, 4)), r.normal(size=(nb, 4))
        path, cost = ev.dtw(a, b)
        best = brute_force_dtw(a.tolist(), b.tolist())
        assert abs(cost - best) < 1e-9
        assert abs(ev.path_cost(a, b, path) - best) < 1e-9
        steps = np.diff(path, axis=0)
        assert tuple(path[0]) == (0, 0) and tuple(path[-1]) == (na - 1, nb - 1)
        assert all(tuple(s) in {(1, 0), (0, 1), (1, 1)} for s in steps)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_not_worse_than_diagonal(self, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(n, 5)), r.normal(size=(n, 5))
        diag = np.stack([np.arange(n)] * 2, 1)
        assert ev.dtw(a, b)[1] <= ev.path_cost(a, b, diag) + 1e-12


class TestLatentDistance:
    def test_identity(self, rng):
        z = rng.normal(size=(7, 16))
        d = ev.latent_distance(z, z)
        assert d.rmse == 0.0 and d.cosine == pytest.approx(1.0)

    def test_orthogonal(self):
        a = np.tile(np.eye(16)[0], (5, 1))
        b = np.tile(np.eye(16)[1], (5, 1))
        assert ev.latent_distance(a, b).cosine == 0.0

    def test_zero_vectors_skipped(self):
        d = ev.latent_distance(np.ones((6, 16)), np.zeros((6, 16)))
        assert d.rmse == 1.0 and math.isnan(d.cosine) and d.n_cosine_skipped == 6

    def test_partial_skip(self):
        a = np.ones((3, 4))
        b = np.ones((3, 4))
        b[1] = 0
        d = ev.latent_distance(a, b)
        assert d.cosine == pytest.approx(1.0) and d.n_cosine_skipped == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(n, 16)), r.normal(size=(n + 2, 16))
        pairs = ev.dtw_align(a, b, dims=slice(None))
        pa, pb = r.permutation(n), r.permutation(n + 2)
        inv_a, inv_b = np.argsort(pa), np.argsort(pb)
        moved = np.stack([inv_a[pairs[:, 0]], inv_b[pairs[:, 1]]], 1)
        x, y = ev.latent_distance(a, b, pairs), ev.latent_distance(a[pa], b[pb], moved)
        assert x.rmse == pytest.approx(y.rmse, rel=1e-12) and x.cosine == pytest.approx(y.cosine, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.latent_distance(np.ones((2, 3)), np.ones((2, 3)), alignment=np.zeros((0, 2)))


class TestProbe:
    def test_targets_standardized(self, small_corpus):
        t = ev.probe_targets(small_corpus)
        allf = np.concatenate([f for f, _ in t])
        assert abs(allf.mean()) < 1e-12 and abs(allf.std() - 1) < 1e-12
        assert all(np.array_equal(uv, u.uv) for (_, uv), u in zip(t, small_corpus))

    def test_deterministic(self, small_corpus):
        t = ev.probe_targets(small_corpus)
        lat = [np.random.default_rng(i).normal(size=(len(f), 4)) for i, (f, _) in enumerate(t)]
        a, b = ev.train_f0_probe(lat, t, SMALL_PROBE), ev.train_f0_probe(lat, t, SMALL_PROBE)
        assert a == b and len(a.mse_curve) == 30

    def test_zero_latents_near_bound(self, small_corpus):
        t = ev.probe_targets(small_corpus)
        r = ev.train_f0_probe([np.zeros((len(f), 4)) for f, _ in t], t, SMALL_PROBE)
        assert r.constant_predictor_mse == pytest.approx(1.0, abs=1e-6)  # float32 targets
        assert r.final_mse >= 0.9

    def test_too_few_utterances(self, small_corpus):
        t = ev.probe_targets(small_corpus[:2])
        with pytest.raises(ev.ft.ConfigurationError, match="batch_size"):
            ev.train_f0_probe([np.zeros((len(f), 4)) for f, _ in t], t, ev.ProbeConfig(batch_size=16))

    def test_config_roundtrip(self):
        assert ev.ProbeConfig.from_dict(SMALL_PROBE.to_dict()) == SMALL_PROBE
        with pytest.raises(ev.ft.ConfigurationError, match="equal length"):
            ev.ProbeConfig(conv_channels=(4, 4))
        with pytest.raises(ev.ft.ConfigurationError, match="standardize"):
            ev.ProbeConfig(standardize="utterance")
        with pytest.raises(ev.ft.ConfigurationError):
            ev.ProbeConfig.from_dict({"nope": 1})


@pytest.fixture(scope="module")
def systems(small_corpus):
    out = {}
    for name, cond in (("FCN", False), ("F0-FCN", True)):
        cfg = tr.TrainConfig(latent_dim=4, speaker_dim=4, f0_conditioning=cond)
        out[name] = tr.init_state(cfg, small_corpus, dict(conv_channels=(4, 4), freq_strides=(4, 4))).model.eval()
    return out


class TestPairwise:
    def test_report(self, systems, small_corpus):
        rep = ev.evaluate_pairwise(systems, small_corpus)
        n_spk = len({u.speaker for u in small_corpus})
        assert len(rep.entries) == 2 * n_spk * (n_spk - 1)
        for system, metrics in rep.averages.items():
            es = [e for e in rep.entries if e.system == system]
            for metric, cols in metrics.items():
                assert abs(cols["Avg."] - np.mean([getattr(e, metric) for e in es])) < 1e-9
                for g, v in cols.items():
                    if g != "Avg.":
                        assert abs(v - np.mean([getattr(e, metric) for e in es if e.group == g])) < 1e-9
        assert {e.group for e in rep.entries} == {"F-F", "F-M", "M-F", "M-M"}
        assert rep.meta["reference_full_scale_mcd_db"] == {"CDVAE": 6.42, "FCN-CDVAE": 6.39, "F0-FCN-CDVAE": 6.38}
        text = rep.tables()
        assert "F-F" in text and "Avg." in text and "F0-FCN" in text

    def test_deterministic(self, systems, small_corpus):
        a = ev.evaluate_pairwise(systems, small_corpus, pairs=[("F1", "M1")], probe=SMALL_PROBE, split=None)
        b = ev.evaluate_pairwise(systems, small_corpus, pairs=[("F1", "M1")], probe=SMALL_PROBE, split=None)
        assert a.to_dict() == b.to_dict()
        assert set(a.probes) == set(systems)

    def test_missing_parallel_data(self, systems, small_corpus):
        with pytest.raises(ev.EvaluationError, match="F1->nobody"):
            ev.evaluate_pairwise(systems, small_corpus, pairs=[("F1", "nobody")])
