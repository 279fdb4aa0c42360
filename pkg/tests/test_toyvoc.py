import numpy as np
import pytest

from cdvae_vc import features as ft
from cdvae_vc import toyvoc as tv


def test_deterministic(small_spec):
    a, b = tv.generate_corpus(small_spec), tv.generate_corpus(small_spec)
    for u, v in zip(a, b):
        for name in ft.ARRAY_FIELDS:
            assert getattr(u, name).tobytes() == getattr(v, name).tobytes()
        assert u.meta == v.meta


def test_counter_based_seeding(small_spec, small_corpus):
    # any single utterance can be generated on its own, in any order
    u = tv.generate_utterance(small_spec, 2, 3)
    ref = small_corpus[2 * small_spec.utterances_per_speaker + 3]
    assert u.sp.tobytes() == ref.sp.tobytes()
    assert u.f0.tobytes() == ref.f0.tobytes()


def test_seed_changes_corpus(small_spec):
    from dataclasses import replace
    other = tv.generate_corpus(replace(small_spec, seed=small_spec.seed + 1))
    assert not np.array_equal(other[0].sp, tv.generate_corpus(small_spec)[0].sp)


def test_container_invariants(small_corpus):
    for u in small_corpus:
        u.validate()
        assert u.sp.shape[1] == 513 and u.mcc.shape[1] == 35
        assert np.all((u.ap >= 0) & (u.ap <= 1))
        assert np.all(u.contf0 > 0)


def test_parallel_structure(small_spec, small_corpus):
    by = {(u.speaker, u.meta["content"]): u for u in small_corpus}
    names = small_spec.speaker_names()
    for c in range(small_spec.n_contents):
        utts = [by[(s, c)] for s in names]
        assert len({u.n_frames for u in utts}) == 1
        assert len({u.meta["content"] for u in utts}) == 1
        # same voicing pattern, different speakers' spectra
        for u in utts[1:]:
            np.testing.assert_array_equal(u.uv, utts[0].uv)
            assert not np.allclose(u.sp, utts[0].sp)


def test_voicing_runs(small_corpus):
    for u in small_corpus:
        assert u.uv.max() == 1 and u.uv.min() == 0
        ft.continuous_f0(u.f0)


def test_speaker_f0_separation():
    spec = tv.ToyCorpusSpec()
    corpus = tv.generate_corpus(spec)
    means = [ft.f0_statistics([u for u in corpus if u.speaker == s]).log_mean for s in spec.speaker_names()]
    gaps = np.abs(np.subtract.outer(means, means))[np.triu_indices(len(means), 1)]
    assert gaps.min() >= spec.f0_separation


def test_f0_leaks_into_sp(small_spec):
    # same speaker and content, different F0 draw: only voiced spectra change
    a = tv.generate_utterance(small_spec, 0, 1)
    b = tv.generate_utterance(small_spec, 0, 1 + small_spec.n_contents)
    assert a.meta["content"] == b.meta["content"]
    voiced = a.uv > 0
    assert not np.allclose(a.f0[voiced], b.f0[voiced])
    np.testing.assert_allclose(a.sp[~voiced], b.sp[~voiced], rtol=1e-6)
    dv = np.abs(np.log(a.sp[voiced]) - np.log(b.sp[voiced])).mean()
    assert dv > 0.1
    assert np.abs(a.mcc[voiced] - b.mcc[voiced]).mean() > 1e-3


def test_length_jitter(small_spec):
    from dataclasses import replace
    spec = replace(small_spec, length_jitter=5)
    lengths = {tv.generate_utterance(spec, s, 0).n_frames for s in range(spec.n_speakers)}
    assert len(lengths) > 1


def test_silence_at_edges(small_corpus):
    u = small_corpus[0]
    mask = ft.nonsilent_mask(u.energy)
    assert not mask[0] and not mask[-1] and mask.sum() > u.n_frames // 2


def test_split_labels(small_spec, small_corpus):
    test = {u.meta["content"] for u in small_corpus if u.meta["split"] == "test"}
    assert test == {small_spec.n_contents - 1}


def test_invalid_spec():
    with pytest.raises(ValueError):
        tv.ToyCorpusSpec(n_contents=5, utterances_per_speaker=3)
    with pytest.raises(ValueError):
        tv.ToyCorpusSpec(n_speakers=2, f0_range_hz=((100, 120), (101, 121)))


def test_write_and_load(tmp_path, small_spec, small_corpus):
    tv.write_corpus(small_corpus, tmp_path, small_spec)
    loaded = tv.load_corpus(tmp_path)
    assert len(loaded) == len(small_corpus)
    assert loaded[5].mcc.tobytes() == small_corpus[5].mcc.astype(np.float32).tobytes()
    import json
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["spec"]["seed"] == small_spec.seed
    assert {s["gender"] for s in manifest["speakers"]} == {"F", "M"}
