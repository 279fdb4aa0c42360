"""Deterministic synthetic vocoder-feature corpus.

Every utterance is rendered from three independently drawn factors:

* content: a template of phone-like segments (voicing flag and formant
  targets) on a normalized time axis, shared by all speakers;
* speaker: spectral tilt, formant scaling and an F0 range;
* F0: a per-utterance contour (level, declination, slow vibrato) drawn
  inside the speaker's range, independent of the content.

Voiced frames carry a harmonic comb at multiples of F0 and a small
F0-dependent tilt, so the spectral envelope is F0 dependent by construction.
All randomness is counter-based (one generator per (content) / (speaker) /
(utterance) key), so generating a subset or in parallel gives identical
results.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features as ft

_CONTENT, _SPEAKER, _UTTERANCE = 1, 2, 3
_SILENCE_FRAMES = 6


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_speakers: int = 4
    n_contents: int = 10
    utterances_per_speaker: int = 10
    frames_per_utterance: tuple[int, int] = (140, 220)
    # per-speaker (min, max) Hz; None -> derived from gender defaults
    f0_range_hz: tuple[tuple[float, float], ...] | None = None
    genders: tuple[str, ...] | None = None
    seed: int = 0
    test_contents: int = 2
    length_jitter: int = 0
    f0_separation: float = 0.1
    f0_tilt_coupling_db: float = 6.0
    # scales the within-speaker F0 movement (level, declination, vibrato)
    intonation_scale: float = 1.0
    n_bins: int = ft.SP_DIM
    mcc_order: int = ft.MCC_ORDER

    def __post_init__(self):
        errors = []
        if self.n_speakers < 1 or self.n_contents < 1:
            errors.append("n_speakers and n_contents must be >= 1")
        if self.utterances_per_speaker < self.n_contents:
            errors.append("utterances_per_speaker must be >= n_contents (parallel corpus)")
        lo, hi = self.frames_per_utterance
        if lo < 2 * _SILENCE_FRAMES + 8 or hi < lo:
            errors.append(f"frames_per_utterance must satisfy {2 * _SILENCE_FRAMES + 8} <= min <= max")
        if self.f0_range_hz is not None and len(self.f0_range_hz) != self.n_speakers:
            errors.append("f0_range_hz needs one (min, max) per speaker")
        if self.genders is not None and len(self.genders) != self.n_speakers:
            errors.append("genders needs one entry per speaker")
        if self.intonation_scale < 0:
            errors.append("intonation_scale must be >= 0")
        if not 0 <= self.test_contents < self.n_contents:
            errors.append("test_contents must be in [0, n_contents)")
        if errors:
            raise ValueError("; ".join(errors))
        centres = np.log([math.sqrt(a * b) for a, b in self.speaker_f0_ranges()])
        gaps = np.abs(centres[:, None] - centres[None, :]) + np.eye(len(centres)) * 1e9
        if len(centres) > 1 and gaps.min() < self.f0_separation:
            raise ValueError("speaker F0 ranges are closer than f0_separation")

    def speaker_genders(self) -> tuple[str, ...]:
        if self.genders is not None:
            return tuple(self.genders)
        return tuple("FM"[i % 2] for i in range(self.n_speakers))

    def speaker_names(self) -> tuple[str, ...]:
        counts = {"F": 0, "M": 0}
        names = []
        for g in self.speaker_genders():
            counts[g] = counts.get(g, 0) + 1
            names.append(f"{g}{counts[g]}")
        return tuple(names)

    def speaker_f0_ranges(self) -> tuple[tuple[float, float], ...]:
        if self.f0_range_hz is not None:
            return tuple(tuple(map(float, r)) for r in self.f0_range_hz)
        ranges, counts = [], {"F": 0, "M": 0}
        for g in self.speaker_genders():
            k = counts.get(g, 0)
            counts[g] = k + 1
            centre = (205.0 if g == "F" else 105.0) * 1.16**k
            ranges.append((centre / 1.2, centre * 1.2))
        return tuple(ranges)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCorpusSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ft.ConfigurationError(f"unknown corpus keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("frames_per_utterance") is not None:
            d["frames_per_utterance"] = tuple(d["frames_per_utterance"])
        if d.get("f0_range_hz") is not None:
            d["f0_range_hz"] = tuple(tuple(r) for r in d["f0_range_hz"])
        if d.get("genders") is not None:
            d["genders"] = tuple(d["genders"])
        return cls(**d)


@dataclass
class _Content:
    length: int
    boundaries: np.ndarray      # segment edges on [0, 1]
    voiced: np.ndarray          # per segment
    formants: np.ndarray        # per segment, 3 formant frequencies (Hz)
    loudness_db: np.ndarray     # per segment


@dataclass
class _Speaker:
    name: str
    gender: str
    f0_range: tuple[float, float]
    tilt_db_per_oct: float
    formant_scale: float


def _rng(seed: int, kind: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, kind, *keys]))


def _draw_content(spec: ToyCorpusSpec, c: int) -> _Content:
    rng = _rng(spec.seed, _CONTENT, c)
    lo, hi = spec.frames_per_utterance
    length = int(rng.integers(lo, hi + 1))
    n_seg = int(rng.integers(5, 9))
    edges = np.sort(rng.uniform(0.0, 1.0, n_seg - 1))
    boundaries = np.concatenate([[0.0], edges, [1.0]])
    voiced = rng.uniform(size=n_seg) < 0.7
    voiced[int(rng.integers(n_seg))] = True
    formants = np.stack([
        rng.uniform(300, 900, n_seg),
        rng.uniform(900, 2400, n_seg),
        rng.uniform(2400, 3600, n_seg),
    ], axis=1)
    loudness = rng.uniform(-6.0, 0.0, n_seg)
    return _Content(length, boundaries, voiced, formants, loudness)


def _draw_speaker(spec: ToyCorpusSpec, s: int) -> _Speaker:
    rng = _rng(spec.seed, _SPEAKER, s)
    gender = spec.speaker_genders()[s]
    if gender == "F":
        tilt, scale = rng.uniform(-7.0, -5.0), rng.uniform(1.10, 1.18)
    else:
        tilt, scale = rng.uniform(-11.0, -9.0), rng.uniform(0.92, 1.0)
    return _Speaker(spec.speaker_names()[s], gender, spec.speaker_f0_ranges()[s], tilt, scale)


def _segment_tracks(content: _Content, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame formants (smoothly interpolated), voicing and loudness."""
    t = (np.arange(n) + 0.5) / n
    seg = np.clip(np.searchsorted(content.boundaries, t, side="right") - 1, 0, len(content.voiced) - 1)
    centres = 0.5 * (content.boundaries[:-1] + content.boundaries[1:])
    formants = np.stack([np.interp(t, centres, content.formants[:, j]) for j in range(3)], axis=1)
    loud = np.interp(t, centres, content.loudness_db)
    voiced = content.voiced[seg].copy()
    voiced[:_SILENCE_FRAMES] = False
    voiced[-_SILENCE_FRAMES:] = False
    return formants, voiced, loud


def _f0_contour(spec: ToyCorpusSpec, speaker: _Speaker, s: int, u: int, n: int) -> np.ndarray:
    rng = _rng(spec.seed, _UTTERANCE, s, u, 0)
    lo, hi = speaker.f0_range
    centre = math.sqrt(lo * hi)
    k = spec.intonation_scale
    level = math.log(centre) + k * rng.uniform(-0.1, 0.1)
    t = np.linspace(0.0, 1.0, n)
    slope = k * rng.uniform(-0.15, 0.05)
    vib = k * rng.uniform(0.03, 0.08) * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t + rng.uniform(0, 2 * np.pi))
    lf0 = level + slope * (t - 0.5) + vib
    return np.clip(np.exp(lf0), lo * 0.8, hi * 1.25)


def _render(spec: ToyCorpusSpec, content: _Content, speaker: _Speaker, f0_track: np.ndarray,
            n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    formants, voiced, loud = _segment_tracks(content, n)
    freqs = np.arange(spec.n_bins) * (ft.SAMPLE_RATE_HZ / 2) / (spec.n_bins - 1)
    octaves = np.log2((freqs + 100.0) / 600.0)

    env_db = np.zeros((n, spec.n_bins))
    bandwidths = np.array([90.0, 130.0, 200.0])
    amps = np.array([24.0, 18.0, 12.0])
    for j in range(3):
        fj = formants[:, j:j + 1] * speaker.formant_scale
        env_db += amps[j] * np.exp(-0.5 * ((freqs[None, :] - fj) / bandwidths[j]) ** 2)
    env_db += speaker.tilt_db_per_oct * octaves[None, :]
    fric = 14.0 / (1.0 + np.exp(-(freqs - 4500.0) / 700.0))
    env_db[~voiced] += fric[None, :]
    # F0-dependent source tilt: higher F0, steeper roll-off
    coupling = spec.f0_tilt_coupling_db * np.log2(f0_track / 150.0)
    env_db[voiced] -= coupling[voiced, None] * octaves[None, :]

    f0v = f0_track[voiced][:, None]
    h = np.maximum(np.rint(freqs[None, :] / f0v), 1.0)
    dist = freqs[None, :] - h * f0v
    width = 25.0 + 0.12 * f0v
    comb = 0.03 + np.exp(-0.5 * (dist / width) ** 2)

    power = 10.0 ** (env_db / 10.0)
    power[voiced] *= comb
    gain_db = loud.copy()
    gain_db[:_SILENCE_FRAMES] = -55.0
    gain_db[-_SILENCE_FRAMES:] = -55.0
    power *= 10.0 ** (gain_db / 10.0)[:, None]

    ap = np.empty((n, spec.n_bins))
    ap[voiced] = 0.02 + 0.9 / (1.0 + np.exp(-(freqs - 5000.0) / 1500.0))
    ap[~voiced] = 0.999
    return power, ap, voiced


def generate_utterance(spec: ToyCorpusSpec, s: int, u: int) -> ft.UtteranceFeatures:
    """Utterance ``u`` of speaker ``s``; a pure function of (spec, s, u)."""
    speaker = _draw_speaker(spec, s)
    c = u % spec.n_contents
    content = _draw_content(spec, c)
    n = content.length
    if spec.length_jitter > 0:
        n += int(_rng(spec.seed, _UTTERANCE, s, u, 1).integers(-spec.length_jitter, spec.length_jitter + 1))
    f0_track = _f0_contour(spec, speaker, s, u, n)
    power, ap, voiced = _render(spec, content, speaker, f0_track, n)
    f0 = np.where(voiced, f0_track, 0.0)
    split = "test" if c >= spec.n_contents - spec.test_contents else "train"
    return ft.make_utterance(
        power, ap, f0, speaker.name, order=spec.mcc_order,
        content=c, utt_index=u, gender=speaker.gender, split=split,
        utt_id=f"{speaker.name}_{u:03d}",
    )


def generate_corpus(spec: ToyCorpusSpec) -> list[ft.UtteranceFeatures]:
    return [generate_utterance(spec, s, u)
            for s in range(spec.n_speakers)
            for u in range(spec.utterances_per_speaker)]


def corpus_manifest(spec: ToyCorpusSpec | None, utterances: Sequence[ft.UtteranceFeatures]) -> dict:
    speakers = {}
    for u in utterances:
        speakers.setdefault(u.speaker, u.meta.get("gender"))
    return {
        "spec": spec.to_dict() if spec is not None else None,
        "speakers": [{"id": k, "gender": v} for k, v in speakers.items()],
        "utterances": [
            {
                "file": f"{u.meta.get('utt_id', f'utt{i:05d}')}.feat",
                "speaker": u.speaker,
                "content": u.meta.get("content"),
                "split": u.meta.get("split", "train"),
                "n_frames": u.n_frames,
            }
            for i, u in enumerate(utterances)
        ],
    }


def write_corpus(utterances: Sequence[ft.UtteranceFeatures], directory, spec: ToyCorpusSpec | None = None,
                 extra: dict | None = None) -> Path:
    directory = Path(directory)
    manifest = corpus_manifest(spec, utterances)
    if extra:
        manifest.update(extra)
    for entry, utt in zip(manifest["utterances"], utterances):
        ft.save_features(utt, directory / entry["file"])
    ft.atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return directory


def load_corpus(directory) -> list[ft.UtteranceFeatures]:
    """Load a corpus directory; uses ``manifest.json`` when present."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["utterances"]
        files = [directory / e["file"] for e in entries]
    else:
        files = sorted(directory.glob("*.feat"))
    if not files:
        raise ft.FeatureFormatError(f"no feature files in {directory}")
    return [ft.load_features(f) for f in files]
