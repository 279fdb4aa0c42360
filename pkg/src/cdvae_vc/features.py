"""Vocoder feature data model and the feature-level signal processing.

Frames are rows.  Spectral envelopes (SP) are 513-bin power spectra normalized
to unit sum with the normalizing factor kept separately as per-frame energy.
Mel-cepstra (MCC) are computed from the unit-sum SP by a frequency-warped
cosine fit of the log amplitude spectrum.

The on-disk container is documented in ``docs/feature_format.md``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SP_DIM = 513
MCC_ORDER = 35
WARP_ALPHA = 0.455
SP_FLOOR = 1e-10
FRAME_PERIOD_MS = 5.0
SAMPLE_RATE_HZ = 22050

ARRAY_FIELDS = ("sp", "energy", "mcc", "ap", "f0", "contf0", "uv")
VECTOR_FIELDS = ("energy", "f0", "contf0", "uv")

_MAGIC = b"CDVF"
_VERSION = 1


class FeatureError(ValueError):
    """Base class for feature-level errors."""


class DegenerateFrameError(FeatureError):
    pass


class AllUnvoicedError(FeatureError):
    pass


class InsufficientDataError(FeatureError):
    pass


class FeatureFormatError(FeatureError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class UtteranceFeatures:
    sp: np.ndarray
    energy: np.ndarray
    mcc: np.ndarray
    ap: np.ndarray
    f0: np.ndarray
    contf0: np.ndarray
    uv: np.ndarray
    speaker: str
    frame_period_ms: float = FRAME_PERIOD_MS
    sample_rate_hz: int = SAMPLE_RATE_HZ
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(self.f0.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def validate(self, atol: float = 1e-5) -> None:
        """Raise FeatureFormatError if any container invariant is violated."""
        n = self.n_frames
        for name, arr in self.arrays().items():
            if arr.shape[0] != n:
                raise FeatureFormatError(
                    f"frame count mismatch: {name} has {arr.shape[0]} frames, f0 has {n}"
                )
        if self.sp.ndim != 2 or self.ap.shape != self.sp.shape:
            raise FeatureFormatError(f"sp/ap shape mismatch: {self.sp.shape} vs {self.ap.shape}")
        if np.any(self.sp < 0):
            raise FeatureFormatError("sp has negative entries")
        if not np.allclose(self.sp.sum(axis=1, dtype=np.float64), 1.0, atol=atol):
            raise FeatureFormatError("sp rows are not unit-sum")
        voiced = self.f0 > 0
        if not np.array_equal(voiced, self.uv > 0.5):
            raise FeatureFormatError("uv does not match f0 voicing")
        if not np.array_equal(self.contf0[voiced], self.f0[voiced]):
            raise FeatureFormatError("contf0 differs from f0 on voiced frames")


@dataclass(frozen=True)
class F0Stats:
    speaker: str
    log_mean: float
    log_std: float
    voiced_frame_count: int

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker,
            "log_mean": self.log_mean,
            "log_std": self.log_std,
            "voiced_frame_count": self.voiced_frame_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "F0Stats":
        return cls(str(d["speaker"]), float(d["log_mean"]), float(d["log_std"]),
                   int(d["voiced_frame_count"]))


# --------------------------------------------------------------------------
# spectral envelope
# --------------------------------------------------------------------------

def normalize_sp(raw: np.ndarray) -> tuple[np.ndarray, float | np.ndarray]:
    """Split a non-negative power spectrum into a unit-sum shape and its energy.

    Accepts a single frame (1-D) or a stack of frames (2-D, one per row).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise DegenerateFrameError("spectrum has negative bins")
    energy = raw.sum(axis=-1)
    if np.any(energy <= 0):
        bad = np.flatnonzero(np.atleast_1d(energy) <= 0)
        raise DegenerateFrameError(f"all-zero spectrum frame(s) at {bad[:10].tolist()}")
    unit = raw / energy[..., None]
    if raw.ndim == 1:
        return unit, float(energy)
    return unit, energy


def denormalize_sp(unit_sp: np.ndarray, energy) -> np.ndarray:
    return np.asarray(unit_sp) * np.asarray(energy)[..., None]


def warped_frequencies(n_bins: int = SP_DIM, alpha: float = WARP_ALPHA) -> np.ndarray:
    """First-order all-pass warped frequency for each bin of a half spectrum."""
    w = np.linspace(0.0, np.pi, n_bins)
    return w + 2.0 * np.arctan(alpha * np.sin(w) / (1.0 - alpha * np.cos(w)))


@lru_cache(maxsize=16)
def _mcc_basis(n_bins: int, order: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    w = np.linspace(0.0, np.pi, n_bins)
    wt = warped_frequencies(n_bins, alpha)
    basis = np.cos(np.outer(wt, np.arange(order)))
    basis[:, 1:] *= 2.0
    # d(warped)/d(omega), so the fit approximates an integral over the warped axis
    jac = (1.0 - alpha**2) / (1.0 - 2.0 * alpha * np.cos(w) + alpha**2)
    weighted = basis * jac[:, None]
    analysis = np.linalg.solve(basis.T @ weighted, weighted.T)
    basis.setflags(write=False)
    analysis.setflags(write=False)
    return basis, analysis


def _check_order(order: int, n_bins: int) -> None:
    if order < 2 or order > n_bins:
        raise ConfigurationError(f"mcc order must be in [2, {n_bins}], got {order}")


def extract_mcc(sp: np.ndarray, order: int = MCC_ORDER, alpha: float = WARP_ALPHA) -> np.ndarray:
    """Mel-cepstrum of each SP row, truncated to ``order`` coefficients.

    The coefficients c satisfy ``0.5*log(sp) ~= c[0] + 2*sum_m c[m] cos(m*w~)``
    where w~ is the all-pass warped frequency; the fit is a weighted least
    squares projection, so extracting from a reconstructed spectrum returns
    the same coefficients.
    """
    sp = np.asarray(sp, dtype=np.float64)
    single = sp.ndim == 1
    sp2 = np.atleast_2d(sp)
    _check_order(order, sp2.shape[1])
    _, analysis = _mcc_basis(sp2.shape[1], order, alpha)
    log_amp = 0.5 * np.log(np.maximum(sp2, SP_FLOOR))
    mcc = log_amp @ analysis.T
    return mcc[0] if single else mcc


def mcc_to_log_amplitude(mcc: np.ndarray, n_bins: int = SP_DIM, alpha: float = WARP_ALPHA) -> np.ndarray:
    mcc = np.asarray(mcc, dtype=np.float64)
    _check_order(mcc.shape[-1], n_bins)
    basis, _ = _mcc_basis(n_bins, mcc.shape[-1], alpha)
    return mcc @ basis.T


def mcc_to_sp(mcc: np.ndarray, n_bins: int = SP_DIM, alpha: float = WARP_ALPHA) -> np.ndarray:
    """Power spectrum envelope implied by ``mcc``, renormalized to unit sum."""
    power = np.exp(2.0 * mcc_to_log_amplitude(mcc, n_bins, alpha))
    return power / power.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# F0
# --------------------------------------------------------------------------

def continuous_f0(f0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate F0 across unvoiced gaps; hold edge values."""
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 < 0):
        raise FeatureError("f0 must be non-negative")
    voiced = f0 > 0
    if not voiced.any():
        raise AllUnvoicedError("utterance has no voiced frames")
    idx = np.arange(f0.shape[0])
    # np.interp holds the end values outside the voiced range
    contf0 = np.interp(idx, idx[voiced], f0[voiced])
    contf0[voiced] = f0[voiced]
    return contf0, voiced.astype(np.float64)


def _voiced_log_f0(utterances: Iterable[UtteranceFeatures]) -> np.ndarray:
    parts = [np.log(np.asarray(u.f0, dtype=np.float64)[np.asarray(u.f0) > 0]) for u in utterances]
    return np.concatenate(parts) if parts else np.zeros(0)


def f0_statistics(utterances: Sequence[UtteranceFeatures], speaker: str | None = None) -> F0Stats:
    """Log-F0 mean and population standard deviation over voiced frames."""
    utterances = list(utterances)
    lf0 = _voiced_log_f0(utterances)
    if lf0.size < 2:
        raise InsufficientDataError(f"need at least 2 voiced frames, got {lf0.size}")
    std = float(lf0.std())
    if not std > 0:
        raise InsufficientDataError("log-F0 standard deviation is zero")
    if speaker is None:
        speaker = utterances[0].speaker
    return F0Stats(speaker, float(lf0.mean()), std, int(lf0.size))


def convert_f0(f0: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    if not src.log_std > 0:
        raise ConfigurationError("source log_std must be positive")
    f0 = np.asarray(f0, dtype=np.float64)
    out = np.zeros_like(f0)
    voiced = f0 > 0
    if (src.log_mean, src.log_std) == (tgt.log_mean, tgt.log_std):
        out[voiced] = f0[voiced]
        return out
    lf0 = np.log(f0[voiced])
    out[voiced] = np.exp((lf0 - src.log_mean) * (tgt.log_std / src.log_std) + tgt.log_mean)
    return out


def nonsilent_mask(energy: np.ndarray, threshold_db: float = -30.0) -> np.ndarray:
    """Frames whose energy is within ``threshold_db`` of the utterance maximum."""
    energy = np.asarray(energy, dtype=np.float64)
    return energy > energy.max() * 10.0 ** (threshold_db / 10.0)


def make_utterance(raw_sp: np.ndarray, ap: np.ndarray, f0: np.ndarray, speaker: str,
                   order: int = MCC_ORDER, dtype=np.float32, **meta) -> UtteranceFeatures:
    """Assemble a container from raw analysis output (raw SP, AP, F0)."""
    sp, energy = normalize_sp(np.atleast_2d(raw_sp))
    contf0, uv = continuous_f0(f0)
    mcc = extract_mcc(sp, order)
    frame_period_ms = meta.pop("frame_period_ms", FRAME_PERIOD_MS)
    sample_rate_hz = meta.pop("sample_rate_hz", SAMPLE_RATE_HZ)
    return UtteranceFeatures(
        sp=sp.astype(dtype), energy=energy.astype(dtype), mcc=mcc.astype(dtype),
        ap=np.asarray(ap, dtype=dtype), f0=np.asarray(f0, dtype=dtype),
        contf0=contf0.astype(dtype), uv=uv.astype(dtype), speaker=speaker,
        frame_period_ms=frame_period_ms, sample_rate_hz=sample_rate_hz, meta=dict(meta),
    )


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_features(feats: UtteranceFeatures, path) -> Path:
    """Write ``path`` (binary arrays) and its ``.json`` metadata sidecar."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(ARRAY_FIELDS))]
    n = feats.n_frames
    for name in ARRAY_FIELDS:
        arr = np.asarray(getattr(feats, name))
        if arr.shape[0] != n:
            raise FeatureFormatError(f"{name}: expected {n} frames, got {arr.shape[0]}")
        cols = 0 if arr.ndim == 1 else arr.shape[1]
        encoded = name.encode("ascii")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<II", arr.shape[0], cols))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {
        "speaker": feats.speaker,
        "frame_period_ms": feats.frame_period_ms,
        "sample_rate_hz": feats.sample_rate_hz,
        "n_frames": n,
        "extra": feats.meta,
    }
    _atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(path, b"".join(chunks))
    return path


def load_features(path) -> UtteranceFeatures:
    path = Path(path)
    try:
        blob = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError as exc:
        raise FeatureFormatError(f"missing file: {exc.filename}") from None
    if blob[:4] != _MAGIC:
        raise FeatureFormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("ascii")
            pos += name_len
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = rows * max(cols, 1)
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).astype(np.float32)
            pos += 4 * size
            arrays[name] = arr.reshape(rows, cols) if cols else arr
    except (struct.error, ValueError) as exc:
        raise FeatureFormatError(f"{path}: truncated or corrupt ({exc})") from None
    for name in ARRAY_FIELDS:
        if name not in arrays:
            raise FeatureFormatError(f"{path}: missing array '{name}'")
    for key in ("speaker", "frame_period_ms", "sample_rate_hz", "n_frames"):
        if key not in meta:
            raise FeatureFormatError(f"{path}: metadata missing '{key}'")
    n = int(meta["n_frames"])
    for name, arr in arrays.items():
        if arr.shape[0] != n:
            raise FeatureFormatError(
                f"{path}: array '{name}' has {arr.shape[0]} frames, metadata says {n}"
            )
    for name in VECTOR_FIELDS:
        if arrays[name].ndim != 1:
            raise FeatureFormatError(f"{path}: array '{name}' must be a vector")
    return UtteranceFeatures(
        **{name: arrays[name] for name in ARRAY_FIELDS},
        speaker=str(meta["speaker"]),
        frame_period_ms=float(meta["frame_period_ms"]),
        sample_rate_hz=meta["sample_rate_hz"],
        meta=dict(meta.get("extra", {})),
    )
