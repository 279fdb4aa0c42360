"""Conversion phase: encode source features, decode with the target speaker code.

Energy and aperiodicity are copied from the source.  F0 is converted with the
log-domain mean/variance transform (or passed through), and the converted
contour also feeds the decoder when the model is F0-conditioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import features as ft
from .model import CdvaeModel, reparameterize

PATHS = {
    "sp->sp": ("sp", "sp"),
    "sp->mcc": ("sp", "mcc"),
    "mcc->sp": ("mcc", "sp"),
    "mcc->mcc": ("mcc", "mcc"),
}
F0_MODES = ("linear-mean-variance", "passthrough")
DEFAULT_PATH = "mcc->mcc"


class ExportError(ValueError):
    pass


def parse_path(path: str) -> tuple[str, str]:
    key = path.lower().replace("→", "->").replace(" ", "")
    if key not in PATHS:
        raise ft.ConfigurationError(f"unknown conversion path {path!r}; expected one of {sorted(PATHS)}")
    return PATHS[key]


@dataclass
class ConversionSpec:
    source: ft.UtteranceFeatures
    target_speaker: str
    path: str = DEFAULT_PATH
    f0_mode: str = "linear-mean-variance"
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        parse_path(self.path)
        if self.f0_mode not in F0_MODES:
            raise ft.ConfigurationError(f"unknown f0_mode {self.f0_mode!r}; expected one of {F0_MODES}")


def _features(utt: ft.UtteranceFeatures, domain: str) -> np.ndarray:
    return utt.sp if domain == "sp" else utt.mcc


@torch.no_grad()
def encode_utterance(model: CdvaeModel, utt: ft.UtteranceFeatures, domain: str = "mcc") -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance, one row per frame."""
    x = torch.from_numpy(model.to_model_space(domain, _features(utt, domain)).astype(np.float32))
    mu, logvar = model.encode(domain, x)
    return mu.numpy(), logvar.numpy()


def converted_f0(spec: ConversionSpec, src_stats: ft.F0Stats | None, tgt_stats: ft.F0Stats | None) -> np.ndarray:
    f0 = np.asarray(spec.source.f0, dtype=np.float64)
    if spec.f0_mode == "passthrough":
        return f0
    if src_stats is None or tgt_stats is None:
        raise ft.ConfigurationError("linear-mean-variance F0 conversion needs source and target stats")
    return ft.convert_f0(f0, src_stats, tgt_stats)


@torch.no_grad()
def convert(model: CdvaeModel, spec: ConversionSpec, src_stats: ft.F0Stats | None = None,
            tgt_stats: ft.F0Stats | None = None) -> ft.UtteranceFeatures:
    src_dom, tgt_dom = parse_path(spec.path)
    speaker_idx = model.speaker_index(spec.target_speaker)
    src = spec.source

    x = torch.from_numpy(model.to_model_space(src_dom, _features(src, src_dom)).astype(np.float32))
    mu, logvar = model.encode(src_dom, x)
    if spec.deterministic:
        z = mu
    else:
        gen = torch.Generator().manual_seed(spec.seed)
        z = reparameterize(mu, logvar, torch.randn(mu.shape, generator=gen, dtype=mu.dtype))

    f0 = converted_f0(spec, src_stats, tgt_stats)
    contf0, uv = ft.continuous_f0(f0)
    f0cond = None
    if model.arch.f0_conditioning:
        f0cond = torch.from_numpy(model.f0_condition(contf0, uv).astype(np.float32))
    out = model.decode(tgt_dom, z, torch.tensor([speaker_idx]), f0cond).numpy()
    out = model.from_model_space(tgt_dom, out)

    if tgt_dom == "sp":
        sp = np.maximum(out, 0.0)
        sp = sp / sp.sum(axis=1, keepdims=True)
        mcc = ft.extract_mcc(sp, order=model.arch.mcc_dim)
    else:
        mcc = out
        sp = ft.mcc_to_sp(mcc, n_bins=model.arch.sp_dim)

    dtype = src.sp.dtype
    meta = dict(src.meta)
    meta.update(
        source_speaker=src.speaker,
        source_utt=src.meta.get("utt_id"),
        conversion_path=spec.path,
        f0_mode=spec.f0_mode,
        deterministic=spec.deterministic,
        f0_condition_mismatch=bool(model.arch.f0_conditioning and spec.f0_mode == "passthrough"),
    )
    return ft.UtteranceFeatures(
        sp=sp.astype(dtype), energy=src.energy.copy(), mcc=mcc.astype(dtype), ap=src.ap.copy(),
        f0=f0.astype(src.f0.dtype), contf0=contf0.astype(src.f0.dtype), uv=uv.astype(src.uv.dtype),
        speaker=spec.target_speaker, frame_period_ms=src.frame_period_ms,
        sample_rate_hz=src.sample_rate_hz, meta=meta,
    )


def synthesis_manifest(feats: ft.UtteranceFeatures, feature_file: str) -> dict:
    n_bins = feats.sp.shape[1]
    return {
        "features": feature_file,
        "n_frames": feats.n_frames,
        "frame_period_ms": feats.frame_period_ms,
        "sample_rate_hz": feats.sample_rate_hz,
        "fft_size": 2 * (n_bins - 1),
        "roles": {
            "sp": "spectral envelope, power, unit-sum rows; multiply row t by energy[t]",
            "energy": "per-frame spectral power sum (copied from source)",
            "ap": "aperiodicity in [0, 1] (copied from source)",
            "f0": "converted F0 in Hz, 0 = unvoiced",
            "mcc": "mel-cepstrum of sp (informational)",
            "contf0": "interpolated F0 (informational)",
            "uv": "voicing flag (informational)",
        },
        "speaker": feats.speaker,
    }


def export_for_synthesis(converted: ft.UtteranceFeatures, path) -> tuple[Path, Path]:
    """Write the feature container and a ``.synth.json`` manifest next to it."""
    path = Path(path)
    for name in ("sp", "energy", "ap", "f0"):
        arr = getattr(converted, name, None)
        if arr is None or np.size(arr) == 0:
            raise ExportError(f"cannot export for synthesis: missing '{name}'")
        if np.shape(arr)[0] != converted.n_frames:
            raise ExportError(f"cannot export for synthesis: '{name}' has wrong frame count")
    feat_path = ft.save_features(converted, path)
    manifest_path = path.with_suffix(".synth.json")
    ft.atomic_write_text(manifest_path, json.dumps(synthesis_manifest(converted, path.name), indent=2) + "\n")
    return feat_path, manifest_path
