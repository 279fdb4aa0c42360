"""Objective measurements: MCD, DTW alignment, latent distances and the F0 probe."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import features as ft
from .conversion import DEFAULT_PATH, ConversionSpec, convert, encode_utterance, parse_path
from .model import CdvaeModel, ConvEncoder
from .training import crop_array, crop_starts

MCD_CONST = 10.0 / math.log(10.0)
GROUPS = ("F-F", "F-M", "M-F", "M-M")
# full-scale (VCC2018) averages; not reproducible at desk scale
REFERENCE_MCD_DB = {"CDVAE": 6.42, "FCN-CDVAE": 6.39, "F0-FCN-CDVAE": 6.38}


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# alignment and frame metrics
# --------------------------------------------------------------------------

def _frame_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def dtw(a: np.ndarray, b: np.ndarray, dims: slice = slice(1, None)) -> tuple[np.ndarray, float]:
    """Minimum summed-Euclidean monotone alignment; returns (path, cost).

    Steps are (1,0), (0,1), (1,1) with unit weight.  Distances use ``dims``
    (mel-cepstral coefficients 1.. by default).  ``path`` is a (K, 2) array of
    frame index pairs from (0, 0) to (Na-1, Nb-1).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))[:, dims]
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))[:, dims]
    na, nb = a.shape[0], b.shape[0]
    if na == 0 or nb == 0:
        raise EvaluationError("dtw needs non-empty sequences")
    dist = _frame_distances(a, b)
    acc = np.full((na + 1, nb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, na + 1):
        row = dist[i - 1]
        prev = acc[i - 1]
        best = np.minimum(prev[:-1], prev[1:])        # diagonal, vertical
        cur = acc[i]
        for j in range(1, nb + 1):
            cur[j] = row[j - 1] + min(best[j - 1], cur[j - 1])
    # backtrack, preferring the diagonal on ties
    i, j = na, nb
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    return np.array(path[::-1], dtype=np.int64), float(acc[na, nb])


def dtw_align(a: np.ndarray, b: np.ndarray, dims: slice = slice(1, None)) -> np.ndarray:
    return dtw(a, b, dims)[0]


def path_cost(a: np.ndarray, b: np.ndarray, path: np.ndarray, dims: slice = slice(1, None)) -> float:
    a = np.asarray(a, dtype=np.float64)[:, dims]
    b = np.asarray(b, dtype=np.float64)[:, dims]
    path = np.asarray(path)
    return float(np.sqrt(((a[path[:, 0]] - b[path[:, 1]]) ** 2).sum(-1)).sum())


def _pairs(alignment, na: int, nb: int) -> np.ndarray:
    if alignment is None:
        if na != nb:
            raise EvaluationError(f"sequences differ in length ({na} vs {nb}); pass an alignment")
        return np.stack([np.arange(na), np.arange(na)], axis=1)
    pairs = np.asarray(alignment, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs[:, 0].max() >= na or pairs[:, 1].max() >= nb):
        raise EvaluationError("alignment indexes frames out of range")
    return pairs


def _keep(pairs: np.ndarray, nonsilent) -> np.ndarray:
    if nonsilent is None:
        return pairs
    if isinstance(nonsilent, tuple):
        mask_a, mask_b = (np.asarray(m, dtype=bool) for m in nonsilent)
        keep = mask_a[pairs[:, 0]] & mask_b[pairs[:, 1]]
    else:
        keep = np.asarray(nonsilent, dtype=bool)[pairs[:, 0]]
    return pairs[keep]


def mcd(mcc_ref: np.ndarray, mcc_cnv: np.ndarray, alignment=None, nonsilent=None) -> float:
    """Mean mel-cepstral distortion in dB over aligned non-silent frame pairs.

    Coefficient 0 is excluded.  ``nonsilent`` is a mask over reference frames
    or a (ref_mask, cnv_mask) tuple; a pair is kept when its frames are
    non-silent.
    """
    ref = np.asarray(mcc_ref, dtype=np.float64)
    cnv = np.asarray(mcc_cnv, dtype=np.float64)
    pairs = _keep(_pairs(alignment, ref.shape[0], cnv.shape[0]), nonsilent)
    if pairs.shape[0] == 0:
        raise EvaluationError("no aligned non-silent frames")
    diff = ref[pairs[:, 0], 1:] - cnv[pairs[:, 1], 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * (diff**2).sum(-1))))


@dataclass
class LatentDistance:
    rmse: float
    cosine: float
    n_frames: int
    n_cosine_skipped: int = 0


def latent_distance(z_a: np.ndarray, z_b: np.ndarray, alignment=None, nonsilent=None) -> LatentDistance:
    """RMSE over aligned frames and mean per-frame cosine similarity.

    Frames where either vector has zero norm have no cosine; they are skipped
    and counted in ``n_cosine_skipped``.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape[1] != z_b.shape[1]:
        raise EvaluationError("latent dimensions differ")
    pairs = _keep(_pairs(alignment, z_a.shape[0], z_b.shape[0]), nonsilent)
    if pairs.shape[0] == 0:
        raise EvaluationError("empty alignment")
    a, b = z_a[pairs[:, 0]], z_b[pairs[:, 1]]
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = float(np.mean((a[ok] * b[ok]).sum(1) / (na[ok] * nb[ok]))) if ok.any() else float("nan")
    return LatentDistance(rmse, cos, int(pairs.shape[0]), int((~ok).sum()))


# --------------------------------------------------------------------------
# F0 probe
# --------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 1000
    batch_size: int = 16
    crop_frames: int = 128
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    conv_channels: tuple[int, ...] = (16, 32, 32, 16)
    conv_kernel: tuple[int, int] = (5, 5)
    freq_strides: tuple[int, ...] = (2, 2, 2, 2)
    # standardize the cont-F0 target per speaker ("speaker") or over all frames ("global")
    standardize: str = "speaker"

    def __post_init__(self):
        if len(self.conv_channels) != len(self.freq_strides):
            raise ft.ConfigurationError("probe conv_channels and freq_strides must have equal length")
        if self.standardize not in ("speaker", "global"):
            raise ft.ConfigurationError(f"standardize must be 'speaker' or 'global', got {self.standardize!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ft.ConfigurationError(f"unknown probe keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("conv_channels", "conv_kernel", "freq_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ProbeResult:
    mse_curve: list[float]
    bce_curve: list[float]
    final_mse: float
    final_bce: float
    constant_predictor_mse: float
    n_frames: int

    def to_dict(self) -> dict:
        return asdict(self)


def probe_targets(utterances: Sequence[ft.UtteranceFeatures], per_speaker: bool = True
                  ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Standardized log cont-F0 and uv, one pair per utterance.

    With ``per_speaker`` each speaker's frames get zero mean and unit
    variance, so the target holds F0 movement beyond speaker identity.
    Otherwise one mean/std over all frames is used.  Either way the pooled
    target has variance 1.
    """
    lf0 = [np.log(u.contf0.astype(np.float64)) for u in utterances]
    groups = [u.speaker if per_speaker else None for u in utterances]
    moments = {}
    for g in dict.fromkeys(groups):
        allf = np.concatenate([x for x, k in zip(lf0, groups) if k == g])
        if not allf.std() > 0:
            raise ft.InsufficientDataError(f"log cont-F0 is constant for speaker {g!r}")
        moments[g] = (allf.mean(), allf.std())
    return [((x - moments[g][0]) / moments[g][1], u.uv.astype(np.float64))
            for x, g, u in zip(lf0, groups, utterances)]


def extract_latents(model: CdvaeModel, utterances: Sequence[ft.UtteranceFeatures], domain: str = "mcc") -> list[np.ndarray]:
    return [encode_utterance(model, u, domain)[0] for u in utterances]


def _probe_net(latent_dim: int, cfg: ProbeConfig) -> ConvEncoder:
    return ConvEncoder(latent_dim, 1, cfg.conv_channels, cfg.conv_kernel, cfg.freq_strides)


def _probe_losses(net, x, f0_t, uv_t):
    f0_hat, uv_logit = net(x)
    mse = F.mse_loss(f0_hat[..., 0], f0_t)
    bce = F.binary_cross_entropy_with_logits(uv_logit[..., 0], uv_t)
    return mse, bce


def train_f0_probe(latents: Sequence[np.ndarray], targets: Sequence[tuple[np.ndarray, np.ndarray]],
                   cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train an encoder-shaped network to predict (cont-F0, uv) from latents.

    Returns the per-step training curves and the final training-set losses
    evaluated on whole utterances.
    """
    cfg = cfg or ProbeConfig()
    if len(latents) != len(targets) or not latents:
        raise ft.ConfigurationError("need one target pair per latent sequence")
    if len(latents) < cfg.batch_size:
        raise ft.ConfigurationError(f"probe needs at least batch_size={cfg.batch_size} utterances, got {len(latents)}")
    data = []
    for z, (f0_t, uv_t) in zip(latents, targets):
        z = np.asarray(z, dtype=np.float32)
        if z.shape[0] != len(f0_t) or len(f0_t) != len(uv_t):
            raise ft.ConfigurationError("latent and target frame counts differ")
        data.append((z, np.asarray(f0_t, dtype=np.float32), np.asarray(uv_t, dtype=np.float32)))
    latent_dim = data[0][0].shape[1]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = _probe_net(latent_dim, cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    mse_curve, bce_curve = [], []
    net.train()
    for _ in range(cfg.steps):
        xs, fs, us = [], [], []
        for _ in range(cfg.batch_size):
            z, f0_t, uv_t = data[int(rng.integers(len(data)))]
            start = crop_starts(z.shape[0], cfg.crop_frames, rng)
            xs.append(crop_array(z, start, cfg.crop_frames))
            fs.append(crop_array(f0_t, start, cfg.crop_frames))
            us.append(crop_array(uv_t, start, cfg.crop_frames))
        mse, bce = _probe_losses(net, torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(fs)),
                                 torch.from_numpy(np.stack(us)))
        opt.zero_grad(set_to_none=True)
        (mse + bce).backward()
        opt.step()
        mse_curve.append(float(mse.detach()))
        bce_curve.append(float(bce.detach()))

    net.eval()
    sq, ce, n = 0.0, 0.0, 0
    with torch.no_grad():
        for z, f0_t, uv_t in data:
            f0_hat, uv_logit = net(torch.from_numpy(z)[None])
            sq += float(((f0_hat[0, :, 0] - torch.from_numpy(f0_t)) ** 2).sum())
            ce += float(F.binary_cross_entropy_with_logits(uv_logit[0, :, 0], torch.from_numpy(uv_t), reduction="sum"))
            n += z.shape[0]
    all_f0 = np.concatenate([d[1].astype(np.float64) for d in data])
    return ProbeResult(mse_curve, bce_curve, sq / n, ce / n, float(all_f0.var()), n)


# --------------------------------------------------------------------------
# pairwise evaluation
# --------------------------------------------------------------------------

@dataclass
class PairEntry:
    system: str
    source: str
    target: str
    group: str
    mcd_db: float
    latent_rmse: float
    latent_cosine: float
    n_utterances: int


@dataclass
class EvalReport:
    entries: list[PairEntry]
    averages: dict = field(default_factory=dict)     # system -> metric -> group/Avg -> value
    probes: dict = field(default_factory=dict)       # system -> ProbeResult dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "averages": self.averages,
            "probes": self.probes,
            "meta": self.meta,
        }

    def tables(self) -> str:
        return format_tables(self)


def _group(gender_a: str | None, gender_b: str | None) -> str:
    if gender_a in ("F", "M") and gender_b in ("F", "M"):
        return f"{gender_a}-{gender_b}"
    return "all"


def _averages(entries: Sequence[PairEntry]) -> dict:
    out: dict = {}
    by_system: dict[str, list[PairEntry]] = defaultdict(list)
    for e in entries:
        by_system[e.system].append(e)
    for system, es in by_system.items():
        out[system] = {}
        for metric in ("mcd_db", "latent_rmse", "latent_cosine"):
            cols = {}
            for g in sorted({e.group for e in es}):
                vals = [getattr(e, metric) for e in es if e.group == g]
                cols[g] = float(np.mean(vals))
            cols["Avg."] = float(np.mean([getattr(e, metric) for e in es]))
            out[system][metric] = cols
    return out


def evaluate_pairwise(systems: Mapping[str, CdvaeModel], utterances: Sequence[ft.UtteranceFeatures],
                      pairs: Sequence[tuple[str, str]] | None = None, path: str = DEFAULT_PATH,
                      split: str | None = "test", f0_mode: str = "linear-mean-variance",
                      probe: ProbeConfig | None = None, probe_split: str | None = "train") -> EvalReport:
    """Convert every source utterance of each pair and compare with the parallel target.

    MCD compares converted and natural target MCCs after DTW on MCC 1..;
    latent distances compare the source-domain posterior means of the two
    natural utterances, aligned by DTW on their MCCs.  Non-silent frames only.
    F0 statistics come from the training split.
    """
    src_dom, _ = parse_path(path)
    genders = {u.speaker: u.meta.get("gender") for u in utterances}
    speakers = sorted(genders)
    if pairs is None:
        pairs = [(a, b) for a in speakers for b in speakers if a != b]
    train_utts = [u for u in utterances if u.meta.get("split", "train") == "train"] or list(utterances)
    stats = {s: ft.f0_statistics([u for u in train_utts if u.speaker == s], speaker=s) for s in speakers}
    pool = [u for u in utterances if split is None or u.meta.get("split", "train") == split]
    by_content: dict[tuple[str, object], ft.UtteranceFeatures] = {}
    for u in pool:
        by_content.setdefault((u.speaker, u.meta.get("content")), u)

    entries = []
    for name, model in systems.items():
        latent_cache: dict[int, np.ndarray] = {}

        def latents_of(u):
            key = id(u)
            if key not in latent_cache:
                latent_cache[key] = encode_utterance(model, u, src_dom)[0]
            return latent_cache[key]

        for src_spk, tgt_spk in pairs:
            mcds, rmses, coss = [], [], []
            for (spk, content), src in sorted(by_content.items(), key=lambda kv: str(kv[0])):
                if spk != src_spk or (tgt_spk, content) not in by_content:
                    continue
                tgt = by_content[(tgt_spk, content)]
                cnv = convert(model, ConversionSpec(src, tgt_spk, path, f0_mode), stats[src_spk], stats[tgt_spk])
                masks_ct = (ft.nonsilent_mask(tgt.energy), ft.nonsilent_mask(cnv.energy))
                mcds.append(mcd(tgt.mcc, cnv.mcc, dtw_align(tgt.mcc, cnv.mcc), masks_ct))
                masks_st = (ft.nonsilent_mask(src.energy), ft.nonsilent_mask(tgt.energy))
                ld = latent_distance(latents_of(src), latents_of(tgt), dtw_align(src.mcc, tgt.mcc), masks_st)
                rmses.append(ld.rmse)
                coss.append(ld.cosine)
            if not mcds:
                raise EvaluationError(f"no parallel utterances for pair {src_spk}->{tgt_spk}")
            entries.append(PairEntry(name, src_spk, tgt_spk, _group(genders[src_spk], genders[tgt_spk]),
                                     float(np.mean(mcds)), float(np.mean(rmses)), float(np.mean(coss)), len(mcds)))

    report = EvalReport(entries, _averages(entries))
    report.meta = {
        "path": path,
        "split": split,
        "f0_mode": f0_mode,
        "reference_full_scale_mcd_db": REFERENCE_MCD_DB,
        "reference_note": "full-scale corpus averages; not reproducible with the synthetic corpus",
        "cosine": "per-frame cosine similarity averaged over aligned non-silent frames",
    }
    if probe is not None:
        probe_utts = [u for u in utterances if probe_split is None or u.meta.get("split", "train") == probe_split]
        targets = probe_targets(probe_utts, per_speaker=probe.standardize == "speaker")
        for name, model in systems.items():
            report.probes[name] = train_f0_probe(extract_latents(model, probe_utts, src_dom), targets, probe).to_dict()
        report.meta["probe_config"] = probe.to_dict()
    return report


def format_tables(report: EvalReport) -> str:
    """Plain-text tables: rows are systems, columns F-F, F-M, M-F, M-M, Avg."""
    lines = []
    titles = {"mcd_db": "Mean mel-cepstral distortion [dB], non-silent frames",
              "latent_rmse": "Latent RMSE, parallel pairs", "latent_cosine": "Latent cosine similarity, parallel pairs"}
    present = sorted({g for sys in report.averages.values() for g in sys["mcd_db"]} - {"Avg."})
    cols = [g for g in GROUPS if g in present] + [g for g in present if g not in GROUPS] + ["Avg."]
    width = max([len(s) for s in report.averages] + [6])
    for metric, title in titles.items():
        lines.append(title)
        lines.append(f"{'System':<{width}} " + " ".join(f"{c:>8}" for c in cols))
        for system, metrics in report.averages.items():
            vals = metrics[metric]
            lines.append(f"{system:<{width}} " + " ".join(
                f"{vals[c]:>8.3f}" if c in vals else f"{'-':>8}" for c in cols))
        lines.append("")
    if report.probes:
        lines.append("F0 probe, final training loss")
        lines.append(f"{'System':<{width}} {'cont-F0 MSE':>12} {'uv CE':>8}")
        for system, p in report.probes.items():
            lines.append(f"{system:<{width}} {p['final_mse']:>12.4f} {p['final_bce']:>8.4f}")
        lines.append("")
    return "\n".join(lines)
