"""CDVAE objective, crop sampling and the Adam training loop with resumable checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import features as ft
from .model import ArchConfig, CdvaeModel, build_model, decode, reparameterize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdvae-vc-checkpoint/1"


class BatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


RECON_REDUCTIONS = ("gaussian", "mean")


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop_frames: int = 128
    latent_dim: int = 16
    speaker_dim: int = 16
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    max_steps: int = 2000
    seed: int = 0
    variant: str = "fcn"
    f0_conditioning: bool = False
    checkpoint_every: int = 0       # 0: only the final step
    # per-frame reconstruction: "gaussian" is the unit-variance Gaussian NLL
    # without its constant, 0.5 * sum over dims; "mean" is the element-mean MSE
    recon_reduction: str = "gaussian"

    def __post_init__(self):
        if self.recon_reduction not in RECON_REDUCTIONS:
            raise ft.ConfigurationError(
                f"recon_reduction must be one of {RECON_REDUCTIONS}, got {self.recon_reduction!r}")
        if self.batch_size < 1 or self.crop_frames < 1:
            raise ft.ConfigurationError("batch_size and crop_frames must be positive")

    def arch(self, **overrides) -> ArchConfig:
        base = dict(variant=self.variant, f0_conditioning=self.f0_conditioning,
                    latent_dim=self.latent_dim, speaker_dim=self.speaker_dim)
        base.update(overrides)
        return ArchConfig(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ft.ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    l_in: float
    l_kld: float
    l_cross: float
    l_sim: float
    total: float
    step: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    """Differentiable loss terms; ``total`` is their unit-weight sum."""
    l_in: torch.Tensor
    l_kld: torch.Tensor
    l_cross: torch.Tensor
    l_sim: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_in + self.l_kld + self.l_cross + self.l_sim

    def report(self, step: int = -1) -> LossReport:
        vals = [float(t.detach()) for t in (self.l_in, self.l_kld, self.l_cross, self.l_sim)]
        return LossReport(*vals, total=float(self.total.detach()), step=step)


@dataclass
class Batch:
    sp: torch.Tensor        # B, T, sp_dim (model space)
    mcc: torch.Tensor       # B, T, mcc_dim (model space)
    f0cond: torch.Tensor    # B, T, 2
    speaker: torch.Tensor   # B (long)

    def to(self, dtype) -> "Batch":
        return Batch(self.sp.to(dtype), self.mcc.to(dtype), self.f0cond.to(dtype), self.speaker)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def kl_loss(mu, logvar) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over frames."""
    mu, logvar = torch.as_tensor(mu), torch.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise BatchError(f"mu/logvar shape mismatch {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    per_frame = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(dim=-1)
    return per_frame.mean()


def recon_loss(x, x_hat) -> torch.Tensor:
    """Mean squared error over frames and dimensions."""
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise BatchError(f"reconstruction shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x_hat - x).pow(2).mean()


def latent_similarity(z_a, z_b) -> torch.Tensor:
    """L1 distance between latent codes, averaged over frames and dimensions."""
    return (torch.as_tensor(z_a) - torch.as_tensor(z_b)).abs().mean()


def _recon_term(x, x_hat, reduction: str) -> torch.Tensor:
    mse = recon_loss(x, x_hat)
    return 0.5 * x.shape[-1] * mse if reduction == "gaussian" else mse


def draw_noise(model: CdvaeModel, batch: Batch, generator: torch.Generator | None):
    """One standard-normal draw per encoder (SP, MCC)."""
    shape = (*batch.sp.shape[:2], model.arch.latent_dim)
    dtype = batch.sp.dtype
    return (torch.randn(shape, generator=generator, dtype=dtype),
            torch.randn(shape, generator=generator, dtype=dtype))


def zero_noise(model: CdvaeModel, batch: Batch):
    shape = (*batch.sp.shape[:2], model.arch.latent_dim)
    return torch.zeros(shape, dtype=batch.sp.dtype), torch.zeros(shape, dtype=batch.sp.dtype)


def cdvae_loss(model: CdvaeModel, batch: Batch, noise, reduction: str = "gaussian") -> LossTerms:
    """Within-domain, cross-domain, KL and latent-similarity terms on one batch."""
    if batch.sp.shape[:2] != batch.mcc.shape[:2]:
        raise BatchError("SP and MCC crops are not aligned")
    if batch.speaker.shape[0] != batch.sp.shape[0]:
        raise BatchError("one speaker id per batch item required")
    if batch.speaker.min() < 0 or batch.speaker.max() >= len(model.speakers):
        raise BatchError("speaker id out of range")
    noise_sp, noise_mcc = noise
    mu_sp, lv_sp = model.encode("sp", batch.sp)
    mu_mcc, lv_mcc = model.encode("mcc", batch.mcc)
    z_sp = reparameterize(mu_sp, lv_sp, noise_sp)
    z_mcc = reparameterize(mu_mcc, lv_mcc, noise_mcc)

    y = model.speaker_code(batch.speaker)
    f0cond = batch.f0cond if model.arch.f0_conditioning else None
    x_ss = decode(model.dec_sp, z_sp, y, f0cond)
    x_mm = decode(model.dec_mcc, z_mcc, y, f0cond)
    x_sm = decode(model.dec_mcc, z_sp, y, f0cond)
    x_ms = decode(model.dec_sp, z_mcc, y, f0cond)

    l_in = _recon_term(batch.sp, x_ss, reduction) + _recon_term(batch.mcc, x_mm, reduction)
    l_cross = _recon_term(batch.mcc, x_sm, reduction) + _recon_term(batch.sp, x_ms, reduction)
    l_kld = kl_loss(mu_sp, lv_sp) + kl_loss(mu_mcc, lv_mcc)
    l_sim = latent_similarity(z_sp, z_mcc)
    return LossTerms(l_in, l_kld, l_cross, l_sim)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class TrainItem:
    sp: np.ndarray
    mcc: np.ndarray
    f0cond: np.ndarray
    speaker: int

    @property
    def n_frames(self) -> int:
        return self.sp.shape[0]


def prepare_dataset(model: CdvaeModel, utterances: Sequence[ft.UtteranceFeatures]) -> list[TrainItem]:
    items = []
    for u in utterances:
        items.append(TrainItem(
            sp=model.to_model_space("sp", u.sp).astype(np.float32),
            mcc=model.to_model_space("mcc", u.mcc).astype(np.float32),
            f0cond=model.f0_condition(u.contf0, u.uv).astype(np.float32),
            speaker=model.speaker_index(u.speaker),
        ))
    return items


def crop_array(arr: np.ndarray, start: int, length: int) -> np.ndarray:
    """Frames [start, start+length), reflect-padding at the end when short."""
    piece = arr[start:start + length]
    short = length - piece.shape[0]
    if short > 0:
        pad = [(0, short)] + [(0, 0)] * (piece.ndim - 1)
        piece = np.pad(piece, pad, mode="reflect")
    return piece


def crop_starts(n_frames: int, crop_frames: int, rng: np.random.Generator) -> int:
    return int(rng.integers(0, max(n_frames - crop_frames, 0) + 1))


def sample_crops(dataset: Sequence[TrainItem], crop_frames: int, rng: np.random.Generator,
                 batch_size: int = 16) -> Batch:
    """Uniform random utterance and start offset per batch item; crops may overlap."""
    if not dataset:
        raise BatchError("empty corpus")
    sp, mcc, f0c, spk = [], [], [], []
    for _ in range(batch_size):
        item = dataset[int(rng.integers(len(dataset)))]
        start = crop_starts(item.n_frames, crop_frames, rng)
        sp.append(crop_array(item.sp, start, crop_frames))
        mcc.append(crop_array(item.mcc, start, crop_frames))
        f0c.append(crop_array(item.f0cond, start, crop_frames))
        spk.append(item.speaker)
    return Batch(torch.from_numpy(np.stack(sp)), torch.from_numpy(np.stack(mcc)),
                 torch.from_numpy(np.stack(f0c)), torch.tensor(spk, dtype=torch.long))


def training_utterances(utterances: Sequence[ft.UtteranceFeatures]) -> list[ft.UtteranceFeatures]:
    return [u for u in utterances if u.meta.get("split", "train") == "train"]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _canonical(obj):
    # pickle memoizes by object identity, so rebuild containers and intern
    # strings to make the bytes a function of the values alone
    if isinstance(obj, dict):
        out = type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
        if hasattr(obj, "_metadata"):
            out._metadata = _canonical(obj._metadata)
        return out
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def _atomic_torch_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(_canonical(obj), buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class TrainState:
    model: CdvaeModel
    optimizer: torch.optim.Optimizer
    noise_gen: torch.Generator
    crop_rng: np.random.Generator
    step: int = 0


def save_checkpoint(path, state: TrainState, config: TrainConfig, provenance: dict | None = None) -> Path:
    model = state.model
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "train_config": config.to_dict(),
        "arch": model.arch.to_dict(),
        "speakers": list(model.speakers),
        "model_state": model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "rng": {
            "noise": state.noise_gen.get_state(),
            "crops": state.crop_rng.bit_generator.state,
        },
        "provenance": provenance or {},
    }
    path = Path(path)
    _atomic_torch_save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ft.FeatureFormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return payload


def model_from_checkpoint(payload_or_path) -> CdvaeModel:
    payload = payload_or_path if isinstance(payload_or_path, dict) else load_checkpoint(payload_or_path)
    model = build_model(ArchConfig.from_dict(payload["arch"]), payload["speakers"], seed=0)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def _make_optimizer(model: CdvaeModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))


def init_state(config: TrainConfig, utterances: Sequence[ft.UtteranceFeatures],
               arch_overrides: dict | None = None) -> TrainState:
    speakers = sorted({u.speaker for u in utterances})
    dims = {"sp_dim": utterances[0].sp.shape[1], "mcc_dim": utterances[0].mcc.shape[1]}
    model = build_model(config.arch(**{**dims, **(arch_overrides or {})}), speakers, seed=config.seed)
    model.fit_normalizer(utterances)
    return TrainState(
        model=model,
        optimizer=_make_optimizer(model, config),
        noise_gen=torch.Generator().manual_seed(config.seed + 2),
        crop_rng=np.random.default_rng(np.random.SeedSequence([config.seed, 3])),
    )


def state_from_checkpoint(payload: dict, config: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    config = config or TrainConfig.from_dict(payload["train_config"])
    model = model_from_checkpoint(payload)
    model.train()
    opt = _make_optimizer(model, config)
    opt.load_state_dict(payload["optimizer_state"])
    gen = torch.Generator()
    gen.set_state(payload["rng"]["noise"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]["crops"]
    return TrainState(model, opt, gen, rng, int(payload["step"])), config


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CdvaeModel
    reports: list[LossReport]
    checkpoints: list[Path] = field(default_factory=list)


def train_steps(state: TrainState, dataset: Sequence[TrainItem], config: TrainConfig, until: int,
                on_step: Callable[[LossReport], None] | None = None,
                on_checkpoint: Callable[[TrainState], None] | None = None) -> list[LossReport]:
    """Advance ``state`` to step ``until``; returns the per-step loss reports."""
    model = state.model
    model.train()
    reports = []
    while state.step < until:
        batch = sample_crops(dataset, config.crop_frames, state.crop_rng, config.batch_size)
        noise = draw_noise(model, batch, state.noise_gen)
        terms = cdvae_loss(model, batch, noise, config.recon_reduction)
        total = terms.total
        if not torch.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss at step {state.step}: {terms.report(state.step)}")
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
        report = terms.report(state.step)
        reports.append(report)
        state.step += 1
        if on_step is not None:
            on_step(report)
        if on_checkpoint is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            on_checkpoint(state)
    model.eval()
    return reports


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.pt"


def train(config: TrainConfig, utterances: Sequence[ft.UtteranceFeatures], out_dir=None,
          arch_overrides: dict | None = None, resume_from=None, provenance: dict | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train a CDVAE model on the training split of ``utterances``.

    With ``out_dir`` set, writes ``losses.jsonl`` (one line per step) and
    checkpoints under ``checkpoints/``.  ``resume_from`` continues from a
    checkpoint; the loss sequence is identical to an uninterrupted run.
    """
    train_utts = training_utterances(utterances)
    if resume_from is not None:
        state, _ = state_from_checkpoint(load_checkpoint(resume_from), config)
    else:
        state = init_state(config, train_utts, arch_overrides)
    dataset = prepare_dataset(state.model, train_utts)
    until = config.max_steps if max_steps is None else max_steps

    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "losses.jsonl"
        kept = []
        if resume_from is not None and log_path.exists():
            # drop lines past the resume point so the log matches an uninterrupted run
            kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] < state.step]
        log_fh = open(log_path, "w")
        log_fh.writelines(ln + "\n" for ln in kept)

    def on_step(report: LossReport) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(report.to_dict()) + "\n")
        if report.step % 100 == 0:
            log.info("step %d total %.4f", report.step, report.total)

    def on_checkpoint(st: TrainState) -> None:
        if out is not None:
            checkpoints.append(save_checkpoint(out / "checkpoints" / checkpoint_name(st.step), st, config, provenance))

    try:
        reports = train_steps(state, dataset, config, until, on_step, on_checkpoint)
        if out is not None and (not checkpoints or checkpoints[-1].name != checkpoint_name(state.step)):
            on_checkpoint_final = out / "checkpoints" / checkpoint_name(state.step)
            checkpoints.append(save_checkpoint(on_checkpoint_final, state, config, provenance))
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(state.model, reports, checkpoints)
