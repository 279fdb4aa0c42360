"""CDVAE networks: SP/MCC encoder-decoder pairs and a trainable speaker table.

Two variants share one interface.  ``framewise`` maps each frame on its own
with fully connected layers; ``fcn`` treats a feature sequence as a
(frequency x time) image and convolves over both axes with time stride 1, so
every frame gets its own latent vector and any sequence length is accepted.

Decoders receive the conditioning vector (speaker code, optionally
standardized log cont-F0 and uv) concatenated along the feature axis at every
layer.  Tensors are laid out (batch, frames, features).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import features as ft

DOMAINS = ("sp", "mcc")
VARIANTS = ("framewise", "fcn")


class ShapeError(ValueError):
    pass


class UnknownSpeakerError(KeyError):
    pass


ConfigurationError = ft.ConfigurationError


@dataclass
class ArchConfig:
    variant: str = "fcn"
    f0_conditioning: bool = False
    sp_dim: int = ft.SP_DIM
    mcc_dim: int = ft.MCC_ORDER
    latent_dim: int = 16
    speaker_dim: int = 16
    # fcn: (frequency, time) kernel, per-layer channels and frequency strides
    conv_channels: tuple[int, ...] = (16, 32, 32, 16)
    conv_kernel: tuple[int, int] = (5, 5)
    freq_strides: tuple[int, ...] = (2, 2, 2, 2)
    # framewise: hidden widths of the encoder; the decoder mirrors them
    hidden_dims: tuple[int, ...] = (256, 128, 64)
    leaky_slope: float = 0.2
    speaker_init_scale: float = 0.1

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.conv_kernel = tuple(int(k) for k in self.conv_kernel)
        self.freq_strides = tuple(int(s) for s in self.freq_strides)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.conv_channels) != len(self.freq_strides):
            raise ConfigurationError("conv_channels and freq_strides must have equal length")
        if len(self.conv_kernel) != 2 or any(k % 2 == 0 for k in self.conv_kernel):
            raise ConfigurationError("conv_kernel must be two odd sizes (frequency, time)")
        if min(self.latent_dim, self.speaker_dim, self.sp_dim, self.mcc_dim) < 1:
            raise ConfigurationError("dimensions must be positive")

    @property
    def cond_dim(self) -> int:
        return self.speaker_dim + (2 if self.f0_conditioning else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

class Gated(nn.Module):
    """Gated linear unit around a layer that emits 2*C channels on ``dim``.

    The first half is the linear path, the second half the gate.
    """

    def __init__(self, layer: nn.Module, dim: int = 1):
        super().__init__()
        self.layer = layer
        self.dim = dim

    def forward(self, x):
        linear, gate = self.layer(x).chunk(2, dim=self.dim)
        return linear * torch.sigmoid(gate)


def conv_heights(height: int, kernel: int, strides: Sequence[int]) -> list[int]:
    pad = kernel // 2
    hs = [height]
    for s in strides:
        hs.append((hs[-1] + 2 * pad - kernel) // s + 1)
    return hs


def _broadcast_cond(cond: torch.Tensor, height: int) -> torch.Tensor:
    # (B, N, C) -> (B, C, H, N)
    return cond.transpose(1, 2).unsqueeze(2).expand(-1, -1, height, -1)


class FramewiseEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, slope: float = 0.2):
        super().__init__()
        self.in_dim = in_dim
        dims = [in_dim, *hidden]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.norms = nn.ModuleList(nn.LayerNorm(b) for b in dims[1:])
        self.mu = nn.Linear(dims[-1], out_dim)
        self.logvar = nn.Linear(dims[-1], out_dim)
        self.slope = slope

    def forward(self, x):
        h = x
        for layer, norm in zip(self.layers, self.norms):
            h = F.leaky_relu(norm(layer(h)), self.slope)
        return self.mu(h), self.logvar(h)


class FramewiseDecoder(nn.Module):
    def __init__(self, out_dim: int, hidden: Sequence[int], latent_dim: int, cond_dim: int,
                 f0_conditioning: bool = False):
        super().__init__()
        self.out_dim = out_dim
        self.cond_dim = cond_dim
        self.f0_conditioning = f0_conditioning
        dims = [latent_dim, *reversed(hidden)]
        self.layers = nn.ModuleList(
            Gated(nn.Linear(a + cond_dim, 2 * b), dim=-1) for a, b in zip(dims[:-1], dims[1:])
        )
        self.out = nn.Linear(dims[-1] + cond_dim, out_dim)

    def forward(self, z, cond):
        h = z
        for layer in self.layers:
            h = layer(torch.cat([h, cond], dim=-1))
        return self.out(torch.cat([h, cond], dim=-1))


class ConvEncoder(nn.Module):
    """2-D convolutional encoder over (feature, time) with per-frame heads.

    Each layer is conv -> layer norm (over channels x height, per frame) ->
    leaky ReLU.  The heads are 1x1 convolutions over time on the flattened
    (channels x height) map.
    """

    def __init__(self, in_height: int, out_dim: int, channels: Sequence[int],
                 kernel: tuple[int, int] = (5, 5), strides: Sequence[int] = (2, 2, 2, 2),
                 slope: float = 0.2):
        super().__init__()
        self.in_dim = in_height
        kf, kt = kernel
        if len(channels) != len(strides):
            raise ConfigurationError("conv channels and frequency strides must have equal length")
        heights = conv_heights(in_height, kf, strides)
        if min(heights) < 1:
            raise ConfigurationError(f"feature height {in_height} too small for strides {tuple(strides)}")
        self.heights = heights
        chans = [1, *channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, (kf, kt), stride=(s, 1), padding=(kf // 2, kt // 2))
            for a, b, s in zip(chans[:-1], chans[1:], strides)
        )
        self.norms = nn.ModuleList(nn.LayerNorm([c, h]) for c, h in zip(channels, heights[1:]))
        flat = channels[-1] * heights[-1]
        self.mu = nn.Conv1d(flat, out_dim, 1)
        self.logvar = nn.Conv1d(flat, out_dim, 1)
        self.slope = slope

    def forward(self, x):
        h = x.transpose(1, 2).unsqueeze(1)                  # B, 1, D, N
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            h = norm(h.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
            h = F.leaky_relu(h, self.slope)
        flat = h.flatten(1, 2)                               # B, C*H, N
        return self.mu(flat).transpose(1, 2), self.logvar(flat).transpose(1, 2)


class ConvDecoder(nn.Module):
    """Mirror of :class:`ConvEncoder` with transposed frequency upsampling.

    Gated linear units throughout; the conditioning map is concatenated as
    extra channels before every layer (skip connections from the input).
    """

    def __init__(self, out_height: int, latent_dim: int, cond_dim: int, channels: Sequence[int],
                 kernel: tuple[int, int] = (5, 5), strides: Sequence[int] = (2, 2, 2, 2),
                 f0_conditioning: bool = False):
        super().__init__()
        self.out_dim = out_height
        self.cond_dim = cond_dim
        self.f0_conditioning = f0_conditioning
        kf, kt = kernel
        heights = conv_heights(out_height, kf, strides)
        if min(heights) < 1:
            raise ConfigurationError(f"feature height {out_height} too small for strides {tuple(strides)}")
        self.heights = heights
        self.top_channels = channels[-1]
        self.inp = Gated(nn.Conv1d(latent_dim + cond_dim, 2 * channels[-1] * heights[-1], 1), dim=1)
        layers = []
        n = len(channels)
        for i in range(n, 0, -1):
            c_in = channels[i - 1]
            c_out = channels[i - 2] if i >= 2 else 1
            s = strides[i - 1]
            natural = (heights[i] - 1) * s - 2 * (kf // 2) + kf
            extra = heights[i - 1] - natural
            if not 0 <= extra < s:
                raise ConfigurationError(f"cannot invert height {heights[i - 1]} -> {heights[i]} with stride {s}")
            conv = nn.ConvTranspose2d(
                c_in + cond_dim, 2 * c_out if i > 1 else 1, (kf, kt), stride=(s, 1),
                padding=(kf // 2, kt // 2), output_padding=(extra, 0),
            )
            layers.append(Gated(conv, dim=1) if i > 1 else conv)
        self.layers = nn.ModuleList(layers)

    def forward(self, z, cond):
        b, n, _ = z.shape
        h = self.inp(torch.cat([z, cond], dim=-1).transpose(1, 2))
        h = h.view(b, self.top_channels, self.heights[-1], n)
        for layer in self.layers:
            h = layer(torch.cat([h, _broadcast_cond(cond, h.shape[2])], dim=1))
        return h.squeeze(1).transpose(1, 2)


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------

def _make_encoder(arch: ArchConfig, dim: int) -> nn.Module:
    if arch.variant == "fcn":
        return ConvEncoder(dim, arch.latent_dim, arch.conv_channels, arch.conv_kernel,
                           arch.freq_strides, arch.leaky_slope)
    return FramewiseEncoder(dim, arch.hidden_dims, arch.latent_dim, arch.leaky_slope)


def _make_decoder(arch: ArchConfig, dim: int) -> nn.Module:
    if arch.variant == "fcn":
        return ConvDecoder(dim, arch.latent_dim, arch.cond_dim, arch.conv_channels, arch.conv_kernel,
                           arch.freq_strides, arch.f0_conditioning)
    return FramewiseDecoder(dim, arch.hidden_dims, arch.latent_dim, arch.cond_dim, arch.f0_conditioning)


class CdvaeModel(nn.Module):
    def __init__(self, arch: ArchConfig, speakers: Sequence[str]):
        super().__init__()
        if len(set(speakers)) != len(speakers) or not speakers:
            raise ConfigurationError("speaker list must be non-empty and unique")
        self.arch = arch
        self.speakers = list(speakers)
        self.enc_sp = _make_encoder(arch, arch.sp_dim)
        self.enc_mcc = _make_encoder(arch, arch.mcc_dim)
        self.dec_sp = _make_decoder(arch, arch.sp_dim)
        self.dec_mcc = _make_decoder(arch, arch.mcc_dim)
        self.speaker_codes = nn.Embedding(len(speakers), arch.speaker_dim)
        # feature standardization; filled by fit_normalizer
        self.register_buffer("sp_mean", torch.zeros(arch.sp_dim))
        self.register_buffer("sp_std", torch.ones(arch.sp_dim))
        self.register_buffer("mcc_mean", torch.zeros(arch.mcc_dim))
        self.register_buffer("mcc_std", torch.ones(arch.mcc_dim))
        self.register_buffer("lf0_mean", torch.zeros(()))
        self.register_buffer("lf0_std", torch.ones(()))

    def encoder(self, domain: str) -> nn.Module:
        return {"sp": self.enc_sp, "mcc": self.enc_mcc}[domain]

    def decoder(self, domain: str) -> nn.Module:
        return {"sp": self.dec_sp, "mcc": self.dec_mcc}[domain]

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise UnknownSpeakerError(f"speaker {speaker!r} not in model table {self.speakers}") from None

    def speaker_code(self, speaker) -> torch.Tensor:
        if isinstance(speaker, str):
            speaker = torch.tensor([self.speaker_index(speaker)])
        return self.speaker_codes(torch.as_tensor(speaker, dtype=torch.long))

    # -- feature space <-> model space -------------------------------------

    def fit_normalizer(self, utterances: Sequence[ft.UtteranceFeatures]) -> None:
        log_sp = np.concatenate([np.log(np.maximum(u.sp.astype(np.float64), ft.SP_FLOOR)) for u in utterances])
        mcc = np.concatenate([u.mcc.astype(np.float64) for u in utterances])
        stats = ft.f0_statistics(utterances, speaker="*")
        with torch.no_grad():
            self.sp_mean.copy_(torch.from_numpy(log_sp.mean(0)))
            self.sp_std.copy_(torch.from_numpy(np.maximum(log_sp.std(0), 1e-3)))
            self.mcc_mean.copy_(torch.from_numpy(mcc.mean(0)))
            self.mcc_std.copy_(torch.from_numpy(np.maximum(mcc.std(0), 1e-3)))
            self.lf0_mean.fill_(stats.log_mean)
            self.lf0_std.fill_(stats.log_std)

    def _np(self, name: str) -> np.ndarray:
        return getattr(self, name).detach().cpu().numpy().astype(np.float64)

    def to_model_space(self, domain: str, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if domain == "sp":
            return (np.log(np.maximum(x, ft.SP_FLOOR)) - self._np("sp_mean")) / self._np("sp_std")
        return (x - self._np("mcc_mean")) / self._np("mcc_std")

    def from_model_space(self, domain: str, x: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_model_space`; SP rows come back unit-sum."""
        x = np.asarray(x, dtype=np.float64)
        if domain == "sp":
            log_sp = x * self._np("sp_std") + self._np("sp_mean")
            sp = np.maximum(np.exp(log_sp - log_sp.max(axis=-1, keepdims=True)), 0.0)
            return sp / sp.sum(axis=-1, keepdims=True)
        return x * self._np("mcc_std") + self._np("mcc_mean")

    def f0_condition(self, contf0: np.ndarray, uv: np.ndarray) -> np.ndarray:
        lf0 = (np.log(np.asarray(contf0, dtype=np.float64)) - float(self.lf0_mean)) / float(self.lf0_std)
        return np.stack([lf0, np.asarray(uv, dtype=np.float64)], axis=-1)

    # -- network passes -----------------------------------------------------

    def encode(self, domain: str, x: torch.Tensor):
        return encode(self.encoder(domain), x)

    def decode(self, domain: str, z: torch.Tensor, speaker, f0cond=None):
        return decode(self.decoder(domain), z, self.speaker_code(speaker), f0cond)


def _as_batch(x) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x)
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() != 3:
        raise ShapeError(f"expected (frames, dim) or (batch, frames, dim), got {tuple(x.shape)}")
    return x, False


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def encode(enc: nn.Module, x):
    """Per-frame posterior (mu, logvar) for a (B, N, D) or (N, D) input."""
    x, squeeze = _as_batch(x)
    if x.shape[-1] != enc.in_dim:
        raise ShapeError(f"encoder expects feature width {enc.in_dim}, got {x.shape[-1]}")
    if x.shape[1] < 1:
        raise ShapeError("empty sequence")
    mu, logvar = enc(x.to(_param_dtype(enc)))
    if squeeze:
        return mu[0], logvar[0]
    return mu, logvar


def reparameterize(mu, logvar, noise):
    mu, logvar, noise = (torch.as_tensor(t) for t in (mu, logvar, noise))
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError(f"shape mismatch: {tuple(mu.shape)}, {tuple(logvar.shape)}, {tuple(noise.shape)}")
    return mu + torch.exp(0.5 * logvar) * noise


def decode(dec: nn.Module, z, y, f0cond=None):
    """Decode latents ``z`` with speaker code(s) ``y`` and optional F0 condition.

    ``y`` is a single code (speaker_dim,) or one per batch item (B, speaker_dim);
    it is broadcast over time.  ``f0cond`` is (B, N, 2) [standardized log
    cont-F0, uv] and must be given exactly when the decoder was built with F0
    conditioning.
    """
    if dec.f0_conditioning and f0cond is None:
        raise ConfigurationError("decoder is F0-conditioned but no f0cond was supplied")
    if not dec.f0_conditioning and f0cond is not None:
        raise ConfigurationError("decoder is not F0-conditioned; f0cond must not be supplied")
    z, squeeze = _as_batch(z)
    dtype = _param_dtype(dec)
    z = z.to(dtype)
    b, n, _ = z.shape
    y = torch.as_tensor(y).to(dtype)
    if y.dim() == 1:
        y = y.unsqueeze(0)
    if y.shape[0] == 1 and b > 1:
        y = y.expand(b, -1)
    cond = y.unsqueeze(1).expand(-1, n, -1)
    if f0cond is not None:
        f0cond, _ = _as_batch(f0cond)
        f0cond = f0cond.to(dtype)
        if f0cond.shape[:2] != (b, n) or f0cond.shape[2] != 2:
            raise ShapeError(f"f0cond must be ({b}, {n}, 2), got {tuple(f0cond.shape)}")
        cond = torch.cat([cond, f0cond], dim=-1)
    if cond.shape[-1] != dec.cond_dim:
        raise ShapeError(f"conditioning width {cond.shape[-1]} != decoder's {dec.cond_dim}")
    out = dec(z, cond)
    return out[0] if squeeze else out


def build_model(arch: ArchConfig, speakers: Sequence[str], seed: int = 0) -> CdvaeModel:
    """Construct a model with initial parameters fully determined by ``seed``."""
    if not isinstance(arch, ArchConfig):
        arch = ArchConfig.from_dict(dict(arch))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CdvaeModel(arch, speakers)
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            model.speaker_codes.weight.copy_(
                torch.randn(model.speaker_codes.weight.shape, generator=gen) * arch.speaker_init_scale
            )
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
