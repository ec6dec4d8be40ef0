"""Dual-attention audio-visual enhancement network.

Layout (batch-first everywhere)::

    video [B, N, H, W] --frontend--> [B, C0, N, H/4, W/4] --backbone stage 1-->
        --SAM--> backbone stages 2, 3 --GAP--> m_v [B, Cv, N] --TCN--> f_v
    spec  [B, 2, F, T] --encoder--> f_a [B, C, N], m_a [B, C, N], 7 skips
    (m_v, m_a) --MAM--> alpha [B, 2, N];  f_av = f_v*alpha_v + f_a*alpha_a
    f_av + skips --decoder--> mask [B, 2, F, T]

Which pieces are active depends on ``ModelConfig.variant``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

TEMPERATURE_FLOOR = 1e-4
INPUT_COMPRESSION = 0.3

# Lip view: crop of the aligned face, resized back to the face resolution.
LIP_CROP_ROWS = (56, 112)
LIP_CROP_COLS = (24, 88)


def _conv_bn_relu2d(cin, cout, kernel=3, padding=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=padding),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


# ---------------------------------------------------------------------------
# Visual path
# ---------------------------------------------------------------------------

class VisualFrontend(nn.Module):
    """3D conv (t5, s7, spatial stride 2) + BN + ReLU + spatial max-pool."""

    def __init__(self, out_channels: int, image_size: int = 112):
        super().__init__()
        self.image_size = image_size
        self.conv = nn.Conv3d(1, out_channels, kernel_size=(5, 7, 7), stride=(1, 2, 2),
                              padding=(2, 3, 3), bias=False)
        self.bn = nn.BatchNorm3d(out_channels)
        self.act = nn.ReLU()
        self.pool = nn.MaxPool3d(kernel_size=(1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        if video.dim() != 4 or video.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"video must be [B, N, {self.image_size}, {self.image_size}], got {tuple(video.shape)}"
            )
        x = self.conv(video.unsqueeze(1))
        return self.pool(self.act(self.bn(x)))


class SpatialAttention(nn.Module):
    """Single-head self-attention over the spatial positions of each frame.

    No positional encoding, so the layer is equivariant to any permutation of
    positions. Output is ``x + proj(attention(x))``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)

    def zero_init(self):
        for layer in (self.v, self.proj):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, n, h, w = x.shape
        tokens = x.permute(0, 2, 3, 4, 1).reshape(b * n, h * w, c)
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        if tokens.dtype == torch.float32:
            att = F.scaled_dot_product_attention(q, k, v)
        else:
            scores = q @ k.transpose(1, 2) / math.sqrt(c)
            att = torch.softmax(scores, dim=-1) @ v
        out = self.proj(att).reshape(b, n, h, w, c).permute(0, 4, 1, 2, 3)
        return x + out


class SeparableBlock(nn.Module):
    """Stride-2 depthwise-separable residual block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cin, 3, stride=2, padding=1, groups=cin, bias=False),
            nn.BatchNorm2d(cin),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.short = nn.Sequential(
            nn.AvgPool2d(2, stride=2, ceil_mode=True),
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.body(x) + self.short(x))


class VisualBackbone(nn.Module):
    """Per-frame 2D stages, [B, C0, N, 28, 28] -> pooled m_v [B, Cv, N].

    ``between`` (SAM in the attention variants) runs on the 14x14 output of
    the first stage.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        widths = [in_channels, max(4, out_channels // 4), max(4, out_channels // 2), out_channels]
        self.stages = nn.ModuleList(SeparableBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))

    @property
    def sam_channels(self) -> int:
        return self.stages[0].body[2].out_channels

    def spatial_features(self, x: torch.Tensor, between: nn.Module | None = None) -> torch.Tensor:
        """Pre-pool features ``[B, Cv, N, h, w]``."""
        b, c, n, h, w = x.shape
        y = x.transpose(1, 2).reshape(b * n, c, h, w)
        for i, stage in enumerate(self.stages):
            y = stage(y)
            if i == 0 and between is not None:
                y = y.reshape(b, n, *y.shape[1:]).transpose(1, 2)
                y = between(y)
                y = y.transpose(1, 2).flatten(0, 1)
        return y.reshape(b, n, *y.shape[1:]).transpose(1, 2)

    def forward(self, x: torch.Tensor, between: nn.Module | None = None) -> torch.Tensor:
        return self.spatial_features(x, between).mean(dim=(-2, -1))


class TemporalConvNet(nn.Module):
    """Three residual dilated conv blocks (kernel 3, dilations 1, 2, 4)."""

    def __init__(self, channels: int, dilations=(1, 2, 4)):
        super().__init__()
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv1d(channels, channels, 3, dilation=d, padding=d),
                nn.BatchNorm1d(channels),
                nn.ReLU(inplace=True),
            )
            for d in dilations
        )

    @property
    def reach(self) -> int:
        return sum(block[0].dilation[0] for block in self.blocks)

    def forward(self, x):
        for block in self.blocks:
            x = x + block(x)
        return x


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, use_sam: bool):
        super().__init__()
        c0, cv = cfg.frontend_channels, cfg.visual_channels
        self.frontend = VisualFrontend(c0, cfg.image_size)
        self.backbone = VisualBackbone(c0, cv)
        self.sam = SpatialAttention(self.backbone.sam_channels) if use_sam else None
        self.tcn = TemporalConvNet(cv)

    def before_sam(self) -> list[nn.Module]:
        return [self.frontend, self.backbone.stages[0]]

    def forward(self, video):
        m_v = self.backbone(self.frontend(video), between=self.sam)
        return self.tcn(m_v), m_v


# ---------------------------------------------------------------------------
# Audio path
# ---------------------------------------------------------------------------

def encoder_channels(base: int) -> list[int]:
    c = base
    return [c // 8, c // 8, c // 4, c // 4, c // 2, c // 2, c, c, c]


# (freq, time) reduction of pools 1..7
POOL_FACTORS = [(2, 1), (2, 1), (2, 1), (2, 2), (2, 2), (2, 1), (2, 1)]


def encoder_shapes(n_bins: int, n_frames: int) -> list[tuple[int, int]]:
    """Spatial size entering conv1..conv8 (the last is also the post-pool-7 size)."""
    shapes = [(n_bins, n_frames)]
    f, t = n_bins, n_frames
    for pf, pt in POOL_FACTORS:
        f, t = -(-f // pf), -(-t // pt)
        shapes.append((f, t))
    return shapes


class AudioEncoder(nn.Module):
    """Nine 3x3 convs and seven ceil-mode average pools.

    The last conv uses a frequency kernel spanning the remaining bins with no
    frequency padding, collapsing frequency to 1.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = encoder_channels(cfg.base_channels)
        self.in_shape = (2, cfg.n_bins, cfg.n_spec_frames)
        self.shapes = encoder_shapes(cfg.n_bins, cfg.n_spec_frames)
        if self.shapes[-1][1] != cfg.n_frames:
            raise ValueError("audio encoder time reduction does not reach n_frames")
        cins = [2] + ch[:-1]
        self.convs = nn.ModuleList(_conv_bn_relu2d(a, b) for a, b in zip(cins[:8], ch[:8]))
        self.pools = nn.ModuleList(
            nn.AvgPool2d(kernel_size=k, stride=k, ceil_mode=True) for k in POOL_FACTORS
        )
        f_last = self.shapes[-1][0]
        self.collapse = nn.Sequential(
            nn.Conv2d(ch[7], ch[8], kernel_size=(f_last, 3), padding=(0, 1)),
            nn.BatchNorm2d(ch[8]),
            nn.ReLU(inplace=True),
        )

    def forward(self, spec: torch.Tensor):
        if spec.dim() != 4 or tuple(spec.shape[1:]) != self.in_shape:
            raise ValueError(f"spectrogram must be [B, {', '.join(map(str, self.in_shape))}], "
                             f"got {tuple(spec.shape)}")
        x = spec
        skips = []
        m_a = None
        for i in range(7):
            x = self.convs[i](x)
            if i == 6:
                m_a = x.mean(dim=2)
            x = self.pools[i](x)
            skips.append(x)
        x = self.convs[7](x)
        f_a = self.collapse(x).squeeze(2)
        return f_a, m_a, skips


class AudioDecoder(nn.Module):
    """Mirror of :class:`AudioEncoder` producing an unbounded 2-channel mask.

    Stage k (k = 7..1) concatenates skip k, applies conv+BN+ReLU, then
    nearest-upsamples along the axes pool k reduced and resizes to the exact
    pre-pool shape.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = encoder_channels(cfg.base_channels)
        self.shapes = encoder_shapes(cfg.n_bins, cfg.n_spec_frames)
        f_last = self.shapes[-1][0]
        self.expand = nn.Sequential(
            nn.ConvTranspose2d(ch[8], ch[7], kernel_size=(f_last, 1)),
            nn.BatchNorm2d(ch[7]),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = ch[7]
        for k in range(7, 0, -1):
            skip_ch = ch[k - 1]
            cout = ch[k - 2] if k >= 2 else ch[0]
            stages.append(_conv_bn_relu2d(cin + skip_ch, cout))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.refine = _conv_bn_relu2d(cin, cin)
        self.head = nn.Conv2d(cin, 2, kernel_size=1)

    def forward(self, f_av: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != 7:
            raise ValueError(f"decoder expects 7 skip tensors, got {len(skips)}")
        x = self.expand(f_av.unsqueeze(2))
        for stage, k in zip(self.stages, range(7, 0, -1)):
            skip = skips[k - 1]
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = stage(torch.cat([x, skip], dim=1))
            pf, pt = POOL_FACTORS[k - 1]
            x = F.interpolate(x, scale_factor=(pf, pt), mode="nearest")
            x = F.interpolate(x, size=self.shapes[k - 1], mode="nearest")
        return self.head(self.refine(x))


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

class ModalityAttention(nn.Module):
    """Per-time-step softmax over (visual, audio) with learnable temperature."""

    def __init__(self, visual_channels: int, audio_channels: int, temperature_init: float = 1.0):
        super().__init__()
        self.fc = nn.Linear(visual_channels + audio_channels, 2)
        # t = softplus(tau) + floor, tau chosen so t starts at temperature_init
        target = temperature_init - TEMPERATURE_FLOOR
        tau0 = target + math.log(-math.expm1(-target)) if target > 0 else -20.0
        self.tau = nn.Parameter(torch.tensor(float(tau0)))

    @property
    def temperature(self) -> torch.Tensor:
        return F.softplus(self.tau) + TEMPERATURE_FLOOR

    def zero_init(self):
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def logits(self, m_v: torch.Tensor, m_a: torch.Tensor) -> torch.Tensor:
        z = torch.cat([m_v, m_a], dim=1).transpose(1, 2)  # [B, N, Cv+Ca]
        return self.fc(z).transpose(1, 2)  # [B, 2, N]

    def forward(self, m_v, m_a, t=None):
        t = self.temperature if t is None else t
        return modality_softmax(self.logits(m_v, m_a), t)


def modality_softmax(logits: torch.Tensor, t) -> torch.Tensor:
    if not torch.is_tensor(t):
        if t <= 0:
            raise ValueError(f"temperature must be positive, got {t}")
        t = torch.tensor(float(t), dtype=logits.dtype)
    elif bool((t <= 0).any()):
        raise ValueError("temperature must be positive")
    return torch.softmax(logits / t, dim=-2)


def fuse(f_v: torch.Tensor, f_a: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``f_v * alpha_v + f_a * alpha_a`` with the weights broadcast over channels."""
    if f_v.shape != f_a.shape:
        raise ValueError(f"fuse: feature shapes differ {tuple(f_v.shape)} vs {tuple(f_a.shape)}")
    if alpha.shape[-2] != 2 or alpha.shape[-1] != f_v.shape[-1]:
        raise ValueError(f"fuse: alpha must be [.., 2, {f_v.shape[-1]}], got {tuple(alpha.shape)}")
    return f_v * alpha[..., 0:1, :] + f_a * alpha[..., 1:2, :]


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class DualAVSE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.audio_encoder = AudioEncoder(cfg)
        self.audio_decoder = AudioDecoder(cfg)
        self.visual_encoder = VisualEncoder(cfg, cfg.uses_sam) if cfg.uses_video else None
        self.visual_proj = None
        self.mam = None
        self.concat_fuse = None
        if cfg.uses_video:
            cv = cfg.visual_channels
            if cfg.uses_mam:
                self.mam = ModalityAttention(cv, c, cfg.temperature_init)
                if cv != c:
                    self.visual_proj = nn.Conv1d(cv, c, 1)
            else:
                self.concat_fuse = nn.Conv1d(cv + c, c, 1)

    def frozen_in_stage2(self) -> list[nn.Module]:
        """Modules held fixed during the middle training stage."""
        mods: list[nn.Module] = [self.audio_encoder]
        if self.visual_encoder is not None:
            mods.extend(self.visual_encoder.before_sam())
        return mods

    def forward(self, spec: torch.Tensor, video: torch.Tensor | None = None):
        f_a, m_a, skips = self.audio_encoder(compress_spectrogram(spec))
        alpha = None
        if self.visual_encoder is None:
            f_av = f_a
        else:
            if video is None:
                raise ValueError(f"variant {self.cfg.variant!r} requires a video input")
            f_v, m_v = self.visual_encoder(video)
            if self.mam is not None:
                alpha = self.mam(m_v, m_a)
                if self.visual_proj is not None:
                    f_v = self.visual_proj(f_v)
                f_av = fuse(f_v, f_a, alpha)
            else:
                f_av = self.concat_fuse(torch.cat([f_v, f_a], dim=1))
        return self.audio_decoder(f_av, skips), alpha


def compress_spectrogram(spec: torch.Tensor, power: float = INPUT_COMPRESSION) -> torch.Tensor:
    """Scale-normalise each example, then compress magnitudes as ``|X|**power``.

    Phase is kept. The result is invariant to the overall level of ``spec``,
    so the predicted mask is too.
    """
    dims = tuple(range(1, spec.dim()))
    level = spec.pow(2).mean(dim=dims, keepdim=True).add(1e-12).sqrt()
    x = spec / level
    mag2 = x.pow(2).sum(dim=1, keepdim=True) + 1e-12
    return x * mag2.pow((power - 1.0) / 2.0)


def mask_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every mask entry."""
    if pred.shape != target.shape:
        raise ValueError(f"loss: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


# ---------------------------------------------------------------------------
# Video preparation
# ---------------------------------------------------------------------------

def lip_crop(frames: np.ndarray) -> np.ndarray:
    """Crop the mouth region of uint8 face frames and resize to the input size."""
    frames = np.asarray(frames)
    n, h, w = frames.shape
    r0, r1 = (int(v * h / 112) for v in LIP_CROP_ROWS)
    c0, c1 = (int(v * w / 112) for v in LIP_CROP_COLS)
    crop = torch.from_numpy(frames[:, r0:r1, c0:c1].astype(np.float32)).unsqueeze(1)
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return np.clip(np.round(out.squeeze(1).numpy()), 0, 255).astype(np.uint8)


def visual_view(frames: np.ndarray, visual_input: str) -> np.ndarray:
    return lip_crop(frames) if visual_input == "lip_crop" else np.asarray(frames)


def normalize_video(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> float32 in [0, 1], then per-clip zero mean / unit std."""
    x = np.asarray(frames, dtype=np.float32) / 255.0
    std = float(x.std())
    return ((x - x.mean()) / (std if std > 1e-6 else 1.0)).astype(np.float32)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
