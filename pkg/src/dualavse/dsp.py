"""Spectral front-end and back-end.

STFT/iSTFT with centre reflection padding and window-sum normalised
overlap-add, complex ratio masks, and SNR-controlled mixing. Everything is
computed in float64 and handed back as float32.

Arrays follow the ``[2, F, T]`` convention: plane 0 real, plane 1 imaginary.
The ``*_batch`` helpers accept any number of leading axes and are what the
training loop uses; the dataclass wrappers carry the sample-rate and config
checks for the public API.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import StftConfig

DEFAULT_EPS = 1e-8
WINDOW_SUM_FLOOR = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1:
            raise ValueError(f"Waveform must be mono (1-D), got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    data: np.ndarray
    config: StftConfig = StftConfig()

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[0] != 2 or d.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectrogram must be [2, {self.config.n_bins}, T], got {d.shape}"
            )
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def to_complex(self) -> np.ndarray:
        return self.data[0].astype(np.float64) + 1j * self.data[1].astype(np.float64)


@dataclass(frozen=True)
class ComplexMask:
    data: np.ndarray
    clip_bound: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim < 1 or d.shape[0] != 2:
            raise ValueError(f"mask must have a leading real/imag axis of 2, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def hann_window(win_len: int) -> np.ndarray:
    """Periodic Hann window, ``0.5 * (1 - cos(2*pi*n / win_len))``."""
    if int(win_len) != win_len or win_len < 2:
        raise ValueError(f"win_len must be an integer >= 2, got {win_len!r}")
    n = np.arange(int(win_len), dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / win_len))


def _frame_offsets(n_frames: int, cfg: StftConfig) -> np.ndarray:
    return np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.win_len)[None, :]


def stft_batch(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """STFT over the last axis; returns ``[..., 2, F, T]`` float32."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("cannot transform an empty signal")
    pad = cfg.win_len // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    mode = "reflect" if x.shape[-1] > 1 else "constant"
    padded = np.pad(x, widths, mode=mode)
    n_frames = cfg.n_frames(x.shape[-1])
    frames = padded[..., _frame_offsets(n_frames, cfg)] * hann_window(cfg.win_len)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)  # [..., T, F]
    spec = np.swapaxes(spec, -1, -2)  # [..., F, T]
    out = np.stack([spec.real, spec.imag], axis=-3)
    return out.astype(np.float32)


def istft_batch(spec: np.ndarray, out_len: int, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Inverse of :func:`stft_batch`; ``spec`` is ``[..., 2, F, T]``."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.shape[-3] != 2 or spec.shape[-2] != cfg.n_bins:
        raise ValueError(f"expected [..., 2, {cfg.n_bins}, T], got {spec.shape}")
    n_frames = spec.shape[-1]
    z = spec[..., 0, :, :] + 1j * spec[..., 1, :, :]
    frames = np.fft.irfft(np.swapaxes(z, -1, -2), n=cfg.fft_size, axis=-1)[..., : cfg.win_len]
    win = hann_window(cfg.win_len)
    frames = frames * win

    total = (n_frames - 1) * cfg.hop + cfg.win_len
    lead = frames.shape[:-2]
    out = np.zeros(lead + (total,), dtype=np.float64)
    wsum = np.zeros(total, dtype=np.float64)
    for t in range(n_frames):
        start = t * cfg.hop
        out[..., start : start + cfg.win_len] += frames[..., t, :]
        wsum[start : start + cfg.win_len] += win**2
    ok = wsum >= WINDOW_SUM_FLOOR
    out = np.where(ok, out / np.where(ok, wsum, 1.0), 0.0)

    out = out[..., cfg.win_len // 2 :]
    if out.shape[-1] >= out_len:
        out = out[..., :out_len]
    else:
        widths = [(0, 0)] * (out.ndim - 1) + [(0, out_len - out.shape[-1])]
        out = np.pad(out, widths)
    return out.astype(np.float32)


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: waveform {w.sample_rate} Hz, config {cfg.sample_rate} Hz"
        )
    return ComplexSpectrogram(stft_batch(w.samples, cfg), cfg)


def istft(S: ComplexSpectrogram, cfg: StftConfig | None = None, out_len: int | None = None) -> Waveform:
    cfg = cfg or S.config
    if out_len is None:
        out_len = (S.n_frames - 1) * cfg.hop
    if cfg.n_frames(out_len) != S.n_frames:
        raise ValueError(
            f"out_len={out_len} implies {cfg.n_frames(out_len)} frames, spectrogram has {S.n_frames}"
        )
    return Waveform(istft_batch(S.data, out_len, cfg), cfg.sample_rate)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def cirm_batch(clean: np.ndarray, noisy: np.ndarray, clip_bound: float = 0.0,
               eps: float = DEFAULT_EPS) -> np.ndarray:
    """Complex ratio clean/noisy on ``[..., 2, F, T]`` arrays."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    _check_same_shape(clean, noisy, "compute_cirm")
    if clip_bound < 0:
        raise ValueError("clip_bound must be >= 0")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    a, b = clean[..., 0, :, :], clean[..., 1, :, :]
    c, d = noisy[..., 0, :, :], noisy[..., 1, :, :]
    denom = c * c + d * d + eps
    mask = np.stack([(a * c + b * d) / denom, (b * c - a * d) / denom], axis=-3)
    if clip_bound > 0:
        mask = np.clip(mask, -clip_bound, clip_bound)
    return mask.astype(np.float32)


def apply_mask_batch(mask: np.ndarray, spec: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    spec = np.asarray(spec, dtype=np.float64)
    _check_same_shape(mask, spec, "apply_mask")
    a, b = mask[..., 0, :, :], mask[..., 1, :, :]
    c, d = spec[..., 0, :, :], spec[..., 1, :, :]
    return np.stack([a * c - b * d, a * d + b * c], axis=-3).astype(np.float32)


def compute_cirm(S_clean: ComplexSpectrogram, S_noisy: ComplexSpectrogram,
                 clip_bound: float = 0.0, eps: float = DEFAULT_EPS) -> ComplexMask:
    return ComplexMask(cirm_batch(S_clean.data, S_noisy.data, clip_bound, eps), clip_bound)


def apply_mask(M: ComplexMask, S: ComplexSpectrogram) -> ComplexSpectrogram:
    return ComplexSpectrogram(apply_mask_batch(M.data, S.data), S.config)


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def snr_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Noise gain that puts ``noise`` at ``snr_db`` below ``clean``."""
    rc, rn = rms(clean), rms(noise)
    if rc <= 0 or rn <= 0:
        raise ValueError("mix_at_snr requires clean and noise with non-zero power")
    return rc / (rn * 10.0 ** (snr_db / 20.0))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, float]:
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)}, noise {len(noise)}")
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample-rate mismatch between clean and noise")
    gain = snr_gain(clean.samples, noise.samples, snr_db)
    noisy = clean.samples.astype(np.float64) + gain * noise.samples.astype(np.float64)
    return Waveform(noisy, clean.sample_rate), gain


def measured_snr(clean: np.ndarray, noise: np.ndarray, gain: float) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    scaled = gain * np.asarray(noise, dtype=np.float64)
    return float(10.0 * np.log10(np.sum(clean**2) / np.sum(scaled**2)))
