"""Procedural audio-visual corpus.

Each clip pairs a harmonic pseudo-utterance with a rendered face video whose
lip aperture follows the utterance envelope and whose identity band encodes
the speaker's pitch. A bright square random-walks in a corner independently
of the audio. Noise comes in four kinds, one of which (``babble``) is made of
other synthetic speakers.

Geometry constants are (x = column, y = row) in a 112x112 frame.
"""

from __future__ import annotations

import json
import logging
import shutil
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .config import CorpusConfig
from .dsp import Waveform, measured_snr, snr_gain
from .io import quantize, read_video, read_wav, write_video, write_wav

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME = 112

BACKGROUND = 20
FACE_CENTER = (56, 52)
FACE_RADII = (40, 52)
FACE_LEVEL = 110
BAND_ROWS = (20, 32)
LIP_CENTER = (56, 78)
LIP_RX = 18
LIP_RY_MIN, LIP_RY_GAIN = 2.0, 14.0
DISTRACTOR_SIZE = 12
DISTRACTOR_LEVEL = 220
CORNER = 28
PIXEL_NOISE = 3.0

# Lip bounding box used by the "mask lip in face" corruption.
LIP_BOX_ROWS = (62, 94)
LIP_BOX_COLS = (38, 74)

CORRUPTION_MODES = ("none", "mask_whole", "mask_region", "random_mask")

F0_RANGE = (90.0, 250.0)
TILT_RANGE = (0.5, 0.9)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    base_f0: float
    spectral_tilt: float
    face_seed: int

    def __post_init__(self):
        if not F0_RANGE[0] <= self.base_f0 <= F0_RANGE[1]:
            raise ValueError(f"base_f0 {self.base_f0} outside {F0_RANGE}")
        if not TILT_RANGE[0] <= self.spectral_tilt <= TILT_RANGE[1]:
            raise ValueError(f"spectral_tilt {self.spectral_tilt} outside {TILT_RANGE}")


@dataclass(frozen=True)
class MixtureManifestEntry:
    clip_id: str
    split: str
    speaker_id: str
    clean_path: str
    video_path: str
    noise_path: str
    noise_kind: str
    snr_db: float
    gain: float
    seed: int


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (independent of hash salting)."""
    key = "/".join(str(p) for p in parts).encode()
    lo = zlib.crc32(key)
    hi = zlib.crc32(key[::-1] + b"#")
    return (hi << 31) ^ lo


def random_profile(rng: np.random.Generator, speaker_id: str) -> SpeakerProfile:
    return SpeakerProfile(
        speaker_id=speaker_id,
        base_f0=float(rng.uniform(*F0_RANGE)),
        spectral_tilt=float(rng.uniform(*TILT_RANGE)),
        face_seed=int(rng.integers(0, 2**31 - 1)),
    )


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def _n_samples(duration: float) -> int:
    return int(round(duration * SAMPLE_RATE))


def frame_envelope(x: np.ndarray, n_frames: int) -> np.ndarray:
    """Per-video-frame RMS, max-normalised to [0, 1]."""
    edges = np.linspace(0, len(x), n_frames + 1).round().astype(int)
    env = np.array([np.sqrt(np.mean(x[a:b] ** 2)) if b > a else 0.0
                    for a, b in zip(edges[:-1], edges[1:])])
    peak = env.max()
    return env / peak if peak > 0 else env


def _ramp(n: int, ramp: int) -> np.ndarray:
    g = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        edge = 0.5 * (1 - np.cos(np.pi * np.arange(r) / r))
        g[:r] = edge
        g[n - r:] = edge[::-1]
    return g


def synth_utterance(profile: SpeakerProfile, duration: float = 2.55, seed: int = 0,
                    n_frames: int = 64, return_segments: bool = False):
    """Harmonic/noise pseudo-phoneme sequence and its per-frame envelope."""
    rng = np.random.default_rng(seed)
    total = _n_samples(duration)
    out = np.zeros(total)
    ramp = int(0.020 * SAMPLE_RATE)
    segments = []
    pos = 0
    while pos < total:
        seg_len = int(rng.uniform(0.080, 0.240) * SAMPLE_RATE)
        n = min(seg_len, total - pos)
        t = np.arange(n) / SAMPLE_RATE
        if rng.random() < 0.1:
            kind, f0 = "silence", None
            seg = np.zeros(n)
        elif rng.random() < 0.8:
            kind = "voiced"
            f0 = profile.base_f0 * 2.0 ** rng.uniform(-0.3, 0.3)
            phases = rng.uniform(0, 2 * np.pi, size=8)
            seg = np.zeros(n)
            for k in range(1, 9):
                if k * f0 < SAMPLE_RATE / 2:
                    seg += profile.spectral_tilt ** k * np.sin(2 * np.pi * k * f0 * t + phases[k - 1])
            seg *= rng.uniform(0.3, 1.0)
        else:
            kind, f0 = "unvoiced", None
            lo = rng.uniform(1500, 3000)
            hi = min(lo + rng.uniform(1500, 4000), 7600)
            sos = signal.butter(4, [lo, hi], btype="band", fs=SAMPLE_RATE, output="sos")
            seg = signal.sosfilt(sos, rng.standard_normal(n))
            seg *= rng.uniform(0.1, 0.4) / (np.std(seg) * 3 + 1e-12)
        out[pos:pos + n] = seg * _ramp(n, ramp)
        segments.append((kind, pos, n, f0))
        pos += n
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    env = frame_envelope(out, n_frames)
    wave_ = Waveform(out.astype(np.float32), SAMPLE_RATE)
    if return_segments:
        return wave_, env, segments
    return wave_, env


def synth_noise(kind: str, duration: float = 2.55, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    n = _n_samples(duration)
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        scale = np.zeros_like(f)
        scale[1:] = 1.0 / np.sqrt(f[1:])  # 1/f power
        x = np.fft.irfft(spec * scale, n=n)
    elif kind == "modulated":
        # slow envelope: white noise band-limited to 0.5-2 Hz, mapped to [0.1, 1]
        ctrl_rate = 100
        m = int(np.ceil(duration * ctrl_rate)) + 1
        sos = signal.butter(2, [0.5, 2.0], btype="band", fs=ctrl_rate, output="sos")
        ctrl = signal.sosfiltfilt(sos, rng.standard_normal(m + 400))[200:200 + m]
        ctrl = (ctrl - ctrl.min()) / (np.ptp(ctrl) + 1e-12)
        env = 0.1 + 0.9 * ctrl
        env = np.interp(np.arange(n) / SAMPLE_RATE, np.arange(m) / ctrl_rate, env)
        x = rng.standard_normal(n) * env
    elif kind == "babble":
        x = np.zeros(n)
        for i in range(4):
            prof = random_profile(rng, f"babble{i}")
            utt, _ = synth_utterance(prof, duration, int(rng.integers(0, 2**31 - 1)))
            x += utt.samples
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = x / (np.max(np.abs(x)) + 1e-12) * 0.9
    return Waveform(x.astype(np.float32), SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Video
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:FRAME, 0:FRAME]


def _ellipse(cx, cy, rx, ry) -> np.ndarray:
    return ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2 <= 1.0


FACE_MASK = _ellipse(*FACE_CENTER, *FACE_RADII)
BAND_MASK = FACE_MASK & (_YY >= BAND_ROWS[0]) & (_YY < BAND_ROWS[1])


def identity_level(base_f0: float) -> float:
    return 80.0 + 120.0 * (base_f0 - F0_RANGE[0]) / (F0_RANGE[1] - F0_RANGE[0])


def f0_from_identity(level: float) -> float:
    return F0_RANGE[0] + (level - 80.0) * (F0_RANGE[1] - F0_RANGE[0]) / 120.0


def lip_radius(envelope_value: float) -> float:
    return LIP_RY_MIN + LIP_RY_GAIN * float(envelope_value)


def render_video(profile: SpeakerProfile, envelope: np.ndarray, seed: int = 0) -> np.ndarray:
    """uint8 frames ``[N, 112, 112]``."""
    rng = np.random.default_rng(seed)
    envelope = np.asarray(envelope, dtype=np.float64)
    n = len(envelope)
    frames = np.empty((n, FRAME, FRAME), dtype=np.uint8)
    base = np.full((FRAME, FRAME), float(BACKGROUND))
    base[FACE_MASK] = FACE_LEVEL
    base[BAND_MASK] = identity_level(profile.base_f0)

    span = CORNER - DISTRACTOR_SIZE
    pos = rng.integers(0, span + 1, size=2)
    for i in range(n):
        img = base.copy()
        img[_ellipse(LIP_CENTER[0], LIP_CENTER[1], LIP_RX, lip_radius(envelope[i]))] = BACKGROUND
        pos = np.clip(pos + rng.integers(-2, 3, size=2), 0, span)
        r0 = int(pos[0])
        c0 = FRAME - CORNER + int(pos[1])
        img[r0:r0 + DISTRACTOR_SIZE, c0:c0 + DISTRACTOR_SIZE] = DISTRACTOR_LEVEL
        img += rng.normal(0.0, PIXEL_NOISE, size=img.shape)
        frames[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return frames


def lip_aperture(frames: np.ndarray) -> np.ndarray:
    """Dark-pixel count inside the lip bounding box, per frame."""
    r0, r1 = LIP_BOX_ROWS
    c0, c1 = LIP_BOX_COLS
    box = frames[:, r0:r1 + 1, c0:c1 + 1].astype(np.float64)
    return (box < (BACKGROUND + FACE_LEVEL) / 2).sum(axis=(1, 2)).astype(np.float64)


def identity_band_level(frames: np.ndarray) -> float:
    return float(np.median(frames[:, BAND_MASK]))


def corrupt_video(v: np.ndarray, mode: str = "none", seed: int = 0,
                  fractions: tuple[float, float] | None = None) -> np.ndarray:
    """Apply one of the visual-corruption conditions.

    The fill value is the clip's mean intensity. ``fractions`` overrides the
    random (temporal, spatial) coverage drawn for ``random_mask``.
    """
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    v = np.asarray(v)
    if mode == "none":
        return v.copy()
    fill = np.uint8(np.clip(np.round(v.mean()), 0, 255))
    out = v.copy()
    n, h, w = v.shape
    if mode == "mask_whole":
        out[:] = fill
    elif mode == "mask_region":
        r0, r1 = (int(round(x * h / FRAME)) for x in LIP_BOX_ROWS)
        c0, c1 = (int(round(x * w / FRAME)) for x in LIP_BOX_COLS)
        out[:, r0:r1 + 1, c0:c1 + 1] = fill
    else:
        rng = np.random.default_rng(seed)
        if fractions is None:
            ft, fs = rng.uniform(0, 1), rng.uniform(0, 1)
        else:
            ft, fs = fractions
        n_t = int(np.ceil(ft * n))
        t0 = int(rng.integers(0, n - n_t + 1))
        area = fs * h * w
        # rectangle of the requested area with a random aspect ratio that fits
        lo = max(area / w, 1.0) if area > 0 else 0.0
        rh = int(round(rng.uniform(lo, h))) if area > 0 else 0
        rh = max(min(rh, h), 1) if area > 0 else 0
        rw = int(round(area / rh)) if rh else 0
        rw = min(rw, w)
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        out[t0:t0 + n_t, r0:r0 + rh, c0:c0 + rw] = fill
    return out


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def _split_counts(cfg: CorpusConfig) -> dict[str, int]:
    return {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}


def corpus_speakers(cfg: CorpusConfig) -> dict[str, list[SpeakerProfile]]:
    rng = np.random.default_rng(derive_seed(cfg.seed, "speakers"))
    profiles = [random_profile(rng, f"spk{i:03d}") for i in range(cfg.n_speakers)]
    out, start = {}, 0
    for split, count in zip(SPLITS, cfg.speaker_split):
        out[split] = profiles[start:start + count]
        start += count
    return out


def make_clip(cfg: CorpusConfig, split: str, index: int, speakers: list[SpeakerProfile]):
    """Generate one clip; the RNG stream depends only on (corpus seed, clip id)."""
    clip_id = f"{split}_{index:04d}"
    seed = derive_seed(cfg.seed, clip_id)
    rng = np.random.default_rng(seed)
    profile = speakers[int(rng.integers(0, len(speakers)))]
    utt, env = synth_utterance(profile, cfg.duration, int(rng.integers(0, 2**62)), cfg.n_frames)
    video = render_video(profile, env, int(rng.integers(0, 2**62)))
    kind = cfg.noise_kinds[int(rng.integers(0, len(cfg.noise_kinds)))]
    noise = synth_noise(kind, cfg.duration, int(rng.integers(0, 2**62)))
    return clip_id, seed, profile, utt, video, kind, noise


def build_corpus(cfg: CorpusConfig, out_dir, overwrite: bool = False, jobs: int = 1) -> Path:
    """Write clean/noise WAVs, videos and ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} is not empty (pass overwrite=True to replace it)")
        shutil.rmtree(out)
    for sub in ("clean", "video", "noise"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    speakers = corpus_speakers(cfg)
    tasks = [(cfg, out, split, i, speakers[split])
             for split in SPLITS for i in range(_split_counts(cfg)[split])]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_write_clip, tasks))
    else:
        results = [_write_clip(t) for t in tasks]
    entries = [asdict(r) for rows in results for r in rows]
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    (out / "corpus_config.json").write_text(
        json.dumps(asdict(cfg), indent=1) + "\n", encoding="utf-8")
    log.info("wrote %d clips, %d manifest rows to %s", len(tasks), len(entries), out)
    return manifest


def _write_clip(task) -> list[MixtureManifestEntry]:
    cfg, out, split, i, speakers = task
    clip_id, seed, profile, utt, video, kind, noise = make_clip(cfg, split, i, speakers)
    paths = {"clean": f"clean/{clip_id}.wav", "video": f"video/{clip_id}.vid",
             "noise": f"noise/{clip_id}.wav"}
    write_wav(out / paths["clean"], utt)
    write_video(out / paths["video"], video)
    write_wav(out / paths["noise"], noise)
    # gains refer to the samples as they will be read back from disk
    clean_q, noise_q = quantize(utt.samples), quantize(noise.samples)
    return [MixtureManifestEntry(
        clip_id=clip_id, split=split, speaker_id=profile.speaker_id,
        clean_path=paths["clean"], video_path=paths["video"], noise_path=paths["noise"],
        noise_kind=kind, snr_db=float(snr), gain=snr_gain(clean_q, noise_q, snr), seed=int(seed),
    ) for snr in cfg.snr_set]


def load_manifest(path) -> list[MixtureManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = json.loads(path.read_text(encoding="utf-8"))
    return [MixtureManifestEntry(**r) for r in rows]


@dataclass
class Clip:
    clip_id: str
    split: str
    speaker_id: str
    clean: np.ndarray
    noise: np.ndarray
    noise_kind: str
    video_path: Path

    _video: np.ndarray | None = None

    def video(self) -> np.ndarray:
        if self._video is None:
            self._video = read_video(self.video_path)
        return self._video


class Corpus:
    """In-memory view of a corpus directory, one :class:`Clip` per clip id."""

    def __init__(self, manifest_path, load_video: bool = True):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.entries = load_manifest(self.manifest_path)
        self.clips: dict[str, Clip] = {}
        for e in self.entries:
            if e.clip_id in self.clips:
                continue
            clip = Clip(
                clip_id=e.clip_id, split=e.split, speaker_id=e.speaker_id,
                clean=read_wav(self.root / e.clean_path).samples,
                noise=read_wav(self.root / e.noise_path).samples,
                noise_kind=e.noise_kind, video_path=self.root / e.video_path,
            )
            if load_video:
                clip.video()
            self.clips[e.clip_id] = clip

    def split(self, name: str) -> list[Clip]:
        return [c for c in self.clips.values() if c.split == name]

    def rows(self, split: str) -> list[MixtureManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def remix(self, entry: MixtureManifestEntry) -> tuple[np.ndarray, float]:
        """Noisy waveform for a manifest row and its measured SNR."""
        clip = self.clips[entry.clip_id]
        noisy = clip.clean + entry.gain * clip.noise
        return noisy, measured_snr(clip.clean, clip.noise, entry.gain)
