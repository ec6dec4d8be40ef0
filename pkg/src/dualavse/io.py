"""On-disk formats: 16-bit PCM WAV and the raw ``AVSEVID1`` video container."""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .dsp import Waveform

VIDEO_MAGIC = b"AVSEVID1"


class FormatError(ValueError):
    """A file exists but its contents are not in the expected format."""


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise FormatError(f"{path}: expected mono 16-bit PCM")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: not a valid WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def quantize(x: np.ndarray) -> np.ndarray:
    """The exact float values a signal takes after a WAV write/read cycle."""
    pcm = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767)
    return pcm / 32768.0


def write_video(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise ValueError(f"video must be a uint8 [N, H, W] array, got {frames.dtype} {frames.shape}")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<3I", n, h, w))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_video(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:8] != VIDEO_MAGIC:
        raise FormatError(f"{path}: missing AVSEVID1 header")
    n, h, w = struct.unpack("<3I", data[8:20])
    body = data[20:]
    if len(body) != n * h * w:
        raise FormatError(f"{path}: expected {n * h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, h, w).copy()
