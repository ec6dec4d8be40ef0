"""Objective scores (SI-SDR, STOI) and per-condition report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal

SI_SDR_CAP = 60.0

# STOI constants (standard definition)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps

RESAMPLE_REJECTION_DB = 60.0


@dataclass(frozen=True)
class MetricsRecord:
    si_sdr_db: float
    stoi: float
    snr_condition: float
    variant_id: str = ""
    corruption_mode: str = "none"
    clip_id: str = ""


def _samples(w) -> np.ndarray:
    return np.asarray(getattr(w, "samples", w), dtype=np.float64)


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped to +-60."""
    ref, est = _samples(ref), _samples(est)
    if ref.shape != est.shape:
        raise ValueError(f"si_sdr: length mismatch {ref.shape} vs {est.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise ValueError("si_sdr: reference has zero power")
    target = (np.dot(est, ref) / ref_energy) * ref
    err = est - target
    ratio = np.dot(target, target) / (np.dot(err, err) + 1e-12)
    if ratio <= 0:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(ratio), -SI_SDR_CAP, SI_SDR_CAP))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc anti-aliasing filter (60 dB stop-band rejection).

    Same design as the Octave/MATLAB ``resample`` used by the reference STOI
    code, so scores agree with it to float precision.
    """
    cutoff = 1.0 / (2 * max(up, down))
    rejection = RESAMPLE_REJECTION_DB
    half = int(np.ceil((rejection - 8.0) / (28.714 * cutoff / 10.0)))
    t = np.arange(-half, half + 1)
    h = 2 * up * cutoff * np.sinc(2 * cutoff * t) * np.kaiser(2 * half + 1, 0.1102 * (rejection - 8.7))
    return h / h.sum()


def resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    if fs_in == fs_out:
        return np.asarray(x, dtype=np.float64).copy()
    ratio = Fraction(fs_out, fs_in)
    up, down = ratio.numerator, ratio.denominator
    return signal.resample_poly(np.asarray(x, dtype=np.float64), up, down,
                                window=_resample_filter(up, down))


@lru_cache(maxsize=4)
def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Binary [n_bands, nfft//2+1] matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x: np.ndarray, hop: int) -> np.ndarray:
    # frame starts strictly below len - frame, as in the reference code
    n = -(-(len(x) - STOI_FRAME) // hop) if len(x) > STOI_FRAME else 0
    idx = np.arange(n)[:, None] * hop + np.arange(STOI_FRAME)[None, :]
    return x[idx] * _stoi_window()


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n = len(frames)
    out = np.zeros((n - 1) * hop + STOI_FRAME) if n else np.zeros(0)
    for i in range(n):
        out[i * hop:i * hop + STOI_FRAME] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE):
    """Drop frames whose reference energy is ``dyn_range`` dB below the loudest."""
    hop = STOI_FRAME // 2
    xf, yf = _frames(x, hop), _frames(y, hop)
    if len(xf) == 0:
        return np.zeros(0), np.zeros(0)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME // 2), n=STOI_NFFT, axis=1)  # [frames, bins]
    power = np.abs(spec) ** 2
    return np.sqrt(third_octave_bands() @ power.T)  # [bands, frames]


def stoi(ref, est, fs: int = 16000) -> float:
    """Short-time objective intelligibility of ``est`` against ``ref``, in [0, 1]."""
    x, y = _samples(ref), _samples(est)
    if x.shape != y.shape:
        raise ValueError(f"stoi: length mismatch {x.shape} vs {y.shape}")
    if len(x) < 0.5 * fs:
        raise ValueError("stoi: signals must be at least 0.5 s long")
    x, y = resample(x, fs, STOI_FS), resample(y, fs, STOI_FS)
    x, y = remove_silent_frames(x, y)
    X, Y = _band_envelopes(x), _band_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(
            f"stoi: only {n_frames} non-silent frames remain, need {STOI_SEGMENT}"
        )
    # sliding segments [n_seg, bands, N]
    idx = np.arange(STOI_SEGMENT, n_frames + 1)[:, None] + np.arange(-STOI_SEGMENT, 0)[None, :]
    Xs = np.transpose(X[:, idx], (1, 0, 2))
    Ys = np.transpose(Y[:, idx], (1, 0, 2))

    scale = np.linalg.norm(Xs, axis=2, keepdims=True) / (np.linalg.norm(Ys, axis=2, keepdims=True) + _EPS)
    Yn = np.minimum(Ys * scale, Xs * (1.0 + 10.0 ** (-STOI_BETA / 20.0)))

    Xc = Xs - Xs.mean(axis=2, keepdims=True)
    Yc = Yn - Yn.mean(axis=2, keepdims=True)
    Xc /= np.linalg.norm(Xc, axis=2, keepdims=True) + _EPS
    Yc /= np.linalg.norm(Yc, axis=2, keepdims=True) + _EPS
    d = float(np.mean(np.sum(Xc * Yc, axis=2)))
    if not np.isfinite(d):
        return 0.0
    return float(np.clip(d, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Records and reports
# ---------------------------------------------------------------------------

def evaluate_clip(ref, est, snr_condition: float = 0.0, variant_id: str = "",
                  corruption_mode: str = "none", clip_id: str = "", fs: int = 16000) -> MetricsRecord:
    ref_s, est_s = _samples(ref), _samples(est)
    if ref_s.shape != est_s.shape:
        raise ValueError(f"evaluate_clip: length mismatch {ref_s.shape} vs {est_s.shape}")
    return MetricsRecord(
        si_sdr_db=si_sdr(ref_s, est_s),
        stoi=stoi(ref_s, est_s, fs),
        snr_condition=float(snr_condition),
        variant_id=variant_id,
        corruption_mode=corruption_mode,
        clip_id=clip_id,
    )


@dataclass(frozen=True)
class ReportRow:
    variant_id: str
    corruption_mode: str
    snr_db: float
    si_sdr_db: float
    stoi: float
    n_clips: int


_VARIANT_ORDER = ("noisy", "aose", "avse_concat", "avse_mam", "avse_sam", "dual_full")
_MODE_ORDER = ("none", "mask_whole", "mask_region", "random_mask")


def _rank(label: str, order: tuple[str, ...]):
    base, _, suffix = label.partition("/")
    return (order.index(base) if base in order else len(order), base, suffix)


REPORT_COLUMNS = ("variant_id", "corruption_mode", "snr_db", "si_sdr_db", "stoi", "n_clips")


def aggregate(records) -> list[ReportRow]:
    """Per-(variant, SNR, corruption) means.

    Variants follow the ablation ladder and corruption modes the robustness
    grid (unknown labels sort after, alphabetically); SNR ascends inside each
    group. The ordering never depends on record order.
    """
    records = list(records)
    if not records:
        raise ValueError("aggregate: no records")
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.variant_id, r.corruption_mode, float(r.snr_condition)), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (_rank(k[0], _VARIANT_ORDER), _rank(k[1], _MODE_ORDER), k[2])):
        members = sorted(groups[key], key=lambda r: (r.clip_id, r.si_sdr_db, r.stoi))
        rows.append(ReportRow(
            variant_id=key[0], corruption_mode=key[1], snr_db=key[2],
            si_sdr_db=float(np.mean([m.si_sdr_db for m in members])),
            stoi=float(np.mean([m.stoi for m in members])),
            n_clips=len(members),
        ))
    return rows


def report_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.variant_id, r.corruption_mode, f"{r.snr_db:g}",
                         f"{r.si_sdr_db:.4f}", f"{r.stoi:.4f}", r.n_clips])
    return buf.getvalue()


def read_report_csv(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [ReportRow(r["variant_id"], r["corruption_mode"], float(r["snr_db"]),
                      float(r["si_sdr_db"]), float(r["stoi"]), int(r["n_clips"])) for r in reader]


def report_text(rows: list[ReportRow], title: str = "") -> str:
    """Aligned table: one line per (variant, corruption), SNR groups as columns."""
    snrs = sorted({r.snr_db for r in rows})
    lines: dict[tuple[str, str], dict[float, ReportRow]] = {}
    for r in rows:
        lines.setdefault((r.variant_id, r.corruption_mode), {})[r.snr_db] = r
    label_w = max(len(f"{v} [{c}]") for v, c in lines) + 2
    head1 = " " * label_w + "".join(f"{f'{s:g} dB':^18}" for s in snrs)
    head2 = f"{'model':<{label_w}}" + "".join(f"{'SI-SDR':>9}{'STOI':>9}" for _ in snrs)
    out = [title] if title else []
    out += [head1, head2, "-" * len(head2)]
    for (v, c), by_snr in lines.items():
        cells = []
        for s in snrs:
            r = by_snr.get(s)
            cells.append(f"{r.si_sdr_db:>9.4f}{r.stoi:>9.4f}" if r else f"{'-':>9}{'-':>9}")
        out.append(f"{f'{v} [{c}]':<{label_w}}" + "".join(cells))
    return "\n".join(out) + "\n"


def parse_report_text(text: str) -> list[ReportRow]:
    """Inverse of :func:`report_text` (n_clips is not carried and comes back as 0)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    i = next(k for k, ln in enumerate(lines) if ln.lstrip().startswith("model"))
    snrs = [float(tok) for tok in lines[i - 1].split() if tok != "dB"]
    rows = []
    for ln in lines[i + 2:]:
        label, _, rest = ln.partition("]")
        variant, _, mode = label.partition(" [")
        vals = rest.split()
        for j, s in enumerate(snrs):
            a, b = vals[2 * j], vals[2 * j + 1]
            if a == "-":
                continue
            rows.append(ReportRow(variant.strip(), mode, s, float(a), float(b), 0))
    return rows


def records_to_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
