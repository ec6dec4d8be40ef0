"""Training, enhancement and the two experiment runners.

Training draws mixtures on the fly: every example picks a training clip, a
noise kind, a noise recording of that kind and an SNR, all uniformly. The
schedule has three stages; the middle one freezes the audio encoder and the
visual layers in front of SAM.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import dsp
from .checkpoint import Checkpoint, optimizer_state, restore_optimizer, snapshot
from .config import EVAL_SNRS, ModelConfig, StftConfig, TrainSchedule
from .datagen import Corpus, MixtureManifestEntry, corrupt_video, derive_seed
from .metrics import MetricsRecord, ReportRow, aggregate, evaluate_clip
from .model import DualAVSE, mask_loss, normalize_video, visual_view

log = logging.getLogger(__name__)

FACE_MODES = ("none", "mask_whole", "mask_region", "random_mask")
LIP_MODES = ("none", "mask_whole", "random_mask")
CONDITION_LABELS = {
    ("face", "none"): "Fa", ("face", "mask_whole"): "Fb", ("face", "mask_region"): "Fc",
    ("face", "random_mask"): "Fd", ("lip", "none"): "La", ("lip", "mask_whole"): "Lb",
    ("lip", "random_mask"): "Lc",
}


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def as_corpus(corpus) -> Corpus:
    return corpus if isinstance(corpus, Corpus) else Corpus(corpus)


def segment_length(cfg: ModelConfig, stft_cfg: StftConfig) -> int:
    return (cfg.n_spec_frames - 1) * stft_cfg.hop


def variant_label(cfg: ModelConfig) -> str:
    return cfg.variant if not cfg.uses_video else f"{cfg.variant}/{cfg.visual_input}"


# ---------------------------------------------------------------------------
# Examples
# ---------------------------------------------------------------------------

class VideoCache:
    """Model-ready views of clip videos (lip crop applied once per clip)."""

    def __init__(self, corpus: Corpus, visual_input: str):
        self.corpus = corpus
        self.visual_input = visual_input
        self._views: dict[str, np.ndarray] = {}

    def view(self, clip_id: str) -> np.ndarray:
        if clip_id not in self._views:
            self._views[clip_id] = visual_view(self.corpus.clips[clip_id].video(), self.visual_input)
        return self._views[clip_id]


def make_batch(cleans: Sequence[np.ndarray], noisies: Sequence[np.ndarray],
               videos: Sequence[np.ndarray] | None, stft_cfg: StftConfig, clip_bound: float):
    clean = np.stack(cleans)
    noisy = np.stack(noisies)
    S_clean = dsp.stft_batch(clean, stft_cfg)
    S_noisy = dsp.stft_batch(noisy, stft_cfg)
    target = dsp.cirm_batch(S_clean, S_noisy, clip_bound)
    spec_t = torch.from_numpy(S_noisy)
    target_t = torch.from_numpy(target)
    video_t = None
    if videos is not None:
        video_t = torch.from_numpy(np.stack([normalize_video(v) for v in videos]))
    return spec_t, target_t, video_t


class MixtureSampler:
    def __init__(self, corpus: Corpus, cfg: ModelConfig, sched: TrainSchedule,
                 stft_cfg: StftConfig, rng: np.random.Generator):
        self.rng = rng
        self.cfg = cfg
        self.sched = sched
        self.stft_cfg = stft_cfg
        self.clips = corpus.split("train")
        if not self.clips:
            raise ValueError("corpus has no training clips")
        pool: dict[str, list[np.ndarray]] = {}
        for c in self.clips:
            pool.setdefault(c.noise_kind, []).append(c.noise)
        self.kinds = sorted(pool)
        self.pool = pool
        self.videos = VideoCache(corpus, cfg.visual_input) if cfg.uses_video else None

    def draw(self):
        cleans, noisies, videos = [], [], []
        for _ in range(self.sched.batch_size):
            clip = self.clips[int(self.rng.integers(len(self.clips)))]
            kind = self.kinds[int(self.rng.integers(len(self.kinds)))]
            recs = self.pool[kind]
            noise = recs[int(self.rng.integers(len(recs)))]
            snr = float(self.sched.snr_sampling[int(self.rng.integers(len(self.sched.snr_sampling)))])
            noise = np.roll(noise, int(self.rng.integers(len(noise))))
            gain = dsp.snr_gain(clip.clean, noise, snr)
            cleans.append(clip.clean)
            noisies.append(clip.clean + gain * noise)
            if self.videos is not None:
                videos.append(self.videos.view(clip.clip_id))
        return make_batch(cleans, noisies, videos if self.videos else None,
                          self.stft_cfg, self.sched.clip_bound)


def validation_batches(corpus: Corpus, cfg: ModelConfig, sched: TrainSchedule,
                       stft_cfg: StftConfig, batch: int = 8):
    """Fixed validation mixtures: each clip with its own noise, SNRs cycling."""
    clips = corpus.split("val")[: sched.val_clips]
    videos = VideoCache(corpus, cfg.visual_input) if cfg.uses_video else None
    out = []
    for start in range(0, len(clips), batch):
        chunk = clips[start:start + batch]
        cleans, noisies, vids = [], [], []
        for j, clip in enumerate(chunk):
            snr = float(sched.snr_sampling[(start + j) % len(sched.snr_sampling)])
            gain = dsp.snr_gain(clip.clean, clip.noise, snr)
            cleans.append(clip.clean)
            noisies.append(clip.clean + gain * clip.noise)
            if videos is not None:
                vids.append(videos.view(clip.clip_id))
        out.append(make_batch(cleans, noisies, vids if videos else None, stft_cfg, sched.clip_bound))
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _apply_stage(model: DualAVSE, stage: int) -> list[torch.nn.Module]:
    frozen = model.frozen_in_stage2() if stage == 2 else []
    frozen_ids = {id(p) for m in frozen for p in m.parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen_ids)
    return frozen


def _val_loss(model: DualAVSE, batches) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for spec, target, video in batches:
            mask, _ = model(spec, video)
            total += float(mask_loss(mask, target)) * spec.shape[0]
            count += spec.shape[0]
    model.train(was_training)
    return total / max(count, 1)


def _rng_from_state(seed: int, state: dict | None) -> np.random.Generator:
    rng = np.random.default_rng(derive_seed(seed, "train-sampler"))
    if state is not None:
        rng.bit_generator.state = state
    return rng


def train(cfg: ModelConfig, corpus, sched: TrainSchedule, stft_cfg: StftConfig = StftConfig(),
          resume: Checkpoint | None = None, max_steps: int | None = None,
          log_path=None, on_step: Callable[[dict], None] | None = None) -> Checkpoint:
    """Run the three-stage schedule; returns a checkpoint holding the best-validation weights.

    ``resume`` continues a previous run from its saved step; ``max_steps`` stops
    early (at that global step) so a run can be split across invocations.
    """
    corpus = as_corpus(corpus)
    if not corpus.split("val"):
        raise ValueError("corpus has no validation clips")
    if cfg.variant == "aose" and sched.stage_steps[1] > 0:
        warnings.warn("aose has no visual encoder; stage 2 freezes only the audio encoder",
                      stacklevel=2)

    torch.manual_seed(sched.seed)
    model = DualAVSE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=sched.learning_rate,
                           weight_decay=sched.weight_decay)
    step = 0
    best_val, best_step, best_state = math.inf, None, None
    history: list[dict] = []
    rng_state = None
    if resume is not None:
        if resume.config != cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        model.load_state_dict({k: v.clone() for k, v in resume.parameters.items()})
        restore_optimizer(model, opt, resume.optimizer)
        step = resume.step
        rng_state = resume.rng_state
        history = list(resume.log)
        if resume.best_val is not None:
            best_val, best_step = resume.best_val, resume.best_step
            best_state = {k: v.clone() for k, v in (resume.best_parameters or {}).items()} or None

    rng = _rng_from_state(sched.seed, rng_state)
    sampler = MixtureSampler(corpus, cfg, sched, stft_cfg, rng)
    val = validation_batches(corpus, cfg, sched, stft_cfg)
    total = sched.total_steps
    stop = total if max_steps is None else min(total, max_steps)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    if log_fh is not None and step == 0:
        log_fh.write("step\tstage\ttrain_loss\tval_loss\n")

    current_stage, frozen = None, []
    model.train()
    t0 = time.time()
    try:
        while step < stop:
            stage = sched.stage_of(step)
            if stage != current_stage:
                frozen = _apply_stage(model, stage)
                current_stage = stage
            model.train()
            for m in frozen:
                m.eval()
            spec, target, video = sampler.draw()
            mask, _ = model(spec, video)
            loss = mask_loss(mask, target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            row = {"step": step, "stage": stage, "train_loss": loss.item(), "val_loss": None}
            if step % sched.val_every == 0 or step == total:
                v = _val_loss(model, val)
                row["val_loss"] = v
                if v < best_val:
                    best_val, best_step, best_state = v, step, snapshot(model)
            history.append(row)
            if log_fh is not None:
                vl = "" if row["val_loss"] is None else f"{row['val_loss']:.6f}"
                log_fh.write(f"{step}\t{stage}\t{row['train_loss']:.6f}\t{vl}\n")
            if on_step is not None:
                on_step(row)
            if step % 100 == 0:
                log.info("step %d/%d stage %d loss %.4f (%.1fs)", step, total, stage,
                         row["train_loss"], time.time() - t0)
    finally:
        if log_fh is not None:
            log_fh.close()

    for p in model.parameters():
        p.requires_grad_(True)
    return Checkpoint(
        config=cfg,
        parameters=snapshot(model),
        best_parameters=best_state,
        optimizer=optimizer_state(model, opt),
        step=step,
        rng_state=rng.bit_generator.state,
        best_val=None if best_step is None else best_val,
        best_step=best_step,
        schedule=sched,
        log=history,
    )


def write_log(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tstage\ttrain_loss\tval_loss\n")
        for r in rows:
            vl = "" if r.get("val_loss") is None else f"{r['val_loss']:.6f}"
            fh.write(f"{r['step']}\t{r['stage']}\t{r['train_loss']:.6f}\t{vl}\n")


# ---------------------------------------------------------------------------
# Enhancement
# ---------------------------------------------------------------------------

def _as_model(ckpt_or_model) -> DualAVSE:
    if isinstance(ckpt_or_model, DualAVSE):
        return ckpt_or_model
    return ckpt_or_model.build_model()


def enhance_segments(model: DualAVSE, noisy: np.ndarray, videos: np.ndarray | None,
                     stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Enhance a batch of exactly one segment each; ``noisy`` is ``[B, L]``.

    ``videos`` are model-ready views (uint8, lip crop already applied).
    """
    model.eval()
    noisy = np.asarray(noisy, dtype=np.float64)
    spec = dsp.stft_batch(noisy, stft_cfg)
    video_t = None
    if model.cfg.uses_video:
        if videos is None:
            raise ValueError(f"variant {model.cfg.variant!r} requires video")
        video_t = torch.from_numpy(np.stack([normalize_video(v) for v in videos]))
    with torch.no_grad():
        mask, _ = model(torch.from_numpy(spec), video_t)
    enhanced = dsp.apply_mask_batch(mask.numpy(), spec)
    return dsp.istft_batch(enhanced, noisy.shape[-1], stft_cfg)


def enhance(ckpt, noisy: dsp.Waveform, video: np.ndarray | None = None,
            stft_cfg: StftConfig = StftConfig()) -> dsp.Waveform:
    """Enhance a waveform of any length.

    Inputs longer than one segment are processed in half-overlapping
    segments that are cross-faded with raised-cosine weights; shorter ones are
    zero-padded. ``video`` is the raw uint8 face video covering the input.
    """
    model = _as_model(ckpt)
    cfg = model.cfg
    if cfg.uses_video and video is None:
        raise ValueError(f"variant {cfg.variant!r} requires a video input")
    seg = segment_length(cfg, stft_cfg)
    x = np.asarray(noisy.samples, dtype=np.float64)
    n = len(x)
    view = visual_view(video, cfg.visual_input) if cfg.uses_video else None
    frames_per_sample = cfg.n_frames / seg

    def video_window(start: int):
        if view is None:
            return None
        f0 = int(round(start * frames_per_sample))
        clip = view[f0:f0 + cfg.n_frames]
        if len(clip) < cfg.n_frames:
            pad = np.repeat(clip[-1:] if len(clip) else view[-1:], cfg.n_frames - len(clip), axis=0)
            clip = np.concatenate([clip, pad])
        return clip

    if n <= seg:
        padded = np.pad(x, (0, seg - n))
        v = video_window(0)
        out = enhance_segments(model, padded[None], None if v is None else v[None], stft_cfg)[0][:n]
        return dsp.Waveform(out, noisy.sample_rate)

    hop = seg // 2
    starts = list(range(0, n - seg + 1, hop))
    if starts[-1] + seg < n:
        starts.append(n - seg)
    fade = 0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(seg) + 0.5) / seg)
    acc = np.zeros(n)
    wsum = np.zeros(n)
    for s in starts:
        v = video_window(s)
        y = enhance_segments(model, x[None, s:s + seg], None if v is None else v[None], stft_cfg)[0]
        w = fade.copy()
        if s == starts[0]:
            w[: seg // 2] = 1.0
        if s == starts[-1]:
            w[seg // 2:] = 1.0
        acc[s:s + seg] += w * y
        wsum[s:s + seg] += w
    return dsp.Waveform((acc / wsum).astype(np.float32), noisy.sample_rate)


def oracle_enhance(clean: np.ndarray, noisy: np.ndarray, stft_cfg: StftConfig = StftConfig(),
                   eps: float = 1e-12) -> np.ndarray:
    """Reconstruction with the unclipped ground-truth mask in place of the prediction."""
    S_clean = dsp.stft_batch(clean, stft_cfg)
    S_noisy = dsp.stft_batch(noisy, stft_cfg)
    mask = dsp.cirm_batch(S_clean, S_noisy, 0.0, eps)
    return dsp.istft_batch(dsp.apply_mask_batch(mask, S_noisy), len(noisy), stft_cfg)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _rows(corpus: Corpus, split: str, snrs: Sequence[float]) -> list[MixtureManifestEntry]:
    wanted = {float(s) for s in snrs}
    rows = [e for e in corpus.rows(split) if float(e.snr_db) in wanted]
    missing = wanted - {float(e.snr_db) for e in rows}
    if missing:
        raise ValueError(f"corpus split {split!r} has no rows at SNR {sorted(missing)}")
    return rows


def _score(args) -> MetricsRecord:
    ref, est, snr, variant, mode, clip_id = args
    return evaluate_clip(ref, est, snr, variant, mode, clip_id)


def _score_all(items: list, jobs: int) -> list[MetricsRecord]:
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_score, items, chunksize=8))
    return [_score(i) for i in items]


def evaluate(ckpt, corpus, split: str = "test", snrs: Sequence[float] = EVAL_SNRS,
             corruption: str = "none", variant_id: str | None = None,
             stft_cfg: StftConfig = StftConfig(), batch: int = 8, jobs: int = 1) -> list[MetricsRecord]:
    corpus = as_corpus(corpus)
    model = _as_model(ckpt)
    cfg = model.cfg
    variant_id = variant_id or variant_label(cfg)
    rows = _rows(corpus, split, snrs)
    videos = VideoCache(corpus, cfg.visual_input) if cfg.uses_video else None
    items = []
    for start in range(0, len(rows), batch):
        chunk = rows[start:start + batch]
        noisy = np.stack([corpus.remix(e)[0] for e in chunk])
        vids = None
        if videos is not None:
            vids = np.stack([
                corrupt_video(videos.view(e.clip_id), corruption,
                              derive_seed("corrupt", e.clip_id, corruption))
                for e in chunk
            ])
        enhanced = enhance_segments(model, noisy, vids, stft_cfg)
        for e, y in zip(chunk, enhanced):
            items.append((corpus.clips[e.clip_id].clean, y, e.snr_db, variant_id, corruption, e.clip_id))
    return _score_all(items, jobs)


def evaluate_noisy(corpus, split: str = "test", snrs: Sequence[float] = EVAL_SNRS,
                   jobs: int = 1) -> list[MetricsRecord]:
    """Scores of the unprocessed mixtures (the "noisy" reference row)."""
    corpus = as_corpus(corpus)
    items = [(corpus.clips[e.clip_id].clean, corpus.remix(e)[0], e.snr_db, "noisy", "none", e.clip_id)
             for e in _rows(corpus, split, snrs)]
    return _score_all(items, jobs)


def mean_si_sdr(records: Iterable[MetricsRecord], snrs: Iterable[float] | None = None) -> float:
    keep = None if snrs is None else {float(s) for s in snrs}
    vals = [r.si_sdr_db for r in records if keep is None or float(r.snr_condition) in keep]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def parse_variant(spec: str, base: ModelConfig) -> ModelConfig:
    """``"dual_full"`` or ``"dual_full/lip_crop"`` -> config."""
    variant, _, visual = spec.partition("/")
    return base.replace(variant=variant, visual_input=visual or "face")


@dataclass
class ExperimentResult:
    rows: list[ReportRow]
    records: list[MetricsRecord]
    checkpoints: dict[str, Checkpoint]
    degradation: dict[str, float] | None = None


def run_ablation(corpus, sched: TrainSchedule, variants: Sequence[str],
                 base: ModelConfig = ModelConfig(), snrs: Sequence[float] = EVAL_SNRS,
                 stft_cfg: StftConfig = StftConfig(), include_noisy: bool = False,
                 jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Train every variant from the same seed and score it on the test split."""
    if not variants:
        raise ValueError("run_ablation: empty variant list")
    corpus = as_corpus(corpus)
    records: list[MetricsRecord] = []
    ckpts: dict[str, Checkpoint] = {}
    if include_noisy:
        records += evaluate_noisy(corpus, "test", snrs, jobs)
    for spec in variants:
        cfg = parse_variant(spec, base)
        label = variant_label(cfg)
        log.info("ablation: training %s", label)
        log_path = None
        if out_dir is not None:
            log_path = Path(out_dir) / f"train_{label.replace('/', '_')}.log"
            log_path.unlink(missing_ok=True)
        ckpt = train(cfg, corpus, sched, stft_cfg, log_path=log_path)
        ckpts[label] = ckpt
        if out_dir is not None:
            ckpt.save(Path(out_dir) / f"{label.replace('/', '_')}.ckpt")
        records += evaluate(ckpt, corpus, "test", snrs, "none", label, stft_cfg, jobs=jobs)
    return ExperimentResult(aggregate(records), records, ckpts)


def degradation_stats(rows: Sequence[ReportRow]) -> dict[str, float]:
    """Percent drop of the all-metric, all-SNR average against the uncorrupted row."""
    cells: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        cells.setdefault((r.variant_id, r.corruption_mode), []).extend([r.si_sdr_db, r.stoi])
    out = {}
    for (variant, mode), vals in cells.items():
        base = cells.get((variant, "none"))
        if base is None:
            continue
        b = float(np.mean(base))
        out[f"{variant}:{mode}"] = 100.0 * (b - float(np.mean(vals))) / abs(b)
    return out


def run_robustness(ckpt_face: Checkpoint | None, ckpt_lip: Checkpoint | None, corpus,
                   snrs: Sequence[float] = EVAL_SNRS, stft_cfg: StftConfig = StftConfig(),
                   jobs: int = 1) -> ExperimentResult:
    """Evaluate the face model under 4 corruption modes and the lip model under 3."""
    if ckpt_face is None or ckpt_lip is None:
        raise ValueError("run_robustness needs both a face-input and a lip-input checkpoint")
    if ckpt_face.config.visual_input != "face" or ckpt_lip.config.visual_input != "lip_crop":
        raise ValueError("run_robustness: checkpoints must be (face, lip_crop) models")
    corpus = as_corpus(corpus)
    records: list[MetricsRecord] = []
    for label, ckpt, modes in (("face", ckpt_face, FACE_MODES), ("lip", ckpt_lip, LIP_MODES)):
        model = ckpt.build_model()
        for mode in modes:
            records += evaluate(model, corpus, "test", snrs, mode, label, stft_cfg, jobs=jobs)
    rows = aggregate(records)
    return ExperimentResult(rows, records, {"face": ckpt_face, "lip": ckpt_lip},
                            degradation_stats(rows))
