"""Command-line entry point: ``davse <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 1 internal error. The seed
comes from ``--seed``, else the ``DAVSE_SEED`` environment variable, else
the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import harness
from .checkpoint import Checkpoint, CheckpointError
from .config import VARIANTS, VISUAL_INPUTS, ConfigError, RunConfig
from .datagen import CORRUPTION_MODES, Corpus, build_corpus, load_manifest
from .dsp import Waveform
from .io import FormatError, read_video, read_wav, write_wav
from .metrics import aggregate, records_to_dicts, report_csv, report_text

log = logging.getLogger("dualavse")

CONFIG_NAME = "effective_config.json"


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, ConfigError, FormatError, CheckpointError, FileNotFoundError,
                FileExistsError)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_seed(flag: int | None, config_seed: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("DAVSE_SEED")
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DAVSE_SEED must be an integer, got {env!r}") from None
    return config_seed


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = RunConfig.from_dict(data)
    seed = resolve_seed(getattr(args, "seed", None), cfg.seed)
    cfg = cfg.replace(seed=seed, train=cfg.train.replace(seed=seed),
                      corpus=cfg.corpus.replace(seed=seed))
    model = cfg.model
    if getattr(args, "variant", None):
        model = model.replace(variant=args.variant)
    if getattr(args, "visual_input", None):
        model = model.replace(visual_input=args.visual_input)
    if getattr(args, "steps", None):
        cfg = cfg.replace(train=cfg.train.replace(stage_steps=tuple(args.steps)))
    return cfg.replace(model=model)


def echo_config(cfg: RunConfig, out_dir: Path, extra: dict | None = None, name: str = CONFIG_NAME):
    doc = cfg.to_dict()
    if extra:
        doc["invocation"] = extra
    (out_dir / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_path(corpus_arg: str) -> Path:
    p = Path(corpus_arg)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise FileNotFoundError(f"corpus manifest not found: {p}")
    return p


def open_corpus(corpus_arg: str, need_video: bool) -> Corpus:
    try:
        return Corpus(manifest_path(corpus_arg), load_video=need_video)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{corpus_arg}: malformed manifest ({exc})") from exc


def prepare_out_dir(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def prepare_out_file(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and not overwrite:
        raise FileExistsError(f"output file {out} exists (use --overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint.load(path)


def write_reports(rows, out: Path, records=None, prefix: str = "") -> None:
    from .plots import plot_report

    (out / f"{prefix}report.csv").write_text(report_csv(rows), encoding="utf-8")
    (out / f"{prefix}report.txt").write_text(report_text(rows) + "\n", encoding="utf-8")
    if records is not None:
        (out / f"{prefix}records.json").write_text(
            json.dumps(records_to_dicts(records), indent=1) + "\n", encoding="utf-8")
    plot_report(rows, out, prefix)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args)
    try:
        manifest = build_corpus(cfg.corpus, args.out, overwrite=args.overwrite, jobs=args.jobs)
    except FileExistsError:
        raise FileExistsError(f"output directory {args.out} is not empty (use --overwrite)") from None
    echo_config(cfg, Path(args.out), {"command": "synth"})
    entries = load_manifest(manifest)
    clips = {e.clip_id: e for e in entries}
    print(manifest)
    splits = Counter(e.split for e in clips.values())
    kinds = Counter(e.noise_kind for e in clips.values())
    snrs = Counter(e.snr_db for e in entries)
    print(f"clips: {len(clips)} ({', '.join(f'{k} {v}' for k, v in sorted(splits.items()))})")
    print(f"manifest rows: {len(entries)}; per SNR: "
          + ", ".join(f"{s:g} dB {n}" for s, n in sorted(snrs.items())))
    print("noise kinds: " + ", ".join(f"{k} {v}" for k, v in sorted(kinds.items())))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    corpus = open_corpus(args.corpus, cfg.model.uses_video)
    out = prepare_out_file(args.out, args.overwrite or bool(args.resume))
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.config != cfg.model:
        raise UsageError(f"--resume checkpoint {args.resume} has a different model config")
    log_path = out.with_suffix(".log")
    if resume is None and log_path.exists():
        log_path.unlink()
    ckpt = harness.train(cfg.model, corpus, cfg.train, cfg.stft, resume=resume,
                         max_steps=args.max_steps, log_path=log_path)
    ckpt.save(out)
    echo_config(cfg, out.parent, {"command": "train", "checkpoint": out.name},
                name=out.stem + "." + CONFIG_NAME)
    best = "n/a" if ckpt.best_val is None else f"{ckpt.best_val:.5f} at step {ckpt.best_step}"
    print(f"{out}: {ckpt.step} steps, best validation loss {best}")
    return 0


def cmd_enhance(args) -> int:
    cfg = load_config(args)
    ckpt = load_checkpoint(args.ckpt)
    noisy = read_wav(args.noisy)
    if noisy.sample_rate != cfg.stft.sample_rate:
        raise UsageError(f"{args.noisy}: sample rate {noisy.sample_rate} != {cfg.stft.sample_rate}")
    video = None
    if ckpt.config.uses_video:
        if not args.video:
            raise UsageError(f"variant {ckpt.config.variant!r} needs --video")
        video = read_video(args.video)
    out = prepare_out_file(args.out, args.overwrite)
    y = harness.enhance(ckpt, noisy, video, cfg.stft)
    write_wav(out, Waveform(y.samples, noisy.sample_rate))
    print(out)
    return 0


def _snrs(args, cfg: RunConfig):
    return tuple(args.snrs) if args.snrs else cfg.eval_snrs


def cmd_eval(args) -> int:
    cfg = load_config(args)
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    need_video = any(c.config.uses_video for c in ckpts)
    corpus = open_corpus(args.corpus, need_video)
    out = prepare_out_dir(args.out, args.overwrite)
    snrs = _snrs(args, cfg)
    records = [] if args.no_noisy else harness.evaluate_noisy(corpus, args.split, snrs, args.jobs)
    for ck in ckpts:
        records += harness.evaluate(ck, corpus, args.split, snrs, args.corruption,
                                    stft_cfg=cfg.stft, jobs=args.jobs)
    rows = aggregate(records)
    write_reports(rows, out, records)
    echo_config(cfg, out, {"command": "eval", "checkpoints": args.ckpt, "split": args.split,
                           "corruption": args.corruption})
    print(report_text(rows))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        name, _, visual = v.partition("/")
        if name not in VARIANTS or (visual and visual not in VISUAL_INPUTS):
            raise UsageError(f"unknown variant {v!r}; expected one of {VARIANTS} "
                             f"optionally followed by /{'|'.join(VISUAL_INPUTS)}")
    if not variants:
        raise UsageError("--variants is empty")
    corpus = open_corpus(args.corpus, any(not v.startswith("aose") for v in variants))
    out = prepare_out_dir(args.out, args.overwrite)
    res = harness.run_ablation(corpus, cfg.train, variants, cfg.model, _snrs(args, cfg),
                               cfg.stft, include_noisy=not args.no_noisy, jobs=args.jobs,
                               out_dir=out)
    write_reports(res.rows, out, res.records)
    echo_config(cfg, out, {"command": "ablate", "variants": variants})
    print(report_text(res.rows))
    return 0


def cmd_robustness(args) -> int:
    cfg = load_config(args)
    face, lip = load_checkpoint(args.face_ckpt), load_checkpoint(args.lip_ckpt)
    if face.config.visual_input != "face":
        raise UsageError(f"{args.face_ckpt} is not a face-input model")
    if lip.config.visual_input != "lip_crop":
        raise UsageError(f"{args.lip_ckpt} is not a lip-crop model")
    corpus = open_corpus(args.corpus, True)
    out = prepare_out_dir(args.out, args.overwrite)
    res = harness.run_robustness(face, lip, corpus, _snrs(args, cfg), cfg.stft, args.jobs)
    write_reports(res.rows, out, res.records)
    (out / "degradation.json").write_text(json.dumps(res.degradation, indent=2, sort_keys=True)
                                          + "\n", encoding="utf-8")
    echo_config(cfg, out, {"command": "robustness", "face": args.face_ckpt, "lip": args.lip_ckpt})
    print(report_text(res.rows))
    for k, v in sorted(res.degradation.items()):
        print(f"{k:>24s}  {v:6.2f} % drop")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, default=None, help="overrides DAVSE_SEED and the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")

    ap = argparse.ArgumentParser(prog="davse", description="Dual-attention audio-visual speech enhancement")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one model with the three-stage schedule")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    p.add_argument("--out", required=True, help="checkpoint path (log and config written alongside)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--visual-input", choices=VISUAL_INPUTS)
    p.add_argument("--steps", type=int, nargs=3, metavar=("S1", "S2", "S3"),
                   help="override the stage step counts")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="stop at this global step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", parents=[common], help="enhance one noisy WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--noisy", required=True, help="16 kHz mono PCM16 WAV")
    p.add_argument("--video", help="face video file (required by audio-visual variants)")
    p.add_argument("--out", required=True, help="output WAV")
    p.set_defaults(func=cmd_enhance)

    def eval_flags(p):
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True, help="report directory")
        p.add_argument("--snrs", type=float, nargs="+", help="SNR conditions (default from config)")
        p.add_argument("--no-noisy", action="store_true", help="omit the unprocessed-noisy row")

    p = sub.add_parser("eval", parents=[common], help="score checkpoints on a corpus split")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--corruption", default="none", choices=CORRUPTION_MODES)
    eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and score several variants")
    p.add_argument("--variants", required=True,
                   help="comma list, e.g. aose,dual_full,dual_full/lip_crop")
    eval_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", parents=[common], help="face vs lip models under visual corruption")
    p.add_argument("--face-ckpt", required=True)
    p.add_argument("--lip-ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snrs", type=float, nargs="+")
    p.set_defaults(func=cmd_robustness)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    harness.set_determinism()
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
