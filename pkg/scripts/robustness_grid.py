"""Visual-robustness grid: face vs lip-crop dual_full models under corruption.

Trains whichever of the two checkpoints is missing (desk config), then scores
the face model under none/mask_whole/mask_region/random_mask and the lip model
under none/mask_whole/random_mask.

    python3 scripts/robustness_grid.py --corpus runs/corpus --face runs/ablation/dual_full_face.ckpt
"""

import argparse
import json
import logging
import time
from pathlib import Path

from dualavse import harness
from dualavse.checkpoint import Checkpoint
from dualavse.config import CorpusConfig, RunConfig
from dualavse.datagen import Corpus, build_corpus
from dualavse.metrics import report_csv, report_text

ROOT = Path(__file__).resolve().parents[1]


def checkpoint(path, cfg: RunConfig, visual: str, corpus, out: Path) -> Checkpoint:
    if path and Path(path).exists():
        return Checkpoint.load(path)
    model = cfg.model.replace(variant="dual_full", visual_input=visual)
    target = Path(path) if path else out / f"dual_full_{visual}.ckpt"
    ck = harness.train(model, corpus, cfg.train, cfg.stft, log_path=target.with_suffix(".log"))
    ck.save(target)
    return ck


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", default="runs/corpus")
    ap.add_argument("--out", default="runs/robustness")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    ap.add_argument("--face", help="face-input dual_full checkpoint (trained if absent)")
    ap.add_argument("--lip", help="lip-crop dual_full checkpoint (trained if absent)")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    harness.set_determinism()

    cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    manifest = Path(args.corpus) / "manifest.json"
    if not manifest.exists():
        build_corpus(CorpusConfig(seed=cfg.seed), args.corpus)
    corpus = Corpus(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    face = checkpoint(args.face, cfg, "face", corpus, out)
    lip = checkpoint(args.lip, cfg, "lip_crop", corpus, out)
    t0 = time.time()
    res = harness.run_robustness(face, lip, corpus, cfg.eval_snrs, cfg.stft, args.jobs)
    (out / "report.csv").write_text(report_csv(res.rows))
    (out / "report.txt").write_text(report_text(res.rows))
    (out / "degradation.json").write_text(json.dumps(res.degradation, indent=2, sort_keys=True))
    print(report_text(res.rows))
    for (variant, mode), label in sorted(harness.CONDITION_LABELS.items(), key=lambda kv: kv[1]):
        key = f"{variant}:{mode}"
        print(f"{label:>4s} {key:>20s}  {res.degradation[key]:6.2f} % drop")
    print(f"evaluation {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
