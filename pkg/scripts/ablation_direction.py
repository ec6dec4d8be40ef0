"""Scaled ablation: aose vs dual_full (face) on the default corpus.

Prints per-SNR SI-SDR for the noisy mixtures and both models, plus the two
gaps the direction check looks at (dual_full - aose, model - noisy).

    python3 scripts/ablation_direction.py --corpus runs/corpus --out runs/ablation
"""

import argparse
import json
import logging
import time
from pathlib import Path

from dualavse import harness
from dualavse.config import CorpusConfig, RunConfig
from dualavse.datagen import Corpus, build_corpus
from dualavse.metrics import report_csv, report_text

GAP_SNRS = (-10.0, -5.0, 0.0)
ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", default="runs/corpus")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    ap.add_argument("--base", type=int, default=None, help="base_channels override")
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--steps", type=int, nargs=3, default=None, metavar=("S1", "S2", "S3"))
    ap.add_argument("--variants", default="aose,dual_full")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    harness.set_determinism()

    cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    seed = cfg.seed if args.seed is None else args.seed
    manifest = Path(args.corpus) / "manifest.json"
    if not manifest.exists():
        build_corpus(CorpusConfig(seed=seed), args.corpus)
    corpus = Corpus(manifest)

    model = cfg.model
    sched = cfg.train.replace(seed=seed)
    if args.base:
        model = model.replace(base_channels=args.base)
    if args.batch:
        sched = sched.replace(batch_size=args.batch)
    if args.steps:
        sched = sched.replace(stage_steps=tuple(args.steps))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    res = harness.run_ablation(corpus, sched, args.variants.split(","), model,
                               include_noisy=True, out_dir=out)
    elapsed = time.time() - t0
    (out / "report.csv").write_text(report_csv(res.rows))
    (out / "report.txt").write_text(report_text(res.rows))
    print(report_text(res.rows))

    by_variant = {}
    for r in res.records:
        by_variant.setdefault(r.variant_id, []).append(r)
    means = {v: harness.mean_si_sdr(recs, GAP_SNRS) for v, recs in by_variant.items()}
    summary = {"elapsed_s": elapsed, "mean_si_sdr_-10_0": means,
               "model": model.__dict__, "stage_steps": sched.stage_steps,
               "batch_size": sched.batch_size}
    for v, m in means.items():
        print(f"{v:>16s}  mean SI-SDR over {GAP_SNRS}: {m:7.3f} dB")
    if "dual_full/face" in means and "aose" in means:
        print(f"dual_full - aose: {means['dual_full/face'] - means['aose']:+.3f} dB")
    print(f"elapsed {elapsed / 60:.1f} min")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))


if __name__ == "__main__":
    main()
