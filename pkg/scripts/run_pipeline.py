"""One end-to-end trial: LM fixture, stage 1 on captions, stage 2 on QA, evaluation.

    python3 scripts/run_pipeline.py --variant dual_path --seed 1 --out runs/dual1
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from dualpath_vlm import pipeline
from dualpath_vlm.config import load_config
from dualpath_vlm.evaluation import evaluate


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--variant", default="dual_path", choices=("dual_path", "qformer_only", "mlp_only"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--profile", default="toy", choices=("paper", "toy"))
    ap.add_argument("--out", default="runs/pipeline")
    args = ap.parse_args()

    cfg = load_config(args.config)
    cfg = replace(cfg, training=replace(cfg.training, profile=args.profile))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    fixture = pipeline.load_or_build_fixture(
        cfg, on_step=lambda s, l: print(f"fixture step {s} loss {l:.4f}", flush=True) if s % 250 == 0 else None)
    data = pipeline.build_data(cfg)
    print(f"data: {len(data.captions)} captions, {len(data.qa_train)} qa, {len(data.test)} test", flush=True)
    model = pipeline.model_from_fixture(fixture, cfg, args.variant, args.seed)
    trial = pipeline.run_two_stage(model, data, cfg, args.seed,
                                   on_epoch=lambda st, e, l: print(f"stage {st} epoch {e} loss {l:.4f}", flush=True))
    trial.stage1.to_csv(out / "stage1_loss.csv")
    trial.stage2.to_csv(out / "stage2_loss.csv")
    trial.checkpoint.save(out / "final.vglm")
    report = evaluate(trial.model, data.test, column=args.variant)
    report.metadata.update({"seed": args.seed, "checkpoint": trial.checkpoint.checksum, "data": data.hashes()})
    report.write(out / "report.json", out / "verdicts.jsonl")
    print(report.render_table())
    s1 = trial.stage1.epoch_means
    summary = {"stage1_epoch_means": s1, "stage1_reduction": 1 - s1[-1] / s1[0],
               "stage2_epoch_means": trial.stage2.epoch_means, "seconds": round(time.time() - t0, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
