"""Variant x seed ablation with matched budgets; writes a table, verdicts and a win/loss summary.

    python3 scripts/run_ablation.py --config configs/ablation.ini --out runs/ablation
"""

import argparse
import json
import time
from pathlib import Path

from dualpath_vlm import pipeline
from dualpath_vlm.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/ablation.ini")
    ap.add_argument("--variants", default=None)
    ap.add_argument("--seeds", default=None)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    variants = (args.variants or cfg.eval.variants).split(",")
    seeds = [int(s) for s in (args.seeds or cfg.eval.seeds).split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    fixture = pipeline.load_or_build_fixture(
        cfg, on_step=lambda s, l: print(f"fixture step {s} loss {l:.4f}", flush=True) if s % 250 == 0 else None)
    result = pipeline.run_ablation(
        cfg, variants, seeds, fixture,
        on_epoch=lambda v, s, st, e, l: print(f"{v}@{s} stage {st} epoch {e} loss {l:.4f}", flush=True))
    result.report.write(out / "ablation.json", out / "verdicts.jsonl")
    (out / "summary.txt").write_text(result.render() + "\n")
    print(result.render())
    print(json.dumps({"seconds": round(time.time() - t0, 1)}))


if __name__ == "__main__":
    main()
