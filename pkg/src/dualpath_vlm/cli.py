"""``dualpath-vlm`` command line.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error, 3 IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .checkpoint import Checkpoint
from .config import RunConfig, load_config, render_reference
from .data import (TASKS, augment_answer, dataset_hash, dedupe_and_rephrase, generate_dataset,
                   parse_task_mix, read_jsonl, split_dataset, write_jsonl)
from .errors import (CheckpointError, ConfigError, SplitError, TransportError, VLMError)
from .evaluation import EchoOracle, AccuracyReport, evaluate, exact_judge, external_judge
from .model import VisionLanguageModel
from .training import LossCurve, apply_freeze, configure_stage, pretrain_lm, train_stage

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
log = logging.getLogger("dualpath_vlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def banner(command: str, cfg: RunConfig, seed, inputs: dict[str, str]) -> None:
    ins = " ".join(f"{k}={v}" for k, v in inputs.items()) or "none"
    print(f"dualpath-vlm {command} | config={cfg.digest()} seed={seed} inputs: {ins}", flush=True)


def write_svg(curve: LossCurve, path: str | Path, title: str) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r[0] for r in curve.records], [r[2] for r in curve.records], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- commands -----------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    mix = parse_task_mix(args.task_mix or cfg.data.task_mix)
    gen = pipeline.generator_config(cfg)
    banner("gen-data", cfg, args.seed, {"task_mix": ",".join(f"{k}={v}" for k, v in sorted(mix.items()))})
    examples = dedupe_and_rephrase(generate_dataset(args.size, mix, args.seed, gen))
    if args.expand_answers:
        examples = [augment_answer(ex) for ex in examples]
    ratios = tuple(float(r) for r in args.ratios.split(","))
    splits = split_dataset(examples, ratios, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "size": args.size, "task_mix": mix, "config": cfg.digest(), "files": {}}
    for name, part in zip(("train", "val", "test"), splits):
        path = out / f"{name}.jsonl"
        write_jsonl(path, part, inline_images=args.inline_images)
        manifest["files"][path.name] = {"examples": len(part), "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
                                        "dataset_hash": dataset_hash(part),
                                        "tasks": {t: sum(ex.task_tag == t for ex in part) for t in TASKS}}
        print(f"{path}: {len(part)} examples")
    manifest["examples"] = sum(f["examples"] for f in manifest["files"].values())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _load_examples(path: str) -> list:
    if not Path(path).exists():
        raise FileNotFoundError(f"data file not found: {path}")
    return read_jsonl(path)


def cmd_pretrain_lm(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, training=replace(cfg.training, pretrain_steps=args.steps))
    inputs = {"data": file_hash(args.data)} if args.data else {"corpus_seed": str(cfg.data.lm_corpus_seed)}
    banner("pretrain-lm", cfg, cfg.lm.seed, inputs)
    corpus = _load_examples(args.data) if args.data else pipeline.lm_corpus(cfg)
    model = VisionLanguageModel(cfg.model_config())
    every = max(1, cfg.training.pretrain_steps // 20)
    curve = pretrain_lm(model, corpus, cfg.pretrain_config(),
                        on_step=lambda s, l: print(f"step {s} loss {l:.4f}", flush=True) if s % every == 0 else None)
    digest = Checkpoint.from_model(model).save(args.out)
    if args.loss_csv:
        curve.to_csv(args.loss_csv)
    print(f"wrote {args.out} sha256={digest}")
    return EXIT_OK


def _model_for_training(args, cfg: RunConfig) -> VisionLanguageModel:
    if args.from_ckpt is None:
        if args.stage == 2 and not args.from_scratch:
            raise ConfigError("stage 2 needs --from <stage-1 checkpoint> (or --from-scratch)")
        return VisionLanguageModel(cfg.model_config(args.variant))
    ckpt = Checkpoint.load(args.from_ckpt)
    if args.variant and args.variant != ckpt.metadata.get("variant"):
        # keep encoder and LM, start a fresh abstractor of the requested variant
        return pipeline.model_from_fixture(ckpt, cfg, args.variant, cfg.abstractor.seed)
    return ckpt.to_model()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    profile = args.profile or cfg.training.profile
    over = cfg.stage_overrides(args.stage)
    if args.seed is not None:
        over["seed"] = args.seed
    over["allow_from_scratch"] = args.from_scratch
    sc = configure_stage(args.stage, profile, **over)
    inputs = {"data": file_hash(args.data)}
    if args.from_ckpt:
        inputs["from"] = file_hash(args.from_ckpt)
    banner("train", cfg, sc.seed, inputs)
    print(sc.banner(), flush=True)
    examples = _load_examples(args.data)
    model = _model_for_training(args, cfg)
    apply_freeze(model, sc.freeze_set)
    ckpt, curve = train_stage(model, examples, sc,
                              on_epoch=lambda e, l: print(f"epoch {e} mean loss {l:.4f}", flush=True))
    digest = ckpt.save(args.out)
    if args.loss_csv:
        curve.to_csv(args.loss_csv)
    if args.plot:
        write_svg(curve, args.plot, f"stage {args.stage} loss")
    print(f"wrote {args.out} sha256={digest}")
    return EXIT_OK


def _judge(args, cfg: RunConfig):
    kind = args.judge or cfg.eval.judge
    if kind == "exact":
        return exact_judge
    from .clients import TextClient

    client = TextClient.from_env("JUDGE", args.cache_dir, allow_network=args.allow_network)
    return external_judge(client)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    judge = _judge(args, cfg)
    banner("eval", cfg, "-", {"ckpt": file_hash(args.ckpt), "data": file_hash(args.data)})
    ckpt = Checkpoint.load(args.ckpt)
    model = EchoOracle() if ckpt.metadata.get("model_kind") == "echo_oracle" else ckpt.to_model()
    examples = _load_examples(args.data)
    report = AccuracyReport(columns=[], metadata={
        "judge_kind": getattr(judge, "kind", "exact"), "checkpoint": ckpt.checksum,
        "data": dataset_hash(examples)})
    from .evaluation import JUDGE_TEMPLATE_HASH

    report.metadata["judge_template_hash"] = JUDGE_TEMPLATE_HASH
    evaluate(model, examples, judge, column=args.column, report=report)
    print(report.render_table())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "verdicts.jsonl")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.profile:
        cfg = replace(cfg, training=replace(cfg.training, profile=args.profile))
    variants = [v.strip() for v in (args.variants or cfg.eval.variants).split(",") if v.strip()]
    seeds = _int_list(args.seeds or cfg.eval.seeds)
    if "dual_path" not in variants or len(set(variants)) < 2:
        raise ConfigError("--variants must include dual_path and at least one comparator")
    judge = _judge(args, cfg)
    fixture = Checkpoint.load(args.fixture) if args.fixture else pipeline.load_or_build_fixture(
        cfg, args.cache_dir or pipeline.DEFAULT_CACHE,
        on_step=lambda s, l: print(f"fixture step {s} loss {l:.4f}", flush=True) if s % 250 == 0 else None)
    data = pipeline.build_data(cfg)
    banner("ablate", cfg, ",".join(map(str, seeds)), {**data.hashes(), "fixture": fixture.checksum[:16]})
    result = pipeline.run_ablation(
        cfg, variants, seeds, fixture, data, judge,
        on_epoch=lambda v, s, st, e, l: print(f"{v}@{s} stage {st} epoch {e} loss {l:.4f}", flush=True))
    print(result.render())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.write(out / "ablation.json", out / "verdicts.jsonl")
    (out / "summary.txt").write_text(result.render() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    meta = ckpt.metadata
    print(f"checkpoint {args.ckpt}")
    print(f"checksum sha256={ckpt.checksum} (valid)")
    print(f"model_kind={meta.get('model_kind')} variant={meta.get('variant')} created={meta.get('created')}")
    if meta.get("fusion_order"):
        print(f"fusion_order={','.join(meta['fusion_order'])}")
    for name, arr in ckpt.tensors.items():
        flag = "frozen" if ckpt.frozen.get(name) else "trainable"
        print(f"  {name:60s} {str(list(arr.shape)):16s} {flag}")
    print(f"tensors={len(ckpt.tensors)} parameters={ckpt.parameter_count()}")
    for rec in meta.get("provenance", []):
        extra = {k: rec[k] for k in ("steps", "dataset_hash", "examples") if k in rec}
        print(f"provenance stage={rec.get('stage')} {json.dumps(extra, sort_keys=True)}")
    return EXIT_OK


def cmd_dump_config(args) -> int:
    text = render_reference(load_config(args.config))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualpath-vlm", description="Desk-scale dual-path vision-language model.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write JSONL splits and a manifest")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--task-mix", default=None, help='e.g. "count=0.5,glyph_read=0.5"')
    g.add_argument("--ratios", default="0.8,0.1,0.1")
    g.add_argument("--expand-answers", action="store_true")
    g.add_argument("--inline-images", action="store_true")
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    pl = sub.add_parser("pretrain-lm", help="pre-train the language-model fixture")
    pl.add_argument("--config", default=None)
    pl.add_argument("--data", default=None, help="JSONL corpus (default: generated from config)")
    pl.add_argument("--steps", type=int, default=None)
    pl.add_argument("--out", required=True)
    pl.add_argument("--loss-csv", default=None)
    pl.set_defaults(fn=cmd_pretrain_lm)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--from", dest="from_ckpt", default=None)
    t.add_argument("--from-scratch", action="store_true")
    t.add_argument("--profile", choices=("paper", "toy"), default=None)
    t.add_argument("--variant", choices=("dual_path", "qformer_only", "mlp_only"), default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--plot", default=None, help="optional SVG loss plot")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--judge", choices=("exact", "external"), default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--column", default="model")
    e.add_argument("--out-dir", default="eval_out")
    e.add_argument("--cache-dir", default=".cache/judge")
    e.add_argument("--allow-network", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare abstractor variants over seeds")
    a.add_argument("--variants", default=None)
    a.add_argument("--seeds", default=None)
    a.add_argument("--config", default=None)
    a.add_argument("--profile", choices=("paper", "toy"), default=None)
    a.add_argument("--fixture", default=None, help="LM fixture checkpoint (default: cached build)")
    a.add_argument("--judge", choices=("exact", "external"), default=None)
    a.add_argument("--out-dir", default="ablation_out")
    a.add_argument("--cache-dir", default=None)
    a.add_argument("--allow-network", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("inspect", help="summarize and validate a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)

    d = sub.add_parser("dump-config", help="print the reference configuration")
    d.add_argument("--config", default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(fn=cmd_dump_config)
    return p


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads):
            return args.fn(args)
    except (ConfigError, SplitError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TransportError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (VLMError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
