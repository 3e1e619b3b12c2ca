"""
fabgpt command line.

Exit codes: 0 success, 1 user/config/data error, 2 numeric failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

from fabgpt.core.config import settings
from fabgpt.core.errors import ConfigurationError, FabError, NumericError
from fabgpt.schemas.config import RunConfig, describe_validation_error, load_run_config
from fabgpt.schemas.run import RunStatus
from fabgpt.services import run_service

log = logging.getLogger("fabgpt")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; 2 is reserved for numeric failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


# ===== commands =====
def cmd_gen(args) -> int:
    from fabgpt.services.synth_service import generate_dataset

    cfg = load_run_config(args.config, seed=args.seed)
    run_id = run_service.start_run("gen", cfg.seed, cfg.echo(), args.out)
    try:
        run_service.set_status(run_id, RunStatus.running, message=f"generating into {args.out}")
        manifest = generate_dataset(cfg.generation, args.out, cfg.seed)
        n = sum(len(v) for v in manifest.splits.values())
        run_service.set_status(run_id, RunStatus.success, progress=1.0, message=f"{n} samples")
    except FabError as e:
        run_service.set_status(run_id, RunStatus.failed, message=e.detail)
        raise
    finally:
        run_service.finish_run(run_id)
    print(os.path.join(args.out, "manifest.json"))
    return 0


def cmd_train(args) -> int:
    from fabgpt.services.train_service import run_training

    cfg = load_run_config(args.config, seed=args.seed)
    if cfg.train.epochs == 0:
        raise ConfigurationError("train.epochs is 0; nothing to train")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    run_id = run_service.start_run("train", cfg.seed, cfg.echo(), out_dir,
                                   log_file=os.path.join(out_dir, "train_log.jsonl"))
    try:
        run_service.set_status(run_id, RunStatus.running, progress=0.0)
        result = run_training(cfg, args.data, args.out, run_id=run_id)
        run_service.set_status(run_id, RunStatus.success, progress=1.0,
                               message=f"checkpoint {result.checkpoint_id} after {result.total_steps} steps")
    except Exception as e:
        run_service.set_status(run_id, RunStatus.failed, message=getattr(e, "detail", str(e)))
        raise
    finally:
        run_service.finish_run(run_id)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    from fabgpt.repositories.dataset_repo import load_manifest, load_split
    from fabgpt.services import eval_service
    from fabgpt.services.train_service import load_pipeline

    pipeline, state = load_pipeline(args.ckpt)
    samples = load_split(load_manifest(args.data), "test")
    if not samples:
        raise ConfigurationError(f"dataset {args.data} has no test split")
    report, transcript = eval_service.evaluate(pipeline, samples, oracle=args.oracle,
                                               with_qa=not args.no_qa, checkpoint_id=state.checkpoint_id)
    eval_service.write_report(report, args.report, args.csv)
    if transcript:
        run_service.atomic_write_json(os.path.splitext(args.report)[0] + "_qa.json", transcript)
    if args.heatmaps:
        out_dir = os.path.join(os.path.dirname(os.path.abspath(args.report)), "heatmaps")
        eval_service.write_heatmaps(pipeline, samples, args.heatmaps, out_dir)
    print(eval_service.report_table(report).to_string(index=False))
    return 0


def cmd_detect(args) -> int:
    from fabgpt.repositories.dataset_repo import find_meta_for_image, read_png
    from fabgpt.services import detect_service
    from fabgpt.services.train_service import load_pipeline

    pipeline, state = load_pipeline(args.ckpt)
    image = read_png(args.image)
    meta = find_meta_for_image(args.image)
    result = detect_service.detect_image(pipeline, image, meta.text_marks if meta else "")
    detect_service.write_detection(args.out_prefix, result, meta={
        "checkpoint_id": state.checkpoint_id, "seed": pipeline.cfg.seed, "config": pipeline.cfg.echo(),
    })
    print(f"{result.label} P_n={result.p_n:.4f}")
    return 0


def cmd_chat(args) -> int:
    from fabgpt.services.chat_service import ChatSession
    from fabgpt.services.train_service import load_pipeline

    pipeline, _ = load_pipeline(args.ckpt)
    run_id = run_service.start_run("chat", pipeline.cfg.seed, pipeline.cfg.echo())
    try:
        session = ChatSession(pipeline, run_id=run_id)
        if args.image:
            session.load_image(args.image)
        if args.question is not None:
            session.handle(args.question)
            return 0
        return session.repl(interactive=sys.stdin.isatty())
    finally:
        run_service.finish_run(run_id)


def cmd_ablate(args) -> int:
    from fabgpt.services.ablation_service import run_suite

    cfg = load_run_config(args.config, seed=args.seed)
    run_id = run_service.start_run("ablate", cfg.seed, cfg.echo(), args.out)
    try:
        table = run_suite(cfg, args.data, args.out, args.suite, run_id=run_id)
        run_service.set_status(run_id, RunStatus.success, progress=1.0)
    except Exception as e:
        run_service.set_status(run_id, RunStatus.failed, message=getattr(e, "detail", str(e)))
        raise
    finally:
        run_service.finish_run(run_id)
    print(table.to_string(index=False))
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True))
    return 0


def cmd_corpora(args) -> int:
    from fabgpt.services.corpus_service import default_corpora, export_corpora

    _, corpus_a, corpus_b = default_corpora()
    for path in export_corpora(args.out, corpus_a, corpus_b):
        print(path)
    return 0


# ===== parser =====
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fabgpt", description="Synthetic wafer-defect detection and knowledge Q&A")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a checkpoint")
    t.add_argument("--data", default=settings.DATA_ROOT)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", default=settings.DATA_ROOT)
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.add_argument("--oracle", action="store_true", help="score ground-truth masks as anomaly maps")
    e.add_argument("--heatmaps", type=int, default=0, metavar="N")
    e.add_argument("--no-qa", action="store_true")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("detect", help="detect defects in one image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out-prefix", required=True)
    d.set_defaults(fn=cmd_detect)

    c = sub.add_parser("chat", help="ask questions about a wafer image")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--image")
    c.add_argument("--question")
    c.set_defaults(fn=cmd_chat)

    a = sub.add_parser("ablate", help="train and evaluate an ablation suite")
    a.add_argument("--data", default=settings.DATA_ROOT)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--suite", choices=["components", "pm", "instruction"], default="components")
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("schema", help="print the run-config JSON schema")
    s.set_defaults(fn=cmd_schema)

    k = sub.add_parser("corpora", help="write the built Q&A corpora")
    k.add_argument("--out", required=True)
    k.set_defaults(fn=cmd_corpora)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, settings.reload().LOG_LEVEL, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"fabgpt: numeric failure: {e.detail}", file=sys.stderr)
        return e.exit_code
    except FabError as e:
        print(f"fabgpt: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"fabgpt: {describe_validation_error(e)}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"fabgpt: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
