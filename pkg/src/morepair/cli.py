"""Operator entry point: prepare, train, generate, eval.

Every command honors --config / --set / --seed, echoes the effective
configuration into its output directory, and is bit-reproducible given
identical inputs. Exit codes: 0 success, 1 validation failure, 2 environment
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .dataprep import (HttpTeacherClient, MockTeacherClient, acquire_guidance_batch,
                       build_prompt_tokens, load_dataset, save_dataset)
from .errors import EnvironmentFailure, ValidationError
from .evalharness import evaluate, load_benchmark
from .infer import generate, load_candidate_dump, write_candidate_dump
from .model import init_weights, quantize_base
from .report import (format_top_k_table, render_loss_curve, render_top_k_chart,
                     write_eval_report)
from .train import Trainer, load_checkpoint, load_weights, save_checkpoint

log = logging.getLogger("morepair")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; flag misuse is a validation problem here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morepair", description=__doc__)
    parser.add_argument("--config", help="config file of dotted.key = value lines")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable, wins over file)")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="fill missing guidance via the teacher")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fine-tune on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", help="sample candidate patches for a benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="score candidates against a benchmark")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--dump", help="candidate dump directory")
    p.add_argument("--checkpoint", help="generate candidates from this checkpoint")
    p.add_argument("--out-dir", required=True)
    return parser


def _effective_config(args) -> dict:
    cfg = {}
    if args.config:
        cfg.update(cfgmod.load_config_file(args.config))
    cfg = cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfgmod.validate_config(cfg)


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfgmod.canonical_dump(cfg), encoding="utf-8")


def _teacher_client(cfg: dict):
    kind = cfg["teacher.kind"]
    if kind == "mock":
        return MockTeacherClient()
    if kind == "http":
        if not cfg["teacher.url"]:
            raise ValidationError("teacher.kind = http requires teacher.url")
        return HttpTeacherClient(cfg["teacher.url"], cfg["teacher.model_name"],
                                 float(cfg["teacher.temperature"]))
    raise ValidationError(f"unknown teacher.kind {kind!r}")


def cmd_prepare(args, cfg: dict) -> int:
    examples = load_dataset(args.dataset)
    missing = sum(1 for ex in examples if ex.guidance is None)
    client = _teacher_client(cfg)
    guided, failures = acquire_guidance_batch(examples, client,
                                              retries=int(cfg["teacher.retries"]))
    save_dataset(guided, args.out)
    print(f"examples: {len(examples)}  already guided: {len(examples) - missing}  "
          f"newly guided: {missing - len(failures)}  failures: {len(failures)}")
    for ex_id, reason in failures:
        print(f"  failed: {ex_id}: {reason}")
    if failures and bool(cfg["teacher.strict"]):
        raise EnvironmentFailure(f"{len(failures)} examples could not be guided")
    return 0


def cmd_train(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    examples = load_dataset(args.dataset)
    model_config = cfgmod.build_model_config(cfg)
    train_config = cfgmod.build_train_config(cfg)
    digest = cfgmod.config_digest(cfg)
    seed = int(cfg["seed"])
    quantized = None
    if bool(cfg["model.quantize_base"]):
        quantized = (int(cfg["model.block_size_1"]), int(cfg["model.block_size_2"]))

    if args.resume:
        trainer = load_checkpoint(args.resume, examples, train_config,
                                  expected_model_config=model_config)
    else:
        weights = init_weights(model_config, seed)
        if quantized:
            quantize_base(weights, *quantized)
        trainer = Trainer(examples, weights, train_config)

    log_path = out_dir / "loss_log.jsonl"
    checkpoint_path = out_dir / "checkpoint.mor"
    every = int(cfg["train.checkpoint_every"])

    with open(log_path, "w", encoding="utf-8") as fh:
        def on_step(step: int, b) -> None:
            record = {"step": step, "loss1": b.loss1, "combined": b.combined}
            if train_config.mode == "morepair":
                record["loss2"] = b.loss2
            fh.write(json.dumps(record) + "\n")
            if every and step % every == 0:
                save_checkpoint(checkpoint_path, trainer, seed, quantized, digest)
            if step % 50 == 0 or step == train_config.steps:
                log.info("step %d combined %.4f", step, b.combined)

        trainer.run(train_config.steps, on_step=on_step)

    save_checkpoint(checkpoint_path, trainer, seed, quantized, digest)
    if trainer.step > 0:
        render_loss_curve(log_path, out_dir / "loss_curve.png")
    print(f"trained {trainer.step} steps; checkpoint at {checkpoint_path}")
    return 0


def _generate_candidates(checkpoint, benchmark_dir, cfg: dict, out_dir: Path) -> None:
    weights, _, _ = load_weights(checkpoint,
                                 expected_model_config=cfgmod.build_model_config(cfg))
    sampling = cfgmod.build_sampling_config(cfg)
    problems = load_benchmark(benchmark_dir, strict=bool(cfg["eval.strict"]))
    include_description = bool(cfg["data.include_description"])
    for problem in problems:
        prompt = build_prompt_tokens(problem.task_description, problem.buggy_source,
                                     problem.language_tag, include_description)
        results = generate(weights, prompt, sampling)
        write_candidate_dump(out_dir, problem.id, results)
        log.info("generated %d candidates for %s", len(results), problem.id)


def cmd_generate(args, cfg: dict) -> int:
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    _generate_candidates(args.checkpoint, args.benchmark, cfg, out_dir)
    print(f"candidate dump written to {out_dir}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    if bool(args.dump) == bool(args.checkpoint):
        raise ValidationError("eval needs exactly one of --dump or --checkpoint")
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    problems = load_benchmark(args.benchmark, strict=bool(cfg["eval.strict"]))

    dump_dir = Path(args.dump) if args.dump else out_dir / "candidates"
    if args.checkpoint:
        _generate_candidates(args.checkpoint, args.benchmark, cfg, dump_dir)
    candidates = {p.id: load_candidate_dump(dump_dir, p.id) for p in problems}

    report = evaluate(
        problems, candidates,
        ks=[int(k) for k in cfg["eval.ks"]],
        profiles=cfgmod.build_profiles(cfg),
        workers=int(cfg["eval.workers"]),
        benchmark_name=json.loads((Path(args.benchmark) / "manifest.json")
                                  .read_text(encoding="utf-8"))["name"],
        config_snapshot=cfgmod.config_digest(cfg),
        keep_scratch=bool(cfg["eval.keep_scratch"]),
    )
    report_path = write_eval_report(report, out_dir / "report.jsonl")
    render_top_k_chart(report, out_dir / "topk.png")
    print(format_top_k_table(report))
    print(f"report written to {report_path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s")
        cfg = _effective_config(args)
        handler = {
            "prepare": cmd_prepare,
            "train": cmd_train,
            "generate": cmd_generate,
            "eval": cmd_eval,
        }[args.command]
        return handler(args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EnvironmentFailure as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
