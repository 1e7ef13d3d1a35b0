"""Command-line entry point: ``nola <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import load_manifest, save_descriptions
from .errors import NolaError, StageError
from .llm import TEMPLATE_SETS, HTTPLLMClient, generate_descriptions, templates_for
from .pipeline import (EMBEDDING_SOURCES, VARIANTS, ExperimentConfig, evaluate_run, export_embeddings, run_ablation,
                       run_pipeline)
from .synthetic import SyntheticSpec, make_benchmark

log = logging.getLogger("nola")


def _add_seed_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed-data", type=int, help="override seeds.data")
    p.add_argument("--seed-align", type=int, help="override seeds.align")
    p.add_argument("--seed-tune", type=int, help="override seeds.tune")
    p.add_argument("--output-dir", type=Path, help="override output_dir")


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(args.config)
    config = config.with_seeds(args.seed_data, args.seed_align, args.seed_tune)
    if args.output_dir is not None:
        config = replace(config, output_dir=args.output_dir)
    return config


def _print_report(report, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report.to_json(), indent=2, default=str))
    else:
        print(report.table())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nola", description="Label-free prompt tuning of a vision-language model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full three-stage pipeline")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--resume", action="store_true", help="skip stages whose checkpoints exist")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    _add_seed_flags(p)

    p = sub.add_parser("eval", help="re-evaluate a finished run from its checkpoints")
    p.add_argument("--checkpoint", type=Path, required=True, help="output directory of a run")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("export-embeddings", help="dump normalized test-split image embeddings")
    p.add_argument("--which", choices=sorted(EMBEDDING_SOURCES), required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_seed_flags(p)

    p = sub.add_parser("gen-descriptions", help="query an LLM for class descriptions")
    p.add_argument("--dataset", required=True, help="dataset name; selects the prompt template set")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--templates", choices=sorted(TEMPLATE_SETS), help="template set (default: by dataset)")
    p.add_argument("--endpoint", help="chat-completions URL (default: $NOLA_LLM_ENDPOINT)")
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--n-per-prompt", type=int, default=1)
    p.add_argument("--max-retries", type=int, default=2)

    p = sub.add_parser("ablate", help="run one design-choice variant, reusing upstream checkpoints")
    p.add_argument("--variant", choices=sorted(VARIANTS), required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--json", action="store_true")
    _add_seed_flags(p)

    p = sub.add_parser("synth", help="write the seeded synthetic benchmark")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=SyntheticSpec.n_classes)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "run":
            config = _load_config(args)
            report = run_pipeline(config, resume=args.resume)
            _print_report(report, args.json)
        elif args.command == "eval":
            _print_report(evaluate_run(args.checkpoint), args.json)
        elif args.command == "export-embeddings":
            dump = export_embeddings(args.which, _load_config(args), args.out)
            print(f"wrote {len(dump)} {dump.source} embeddings of dim {dump.vectors.shape[1]} to {args.out}")
        elif args.command == "gen-descriptions":
            manifest = load_manifest(args.manifest)
            templates = TEMPLATE_SETS[args.templates] if args.templates else templates_for(args.dataset)
            client = HTTPLLMClient(endpoint=args.endpoint, model=args.model)
            desc = generate_descriptions(client, manifest, templates, n_per_prompt=args.n_per_prompt,
                                         max_retries=args.max_retries)
            save_descriptions(desc, args.out)
            print(f"wrote {desc.total} descriptions for {len(desc.per_class)} classes to {args.out}")
        elif args.command == "ablate":
            report = run_ablation(_load_config(args), args.variant, resume=args.resume)
            _print_report(report, args.json)
        elif args.command == "synth":
            bm = make_benchmark(args.out, SyntheticSpec(n_classes=args.classes), args.seed)
            print(f"wrote {bm.manifest_path} and {bm.descriptions_path}")
    except StageError as exc:
        print(f"error in stage {exc.stage}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 2
    except NolaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
