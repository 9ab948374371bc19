"""Command-line entry point for aptdiff.

Usage:
    aptdiff pretrain --preset smoke
    aptdiff personalize --preset smoke --seed 3
    aptdiff delta-noise runs/<run-dir>
    aptdiff gamma-report runs/<run-dir>/indicator_log.csv --bins 10 --out gamma.png
    aptdiff sample runs/<run-dir>/checkpoints/step-000040.pt --caption "a photo of a V* circle"
    aptdiff attention-maps runs/<run-dir>/checkpoints/step-000040.pt --out maps.png
    aptdiff ablate --preset smoke --max-workers 4

Every verb prints one JSON object on stdout and exits 0 on success; failures
print a JSON error on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from aptdiff.sanitize import safe_error_response

logger = logging.getLogger(__name__)

PRIOR_FILE = "prior.pt"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=os.environ.get("APTDIFF_CONFIG"),
        help="JSON config file layered over the preset (or APTDIFF_CONFIG env)",
    )
    parser.add_argument(
        "--preset",
        default=os.environ.get("APTDIFF_PRESET", "default"),
        help="Built-in config preset (default: default, or APTDIFF_PRESET env)",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value; repeatable",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Seed for both pretraining and personalization",
    )
    parser.add_argument(
        "--runs-dir",
        default=os.environ.get("APTDIFF_RUNS_DIR", "runs"),
        help="Root directory for run outputs (default: ./runs, or APTDIFF_RUNS_DIR env)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aptdiff",
        description="Adaptive personalization of a toy text-to-image diffusion model",
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get("APTDIFF_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO, or APTDIFF_LOG_LEVEL env)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Train the prior on the synthetic corpus")
    _add_common(p)

    p = sub.add_parser("personalize", help="Fine-tune adapters on the reference set")
    _add_common(p)
    p.add_argument("--prior", default=None, help="Prior checkpoint (default: from the config hash)")
    p.add_argument("--resume", action="store_true", help="Continue an interrupted run")

    p = sub.add_parser("sample", help="Sample images from a checkpoint")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--caption", required=True, help="Caption, e.g. 'a photo of a V* circle'")
    p.add_argument("-n", type=int, default=4, help="Number of samples (default: 4)")
    p.add_argument("--guidance", type=float, default=7.5, help="Guidance scale (default: 7.5)")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed")
    p.add_argument("--no-adapters", action="store_true", help="Sample from the prior")
    p.add_argument("--out", default="samples.png", help="Output PNG grid")

    p = sub.add_parser("delta-noise", help="Prior/fine-tuned prediction gap per checkpoint")
    p.add_argument("target", help="Run directory or a single checkpoint file")
    p.add_argument("--probes", type=int, default=64, help="Probe count (default: 64)")
    p.add_argument("--probe-seed", type=int, default=1234, help="Probe seed (default: 1234)")
    p.add_argument(
        "--conditioning",
        choices=["training", "class"],
        default="training",
        help="Caption the fine-tuned model sees (default: training)",
    )

    p = sub.add_parser("gamma-report", help="Per-bin indicator curves from an indicator log")
    p.add_argument("log", help="indicator_log.csv")
    p.add_argument("--bins", type=int, required=True, help="Number of timestep bins")
    p.add_argument("--out", default=None, help="Optional PNG plot path")
    p.add_argument("--threshold", type=float, default=0.5, help="Crossing threshold")

    p = sub.add_parser("attention-maps", help="Cross-attention maps of tuned vs prior")
    p.add_argument("checkpoint", help="Personalized checkpoint file")
    p.add_argument("--t", type=int, default=None, help="Timestep (default: T/2)")
    p.add_argument("--template", default=None, help="Caption template with a {} placeholder")
    p.add_argument("--out", default="attention.png", help="Output PNG")

    p = sub.add_parser("ablate", help="Run the four-variant ablation")
    _add_common(p)
    p.add_argument("--max-workers", type=int, default=1, help="Parallel variant runs")
    return parser


def _config_from_args(args: argparse.Namespace):
    from aptdiff.config import resolve_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"pretrain.seed={args.seed}", f"apt.seed={args.seed}"]
    return resolve_config(args.preset, args.config, overrides)


def reference_set_for(config):
    """Reference images named by ``apt.reference_manifest``, or the built-in concept."""
    from aptdiff.corpus import load_reference_set, make_reference_set

    image_size = config.net.image_size
    if config.apt.reference_manifest:
        return load_reference_set(config.apt.reference_manifest, image_size)
    return make_reference_set(config.apt.num_references, image_size)


def _prior_path(args: argparse.Namespace, config) -> Path:
    from aptdiff.config import prior_dir

    if getattr(args, "prior", None):
        return Path(args.prior)
    return prior_dir(args.runs_dir, config) / PRIOR_FILE


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_pretrain(args: argparse.Namespace) -> dict:
    from aptdiff.checkpoint import save_checkpoint
    from aptdiff.config import prior_dir
    from aptdiff.corpus import make_corpus
    from aptdiff.metrics import RunMetrics
    from aptdiff.trainer import METRICS_FILE, pretrain

    config = _config_from_args(args)
    out_dir = prior_dir(args.runs_dir, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(
        config.pretrain.corpus_size, config.net.image_size, config.pretrain.seed
    )
    metrics = RunMetrics(out_dir.name)
    ckpt = pretrain(
        corpus,
        config.net,
        config.pretrain.steps,
        config.pretrain.seed,
        settings=config.pretrain,
        diffusion=config.diffusion,
        metrics=metrics,
    )
    path = save_checkpoint(ckpt, out_dir / PRIOR_FILE)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    metrics.save(out_dir / METRICS_FILE)
    return {
        "prior": str(path),
        "init_val_loss": ckpt.metadata["init_val_loss"],
        "final_val_loss": ckpt.metadata["final_val_loss"],
    }


def cmd_personalize(args: argparse.Namespace) -> dict:
    from aptdiff.config import run_dir
    from aptdiff.trainer import personalize

    config = _config_from_args(args)
    out_dir = run_dir(args.runs_dir, config)
    result = personalize(
        reference_set_for(config),
        config.apt,
        _prior_path(args, config),
        out_dir,
        resume=args.resume,
    )
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return {
        "run_dir": str(result.run_dir),
        "step": result.checkpoint.step,
        "checkpoints": result.checkpoints,
        "training_log": str(result.training_log),
        "indicator_log": str(result.indicator_log),
    }


def cmd_sample(args: argparse.Namespace) -> dict:
    from aptdiff.checkpoint import load_checkpoint
    from aptdiff.diagnostics import sample

    ckpt = load_checkpoint(args.checkpoint)
    sample(
        ckpt,
        args.caption,
        n=args.n,
        guidance_scale=args.guidance,
        seed=args.seed,
        out_path=args.out,
        adapters=not args.no_adapters,
    )
    return {"samples": str(args.out), "n": args.n, "guidance_scale": args.guidance}


def cmd_delta_noise(args: argparse.Namespace) -> dict:
    from aptdiff.checkpoint import load_checkpoint
    from aptdiff.diagnostics import delta_noise, delta_noise_for_run, probe_set_for

    target = Path(args.target)
    if target.is_dir():
        report = delta_noise_for_run(target, args.probes, args.probe_seed, args.conditioning)
        return report.to_dict()
    ckpt = load_checkpoint(target)
    probes = probe_set_for(ckpt, args.probes, args.probe_seed)
    value = delta_noise(ckpt, probes, args.conditioning)
    return {
        "steps": [ckpt.step],
        "delta_noise": [value],
        "probe_seed": args.probe_seed,
        "conditioning": args.conditioning,
    }


def cmd_gamma_report(args: argparse.Namespace) -> dict:
    from aptdiff.diagnostics import gamma_report

    return gamma_report(args.log, args.bins, args.out, args.threshold).to_dict()


def cmd_attention_maps(args: argparse.Namespace) -> dict:
    from aptdiff.checkpoint import load_checkpoint
    from aptdiff.diagnostics import export_attention_maps

    ckpt = load_checkpoint(args.checkpoint)
    return export_attention_maps(ckpt, args.out, caption_template=args.template, t=args.t)


def cmd_ablate(args: argparse.Namespace) -> dict:
    from aptdiff.ablation import run_ablation_suite

    config = _config_from_args(args)
    result = run_ablation_suite(
        config,
        reference_set_for(config),
        _prior_path(args, config),
        args.runs_dir,
        max_workers=args.max_workers,
    )
    return {
        "table": str(result.table_path),
        "plots": [str(p) for p in result.plots],
        "rows": result.rows,
    }


COMMANDS = {
    "pretrain": cmd_pretrain,
    "personalize": cmd_personalize,
    "sample": cmd_sample,
    "delta-noise": cmd_delta_noise,
    "gamma-report": cmd_gamma_report,
    "attention-maps": cmd_attention_maps,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        payload = COMMANDS[args.command](args)
    except Exception as exc:
        response = safe_error_response(exc, logger, args.command)
        print(json.dumps(response), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **payload}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
