"""Command line entry point.

Stage subcommands work inside a run directory (``--run-dir``; a new
timestamped one under $ISUP_RUNS_ROOT when omitted) and skip stages that are
already complete. ``predict`` is standalone: checkpoint + slide manifest in,
report directory out.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, PipelineConfig, load_config
from .errors import ConfigError, GradingError, StageError
from .grader import predict_bags
from .pipeline import Pipeline, bags_from_slide_manifest, load_grader, new_run_dir, write_prediction_report
from .synth import SynthSpec, corpus_stats, generate_corpus, write_corpus

log = logging.getLogger("isup_grading")

STAGE_COMMANDS = ("synth", "tile", "train-mil", "build-ssl-dataset", "pretrain", "finetune", "evaluate")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", type=Path, help="run directory (created, or resumed when it exists)")
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--preset", choices=("desk", "full"), default=None,
                   help="defaults to start from (desk unless the run directory has a saved config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--force", action="store_true", help="rerun the stage even when it is up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isup-grade", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic train/val/test corpus")
    _common(p)
    p.add_argument("--per-grade", type=int, help="training slides per ISUP grade")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.add_argument("--size", type=int, help="slide side length in pixels")
    p.add_argument("--out", type=Path, help="write a single corpus here instead of a run directory")

    p = sub.add_parser("tile", help="tile every split into patches and bags")
    _common(p)

    p = sub.add_parser("train-mil", help="train the top-k MIL instance classifier")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("build-ssl-dataset", help="pseudo-label patches and build the balanced SSL corpus")
    _common(p)
    p.add_argument("--per-class", type=int)

    p = sub.add_parser("pretrain", help="teacher-student pre-training")
    _common(p)
    p.add_argument("--corpus", type=Path, help="SSL patch manifest (default: the run's ssl_corpus.jsonl)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)

    for name, help_ in (("finetune", "attention-MIL grading fine-tune"), ("evaluate", "score the test split")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[],
                       help="also train/evaluate this ablation, repeatable")
        if name == "finetune":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--freeze-backbone", action="store_true", default=None)

    p = sub.add_parser("run", help="run every stage end to end")
    _common(p)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--until", choices=STAGE_COMMANDS, help="stop after this stage")

    p = sub.add_parser("predict", help="grade slides from a manifest with a trained grader")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="slide manifest (JSONL with image_path)")
    p.add_argument("--report", type=Path, required=True, help="output directory")
    p.add_argument("--bag-size", type=int, default=36)
    p.add_argument("--patch-size", type=int, default=256)
    return parser


def _flag_overrides(args) -> list[str]:
    mapping = {
        ("synth", "per_grade"): "synth.train_per_grade",
        ("synth", "seed"): "synth.seed",
        ("synth", "size"): "synth.size",
        ("train-mil", "epochs"): "mil.epochs",
        ("train-mil", "k"): "mil.k",
        ("train-mil", "lr"): "mil.lr",
        ("build-ssl-dataset", "per_class"): "ssl.per_class",
        ("pretrain", "lam"): "ssl.lam",
        ("pretrain", "epochs"): "ssl.epochs",
        ("pretrain", "batch"): "ssl.batch_size",
        ("pretrain", "lr"): "ssl.lr",
        ("finetune", "epochs"): "finetune.epochs",
        ("finetune", "batch"): "finetune.batch_size",
        ("finetune", "lr"): "finetune.lr",
        ("finetune", "freeze_backbone"): "finetune.freeze_backbone",
    }
    out = []
    for (cmd, attr), key in mapping.items():
        value = getattr(args, attr, None) if args.command == cmd else None
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    if getattr(args, "corpus", None) is not None:
        out.append(f"paths.ssl_corpus={json.dumps(str(args.corpus.resolve()))}")
    if getattr(args, "ablate", None):
        out.append(f"ablations={json.dumps(sorted(set(args.ablate)))}")
    return out


def resolve_config(args) -> tuple[PipelineConfig, Path]:
    """Saved run config (if resuming) or preset, then the TOML file, then overrides and flags."""
    overrides = list(args.overrides) + _flag_overrides(args)
    run_dir = args.run_dir
    saved = run_dir / "config.json" if run_dir else None
    if args.config is None and args.preset is None and saved is not None and saved.exists():
        cfg = PipelineConfig.from_dict(json.loads(saved.read_text())).with_overrides(overrides)
    else:
        cfg = load_config(args.config, overrides, args.preset or "desk")
    if run_dir is None:
        run_dir = new_run_dir(cfg.paths.resolved_runs_root())
    return cfg, run_dir


def _save_config(cfg: PipelineConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def cmd_synth_standalone(args) -> int:
    spec = SynthSpec(slides_per_grade=args.per_grade if args.per_grade is not None else 10,
                     seed=args.seed if args.seed is not None else 7,
                     size=args.size if args.size is not None else 1024)
    slides = generate_corpus(spec)
    path = write_corpus(slides, args.out)
    stats = corpus_stats([s.record for s in slides], [s.mask for s in slides])
    (args.out / "corpus_stats.json").write_text(json.dumps(stats, indent=1))
    print(f"wrote {len(slides)} slides to {path}")
    return 0


def cmd_predict(args) -> int:
    model = load_grader(args.checkpoint)
    bags = bags_from_slide_manifest(args.manifest, args.bag_size, args.patch_size)
    preds = predict_bags(model, bags)
    result = write_prediction_report(args.report, preds, bags, args.patch_size)
    print(json.dumps({k: v for k, v in result.items() if k != "confusion"}, indent=1))
    return 0


def _print_summary(pipe: Pipeline) -> None:
    summary_path = pipe.stage_dir("evaluate") / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        for variant, r in summary.items():
            if "n_slides" not in r:
                continue
            det = r.get("detection", {})
            print(f"{variant:8s} kappa {r['kappa']:.4f}  acc {r['accuracy']:.3f}  macro-F1 {r['macro_f1']:.3f}  "
                  f"MAE {r['mean_abs_error']:.3f}  severe {r['severe_errors']}  AUC {det.get('auc', float('nan')):.3f}")
        for name in ("ordinal_vs_no_or", "ssl_vs_no_ssl"):
            if name in summary:
                print(f"{name}: " + ", ".join(f"{k} {a:.4g} vs {b:.4g}" for k, (a, b) in summary[name].items()))
    print(f"run directory: {pipe.run_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "predict":
            return cmd_predict(args)
        if args.command == "synth" and args.out is not None:
            return cmd_synth_standalone(args)
        cfg, run_dir = resolve_config(args)
        pipe = Pipeline(cfg, run_dir)
        _save_config(cfg, run_dir)
        if args.command == "run":
            pipe.run(until=args.until)
            _print_summary(pipe)
        else:
            pipe.run_stage(args.command, force=args.force)
            pipe.write_manifest()
            if args.command == "evaluate":
                _print_summary(pipe)
            else:
                print(f"stage {args.command} complete in {run_dir}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 3
    except GradingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
