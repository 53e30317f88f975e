"""Stage runner: synth -> tile -> train-mil -> build-ssl-dataset -> pretrain -> finetune -> evaluate.

Every stage writes into its own directory under the run directory and
records a ``stage.json`` with a key (hash of the config sections it reads
plus the keys of its inputs) and SHA-256 hashes of its outputs. A stage whose
record matches the current key and whose outputs still hash the same is
skipped, which makes a rerun over an existing run directory resumable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .config import PipelineConfig
from .core import read_patch_manifest, read_slide_manifest, write_jsonl
from .data import SlideBag, bag_from_image, bag_from_patches
from .errors import CheckpointError, StageError
from .grader import FinetuneConfig, Grader, SlidePrediction, finetune, predict_bags
from .metrics import detection_metrics, grading_report, plot_confusion, write_confusion_csv, write_report
from .mil import InstanceClassifier, MILConfig, build_balanced_dataset, class_counts, pseudo_label, train_module1
from .nn import load_checkpoint, load_into, param_set, save_checkpoint, seed_everything, spec_json
from .ssl import PretrainConfig, SSLSpec, TeacherStudent, pretrain
from .stain import AugmentationConfig
from .synth import SynthSpec, corpus_stats, generate_corpus, load_mask, write_corpus
from .tiling import SlideImage, load_slide, save_png, tile_directory

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# per-stage seed offsets so stages never share a random stream
SEED_OFFSETS = {"train-mil": 101, "pretrain": 202, "finetune": 303}
TOP_ATTENTION = 3


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path) -> dict[str, str]:
    """Relative path -> SHA-256 for every file under ``root`` except the stage record."""
    return {
        str(p.relative_to(root)): file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "stage.json"
    }


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Stage:
    name: str
    sections: tuple[str, ...]
    deps: tuple[str, ...]
    fn: Callable


class Pipeline:
    def __init__(self, config: PipelineConfig, run_dir):
        config.validate()
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.keys: dict[str, str] = {}
        self.ran: list[str] = []
        self.skipped: list[str] = []
        self._bags: dict[str, list[SlideBag]] = {}
        self.stages = [
            Stage("synth", ("synth",), (), self.stage_synth),
            Stage("tile", ("tiling",), ("synth",), self.stage_tile),
            Stage("train-mil", ("encoder", "mil", "seed"), ("tile",), self.stage_train_mil),
            Stage("build-ssl-dataset", ("ssl.per_class", "ssl.val_per_class", "tiling"), ("train-mil",),
                  self.stage_build_ssl),
            Stage("pretrain", ("encoder", "ssl", "seed", "paths.ssl_corpus"), ("build-ssl-dataset",),
                  self.stage_pretrain),
            Stage("finetune", ("encoder", "finetune", "seed", "ablations"), ("pretrain", "tile"), self.stage_finetune),
            Stage("evaluate", ("ablations",), ("finetune",), self.stage_evaluate),
        ]
        self.by_name = {s.name: s for s in self.stages}

    # ---- bookkeeping -------------------------------------------------

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / name

    def _section(self, dotted: str):
        obj = self.config.to_dict()
        for part in dotted.split("."):
            obj = obj[part]
        return obj

    def stage_key(self, stage: Stage) -> str:
        if stage.name in self.keys:
            return self.keys[stage.name]
        parts = [stage.name, {s: self._section(s) for s in stage.sections}]
        if stage.name == "synth" and self.config.paths.corpus:
            parts.append({"corpus": str(Path(self.config.paths.corpus).resolve())})
        if stage.name == "pretrain" and self.config.paths.ssl_corpus:
            parts.append({"ssl_corpus_sha256": file_sha256(self.config.paths.ssl_corpus)})
        parts.append([self.stage_key(self.by_name[d]) for d in self.deps_of(stage)])
        self.keys[stage.name] = _key(*parts)
        return self.keys[stage.name]

    def deps_of(self, stage: Stage) -> tuple[str, ...]:
        if stage.name == "pretrain" and self.config.paths.ssl_corpus:
            return ()
        return stage.deps

    def is_complete(self, stage: Stage) -> bool:
        record = self.stage_dir(stage.name) / "stage.json"
        if not record.exists():
            return False
        info = json.loads(record.read_text())
        if info.get("key") != self.stage_key(stage):
            return False
        return info.get("outputs") == hash_tree(self.stage_dir(stage.name))

    def run_stage(self, name: str, force: bool = False) -> Path:
        stage = self.by_name[name]
        for dep in self.deps_of(stage):
            if not self.is_complete(self.by_name[dep]):
                raise StageError(name, f"upstream stage {dep!r} has not completed in {self.run_dir}")
        out = self.stage_dir(name)
        if not force and self.is_complete(stage):
            log.info("stage %s up to date, skipping", name)
            self.skipped.append(name)
            return out
        out.mkdir(parents=True, exist_ok=True)
        (out / "stage.json").unlink(missing_ok=True)
        start = time.perf_counter()
        log.info("stage %s starting", name)
        try:
            stage.fn(out)
        except StageError:
            raise
        except Exception as e:  # surface the stage name with the original cause
            raise StageError(name, f"{type(e).__name__}: {e}") from e
        seconds = time.perf_counter() - start
        info = {"stage": name, "key": self.stage_key(stage), "seconds": seconds, "outputs": hash_tree(out)}
        (out / "stage.json").write_text(json.dumps(info, indent=1, sort_keys=True))
        self.ran.append(name)
        log.info("stage %s done in %.1fs", name, seconds)
        self.write_manifest()
        return out

    def run(self, until: str | None = None) -> Path:
        for stage in self.stages:
            self.run_stage(stage.name)
            if stage.name == until:
                break
        self.write_manifest()
        return self.run_dir

    def write_manifest(self) -> Path:
        stages = {}
        for stage in self.stages:
            record = self.stage_dir(stage.name) / "stage.json"
            if record.exists():
                stages[stage.name] = json.loads(record.read_text())
        manifest = {
            "package_version": __version__,
            "torch_version": torch.__version__,
            "numpy_version": np.__version__,
            "config": self.config.to_dict(),
            "stages": stages,
            "total_seconds": sum(s["seconds"] for s in stages.values()),
            "updated": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        path = self.run_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path

    # ---- data access -------------------------------------------------

    def display_path(self, path: Path) -> str:
        """Run-relative when inside the run directory, so reports do not depend on where the run lives."""
        try:
            return str(Path(path).resolve().relative_to(self.run_dir.resolve()))
        except ValueError:
            return str(path)

    def corpus_dir(self, split: str) -> Path:
        if self.config.paths.corpus:
            return Path(self.config.paths.corpus) / split
        return self.stage_dir("synth") / split

    def bags(self, split: str) -> list[SlideBag]:
        if split not in self._bags:
            self._bags[split] = load_bags(
                self.corpus_dir(split) / "corpus.jsonl",
                self.stage_dir("tile") / split / "patches.jsonl",
                self.config.tiling.bag_size,
            )
        return self._bags[split]

    # ---- stages ------------------------------------------------------

    def stage_synth(self, out: Path) -> None:
        c = self.config.synth
        if self.config.paths.corpus:
            # external corpus: record what is there so downstream keys follow its content
            stats = {}
            for split in SPLITS:
                recs = read_slide_manifest(self.corpus_dir(split) / "corpus.jsonl")
                stats[split] = corpus_stats(recs)
                stats[split]["manifest_sha256"] = file_sha256(self.corpus_dir(split) / "corpus.jsonl")
            write_report(out / "corpus_stats.json", stats)
            return
        counts = {"train": c.train_per_grade, "val": c.val_per_grade, "test": c.test_per_grade}
        stats = {}
        for i, split in enumerate(SPLITS):
            spec = SynthSpec(slides_per_grade=counts[split], size=c.size, region_scale=c.region_scale,
                             seed=c.seed + i)
            slides = generate_corpus(spec)
            write_corpus(slides, out / split)
            stats[split] = corpus_stats([s.record for s in slides], [s.mask for s in slides],
                                        self.config.tiling.patch_size)
        write_report(out / "corpus_stats.json", stats)

    def stage_tile(self, out: Path) -> None:
        t = self.config.tiling
        for split in SPLITS:
            tile_directory(self.corpus_dir(split) / "slides", out / split, t.patch_size, t.bag_size)

    def stage_train_mil(self, out: Path) -> None:
        c = self.config
        seed = c.seed + SEED_OFFSETS["train-mil"]
        seed_everything(seed)
        cfg = MILConfig(encoder=c.encoder.spec(), k=c.mil.k, epochs=c.mil.epochs, batch_size=c.mil.batch_size,
                        lr=c.mil.lr, seed=seed)
        result = train_module1(self.bags("train"), cfg, val=self.bags("val"))
        save_checkpoint(out / "mil.ckpt", param_set(result.model),
                        {"kind": "instance-classifier", "spec": spec_json(cfg.encoder), "best_epoch": result.best_epoch})
        write_report(out / "trace.json", {"loss": result.loss_trace, "val": result.val_trace,
                                          "best_epoch": result.best_epoch})

    def stage_build_ssl(self, out: Path) -> None:
        c = self.config
        model = InstanceClassifier(c.encoder.spec())
        _, arrays = load_checkpoint(self.stage_dir("train-mil") / "mil.ckpt", expect_spec=spec_json(c.encoder.spec()))
        load_into(param_set(model), arrays)
        model.eval()
        summary = {}
        for split, per_class, name in (("train", c.ssl.per_class, "ssl_corpus"), ("val", c.ssl.val_per_class, "ssl_val")):
            # benign slides are left out: module 1 never saw them, so benign labels come from cancerous slides
            candidates = [
                p for b in self.bags(split) if not b.record.benign
                for p in b.all_patches if p.tissue_fraction >= c.tiling.min_tissue
            ]
            labelled = pseudo_label(model, candidates)
            write_jsonl(out / f"pseudo_labels_{split}.jsonl", labelled)
            chosen = build_balanced_dataset(labelled, per_class)
            write_jsonl(out / f"{name}.jsonl", chosen)
            summary[split] = {"candidates": len(candidates), "labelled": class_counts(labelled),
                              "selected": class_counts(chosen)}
        write_report(out / "class_counts.json", summary)

    def ssl_config(self) -> PretrainConfig:
        c = self.config
        spec = SSLSpec(encoder=c.encoder.spec(), head_norm=c.ssl.head_norm)
        return PretrainConfig(spec=spec, epochs=c.ssl.epochs, batch_size=c.ssl.batch_size, lr=c.ssl.lr,
                              momentum=c.ssl.momentum, lam=c.ssl.lam, aug=AugmentationConfig(mode=c.ssl.stain_mode),
                              seed=c.seed + SEED_OFFSETS["pretrain"])

    def stage_pretrain(self, out: Path) -> None:
        cfg = self.ssl_config()
        seed_everything(cfg.seed)
        corpus_path = Path(self.config.paths.ssl_corpus or self.stage_dir("build-ssl-dataset") / "ssl_corpus.jsonl")
        pixels = stack_pixels(read_patch_manifest(corpus_path))
        val_path = corpus_path.with_name("ssl_val.jsonl")
        val = stack_pixels(read_patch_manifest(val_path)) if val_path.exists() else None
        result = pretrain(pixels, cfg, val)
        save_pretrained(out / "ssl.ckpt", result.model, cfg)
        write_report(out / "trace.json", {"loss": result.loss_trace, "val": result.val_trace,
                                          "best_epoch": result.best_epoch, "corpus": self.display_path(corpus_path),
                                          "corpus_size": int(len(pixels))})

    def variants(self) -> list[str]:
        return ["main", *self.config.ablations]

    def finetune_config(self, variant: str) -> FinetuneConfig:
        c = self.config
        return FinetuneConfig(encoder=c.encoder.spec(), attention_hidden=c.finetune.attention_hidden,
                              ordinal=variant != "no-or", freeze_backbone=c.finetune.freeze_backbone,
                              epochs=c.finetune.epochs, batch_size=c.finetune.batch_size, lr=c.finetune.lr,
                              seed=c.seed + SEED_OFFSETS["finetune"])

    def stage_finetune(self, out: Path) -> None:
        backbone = load_pretrained_backbone(self.stage_dir("pretrain") / "ssl.ckpt", self.config.encoder.spec())
        traces = {}
        for variant in self.variants():
            cfg = self.finetune_config(variant)
            seed_everything(cfg.seed)
            state = None if variant == "no-ssl" else backbone
            result = finetune(self.bags("train"), cfg, state, val=self.bags("val"))
            save_grader(out / f"grader_{variant}.ckpt", result.model, cfg)
            traces[variant] = {"loss": result.loss_trace, "val_kappa": result.kappa_trace,
                               "best_epoch": result.best_epoch}
        write_report(out / "trace.json", traces)

    def stage_evaluate(self, out: Path) -> None:
        summary = {}
        for variant in self.variants():
            model = load_grader(self.stage_dir("finetune") / f"grader_{variant}.ckpt")
            preds = predict_bags(model, self.bags("test"))
            summary[variant] = write_prediction_report(out / variant, preds, self.bags("test"))
        if "no-or" in summary:
            summary["ordinal_vs_no_or"] = {
                "severe_errors": [summary["main"]["severe_errors"], summary["no-or"]["severe_errors"]],
                "mean_abs_error": [summary["main"]["mean_abs_error"], summary["no-or"]["mean_abs_error"]],
            }
        if "no-ssl" in summary:
            summary["ssl_vs_no_ssl"] = {"kappa": [summary["main"]["kappa"], summary["no-ssl"]["kappa"]]}
        write_report(out / "summary.json", summary)


# ---- shared helpers used by the pipeline and the standalone CLI commands ----


def load_bags(corpus_manifest, patch_manifest, bag_size: int) -> list[SlideBag]:
    """Slide records joined with their tiled patches (and masks when the corpus has them)."""
    records = read_slide_manifest(corpus_manifest)
    by_slide: dict[str, list] = {}
    for p in read_patch_manifest(patch_manifest):
        by_slide.setdefault(p.slide_id, []).append(p)
    bags = []
    for rec in records:
        patches = by_slide.get(rec.slide_id)
        if not patches:
            raise StageError("tile", f"no patches for slide {rec.slide_id} in {patch_manifest}")
        mask = load_mask(rec.mask_path) if rec.mask_path and Path(rec.mask_path).exists() else None
        bags.append(bag_from_patches(rec, patches, bag_size, mask))
    return bags


def bags_from_slide_manifest(manifest, bag_size: int, patch_size: int = 256) -> list[SlideBag]:
    """Tile slides in memory straight from a slide manifest (used by ``predict``)."""
    bags = []
    for rec in read_slide_manifest(manifest):
        if not rec.image_path:
            raise StageError("predict", f"slide {rec.slide_id} has no image_path")
        image = load_slide(rec.image_path)
        mask = load_mask(rec.mask_path) if rec.mask_path and Path(rec.mask_path).exists() else None
        bags.append(bag_from_image(rec, SlideImage(rec.slide_id, image.pixels), bag_size, patch_size, mask))
    return bags


def stack_pixels(patches) -> np.ndarray:
    return np.stack([p.load_pixels() for p in patches])


def save_pretrained(path, model: TeacherStudent, cfg: PretrainConfig) -> Path:
    arrays = {f"student.{k}": v for k, v in model.student_params().items()}
    arrays.update({f"teacher.{k}": v for k, v in model.teacher_params().items()})
    # BatchNorm running statistics of the heads travel with the weights
    for prefix, module in (("student.fhead.", model.student_fhead), ("student.shead.", model.student_shead),
                           ("teacher.fhead.", model.teacher_fhead)):
        for name, buf in module.named_buffers():
            if buf.is_floating_point():
                arrays[f"buffer.{prefix}{name}"] = buf
    header = {"kind": "teacher-student", "spec": spec_json(cfg.spec.encoder), "ssl_spec": spec_json(cfg.spec),
              "lam": model.lam, "momentum": model.momentum}
    return save_checkpoint(path, arrays, header)


def load_pretrained_backbone(path, encoder_spec) -> dict:
    header, arrays = load_checkpoint(path, expect_spec=spec_json(encoder_spec))
    if header.get("kind") != "teacher-student":
        raise CheckpointError(f"{path} is a {header.get('kind')} checkpoint, not a pre-trained teacher-student")
    prefix = "student.backbone."
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_grader(path, model: Grader, cfg: FinetuneConfig) -> Path:
    header = {"kind": "grader", "spec": spec_json(cfg.encoder), "attention_hidden": cfg.attention_hidden,
              "ordinal": cfg.ordinal}
    return save_checkpoint(path, param_set(model), header)


def load_grader(path) -> Grader:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "grader":
        raise CheckpointError(f"{path} is a {header.get('kind')} checkpoint, not a grader")
    from .nn import EncoderSpec

    spec = dict(header["spec"])
    spec["channels"] = tuple(spec["channels"])
    model = Grader(EncoderSpec(**spec), header["attention_hidden"], header["ordinal"])
    load_into(param_set(model), arrays)
    model.eval()
    return model


def top_attention_patches(pred: SlidePrediction, bag: SlideBag, n: int = TOP_ATTENTION):
    """Distinct patches ranked by total attention (repeats in a padded bag add up)."""
    totals: dict[int, float] = {}
    for pos, weight in enumerate(pred.attention):
        row = int(bag.bag_index[pos])
        totals[row] = totals.get(row, 0.0) + weight
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], bag.patches[kv[0]].index))
    return [(bag.patches[row], w) for row, w in ranked[:n]]


def lesion_hit(mask: np.ndarray | None, grid, patch_size: int = 256) -> bool | None:
    if mask is None:
        return None
    r, c = grid
    tile = mask[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
    return bool(np.isin(tile, (3, 4, 5)).any())


def write_prediction_report(out: Path, preds: list[SlidePrediction], bags: list[SlideBag],
                            patch_size: int = 256) -> dict:
    """Per-slide JSON, metrics, confusion matrix CSV + PNG and the top-attention explainability report."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "slides").mkdir(exist_ok=True)
    explain_dir = out / "explain"
    explain_dir.mkdir(exist_ok=True)
    explain = []
    by_id = {b.slide_id: b for b in bags}
    for p in preds:
        bag = by_id[p.slide_id]
        top = top_attention_patches(p, bag)
        entries = []
        for rank, (patch, weight) in enumerate(top):
            png = explain_dir / f"{p.slide_id}_top{rank + 1}.png"
            save_png(png, patch.load_pixels())
            entries.append({"rank": rank + 1, "patch_index": patch.index, "grid": list(patch.grid),
                            "attention": weight, "png": png.name,
                            "lesion_hit": lesion_hit(bag.mask, patch.grid, patch_size)})
        explain.append({"slide_id": p.slide_id, "true_grade": p.true_grade, "grade": p.grade, "top": entries})
        with open(out / "slides" / f"{p.slide_id}.json", "w") as fh:
            json.dump({**p.to_json(), "top_patches": entries}, fh, indent=1)
    write_jsonl(out / "predictions.jsonl", [p.to_json() for p in preds])
    write_report(out / "explain.json", explain)

    result: dict = {"n_slides": len(preds)}
    labelled = [p for p in preds if p.true_grade is not None]
    if labelled:
        truth = [p.true_grade for p in labelled]
        report = grading_report(truth, [p.grade for p in labelled])
        result.update(report.to_json())
        write_confusion_csv(out / "confusion.csv", report.confusion)
        plot_confusion(out / "confusion.png", report.confusion)
        try:
            acc, f1, auc = detection_metrics(truth, [p.malignancy for p in labelled])
            result["detection"] = {"accuracy": acc, "f1": f1, "auc": auc}
        except Exception as e:  # single-class test set: detection AUC is undefined
            result["detection"] = {"error": str(e)}
        hits = [e["top"][0]["lesion_hit"] for e in explain
                if e["true_grade"] and e["top"] and e["top"][0]["lesion_hit"] is not None]
        if hits:
            result["top_attention_lesion_rate"] = float(np.mean(hits))
    write_report(out / "metrics.json", result)
    return result


def new_run_dir(root) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"run-{stamp}"
    n = 1
    while path.exists():
        n += 1
        path = Path(root) / f"run-{stamp}-{n}"
    return path

