"""Spec-driven experiment runs: train -> evaluate -> compare -> attribute -> interpret
-> stain -> robustness -> report, with every output recorded in a hashed manifest."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import attribution as attr
from . import interpret as interp
from . import robustness as rob
from . import stain as st
from .data import (CATALOG, DatasetSpec, InMemoryDataset, PatchRecord, load_split, register_dataset,
                   resolve_root)
from .errors import ConfigError, HistoEvalError
from .models import ArchitectureSpec, ModelHandle, load_checkpoint, save_checkpoint
from .reporting import ArtifactManifest, metric_rows_to_csv, render_tables, write_text
from .segmentation import load_predictor, save_mask_png, tripartite
from .stats import ScoreSample, accuracy, auc, bootstrap_ci, compare_model_sets
from .training import TrainConfig, predict_scores, run_multiseed, write_history

log = logging.getLogger(__name__)

STAGES = ("train", "evaluate", "compare", "attribute", "interpret", "stain", "robustness", "report")


class SpecError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


def _line(node, path: tuple) -> int | None:
    """1-based line of the deepest node along ``path`` in a composed YAML tree."""
    best = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next(((k, v) for k, v in node.value if k.value == key), None)
            if nxt is None:
                break
            best, node = nxt[0].start_mark.line + 1, nxt[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            best = node.start_mark.line + 1
        else:
            break
    return best


@dataclass
class RunSpec:
    out: Path
    seed: int
    dataset: str
    datasets: dict[str, DatasetSpec]
    architectures: list[ArchitectureSpec]
    train: TrainConfig
    k: int
    stages: list[str]
    checkpoints: list[str] = field(default_factory=list)
    options: dict[str, dict] = field(default_factory=dict)
    source: Path | None = None

    def opt(self, stage: str, key: str, default=None):
        return self.options.get(stage, {}).get(key, default)


def _dataset_spec(ds_id: str, d: dict, base: Path) -> DatasetSpec:
    root = d.get("root")
    if root is not None and not Path(root).is_absolute():
        root = str((base / root).resolve())
    if ds_id in CATALOG and "class_names" not in d:
        c = CATALOG[ds_id]
        return DatasetSpec(ds_id, c.class_names, c.split_sizes if d.get("check_sizes", False) else None,
                           c.task, root)
    split_sizes = d.get("split_sizes")
    return DatasetSpec(ds_id, tuple(d.get("class_names", ("negative", "positive"))), split_sizes,
                       d.get("task", "binary"), root)


def load_spec(path) -> RunSpec:
    path = Path(path)
    try:
        text = path.read_text()
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except OSError as exc:
        raise SpecError(f"cannot read spec: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SpecError(f"invalid YAML: {exc}", mark.line + 1 if mark else None) from exc
    if not isinstance(doc, dict):
        raise SpecError("spec must be a mapping", 1)
    base = path.parent

    def need(key):
        if key not in doc:
            raise SpecError(f"missing required key {key!r}", _line(node, ()))
        return doc[key]

    def guard(keys: tuple, fn):
        try:
            return fn()
        except SpecError:
            raise
        except (ConfigError, TypeError, ValueError) as exc:
            raise SpecError(str(exc), _line(node, keys)) from exc

    unknown = set(doc) - {"out", "seed", "dataset", "datasets", "architectures", "train", "k", "stages",
                          "checkpoints", *STAGES}
    if unknown:
        k0 = sorted(unknown)[0]
        raise SpecError(f"unknown key {k0!r}", _line(node, (k0,)))
    stages = list(doc.get("stages", STAGES))
    for i, s in enumerate(stages):
        if s not in STAGES:
            raise SpecError(f"unknown stage {s!r}; expected one of {STAGES}", _line(node, ("stages", i)))
    datasets = {ds_id: guard(("datasets", ds_id), lambda ds_id=ds_id, d=d: _dataset_spec(ds_id, d or {}, base))
                for ds_id, d in (doc.get("datasets") or {}).items()}
    dataset = need("dataset")
    if dataset not in datasets:
        raise SpecError(f"dataset {dataset!r} is not declared under 'datasets'", _line(node, ("dataset",)))
    archs = [guard(("architectures", i), lambda a=a: ArchitectureSpec.from_dict(a))
             for i, a in enumerate(doc.get("architectures") or [])]
    train = guard(("train",), lambda: TrainConfig.from_dict({"seed": doc.get("seed", 0), **(doc.get("train") or {})}))
    k = doc.get("k", 1)
    if not isinstance(k, int) or k < 1:
        raise SpecError("k must be a positive integer", _line(node, ("k",)))
    ckpts = [str((base / c).resolve()) if not Path(c).is_absolute() else c for c in doc.get("checkpoints") or []]
    if "train" not in stages and not ckpts and any(s in stages for s in STAGES[1:7]):
        raise SpecError("stages after 'train' need either the train stage or 'checkpoints'", _line(node, ("stages",)))
    if "train" in stages and not archs:
        raise SpecError("train stage needs at least one architecture", _line(node, ("architectures",)))
    for stage, ref in (("stain", "other_dataset"), ("robustness", "other_dataset")):
        if stage in stages:
            other = (doc.get(stage) or {}).get(ref)
            if other is None:
                raise SpecError(f"{stage} stage needs {ref}", _line(node, (stage,)))
            if other not in datasets:
                raise SpecError(f"dataset {other!r} is not declared under 'datasets'", _line(node, (stage, ref)))
    # referenced datasets must exist on disk
    used = {dataset} | {(doc.get(s) or {}).get("other_dataset") for s in ("stain", "robustness") if s in stages}
    for ds_id in sorted(u for u in used if u):
        try:
            root = resolve_root(datasets[ds_id].root)
        except ConfigError as exc:
            raise SpecError(f"dataset {ds_id!r}: {exc}", _line(node, ("datasets", ds_id))) from exc
        if not (root / "manifest.csv").is_file():
            raise SpecError(f"dataset {ds_id!r} not found at {root}", _line(node, ("datasets", ds_id, "root")))
    out = Path(doc.get("out", "out"))
    if not out.is_absolute():
        out = (base / out).resolve()
    return RunSpec(out=out, seed=int(doc.get("seed", 0)), dataset=dataset, datasets=datasets,
                   architectures=archs, train=train, k=k, stages=stages, checkpoints=ckpts,
                   options={s: dict(doc.get(s) or {}) for s in STAGES if isinstance(doc.get(s), dict)},
                   source=path)


# --- stage helpers ---------------------------------------------------------

def model_id(m: ModelHandle) -> str:
    return f"{m.spec.name}_seed{m.seed}"


def _records(handle, split: str, limit: int | None = None) -> list[PatchRecord]:
    view = load_split(handle, split)
    n = len(view) if limit is None else min(limit, len(view))
    return [view[i] for i in range(n)]


def write_scores(path, sample: ScoreSample) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *[f"p{c}" for c in range(sample.scores.shape[1])]])
        for y, s in zip(sample.labels, sample.scores):
            w.writerow([int(y), *[repr(float(v)) for v in s]])
    return path


def read_scores(path) -> ScoreSample:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return ScoreSample(np.array([[float(v) for v in r[1:]] for r in rows]), np.array([int(r[0]) for r in rows]))


class Pipeline:
    def __init__(self, spec: RunSpec):
        self.spec = spec
        self.out = spec.out
        self.manifest = ArtifactManifest(self.out)
        self.handles = {}
        self.models: dict[str, list[ModelHandle]] = {}
        self.samples: dict[str, list[ScoreSample]] = {}
        self.stain_model = None
        self.reports: list[Path] = []

    def handle(self, ds_id: str):
        if ds_id not in self.handles:
            self.handles[ds_id] = register_dataset(self.spec.datasets[ds_id])
        return self.handles[ds_id]

    def emit(self, path, stage: str) -> Path:
        return self.manifest.add(path, stage)

    def run(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        status = 0
        for stage in STAGES:
            if stage not in self.spec.stages:
                continue
            log.info("stage %s", stage)
            try:
                getattr(self, f"stage_{stage}")()
                self.manifest.stages[stage] = "ok"
            except Exception as exc:  # any stage failure leaves a partial manifest behind
                log.error("stage %s failed: %s", stage, exc, exc_info=not isinstance(exc, HistoEvalError))
                self.manifest.stages[stage] = f"failed: {type(exc).__name__}: {exc}"
                status = 1
                break
        self.manifest.write()
        return status

    # stages -----------------------------------------------------------------

    def stage_train(self):
        handle = self.handle(self.spec.dataset)
        for arch in self.spec.architectures:
            mset = run_multiseed(arch, handle, self.spec.train, self.spec.k)
            self.models[arch.name] = mset.models
            for m, hist in zip(mset.models, mset.histories):
                self.emit(save_checkpoint(self.out / "checkpoints" / f"{model_id(m)}.zip", m, m.meta.get("epoch"),
                                          m.meta.get("val_auc_history"), {"dataset": self.spec.dataset}), "train")
                self.emit(write_history(self.out / "histories" / f"{model_id(m)}.csv", hist), "train")

    def _ensure_models(self):
        if self.models:
            return
        for path in self.spec.checkpoints:
            m, _ = load_checkpoint(path)
            self.models.setdefault(m.spec.name, []).append(m)

    def stage_evaluate(self):
        self._ensure_models()
        split = self.spec.opt("evaluate", "split", "test")
        iters = self.spec.opt("evaluate", "bootstrap_iterations", 100)
        recs = _records(self.handle(self.spec.dataset), split)
        rows = []
        for name, ms in self.models.items():
            self.samples[name] = []
            for m in ms:
                sample = predict_scores(m, recs)
                self.samples[name].append(sample)
                self.emit(write_scores(self.out / "scores" / f"{model_id(m)}.csv", sample), "evaluate")
                for metric in (accuracy, auc):
                    lo, hi = bootstrap_ci(metric, sample, iters, rng_state=[self.spec.seed, m.seed])
                    rows.append([name, self.spec.dataset, metric.__name__, metric(sample), lo, hi, m.seed])
        path = write_text(self.out / "reports" / "metrics.csv", metric_rows_to_csv(rows))
        self.reports.append(self.emit(path, "evaluate"))

    def stage_compare(self):
        if not self.samples:
            self.stage_evaluate()
        names = list(self.samples)
        iters = self.spec.opt("compare", "bootstrap_iterations", 100)
        pairs = self.spec.opt("compare", "pairs") or [(a, b) for a in names for b in names if a != b] or \
            [(a, a) for a in names]
        lines = ["m1,m2,metric,fraction,threshold,not_significantly_worse"]
        for a, b in pairs:
            if a not in self.samples or b not in self.samples:
                raise ConfigError(f"compare pair ({a}, {b}) names an unknown model set")
            for metric in (accuracy, auc):
                v = compare_model_sets(self.samples[a], self.samples[b], metric, iters, rng_state=self.spec.seed)
                self.emit(write_text(self.out / "reports" / f"compare_{a}_vs_{b}_{metric.__name__}.json",
                                     v.to_json() + "\n"), "compare")
                lines.append(f"{a},{b},{metric.__name__},{v.fraction:.6f},{float(v.threshold):.6f},"
                             f"{v.not_significantly_worse}")
        self.emit(write_text(self.out / "reports" / "compare.csv", "\n".join(lines) + "\n"), "compare")

    def stage_attribute(self):
        self._ensure_models()
        split = self.spec.opt("attribute", "split", "test")
        recs = _records(self.handle(self.spec.dataset), split, self.spec.opt("attribute", "max_patches", 4))
        for name, ms in self.models.items():
            for m in ms:
                d = self.out / "attributions" / model_id(m)
                for r in recs:
                    rmap = attr.lrp(m, r, r.label)
                    if not np.all(np.isfinite(rmap.values)):
                        raise HistoEvalError(f"non-finite relevance for {model_id(m)} on {r.source_key}")
                    stem = r.source_key.replace(":", "_")
                    self.emit(attr.write_grid(d / f"{stem}.bin", rmap.values), "attribute")
                    self.emit(attr.save_heatmap_png(d / f"{stem}_signed.png", rmap.values, signed=True), "attribute")
                    self.emit(attr.save_heatmap_png(d / f"{stem}_pooled.png", attr.pool_relevance(rmap).values,
                                                    signed=False), "attribute")

    def stage_interpret(self):
        self._ensure_models()
        o = self.spec.options.get("interpret", {})
        predictor = load_predictor(o.get("nuclei_predictor", "fallback"))
        bg = dict(threshold=o.get("threshold", 0.85), opening_radius=o.get("opening_radius", 2))
        recs = _records(self.handle(self.spec.dataset), o.get("split", "test"), o.get("max_patches"))
        policy = o.get("target_policy", "positive")
        chosen = [r for r in recs if policy == "all" or r.label == 1]
        for r in chosen[: o.get("export_masks", 4)]:
            self.emit(save_mask_png(self.out / "masks" / f"{r.source_key.replace(':', '_')}.png",
                                    tripartite(r, predictor, **bg)), "interpret")
        reports, attention = [], []
        for name, ms in self.models.items():
            for m in ms:
                rep = interp.aggregate(m, recs, predictor, policy, with_baseline=not reports, **bg)
                reports.append(rep)
                if m.spec.name in ("vit", "vit_c"):
                    attention += interp.attention_overlap(m, recs, predictor, policy, **bg)
        path = write_text(self.out / "reports" / "interpret.csv", interp.reports_to_csv(reports))
        self.reports.append(self.emit(path, "interpret"))
        if attention:
            self.emit(write_text(self.out / "reports" / "attention.csv", interp.reports_to_csv(attention)),
                      "interpret")

    def stage_stain(self):
        o = self.spec.options.get("stain", {})
        if o.get("model"):
            self.stain_model = st.load_stain_model(o["model"])
            return
        cfg = st.StainConfig.from_dict({"seed": self.spec.seed, **(o.get("config") or {})})
        limit = o.get("max_patches")
        a = _records(self.handle(self.spec.dataset), "train", limit)
        b = _records(self.handle(o["other_dataset"]), "train", limit)
        d = self.out / "stain"
        res = st.train_stain_model(a, b, cfg, out_dir=d)
        self.stain_model = res.model
        self.emit(st.save_stain_model(d / "stain_model.zip", res.model), "stain")
        for p in sorted(d.glob("*_epoch*")):
            self.emit(p, "stain")
        loss_lines = ["epoch,lr,adversarial,discriminator,cycle"] + [
            f"{x['epoch']},{x['lr']:.8f},{x['g']:.6f},{x['d']:.6f},{x['cyc']:.6f}" for x in res.losses]
        self.emit(write_text(d / "losses.csv", "\n".join(loss_lines) + "\n"), "stain")
        hists = [h for s in res.snapshots for h in s.histograms.values()]
        src = st.hue_histogram(np.stack([r.image for r in a]), cfg.hist_bins, cfg.saturation_cutoff, self.spec.dataset)
        tgt = st.hue_histogram(np.stack([r.image for r in b]), cfg.hist_bins, cfg.saturation_cutoff, o["other_dataset"])
        self.emit(st.write_histogram_csv(d / "hue_source.csv", src), "stain")
        self.emit(st.write_histogram_csv(d / "hue_target.csv", tgt), "stain")
        self.emit(st.plot_histograms(d / "hue.png", [src, tgt, *hists]), "stain")

    def stage_robustness(self):
        self._ensure_models()
        o = self.spec.options.get("robustness", {})
        other = o["other_dataset"]
        if self.stain_model is None:
            self.stain_model = st.load_stain_model(o["stain_model"]) if o.get("stain_model") else st.IdentityStain()
        a_test = _records(self.handle(self.spec.dataset), "test")
        b_test = _records(self.handle(other), "test")
        if o.get("binarize") == "breakhis":
            b_test, dropped = rob.binarize_breakhis(b_test)
            log.info("binarized %s: %d records excluded", other, dropped)
        fake = st.restain_records(self.stain_model, "a2b", a_test, other)
        fake_root = self.out / f"fake_{other}"
        manifest, digest = st.write_restained(fake_root, fake)
        self.manifest.add_tree(fake_root, "robustness")
        self.emit(write_text(fake_root.parent / f"fake_{other}.sha256", digest + "\n"), "robustness")
        # evaluate on the cached copy so the report reflects exactly the hashed inputs
        cached = register_dataset(DatasetSpec(f"fake_{other}", ("negative", "positive"), None, "binary", str(fake_root)))
        fake_recs = _records(cached, "test")
        key = {r.source_key: r for r in fake_recs}
        fake_recs = InMemoryDataset([key[r.source_key] for r in a_test])
        models = [m for ms in self.models.values() for m in ms]
        reports = rob.run_protocol(models, a_test, b_test, self.stain_model, self.spec.dataset, other,
                                   self.spec.seed, fake_b=fake_recs)
        path = write_text(self.out / "reports" / "robustness.csv", rob.reports_to_csv(reports))
        self.reports.append(self.emit(path, "robustness"))

    def stage_report(self):
        files = self.reports or sorted(p for p in (self.out / "reports").glob("*.csv")
                                       if p.name in ("metrics.csv", "interpret.csv", "robustness.csv"))
        for kind, (csv_text, md) in render_tables(files).items():
            self.emit(write_text(self.out / "tables" / f"{kind}.csv", csv_text), "report")
            self.emit(write_text(self.out / "tables" / f"{kind}.md", md), "report")


def run_spec(path) -> int:
    spec = load_spec(path)
    return Pipeline(spec).run()
