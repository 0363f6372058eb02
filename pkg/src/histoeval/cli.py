"""Command-line entry point: ``histoeval <subcommand> ...``.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigError, HistoEvalError

log = logging.getLogger("histoeval")


def _arch_spec(args):
    from .models import ArchitectureSpec

    opts = json.loads(args.arch_opts) if args.arch_opts else {}
    base = dict(n_classes=args.n_classes, input_size=args.input_size)
    if args.arch2:
        opts2 = json.loads(args.arch2_opts) if args.arch2_opts else {}
        return ArchitectureSpec("hybrid", sub_specs=(ArchitectureSpec(args.arch, **base, **opts),
                                                     ArchitectureSpec(args.arch2, **base, **opts2)), **base)
    return ArchitectureSpec(args.arch, **base, **opts)


def _dataset(args, ds_id=None, root=None):
    from .data import CATALOG, DatasetSpec, catalog_spec, register_dataset

    ds_id = ds_id or args.dataset
    root = root or args.data_root
    if ds_id in CATALOG:
        spec = catalog_spec(ds_id, root)
        spec = DatasetSpec(spec.dataset_id, spec.class_names, None, spec.task, spec.root)
    else:
        spec = DatasetSpec(ds_id, tuple(args.class_names.split(",")), None, "binary", root)
    if spec.root is not None and not (Path(spec.root) / "manifest.csv").is_file():
        raise ConfigError(f"dataset {ds_id!r} not found at {spec.root}")
    return register_dataset(spec)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records(handle, split, limit=None):
    from .data import load_split

    view = load_split(handle, split)
    n = len(view) if limit is None else min(limit, len(view))
    return [view[i] for i in range(n)]


def _finish(manifest):
    manifest.stages.setdefault("cli", "ok")
    manifest.write()
    return 0


# --- subcommands -----------------------------------------------------------

def cmd_train(args):
    from .models import save_checkpoint
    from .pipeline import model_id
    from .reporting import ArtifactManifest
    from .training import TrainConfig, run_multiseed, write_history

    out = _out(args)
    manifest = ArtifactManifest(out)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      checkpoint_policy=args.checkpoint_policy)
    mset = run_multiseed(_arch_spec(args), _dataset(args), cfg, args.runs)
    for m, hist in zip(mset.models, mset.histories):
        manifest.add(save_checkpoint(out / f"{model_id(m)}.zip", m, m.meta.get("epoch"),
                                     m.meta.get("val_auc_history"), {"dataset": args.dataset}), "train")
        manifest.add(write_history(out / f"{model_id(m)}_history.csv", hist), "train")
    return _finish(manifest)


def cmd_evaluate(args):
    from .models import load_checkpoint
    from .pipeline import model_id, write_scores
    from .reporting import ArtifactManifest, metric_rows_to_csv, write_text
    from .stats import accuracy, auc, bootstrap_ci
    from .training import predict_scores

    out = _out(args)
    manifest = ArtifactManifest(out)
    recs = _records(_dataset(args), args.split)
    rows = []
    for path in args.checkpoint:
        m, _ = load_checkpoint(path)
        sample = predict_scores(m, recs)
        manifest.add(write_scores(out / f"scores_{model_id(m)}.csv", sample), "evaluate")
        for metric in (accuracy, auc):
            lo, hi = bootstrap_ci(metric, sample, args.iterations, rng_state=[args.seed, m.seed])
            rows.append([m.spec.name, args.dataset, metric.__name__, metric(sample), lo, hi, m.seed])
    manifest.add(write_text(out / "metrics.csv", metric_rows_to_csv(rows)), "evaluate")
    return _finish(manifest)


def cmd_compare(args):
    from .pipeline import read_scores
    from .reporting import ArtifactManifest, write_text
    from .stats import accuracy, auc, compare_model_sets

    out = _out(args)
    manifest = ArtifactManifest(out)
    m1 = [read_scores(p) for p in args.set1]
    m2 = [read_scores(p) for p in args.set2]
    metric = {"auc": auc, "accuracy": accuracy}[args.metric]
    v = compare_model_sets(m1, m2, metric, args.iterations, rng_state=args.seed)
    manifest.add(write_text(out / f"compare_{args.metric}.json", v.to_json() + "\n"), "compare")
    print(f"not_significantly_worse={v.not_significantly_worse} fraction={v.fraction:.4f} "
          f"threshold={float(v.threshold):.4f}")
    return _finish(manifest)


def cmd_attribute(args):
    from . import attribution as attr
    from .models import load_checkpoint
    from .reporting import ArtifactManifest

    out = _out(args)
    manifest = ArtifactManifest(out)
    m, _ = load_checkpoint(args.checkpoint)
    for r in _records(_dataset(args), args.split, args.max_patches):
        target = r.label if args.class_target == "label" else int(args.class_target)
        rmap = attr.lrp(m, r, target)
        stem = r.source_key.replace(":", "_")
        manifest.add(attr.write_grid(out / f"{stem}.bin", rmap.values), "attribute")
        manifest.add(attr.save_heatmap_png(out / f"{stem}_signed.png", rmap.values, signed=True), "attribute")
        manifest.add(attr.save_heatmap_png(out / f"{stem}_pooled.png", attr.pool_relevance(rmap).values,
                                           signed=False), "attribute")
    return _finish(manifest)


def cmd_interpret(args):
    from . import interpret as interp
    from .models import load_checkpoint
    from .reporting import ArtifactManifest, write_text
    from .segmentation import load_predictor

    out = _out(args)
    manifest = ArtifactManifest(out)
    predictor = load_predictor(args.nuclei_predictor)
    recs = _records(_dataset(args), args.split, args.max_patches)
    reports, attention = [], []
    for path in args.checkpoint:
        m, _ = load_checkpoint(path)
        reports.append(interp.aggregate(m, recs, predictor, args.target_policy, args.threshold,
                                        args.opening_radius, with_baseline=not reports))
        if m.spec.name in ("vit", "vit_c"):
            attention += interp.attention_overlap(m, recs, predictor, args.target_policy, args.threshold,
                                                  args.opening_radius)
    manifest.add(write_text(out / "interpret.csv", interp.reports_to_csv(reports)), "interpret")
    if attention:
        manifest.add(write_text(out / "attention.csv", interp.reports_to_csv(attention)), "interpret")
    return _finish(manifest)


def cmd_stain_train(args):
    from . import stain as st
    from .reporting import ArtifactManifest

    out = _out(args)
    manifest = ArtifactManifest(out)
    cfg = st.StainConfig(epochs=args.epochs, resize=args.resize, batch_size=args.batch_size, seed=args.seed)
    a = _records(_dataset(args, args.domain_a, args.domain_a_root), "train", args.max_patches)
    b = _records(_dataset(args, args.domain_b, args.domain_b_root), "train", args.max_patches)
    res = st.train_stain_model(a, b, cfg, out_dir=out)
    for p in sorted(out.glob("*_epoch*")):
        manifest.add(p, "stain-train")
    manifest.add(st.save_stain_model(out / "stain_model.zip", res.model), "stain-train")
    return _finish(manifest)


def cmd_restain(args):
    from . import stain as st
    from .data import DatasetSpec, register_dataset
    from .reporting import ArtifactManifest, write_text

    out = _out(args)
    manifest = ArtifactManifest(out)
    model = st.load_stain_model(args.stain_model)
    handle = register_dataset(DatasetSpec(args.target, tuple(args.class_names.split(",")), None, "binary",
                                          args.input))
    recs = [r for r in handle]
    fake = st.restain_records(model, args.direction, recs, args.target)
    root = out / f"fake_{args.target}"
    _, digest = st.write_restained(root, fake)
    manifest.add_tree(root, "restain")
    manifest.add(write_text(out / f"fake_{args.target}.sha256", digest + "\n"), "restain")
    return _finish(manifest)


def cmd_robustness(args):
    from . import robustness as rob
    from . import stain as st
    from .models import load_checkpoint
    from .reporting import ArtifactManifest, write_text

    out = _out(args)
    manifest = ArtifactManifest(out)
    models = [load_checkpoint(p)[0] for p in args.checkpoint]
    stain_model = st.load_stain_model(args.stain_model) if args.stain_model != "identity" else st.IdentityStain()
    a_test = _records(_dataset(args, args.train_domain, args.train_root), "test")
    b_test = _records(_dataset(args, args.other_domain, args.other_root), "test")
    if args.other_domain == "breakhis":
        b_test, _ = rob.binarize_breakhis(b_test)
    reports = rob.run_protocol(models, a_test, b_test, stain_model, args.train_domain, args.other_domain, args.seed)
    manifest.add(write_text(out / "robustness.csv", rob.reports_to_csv(reports)), "robustness")
    return _finish(manifest)


def cmd_report(args):
    from .reporting import ArtifactManifest, render_tables, write_text

    out = _out(args)
    manifest = ArtifactManifest(out)
    for kind, (csv_text, md) in render_tables(args.reports).items():
        manifest.add(write_text(out / f"{kind}.csv", csv_text), "report")
        manifest.add(write_text(out / f"{kind}.md", md), "report")
        print(md)
    return _finish(manifest)


def cmd_run(args):
    from .pipeline import run_spec

    return run_spec(args.spec)


# --- parser ----------------------------------------------------------------

def _add_dataset(p, required=True):
    p.add_argument("--dataset", required=required, help="dataset id (catalog name or custom)")
    p.add_argument("--data-root", help="dataset root holding manifest.csv")
    p.add_argument("--class-names", default="negative,positive", help="comma-separated, for custom datasets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoeval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a YAML run spec")
    p.add_argument("spec")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train k seeds of one architecture")
    p.add_argument("--arch", required=True)
    p.add_argument("--arch2", help="second branch; builds a hybrid")
    p.add_argument("--arch-opts", help="JSON dict of extra ArchitectureSpec fields")
    p.add_argument("--arch2-opts")
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--input-size", type=int, default=96)
    _add_dataset(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--checkpoint-policy", default="best_val_auc", choices=("best_val_auc", "last_epoch"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy and AUC with bootstrap CIs")
    p.add_argument("--checkpoint", nargs="+", required=True)
    _add_dataset(p)
    p.add_argument("--split", default="test")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="k x k comparison of two model sets from score files")
    p.add_argument("--set1", nargs="+", required=True)
    p.add_argument("--set2", nargs="+", required=True)
    p.add_argument("--metric", default="auc", choices=("auc", "accuracy"))
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("attribute", help="LRP heatmaps")
    p.add_argument("--checkpoint", required=True)
    _add_dataset(p)
    p.add_argument("--split", default="test")
    p.add_argument("--class-target", default="label", help="'label' or a class index")
    p.add_argument("--max-patches", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("interpret", help="relevance / attention overlap with segment masks")
    p.add_argument("--checkpoint", nargs="+", required=True)
    _add_dataset(p)
    p.add_argument("--split", default="test")
    p.add_argument("--segments", dest="nuclei_predictor", default="fallback",
                   help="nuclei predictor: fallback | torchscript:PATH | module:factory")
    p.add_argument("--target-policy", default="positive", choices=("positive", "all"))
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--opening-radius", type=int, default=2)
    p.add_argument("--max-patches", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("stain-train", help="train the unpaired stain-transfer model")
    p.add_argument("--domain-a", required=True)
    p.add_argument("--domain-a-root")
    p.add_argument("--domain-b", required=True)
    p.add_argument("--domain-b-root")
    p.add_argument("--class-names", default="negative,positive")
    p.add_argument("--data-root")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--resize", type=int, default=96)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-patches", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stain_train)

    p = sub.add_parser("restain", help="restain a dataset into a fake_<target> tree")
    p.add_argument("--stain-model", required=True)
    p.add_argument("--direction", default="a2b", choices=("a2b", "b2a"))
    p.add_argument("--in", dest="input", required=True, help="dataset root with manifest.csv")
    p.add_argument("--target", required=True, help="target domain name")
    p.add_argument("--class-names", default="negative,positive")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restain)

    p = sub.add_parser("robustness", help="three-way stain robustness protocol")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--train-domain", required=True)
    p.add_argument("--train-root")
    p.add_argument("--other-domain", required=True)
    p.add_argument("--other-root")
    p.add_argument("--stain-model", default="identity")
    p.add_argument("--class-names", default="negative,positive")
    p.add_argument("--data-root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("report", help="render report CSVs as tables")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        line = getattr(exc, "line", None)
        where = f"{args.spec}:{line}: " if getattr(args, "spec", None) and line else ""
        print(f"histoeval: config error: {where}{exc}", file=sys.stderr)
        return 2
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"histoeval: config error: {exc}", file=sys.stderr)
        return 2
    except HistoEvalError as exc:
        print(f"histoeval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
