"""Artifact manifests and table rendering (CSV + Markdown, mean ± standard error)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ProtocolError
from .interpret import REPORT_COLUMNS as INTERPRET_COLUMNS
from .robustness import REPORT_COLUMNS as ROBUSTNESS_COLUMNS
from .stats import mean_sem

METRIC_COLUMNS = ("model", "dataset", "metric", "point", "ci_low", "ci_high", "seed")
MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactManifest:
    """Records every output file (relative path -> sha256) and per-stage status."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.files: dict[str, dict] = {}
        self.stages: dict[str, str] = {}

    def add(self, path, stage: str) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.out.resolve()).as_posix()
        self.files[rel] = {"sha256": sha256_file(path), "stage": stage}
        return path

    def add_tree(self, root, stage: str):
        for p in sorted(Path(root).rglob("*")):
            if p.is_file():
                self.add(p, stage)

    def write(self) -> Path:
        path = self.out / MANIFEST_NAME
        doc = {"stages": self.stages, "files": dict(sorted(self.files.items()))}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

    def verify(self) -> list[str]:
        """Relative paths whose current content no longer matches the recorded hash."""
        return [rel for rel, e in self.files.items()
                if not (self.out / rel).is_file() or sha256_file(self.out / rel) != e["sha256"]]

    @classmethod
    def load(cls, out_dir) -> "ArtifactManifest":
        m = cls(out_dir)
        doc = json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
        m.files, m.stages = doc["files"], doc["stages"]
        return m


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def metric_rows_to_csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# --- tables ----------------------------------------------------------------

def format_cell(values: Sequence[float], digits: int = 4, scale: float = 1.0) -> str:
    """``mean ± sem`` over seeds; a single value is printed without the ± part."""
    mean, sem = mean_sem([v * scale for v in values])
    if sem is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {sem:.{digits}f}"


def _read(path) -> tuple[tuple[str, ...], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return tuple(reader.fieldnames or ()), list(reader)


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _ordered(keys: Iterable) -> list:
    seen = []
    for k in keys:
        if k not in seen:
            seen.append(k)
    return seen


def _metrics_table(rows: list[dict]):
    datasets = {r["dataset"] for r in rows}
    if len(datasets) > 1:
        raise ProtocolError(f"metrics table mixes datasets {sorted(datasets)}")
    metrics = _ordered(r["metric"] for r in rows)
    groups = defaultdict(list)
    for r in rows:
        groups[(r["model"], r["metric"])].append(float(r["point"]))
    header = ["model", *metrics]
    body = []
    for model in _ordered(r["model"] for r in rows):
        cells = [model]
        for m in metrics:
            vals = groups.get((model, m))
            if not vals:
                cells.append("")
            elif m == "accuracy":
                cells.append(format_cell(vals, 2, 100.0))
            else:
                cells.append(format_cell(vals, 4))
        body.append(cells)
    return header, body


def _interpret_table(rows: list[dict]):
    header = ["model", "segment", "mass_acc", "pearson_r", "pearson_p", "n", "excluded"]
    groups = defaultdict(list)
    for r in rows:
        groups[(r["model"], r["segment"])].append(r)
    body = []
    for key in _ordered((r["model"], r["segment"]) for r in rows):
        g = groups[key]
        cells = list(key)
        for col in ("mass_acc", "pearson_r", "pearson_p"):
            vals = [float(x[col]) for x in g if x[col] not in ("", "nan")]
            cells.append(format_cell(vals, 3) if vals else "")
        cells += [str(sum(int(x["n"]) for x in g)), str(sum(int(x["excluded"]) for x in g))]
        body.append(cells)
    return header, body


def _robustness_table(rows: list[dict]):
    domains = {r["train_domain"] for r in rows}
    if len(domains) > 1:
        raise ProtocolError(f"robustness table mixes training domains {sorted(domains)}")
    cols = ROBUSTNESS_COLUMNS[3:]
    header = ["model", *cols]
    body = []
    for model in _ordered(r["model"] for r in rows):
        g = [r for r in rows if r["model"] == model]
        body.append([model] + [format_cell([float(x[c]) for x in g], 2 if c.startswith("drop") else 4) for c in cols])
    return header, body


def render_tables(report_files: Sequence) -> dict[str, tuple[str, str]]:
    """One (csv, markdown) table per report kind found among ``report_files``."""
    by_kind: dict[str, list[dict]] = defaultdict(list)
    for path in report_files:
        header, rows = _read(path)
        if header == METRIC_COLUMNS:
            by_kind["metrics"] += rows
        elif header == INTERPRET_COLUMNS:
            by_kind["interpret"] += rows
        elif header == ROBUSTNESS_COLUMNS:
            by_kind["robustness"] += rows
        else:
            raise ProtocolError(f"{path}: unrecognized report header {header}")
    builders = {"metrics": _metrics_table, "interpret": _interpret_table, "robustness": _robustness_table}
    out = {}
    for kind in sorted(by_kind):
        header, body = builders[kind](by_kind[kind])
        out[kind] = (_csv(header, body), _markdown(header, body))
    return out
