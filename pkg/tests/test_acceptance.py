"""The eleven acceptance criteria at their stated tolerances and time budgets.

Each test prints one ``PASS``/``FAIL`` line; the lines are repeated in the terminal summary.
"""
import csv
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, DenseToy, random_dense, tiny_model, write_run_spec
from histoeval import attribution as attr
from histoeval.cli import main
from histoeval.interpret import mass_accuracy, random_baseline
from histoeval.models import ArchitectureSpec, build_model
from histoeval.oracles import oracle_auc, oracle_lrp_toy
from histoeval.reporting import MANIFEST_NAME, ArtifactManifest
from histoeval.robustness import relative_drop, run_protocol
from histoeval.segmentation import SEGMENTS, HematoxylinPredictor, tripartite
from histoeval.stain import (IdentityStain, StainConfig, build_stain_model, cycle_error, hue_histogram,
                             train_stain_model, transform)
from histoeval.stats import ScoreSample, auc, compare_model_sets, threshold
from histoeval.synthetic import tinted_noise, toy_records, write_toy_dataset


def verdict(n: int, checks: dict, elapsed: float, budget: float, detail: str = ""):
    """Print and record the criterion line, then fail the test if any check or the time budget failed."""
    checks = {**checks, f"runtime {elapsed:.1f}s < {budget:g}s": elapsed < budget}
    failed = [k for k, ok in checks.items() if not ok]
    line = f"{'PASS' if not failed else 'FAIL'} criterion {n}: {detail}" + \
        (f" [failed: {'; '.join(failed)}]" if failed else f" ({elapsed:.1f}s)")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert not failed, line


ANCHORS = {"resnet50": 24.6, "botnet50": 18.8, "inception_v3": 24.3, "vit": 11.4, "vit_c": 96.1}


def test_criterion_01_parameter_anchors():
    t = time.perf_counter()
    counts = {name: build_model(ArchitectureSpec(name), 0).n_params / 1e6 for name in ANCHORS}
    rel = {n: abs(c - ANCHORS[n]) / ANCHORS[n] for n, c in counts.items()}
    verdict(1, {f"{n} within 2%": r <= 0.02 for n, r in rel.items()}, time.perf_counter() - t, 60,
            ", ".join(f"{n} {counts[n]:.2f}M ({100 * rel[n]:.2f}%)" for n in ANCHORS))


def test_criterion_02_auc_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, done = 0.0, 0
    while done < 1000:
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        # coarse rounding injects ties
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        got = auc(ScoreSample(np.stack([1 - s, s], 1), labels))
        worst = max(worst, abs(got - oracle_auc(s.tolist(), labels.tolist())))
        done += 1
    verdict(2, {"max |diff| <= 1e-12": worst <= 1e-12}, time.perf_counter() - t, 60,
            f"1000 instances, max |auc - oracle| = {worst:.2e}")


def test_criterion_03_bootstrap_self_consistency():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    ok = 0
    for i in range(50):
        k = (1, 3, 5)[i % 3]
        n = int(rng.integers(20, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        sets = []
        for _ in range(k):
            p = np.clip(labels * rng.uniform(0, 0.6) + rng.random(n) * 0.6, 0, 1)
            sets.append(ScoreSample(np.stack([1 - p, p], 1), labels))
        ok += compare_model_sets(sets, sets, auc, 100, rng_state=i).not_significantly_worse
    thr = threshold(5)
    verdict(3, {"50/50 self-comparisons": ok == 50, "threshold(5) == 15/25": thr == Fraction(15, 25)},
            time.perf_counter() - t, 60, f"{ok}/50 not significantly worse, threshold(5) = {thr}")


def test_criterion_04_lrp_conservation():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_cons, worst_oracle = 0.0, 0.0
    for i in range(100):
        sizes = tuple(int(s) for s in rng.integers(2, 9, int(rng.integers(1, 4)))) + (int(rng.integers(2, 5)),)
        side = int(rng.integers(1, 3))
        img = rng.random((side, side, 3))
        target = int(rng.integers(0, sizes[-1]))
        # bias-free: with eps = 0 every layer then passes its full relevance down
        ws, _ = random_dense(rng, sizes, side=side, bias=False)
        m = DenseToy(ws, side=side)
        with torch.no_grad():
            logit = float(m(torch.from_numpy(img.transpose(2, 0, 1)[None].copy()))[0, target])
        R = attr.lrp(m, img, target, eps=0.0).values
        worst_cons = max(worst_cons, abs(R.sum() - logit) / max(abs(logit), 1e-12))
        # with biases against the oracle
        ws, bs = random_dense(rng, sizes, side=side)
        m = DenseToy(ws, bs, side=side)
        got = attr.lrp(m, img, target, eps=0.0).values.transpose(2, 0, 1).ravel()
        ref = oracle_lrp_toy([w.tolist() for w in ws], img.transpose(2, 0, 1).ravel().tolist(), target,
                             [b.tolist() for b in bs], eps=0.0)
        worst_oracle = max(worst_oracle, float(np.max(np.abs(got - ref))))
    verdict(4, {"conservation rel err <= 1e-6": worst_cons <= 1e-6, "oracle agreement <= 1e-6": worst_oracle <= 1e-6},
            time.perf_counter() - t, 60,
            f"100 nets, max conservation rel err {worst_cons:.1e}, max |lrp - oracle| {worst_oracle:.1e}")


def test_criterion_05_pooling():
    t = time.perf_counter()
    triples = {(-3, 1, 2): 0.0, (3, -1, -2): 0.0, (-1, -1, 5): 1.0, (2, 2, -7): 0.0, (-6, 0, 9): 1.0}
    examples = all(attr.pool_relevance(np.array(v, float).reshape(1, 1, 3)).values[0, 0] == pytest.approx(e)
                   for v, e in triples.items())
    # clamp-then-mean would give a different answer on the first triple
    order = np.maximum(np.array([-3.0, 1, 2]), 0).mean() != attr.pool_relevance(
        np.array([-3.0, 1, 2]).reshape(1, 1, 3)).values[0, 0]
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        v, c = rng.standard_normal((8, 8, 3)), float(rng.uniform(1e-3, 1e3))
        a, b = attr.pool_relevance(c * v).values, c * attr.pool_relevance(v).values
        worst = max(worst, float(np.max(np.abs(a - b)) / c))
    verdict(5, {"adversarial triples": examples, "mean before clamp": order, "homogeneity": worst <= 1e-12},
            time.perf_counter() - t, 10, f"(-3,1,2) -> 0, homogeneity max rel err {worst:.1e} over 100 scalings")


def test_criterion_06_tripartite_partition():
    t = time.perf_counter()
    pred = HematoxylinPredictor()
    recs = toy_records(1000, size=32, seed=6, split="test")
    model = tiny_model("resnet50", 6)
    worst, used = 0.0, 0
    for i in range(0, len(recs), 100):
        chunk = recs[i:i + 100]
        R = attr.lrp_batch(model, np.stack([r.image for r in chunk]), [r.label for r in chunk])
        for rec, rmap in zip(chunk, R):
            pooled = attr.pool_relevance(rmap).values
            if pooled.sum() <= 0:
                continue
            mask = tripartite(rec, pred)
            worst = max(worst, abs(sum(mass_accuracy(pooled, mask.mask(s)) for s in SEGMENTS) - 1.0))
            used += 1
    base = random_baseline(recs, pred)
    rng = np.random.default_rng(60)
    mc = {s: 0.0 for s in SEGMENTS}
    for rec in recs:
        mask = tripartite(rec, pred)
        maps = rng.random((1000, 32 * 32))
        tot = maps.sum(1)
        for s in SEGMENTS:
            mc[s] += float(np.mean(maps[:, mask.mask(s).ravel()].sum(1) / tot)) / len(recs)
    gap = max(abs(mc[s] - base[s]) for s in SEGMENTS)
    verdict(6, {"partition within 1e-6": worst <= 1e-6 and used > 900, "baseline within 0.01": gap <= 0.01},
            time.perf_counter() - t, 120,
            f"{used} maps, max |sum - 1| {worst:.1e}; baseline vs Monte-Carlo max gap {gap:.4f}")


def test_criterion_07_attention_contract():
    t = time.perf_counter()
    m = build_model(ArchitectureSpec("vit"), 0)
    img = np.random.default_rng(7).random((96, 96, 3)).astype(np.float32)
    maps = attr.attention_per_head(m, img)
    sums = maps.maps.reshape(maps.heads, -1).sum(1)
    const = attr.upscale(np.full((16, 16), 0.25), 96)
    verdict(7, {"12 heads of 16x16": maps.maps.shape == (12, 16, 16),
                "sums 1 +- 1e-5": bool(np.all(np.abs(sums - 1) <= 1e-5)),
                "constant upscale": bool(np.all(const == 0.25))},
            time.perf_counter() - t, 60,
            f"maps {maps.maps.shape}, max |sum - 1| {np.max(np.abs(sums - 1)):.1e}")


def test_criterion_08_stain_contracts():
    t = time.perf_counter()
    model = build_stain_model(StainConfig())
    gen = torch.Generator().manual_seed(8)
    in_range, shapes = True, True
    with torch.no_grad():
        for direction in ("a2b", "b2a"):
            g = model.generator(direction).eval()
            for _ in range(5):
                x = torch.rand(10, 3, 96, 96, generator=gen) * 3 - 1
                y = g(x)
                shapes &= y.shape == x.shape
                in_range &= bool(y.min() >= 0 and y.max() <= 1)
        d_ok = True
        for d in (model.d_a, model.d_b):
            for mode in (True, False):
                d.train(mode)
                out = d(torch.rand(6, 3, 96, 96, generator=gen))
                d_ok &= out.shape == (6,) and bool(((out > 0) & (out < 1)).all())
            d.eval()
    e = StainConfig().echo()
    echo_ok = (e["lr"] == 0.0002 and tuple(e["betas"]) == (0.5, 0.999) and e["adversarial_loss"] == "mse"
               and e["resize"] == 96 and e["flip_p"] == 0.5 and e["decay_start_fraction"] == 0.5)
    verdict(8, {"generator range": in_range, "generator shape": shapes, "discriminator scalars": d_ok,
                "config echo": echo_ok}, time.perf_counter() - t, 120,
            "100 random inputs in [0, 1], per-image discriminator scalars in (0, 1), recipe echo matches")


def test_criterion_09_toy_cyclegan():
    t = time.perf_counter()
    cfg = StainConfig(epochs=20, resize=32, batch_size=8, snapshot_every=10)
    a, b = tinted_noise(200, 32, "red", 0), tinted_noise(200, 32, "blue", 1)
    ha, hb = tinted_noise(50, 32, "red", 2), tinted_noise(50, 32, "blue", 3)
    ta = torch.from_numpy(np.ascontiguousarray(ha.transpose(0, 3, 1, 2)))
    tb = torch.from_numpy(np.ascontiguousarray(hb.transpose(0, 3, 1, 2)))
    e0 = cycle_error(build_stain_model(cfg), ta, tb)
    res = train_stain_model(a, b, cfg, held_out_a=ha, held_out_b=hb)
    e1 = cycle_error(res.model, ta, tb)
    drop = 1 - e1 / e0
    target_mode = hue_histogram(hb).mode_bin()
    fake_mode = hue_histogram(transform(res.model, "a2b", ha)).mode_bin()
    verdict(9, {"cycle error drop >= 50%": drop >= 0.5, "fake B mode in target mode bin": fake_mode == target_mode},
            time.perf_counter() - t, 900,
            f"cycle L1 {e0:.4f} -> {e1:.4f} ({100 * drop:.1f}% lower), mode bin fake B {fake_mode} vs B {target_mode}")


def test_criterion_10_robustness_identities():
    t = time.perf_counter()
    recs = toy_records(40, size=32, seed=10, split="test")
    reports = run_protocol([tiny_model("resnet50"), tiny_model("vit", 1)], recs, recs, IdentityStain())
    equal = all(r.in_stain_in_dist == r.cross_stain_cross_dist == r.cross_stain_in_dist for r in reports)
    d1, d2 = relative_drop(0.5931, 0.9255), relative_drop(0.8638, 0.9255)
    verdict(10, {"three AUCs coincide": equal, "-35.91 +- 0.01": abs(d1 + 35.91) <= 0.01,
                 "-6.66 +- 0.01": abs(d2 + 6.66) <= 0.01}, time.perf_counter() - t, 10,
            f"identity AUCs equal; drops {d1:.4f}% and {d2:.4f}%")


def _in_range(path, cols, lo, hi):
    # blank cells are segments excluded as degenerate
    vals = [float(r[c]) for r in csv.DictReader(open(path)) for c in cols if r[c] != ""]
    return len(vals) > 0 and all(lo <= v <= hi for v in vals if not math.isnan(v))


def test_criterion_11_end_to_end(tmp_path):
    t = time.perf_counter()
    a = write_toy_dataset(tmp_path / "mhist", n_train=150, n_test=50, n_valid=0, size=32, stain="lab_a", seed=11,
                          dataset_id="mhist")
    b = write_toy_dataset(tmp_path / "lab_b", n_train=60, n_test=40, n_valid=0, size=32, stain="lab_b", seed=12,
                          dataset_id="lab_b")
    outs, codes = [], []
    for run in ("run1", "run2"):
        spec = write_run_spec(tmp_path / f"{run}.yaml", a, b, out=run,
                              train={"epochs": 3, "batch_size": 16, "lr": 1e-3, "checkpoint_policy": "last_epoch"},
                              stain={"other_dataset": "lab_b",
                                     "config": {"epochs": 5, "resize": 32, "widths": [8, 16],
                                                "disc_widths": [8, 8, 8], "batch_size": 8, "snapshot_every": 5}})
        codes.append(main(["run", str(spec)]))
        outs.append(tmp_path / run)
    docs = [json.loads((o / MANIFEST_NAME).read_text()) for o in outs]
    rep = outs[0] / "reports"
    wanted = ["reports/metrics.csv", "reports/compare.csv", "reports/interpret.csv", "reports/attention.csv",
              "reports/robustness.csv", "tables/metrics.csv", "tables/interpret.csv", "tables/robustness.csv"]
    ranges = (_in_range(rep / "metrics.csv", ("point", "ci_low", "ci_high"), 0, 1)
              and _in_range(rep / "interpret.csv", ("mass_acc", "pearson_p"), 0, 1)
              and _in_range(rep / "interpret.csv", ("pearson_r",), -1, 1)
              and _in_range(rep / "robustness.csv", ("in_stain_in_dist", "cross_stain_cross_dist",
                                                     "cross_stain_in_dist"), 0, 1))
    same = docs[0]["files"] == docs[1]["files"] and all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in docs[0]["files"])
    verdict(11, {"exit code 0": codes == [0, 0], "every report in manifest": all(w in docs[0]["files"] for w in wanted),
                 "manifest verifies": ArtifactManifest.load(outs[0]).verify() == [],
                 "metric values in range": ranges, "byte-identical reruns": same},
            time.perf_counter() - t, 1800,
            f"{len(docs[0]['files'])} files, all stages {sorted(set(docs[0]['stages'].values()))}, reruns identical")
