from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from histoeval.models import ArchitectureSpec, build_model
from histoeval.models import layers as L
from histoeval.models.base import Classifier
from histoeval.synthetic import toy_records, write_toy_dataset

settings.register_profile("histoeval", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("histoeval")

torch.set_num_threads(1)

# Small but structurally complete variants of every architecture.
TINY = {
    "resnet50": dict(input_size=32, width=8, blocks=(1, 1, 1, 1), neck_dim=16),
    "botnet50": dict(input_size=64, width=8, blocks=(1, 1, 1, 1), heads=2),
    "inception_v3": dict(input_size=80, scale=0.125),
    "vit": dict(input_size=32, width=32, depth=2, heads=4, mlp_dim=64, patch_size=4),
    "vit_c": dict(input_size=32, width=48, depth=1, heads=4, mlp_dim=96, scale=0.125),
}


def tiny_spec(name, **kw):
    return ArchitectureSpec(name, **{**TINY[name], **kw})


def tiny_model(name, seed=0, **kw):
    return build_model(tiny_spec(name, **kw), seed)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = write_toy_dataset(root / "toy_a", n_train=40, n_test=20, n_valid=20, size=32, stain="lab_a", seed=0,
                             dataset_id="toy_a")
    spec_b = write_toy_dataset(root / "toy_b", n_train=40, n_test=20, n_valid=0, size=32, stain="lab_b", seed=1,
                               dataset_id="toy_b")
    return root, spec, spec_b


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_patches():
    return toy_records(24, size=32, seed=7, split="test")


class DenseToy(Classifier):
    """Dense affine+ReLU network on a tiny image, flattened channel-first."""

    def __init__(self, weights, biases=None, side=1):
        super().__init__()
        self.input_size = side
        layers = [L.Flatten()]
        mats = [torch.as_tensor(np.asarray(w, dtype=np.float64)) for w in weights]
        for i, w in enumerate(mats):
            lin = L.Linear(w.shape[1], w.shape[0]).double()
            with torch.no_grad():
                lin.weight.copy_(w)
                lin.bias.copy_(torch.as_tensor(np.asarray(biases[i], dtype=np.float64)) if biases is not None
                               else torch.zeros(w.shape[0], dtype=torch.float64))
            if i < len(mats) - 1:
                layers += [lin, L.ReLU()]
            else:
                self.head = lin
        self.body = L.Sequential(*layers)
        self.feature_dim = mats[-1].shape[1]

    def features(self, x):
        return self.body(x)

    def relprop_features(self, R, eps=L.DEFAULT_EPS):
        return self.body.relprop(R, eps)


def random_dense(rng, sizes, side=1, bias=True):
    """Random weights for a dense toy whose input is a side x side x 3 patch."""
    dims = [3 * side * side, *sizes]
    ws = [rng.standard_normal((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    bs = [rng.standard_normal(d) * 0.1 for d in dims[1:]] if bias else None
    return ws, bs


def write_run_spec(path, spec_a, spec_b, out="out", stages=None, archs=("resnet50", "vit"), **extra):
    """A small end-to-end run spec over the two toy datasets."""
    import yaml

    doc = {
        "out": str(out),
        "seed": 0,
        "dataset": spec_a.dataset_id,
        "datasets": {s.dataset_id: {"root": s.root} for s in (spec_a, spec_b)},
        "architectures": [tiny_spec(a).to_dict() for a in archs],
        "train": {"epochs": 2, "batch_size": 16, "lr": 1e-3, "augmentation": "none"},
        "k": 2,
        "stages": list(stages or ("train", "evaluate", "compare", "attribute", "interpret", "stain", "robustness",
                                  "report")),
        "evaluate": {"bootstrap_iterations": 20},
        "compare": {"bootstrap_iterations": 20},
        "attribute": {"max_patches": 2},
        "interpret": {"max_patches": 8, "export_masks": 2},
        "stain": {"other_dataset": spec_b.dataset_id,
                  "config": {"epochs": 2, "resize": 32, "widths": [8, 16], "disc_widths": [8, 8, 8],
                             "batch_size": 8, "snapshot_every": 1}},
        "robustness": {"other_dataset": spec_b.dataset_id},
    }
    doc.update(extra)
    path = Path(path)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


# One line per acceptance criterion, echoed in the terminal summary so it survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
