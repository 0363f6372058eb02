"""Classifier training with validation-AUC checkpoint selection and k-seed runs."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import (NO_AUGMENTATION, AugmentationPolicy, DatasetHandle, PatchRecord, augment,
                   load_split)
from .errors import ConfigError, DegenerateLabelsError, EmptyInputError, SplitUnavailableError
from .models.zoo import ArchitectureSpec, ModelHandle, build_model, fuse_hybrid, to_batch
from .stats import ScoreSample, accuracy, auc

log = logging.getLogger(__name__)

POLICIES = ("best_val_auc", "last_epoch")
HISTORY_COLUMNS = ("epoch", "train_loss", "val_auc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    checkpoint_policy: str = "best_val_auc"
    aux_weight: float = 0.4
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.checkpoint_policy not in POLICIES:
            raise ConfigError(f"checkpoint_policy must be one of {POLICIES}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augmentation"] = dataclasses.asdict(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augmentation", None)
        if aug is False or aug == "none":
            d["augmentation"] = NO_AUGMENTATION
        elif isinstance(aug, Mapping):
            d["augmentation"] = AugmentationPolicy(**aug)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float  # nan when no validation split is used


@dataclass
class TrainedModelSet:
    models: list[ModelHandle]
    histories: list[list[EpochRecord]]
    seeds: list[int]
    config: TrainConfig

    def __len__(self):
        return len(self.models)


def select_epoch(history: Sequence[EpochRecord], policy: str) -> int:
    """Index of the selected epoch: the earliest maximum of val AUC, or the last epoch."""
    if not history:
        raise EmptyInputError("empty training history")
    if policy == "last_epoch":
        return len(history) - 1
    vals = np.array([h.val_auc for h in history], dtype=np.float64)
    if np.all(np.isnan(vals)):
        return len(history) - 1
    return int(np.nanargmax(vals))


def _splits(dataset, policy: str) -> tuple[Sequence[PatchRecord], Sequence[PatchRecord] | None]:
    if isinstance(dataset, DatasetHandle):
        train = load_split(dataset, "train")
        if policy != "best_val_auc":
            return train, None
        try:
            return train, load_split(dataset, "valid")
        except SplitUnavailableError:
            raise ConfigError(f"dataset {dataset.spec.dataset_id!r} has no validation split; "
                              "use checkpoint_policy=last_epoch") from None
    train = dataset["train"]
    valid = dataset.get("valid") if policy == "best_val_auc" else None
    if policy == "best_val_auc" and not valid:
        raise ConfigError("checkpoint_policy=best_val_auc needs a nonempty validation split")
    return train, valid


def _aux_outputs(module) -> list[torch.Tensor]:
    aux = getattr(module, "aux_logits", None)
    if aux is None:
        return []
    if isinstance(aux, torch.Tensor):
        return [aux]
    return [a for a in aux if a is not None]


def predict_scores(model: ModelHandle, records: Sequence[PatchRecord], batch_size: int = 128) -> ScoreSample:
    """Softmax class probabilities in inference mode."""
    if len(records) == 0:
        raise EmptyInputError("no records to score")
    out = []
    for start in range(0, len(records), batch_size):
        part = [records[i] for i in range(start, min(start + batch_size, len(records)))]
        logits = model.forward(np.stack([r.image for r in part]))
        out.append(torch.softmax(logits.double(), dim=1).numpy())
    labels = np.array([records[i].label for i in range(len(records))], dtype=np.int64)
    return ScoreSample(np.concatenate(out), labels)


def evaluate(model: ModelHandle, records: Sequence[PatchRecord], batch_size: int = 128) -> dict[str, float]:
    sample = predict_scores(model, records, batch_size)
    res = {"accuracy": accuracy(sample)}
    try:
        res["auc"] = auc(sample)
    except DegenerateLabelsError:
        res["auc"] = float("nan")
    return res


def train(model: ModelHandle, dataset, config: TrainConfig) -> tuple[ModelHandle, list[EpochRecord]]:
    """Train in place from the model's current weights and return the selected checkpoint.

    ``dataset`` is a registered DatasetHandle or a mapping with ``train`` (and
    ``valid``) record sequences.
    """
    train_recs, valid_recs = _splits(dataset, config.checkpoint_policy)
    if len(train_recs) == 0:
        raise EmptyInputError("empty training split")
    train_recs = [train_recs[i] for i in range(len(train_recs))]
    valid_recs = None if valid_recs is None else [valid_recs[i] for i in range(len(valid_recs))]
    module = model.module
    size = model.input_size
    history: list[EpochRecord] = []
    best_state, best_auc = None, -math.inf
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        opt = torch.optim.Adam(module.parameters(), lr=config.lr)
        for epoch in range(1, config.epochs + 1):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_recs))
            module.train()
            total, count = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2 and len(order) > 1:
                    continue  # a lone sample breaks batch-norm statistics
                recs = [augment(train_recs[i], config.augmentation, rng) for i in idx]
                x = to_batch(np.stack([r.image for r in recs]), size)
                y = torch.tensor([r.label for r in recs], dtype=torch.long)
                logits = module(x)
                loss = F.cross_entropy(logits, y)
                for aux in _aux_outputs(module):
                    loss = loss + config.aux_weight * F.cross_entropy(aux, y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            val = float("nan")
            if valid_recs is not None:
                val = evaluate(model, valid_recs, config.eval_batch_size)["auc"]
            history.append(EpochRecord(epoch, total / max(count, 1), val))
            log.info("epoch %d loss %.4f val_auc %.4f", epoch, history[-1].train_loss, val)
            if config.checkpoint_policy == "best_val_auc" and val > best_auc:
                best_auc = val
                best_state = copy.deepcopy(module.state_dict())
    chosen = select_epoch(history, config.checkpoint_policy)
    if config.checkpoint_policy == "best_val_auc" and best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    model.meta.update(epoch=history[chosen].epoch, val_auc_history=[h.val_auc for h in history],
                      train_config=config.to_dict())
    return model, history


def _fresh_model(spec: ArchitectureSpec, seed: int) -> ModelHandle:
    if spec.name == "hybrid":
        s1, s2 = spec.sub_specs
        return fuse_hybrid(build_model(s1, seed), build_model(s2, seed + 10_000), spec.n_classes, seed)
    return build_model(spec, seed)


def run_multiseed(spec: ArchitectureSpec, dataset, config: TrainConfig, k: int = 5) -> TrainedModelSet:
    if k < 1:
        raise ConfigError("k must be >= 1")
    models, histories, seeds = [], [], []
    for i in range(k):
        seed = config.seed + i
        cfg = dataclasses.replace(config, seed=seed)
        m, h = train(_fresh_model(spec, seed), dataset, cfg)
        models.append(m)
        histories.append(h)
        seeds.append(seed)
    return TrainedModelSet(models, histories, seeds, config)


def write_history(path, history: Sequence[EpochRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.epoch, f"{h.train_loss:.6f}", "nan" if math.isnan(h.val_auc) else f"{h.val_auc:.6f}"])
    return path
