"""Unpaired stain transfer (two generators, two discriminators) and hue-histogram monitoring."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.color import rgb2hsv

from .data import (InMemoryDataset, ManifestRow, PatchRecord, save_image,
                   write_manifest)
from .errors import ConfigError, EmptyInputError, ShapeError

log = logging.getLogger(__name__)

DIRECTIONS = ("a2b", "b2a")
HIST_COLUMNS = ("bin_low", "bin_high", "mass")


@dataclass(frozen=True)
class StainConfig:
    epochs: int = 150
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    adversarial_loss: str = "mse"
    resize: int = 96
    flip_p: float = 0.5
    decay_start_fraction: float = 0.5
    lambda_cyc: float = 10.0
    batch_size: int = 4
    widths: tuple[int, ...] = (32, 64, 128, 256)
    disc_widths: tuple[int, int, int] = (64, 128, 256)
    snapshot_every: int = 10
    hist_bins: int = 64
    saturation_cutoff: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.adversarial_loss != "mse":
            raise ConfigError("only the least-squares (mse) adversarial loss is supported")
        factor = 2 ** (len(self.widths) - 1)
        if self.resize % factor:
            raise ConfigError(f"resize {self.resize} not divisible by the generator's downsampling {factor}")
        if len(self.disc_widths) != 3:
            raise ConfigError("discriminator has exactly three convolutions")

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "StainConfig":
        d = dict(d)
        for key in ("betas", "widths", "disc_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# --- networks --------------------------------------------------------------

def hardtanh01(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, 0.0, 1.0)


class _ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            nn.InstanceNorm2d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.InstanceNorm2d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UNetGenerator(nn.Module):
    """Encoder-decoder with a skip connection at every resolution; strided-conv
    downsampling and transposed-conv upsampling. The input image itself is also
    concatenated before the output convolution."""

    def __init__(self, widths=(32, 64, 128, 256)):
        super().__init__()
        self.widths = tuple(widths)
        self.down = nn.ModuleList()
        c_prev = 3
        for i, w in enumerate(widths):
            self.down.append(_ConvBlock(c_prev, w, stride=1 if i == 0 else 2))
            c_prev = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_skip, w in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up.append(nn.ConvTranspose2d(w, w_skip, 2, stride=2))
            self.dec.append(_ConvBlock(2 * w_skip, w_skip))
        self.out = nn.Conv2d(widths[0] + 3, 3, 1)
        nn.init.constant_(self.out.bias, 0.5)

    @property
    def factor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ShapeError(f"generator needs sides divisible by {self.factor}, got {tuple(x.shape[-2:])}")
        skips = []
        h = x
        for blk in self.down:
            h = blk(h)
            skips.append(h)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            h = dec(torch.cat([up(h), skip], dim=1))
        return hardtanh01(self.out(torch.cat([h, x], dim=1)))


class Discriminator(nn.Module):
    """Three 4x4 stride-2 convolutions, each with batch norm and ReLU / ReLU / sigmoid,
    then a global mean giving one score in (0, 1) per image."""

    def __init__(self, widths=(64, 128, 256)):
        super().__init__()
        c = [3, *widths]
        self.convs = nn.ModuleList(nn.Conv2d(c[i], c[i + 1], 4, stride=2, padding=1) for i in range(3))
        self.norms = nn.ModuleList(nn.BatchNorm2d(c[i + 1]) for i in range(3))

    def forward(self, x):
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            h = bn(conv(h))
            h = torch.sigmoid(h) if i == 2 else F.relu(h)
        return h.mean(dim=(1, 2, 3))


@dataclass
class StainTransferModel:
    g_ab: UNetGenerator
    g_ba: UNetGenerator
    d_a: Discriminator
    d_b: Discriminator
    config: StainConfig
    epoch: int = 0

    def generator(self, direction: str) -> UNetGenerator:
        if direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        return self.g_ab if direction == "a2b" else self.g_ba

    def state_dict(self) -> dict:
        return {k: getattr(self, k).state_dict() for k in ("g_ab", "g_ba", "d_a", "d_b")}


def build_stain_model(config: StainConfig = StainConfig()) -> StainTransferModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return StainTransferModel(UNetGenerator(config.widths), UNetGenerator(config.widths),
                                  Discriminator(config.disc_widths), Discriminator(config.disc_widths), config)


def lr_at(epoch: int, config: StainConfig) -> float:
    """Constant up to the decay start, then linear to zero at the final epoch."""
    start = config.decay_start_fraction * config.epochs
    if epoch <= start:
        return config.lr
    return config.lr * max(0.0, (config.epochs - epoch) / (config.epochs - start))


# --- hue histograms --------------------------------------------------------

@dataclass
class HueHistogram:
    edges: np.ndarray  # bins + 1 edges over [0, 1)
    masses: np.ndarray  # index 0 achromatic, 1 + i for hue bin i
    dataset: str = ""
    epoch: int | None = None

    @property
    def bins(self) -> int:
        return len(self.edges) - 1

    def mode_bin(self) -> int:
        return int(np.argmax(self.masses))


def _images(patches) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        arr = patches
    else:
        arr = np.stack([p.image if isinstance(p, PatchRecord) else np.asarray(p) for p in patches]) \
            if len(patches) else np.empty((0, 1, 1, 3))
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def hue_histogram(patches, bins: int = 64, saturation_cutoff: float = 0.05,
                  dataset: str = "", epoch: int | None = None) -> HueHistogram:
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    arr = _images(patches)
    if arr.size == 0:
        raise EmptyInputError("hue histogram of no pixels")
    hsv = rgb2hsv(np.clip(arr.reshape(-1, 1, 3), 0.0, 1.0)).reshape(-1, 3)
    hue = np.mod(hsv[:, 0], 1.0)
    chroma = hsv[:, 1] >= saturation_cutoff
    idx = np.minimum((hue[chroma] * bins).astype(np.int64), bins - 1)
    counts = np.concatenate([[np.count_nonzero(~chroma)], np.bincount(idx, minlength=bins)]).astype(np.float64)
    return HueHistogram(np.linspace(0.0, 1.0, bins + 1), counts / counts.sum(), dataset, epoch)


def write_histogram_csv(path, hist: HueHistogram) -> Path:
    """Row 0 is the achromatic bin (bin_low = bin_high = 'achromatic')."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIST_COLUMNS)
        w.writerow(["achromatic", "achromatic", f"{hist.masses[0]:.8f}"])
        for i in range(hist.bins):
            w.writerow([f"{hist.edges[i]:.6f}", f"{hist.edges[i + 1]:.6f}", f"{hist.masses[i + 1]:.8f}"])
    return path


def plot_histograms(path, hists: Sequence[HueHistogram], title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for h in hists:
        centres = (h.edges[:-1] + h.edges[1:]) / 2
        ax.plot(centres, h.masses[1:], label=f"{h.dataset} e{h.epoch}" if h.epoch is not None else h.dataset)
    ax.set_xlabel("hue")
    ax.set_ylabel("mass")
    if title:
        ax.set_title(title)
    if any(h.dataset for h in hists):
        ax.legend(fontsize=6)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


# --- training --------------------------------------------------------------

def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)


def _tensor(patches, size: int) -> torch.Tensor:
    arr = _images(patches).astype(np.float32)
    return _resize(torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))), size)


def _flip(x: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    out = x.clone()
    for i in range(x.shape[0]):
        if rng.random() < p:
            out[i] = out[i].flip(-1)
        if rng.random() < p:
            out[i] = out[i].flip(-2)
    return out


def cycle_error(model: StainTransferModel, a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean L1 of A -> B -> A and B -> A -> B reconstructions, in inference mode."""
    for g in (model.g_ab, model.g_ba):
        g.eval()
    with torch.no_grad():
        ea = (model.g_ba(model.g_ab(a)) - a).abs().mean()
        eb = (model.g_ab(model.g_ba(b)) - b).abs().mean()
    return float((ea + eb) / 2)


@dataclass
class Snapshot:
    epoch: int
    path: Path | None
    histograms: dict[str, HueHistogram]


@dataclass
class StainTrainResult:
    model: StainTransferModel
    snapshots: list[Snapshot] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)


def train_stain_model(data_a, data_b, config: StainConfig = StainConfig(), out_dir=None,
                      held_out_a=None, held_out_b=None) -> StainTrainResult:
    """Least-squares adversarial loss plus L1 cycle consistency.

    Every ``snapshot_every`` epochs the generators are checkpointed (when
    ``out_dir`` is given) and hue histograms of the held-out sets (default: the
    training sets) transformed in both directions are recorded.
    """
    if len(data_a) == 0 or len(data_b) == 0:
        raise EmptyInputError("both stain domains need at least one patch")
    size = config.resize
    xa, xb = _tensor(data_a, size), _tensor(data_b, size)
    ha = xa if held_out_a is None else _tensor(held_out_a, size)
    hb = xb if held_out_b is None else _tensor(held_out_b, size)
    model = build_stain_model(config)
    gens = list(model.g_ab.parameters()) + list(model.g_ba.parameters())
    discs = list(model.d_a.parameters()) + list(model.d_b.parameters())
    result = StainTrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        opt_g = torch.optim.Adam(gens, lr=config.lr, betas=config.betas)
        opt_d = torch.optim.Adam(discs, lr=config.lr, betas=config.betas)
        for epoch in range(1, config.epochs + 1):
            lr = lr_at(epoch - 1, config)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            rng = np.random.default_rng([config.seed, epoch])
            pa, pb = rng.permutation(len(xa)), rng.permutation(len(xb))
            steps = max(1, min(len(xa), len(xb)) // config.batch_size)
            for m in (model.g_ab, model.g_ba, model.d_a, model.d_b):
                m.train()
            sums = {"g": 0.0, "d": 0.0, "cyc": 0.0}
            for s in range(steps):
                ia = pa[s * config.batch_size:(s + 1) * config.batch_size]
                ib = pb[s * config.batch_size:(s + 1) * config.batch_size]
                real_a = _flip(xa[ia], config.flip_p, rng)
                real_b = _flip(xb[ib], config.flip_p, rng)
                fake_b = model.g_ab(real_a)
                fake_a = model.g_ba(real_b)
                # real and fake share one discriminator batch so batch-norm statistics
                # cannot normalise the difference between them away
                pred_fb = _joint(model.d_b, real_b, fake_b)[1]
                pred_fa = _joint(model.d_a, real_a, fake_a)[1]
                adv = F.mse_loss(pred_fb, torch.ones_like(pred_fb)) + F.mse_loss(pred_fa, torch.ones_like(pred_fa))
                cyc = F.l1_loss(model.g_ba(fake_b), real_a) + F.l1_loss(model.g_ab(fake_a), real_b)
                loss_g = adv + config.lambda_cyc * cyc
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()

                loss_d = 0.0
                for d, real, fake in ((model.d_a, real_a, fake_a), (model.d_b, real_b, fake_b)):
                    pr, pf = _joint(d, real, fake.detach())
                    loss_d = loss_d + 0.5 * (F.mse_loss(pr, torch.ones_like(pr)) + F.mse_loss(pf, torch.zeros_like(pf)))
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()
                sums["g"] += float(adv.detach())
                sums["d"] += float(loss_d.detach())
                sums["cyc"] += float(cyc.detach())
            model.epoch = epoch
            result.losses.append({"epoch": epoch, "lr": lr, **{k: v / steps for k, v in sums.items()}})
            log.info("stain epoch %d lr %.2e %s", epoch, lr, result.losses[-1])
            if epoch % config.snapshot_every == 0:
                hists = {
                    "a2b": hue_histogram(_numpy(transform_tensor(model, "a2b", ha)), config.hist_bins,
                                         config.saturation_cutoff, "fake_b", epoch),
                    "b2a": hue_histogram(_numpy(transform_tensor(model, "b2a", hb)), config.hist_bins,
                                         config.saturation_cutoff, "fake_a", epoch),
                }
                path = None
                if out_dir is not None:
                    path = save_stain_model(out_dir / f"stain_epoch{epoch:03d}.zip", model)
                    for k, h in hists.items():
                        write_histogram_csv(out_dir / f"hue_{k}_epoch{epoch:03d}.csv", h)
                result.snapshots.append(Snapshot(epoch, path, hists))
    for m in (model.g_ab, model.g_ba, model.d_a, model.d_b):
        m.eval()
    return result


def _joint(d: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = d(torch.cat([real, fake]))
    return out[:len(real)], out[len(real):]


def _numpy(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).cpu().numpy()


# --- inference -------------------------------------------------------------

def transform_tensor(model: StainTransferModel, direction: str, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    g = model.generator(direction)
    g.eval()
    out = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            out.append(g(x[start:start + batch_size]))
    return torch.cat(out) if out else x.clone()


def transform(model: StainTransferModel, direction: str, patch) -> np.ndarray:
    """Restain one H x W x 3 patch (or an N x H x W x 3 stack) in inference mode."""
    arr = np.asarray(patch.image if isinstance(patch, PatchRecord) else patch, dtype=np.float32)
    single = arr.ndim == 3
    arr = arr[None] if single else arr
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 patches, got {arr.shape}")
    size = model.config.resize
    if arr.shape[1:3] != (size, size):
        raise ShapeError(f"stain model expects {size}x{size} patches, got {arr.shape[1]}x{arr.shape[2]}")
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    out = _numpy(transform_tensor(model, direction, x))
    return out[0] if single else out


class IdentityStain:
    """Stand-in stain model whose generators return their input."""

    def __init__(self, directions=DIRECTIONS):
        self.directions = tuple(directions)

    def generator(self, direction):
        if direction not in self.directions:
            raise ConfigError(f"identity stain model has no {direction} direction")
        return lambda x: x


def restain_records(model, direction: str, records: Sequence[PatchRecord], target: str) -> InMemoryDataset:
    """Restained copies of ``records`` tagged with dataset id ``fake_<target>``."""
    if isinstance(model, IdentityStain):
        model.generator(direction)
        imgs = [r.image for r in records]
    else:
        imgs = list(transform(model, direction, np.stack([r.image for r in records]))) if records else []
    return InMemoryDataset([dataclasses.replace(r, image=np.asarray(img, dtype=np.float32),
                                                dataset_id=f"fake_{target}") for r, img in zip(records, imgs)])


def write_restained(root, dataset: InMemoryDataset) -> tuple[Path, str]:
    """PNG tree + manifest; returns the manifest path and a sha256 over all written files."""
    root = Path(root)
    rows = []
    digest = hashlib.sha256()
    for rec in dataset:
        rel = f"{rec.split}/{rec.source_key.replace(':', '_').replace('/', '_')}.png"
        save_image(root / rel, rec.image)
        digest.update(rel.encode())
        digest.update((root / rel).read_bytes())
        rows.append(ManifestRow(rel, rec.label, rec.split, rec.source_key, rec.magnification))
    manifest = write_manifest(root, rows)
    digest.update(manifest.read_bytes())
    return manifest, digest.hexdigest()


# --- persistence -----------------------------------------------------------

def save_stain_model(path, model: StainTransferModel) -> Path:
    import io
    import json
    import zipfile

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "histoeval-stain/1", "config": model.config.echo(), "epoch": model.epoch, "tensors": {}}
    blobs = []
    for part, state in model.state_dict().items():
        names = list(state)
        meta["tensors"][part] = names
        for i, name in enumerate(names):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            blobs.append((f"{part}/{i:05d}.npy", buf.getvalue()))
    with zipfile.ZipFile(path, "w") as zf:
        for name, data in [("meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())] + blobs:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return path


def load_stain_model(path) -> StainTransferModel:
    import io
    import json
    import zipfile

    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        model = build_stain_model(StainConfig.from_dict(meta["config"]))
        for part, names in meta["tensors"].items():
            state = {n: torch.from_numpy(np.load(io.BytesIO(zf.read(f"{part}/{i:05d}.npy"))))
                     for i, n in enumerate(names)}
            getattr(model, part).load_state_dict(state)
    model.epoch = meta["epoch"]
    for m in (model.g_ab, model.g_ba, model.d_a, model.d_b):
        m.eval()
    return model
