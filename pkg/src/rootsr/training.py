"""Training regimes: FSRCNN regression, SRGAN, multi-discriminator SRGAN,
fine-tuning from a checkpoint, and the stand-in segmenter.

All regimes share one loop shape: validate the initial weights (epoch 0),
then per epoch resample patches, step through shuffled batches with Adam,
validate, checkpoint. The best epoch is the first one reaching the highest
validation SNR.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import checkpoint_checksum, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .evaluation import snr
from .imaging import (
    PATCH_SIZE,
    SCALE,
    DatasetManifest,
    GrayImage,
    crop_to_multiple,
    degrade,
    load_image,
    load_mask,
    sample_patches,
)
from .models import (
    DiscriminatorModel,
    FsrcnnConfig,
    Network,
    build_discriminator,
    build_fsrcnn,
    build_generator,
    build_segmenter,
    super_resolve,
)
from .tensor import AdamConfig, Tensor, adam_step, bce_with_logits, mse_loss, no_grad

log = logging.getLogger(__name__)

MODES = ("fsrcnn", "srgan", "muldis")
MODEL_ARCH = {"fsrcnn": "fsrcnn", "srgan": "generator", "muldis": "generator"}


@dataclass
class TrainConfig:
    mode: str = "fsrcnn"
    epochs: int = 100
    batch_size: int = 100
    adam: AdamConfig = field(default_factory=AdamConfig)
    patches_per_image: int = 4
    val_count: int | None = None
    val_dataset: int | None = None
    seed: int = 0
    init_checkpoint: str | Path | None = None
    content_weight: float = 1.0
    adversarial_weight: float = 1.0
    saturating: bool = False
    # GAN modes: train only the discriminator(s) against the initial generator
    freeze_generator: bool = False
    fsrcnn: FsrcnnConfig = field(default_factory=FsrcnnConfig)
    out_dir: str | Path | None = None
    keep_epoch_checkpoints: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1 or self.patches_per_image < 1:
            raise ConfigError("batch_size and patches_per_image must be positive")
        if self.val_count is not None and self.val_count < 1:
            raise ConfigError(f"val_count must be >= 1, got {self.val_count}")


@dataclass
class EpochRecord:
    epoch: int
    loss_content: float
    loss_adv: float
    loss_d: list[float]
    val_snr: float


@dataclass
class TrainReport:
    mode: str
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint_path: Path | None = None
    fine_tuned: bool = False
    parent_checkpoint: str | None = None
    parent_checksum: str | None = None
    # one (dataset_id, [indices of discriminators whose parameters changed]) per muldis batch
    routing_log: list[tuple[int, list[int]]] = field(default_factory=list)
    model: Network | None = field(default=None, repr=False)
    discriminators: list[DiscriminatorModel] = field(default_factory=list, repr=False)

    @property
    def val_snrs(self) -> list[float]:
        return [r.val_snr for r in self.records]

    @property
    def best_val_snr(self) -> float:
        return self.records[self.best_epoch].val_snr

    def write_tsv(self, path) -> None:
        n_d = max((len(r.loss_d) for r in self.records), default=0)
        lines = []
        if self.fine_tuned:
            lines.append(f"# finetuned_from {self.parent_checkpoint} crc32={self.parent_checksum}")
        header = ["epoch", "loss_content", "loss_adv"] + [f"loss_d{i}" for i in range(n_d)]
        lines.append("\t".join(header + ["val_snr"]))
        for r in self.records:
            cols = [str(r.epoch), _fmt(r.loss_content), _fmt(r.loss_adv)]
            cols += [_fmt(v) for v in r.loss_d] + ["nan"] * (n_d - len(r.loss_d))
            lines.append("\t".join(cols + [_fmt(r.val_snr)]))
        lines.append(f"best {self.best_epoch} {self.best_checkpoint_path or '-'}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


def read_report_tsv(path) -> tuple[list[dict[str, float]], int, str]:
    """Parse a report written by :meth:`TrainReport.write_tsv`."""
    rows, best, best_path = [], -1, ""
    header: list[str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line:
            continue
        if line.startswith("best "):
            _, b, best_path = line.split(" ", 2)
            best = int(b)
        elif not header:
            header = line.split("\t")
        else:
            rows.append({k: float(v) for k, v in zip(header, line.split("\t"))})
    return rows, best, best_path


# ---------------------------------------------------------------------------
# data


@dataclass
class _ValImage:
    hr: GrayImage
    lr_small: np.ndarray
    lr_input: np.ndarray


def _load_images(manifest: DatasetManifest) -> list[GrayImage]:
    images = []
    for e in manifest.entries:
        try:
            images.append(load_image(e.image))
        except Exception as exc:
            raise ConfigError(f"cannot load training image {e.image}: {exc}") from exc
    return images


def split_validation(manifest: DatasetManifest, config: TrainConfig
                     ) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic disjoint (train, validation) split of a manifest.

    The validation size defaults to 20% of the candidate pool, capped at 100.
    ``val_dataset`` restricts the candidates to one dataset id.
    """
    entries = manifest.entries
    if len(entries) < 2:
        raise ConfigError("need at least two images to carve out a validation set")
    pool = [i for i, e in enumerate(entries)
            if config.val_dataset is None or e.dataset_id == config.val_dataset]
    if not pool:
        raise ConfigError(f"no entries belong to validation dataset {config.val_dataset}")
    n_val = config.val_count or min(100, max(1, round(0.2 * len(pool))))
    n_val = min(n_val, len(pool), len(entries) - 1)
    rng = np.random.default_rng([config.seed, 0x7A1])
    val_idx = set(int(i) for i in rng.permutation(pool)[:n_val])
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    return manifest.subset(train), manifest.subset(val)


def _prepare_validation(manifest: DatasetManifest) -> list[_ValImage]:
    out = []
    for img in _load_images(manifest):
        hr = crop_to_multiple(img, SCALE)
        small, up = degrade(hr, SCALE)
        out.append(_ValImage(hr, small.pixels[None, None], up.pixels[None, None]))
    return out


def _epoch_patches(images: list[GrayImage], count: int, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    hr, small, up = [], [], []
    for img in images:
        for p in sample_patches(img, count, int(rng.integers(2**63))):
            hr.append(p.hr.pixels)
            small.append(p.lr_small.pixels)
            up.append(p.lr_input.pixels)
    order = rng.permutation(len(hr))
    stack = lambda xs: np.stack(xs)[order][:, None]  # noqa: E731
    return stack(hr), stack(small), stack(up)


def _batches(n: int, batch_size: int) -> list[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# validation


def _validate_prepared(model: Network, images: list[_ValImage]) -> float:
    if not images:
        raise ConfigError("validation set is empty")
    scores = []
    for v in images:
        sr = super_resolve(model, v.lr_small, v.lr_input)[0, 0]
        scores.append(snr(v.hr, GrayImage(sr)))
    return float(np.mean(scores))


def validate(model: Network, entries: DatasetManifest | list) -> float:
    """Mean SNR of ``model`` over ×4-degraded validation images."""
    if isinstance(entries, DatasetManifest):
        manifest = entries
    else:
        manifest = DatasetManifest(list(entries), {})
    if not manifest.entries:
        raise ConfigError("validation set is empty")
    return _validate_prepared(model, _prepare_validation(manifest))


# ---------------------------------------------------------------------------
# loop plumbing


class _Run:
    """Bookkeeping shared by every regime: validation, checkpoints, best-epoch."""

    def __init__(self, model: Network, config: TrainConfig, val: list[_ValImage],
                 report: TrainReport):
        self.model, self.config, self.val, self.report = model, config, val, report
        self.out = Path(config.out_dir) if config.out_dir is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        self.best_state: dict[str, np.ndarray] | None = None

    def end_epoch(self, epoch: int, loss_content: float, loss_adv: float,
                  loss_d: list[float]) -> None:
        val_snr = _validate_prepared(self.model, self.val)
        rec = EpochRecord(epoch, loss_content, loss_adv, loss_d, val_snr)
        self.report.records.append(rec)
        improved = self.best_state is None or val_snr > self.report.best_val_snr
        if improved:
            self.report.best_epoch = epoch
            self.best_state = self.model.state_dict()
        log.info("epoch %d content=%.6g adv=%.6g val_snr=%.4f%s", epoch, loss_content,
                 loss_adv, val_snr, " *" if improved else "")
        if self.out is not None:
            meta = dict(epoch=epoch, val_snr=val_snr, seed=self.config.seed,
                        metadata=self._metadata())
            ckpt = self.out / f"epoch_{epoch}.ckpt"
            save_checkpoint(self.model, ckpt, **meta)
            if improved:
                shutil.copyfile(ckpt, self.out / "best.ckpt")
                self.report.best_checkpoint_path = self.out / "best.ckpt"
            if not self.config.keep_epoch_checkpoints:
                ckpt.unlink()

    def _metadata(self) -> dict:
        c = self.config
        meta = {"mode": c.mode, "lr": c.adam.learning_rate, "batch_size": c.batch_size,
                "patches_per_image": c.patches_per_image}
        if self.report.fine_tuned:
            meta["parent_crc32"] = self.report.parent_checksum
        return meta

    def finish(self) -> TrainReport:
        self.model.load_state_dict(self.best_state)
        self.report.model = self.model
        if self.out is not None:
            self.report.write_tsv(self.out / "report.tsv")
        return self.report


def _step(params, adam: AdamConfig) -> None:
    for p in params:
        adam_step(p, adam)


def _zero(params) -> None:
    for p in params:
        p.zero_grad()


def _setup(manifest: DatasetManifest, config: TrainConfig, mode: str):
    if config.mode != mode:
        raise ConfigError(f"config.mode is {config.mode!r}, expected {mode!r}")
    if not manifest.entries:
        raise ConfigError("manifest has no entries")
    train_m, val_m = split_validation(manifest, config)
    return train_m, _prepare_validation(val_m)


def _initial_model(config: TrainConfig, init: Network | None) -> Network:
    if init is not None:
        return init
    if config.mode == "fsrcnn":
        return build_fsrcnn(config.fsrcnn, config.seed)
    return build_generator(config.seed)


# ---------------------------------------------------------------------------
# regimes


def train_fsrcnn(manifest: DatasetManifest, config: TrainConfig, *,
                 init_model: Network | None = None, report: TrainReport | None = None
                 ) -> TrainReport:
    """Minimise the content (MSE) loss of FSRCNN on LR/HR patch pairs."""
    train_m, val = _setup(manifest, config, "fsrcnn")
    report = report or TrainReport("fsrcnn")
    model = _initial_model(config, init_model)
    images = _load_images(train_m)
    run = _Run(model, config, val, report)
    params = list(model.parameters().values())
    run.end_epoch(0, math.nan, math.nan, [])
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        hr, small, _ = _epoch_patches(images, config.patches_per_image, rng)
        losses = []
        for sl in _batches(len(hr), config.batch_size):
            loss = mse_loss(model(small[sl]), Tensor(hr[sl]))
            loss.backward()
            _step(params, config.adam)
            losses.append(loss.item())
        run.end_epoch(epoch, float(np.mean(losses)), math.nan, [])
    return run.finish()


def generator_adversarial_loss(fake_logits: Tensor, saturating: bool = False) -> Tensor:
    """Generator's adversarial term.

    Non-saturating: -log D(G(y)). Saturating (literal min-max form):
    log(1 - D(G(y))), which equals -BCE(logit, 0).
    """
    if saturating:
        return bce_with_logits(fake_logits, 0.0) * -1.0
    return bce_with_logits(fake_logits, 1.0)


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """-[log D(x) + log(1 - D(G(y)))], i.e. the negated reward D maximises."""
    return bce_with_logits(real_logits, 1.0) + bce_with_logits(fake_logits, 0.0)


def discriminator_step(gen: Network, disc: Network, hr: np.ndarray, lr_input: np.ndarray,
                       adam: AdamConfig) -> tuple[float, Tensor]:
    """D phase: one Adam step on -[log D(x) + log(1 - D(G(y)))] with G(y) detached.

    Returns the loss value and the (attached) generator output for the G phase.
    """
    fake = gen(lr_input)
    d_loss = discriminator_loss(disc(hr), disc(fake.detach()))
    d_loss.backward()
    _step(disc.parameters().values(), adam)
    return d_loss.item(), fake


def generator_step(gen: Network, disc: Network, fake: Tensor, hr: np.ndarray,
                   config: TrainConfig) -> tuple[float, float]:
    """G phase: one Adam step on the weighted adversarial + content loss."""
    adv = generator_adversarial_loss(disc(fake), config.saturating)
    content = mse_loss(fake, Tensor(hr))
    g_loss = adv * config.adversarial_weight + content * config.content_weight
    g_loss.backward()
    _step(gen.parameters().values(), config.adam)
    # the G pass also deposited gradients on D; they must not leak into its next step
    _zero(disc.parameters().values())
    return content.item(), adv.item()


def _gan_batch(gen: Network, disc: Network, hr: np.ndarray, lr_input: np.ndarray,
               config: TrainConfig) -> tuple[float, float, float]:
    """One discriminator step followed by one generator step."""
    d_loss, fake = discriminator_step(gen, disc, hr, lr_input, config.adam)
    if config.freeze_generator:
        with no_grad():
            content = mse_loss(fake.detach(), Tensor(hr)).item()
            adv = generator_adversarial_loss(disc(fake.detach()), config.saturating).item()
        _zero(gen.parameters().values())
        return content, adv, d_loss
    content, adv = generator_step(gen, disc, fake, hr, config)
    return content, adv, d_loss


def train_srgan(manifest: DatasetManifest, config: TrainConfig, *,
                init_model: Network | None = None, report: TrainReport | None = None
                ) -> TrainReport:
    """Alternating discriminator / generator optimisation with a content term."""
    train_m, val = _setup(manifest, config, "srgan")
    report = report or TrainReport("srgan")
    gen = _initial_model(config, init_model)
    disc = build_discriminator(config.seed + 1)
    report.discriminators = [disc]
    images = _load_images(train_m)
    run = _Run(gen, config, val, report)
    run.end_epoch(0, math.nan, math.nan, [math.nan])
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        hr, _, up = _epoch_patches(images, config.patches_per_image, rng)
        stats = [_gan_batch(gen, disc, hr[sl], up[sl], config)
                 for sl in _batches(len(hr), config.batch_size)]
        c, a, d = np.mean(stats, axis=0)
        run.end_epoch(epoch, float(c), float(a), [float(d)])
    return run.finish()


def _snapshot(models: list[Network]) -> list[list[bytes]]:
    return [[p.data.tobytes() for p in m.parameters().values()] for m in models]


def train_muldis(manifest: DatasetManifest, config: TrainConfig, *,
                 init_model: Network | None = None, report: TrainReport | None = None
                 ) -> TrainReport:
    """SRGAN with one discriminator per dataset id.

    Batches come from a single dataset each and cycle round-robin over the
    datasets; smaller datasets are oversampled so every dataset contributes
    the same number of batches per epoch. Only that dataset's discriminator
    is stepped, and the generator's adversarial term uses it.
    """
    if config.mode != "muldis":
        raise ConfigError(f"config.mode is {config.mode!r}, expected 'muldis'")
    ids = manifest.dataset_ids()
    if len(ids) < 2:
        raise ConfigError(f"muldis needs at least 2 datasets in the manifest, found {len(ids)}")
    train_m, val = _setup(manifest, config, "muldis")
    report = report or TrainReport("muldis")
    gen = _initial_model(config, init_model)
    discs = [build_discriminator(config.seed + 1 + k) for k in range(len(ids))]
    report.discriminators = discs
    per_dataset = {i: _load_images(train_m.subset(e for e in train_m.entries if e.dataset_id == i))
                   for i in ids}
    if any(not imgs for imgs in per_dataset.values()):
        raise ConfigError("every dataset needs at least one training image after the validation split")
    run = _Run(gen, config, val, report)
    run.end_epoch(0, math.nan, math.nan, [math.nan] * len(ids))
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        data = {i: _epoch_patches(per_dataset[i], config.patches_per_image, rng) for i in ids}
        slices = {i: _batches(len(data[i][0]), config.batch_size) for i in ids}
        n_rounds = max(len(s) for s in slices.values())
        stats = {i: [] for i in ids}
        content, adv = [], []
        for j in range(n_rounds):
            for k, i in enumerate(ids):
                sl = slices[i][j % len(slices[i])]
                hr, _, up = data[i]
                before = _snapshot(discs)
                c, a, d = _gan_batch(gen, discs[k], hr[sl], up[sl], config)
                after = _snapshot(discs)
                changed = [m for m in range(len(discs)) if before[m] != after[m]]
                report.routing_log.append((i, changed))
                stats[i].append(d)
                content.append(c)
                adv.append(a)
        run.end_epoch(epoch, float(np.mean(content)), float(np.mean(adv)),
                      [float(np.mean(stats[i])) for i in ids])
    return run.finish()


_TRAINERS: dict[str, Callable[..., TrainReport]] = {
    "fsrcnn": train_fsrcnn,
    "srgan": train_srgan,
    "muldis": train_muldis,
}


def finetune(init_checkpoint, manifest: DatasetManifest, config: TrainConfig) -> TrainReport:
    """Continue training a checkpoint on ``manifest`` with the regime of ``config.mode``."""
    expected = MODEL_ARCH[config.mode]
    model, _ = load_checkpoint(init_checkpoint, expected_arch=expected)
    report = TrainReport(config.mode, fine_tuned=True, parent_checkpoint=str(init_checkpoint),
                         parent_checksum=checkpoint_checksum(init_checkpoint))
    return _TRAINERS[config.mode](manifest, config, init_model=model, report=report)


def train(manifest: DatasetManifest, config: TrainConfig) -> TrainReport:
    """Dispatch on ``config.mode``; an ``init_checkpoint`` turns the run into fine-tuning."""
    if config.init_checkpoint is not None:
        return finetune(config.init_checkpoint, manifest, config)
    return _TRAINERS[config.mode](manifest, config)


# ---------------------------------------------------------------------------
# segmenter


@dataclass
class SegTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    patches_per_image: int = 4
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0


def train_segmenter(manifest: DatasetManifest, config: SegTrainConfig = SegTrainConfig(),
                    images: list[tuple[GrayImage, np.ndarray]] | None = None) -> Network:
    """Fit the stand-in segmenter on HR images and their ground-truth masks."""
    if images is None:
        missing = [str(e.image) for e in manifest.entries if e.mask is None]
        if missing:
            raise ConfigError(f"segmenter training needs masks; missing for: {', '.join(missing)}")
        images = [(load_image(e.image), load_mask(e.mask).bits) for e in manifest.entries]
    if not images:
        raise ConfigError("no segmentation training images")
    model = build_segmenter(config.seed)
    params = list(model.parameters().values())
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        xs, ys = [], []
        for img, mask in images:
            h, w = img.pixels.shape
            if h < PATCH_SIZE or w < PATCH_SIZE:
                raise ConfigError(f"segmenter training images must be >= {PATCH_SIZE} px")
            for _ in range(config.patches_per_image):
                y0 = int(rng.integers(0, h - PATCH_SIZE + 1))
                x0 = int(rng.integers(0, w - PATCH_SIZE + 1))
                xs.append(img.pixels[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE])
                ys.append(mask[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE])
        order = rng.permutation(len(xs))
        x = np.stack(xs)[order][:, None]
        y = np.stack(ys)[order][:, None].astype(np.float32)
        losses = []
        for sl in _batches(len(x), config.batch_size):
            loss = bce_with_logits(model(x[sl]), y[sl])
            loss.backward()
            _step(params, config.adam)
            losses.append(loss.item())
        log.info("segmenter epoch %d bce=%.5f", epoch, np.mean(losses))
    return model


def discriminator_accuracy(disc: Network, gen: Network, hr: np.ndarray, lr_input: np.ndarray
                           ) -> float:
    """Fraction of real (label 1) and generated (label 0) patches D classifies correctly."""
    with no_grad():
        real = disc(hr).data.ravel()
        fake = disc(gen(lr_input).data).data.ravel()
    return float((np.sum(real >= 0) + np.sum(fake < 0)) / (real.size + fake.size))
