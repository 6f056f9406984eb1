"""Joint training and evaluation of the complementary pair.

Batch order is reproducible from the training seed alone: epoch ``e``
shuffles the labeled pool, then the unlabeled pool, with
``SplitMix64(derive(seed, e))``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import checkpoint, losses
from .data import Sample, SplitManifest, corpus_ids, read_sample
from .metrics import METRICS, aggregate, hole_false_negative_rate, image_metrics
from .network import ComplementaryNet, SegNetConfig, build, fuse_scores
from .optim import Adam, LrSchedule
from .rng import SplitMix64, derive
from .tensor import NonFiniteError, Tensor, no_grad, select_channel

log = logging.getLogger(__name__)

Mode = Literal["complementary", "fg_only"]
MODES = ("complementary", "fg_only")
EVAL_CHUNK = 8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    base_lr: float = 1e-3
    drop_every: int = 40
    drop_factor: float = 0.1
    mode: Mode = "complementary"
    labeled_fraction: float | None = None  # None: use the manifest's flags
    unlabeled_per_batch: int = 2
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: str | None = None
    fold: int = 0
    base_channels: int = 16
    jaccard: losses.JaccardMode = "image"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.unlabeled_per_batch <= self.batch_size:
            raise ValueError("unlabeled_per_batch must be in [0, batch_size]")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.drop_factor, self.drop_every)


# -- data plumbing ---------------------------------------------------------------------

class Corpus:
    """In-memory view of an on-disk corpus."""

    def __init__(self, directory: str | os.PathLike, ids: Sequence[str] | None = None):
        self.directory = Path(directory)
        ids = list(ids) if ids is not None else corpus_ids(directory)
        self.samples: dict[str, Sample] = {sid: read_sample(directory, sid) for sid in ids}
        if not self.samples:
            raise ValueError(f"no samples found in {directory}")

    @property
    def size(self) -> int:
        return next(iter(self.samples.values())).image.shape[1]

    def labeled(self, sid: str) -> Sample:
        return self.samples[sid]

    def unlabeled(self, sid: str) -> Sample:
        return self.samples[sid].without_label()


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray   # (N, 3, H, W)
    masks: np.ndarray    # (N, 1, H, W); rows of unlabeled samples are zero
    labeled: np.ndarray  # (N,) bool

    @classmethod
    def assemble(cls, samples: Sequence[Sample]) -> "Batch":
        images = np.stack([s.image for s in samples]).astype(np.float32)
        masks = np.zeros((len(samples), 1) + images.shape[2:], dtype=np.float32)
        flags = np.zeros(len(samples), dtype=bool)
        for i, s in enumerate(samples):
            if s.labeled:
                if s.mask is None:
                    raise ValueError(f"labeled sample {s.id} has no mask")
                masks[i] = s.mask
                flags[i] = True
        return cls([s.id for s in samples], images, masks, flags)


def compose_batches(labeled: Sequence[str], unlabeled: Sequence[str], batch_size: int,
                    unlabeled_per_batch: int) -> list[list[tuple[str, bool]]]:
    """Group ids into batches of ``batch_size``.

    With both pools non-empty each batch takes ``unlabeled_per_batch``
    unlabeled and the rest labeled, filling from whichever pool remains once
    the other runs dry.
    """
    lab = list(labeled)
    unl = list(unlabeled)
    batches = []
    li = ui = 0
    want_u = unlabeled_per_batch if unl else 0
    while li < len(lab) or ui < len(unl):
        take_u = min(want_u, len(unl) - ui)
        take_l = min(batch_size - take_u, len(lab) - li)
        take_u = min(batch_size - take_l, len(unl) - ui)
        batch = [(i, True) for i in lab[li:li + take_l]] + [(i, False) for i in unl[ui:ui + take_u]]
        li += take_l
        ui += take_u
        batches.append(batch)
    return batches


def epoch_batches(corpus: Corpus, labeled_ids: Sequence[str], unlabeled_ids: Sequence[str],
                  cfg: TrainConfig, epoch: int) -> list[Batch]:
    rng = SplitMix64(derive(cfg.seed, epoch))
    lab = rng.shuffled(labeled_ids)
    unl = rng.shuffled(unlabeled_ids) if cfg.mode == "complementary" else []
    out = []
    for group in compose_batches(lab, unl, cfg.batch_size, cfg.unlabeled_per_batch):
        samples = [corpus.labeled(i) if is_lab else corpus.unlabeled(i) for i, is_lab in group]
        out.append(Batch.assemble(samples))
    return out


# -- checkpoints --------------------------------------------------------------------------

def checkpoint_tensors(cnet: ComplementaryNet, opt: Adam | None, meta: dict[str, int]) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in cnet.named_parameters().items()}
    if opt is not None:
        out.update(opt.state_tensors())
    for k, v in meta.items():
        out[f"meta.{k}"] = np.array([v], dtype=np.int64)
    return out


def save_checkpoint(path, cnet: ComplementaryNet, opt: Adam | None = None, **meta: int) -> None:
    cfg = cnet.cfg
    meta = {"input_size": cfg.input_size, "base_channels": cfg.base_channels,
            "in_channels": cfg.in_channels, **meta}
    checkpoint.save(path, checkpoint_tensors(cnet, opt, meta))


def load_checkpoint(path) -> tuple[ComplementaryNet, dict[str, np.ndarray], dict[str, int]]:
    """Rebuild the network stored at ``path``; returns (net, raw tensors, meta)."""
    tensors = checkpoint.load(path)
    meta = {k[5:]: int(v.reshape(-1)[0]) for k, v in tensors.items() if k.startswith("meta.")}
    cfg = SegNetConfig(input_size=meta["input_size"], in_channels=meta.get("in_channels", 3),
                       base_channels=meta["base_channels"])
    cnet = build(cfg, 0)
    for name, p in cnet.named_parameters().items():
        arr = tensors.get(name)
        if arr is None:
            raise checkpoint.CheckpointError(f"checkpoint lacks {name}")
        if arr.shape != p.shape:
            raise checkpoint.CheckpointError(f"{name}: shape {arr.shape} vs expected {p.shape}")
        p.data[...] = arr
    return cnet, tensors, meta


# -- evaluation ------------------------------------------------------------------------

def predict_scores(cnet: ComplementaryNet, images: np.ndarray, need_bg: bool = True):
    """Foreground and background probabilities, computed in chunks."""
    p_f, p_b = [], []
    with no_grad():
        for i in range(0, len(images), EVAL_CHUNK):
            x = Tensor._wrap(np.ascontiguousarray(images[i:i + EVAL_CHUNK], dtype=np.float32))
            p_f.append(select_channel(cnet.fg(x)[0], 1).data)
            if need_bg:
                p_b.append(select_channel(cnet.bg(x)[0], 1).data)
    return np.concatenate(p_f), (np.concatenate(p_b) if need_bg else None)


def score_masks(samples: Sequence[Sample], preds: dict[str, np.ndarray], fold: int = 0) -> list[dict]:
    """Per-image metrics of binary masks ``preds[fusion]`` of shape (N, H, W).

    The ``fused`` entry fills the plain metric columns and ``fg_only`` the
    ``*_fg_only`` ones.
    """
    rows = []
    for i, s in enumerate(samples):
        row: dict = {"id": s.id, "fold": fold}
        gt = s.mask[0]
        for fusion, masks in preds.items():
            pred = masks[i]
            suffix = "" if fusion == "fused" else "_fg_only"
            for k, v in image_metrics(pred, gt).items():
                row[k + suffix] = v
            hole = s.hole[0] if s.hole is not None else None
            row["hole_FNR" + suffix] = hole_false_negative_rate(pred, hole) if hole is not None else None
        rows.append(row)
    return rows


def evaluate_samples(cnet: ComplementaryNet, samples: Sequence[Sample], fold: int = 0,
                     need_bg: bool = True) -> list[dict]:
    """Per-image metrics for fused and fg-only predictions."""
    images = np.stack([s.image for s in samples])
    p_f, p_b = predict_scores(cnet, images, need_bg)
    preds = {"fg_only": (p_f[:, 0] >= 0.5).astype(np.uint8)}
    if need_bg:
        preds["fused"] = (fuse_scores(p_f[:, 0], p_b[:, 0], "fused") >= 0.5).astype(np.uint8)
    return score_masks(samples, preds, fold)


def eval_columns(need_bg: bool = True) -> list[str]:
    cols = ["id", "fold"]
    if need_bg:
        cols += list(METRICS)
    cols += [m + "_fg_only" for m in METRICS]
    if need_bg:
        cols.append("hole_FNR")
    cols.append("hole_FNR_fg_only")
    return cols


def summarize(rows: Sequence[dict], need_bg: bool = True) -> dict:
    out: dict = {"id": "summary", "fold": rows[0]["fold"] if rows else ""}
    for col in eval_columns(need_bg)[2:]:
        vals = [r[col] for r in rows if r.get(col) is not None]
        out[col] = float(np.mean(vals)) if vals else None
    return out


def write_metrics_csv(path, rows: Sequence[dict], need_bg: bool = True) -> dict:
    cols = eval_columns(need_bg)
    summary = summarize(rows, need_bg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in list(rows) + [summary]:
            w.writerow(["" if r.get(c) is None else (f"{r[c]:.10g}" if isinstance(r[c], float) else r[c])
                        for c in cols])
    return summary


def evaluate(cnet: ComplementaryNet, corpus: Corpus, splits: SplitManifest, fold: int = 0,
             out_csv: str | os.PathLike | None = None) -> dict:
    """Metrics over the validation fold; returns the summary row."""
    samples = [corpus.labeled(i) for i in splits.val_ids(fold)]
    rows = evaluate_samples(cnet, samples, fold)
    if out_csv is not None:
        return write_metrics_csv(out_csv, rows)
    return summarize(rows)


def mean_dice(cnet: ComplementaryNet, samples: Sequence[Sample], need_bg: bool) -> tuple[float, float | None]:
    rows = evaluate_samples(cnet, samples, need_bg=need_bg)
    fg = aggregate([{"DI": r["DI_fg_only"]} for r in rows], ["DI"]).mean["DI"]
    fused = aggregate([{"DI": r["DI"]} for r in rows], ["DI"]).mean["DI"] if need_bg else None
    return fg, fused


# -- training --------------------------------------------------------------------------

def log_columns(mode: Mode) -> list[str]:
    if mode == "fg_only":
        return ["epoch", "lr", "L_fore", "L_total", "val_DI_fg"]
    return ["epoch", "lr", "L_fore", "L_back", "L_mutual", "L_total", "val_DI_fg", "val_DI_fused"]


@dataclass
class TrainResult:
    cnet: ComplementaryNet
    opt: Adam
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _step_losses(cnet: ComplementaryNet, batch: Batch, cfg: TrainConfig):
    x = Tensor._wrap(batch.images)
    p_f = select_channel(cnet.fg(x)[0], 1)
    if cfg.mode == "fg_only":
        loss = losses.fg_only_loss(p_f, batch.masks, cfg.jaccard)
        return loss, {"L_fore": loss.item()}
    p_b = select_channel(cnet.bg(x)[0], 1)
    parts = losses.total_loss(losses.LossInputs(p_f, p_b, batch.masks, batch.labeled), cfg.jaccard)
    comp = {"L_mutual": parts.mutual}
    if batch.labeled.any():
        comp["L_fore"] = parts.fore
        comp["L_back"] = parts.back
    return parts.total, comp


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def append_log(path, row: dict, mode: Mode, header: bool) -> None:
    cols = log_columns(mode)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(cols)
        w.writerow([_fmt(row.get(c)) for c in cols])


def train(cnet: ComplementaryNet, corpus: Corpus, splits: SplitManifest, cfg: TrainConfig,
          opt: Adam | None = None, start_epoch: int = 0, log_path: str | os.PathLike | None = None) -> TrainResult:
    """Run epochs ``start_epoch .. cfg.epochs - 1``.

    Complementary mode minimises fore + back on labeled samples plus mutual
    loss on every sample, with one joint Adam step over both networks per
    batch. fg_only mode trains the foreground network alone on labeled
    samples and never touches the background network.
    """
    cfg.validate()
    if cfg.labeled_fraction is not None:
        splits = splits.relabel(cfg.labeled_fraction)
    labeled_ids = splits.labeled_ids(cfg.fold)
    unlabeled_ids = splits.unlabeled_ids(cfg.fold)
    if not labeled_ids:
        raise TrainingError("empty labeled pool")
    val_samples = [corpus.labeled(i) for i in splits.val_ids(cfg.fold)]

    params = ({f"fg.{k}": v for k, v in cnet.fg.named_parameters().items()}
              if cfg.mode == "fg_only" else cnet.named_parameters())
    if opt is None:
        opt = Adam(params, lr=cfg.base_lr)
    elif set(opt.params) != set(params):
        raise TrainingError("optimizer parameters do not match the training mode")
    schedule = cfg.schedule
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    need_bg = cfg.mode == "complementary"

    if log_path is not None and start_epoch == 0 and os.path.exists(log_path):
        os.remove(log_path)

    result = TrainResult(cnet, opt)
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = schedule.lr_at(epoch)
        sums: dict[str, list[float]] = {}
        for batch in epoch_batches(corpus, labeled_ids, unlabeled_ids, cfg, epoch):
            try:
                opt.zero_grad()
                loss, comp = _step_losses(cnet, batch, cfg)
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                if ckpt_dir is not None:
                    with open(ckpt_dir / "diverged.json", "w") as fh:
                        json.dump({"epoch": epoch, "batch_ids": batch.ids, "error": str(exc)}, fh)
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {batch.ids}: {exc}") from exc
            comp["L_total"] = loss.item()
            for k, v in comp.items():
                sums.setdefault(k, []).append(v)
        row: dict = {"epoch": epoch + 1, "lr": opt.lr}
        row.update({k: float(np.mean(v)) for k, v in sums.items()})
        last = epoch + 1 == cfg.epochs
        if (epoch + 1) % cfg.eval_every == 0 or last:
            di_fg, di_fused = mean_dice(cnet, val_samples, need_bg)
            row["val_DI_fg"] = di_fg
            if need_bg:
                row["val_DI_fused"] = di_fused
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "last.cseg", cnet, opt, epoch=epoch + 1, seed=cfg.seed,
                                mode=MODES.index(cfg.mode))
        result.log.append(row)
        if log_path is not None:
            append_log(log_path, row, cfg.mode, header=not os.path.exists(log_path))
        log.info("epoch %d %s", epoch + 1, {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
    result.seconds = time.perf_counter() - t0
    return result


def resume_optimizer(cnet: ComplementaryNet, tensors: dict[str, np.ndarray], mode: Mode, lr: float) -> Adam:
    params = ({f"fg.{k}": v for k, v in cnet.fg.named_parameters().items()}
              if mode == "fg_only" else cnet.named_parameters())
    opt = Adam(params, lr=lr)
    opt.load_state_tensors(tensors)
    return opt


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
