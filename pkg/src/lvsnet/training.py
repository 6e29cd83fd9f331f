"""Training loop, evaluation and the ablation matrix.

Data enters as :class:`Split` tensors (images ``(N, 3, H, W)`` in [0, 1],
masks ``(N, K, H, W)`` binary, optional FOV ``(N, H, W)``).  Use
:func:`lvsnet.data.to_tensors` to get there from sample pairs.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, ShapeError, TrainConfig
from .metrics import (
    MetricReport,
    RocCurve,
    average_reports,
    binarize,
    confusion,
    dice_loss,
    f1_threshold,
    metrics_from_counts,
    multiclass_report,
    roc_auc,
)
from .model import LVSNet, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Split:
    images: torch.Tensor
    masks: torch.Tensor
    fovs: Optional[torch.Tensor] = None
    ids: Optional[List[str]] = None

    def __post_init__(self):
        if self.images.shape[0] != self.masks.shape[0]:
            raise ValueError("images and masks disagree on sample count")
        if self.images.shape[0] == 0:
            raise ValueError("empty split")
        if self.ids is None:
            self.ids = [f"{i:03d}" for i in range(len(self))]

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_pairs(cls, pairs, target: Tuple[int, int], num_classes: int = 1) -> "Split":
        from .data import to_tensors

        images, masks, fovs = to_tensors(pairs, target, num_classes)
        return cls(images, masks, fovs, [p.id for p in pairs])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    threshold: float
    wall_time: float


@dataclass
class RunRecord:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_dice: float = -1.0
    best_threshold: float = 0.5
    best_checkpoint: Optional[str] = None
    model: Optional[LVSNet] = field(default=None, repr=False)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "model"}
        return json.dumps(d, indent=2)


def _check_data(cfg: ModelConfig, split: Split, where: str) -> None:
    _, c, h, w = split.images.shape
    if (h, w, c) != cfg.input_spec.as_tuple():
        raise ShapeError(f"{where} images are {(h, w, c)}, model expects {cfg.input_spec.as_tuple()}")
    if split.masks.shape[1] != cfg.num_classes:
        raise ConfigError(f"{where} masks have {split.masks.shape[1]} classes, model has {cfg.num_classes}")


def _batches(n: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    chunks = list(torch.split(order, batch_size))
    # train-mode BN on the 1x1 attention map needs two samples
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = torch.cat([chunks[-1], last])
    return chunks


@torch.no_grad()
def predict(model: LVSNet, images: torch.Tensor, batch_size: int = 4) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def _val_score(probs: torch.Tensor, masks: torch.Tensor) -> Tuple[float, float]:
    """Pooled dice at the F1 threshold (single class) or argmax dice over foreground classes."""
    if probs.shape[1] == 1:
        s = [p[0].numpy() for p in probs]
        t = [m[0].numpy().astype(bool) for m in masks]
        thr = f1_threshold(s, t)
        c = confusion(np.concatenate([binarize(x, thr).ravel() for x in s]), np.concatenate([x.ravel() for x in t]))
        return metrics_from_counts(c).dice, thr
    pred = probs.argmax(1).numpy()
    truth = masks.argmax(1).numpy()
    dices = [
        metrics_from_counts(confusion((pred == k).ravel(), (truth == k).ravel())).dice
        for k in range(1, probs.shape[1])
    ]
    return float(np.mean(dices)), float("nan")


def train(
    cfg: ModelConfig,
    train_data: Split,
    val_data: Split,
    tc: TrainConfig = TrainConfig(),
    out_dir=None,
    resume=None,
) -> RunRecord:
    """Minimize the dice loss with Adam; keep the weights with the best validation dice.

    ``resume`` is a checkpoint path: its weights are restored and training
    continues after the epoch stored in its metadata.  Adam moments are not
    checkpointed and restart from zero.
    """
    _check_data(cfg, train_data, "train")
    _check_data(cfg, val_data, "validation")
    if len(train_data) < 2:
        raise ValueError("training needs at least two samples (batch-norm statistics)")
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    start_epoch = 1
    if resume:
        model, meta = load_checkpoint(resume)
        if model.cfg != cfg:
            raise ConfigError(f"checkpoint {resume} was trained with a different model config")
        start_epoch = int(meta.get("epoch", 0)) + 1
    else:
        model = build_model(cfg)

    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(tc.beta1, tc.beta2))
    record = RunRecord()
    best_state = copy.deepcopy(model.state_dict())
    log_path = out / "run.jsonl" if out else None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)  # dropout masks
        for epoch in range(start_epoch, tc.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            losses = []
            for idx in _batches(len(train_data), tc.batch_size, gen):
                opt.zero_grad()
                loss = dice_loss(model(train_data.images[idx]), train_data.masks[idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}")
                loss.backward()
                opt.step()
                losses.append(loss.item() * len(idx))
            train_loss = sum(losses) / len(train_data)
            val_dice, thr = _val_score(predict(model, val_data.images), val_data.masks)
            rec = EpochRecord(epoch, train_loss, val_dice, thr, time.perf_counter() - t0)
            record.epochs.append(rec)
            log.info("epoch %d loss %.4f val dice %.4f thr %.4f", epoch, train_loss, val_dice, thr)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(asdict(rec)) + "\n")

            meta = {"epoch": epoch, "val_dice": val_dice, "threshold": thr}
            if val_dice > record.best_val_dice:
                record.best_epoch, record.best_val_dice, record.best_threshold = epoch, val_dice, thr
                best_state = copy.deepcopy(model.state_dict())
                if out:
                    record.best_checkpoint = str(save_checkpoint(model, out / "checkpoints" / "best.npz", meta))
            if out and tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
                save_checkpoint(model, out / "checkpoints" / f"epoch_{epoch:04d}.npz", meta)
            if tc.target_dice is not None and val_dice >= tc.target_dice:
                break

    if out:
        save_checkpoint(model, out / "checkpoints" / "last.npz", {"epoch": record.epochs[-1].epoch})
    model.load_state_dict(best_state)
    model.eval()
    record.model = model
    if out:
        (out / "run_record.json").write_text(record.to_json())
    return record


# -- evaluation ---------------------------------------------------------------

@dataclass
class Evaluation:
    per_image: List[Tuple[str, MetricReport]]
    aggregate: MetricReport  # mean of per-image reports
    pooled: MetricReport  # one confusion matrix over every pixel
    roc: Optional[RocCurve]
    auc: float
    threshold: float


def evaluate_predictions(
    probs: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    threshold: float,
    ids: Optional[Sequence[str]] = None,
    valid_regions: Optional[Sequence[np.ndarray]] = None,
) -> Evaluation:
    """Score single-class probability maps ``(H, W)`` against binary truth."""
    ids = list(ids) if ids is not None else [f"{i:03d}" for i in range(len(probs))]
    valids = list(valid_regions) if valid_regions is not None else [None] * len(probs)
    per_image = []
    pooled = None
    for i, p, t, v in zip(ids, probs, truths, valids):
        c = confusion(binarize(p, threshold), t, v)
        pooled = c if pooled is None else pooled + c
        _, auc = roc_auc(p, t, v)
        per_image.append((i, metrics_from_counts(c).with_auc(None if math.isnan(auc) else auc)))
    curve, auc = roc_auc(list(probs), list(truths), valid_regions)
    return Evaluation(
        per_image=per_image,
        aggregate=average_reports([r for _, r in per_image]),
        pooled=metrics_from_counts(pooled).with_auc(auc),
        roc=curve,
        auc=auc,
        threshold=threshold,
    )


def resolve_threshold(policy: Union[str, float], model: LVSNet, val_data: Optional[Split] = None) -> float:
    """``"f1"`` fits on validation data; ``"fixed:<v>"`` or a number is used as-is."""
    if isinstance(policy, (int, float)):
        return float(policy)
    if policy.startswith("fixed:"):
        return float(policy.split(":", 1)[1])
    if policy != "f1":
        raise ValueError(f"unknown threshold policy {policy!r}")
    if val_data is None:
        raise ValueError("F1 threshold policy needs validation data")
    probs = predict(model, val_data.images)
    return f1_threshold([p[0].numpy() for p in probs], [m[0].numpy().astype(bool) for m in val_data.masks])


def evaluate(
    model_or_checkpoint,
    test_data: Split,
    threshold: Union[str, float] = "f1",
    val_data: Optional[Split] = None,
    use_fov: bool = False,
):
    """Per-image and aggregate metrics plus a dataset ROC.

    For multi-class models the threshold is ignored; classes come from the
    per-pixel argmax and a list of :class:`MulticlassReport` is returned.
    """
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint)
    else:
        model = model_or_checkpoint
    _check_data(model.cfg, test_data, "test")
    probs = predict(model, test_data.images)
    fovs = [f.numpy() for f in test_data.fovs] if (use_fov and test_data.fovs is not None) else None
    if model.cfg.num_classes > 1:
        pred = probs.argmax(1).numpy()
        truth = test_data.masks.argmax(1).numpy()
        return [
            (i, multiclass_report(p, t, None if fovs is None else fovs[n]))
            for n, (i, p, t) in enumerate(zip(test_data.ids, pred, truth))
        ]
    thr = resolve_threshold(threshold, model, val_data)
    return evaluate_predictions(
        [p[0].numpy() for p in probs],
        [m[0].numpy().astype(bool) for m in test_data.masks],
        thr,
        test_data.ids,
        fovs,
    )


# -- ablation -----------------------------------------------------------------

_OFF = dict(
    enable_sfrb_skip=False,
    enable_sfrb_bottleneck=False,
    enable_fmam_bottleneck=False,
    enable_sfrb_decoder=False,
    enable_fmam_skip=False,
    skip_attention="none",
)

ABLATION_ROWS: Dict[str, Dict] = {
    "LU": {**_OFF, "multiscale_encoder": False},
    "MLU": {**_OFF},
    "MLU+CBAM-Skip": {**_OFF, "skip_attention": "cbam"},
    "G-Skip": {**_OFF, "enable_sfrb_skip": True},
    "G-Skip+G-Bottleneck": {**_OFF, "enable_sfrb_skip": True, "enable_sfrb_bottleneck": True},
    "F-Skip": {**_OFF, "enable_fmam_skip": True},
    "F-Bottleneck": {**_OFF, "enable_fmam_bottleneck": True},
    "Full": {
        **_OFF,
        "enable_sfrb_skip": True,
        "enable_sfrb_bottleneck": True,
        "enable_fmam_bottleneck": True,
        "enable_sfrb_decoder": True,
    },
}

ABLATION_COLUMNS = ("Dice", "J", "Acc", "Sn", "Sp")


def ablation_config(base: ModelConfig, row: str) -> ModelConfig:
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; choose from {list(ABLATION_ROWS)}")
    return base.replace(**{"multiscale_encoder": True, **ABLATION_ROWS[row]})


def run_ablation(
    rows: Sequence[str],
    base_cfg: ModelConfig,
    train_data: Split,
    val_data: Split,
    tc: TrainConfig,
    test_data: Optional[Split] = None,
) -> List[Tuple[str, MetricReport]]:
    """Train and evaluate each row under identical seed and data."""
    if not rows:
        raise ValueError("no ablation rows given")
    unique = list(dict.fromkeys(rows))
    if len(unique) != len(rows):
        warnings.warn(f"duplicate ablation rows dropped: {rows} -> {unique}", stacklevel=2)
    cfgs = [(r, ablation_config(base_cfg, r)) for r in unique]
    table = []
    for row, cfg in cfgs:
        record = train(cfg, train_data, val_data, tc)
        result = evaluate(record.model, test_data or val_data, threshold=record.best_threshold)
        table.append((row, result.aggregate))
    return table
