"""Segmentation evaluation: confusion matrix, per-class IoU, mIoU, fwIoU, and
the translator semantic-preservation diagnostic."""

from __future__ import annotations

import numpy as np

IGNORE = 255


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns prediction."""

    def __init__(self, k: int):
        if k < 1:
            raise MetricsError(f"K must be positive, got {k}")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricsError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != IGNORE
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.size and (p.max() >= self.k or g.max() >= self.k):
            raise MetricsError(f"class id >= K={self.k}")
        np.add.at(self.counts, (g, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise MetricsError("cannot merge matrices of different K")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; classes absent from both gt and pred get NaN."""
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    out = np.full(cm.k, np.nan)
    defined = union > 0
    out[defined] = diag[defined] / union[defined]
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes with defined IoU."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    vals = iou(cm)
    return float(np.nanmean(vals))


def fwiou(cm: ConfusionMatrix) -> float:
    """Frequency-weighted IoU: sum of per-class IoUs weighted by gt frequency."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    vals = iou(cm)
    freq = cm.counts.sum(axis=1) / cm.total
    present = freq > 0
    return float((freq[present] * vals[present]).sum())


def evaluate_segnet(segnet, refs, evaluation=True) -> dict:
    """mIoU/fwIoU of a segmentation net over manifest scene refs."""
    from . import autodiff as ad

    cm = ConfusionMatrix(segnet.cfg.n_classes)
    g = ad.Graph()
    size = segnet.cfg.image_size
    x = g.leaf("x", np.zeros((1, segnet.cfg.in_channels, size, size), dtype=np.float32))
    logits = segnet.apply(g, x)
    for ref in refs:
        g.forward({"x": ref.load_image()[None]})
        pred = logits.value[0].argmax(axis=0)
        cm.accumulate(pred, ref.load_mask(evaluation=evaluation))
    per_class = iou(cm)
    return {"miou": miou(cm), "fwiou": fwiou(cm),
            "iou": [None if np.isnan(v) else float(v) for v in per_class]}


def semantic_preservation(ref_segnet, translator, src_refs) -> float:
    """mIoU of a target-domain reference segmenter applied to translated
    source images, scored against the source ground truth. High values mean
    the translator moved appearance without moving semantics."""
    from . import autodiff as ad

    if not src_refs:
        raise MetricsError("no source scenes given")
    cm = ConfusionMatrix(ref_segnet.cfg.n_classes)
    g = ad.Graph()
    size = ref_segnet.cfg.image_size
    x = g.leaf("x", np.zeros((1, ref_segnet.cfg.in_channels, size, size), dtype=np.float32))
    translated = translator.apply(g, x)
    logits = ref_segnet.apply(g, translated)
    for ref in src_refs:
        g.forward({"x": ref.load_image()[None]})
        pred = logits.value[0].argmax(axis=0)
        cm.accumulate(pred, ref.load_mask())
    return miou(cm)
