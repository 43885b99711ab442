"""Training loss (BCE + soft Dice) and per-image Dice / IoU evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


def _check_binary(target: torch.Tensor) -> None:
    if not torch.all((target == 0) | (target == 1)):
        bad = target[(target != 0) & (target != 1)].flatten()[:5].tolist()
        raise ValueError(f"target mask must be binary, found values such as {bad}")


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # log-sum-exp form: max(z,0) - z*t + log(1 + exp(-|z|))
    return F.binary_cross_entropy_with_logits(logits, target)


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps), per image, batch-averaged."""
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    dice = (2 * inter + eps) / (p.sum(1) + t.sum(1) + eps)
    return (1 - dice).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_SMOOTH,
                  validate: bool = True) -> torch.Tensor:
    if logits.shape != target.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    if validate:
        _check_binary(target)
    return bce_loss(logits, target) + soft_dice_loss(logits, target, eps)


def _as_bool(mask) -> np.ndarray:
    if torch.is_tensor(mask):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("metric inputs must be binary masks")
        mask = mask.astype(bool)
    return mask


def _counts(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise DimensionError(f"pred {p.shape} and gt {g.shape} differ in shape")
    inter = int(np.count_nonzero(p & g))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice_coefficient(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    inter, np_, ng = _counts(pred, gt)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def iou(pred, gt) -> float:
    """|P & G| / |P | G|; two empty masks score 1.0."""
    inter, np_, ng = _counts(pred, gt)
    union = np_ + ng - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricReport:
    dataset_name: str
    per_image: list[tuple[str, float, float]] = field(default_factory=list)
    threshold: float = 0.5
    skipped: list[str] = field(default_factory=list)

    @property
    def mDice(self) -> float:
        return float(np.mean([d for _, d, _ in self.per_image])) if self.per_image else float("nan")

    @property
    def mIoU(self) -> float:
        return float(np.mean([j for _, _, j in self.per_image])) if self.per_image else float("nan")

    def to_lines(self) -> str:
        """Machine-readable form: a '#' header, then ``id dice iou`` rows."""
        out = [f"# dataset {self.dataset_name} n {len(self.per_image)} skipped {len(self.skipped)} "
               f"threshold {self.threshold:g} mDice {self.mDice:.6f} mIoU {self.mIoU:.6f}"]
        out += [f"{i} {d:.6f} {j:.6f}" for i, d, j in self.per_image]
        return "\n".join(out) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "MetricReport":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("metric file must start with a '#' header")
        head = lines[0][1:].split()
        fields = dict(zip(head[::2], head[1::2]))
        rows = []
        for line in lines[1:]:
            if line.strip():
                i, d, j = line.split()
                rows.append((i, float(d), float(j)))
        return cls(fields["dataset"], rows, float(fields.get("threshold", 0.5)))

    def to_table(self) -> str:
        out = [f"dataset: {self.dataset_name}",
               f"images: {len(self.per_image)} (skipped {len(self.skipped)})",
               f"mDice: {self.mDice:.3f}",
               f"mIoU: {self.mIoU:.3f}",
               "",
               f"{'id':<24} {'dice':>8} {'iou':>8}"]
        out += [f"{i:<24} {d:>8.4f} {j:>8.4f}" for i, d, j in self.per_image]
        return "\n".join(out) + "\n"


@torch.no_grad()
def predict_probability(model, image: torch.Tensor, input_size=(352, 352),
                        out_size=None) -> torch.Tensor:
    """Foreground probability for one (3, H, W) image at ``out_size`` (defaults
    to the image's own size)."""
    out_size = tuple(out_size or image.shape[-2:])
    x = image.unsqueeze(0).float()
    if tuple(x.shape[-2:]) != tuple(input_size):
        x = F.interpolate(x, size=tuple(input_size), mode="bilinear", align_corners=False)
    prob = torch.sigmoid(model(x))
    if tuple(prob.shape[-2:]) != out_size:
        prob = F.interpolate(prob, size=out_size, mode="bilinear", align_corners=False)
    return prob[0, 0]


def evaluate_dataset(model, dataset, threshold: float = 0.5, input_size=(352, 352),
                     name: str = "dataset") -> MetricReport:
    """Per-image Dice/IoU at the ground truth's native resolution.

    ``dataset`` yields :class:`~lapformer.data.Sample` objects or records that
    :func:`~lapformer.data.load_sample` can read. Items that fail to load are
    logged, listed in ``report.skipped`` and left out of the means.
    """
    from .data import Sample, load_sample

    items = list(dataset)
    if not items:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    report = MetricReport(name, threshold=threshold)
    try:
        for item in items:
            if isinstance(item, Sample):
                sample = item
            else:
                try:
                    sample = load_sample(item)
                except (OSError, ValueError) as e:
                    log.warning("skipping %s: %s", getattr(item, "id", item), e)
                    report.skipped.append(str(getattr(item, "id", item)))
                    continue
            gt = sample.mask[0].numpy().astype(bool)
            prob = predict_probability(model, sample.image, input_size, gt.shape)
            pred = (prob > threshold).numpy()
            report.per_image.append((sample.id, dice_coefficient(pred, gt), iou(pred, gt)))
    finally:
        model.train(was_training)
    if not report.per_image:
        raise ValueError(f"no readable samples in {name} ({len(report.skipped)} skipped)")
    return report
