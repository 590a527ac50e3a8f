"""Two-step training loop, optimizer, schedule, and evaluation metrics.

Each batch runs two passes through the shared backbone. The MIL step shuffles
patches across the batch, recomposes them and regresses each mixed bag's soft
label from the patch tokens. The CLS step feeds the same images unshuffled:
the soft-label head regresses again (now on intact bags) and the class head
predicts the hard label from the CLS token. The three losses are summed into
one scalar and a single Adam update is applied per batch. The checkpoint with
the highest validation accuracy is the training output.

Three variants share this code path behind feature flags: ``mil_si`` (both
steps, shuffle on), ``mil_cls`` (CLS step only, soft-label head on) and
``backbone_only`` (CLS step only, class loss only).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .bagging import Bag, split_into_patches, mil_distribute, cls_distribute, compose_bag
from .model import MILTransformer, ModelConfig
from .rand import make_rng, derive_seed
from .synthdata import AugConfig, SplitData, augment, eval_transform

__all__ = [
    "TrainConfig", "LossBreakdown", "MetricsReport", "TrainResult", "EpochLog",
    "VARIANTS", "TrainingDiverged", "lr_at", "adam_init", "adam_update",
    "soft_label_mse", "mil_step", "cls_step", "train", "evaluate",
    "compute_metrics", "write_epoch_csv", "paper_train_config",
]

VARIANTS = ("backbone_only", "mil_cls", "mil_si")

CSV_HEADER = "epoch,lr,l_mil,l_mil_cls,l_cls,total,val_accuracy"


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr0: float = 3e-4               # desk-scale from-scratch preset
    weight_decay: float = 0.05      # decoupled (AdamW-style)
    lr_final_ratio: float = 1 / 20  # final lr = lr0 * ratio
    seed: int = 0
    normalize_soft_label: bool = True  # divide targets and predictions by n in the loss
    w_mil: float = 1.0
    w_mil_cls: float = 1.0
    w_cls: float = 1.0
    schedule: str = "cosine"        # "cosine" or "staircase" (20 discrete decays)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0.0 < self.lr_final_ratio <= 1.0):
            raise ValueError(f"lr_final_ratio must be in (0, 1], got {self.lr_final_ratio}")
        if self.schedule not in ("cosine", "staircase"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def paper_train_config(**overrides) -> TrainConfig:
    """Full-scale preset: lr 1e-5 (transfer-learning regime), 50 epochs."""
    base = dict(epochs=50, batch_size=8, lr0=1e-5, weight_decay=0.05)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class LossBreakdown:
    l_mil: float
    l_mil_cls: float
    l_cls: float
    total: float

    @classmethod
    def combine(cls, l_mil: float, l_mil_cls: float, l_cls: float,
                w=(1.0, 1.0, 1.0)) -> "LossBreakdown":
        return cls(l_mil, l_mil_cls, l_cls,
                   w[0] * l_mil + w[1] * l_mil_cls + w[2] * l_cls)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_mil: float
    l_mil_cls: float
    l_cls: float
    total: float
    val_accuracy: float

    def csv_row(self) -> str:
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in
                        (self.lr, self.l_mil, self.l_mil_cls, self.l_cls,
                         self.total, self.val_accuracy)])


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: list = field(default_factory=list)  # metrics that hit a 0/0 and were set to 0

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d.update(extra)
        return json.dumps(d, sort_keys=True, indent=2)


def compute_metrics(y_true, y_pred) -> MetricsReport:
    """Confusion counts and the five standard binary metrics (positive class = 1)."""
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    if yt.shape != yp.shape:
        raise ValueError(f"label vectors disagree: {yt.shape} vs {yp.shape}")
    tp = int(((yt == 1) & (yp == 1)).sum())
    fp = int(((yt == 0) & (yp == 1)).sum())
    fn = int(((yt == 1) & (yp == 0)).sum())
    tn = int(((yt == 0) & (yp == 0)).sum())
    undefined: list = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    return MetricsReport(
        accuracy=ratio(tp + tn, tp + fp + fn + tn, "accuracy"),
        precision=precision,
        recall=recall,
        specificity=ratio(tn, tn + fp, "specificity"),
        f1=ratio(2 * precision * recall, precision + recall, "f1"),
        tp=tp, fp=fp, fn=fn, tn=tn, undefined=undefined)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch: lr0 at the first epoch, lr0 * ratio at the last.

    Cosine mode anneals smoothly; staircase mode takes 20 discrete geometric
    decays (meaningful for epochs >= 20) reaching the same endpoints.
    """
    lr_f = cfg.lr0 * cfg.lr_final_ratio
    if cfg.epochs == 1:
        return cfg.lr0
    if cfg.schedule == "staircase":
        stage = min(19, (epoch * 20) // cfg.epochs)
        return cfg.lr0 * cfg.lr_final_ratio ** (stage / 19.0)
    t = epoch / (cfg.epochs - 1)
    return lr_f + (cfg.lr0 - lr_f) * (1.0 + math.cos(math.pi * t)) / 2.0


# ---------------------------------------------------------------------------
# optimizer

def adam_init(params) -> dict:
    return {
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_update(params, grads, state, t: int, lr: float, weight_decay: float = 0.0,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam step with decoupled weight decay, in place."""
    if t < 1:
        raise ValueError(f"step count must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * step - lr * weight_decay * p.data


# ---------------------------------------------------------------------------
# the two steps

@dataclass
class StepResult:
    loss: T.Tensor | None
    plan: object = None


def soft_label_mse(pred: T.Tensor, targets: np.ndarray, bag_size: int,
                   normalize: bool = True) -> T.Tensor:
    """Mean squared error between predicted and true bag soft labels.

    With ``normalize`` both sides are divided by the bag size so the loss
    magnitude is comparable across patch sizes; the optimum is unchanged.
    """
    targets = np.asarray(targets, dtype=pred.dtype)
    if normalize:
        pred = T.mul(pred, 1.0 / bag_size)
        targets = targets / bag_size
    diff = T.sub(pred, T.Tensor(targets))
    return T.mean(T.mul(diff, diff))


def _split_batch(batch, model: MILTransformer) -> list[Bag]:
    cfg = model.cfg
    return [split_into_patches(img, cfg.patch_side, cfg.num_categories) for img in batch]


def mil_step(batch, model: MILTransformer, seed: int, shuffle: bool = True,
             normalize: bool = True) -> StepResult:
    """Soft-label regression on (by default) batch-shuffled bags.

    With ``shuffle=False`` the distributor is literally the identity
    distributor of the CLS step, so disabling the shuffle reproduces the
    no-shuffle ablation by construction.
    """
    bags = _split_batch(batch, model)
    if shuffle:
        bags, softs, plan = mil_distribute(bags, seed)
    else:
        bags, softs = cls_distribute(bags)
        plan = None
    images = np.stack([compose_bag(b, model.cfg.image_side) for b in bags])
    tokens = model.backbone_forward(images)
    pred = model.mil_head(tokens.patch_tokens)
    targets = np.stack([s.as_vector() for s in softs])
    loss = soft_label_mse(pred, targets, model.cfg.num_patches, normalize)
    return StepResult(loss=loss, plan=plan)


@dataclass
class ClsStepResult:
    l_mil_cls: T.Tensor | None
    l_cls: T.Tensor


def cls_step(batch, model: MILTransformer, normalize: bool = True,
             use_mil_head: bool = True) -> ClsStepResult:
    """Unshuffled pass: class loss from the CLS token, soft-label loss on intact bags."""
    bags, softs = cls_distribute(_split_batch(batch, model))
    images = np.stack([compose_bag(b, model.cfg.image_side) for b in bags])
    tokens = model.backbone_forward(images)
    l_mil_cls = None
    if use_mil_head:
        pred = model.mil_head(tokens.patch_tokens)
        targets = np.stack([s.as_vector() for s in softs])
        l_mil_cls = soft_label_mse(pred, targets, model.cfg.num_patches, normalize)
    logits = model.cls_head(tokens.cls)
    labels = np.array([img.class_label for img in batch])
    l_cls = T.cross_entropy(logits, labels)
    return ClsStepResult(l_mil_cls=l_mil_cls, l_cls=l_cls)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: MILTransformer
    rows: list
    best_epoch: int
    best_val_accuracy: float
    variant: str


def _accuracy(model: MILTransformer, images: list) -> float:
    pixels = np.stack([im.pixels for im in images])
    labels = np.array([im.class_label for im in images])
    return float((model.predict(pixels) == labels).mean())


def train(splits: dict, model_cfg: ModelConfig, cfg: TrainConfig,
          variant: str = "mil_si", aug: AugConfig | None = None) -> TrainResult:
    """Run the two-step procedure and return the best-validation model.

    ``splits`` maps "train"/"val" to SplitData (or any object with
    ``.images``). Train images are stochastically augmented per epoch;
    validation uses only crop + resize. One Adam update per batch is applied
    to the summed loss. A non-finite loss aborts with its coordinates.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if aug is None:
        aug = AugConfig(resize_to=model_cfg.image_side)
    if aug.resize_to != model_cfg.image_side:
        raise ValueError(
            f"augmentation resizes to {aug.resize_to} but the model expects {model_cfg.image_side}")

    train_images = list(splits["train"].images)
    val_images = [eval_transform(im, aug) for im in splits["val"].images]
    if not train_images or not val_images:
        raise ValueError("train and val splits must be non-empty")

    model = MILTransformer(model_cfg, seed=cfg.seed)
    params = model.parameters()
    state = adam_init(params)
    weights = (cfg.w_mil, cfg.w_mil_cls, cfg.w_cls)

    rows: list[EpochLog] = []
    best_acc = -1.0
    best_epoch = -1
    best_params = None
    step = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = make_rng(cfg.seed, 1, epoch).permutation(len(train_images))
        sums = np.zeros(3, dtype=np.float64)
        batches = 0
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch = [augment(train_images[i], aug, derive_seed(cfg.seed, 2, epoch, int(i)))
                     for i in idx]
            with T.Graph() as g:
                terms = []
                v_mil = v_mil_cls = 0.0
                if variant == "mil_si":
                    res = mil_step(batch, model, derive_seed(cfg.seed, 3, epoch, bi),
                                   shuffle=True, normalize=cfg.normalize_soft_label)
                    v_mil = res.loss.item()
                    terms.append(T.mul(res.loss, cfg.w_mil))
                cres = cls_step(batch, model, normalize=cfg.normalize_soft_label,
                                use_mil_head=(variant != "backbone_only"))
                if cres.l_mil_cls is not None:
                    v_mil_cls = cres.l_mil_cls.item()
                    terms.append(T.mul(cres.l_mil_cls, cfg.w_mil_cls))
                v_cls = cres.l_cls.item()
                terms.append(T.mul(cres.l_cls, cfg.w_cls))
                total = terms[0]
                for t in terms[1:]:
                    total = T.add(total, t)
            bd = LossBreakdown.combine(v_mil, v_mil_cls, v_cls, weights)
            if not math.isfinite(bd.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {bd}")
            T.backward(g, total)
            step += 1
            adam_update(params, [p.grad for p in params], state, step, lr, cfg.weight_decay)
            T.zero_grad(params)
            sums += (bd.l_mil, bd.l_mil_cls, bd.l_cls)
            batches += 1

        means = sums / batches
        bd = LossBreakdown.combine(float(means[0]), float(means[1]), float(means[2]), weights)
        val_acc = _accuracy(model, val_images)
        rows.append(EpochLog(epoch=epoch, lr=lr, l_mil=bd.l_mil, l_mil_cls=bd.l_mil_cls,
                             l_cls=bd.l_cls, total=bd.total, val_accuracy=val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = {k: v.data.copy() for k, v in model.params.items()}

    for k, v in model.params.items():
        v.data = best_params[k]
    return TrainResult(model=model, rows=rows, best_epoch=best_epoch,
                       best_val_accuracy=best_acc, variant=variant)


def evaluate(images: list, model: MILTransformer) -> MetricsReport:
    """Metrics of CLS-head argmax predictions on already eval-transformed images."""
    if not images:
        raise ValueError("cannot evaluate an empty split")
    pixels = np.stack([im.pixels for im in images])
    labels = np.array([im.class_label for im in images])
    return compute_metrics(labels, model.predict(pixels))


def write_epoch_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")
