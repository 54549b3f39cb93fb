"""SGD training loop for branched models and the input-space augmentations."""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .core import BranchedModel, Reduction, infer, inference_reduction, loss, reduce, topk_errors, tta_infer
from .data import Dataset, batches
from .tensor import NonFiniteError, Tensor, reset_graph

log = logging.getLogger(__name__)

POLICIES = ("none", "cifar_standard", "imagenet_standard")


@dataclass
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 2e-4
    # (epoch, divisor): divide once that many epochs have completed
    schedule: List[Tuple[int, float]] = field(default_factory=list)
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        self.schedule = [(int(e), float(d)) for e, d in self.schedule]
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing: {epochs}")
        if any(d <= 0 for _, d in self.schedule):
            raise ValueError("schedule divisors must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        return d


def lr_at(cfg: OptimConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch`` (i.e. after ``epoch`` completed epochs)."""
    lr = cfg.lr0
    for boundary, divisor in cfg.schedule:
        if boundary <= epoch:
            lr /= divisor
    return lr


class SGD:
    """Momentum SGD with coupled weight decay, optionally Nesterov."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.cfg, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params, grads, velocity, cfg: OptimConfig, lr: float) -> None:
    """In-place update.

    classic:  v <- m v + (g + wd p);  p <- p - lr v
    nesterov: v <- m v + (g + wd p);  p <- p - lr (g + wd p + m v)
    """
    m, wd = cfg.momentum, cfg.weight_decay
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if p.data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        d = g + wd * p.data
        v *= m
        v += d
        if cfg.nesterov:
            p.data -= (lr * (d + m * v)).astype(p.data.dtype)
        else:
            p.data -= (lr * v).astype(p.data.dtype)


# --- input augmentation ---------------------------------------------------------


def _random_crop_flip(images, rng, pad=4):
    n, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, oy:oy + h, ox:ox + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def _resize_bilinear(img, out_h, out_w):
    h, w, _ = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _random_resized_crop(img, rng, scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)):
    h, w, _ = img.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            y = rng.integers(0, h - ch + 1)
            x = rng.integers(0, w - cw + 1)
            return _resize_bilinear(img[y:y + ch, x:x + cw], h, w)
    return img


def color_jitter(img, rng, strength=0.4):
    """Brightness, contrast and saturation factors drawn from [1-s, 1+s]."""
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    img = img * b
    gray_mean = (img @ np.array([0.299, 0.587, 0.114])).mean()
    img = (img - gray_mean) * c + gray_mean
    gray = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
    img = (img - gray) * s + gray
    return np.clip(img, 0.0, 1.0)


def input_augment(images: np.ndarray, policy: str, rng: np.random.Generator) -> np.ndarray:
    if policy == "none":
        return images
    if policy == "cifar_standard":
        return _random_crop_flip(images, rng)
    if policy == "imagenet_standard":
        out = np.empty_like(images)
        for i, img in enumerate(images):
            img = _random_resized_crop(img, rng)
            if rng.random() < 0.5:
                img = img[:, ::-1]
            out[i] = color_jitter(img, rng)
        return out
    raise ValueError(f"unknown augmentation policy {policy!r}; expected one of {POLICIES}")


# --- loop ------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    train_top5: float
    test_top1: float
    test_top5: float
    ms_per_batch: float


class TrainingDiverged(RuntimeError):
    pass


def evaluate(model: BranchedModel, ds: Dataset, reduction="sum", tta=False, batch_size=256, rng=None):
    """Top-1/top-5 error (%) and mean milliseconds per batch on ``ds``."""
    # fixed stream so eval-time random draws repeat across calls
    rng = rng if rng is not None else np.random.default_rng(0)
    all_probs = []
    t0 = time.perf_counter()
    chunks = batches(len(ds), batch_size)
    for idx in chunks:
        x = Tensor(ds.normalize(ds.images[idx]))
        p = tta_infer(model, x, reduction, rng) if tta else infer(model, x, reduction, rng)
        all_probs.append(p.data.reshape(len(idx), -1))
    elapsed = time.perf_counter() - t0
    probs = np.concatenate(all_probs) if all_probs else np.zeros((0, model.num_classes))
    errs = topk_errors(probs, ds.labels)
    return errs[1], errs[5], 1000.0 * elapsed / max(len(chunks), 1)


def train_step(model: BranchedModel, opt: SGD, x: Tensor, y, reduction: Reduction, lr: float, rng):
    model.train()
    reset_graph()
    probs = model.forward(x, rng)
    r = model.total_branches
    l = loss(probs, y, reduction, r)
    value = float(l.data.reshape(()))
    if not np.isfinite(value):
        reset_graph()
        raise TrainingDiverged(f"loss became {value}")
    opt.zero_grad()
    l.backward()
    opt.step(lr)
    reduced = reduce(probs.detach(), r, inference_reduction(reduction))
    return value, reduced.data.reshape(len(y), -1)


def train(
    model: BranchedModel,
    train_set: Dataset,
    test_set: Optional[Dataset],
    cfg: OptimConfig,
    train_reduction="none",
    infer_reduction=None,
    policy: str = "none",
    rng: Optional[np.random.Generator] = None,
    tta: bool = False,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
    dump_path=None,
    eval_batch_size: int = 256,
) -> List[EpochStats]:
    """Run ``cfg.epochs`` epochs of shuffled minibatch SGD.

    The test split (when given) is evaluated after every epoch with
    ``infer_reduction`` (default: the train reduction, "none" -> geo).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    train_reduction = Reduction.parse(train_reduction)
    infer_reduction = inference_reduction(infer_reduction or train_reduction)
    opt = SGD(model.parameters(), cfg)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        losses, probs_all, labels_all = [], [], []
        t0 = time.perf_counter()
        chunks = batches(len(train_set), cfg.batch_size, rng)
        for idx in chunks:
            raw = input_augment(train_set.images[idx], policy, rng)
            x = Tensor(train_set.normalize(raw))
            y = train_set.labels[idx]
            try:
                value, reduced = train_step(model, opt, x, y, train_reduction, lr, rng)
            except (TrainingDiverged, NonFiniteError) as exc:
                if dump_path is not None:
                    from .checkpoint import save_model

                    save_model(dump_path, model)
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}") from exc
            losses.append(value * len(idx))
            probs_all.append(reduced)
            labels_all.append(y)
        ms = 1000.0 * (time.perf_counter() - t0) / len(chunks)
        tr = topk_errors(np.concatenate(probs_all), np.concatenate(labels_all))
        te1 = te5 = float("nan")
        if test_set is not None:
            te1, te5, _ = evaluate(model, test_set, infer_reduction, tta=tta, batch_size=eval_batch_size)
        stats = EpochStats(epoch + 1, lr, sum(losses) / len(train_set), tr[1], tr[5], te1, te5, ms)
        log.info(
            "epoch %d lr %.4g loss %.4f train-err %.2f test-err %.2f",
            stats.epoch, lr, stats.train_loss, stats.train_top1, stats.test_top1,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    model.eval()
    return history
