"""TinyFcn: a small fully convolutional net with hand-written backprop, and its SGD loop.

Every layer is a 3x3, stride-1, same-padded convolution computed as an
im2col matrix product; hidden layers are followed by a ReLU.  Inputs are RGB
in [0, 255], scaled to [0, 1] inside ``forward``.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import confusion, iou_from_confusion
from .distributions import InvalidInputError
from .kernels import KernelParams
from .losses import LossConfig, total_loss_and_grad
from .prior import PriorConstraints

MAGIC = b"TFCN"
VERSION = 1
KSIZE = 3


@dataclass
class Conv:
    weight: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray  # (out,)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


class TinyFcn:
    def __init__(self, layers: list[Conv]):
        if not layers:
            raise InvalidInputError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_ch != b.in_ch:
                raise InvalidInputError("layer channel counts do not chain")
        self.layers = layers

    @classmethod
    def init(cls, num_classes: int, hidden=(16, 16), in_ch: int = 3, seed: int = 0) -> "TinyFcn":
        """He-initialised weights, zero biases."""
        rng = np.random.default_rng(seed)
        chans = [in_ch, *hidden, num_classes]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            std = np.sqrt(2.0 / (cin * KSIZE * KSIZE))
            layers.append(Conv(rng.normal(0.0, std, (cout, cin, KSIZE, KSIZE)), np.zeros(cout)))
        return cls(layers)

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_ch

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def copy(self) -> "TinyFcn":
        return TinyFcn([Conv(l.weight.copy(), l.bias.copy()) for l in self.layers])


def im2col(x: np.ndarray) -> np.ndarray:
    """``(H, W, C)`` -> ``(H*W, C*9)`` patches, column index ``c*9 + dy*3 + dx``."""
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((h, w, c, KSIZE * KSIZE))
    for dy in range(KSIZE):
        for dx in range(KSIZE):
            cols[:, :, :, dy * KSIZE + dx] = xp[dy : dy + h, dx : dx + w, :]
    return cols.reshape(h * w, c * KSIZE * KSIZE)


def col2im(cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of ``im2col``."""
    cols = cols.reshape(h, w, c, KSIZE * KSIZE)
    xp = np.zeros((h + 2, w + 2, c))
    for dy in range(KSIZE):
        for dx in range(KSIZE):
            xp[dy : dy + h, dx : dx + w, :] += cols[:, :, :, dy * KSIZE + dx]
    return xp[1:-1, 1:-1, :]


@dataclass
class ForwardCache:
    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    shape: tuple = ()


def _prepare(model: TinyFcn, image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.in_ch:
        raise InvalidInputError(f"image must be (H, W, {model.in_ch}), got {x.shape}")
    return x / 255.0


def forward(model: TinyFcn, image, return_cache: bool = False):
    x = _prepare(model, image)
    h, w, _ = x.shape
    cache = ForwardCache(shape=(h, w))
    last = len(model.layers) - 1
    for k, layer in enumerate(model.layers):
        cols = im2col(x)
        z = cols @ layer.weight.reshape(layer.out_ch, -1).T + layer.bias
        cache.cols.append(cols)
        cache.pre.append(z)
        x = (z if k == last else np.maximum(z, 0.0)).reshape(h, w, layer.out_ch)
    return (x, cache) if return_cache else x


def backward(model: TinyFcn, cache: ForwardCache, grad_logits) -> list[np.ndarray]:
    """Gradients of ``sum(logits * grad_logits)`` w.r.t. ``model.params()`` (same order)."""
    h, w = cache.shape
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (h, w, model.num_classes):
        raise InvalidInputError(f"grad shape {g.shape} does not match logits {(h, w, model.num_classes)}")
    g = g.reshape(h * w, -1)
    grads: list[np.ndarray] = []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if k != len(model.layers) - 1:
            g = g * (cache.pre[k] > 0)
        gw = (g.T @ cache.cols[k]).reshape(layer.weight.shape)
        gb = g.sum(axis=0)
        grads = [gw, gb] + grads
        if k > 0:
            gcols = g @ layer.weight.reshape(layer.out_ch, -1)
            g = col2im(gcols, h, w, layer.in_ch).reshape(h * w, -1)
    return grads


def predict(model: TinyFcn, image) -> np.ndarray:
    return np.argmax(forward(model, image), axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: TinyFcn) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(model.layers))]
    for l in model.layers:
        out.append(struct.pack("<III", l.in_ch, l.out_ch, KSIZE))
        out.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> TinyFcn:
    if data[:4] != MAGIC:
        raise CheckpointError("not a TFCN checkpoint")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    layers = []
    for _ in range(count):
        if pos + 12 > len(data):
            raise CheckpointError("truncated layer header")
        cin, cout, ks = struct.unpack_from("<III", data, pos)
        pos += 12
        if ks != KSIZE:
            raise CheckpointError(f"unsupported kernel size {ks}")
        nw = cout * cin * ks * ks
        if pos + 8 * (nw + cout) > len(data):
            raise CheckpointError("truncated layer payload")
        wgt = np.frombuffer(data, "<f8", nw, pos).reshape(cout, cin, ks, ks).astype(np.float64)
        pos += 8 * nw
        b = np.frombuffer(data, "<f8", cout, pos).astype(np.float64)
        pos += 8 * cout
        layers.append(Conv(wgt, b))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    try:
        return TinyFcn(layers)
    except InvalidInputError as exc:
        raise CheckpointError(str(exc)) from None


def save_checkpoint(path, model: TinyFcn) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path) -> TinyFcn:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    halve_every: int = 1000
    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    hidden: tuple = (16, 16)

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if self.halve_every < 1 or self.total_steps < 0:
            raise InvalidInputError("halve_every must be positive and total_steps nonnegative")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidInputError("momentum must lie in [0, 1) and weight_decay be nonnegative")

    def lr_at(self, step: int) -> float:
        return self.lr * 2.0 ** (-(step // self.halve_every))


@dataclass
class StepRecord:
    step: int
    class_loss: float
    neighb_loss: float
    total: float
    lr: float
    feasible_fraction: float
    constraint_violations: int
    miou: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, per-class IoU, mean)
    seconds: float = 0.0

    CSV_HEADER = ("step", "class_loss", "neighb_loss", "total", "lr", "feasible_fraction", "constraint_violations", "miou")

    def rows(self):
        for r in self.records:
            yield (r.step, r.class_loss, r.neighb_loss, r.total, r.lr, r.feasible_fraction, r.constraint_violations, r.miou)


class SgdMomentum:
    """``v <- mu v + (g + wd w)``, ``w <- w - lr v``."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr: float) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= lr * v


def evaluate(model: TinyFcn, scenes) -> tuple[np.ndarray, float]:
    """Dataset-level IoU from the accumulated confusion matrix."""
    k = model.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for s in scenes:
        conf += confusion(predict(model, s.image), s.gt_mask, k)
    return iou_from_confusion(conf)


def image_loss_and_grads(model, scene, kernel: KernelParams, loss_cfg: LossConfig, constraints: PriorConstraints):
    logits, cache = forward(model, scene.image, return_cache=True)
    report = total_loss_and_grad(loss_cfg, kernel, scene.feature_image(), logits, scene.labels, constraints)
    return report, backward(model, cache, report.grad)


def train(
    model: TinyFcn,
    dataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    kernel: KernelParams | None = None,
    constraints: PriorConstraints | None = None,
    val=None,
    callback=None,
) -> TrainLog:
    """Minibatch SGD on the mean per-image loss; deterministic given ``train_cfg.seed``.

    Each record also counts, over the batch, how often the prior reported a
    feasible solution and how often a feasible solution's mass floors were
    violated when re-checked (expected: never).
    """
    if not dataset:
        raise InvalidInputError("dataset is empty")
    kernel = KernelParams() if kernel is None else kernel
    constraints = PriorConstraints() if constraints is None else constraints
    rng = np.random.default_rng(train_cfg.seed)
    opt = SgdMomentum(model.params(), train_cfg.momentum, train_cfg.weight_decay)
    log = TrainLog()
    start = time.perf_counter()
    order = rng.permutation(len(dataset))
    cursor = 0
    for step in range(train_cfg.total_steps):
        batch = []
        for _ in range(train_cfg.batch_size):
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            batch.append(dataset[order[cursor]])
            cursor += 1
        acc = [np.zeros_like(p) for p in model.params()]
        cl = nl = tot = 0.0
        feasible = violations = 0
        for scene in batch:
            report, grads = image_loss_and_grads(model, scene, kernel, loss_cfg, constraints)
            for a, g in zip(acc, grads):
                a += g
            cl += report.class_loss
            nl += report.neighb_loss
            tot += report.total
            if loss_cfg.use_prior and report.prior.feasible:
                feasible += 1
                c = constraints.for_labels(scene.labels)
                masses = report.aux.reshape(-1, report.aux.shape[-1])[:, list(scene.labels.present)].mean(axis=0)
                if np.any(masses < c - 1e-12):
                    violations += 1
        n = len(batch)
        lr = train_cfg.lr_at(step)
        opt.step([a / n for a in acc], lr)
        rec = StepRecord(step, cl / n, nl / n, tot / n, lr, feasible / n, violations)
        if val is not None and train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
            iou, mean = evaluate(model, val)
            rec.miou = mean
            log.evals.append((step + 1, iou, mean))
        log.records.append(rec)
        if callback is not None:
            callback(rec)
    if val is not None and (not log.evals or log.evals[-1][0] != train_cfg.total_steps):
        iou, mean = evaluate(model, val)
        log.evals.append((train_cfg.total_steps, iou, mean))
        if log.records:
            log.records[-1].miou = mean
    log.seconds = time.perf_counter() - start
    return log
