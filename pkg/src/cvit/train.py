"""Losses, optimizer, schedule, synthetic data and the toy training loop."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .rng import RngState


# -- losses ----------------------------------------------------------------------

def _labels(labels, n, k):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _one_hot(labels, k, dtype):
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _labels(labels, n, k)
    picked = T.log_softmax(logits) * _one_hot(labels, k, logits.dtype)
    return -(picked.sum() * (1.0 / n))


@dataclass(frozen=True)
class KDParams:
    alpha: float = 0.5
    temperature: float = 2.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")


def kd_loss(student_logits, teacher_logits, labels, kd=KDParams()):
    """``alpha * T^2 * KL(p_teacher || p_student) + (1 - alpha) * CE(student, labels)``.

    Both distributions are softened by the temperature; the teacher side is a
    constant, so no gradient reaches it.
    """
    student = T.as_tensor(student_logits)
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, T.Tensor) else teacher_logits)
    if student.shape != teacher.shape:
        raise DimensionError(f"student logits {student.shape} vs teacher logits {teacher.shape}")
    n = student.shape[0]
    t = kd.temperature
    with T.no_grad():
        log_pt = T.log_softmax(T.Tensor(teacher.astype(student.dtype)) * (1.0 / t)).data
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(student * (1.0 / t))
    kl = ((log_ps - log_pt) * (-pt)).sum() * (1.0 / n)
    ce = cross_entropy(student, labels)
    if kd.alpha == 0:
        return ce
    return kl * (kd.alpha * t * t) + ce * (1.0 - kd.alpha)


def kl_term(student_logits, teacher_logits, temperature):
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T)) as a float."""
    s = np.asarray(student_logits, dtype=np.float64) / temperature
    t = np.asarray(teacher_logits, dtype=np.float64) / temperature
    log_ps = s - s.max(-1, keepdims=True)
    log_ps -= np.log(np.exp(log_ps).sum(-1, keepdims=True))
    log_pt = t - t.max(-1, keepdims=True)
    log_pt -= np.log(np.exp(log_pt).sum(-1, keepdims=True))
    return float((np.exp(log_pt) * (log_pt - log_ps)).sum(-1).mean())


# -- optimisation ----------------------------------------------------------------

@dataclass
class OptimConfig:
    max_lr: float = 3e-3
    min_lr: float = 3e-4
    weight_decay: float = 1.25e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16

    def __post_init__(self):
        if self.min_lr > self.max_lr:
            raise ContractError(f"min_lr {self.min_lr} exceeds max_lr {self.max_lr}")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")


def cosine_lr(epoch, epochs, max_lr, min_lr):
    """Single-cycle cosine from ``max_lr`` at epoch 0 to ``min_lr`` at the last epoch."""
    if epochs <= 1:
        return max_lr
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return min_lr + 0.5 * (max_lr - min_lr) * (1 + math.cos(math.pi * frac))


def decays(name, param):
    """Weight decay applies to conv and linear weights only, not BN affine params or biases."""
    return param.ndim >= 2


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [(n, p) for n, p in named_params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for _, p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for _, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if self.weight_decay and decays(name, p):
                p.data = p.data - (self.lr * self.weight_decay) * p.data
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[id(p)] = b1 * self.m[id(p)] + (1 - b1) * g
            v = self.v[id(p)] = b2 * self.v[id(p)] + (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * upd).astype(p.data.dtype)


# -- synthetic data --------------------------------------------------------------

@dataclass
class ToyDataset:
    """Class-template images plus Gaussian noise, balanced across classes."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    num_classes: int
    seed: int

    @property
    def image_size(self):
        return self.train_images.shape[-1]


def make_toy_dataset(num_classes=2, train_per_class=64, val_per_class=32, image_size=64,
                     noise=0.5, seed=0):
    """Each class gets a template: a per-channel colour offset plus a smooth
    low-resolution pattern upsampled to ``image_size``. Samples are the
    template plus i.i.d. noise; generation is keyed per sample index, so the
    data do not depend on generation order."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    root = RngState(seed)
    templates = []
    for k in range(num_classes):
        r = root.child(f"template{k}")
        colour = r.normal((3, 1, 1), std=1.0, dtype=np.float64)
        coarse = r.normal((3, 4, 4), std=0.5, dtype=np.float64)
        rep = image_size // 4
        pattern = np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)
        templates.append(colour + pattern)

    def split(name, per_class):
        images = np.empty((num_classes * per_class, 3, image_size, image_size), dtype=np.float32)
        labels = np.empty(num_classes * per_class, dtype=np.int64)
        for k in range(num_classes):
            for j in range(per_class):
                i = k * per_class + j
                r = root.child(f"{name}/{k}/{j}")
                images[i] = templates[k] + r.normal((3, image_size, image_size), std=noise, dtype=np.float64)
                labels[i] = k
        order = root.child(f"{name}/order").permutation(len(labels))
        return images[order], labels[order]

    tx, ty = split("train", train_per_class)
    vx, vy = split("val", val_per_class)
    return ToyDataset(tx, ty, vx, vy, num_classes, seed)


def linear_probe_accuracy(dataset, ridge=1e-2):
    """Validation accuracy of a ridge-regularised least-squares linear classifier on raw pixels."""
    x = dataset.train_images.reshape(len(dataset.train_images), -1).astype(np.float64)
    xv = dataset.val_images.reshape(len(dataset.val_images), -1).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    xv = np.hstack([xv, np.ones((len(xv), 1))])
    y = _one_hot(dataset.train_labels, dataset.num_classes, np.float64) * 2 - 1
    # dual form: far fewer samples than features
    gram = x @ x.T + ridge * np.eye(len(x))
    w = x.T @ np.linalg.solve(gram, y)
    pred = (xv @ w).argmax(1)
    return float((pred == dataset.val_labels).mean())


# -- training loop ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def losses(self):
        return [r.train_loss for r in self.records]

    @property
    def final_val_acc(self):
        return self.records[-1].val_acc if self.records else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "lr", "train_loss", "val_acc"))
        for r in self.records:
            w.writerow((r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_acc)))
        return buf.getvalue()

    def to_json(self):
        return json.dumps([asdict(r) for r in self.records], indent=2)


def predict(model, images, batch_size=64):
    """Eval-mode logits for a numpy image batch."""
    was = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model(T.tensor(images[i:i + batch_size])).data)
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy(model, images, labels):
    if len(labels) == 0:
        return float("nan")
    return float((predict(model, images).argmax(1) == labels).mean())


def train_loop(model, dataset, optim=None, kd=None, rng=None, log=None):
    """Train ``model`` on ``dataset`` and return one record per epoch.

    ``kd`` is an optional ``(teacher, KDParams)`` pair. The learning rate
    follows a per-epoch cosine schedule; batch order comes from ``rng``.
    """
    optim = optim or OptimConfig()
    if isinstance(rng, int) or rng is None:
        rng = RngState(rng or 0)
    n = len(dataset.train_labels)
    if n == 0:
        raise ContractError("training set is empty")
    teacher, kd_params = kd if kd is not None else (None, None)
    if teacher is not None:
        teacher.eval()
    opt = AdamW(model.named_parameters(), optim.max_lr, optim.betas, optim.eps, optim.weight_decay)
    trace = TrainTrace()
    for epoch in range(optim.epochs):
        lr = cosine_lr(epoch, optim.epochs, optim.max_lr, optim.min_lr)
        opt.lr = lr
        model.train()
        order = rng.child(f"epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n, optim.batch_size):
            idx = order[start:start + optim.batch_size]
            if len(idx) < 2:
                continue
            x = T.tensor(dataset.train_images[idx])
            y = dataset.train_labels[idx]
            logits = model(x)
            if teacher is not None:
                with T.no_grad():
                    t_logits = teacher(x).data
                loss = kd_loss(logits, t_logits, y, kd_params)
            else:
                loss = cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        rec = EpochRecord(epoch, lr, float(np.mean(losses)),
                          accuracy(model, dataset.val_images, dataset.val_labels))
        trace.records.append(rec)
        if log is not None:
            log(rec)
    model.eval()
    return trace


# -- gradient checking -----------------------------------------------------------

def relative_errors(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is 1e-3 of the
    largest numeric gradient magnitude (or 1e-12), so entries whose true
    gradient is essentially zero are judged on an absolute scale."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    nmr = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return a
    floor = max(1e-3 * float(np.abs(nmr).max()), 1e-12)
    return np.abs(a - nmr) / np.maximum(np.maximum(np.abs(a), np.abs(nmr)), floor)


def numeric_grad(fn, arrays, eps=1e-4):
    """Central finite differences of scalar ``fn()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = fn()
            flat[i] = old - eps
            fm = fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def check_gradients(loss_fn, tensors, eps=1e-4):
    """Max relative error between autodiff and central differences of ``loss_fn()``.

    ``tensors`` are leaf tensors (requires_grad) whose ``.data`` is perturbed.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    with T.no_grad():
        numeric = numeric_grad(lambda: float(loss_fn().data), [t.data for t in tensors], eps)
    errs = [relative_errors(a, n) for a, n in zip(analytic, numeric)]
    return max((float(e.max()) for e in errs if e.size), default=0.0)


GRADCHECK_MODULES = ("linear", "conv", "bn", "se", "ccffn", "cga", "block", "kd_loss")
KINK_MARGIN = 2e-3


def build_gradcheck_target(selector, dims=8, seed=0):
    """Float64 module and input shape for :func:`gradcheck`.

    Weights are redrawn at fan-in scale and BN affine params moved off
    (1, 0) so every gradient is generic; an ``eps`` step is then small
    relative to every weight.
    """
    from .attention import CascadedGroupAttention, CViTBlock
    from .ccffn import CCFFN
    from .nn.layers import BatchNorm, Conv2d, Linear, SqueezeExcite

    rng = RngState(seed)
    shape = (2, dims, 4, 4)
    with T.precision(np.float64):
        if selector == "linear":
            module, shape = Linear(dims, dims // 2 or 1, rng=rng.child("m")), (3, dims)
        elif selector == "conv":
            module = Conv2d(dims, dims, 3, 2, 1, rng=rng.child("m"))
        elif selector == "bn":
            module = BatchNorm(dims)
        elif selector == "se":
            module = SqueezeExcite(dims, rng=rng.child("m"))
        elif selector == "ccffn":
            module = CCFFN(dims, 2, 2.5, rng=rng.child("m"))
        elif selector == "cga":
            module = CascadedGroupAttention(dims, 2, rng=rng.child("m"))
        elif selector == "block":
            module = CViTBlock(dims, 2, rng=rng.child("m"))
        else:
            raise ValueError(f"unknown gradcheck target {selector!r}; choose from {GRADCHECK_MODULES}")
    module.to(np.float64)
    _randomize(module, rng.child("params"))
    return module, shape


def gradcheck(selector, dims=8, seed=0, eps=1e-4, max_tries=200):
    """Max relative error of autodiff against central differences, all params and input.

    The scalar loss is ``sum(output * R)`` for a fixed random ``R``. Inputs
    are redrawn until every ReLU input sits at least ``KINK_MARGIN`` from
    zero, since a finite difference straddling a kink measures nothing.
    """
    rng = RngState(seed)
    if selector == "kd_loss":
        with T.precision(np.float64):
            s = T.Tensor(rng.child("s").normal((3, 5), dtype=np.float64), requires_grad=True)
        t = rng.child("t").normal((3, 5), dtype=np.float64)
        y = np.array([0, 3, 4])
        return check_gradients(lambda: kd_loss(s, t, y, KDParams()), [s], eps)

    module, shape = build_gradcheck_target(selector, dims, seed)
    for attempt in range(max_tries):
        xr = rng.child(f"x{attempt}")
        with T.precision(np.float64):
            x = T.Tensor(xr.normal(shape, dtype=np.float64), requires_grad=True)
        with T.no_grad(), T.relu_margin_probe() as margins:
            out_shape = module(x).shape
        if min(margins, default=np.inf) >= KINK_MARGIN:
            break
    else:
        raise ContractError(f"no input within {max_tries} draws keeps ReLU inputs {KINK_MARGIN} from zero")
    weights = rng.child("r").normal(out_shape, dtype=np.float64)
    params = [p for _, p in module.named_parameters()]
    return check_gradients(lambda: (module(x) * weights).sum(), params + [x], eps)


def _randomize(module, rng):
    from .nn.layers import BatchNorm

    for i, (name, m) in enumerate(module.named_modules()):
        r = rng.child(i)
        if isinstance(m, BatchNorm):
            m.weight.data = 1.0 + r.normal(m.weight.shape, std=0.3, dtype=np.float64)
            m.bias.data = r.normal(m.bias.shape, std=0.3, dtype=np.float64)
            continue
        w = m._parameters.get("weight")
        if w is not None and w.ndim >= 2:
            fan_in = int(np.prod(w.shape[1:]))
            w.data = r.normal(w.shape, std=fan_in ** -0.5, dtype=np.float64)
        b = m._parameters.get("bias")
        if b is not None:
            b.data = r.child("b").normal(b.shape, std=0.1, dtype=np.float64)
