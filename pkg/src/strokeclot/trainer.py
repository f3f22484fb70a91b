"""Classifier head on frozen-backbone embeddings and its training protocol.

The head is ``D -> 128 -> dropout -> 64 -> 2`` of plain affine layers (an
optional ReLU after each hidden layer is available but off by default),
trained with label-smoothed WMCLL, Adam with L2 weight decay, a
reduce-on-plateau learning-rate schedule and early stopping.
"""

from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .dataset import FoldAssignment

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
HIDDEN = (128, 64)
NUM_CLASSES = 2


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# -- head ------------------------------------------------------------------------


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    dropout_rate: float = 0.1
    relu: bool = False

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def with_arrays(self, arrays: dict) -> HeadParams:
        return replace(self, **{n: arrays[n] for n in PARAM_NAMES})

    def copy(self) -> HeadParams:
        return self.with_arrays({n: a.copy() for n, a in self.arrays().items()})

    def validate(self):
        d = self.dim
        expected = {
            "W1": (d, HIDDEN[0]), "b1": (HIDDEN[0],),
            "W2": (HIDDEN[0], HIDDEN[1]), "b2": (HIDDEN[1],),
            "W3": (HIDDEN[1], NUM_CLASSES), "b3": (NUM_CLASSES,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def init_head(dim: int, rng, dropout_rate: float = 0.1, relu: bool = False) -> HeadParams:
    """Fan-in uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    sizes = (dim,) + HIDDEN + (NUM_CLASSES,)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)
    return HeadParams(**arrays, dropout_rate=dropout_rate, relu=relu)


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    mask: np.ndarray | None
    d1: np.ndarray
    h2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray
    params: HeadParams
    single: bool


def head_forward(x, params: HeadParams, train: bool = False, rng=None):
    """Logits for one embedding ``(D,)`` or a batch ``(n, D)``.

    In training mode dropout keeps each first-layer unit with probability
    ``1 - rate`` and rescales the survivors by ``1 / (1 - rate)``; ``rng`` is
    required then. Evaluation mode touches no randomness.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.dim:
        raise ShapeMismatch(f"input shape {x.shape} does not match embedding dim {params.dim}")
    if not np.all(np.isfinite(x2)):
        raise ValueError("non-finite embedding")

    h1 = x2 @ params.W1 + params.b1
    a1 = np.maximum(h1, 0.0) if params.relu else h1
    mask = None
    d1 = a1
    if train and params.dropout_rate > 0:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        keep = 1.0 - params.dropout_rate
        mask = (rng.random(a1.shape) < keep) / keep
        d1 = a1 * mask
    h2 = d1 @ params.W2 + params.b2
    a2 = np.maximum(h2, 0.0) if params.relu else h2
    logits = a2 @ params.W3 + params.b3
    cache = ForwardCache(x2, h1, mask, d1, h2, a2, logits, params, single)
    return (logits[0] if single else logits), cache


def head_loss(logits, targets, sample_weights=None) -> float:
    """``sum_s w_s * CE(t_s, softmax(z_s))`` with ``w_s = 1`` by default."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    logp = z - z.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    per = -(t * logp).sum(axis=1)
    w = np.ones(len(per)) if sample_weights is None else np.asarray(sample_weights, float)
    return float(np.dot(w, per))


def head_backward(cache: ForwardCache, targets, sample_weights=None) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`head_loss` with respect to every head array.

    Per sample, the logit gradient of cross-entropy against a target that
    sums to one is ``softmax(z) - t``; the rest is the chain rule through
    the affine layers, the dropout mask and the optional rectifiers.
    """
    p = cache.params
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape != cache.logits.shape:
        raise ShapeMismatch(f"targets shape {t.shape} != logits shape {cache.logits.shape}")
    n = t.shape[0]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, float)
    dz = (metrics.softmax(cache.logits) - t) * w[:, None]

    grads = {"W3": cache.a2.T @ dz, "b3": dz.sum(axis=0)}
    da2 = dz @ p.W3.T
    dh2 = da2 * (cache.h2 > 0) if p.relu else da2
    grads["W2"] = cache.d1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dd1 = dh2 @ p.W2.T
    da1 = dd1 * cache.mask if cache.mask is not None else dd1
    dh1 = da1 * (cache.h1 > 0) if p.relu else da1
    grads["W1"] = cache.x.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    return grads


# -- optimiser ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def zeros_like(cls, params: HeadParams, **hyper) -> AdamState:
        arrays = params.arrays()
        return cls(
            m={n: np.zeros_like(a) for n, a in arrays.items()},
            v={n: np.zeros_like(a) for n, a in arrays.items()},
            **hyper,
        )


def adam_step(params: HeadParams, grads: dict, state: AdamState, lr: float):
    """One Adam update with L2 weight decay folded into the gradient.

    ``g <- grad + wd * theta`` before the moment updates; bias-corrected
    moments give ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    Inputs are not modified.
    """
    arrays = params.arrays()
    t = state.t + 1
    new_arrays, new_m, new_v = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, theta in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        g = g + state.weight_decay * theta
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        new_arrays[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return params.with_arrays(new_arrays), replace(state, m=new_m, v=new_v, t=t)


# -- schedule ------------------------------------------------------------------------


class Action(str, enum.Enum):
    CONTINUE = "Continue"
    REDUCE_LR = "ReduceLr"
    CHECKPOINT = "Checkpoint"
    STOP = "Stop"


@dataclass(frozen=True)
class Decision:
    action: Action
    lr: float

    def __str__(self):
        if self.action is Action.REDUCE_LR:
            return f"ReduceLr({self.lr:g})"
        return self.action.value


@dataclass(frozen=True)
class ScheduleState:
    lr: float = 1e-4
    best_loss: float = float("inf")
    bad_epochs_sched: int = 0
    bad_epochs_stop: int = 0
    epoch: int = 0
    best_epoch: int = 0
    max_lr: float = 1e-4
    min_lr: float = 1e-5
    factor: float = 0.1
    patience: int = 1
    stop_patience: int = 6
    max_epochs: int = 30

    @classmethod
    def fresh(cls, **kw) -> ScheduleState:
        state = cls(**kw)
        return replace(state, lr=state.max_lr)


def schedule_step(state: ScheduleState, val_loss: float):
    """Advance the plateau schedule and early-stop counters by one epoch.

    Strict improvement resets both counters and asks for a checkpoint.
    Otherwise both counters grow; once the schedule counter exceeds
    ``patience`` the rate drops by ``factor`` (floored at ``min_lr``) and that
    counter restarts. ``stop_patience`` non-improving epochs in a row, or
    reaching ``max_epochs``, stops training. When several things happen at
    once the reported action is the first of Stop, Checkpoint, ReduceLr;
    ``state.best_epoch == state.epoch`` still marks an improving epoch.
    """
    if not np.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    epoch = state.epoch + 1
    lr = state.lr
    reduced = False
    if val_loss < state.best_loss:
        new = replace(state, epoch=epoch, best_loss=float(val_loss), best_epoch=epoch,
                      bad_epochs_sched=0, bad_epochs_stop=0)
        action = Action.CHECKPOINT
    else:
        sched = state.bad_epochs_sched + 1
        stop = state.bad_epochs_stop + 1
        if sched > state.patience:
            new_lr = max(lr * state.factor, state.min_lr)
            reduced = new_lr < lr
            lr, sched = new_lr, 0
        new = replace(state, epoch=epoch, lr=lr, bad_epochs_sched=sched, bad_epochs_stop=stop)
        action = Action.REDUCE_LR if reduced else Action.CONTINUE
    if new.bad_epochs_stop >= new.stop_patience or epoch >= new.max_epochs:
        action = Action.STOP
    return new, Decision(action, new.lr)


# -- training --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    epsilon: float = 0.01
    max_epochs: int = 30
    max_lr: float = 1e-4
    min_lr: float = 1e-5
    factor: float = 0.1
    patience: int = 1
    stop_patience: int = 6
    weight_decay: float = 1e-6
    dropout_rate: float = 0.1
    relu: bool = False
    class_weights: tuple | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 < self.min_lr <= self.max_lr:
            raise ValueError("need 0 < min_lr <= max_lr")

    def schedule(self) -> ScheduleState:
        return ScheduleState.fresh(
            max_lr=self.max_lr, min_lr=self.min_lr, factor=self.factor, patience=self.patience,
            stop_patience=self.stop_patience, max_epochs=self.max_epochs,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    decision: str


@dataclass
class FoldResult:
    fold: int
    params: HeadParams
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def train_fold(x_train, y_train, x_val, y_val, config: TrainConfig, fold: int = 0) -> FoldResult:
    """Train one head; returns the weights from the best validation epoch.

    Mini-batch loss is the label-smoothed WMCLL (classes normalised over the
    ones present in the batch). The monitored validation loss is the plain
    WMCLL of the eval-mode predictions.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    rng = np.random.default_rng([config.seed, fold])
    params = init_head(x_train.shape[1], rng, config.dropout_rate, config.relu)
    opt = AdamState.zeros_like(params, weight_decay=config.weight_decay)
    sched = config.schedule()
    targets = metrics.smooth_labels(y_train, config.epsilon, NUM_CLASSES)
    result = FoldResult(fold, params.copy())

    while True:
        lr = sched.lr
        order = rng.permutation(len(x_train))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            w = metrics.class_row_weights(y_train[idx], config.class_weights, NUM_CLASSES,
                                          allow_absent=True)
            logits, cache = head_forward(x_train[idx], params, train=True, rng=rng)
            batch_losses.append(head_loss(logits, targets[idx], w))
            grads = head_backward(cache, targets[idx], w)
            params, opt = adam_step(params, grads, opt, lr)

        val_logits, _ = head_forward(x_val, params, train=False)
        val_loss = metrics.wmcll(y_val, metrics.softmax(val_logits), config.class_weights)
        sched, decision = schedule_step(sched, val_loss)
        result.history.append(
            EpochRecord(sched.epoch, float(np.mean(batch_losses)), val_loss, lr, str(decision))
        )
        if sched.best_epoch == sched.epoch:
            result.params = params.copy()
            result.best_epoch = sched.epoch
            result.best_val_loss = val_loss
        if decision.action is Action.STOP:
            return result


def train_head(subject_ids, embeddings, labels: dict, folds: FoldAssignment,
               config: TrainConfig, extra_train: dict | None = None) -> list[FoldResult]:
    """Cross-validated training over a patient-level fold assignment.

    ``labels`` maps subject id to class index (0 = CE, 1 = LAA). Subjects in
    ``extra_train`` (pseudo-labelled, id -> class index) are added to every
    training split and never validated on.
    """
    ids = list(subject_ids)
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(ids):
        raise ShapeMismatch("embeddings must be (n_subjects, D) aligned with subject_ids")
    row = {s: i for i, s in enumerate(ids)}
    missing = [s for s in folds.fold_of_patient if s not in row]
    if missing:
        raise KeyError(f"{len(missing)} fold subject(s) have no embedding, e.g. {missing[0]!r}")
    extra = sorted((extra_train or {}).items())
    for s, _ in extra:
        if s not in row:
            raise KeyError(f"pseudo-labelled subject {s!r} has no embedding")

    results = []
    for fold in range(folds.k):
        tr = folds.train_patients(fold)
        va = folds.patients_in(fold)
        tr_rows = [row[s] for s in tr] + [row[s] for s, _ in extra]
        tr_y = [labels[s] for s in tr] + [c for _, c in extra]
        results.append(
            train_fold(x[tr_rows], tr_y, x[[row[s] for s in va]], [labels[s] for s in va], config, fold)
        )
    return results


def predict_proba(heads, embeddings) -> np.ndarray:
    """Mean eval-mode class probabilities over one or more heads."""
    if isinstance(heads, HeadParams):
        heads = [heads]
    x = np.asarray(embeddings, dtype=np.float64)
    probs = [metrics.softmax(head_forward(x, h)[0]) for h in heads]
    return np.mean(probs, axis=0)


# -- files ----------------------------------------------------------------------------

MAGIC = b"SCLTHEAD"
FORMAT_VERSION = 1


def save_head(params: HeadParams, path) -> None:
    """Little-endian binary: header, shape table, then float64 data.

    Layout: ``MAGIC`` (8 bytes), ``u32`` version, ``f64`` dropout rate,
    ``u8`` relu flag, ``u32`` tensor count; per tensor a ``u8`` name length,
    the ASCII name, ``u8`` ndim and ``u32`` dims; finally each tensor's data
    in table order, row-major.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IdBI", FORMAT_VERSION, params.dropout_rate, int(params.relu), len(PARAM_NAMES)))
    arrays = params.arrays()
    for name in PARAM_NAMES:
        a = arrays[name]
        buf.write(struct.pack("<B", len(name)) + name.encode("ascii"))
        buf.write(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
    for name in PARAM_NAMES:
        buf.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_head(path) -> HeadParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a head weights file")
    off = 8
    version, dropout, relu, count = struct.unpack_from("<IdBI", raw, off)
    off += struct.calcsize("<IdBI")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<B", raw, off)
        name = raw[off + 1 : off + 1 + n].decode("ascii")
        off += 1 + n
        (ndim,) = struct.unpack_from("<B", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
        off += 1 + 4 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    params = HeadParams(**arrays, dropout_rate=dropout, relu=bool(relu))
    params.validate()
    return params


def write_history(history, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "decision"])
        for r in history:
            writer.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.lr:g}", r.decision])


def load_embeddings(path):
    """Read ``(subject_ids, matrix)`` from a CSV or an ``.npz`` file.

    CSV: header row, first column the subject id, then D numeric columns.
    NPZ: arrays ``subject_id`` and ``embedding``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return [str(s) for s in z["subject_id"]], np.asarray(z["embedding"], dtype=np.float64)
    ids, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise ValueError(f"{path}: embedding CSV needs a header and at least one value column")
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(header):
                raise ShapeMismatch(f"{path}: row for {rec[0]!r} has {len(rec) - 1} values, expected {len(header) - 1}")
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def write_embeddings(subject_ids, matrix, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id"] + [f"e{i}" for i in range(matrix.shape[1])])
        for s, vec in zip(subject_ids, matrix):
            writer.writerow([s] + [repr(float(v)) for v in vec])
