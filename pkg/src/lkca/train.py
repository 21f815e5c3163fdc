"""Desk-scale training: AdamW with a cosine-plus-warmup schedule,
label-smoothed cross-entropy, a synthetic stripes task, and IDX ingestion.

Everything is deterministic given the run seed: model init uses ``seed``,
synthetic data ``seed + 1`` (test split ``seed + 3``), batch shuffling
``seed + 2``. Two runs with the same config produce bitwise-identical
metrics histories.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as model_lib
from .attention import VIEW_ATTENTION, VIEWS
from .autodiff import Tape, cross_entropy_smoothed
from .model import ModelConfig, VisionModel
from .tensor import F32, I64, SeededRng, ShapeError


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_adamw(params: dict, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> AdamWState:
    return AdamWState(m={k: np.zeros_like(v) for k, v in params.items()},
                      v={k: np.zeros_like(v) for k, v in params.items()},
                      beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def decays(name: str) -> bool:
    """Weight decay applies to everything except biases and norm affines."""
    return not name.endswith((".bias", ".gamma", ".beta"))


def adamw_step(params: dict, grads: dict, state: AdamWState, lr_t: float) -> AdamWState:
    """One decoupled-decay update, in place:
    theta <- theta - lr_t * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * p
        p[...] = p - lr_t * update
    return state


@dataclass
class Schedule:
    warmup_steps: int
    total_steps: int
    base_lr: float
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps <= total_steps, got "
                             f"{self.warmup_steps} vs {self.total_steps}")


def cosine_lr(step: int, s: Schedule) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then a half-cosine decay to
    min_lr at total_steps; steps past the end clamp to min_lr."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if s.warmup_steps > 0 and step <= s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.base_lr if step <= s.total_steps else s.min_lr
    progress = min(max((step - s.warmup_steps) / span, 0.0), 1.0)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray           # (n, H, W, C), values in [0, 1]
    labels: np.ndarray           # (n,), ints in [0, num_classes)
    offsets: np.ndarray | None = None  # stripes bar positions, for split control

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images vs "
                             f"{self.labels.shape[0]} labels")

    @property
    def size(self) -> int:
        return self.images.shape[0]


def gen_stripes(n: int, grid: int, seed: int, noise_std: float = 0.05,
                allowed_offsets=None) -> Dataset:
    """Two-class bar-location task: class 0 is a horizontal bar of thickness
    2 at a random row offset, class 1 a vertical bar at a random column
    offset. Labels alternate, so counts are balanced. Pixels are {0,1} plus
    clipped Gaussian noise. Bar offsets are recorded so a split can hold out
    specific positions, which is what makes the task probe whether a model
    ties its weights across locations.
    """
    if grid < 4:
        raise ValueError(f"grid must be >= 4, got {grid}")
    pool = np.arange(grid - 1, dtype=I64) if allowed_offsets is None \
        else np.asarray(sorted(allowed_offsets), dtype=I64)
    if pool.size == 0:
        raise ValueError("allowed_offsets is empty")
    if pool.min() < 0 or pool.max() > grid - 2:
        raise ValueError(f"offsets must lie in [0, {grid - 2}], got "
                         f"{pool.min()}..{pool.max()}")
    rng = SeededRng(seed)
    offsets = pool[rng.integers(0, pool.size, n)]
    labels = np.arange(n, dtype=I64) % 2
    images = np.zeros((n, grid, grid, 1), dtype=F32)
    for i in range(n):
        o = offsets[i]
        if labels[i] == 0:
            images[i, o:o + 2, :, 0] = 1.0
        else:
            images[i, :, o:o + 2, 0] = 1.0
    if noise_std > 0:
        images += rng.normal(images.shape, 0.0, noise_std, dtype=F32)
        np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images=images, labels=labels, offsets=offsets)


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


def load_idx(path) -> np.ndarray:
    """Big-endian IDX: two zero magic bytes, type byte 0x08 (unsigned byte),
    rank byte, `rank` u32 extents, then raw data. Rank-1 files decode as an
    integer label array; anything else as float32 pixels scaled by 1/255.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise IdxFormatError(f"bad IDX magic at bytes 0-1: expected 0x00 0x00, "
                             f"got {blob[:2].hex() or 'empty file'}")
    if blob[2] != 0x08:
        raise IdxFormatError(f"unsupported IDX type code 0x{blob[2]:02x} at byte 2 "
                             f"(only 0x08 unsigned byte is supported)")
    rank = blob[3]
    header_end = 4 + 4 * rank
    if len(blob) < header_end:
        raise IdxFormatError(f"truncated IDX header: need {header_end} bytes for "
                             f"{rank} extents, file ends at byte {len(blob)}")
    shape = struct.unpack(f">{rank}I", blob[4:header_end])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != header_end + count:
        raise IdxFormatError(f"IDX data length mismatch: header promises {count} "
                             f"bytes from byte {header_end}, file has "
                             f"{len(blob) - header_end}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_end).reshape(shape)
    if rank == 1:
        return data.astype(I64)
    return data.astype(F32) / 255.0


def write_idx(path, array: np.ndarray):
    """Inverse of :func:`load_idx` for unsigned-byte payloads."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim == 3:
        images = images[..., None]
    return Dataset(images=images, labels=labels)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    view: str = VIEW_ATTENTION
    batch_size: int = 16
    total_steps: int = 100
    warmup_steps: int = 10
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    eval_every: int = 25
    seed: int = 0
    data: str = "stripes"        # "stripes" or "idx"
    train_samples: int = 64
    test_samples: int = 0
    noise_std: float = 0.05
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    metrics_path: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), "
                             f"got {self.label_smoothing}")
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.data not in ("stripes", "idx"):
            raise ValueError(f"data must be 'stripes' or 'idx', got {self.data!r}")


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    train_acc: float | None = None
    test_acc: float | None = None


@dataclass
class TrainResult:
    model: VisionModel
    history: list
    train_data: Dataset
    test_data: Dataset | None

    @property
    def losses(self) -> list:
        return [row.loss for row in self.history]


def build_datasets(cfg: TrainConfig):
    if cfg.data == "idx":
        train = load_idx_dataset(cfg.idx_train_images, cfg.idx_train_labels)
        test = None
        if cfg.idx_test_images:
            test = load_idx_dataset(cfg.idx_test_images, cfg.idx_test_labels)
        return train, test
    grid = cfg.model.image_h
    train = gen_stripes(cfg.train_samples, grid, cfg.seed + 1, cfg.noise_std)
    test = gen_stripes(cfg.test_samples, grid, cfg.seed + 3, cfg.noise_std) \
        if cfg.test_samples > 0 else None
    return train, test


def _check_compatible(data: Dataset, cfg: ModelConfig, what: str):
    n, h, w, c = data.images.shape
    if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ShapeError(f"{what} images are {h}x{w}x{c}, model expects "
                         f"{cfg.image_h}x{cfg.image_w}x{cfg.channels}")
    if data.labels.min() < 0 or data.labels.max() >= cfg.num_classes:
        raise ValueError(f"{what} labels outside [0, {cfg.num_classes})")


def evaluate(model: VisionModel, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    hits = 0
    for start in range(0, data.size, batch_size):
        stop = min(start + batch_size, data.size)
        pred = model_lib.predict(data.images[start:stop], model)
        hits += int((pred == data.labels[start:stop]).sum())
    return hits / data.size


def train_loop(cfg: TrainConfig, train_data: Dataset | None = None,
               test_data: Dataset | None = None,
               model: VisionModel | None = None) -> TrainResult:
    """Run the configured number of AdamW steps and return the full metrics
    history (one row per step; accuracies filled on the eval cadence and at
    the final step). Writes the checkpoint and metrics CSV if paths are set.
    """
    if train_data is None:
        train_data, built_test = build_datasets(cfg)
        if test_data is None:
            test_data = built_test
    _check_compatible(train_data, cfg.model, "train")
    if test_data is not None:
        _check_compatible(test_data, cfg.model, "test")
    if cfg.batch_size > train_data.size:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size "
                         f"{train_data.size}")

    if model is None:
        model = model_lib.build_model(cfg.model, seed=cfg.seed)
    model = model_lib.set_mixer_view(model, cfg.view)
    params = model_lib.param_registry(model)
    opt = init_adamw(params, weight_decay=cfg.weight_decay)
    schedule = Schedule(warmup_steps=min(cfg.warmup_steps, cfg.total_steps),
                        total_steps=cfg.total_steps, base_lr=cfg.base_lr,
                        min_lr=cfg.min_lr)

    shuffle_rng = SeededRng(cfg.seed + 2)
    order = np.empty(0, dtype=I64)
    cursor = 0
    history = []
    for t in range(1, cfg.total_steps + 1):
        if cursor + cfg.batch_size > order.size:
            order = shuffle_rng.permutation(train_data.size)
            cursor = 0  # partial batches at the epoch tail are dropped
        batch = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        lr = cosine_lr(t, schedule)
        tape = Tape()
        leaves = {name: tape.leaf(name, arr) for name, arr in params.items()}
        bound = model_lib.bind_params(model, leaves)
        logits = model_lib.model_forward(train_data.images[batch], bound)
        loss = cross_entropy_smoothed(logits, train_data.labels[batch],
                                      cfg.label_smoothing)
        grads = tape.backward(loss)
        adamw_step(params, grads, opt, lr)

        row = MetricsRow(step=t, lr=float(lr), loss=float(loss.value))
        if t % cfg.eval_every == 0 or t == cfg.total_steps:
            row.train_acc = evaluate(model, train_data)
            if test_data is not None:
                row.test_acc = evaluate(model, test_data)
        history.append(row)

    if cfg.checkpoint_path:
        model_lib.save_checkpoint(cfg.checkpoint_path, model)
    if cfg.metrics_path:
        write_metrics_csv(cfg.metrics_path, history)
    return TrainResult(model=model, history=history,
                       train_data=train_data, test_data=test_data)


def write_metrics_csv(path, history):
    """Header `step,lr,loss,train_acc,test_acc`; accuracy cells are empty on
    steps without an evaluation. No timestamps, so identical runs produce
    byte-identical files."""
    def cell(v):
        return "" if v is None else format(v, ".8g")

    with open(path, "w", newline="") as fh:
        fh.write("step,lr,loss,train_acc,test_acc\n")
        for row in history:
            fh.write(f"{row.step},{cell(row.lr)},{cell(row.loss)},"
                     f"{cell(row.train_acc)},{cell(row.test_acc)}\n")
