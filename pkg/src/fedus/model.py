"""Dilated causal convolution generator mapping FECG beats to DUS beats.

Layer stack: causal front conv -> gated residual blocks with growing
dilation -> summed skips -> ReLU/1x1 conv refinements -> flatten -> dense
-> tanh.  Training is mini-batch Adam on MSE with early stopping on a
time-ordered validation tail of every training subject.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FEDUS1\0\0"
CHECKPOINT_VERSION = 1
RATE_RATIO = 8  # 2000 Hz DUS / 250 Hz FECG


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    n_filters: int = 64
    kernel: int = 20
    dilations: tuple = (1, 2, 4, 8, 16)
    L_in: int = 160
    L_out: int = 1280
    post_skip_convs: int = 2
    out_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.n_filters <= 0 or self.kernel <= 0 or self.L_in <= 0:
            raise ConfigError("n_filters, kernel and L_in must be positive")
        if self.L_out != RATE_RATIO * self.L_in:
            raise ConfigError(f"L_out must equal {RATE_RATIO} * L_in ({self.L_out} vs {self.L_in})")
        d = self.dilations
        if not d or any(x < 1 or x & (x - 1) for x in d) or any(a >= b for a, b in zip(d, d[1:])):
            raise ConfigError(f"dilations must be strictly increasing powers of two, got {d}")
        if self.out_activation != "tanh":
            raise ConfigError("only the tanh output head is supported")

    @classmethod
    def for_beats(cls, n_beats: int, beat_len: int = 160, **kw) -> "ArchConfig":
        L_in = beat_len * n_beats
        return cls(L_in=L_in, L_out=RATE_RATIO * L_in, **kw)

    @property
    def receptive_field(self) -> int:
        return (self.kernel - 1) * (1 + sum(self.dilations)) + 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 42
    n_beats: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.patience < self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def param_shapes(arch: ArchConfig) -> dict:
    C, K = arch.n_filters, arch.kernel
    shapes = {"front.w": (K, 1, C), "front.b": (C,)}
    for i, _ in enumerate(arch.dilations):
        for branch in ("filter", "gate"):
            shapes[f"block{i}.{branch}.w"] = (K, C, C)
            shapes[f"block{i}.{branch}.b"] = (C,)
        shapes[f"block{i}.res.w"] = (1, C, C)
        shapes[f"block{i}.res.b"] = (C,)
    for j in range(arch.post_skip_convs):
        shapes[f"post{j}.w"] = (1, C, C)
        shapes[f"post{j}.b"] = (C,)
    shapes["dense.w"] = (arch.L_in * C, arch.L_out)
    shapes["dense.b"] = (arch.L_out,)
    return shapes


def init_params(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 3:
            fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
        else:
            fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams(arch, tensors)


# --------------------------------------------------------------- forward

def _leaves(params: ModelParams, requires_grad: bool) -> dict:
    return {k: ag.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def _as_input(params: ModelParams, x) -> ag.Tensor:
    x = np.asarray(x)
    dtype = params.tensors["front.w"].dtype
    if x.shape[-1] != params.arch.L_in or x.ndim not in (1, 2):
        raise ShapeError(f"expected input of length {params.arch.L_in}, got shape {x.shape}")
    return ag.Tensor(x.astype(dtype)[..., None])


def conv_stack_graph(p: dict, arch: ArchConfig, x: ag.Tensor) -> ag.Tensor:
    """Everything before flatten: returns features of shape [(B,) T, C]."""
    h = ag.conv1d_causal(x, p["front.w"], p["front.b"], 1)
    skip = None
    for i, d in enumerate(arch.dilations):
        f = ag.tanh(ag.conv1d_causal(h, p[f"block{i}.filter.w"], p[f"block{i}.filter.b"], d))
        g = ag.sigmoid(ag.conv1d_causal(h, p[f"block{i}.gate.w"], p[f"block{i}.gate.b"], d))
        s = ag.conv1d_causal(ag.mul(f, g), p[f"block{i}.res.w"], p[f"block{i}.res.b"], 1)
        h = ag.add(h, s)
        skip = s if skip is None else ag.add(skip, s)
    out = skip
    for j in range(arch.post_skip_convs):
        out = ag.conv1d_causal(ag.relu(out), p[f"post{j}.w"], p[f"post{j}.b"], 1)
    return out


def forward_graph(p: dict, arch: ArchConfig, x: ag.Tensor) -> ag.Tensor:
    feats = conv_stack_graph(p, arch, x)
    return ag.tanh(ag.dense(ag.flatten(feats), p["dense.w"], p["dense.b"]))


def forward(params: ModelParams, fecg_in) -> np.ndarray:
    """Generate DUS for one beat window [L_in] (or a batch [B, L_in])."""
    x = _as_input(params, fecg_in)
    return forward_graph(_leaves(params, False), params.arch, x).data


def conv_stack(params: ModelParams, fecg_in) -> np.ndarray:
    x = _as_input(params, fecg_in)
    return conv_stack_graph(_leaves(params, False), params.arch, x).data


def predict_batch(params: ModelParams, inputs, chunk: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None]
    outs = [forward(params, inputs[i : i + chunk]) for i in range(0, len(inputs), chunk)]
    if not outs:
        return np.zeros((0, params.arch.L_out), dtype=params.tensors["dense.w"].dtype)
    return np.concatenate(outs, axis=0)


def loss_and_grads(params: ModelParams, x, y) -> tuple[float, dict]:
    leaves = _leaves(params, True)
    pred = forward_graph(leaves, params.arch, _as_input(params, x))
    loss = ag.mse_loss(pred, np.asarray(y, dtype=pred.data.dtype))
    loss.backward()
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}
    return float(loss.data), grads


# -------------------------------------------------------------- training

@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_mse, val_mse)

    @property
    def best_so_far(self) -> list:
        out, best = [], math.inf
        for _, _, v in self.rows:
            best = min(best, v)
            out.append(best)
        return out

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_mse", "val_mse"])
            for e, tr, va in self.rows:
                wr.writerow([e, f"{tr:.9g}", f"{va:.9g}"])


def validation_split(pairs: list, fraction: float = 0.1) -> tuple[list, list]:
    """Hold out the time-ordered tail of each subject's pairs."""
    by_subject: dict = {}
    for p in pairs:
        by_subject.setdefault(p.subject_id, []).append(p)
    train, val = [], []
    for sid in sorted(by_subject):
        items = sorted(by_subject[sid], key=lambda p: p.peak_time)
        n_val = int(math.floor(fraction * len(items)))
        if len(items) >= 2:
            n_val = max(n_val, 1)
        train += items[: len(items) - n_val]
        val += items[len(items) - n_val :]
    return train, val


def _stack(pairs, attr, dtype):
    return np.stack([np.asarray(getattr(p, attr), dtype=dtype) for p in pairs])


def _mse(params, X, Y) -> float:
    if len(X) == 0:
        return math.nan
    pred = predict_batch(params, X)
    return float(np.mean((pred.astype(np.float64) - Y) ** 2))


def train(pairs: list, arch: ArchConfig, tc: TrainConfig, init: ModelParams | None = None,
          dtype=np.float32) -> tuple[ModelParams, History]:
    """Fit the generator; returns best-validation parameters and the loss history.

    History row 0 holds the losses of the untrained initialization.
    """
    if not pairs:
        raise ConfigError("no training pairs")
    for p in pairs:
        if len(p.fecg_in) != arch.L_in or len(p.dus_out) != arch.L_out:
            raise ConfigError(f"pair length ({len(p.fecg_in)}, {len(p.dus_out)}) does not match "
                              f"architecture ({arch.L_in}, {arch.L_out})")
    tr, va = validation_split(pairs, tc.val_fraction)
    if not va:
        va = tr
    Xtr, Ytr = _stack(tr, "fecg_in", dtype), _stack(tr, "dus_out", dtype)
    Xva, Yva = _stack(va, "fecg_in", dtype), _stack(va, "dus_out", dtype)

    params = init.copy() if init is not None else init_params(arch, tc.seed, dtype)
    names = list(params.tensors)
    state = ag.AdamState(lr=tc.lr)
    rng = np.random.default_rng(tc.seed)

    hist = History()
    best_val = _mse(params, Xva, Yva)
    hist.rows.append((0, _mse(params, Xtr, Ytr), best_val))
    best = params.copy()
    stale = 0
    log.info("epoch 0: train %.5f val %.5f (%d train / %d val pairs)", hist.rows[0][1], best_val, len(tr), len(va))
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(len(Xtr))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            loss, grads = loss_and_grads(params, Xtr[idx], Ytr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}: {loss}")
            ag.adam_step([params.tensors[k] for k in names], [grads[k] for k in names], state)
            total += loss * len(idx)
        train_mse = total / len(order)
        val_mse = _mse(params, Xva, Yva)
        if not math.isfinite(val_mse):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist.rows.append((epoch, train_mse, val_mse))
        log.info("epoch %d: train %.5f val %.5f", epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val, best, stale = val_mse, params.copy(), 0
        else:
            stale += 1
            if stale >= tc.patience:
                log.info("early stop after %d stale epochs", stale)
                break
    return best, hist


# ------------------------------------------------------------ checkpoint

def save(params: ModelParams, path) -> None:
    arch_blob = json.dumps(asdict(params.arch), sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch_blob)))
        fh.write(arch_blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path, expected_arch: ArchConfig | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n_arch = struct.unpack_from("<II", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
        off = 16
        arch = ArchConfig(**json.loads(raw[off : off + n_arch]))
        off += n_arch
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4 : off + 4 + nlen].decode()
            off += 4 + nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            dims = struct.unpack_from(f"<{rank}I", raw, off + 4)
            off += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except (struct.error, ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: architecture mismatch: checkpoint {arch} vs expected {expected_arch}")
    expected = param_shapes(arch)
    if set(expected) != set(tensors) or any(tuple(tensors[k].shape) != expected[k] for k in expected):
        raise CheckpointError(f"{path}: tensor inventory does not match its architecture")
    return ModelParams(arch, {k: tensors[k] for k in expected})
