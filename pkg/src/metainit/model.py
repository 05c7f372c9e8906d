"""Recurrent frame classifier with hand-written reverse-mode gradients.

Parameters live in a :class:`ParameterSet`, a thin immutable wrapper around a
name -> float64 array mapping whose key schema is fixed by :class:`ModelConfig`.
Gradients are plain dicts with the same keys.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CELLS = ("rnn", "lstm")
_GATES = {"rnn": 1, "lstm": 4}

CHECKPOINT_MAGIC = b"MICK"
CHECKPOINT_VERSION = 1

LOG_FLOOR = 1e-300


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 160
    layers: int = 2
    hidden: int = 32
    bidirectional: bool = True
    cell: str = "lstm"
    n_classes: int = 5
    # layers == 0 gives a plain linear-softmax classifier
    output_bias: bool = True
    clip_norm: float | None = None

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}, expected one of {CELLS}")
        if self.input_dim < 1 or self.hidden < 1 or self.n_classes < 1 or self.layers < 0:
            raise ValueError(f"invalid model dimensions in {self}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def output_in_dim(self) -> int:
        return self.input_dim if self.layers == 0 else self.hidden * self.directions

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered parameter schema."""
        out: dict[str, tuple[int, ...]] = {}
        gh = _GATES[self.cell] * self.hidden
        for layer in range(self.layers):
            in_dim = self.input_dim if layer == 0 else self.hidden * self.directions
            for d in _dir_names(self):
                out[f"l{layer}.{d}.W"] = (in_dim, gh)
                out[f"l{layer}.{d}.U"] = (self.hidden, gh)
                out[f"l{layer}.{d}.b"] = (gh,)
        out["out.W"] = (self.output_in_dim, self.n_classes)
        if self.output_bias:
            out["out.b"] = (self.n_classes,)
        return out


def _dir_names(config: ModelConfig) -> tuple[str, ...]:
    return ("fw", "bw") if config.bidirectional else ("fw",)


@dataclass(frozen=True, eq=False)
class ParameterSet(Mapping):
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        shapes = self.config.shapes()
        if list(self.tensors) != list(shapes):
            raise SchemaError(f"keys {list(self.tensors)} do not match schema {list(shapes)}")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise SchemaError(f"{name}: shape {arr.shape} != {shape}")
            arr.flags.writeable = False

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def replace(self, tensors: Mapping[str, np.ndarray]) -> ParameterSet:
        return ParameterSet(self.config, {k: np.array(tensors[k], dtype=np.float64) for k in self.tensors})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def equals(self, other: ParameterSet) -> bool:
        """Bit-exact comparison."""
        return (
            self.config == other.config
            and list(self) == list(other)
            and all(np.array_equal(self[k], other[k]) for k in self)
        )


@dataclass(frozen=True)
class LabeledBatch:
    """Utterance feature matrices with per-frame labels.

    ``sources`` carries ``(utt_id, split)`` provenance for every utterance so
    training loops can refuse held-out data.
    """

    features: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    sources: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in utterance count")
        for x, y in zip(self.features, self.labels):
            if x.ndim != 2 or y.shape != (x.shape[0],):
                raise ValueError(f"label length {y.shape} does not match {x.shape[0]} frames")

    @property
    def n_frames(self) -> int:
        return sum(int(y.shape[0]) for y in self.labels)

    def __len__(self) -> int:
        return len(self.features)


def make_batch(features: Sequence[np.ndarray], labels: Sequence[int], sources=()) -> LabeledBatch:
    """Broadcast utterance-level class ids to every frame."""
    feats = tuple(np.asarray(x, dtype=np.float64) for x in features)
    labs = tuple(np.full(x.shape[0], int(c), dtype=np.int64) for x, c in zip(feats, labels))
    return LabeledBatch(feats, labs, tuple(sources))


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(config, tensors)


def zeros_like(params: ParameterSet) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def axpy(params: ParameterSet, grads: Mapping[str, np.ndarray], scale: float) -> ParameterSet:
    """Return ``params + scale * grads`` as a new ParameterSet."""
    _check_schema(params, grads)
    return ParameterSet(params.config, {k: params[k] + scale * grads[k] for k in params})


def _check_schema(params: Mapping[str, np.ndarray], other: Mapping[str, np.ndarray]):
    if list(params) != list(other):
        raise SchemaError(f"key mismatch: {sorted(set(params) ^ set(other))}")
    for k in params:
        if np.shape(params[k]) != np.shape(other[k]):
            raise SchemaError(f"{k}: shape {np.shape(other[k])} != {np.shape(params[k])}")


def grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = grad_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


# ---------------------------------------------------------------- recurrences


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rnn_scan(pre, U, reverse):
    T, B, H = pre.shape
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        h = np.tanh(pre[t] + h @ U)
        hs[t] = h
    return hs


def _rnn_scan_back(dhs, hs, U, reverse):
    T, B, H = hs.shape
    dz = np.empty((T, B, H))
    dh_next = np.zeros((B, H))
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        h = hs[t]
        dz[t] = (dhs[t] + dh_next) * (1.0 - h * h)
        dh_next = dz[t] @ U.T
    return dz


def _lstm_scan(pre, U, reverse):
    T, B, G = pre.shape
    H = G // 4
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    acts = np.empty((T, B, G))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = pre[t] + h @ U
        a = acts[t]
        a[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
        a[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 3 * H :]
        h = a[:, 2 * H : 3 * H] * np.tanh(c)
        cs[t] = c
        hs[t] = h
    return hs, cs, acts


def _lstm_scan_back(dhs, cs, acts, U, reverse):
    T, B, H = cs.shape
    dz = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        tp = t + 1 if reverse else t - 1
        c_prev = cs[tp] if 0 <= tp < T else 0.0
        a = acts[t]
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        dh = dhs[t] + dh_next
        tc = np.tanh(cs[t])
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dzt = dz[t]
        dzt[:, :H] = dc * g * i * (1.0 - i)
        dzt[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dzt[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dzt[:, 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dzt @ U.T
    return dz


def _run_layer(cell, W, U, b, x, reverse):
    """x: (T, B, D) time-major -> hidden states (T, B, H) plus a cache for backprop."""
    pre = x @ W + b
    if cell == "rnn":
        hs = _rnn_scan(pre, U, reverse)
        return hs, (x, hs, None, None)
    hs, cs, acts = _lstm_scan(pre, U, reverse)
    return hs, (x, hs, cs, acts)


def _layer_backward(cell, W, U, cache, dhs, reverse):
    """Backprop through one direction of one layer; returns (dx, dW, dU, db)."""
    x, hs, cs, acts = cache
    T, B, H = hs.shape
    if cell == "rnn":
        dz = _rnn_scan_back(dhs, hs, U, reverse)
    else:
        dz = _lstm_scan_back(dhs, cs, acts, U, reverse)
    # h_{t-1} along the direction of recurrence, zero at the sequence start
    h_prev = np.zeros_like(hs)
    if reverse:
        h_prev[:-1] = hs[1:]
    else:
        h_prev[1:] = hs[:-1]
    dz2 = dz.reshape(T * B, -1)
    dW = x.reshape(T * B, -1).T @ dz2
    dU = h_prev.reshape(T * B, H).T @ dz2
    db = dz2.sum(axis=0)
    dx = dz @ W.T
    return dx, dW, dU, db


def _forward_group(params: ParameterSet, x: np.ndarray):
    """x: (T, B, D) -> (log-probs (T, B, C), caches)."""
    cfg = params.config
    caches = []
    h = x
    for layer in range(cfg.layers):
        outs = []
        layer_caches = []
        for d in _dir_names(cfg):
            p = f"l{layer}.{d}."
            hs, cache = _run_layer(cfg.cell, params[p + "W"], params[p + "U"], params[p + "b"], h, d == "bw")
            outs.append(hs)
            layer_caches.append(cache)
        caches.append(layer_caches)
        h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)
    logits = h @ params["out.W"]
    if cfg.output_bias:
        logits = logits + params["out.b"]
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return logp, (h, caches)


def _groups(batch: LabeledBatch) -> list[list[int]]:
    """Utterance indices bucketed by frame count, in first-seen order."""
    buckets: dict[int, list[int]] = {}
    for i, x in enumerate(batch.features):
        buckets.setdefault(x.shape[0], []).append(i)
    return list(buckets.values())


def _check_batch(params: ParameterSet, batch: LabeledBatch):
    cfg = params.config
    if len(batch) == 0:
        raise ValueError("empty batch")
    for x, y in zip(batch.features, batch.labels):
        if x.shape[1] != cfg.input_dim:
            raise SchemaError(f"feature dim {x.shape[1]} != model input_dim {cfg.input_dim}")
        if y.size and (y.min() < 0 or y.max() >= cfg.n_classes):
            raise ValueError(f"label out of range [0, {cfg.n_classes})")


def forward(params: ParameterSet, batch: LabeledBatch) -> list[np.ndarray]:
    """Per-utterance (T, C) log-probabilities, in batch order."""
    _check_batch(params, batch)
    out: list[np.ndarray | None] = [None] * len(batch)
    for idx in _groups(batch):
        logp, _ = _forward_group(params, np.stack([batch.features[i] for i in idx], axis=1))
        for j, i in enumerate(idx):
            out[i] = logp[:, j]
    return out


def _nll_sum(logp: np.ndarray, y: np.ndarray) -> float:
    picked = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    return float(-np.maximum(picked, np.log(LOG_FLOOR)).sum())


def loss(params: ParameterSet, batch: LabeledBatch) -> float:
    """Mean per-frame cross-entropy over the whole batch."""
    _check_batch(params, batch)
    total = 0.0
    for idx in _groups(batch):
        logp, _ = _forward_group(params, np.stack([batch.features[i] for i in idx], axis=1))
        total += _nll_sum(logp, np.stack([batch.labels[i] for i in idx], axis=1))
    return total / batch.n_frames


def backward(params: ParameterSet, batch: LabeledBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients (full backpropagation through time)."""
    _check_batch(params, batch)
    cfg = params.config
    grads = zeros_like(params)
    n_frames = batch.n_frames
    total = 0.0
    for idx in _groups(batch):
        x = np.stack([batch.features[i] for i in idx], axis=1)
        y = np.stack([batch.labels[i] for i in idx], axis=1)
        logp, (h_top, caches) = _forward_group(params, x)
        total += _nll_sum(logp, y)

        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, y[..., None], np.take_along_axis(dlogits, y[..., None], -1) - 1.0, -1)
        dlogits /= n_frames
        C = cfg.n_classes
        grads["out.W"] += h_top.reshape(-1, h_top.shape[-1]).T @ dlogits.reshape(-1, C)
        if cfg.output_bias:
            grads["out.b"] += dlogits.reshape(-1, C).sum(axis=0)
        dh = dlogits @ params["out.W"].T

        Hd = cfg.hidden
        for layer in range(cfg.layers - 1, -1, -1):
            dx = None
            for k, d in enumerate(_dir_names(cfg)):
                p = f"l{layer}.{d}."
                dhs = dh[..., k * Hd : (k + 1) * Hd]
                dxk, dW, dU, db = _layer_backward(
                    cfg.cell, params[p + "W"], params[p + "U"], caches[layer][k], dhs, d == "bw"
                )
                grads[p + "W"] += dW
                grads[p + "U"] += dU
                grads[p + "b"] += db
                dx = dxk if dx is None else dx + dxk
            dh = dx
    return total / n_frames, grads


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    cfg_blob = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ParameterSet:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n_cfg = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = ModelConfig(**json.loads(data[pos : pos + n_cfg].decode("utf-8")))
    pos += n_cfg
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return ParameterSet(config, tensors)
