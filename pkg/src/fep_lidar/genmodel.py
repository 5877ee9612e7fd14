"""Learned scan model: position in, predicted laser scan out.

A small fully-connected + transposed-convolution decoder maps a normalized
2D position to a normalized 622-beam scan. Everything runs in float64 on a
single flat parameter vector so that forward, exact Jacobian (forward-mode
tangents), and training gradients all share one parameter layout.

Also holds dataset collection/normalization and the binary file formats for
models and datasets.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from fep_lidar.world import Pose2, SensorConfig, WorldMap, sample_free_pose, simulate_scan

MODEL_MAGIC = b"FEPL"
DATASET_MAGIC = b"FEPD"
FORMAT_VERSION = 1


class ArchitectureError(ValueError):
    """Layer descriptors do not chain into a valid network."""


class StorageError(ValueError):
    """Model or dataset file is unreadable: bad magic/version, corrupt, truncated."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# normalization


def pose_scale(bounds) -> tuple[np.ndarray, np.ndarray]:
    """Center and half-extent of the map box, for mapping poses to [-1, 1]^2."""
    xmin, ymin, xmax, ymax = bounds
    center = np.array([(xmin + xmax) / 2.0, (ymin + ymax) / 2.0])
    half = np.array([(xmax - xmin) / 2.0, (ymax - ymin) / 2.0])
    return center, half


def normalize_pose(p, bounds) -> np.ndarray:
    center, half = pose_scale(bounds)
    return (np.asarray(p, dtype=float) - center) / half


def denormalize_pose(u, bounds) -> np.ndarray:
    center, half = pose_scale(bounds)
    return np.asarray(u, dtype=float) * half + center


def normalize_scan(ranges, max_range: float) -> np.ndarray:
    return np.asarray(ranges, dtype=float) / max_range


def denormalize_scan(values, max_range: float) -> np.ndarray:
    return np.asarray(values, dtype=float) * max_range


# ---------------------------------------------------------------------------
# architecture

_LAYER_KINDS = ("fourier", "fc", "reshape", "conv", "tconv", "crop")


def _fourier_omegas(freqs: int) -> np.ndarray:
    """Angular frequencies pi * 2^k for the sinusoidal input features."""
    return np.pi * (2.0 ** np.arange(freqs))


@dataclass(frozen=True)
class Architecture:
    """Validated layer chain plus the derived flat-parameter layout.

    `layers` is a tuple of plain dicts (JSON-portable). Validation computes
    the shape each layer produces and assigns every weight/bias a slice of
    the flat parameter vector.
    """

    layers: tuple
    input_dim: int = field(init=False, default=0, compare=False)
    output_dim: int = field(init=False, default=0, compare=False)
    param_count: int = field(init=False, default=0, compare=False)
    _plan: tuple = field(init=False, default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        plan = []
        offset = 0
        state: tuple  # ("vec", n) or ("seq", length, channels)
        state = ("vec", 2)
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            if kind not in _LAYER_KINDS:
                raise ArchitectureError(f"layer {i}: unknown kind {kind!r}")
            if kind == "fourier":
                freqs = layer["freqs"]
                if state[0] != "vec":
                    raise ArchitectureError(
                        f"layer {i}: fourier expects a vector, upstream gives {state}"
                    )
                if freqs < 1:
                    raise ArchitectureError(f"layer {i}: freqs must be >= 1")
                plan.append(("fourier", state[1], freqs))
                state = ("vec", state[1] * (1 + 2 * freqs))
            elif kind == "fc":
                n_in, n_out, act = layer["in"], layer["out"], layer["act"]
                if state != ("vec", n_in):
                    raise ArchitectureError(
                        f"layer {i}: fc expects a {n_in}-vector, upstream gives {state}"
                    )
                w = (offset, (n_in, n_out))
                offset += n_in * n_out
                b = (offset, (n_out,))
                offset += n_out
                plan.append(("fc", w, b, act))
                state = ("vec", n_out)
            elif kind == "reshape":
                length, ch = layer["length"], layer["channels"]
                if state != ("vec", length * ch):
                    raise ArchitectureError(
                        f"layer {i}: reshape to {length}x{ch} needs a "
                        f"{length * ch}-vector, upstream gives {state}"
                    )
                plan.append(("reshape", length, ch))
                state = ("seq", length, ch)
            elif kind in ("conv", "tconv"):
                cin, cout, k = layer["in_ch"], layer["out_ch"], layer["kernel"]
                act = layer["act"]
                if state[0] != "seq" or state[2] != cin:
                    raise ArchitectureError(
                        f"layer {i}: {kind} expects {cin} channels, upstream gives {state}"
                    )
                length = state[1]
                if kind == "conv":
                    pad = layer.get("pad", 0)
                    out_len = length + 2 * pad - k + 1
                    extra = (pad,)
                else:
                    stride = layer["stride"]
                    out_len = (length - 1) * stride + k
                    extra = (stride,)
                if out_len < 1:
                    raise ArchitectureError(f"layer {i}: output length {out_len} < 1")
                w = (offset, (k, cin, cout))
                offset += k * cin * cout
                b = (offset, (cout,))
                offset += cout
                plan.append((kind, w, b, act) + extra)
                state = ("seq", out_len, cout)
            elif kind == "crop":
                target = layer["length"]
                if state[0] != "seq" or state[1] < target:
                    raise ArchitectureError(
                        f"layer {i}: cannot crop {state} to length {target}"
                    )
                start = (state[1] - target) // 2
                plan.append(("crop", start, target))
                state = ("seq", target, state[2])
        if state[0] != "seq" or state[2] != 1:
            raise ArchitectureError(f"network must end in one channel, got {state}")
        object.__setattr__(self, "input_dim", 2)
        object.__setattr__(self, "output_dim", state[1])
        object.__setattr__(self, "param_count", offset)
        object.__setattr__(self, "_plan", tuple(plan))

    def to_json(self) -> str:
        return json.dumps({"layers": list(self.layers)}, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Architecture":
        try:
            layers = json.loads(text)["layers"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ArchitectureError(f"bad architecture descriptor: {exc}")
        return Architecture(tuple(layers))


def default_architecture(beam_count: int = 622) -> Architecture:
    """2 -> 192 -> 48ch x 40 -> (tconv/conv) x 2 -> 1ch x 660 -> crop to beams."""
    return Architecture(
        (
            {"kind": "fc", "in": 2, "out": 192, "act": "relu"},
            {"kind": "fc", "in": 192, "out": 1920, "act": "relu"},
            {"kind": "reshape", "length": 40, "channels": 48},
            {"kind": "tconv", "in_ch": 48, "out_ch": 40, "kernel": 8, "stride": 4, "act": "relu"},
            {"kind": "conv", "in_ch": 40, "out_ch": 40, "kernel": 5, "pad": 2, "act": "relu"},
            {"kind": "tconv", "in_ch": 40, "out_ch": 20, "kernel": 8, "stride": 4, "act": "relu"},
            {"kind": "conv", "in_ch": 20, "out_ch": 20, "kernel": 5, "pad": 2, "act": "relu"},
            {"kind": "conv", "in_ch": 20, "out_ch": 1, "kernel": 1, "pad": 0, "act": "identity"},
            {"kind": "crop", "length": beam_count},
        )
    )


@dataclass
class GenModel:
    """Architecture plus one flat float64 parameter vector."""

    arch: Architecture
    params: np.ndarray

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.param_count,):
            raise ArchitectureError(
                f"parameter vector has {self.params.size} entries, "
                f"architecture needs {self.arch.param_count}"
            )


def init_model(arch: Architecture, rng: np.random.Generator) -> GenModel:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    params = np.zeros(arch.param_count)
    for entry in arch._plan:
        kind = entry[0]
        if kind in ("fourier", "reshape", "crop"):
            continue
        (w_off, w_shape), (b_off, b_shape) = entry[1], entry[2]
        if kind == "fc":
            fan_in, fan_out = w_shape
        else:  # conv / tconv: fans counted over kernel taps
            k, cin, cout = w_shape
            fan_in, fan_out = cin * k, cout * k
        s = math.sqrt(6.0 / (fan_in + fan_out))
        n = int(np.prod(w_shape))
        params[w_off : w_off + n] = rng.uniform(-s, s, size=n)
        # biases stay zero
    return GenModel(arch, params)


def _views(arch: Architecture, params: np.ndarray):
    """Per-layer (w, b) array views into the flat parameter vector."""
    out = []
    for entry in arch._plan:
        if entry[0] in ("fourier", "reshape", "crop"):
            out.append(None)
            continue
        (w_off, w_shape), (b_off, b_shape) = entry[1], entry[2]
        w = params[w_off : w_off + int(np.prod(w_shape))].reshape(w_shape)
        b = params[b_off : b_off + b_shape[0]]
        out.append((w, b))
    return out


# ---------------------------------------------------------------------------
# forward / tangent propagation

def _pad_length(h: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return h
    width = [(0, 0)] * h.ndim
    width[-2] = (pad, pad)
    return np.pad(h, width)


def _conv1d(h: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Cross-correlation along the length axis; h is (..., L, Cin).

    One stacked matmul per kernel tap over a shifted window view — on a
    single core this beats materializing an im2col buffer.
    """
    k = w.shape[0]
    hp = _pad_length(h, pad)
    out_len = hp.shape[-2] - k + 1
    y = hp[..., 0:out_len, :] @ w[0]
    for tap in range(1, k):
        y += hp[..., tap : tap + out_len, :] @ w[tap]
    return y


def _tconv1d(h: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Stride-s transposed convolution: output index = input index * s + tap."""
    k, cin, cout = w.shape
    length = h.shape[-2]
    out_len = (length - 1) * stride + k
    v = h @ w.transpose(1, 0, 2).reshape(cin, k * cout)
    y = np.zeros(h.shape[:-2] + (out_len, cout))
    for tap in range(k):
        y[..., tap : tap + stride * length : stride, :] += v[
            ..., tap * cout : (tap + 1) * cout
        ]
    return y


def _propagate(arch, views, x, tx=None, relu_hook=None):
    """Value pass, optionally with forward-mode tangents stacked on axis 0.

    x: (N, 2). tx: (D, N, 2) tangent directions or None. Returns (N, B) and,
    when tangents are given, also (D, N, B). ReLU uses the value's
    pre-activation sign with the convention ReLU'(0) = 0, applied identically
    to value and tangents.
    """
    h, t = np.asarray(x, dtype=float), tx
    for entry, vw in zip(arch._plan, views):
        kind = entry[0]
        if kind == "fourier":
            _, n, freqs = entry
            om = _fourier_omegas(freqs)
            ang = h[..., None, :] * om[:, None]  # (..., K, n)
            sin, cos = np.sin(ang), np.cos(ang)
            flat = h.shape[:-1] + (freqs * n,)
            h = np.concatenate(
                [h, sin.reshape(flat), cos.reshape(flat)], axis=-1
            )
            if t is not None:
                tang = t[..., None, :] * om[:, None]
                tflat = t.shape[:-1] + (freqs * n,)
                t = np.concatenate(
                    [t, (cos * tang).reshape(tflat), (-sin * tang).reshape(tflat)],
                    axis=-1,
                )
            continue
        if kind == "fc":
            (w, b), act = vw, entry[3]
            h = h @ w + b
            if t is not None:
                t = t @ w
        elif kind == "conv":
            (w, b), act, pad = vw, entry[3], entry[4]
            h = _conv1d(h, w, pad) + b
            if t is not None:
                t = _conv1d(t, w, pad)
        elif kind == "tconv":
            (w, b), act, stride = vw, entry[3], entry[4]
            h = _tconv1d(h, w, stride) + b
            if t is not None:
                t = _tconv1d(t, w, stride)
        elif kind == "reshape":
            _, length, ch = entry
            h = h.reshape(h.shape[:-1] + (length, ch))
            if t is not None:
                t = t.reshape(t.shape[:-1] + (length, ch))
            continue
        else:  # crop
            _, start, target = entry
            h = h[..., start : start + target, :]
            if t is not None:
                t = t[..., start : start + target, :]
            continue
        if act == "relu":
            if relu_hook is not None:
                relu_hook(h, t)
            mask = h > 0.0
            h = h * mask
            if t is not None:
                t = t * mask
    h = h[..., 0]  # single output channel
    if t is None:
        return h
    return h, t[..., 0]


def forward_batch(model: GenModel, x: np.ndarray) -> np.ndarray:
    """Predicted normalized scans for a batch of normalized poses: (N, 2) -> (N, B)."""
    return _propagate(model.arch, _views(model.arch, model.params), np.atleast_2d(x))


def forward(model: GenModel, x) -> np.ndarray:
    """Predicted normalized scan at one normalized pose: (2,) -> (B,)."""
    return forward_batch(model, np.asarray(x, dtype=float)[None, :])[0]


def forward_and_jacobian(model: GenModel, x) -> tuple[np.ndarray, np.ndarray]:
    """One pass returning g(x) with its exact Jacobian, shapes (B,) and (B, 2).

    Two tangent directions (the input basis) ride along the forward pass, so
    the Jacobian is exact rather than a finite-difference estimate.
    """
    x = np.asarray(x, dtype=float).reshape(1, 2)
    tx = np.eye(2)[:, None, :]  # (2 directions, batch 1, input 2)
    val, tan = _propagate(model.arch, _views(model.arch, model.params), x, tx)
    return val[0], tan[:, 0, :].T.copy()


def jacobian(model: GenModel, x) -> np.ndarray:
    """Exact derivative of the predicted scan with respect to the pose, (B, 2)."""
    return forward_and_jacobian(model, x)[1]


def fd_probe_stays_linear(model: GenModel, x, h: float = 1e-5, safety: float = 4.0) -> bool:
    """True when central differences of step h around x cannot cross a ReLU kink.

    Away from ReLU kinks the network is smooth, so central differences track
    the exact Jacobian to O(h^2); a pre-activation changing sign inside the
    probe interval is what invalidates them. First-order screen: flag any
    unit whose pre-activation magnitude is within safety * h * |directional
    slope| of zero.
    """
    x = np.asarray(x, dtype=float).reshape(1, 2)
    tx = np.eye(2)[:, None, :]
    ok = True

    def hook(pre, tpre):
        nonlocal ok
        slope = np.abs(tpre).max(axis=0)
        if np.any(np.abs(pre) <= safety * h * slope):
            ok = False

    _propagate(model.arch, _views(model.arch, model.params), x, tx, relu_hook=hook)
    return ok


# ---------------------------------------------------------------------------
# training

class EpochStats(NamedTuple):
    train_l1: float
    val_l1: float


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 500
    epochs: int = 42
    learning_rate: float = 1e-3
    lr_hold: int = 18
    lr_decay: float = 0.82
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = 3.0 / 13.0
    seed: int = 0

    def epoch_lr(self, epoch: int) -> float:
        """Step size for a zero-based epoch: held flat, then decayed per epoch.

        Constant Adam steps bounce around the loss basin; shrinking them
        after `lr_hold` epochs settles several times deeper on the same
        budget.
        """
        return self.learning_rate * self.lr_decay ** max(0, epoch - self.lr_hold)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lr_hold < 0:
            raise ValueError(f"lr_hold must be >= 0, got {self.lr_hold}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}"
            )


def _forward_training(arch, views, x):
    """Forward pass that keeps the per-layer tensors needed for backprop."""
    h = x
    cache = []
    for entry, vw in zip(arch._plan, views):
        kind = entry[0]
        if kind == "fourier":
            _, n, freqs = entry
            om = _fourier_omegas(freqs)
            ang = h[..., None, :] * om[:, None]
            sin, cos = np.sin(ang), np.cos(ang)
            flat = h.shape[:-1] + (freqs * n,)
            cache.append({"kind": kind, "sin": sin, "cos": cos, "om": om, "n": n})
            h = np.concatenate([h, sin.reshape(flat), cos.reshape(flat)], axis=-1)
            continue
        if kind == "fc":
            (w, b), act = vw, entry[3]
            pre = h @ w + b
            rec = {"kind": kind, "x": h}
        elif kind == "conv":
            (w, b), act, pad = vw, entry[3], entry[4]
            hp = _pad_length(h, pad)
            pre = _conv1d(hp, w, 0) + b
            rec = {"kind": kind, "xp": hp, "pad": pad}
        elif kind == "tconv":
            (w, b), act, stride = vw, entry[3], entry[4]
            pre = _tconv1d(h, w, stride) + b
            rec = {"kind": kind, "x": h, "stride": stride}
        elif kind == "reshape":
            cache.append({"kind": kind, "shape": h.shape})
            h = h.reshape(h.shape[:-1] + (entry[1], entry[2]))
            continue
        else:  # crop
            _, start, target = entry
            cache.append({"kind": kind, "start": start, "pre_len": h.shape[-2]})
            h = h[..., start : start + target, :]
            continue
        if act == "relu":
            mask = pre > 0.0
            h = pre * mask
            rec["mask"] = mask
        else:
            h = pre
            rec["mask"] = None
        cache.append(rec)
    return h[..., 0], cache


def _backward(arch, views, cache, d_out):
    """Backprop of d(loss)/d(output) to a flat parameter gradient."""
    grad = np.zeros(arch.param_count)
    g = d_out[..., None]  # restore the channel axis
    for entry, vw, rec in zip(reversed(arch._plan), reversed(views), reversed(cache)):
        kind = entry[0]
        if kind == "fourier":
            n, om = rec["n"], rec["om"]
            kn = len(om) * n
            g_sin = g[..., n : n + kn].reshape(rec["sin"].shape)
            g_cos = g[..., n + kn :].reshape(rec["sin"].shape)
            g = g[..., :n] + (
                (rec["cos"] * g_sin - rec["sin"] * g_cos) * om[:, None]
            ).sum(axis=-2)
            continue
        if kind == "reshape":
            g = g.reshape(rec["shape"])
            continue
        if kind == "crop":
            full = np.zeros(g.shape[:-2] + (rec["pre_len"], g.shape[-1]))
            full[..., rec["start"] : rec["start"] + g.shape[-2], :] = g
            g = full
            continue
        if rec["mask"] is not None:
            g = g * rec["mask"]
        (w_off, w_shape), (b_off, b_shape) = entry[1], entry[2]
        w, _ = vw
        n_w = int(np.prod(w_shape))
        if kind == "fc":
            x = rec["x"]
            grad[w_off : w_off + n_w] = (x.T @ g).ravel()
            grad[b_off : b_off + b_shape[0]] = g.sum(axis=0)
            g = g @ w.T
        elif kind == "conv":
            xp, pad = rec["xp"], rec["pad"]
            k, cin, cout = w_shape
            out_len = g.shape[-2]
            padded_len = xp.shape[-2]
            # dW: align the output gradient with each tap inside a full-length
            # buffer so the contraction is one contiguous GEMM per tap.
            xf = xp.reshape(-1, cin)
            gp_buf = np.zeros(xp.shape[:-1] + (cout,))
            dw = np.empty(w_shape)
            for tap in range(k):
                gp_buf[...] = 0.0
                gp_buf[..., tap : tap + out_len, :] = g
                dw[tap] = xf.T @ gp_buf.reshape(-1, cout)
            grad[w_off : w_off + n_w] = dw.ravel()
            grad[b_off : b_off + b_shape[0]] = g.sum(axis=(0, 1))
            gp = np.zeros_like(xp)
            for tap in range(k):
                gp[..., tap : tap + out_len, :] += g @ w[tap].T
            g = gp[..., pad : padded_len - pad, :] if pad else gp
        else:  # tconv
            x, stride = rec["x"], rec["stride"]
            k, cin, cout = w_shape
            length = x.shape[-2]
            # Gather the output gradient back into per-tap blocks.
            gv = np.empty(x.shape[:-1] + (k * cout,))
            for tap in range(k):
                gv[..., tap * cout : (tap + 1) * cout] = g[
                    ..., tap : tap + stride * length : stride, :
                ]
            dwall = x.reshape(-1, cin).T @ gv.reshape(-1, k * cout)
            grad[w_off : w_off + n_w] = (
                dwall.reshape(cin, k, cout).transpose(1, 0, 2).ravel()
            )
            grad[b_off : b_off + b_shape[0]] = g.sum(axis=(0, 1))
            g = gv @ w.transpose(1, 0, 2).reshape(cin, k * cout).T
    return grad


def loss_and_grad(model: GenModel, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over a batch and its flat parameter gradient."""
    views = _views(model.arch, model.params)
    pred, cache = _forward_training(model.arch, views, np.asarray(x, dtype=float))
    resid = pred - np.asarray(y, dtype=float)
    loss = float(np.abs(resid).mean())
    d_out = np.sign(resid) / resid.size
    return loss, _backward(model.arch, views, cache, d_out)


def train(
    model: GenModel, data: "Dataset", cfg: TrainConfig
) -> tuple[GenModel, list[EpochStats]]:
    """Adam on mean absolute error; returns the best-validation parameter state.

    The tail `validation_fraction` of the dataset is held out; the remainder
    is shuffled each epoch. Raises TrainingDivergedError on non-finite loss.
    """
    n = len(data)
    if n == 0:
        raise ValueError("dataset is empty")
    n_val = int(round(cfg.validation_fraction * n))
    n_train = n - n_val
    if cfg.batch_size > n_train:
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds training split of {n_train}"
        )
    x = np.asarray(data.poses, dtype=float)
    y = np.asarray(data.scans, dtype=float)
    x_tr, y_tr = x[:n_train], y[:n_train]
    x_val, y_val = x[n_train:], y[n_train:]

    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    work = GenModel(model.arch, params)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    step = 0
    history: list[EpochStats] = []
    best_val = math.inf
    best_params = params.copy()

    for epoch in range(cfg.epochs):
        lr = cfg.epoch_lr(epoch)
        order = rng.permutation(n_train)
        batch_losses = []
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss, grad = loss_and_grad(work, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1} "
                    f"(learning_rate {cfg.learning_rate})"
                )
            batch_losses.append(loss)
            step += 1
            m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
            m_hat = m / (1.0 - cfg.adam_beta1**step)
            v_hat = v / (1.0 - cfg.adam_beta2**step)
            params -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if n_val:
            val_l1 = float(np.abs(forward_batch(work, x_val) - y_val).mean())
        else:
            val_l1 = float(np.mean(batch_losses))
        if not math.isfinite(val_l1):
            raise TrainingDivergedError(
                f"non-finite validation loss at epoch {epoch + 1} "
                f"(learning_rate {cfg.learning_rate})"
            )
        history.append(EpochStats(float(np.mean(batch_losses)), val_l1))
        if val_l1 < best_val:
            best_val = val_l1
            best_params = params.copy()
    return GenModel(model.arch, best_params), history


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """Normalized (pose, scan) pairs with the provenance needed to denormalize."""

    poses: np.ndarray  # (n, 2) float64 in [-1, 1]
    scans: np.ndarray  # (n, B) float32 in [0, 1]
    map_hash: str
    bounds: tuple[float, float, float, float]
    sensor: SensorConfig

    def __len__(self) -> int:
        return len(self.poses)


def collect_dataset(
    wmap: WorldMap, cfg: SensorConfig, n: int, rng: np.random.Generator
) -> Dataset:
    """Sample n free poses and record their (noisy) scans, both normalized."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    poses = np.empty((n, 2))
    scans = np.empty((n, cfg.beam_count), dtype=np.float32)
    for i in range(n):
        p = sample_free_pose(wmap, rng)
        scan = simulate_scan(wmap, p, cfg, rng)
        poses[i] = normalize_pose(p.to_array(), wmap.bounds)
        scans[i] = normalize_scan(scan, cfg.max_range)
    return Dataset(poses, scans, wmap.identity_hash(), wmap.bounds, cfg)


def heldout_error(
    model: GenModel,
    wmap: WorldMap,
    cfg: SensorConfig,
    n: int,
    rng: np.random.Generator,
) -> float:
    """Mean |predicted - observed| normalized scan error at n fresh poses."""
    total = 0.0
    for _ in range(n):
        p = sample_free_pose(wmap, rng)
        scan = normalize_scan(simulate_scan(wmap, p, cfg, rng), cfg.max_range)
        pred = forward(model, normalize_pose(p.to_array(), wmap.bounds))
        total += float(np.abs(pred - scan).mean())
    return total / n


# ---------------------------------------------------------------------------
# file formats (little-endian, CRC-tailed)

def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise StorageError(f"truncated {self.what} file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _check_envelope(blob: bytes, magic: bytes, what: str) -> _Reader:
    if len(blob) < 12:
        raise StorageError(f"truncated {what} file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise StorageError(f"{what} file checksum mismatch (corrupt or edited)")
    r = _Reader(body, what)
    got = r.take(4)
    if got != magic:
        raise StorageError(
            f"not a {what} file (magic {got!r}, expected {magic!r})"
        )
    version = r.u32()
    if version != FORMAT_VERSION:
        raise StorageError(
            f"unsupported {what} format version {version} (expected {FORMAT_VERSION})"
        )
    return r


def save_model(model: GenModel, path) -> None:
    arch_raw = model.arch.to_json().encode()
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(arch_raw)),
        arch_raw,
        struct.pack("<Q", model.params.size),
        np.ascontiguousarray(model.params, dtype="<f8").tobytes(),
    ]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path) -> GenModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _check_envelope(blob, MODEL_MAGIC, "model")
    arch = Architecture.from_json(r.take(r.u32()).decode())
    count = r.u64()
    if count != arch.param_count:
        raise StorageError(
            f"model file parameter count {count} does not match "
            f"architecture ({arch.param_count})"
        )
    params = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
    return GenModel(arch, params)


def save_dataset(data: Dataset, path) -> None:
    sensor = data.sensor
    meta = {
        "map_hash": data.map_hash,
        "bounds": list(data.bounds),
        "sensor": {
            "beam_count": sensor.beam_count,
            "aperture": sensor.aperture,
            "max_range": sensor.max_range,
            "noise_sigma": sensor.noise_sigma,
            "heading": sensor.heading,
        },
    }
    b = data.scans.shape[1]
    rec = np.dtype([("pose", "<f8", (2,)), ("scan", "<f4", (b,))])
    records = np.empty(len(data), dtype=rec)
    records["pose"] = data.poses
    records["scan"] = data.scans
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _json_block(meta),
        struct.pack("<I", b),
        struct.pack("<Q", len(data)),
        records.tobytes(),
    ]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _check_envelope(blob, DATASET_MAGIC, "dataset")
    try:
        meta = json.loads(r.take(r.u32()).decode())
        sensor = SensorConfig(**meta["sensor"])
        bounds = tuple(float(v) for v in meta["bounds"])
        map_hash = meta["map_hash"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise StorageError(f"bad dataset metadata: {exc}")
    b = r.u32()
    count = r.u64()
    rec = np.dtype([("pose", "<f8", (2,)), ("scan", "<f4", (b,))])
    records = np.frombuffer(r.take(rec.itemsize * count), dtype=rec)
    return Dataset(
        records["pose"].astype(np.float64),
        records["scan"].astype(np.float32),
        map_hash,
        bounds,
        sensor,
    )
