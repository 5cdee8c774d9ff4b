"""Minimal reverse-mode autodiff: a recording tape, the handful of layer ops a
small conv net needs, binary cross entropy, and bias-corrected Adam.

Values live in numpy arrays: float32 for training, float64 for the
gradient-check mode used by the tests. Every op validates shapes up front,
computes its forward value eagerly, and records a closure that adds its
contribution to the input gradients. ``backward`` replays the closures in
exact reverse recording order, which is a valid topological order because ops
record as they execute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BCE_CLIP = 1e-7


class Node:
    """A value buffer paired with a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None

    def grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Node(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of executed ops; backward replays it in exact reverse."""

    def __init__(self):
        self._records: list[tuple[Node, Callable[[], None]]] = []

    def record(self, out: Node, backfn: Callable[[], None]) -> None:
        self._records.append((out, backfn))

    def __len__(self):
        return len(self._records)


def backward(tape: Tape, loss: Node) -> None:
    """Seed d(loss)/d(loss)=1 and accumulate gradients into every input node.

    The loss must be a scalar produced on this tape. The tape is cleared
    afterwards so a new step starts from an empty record.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if not any(out is loss for out, _ in tape._records):
        raise ValueError("backward: loss node was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for out, backfn in reversed(tape._records):
        if out.grad is not None:
            backfn()
    tape._records.clear()


def _conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(tape: Tape, x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation (no kernel flip) over NCHW input.

    Args:
        x: input node, shape (batch, in_ch, h, w).
        w: kernel node, shape (out_ch, in_ch, kh, kw).
        b: bias node, shape (out_ch,).
    """
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernels, got input {xd.shape}, kernels {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"conv2d: input channels {xd.shape[1]} != kernel in-channels {wd.shape[1]} "
            f"(input {xd.shape}, kernels {wd.shape})"
        )
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"conv2d: bias shape {bd.shape} does not match out-channels {wd.shape[0]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride/padding ({stride}, {padding})")
    batch, in_ch, h, w_in = xd.shape
    out_ch, _, kh, kw = wd.shape
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w_in, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {wd.shape[2:]} does not fit input {xd.shape[2:]} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.empty((batch, in_ch, kh, kw, oh, ow), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    colsmat = cols.reshape(batch, in_ch * kh * kw, oh * ow)
    wmat = wd.reshape(out_ch, -1)
    ymat = wmat @ colsmat + bd[:, None]
    out = Node(ymat.reshape(batch, out_ch, oh, ow))

    def backfn():
        dy = out.grad.reshape(batch, out_ch, -1)
        dy_flat = dy.transpose(1, 0, 2).reshape(out_ch, -1)
        cols_flat = colsmat.transpose(1, 0, 2).reshape(colsmat.shape[1], -1)
        w.grad_buffer()[...] += (dy_flat @ cols_flat.T).reshape(wd.shape)
        b.grad_buffer()[...] += dy.sum(axis=(0, 2))
        dcols = (wmat.T @ dy).reshape(batch, in_ch, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
        if padding:
            x.grad_buffer()[...] += dxp[:, :, padding : padding + h, padding : padding + w_in]
        else:
            x.grad_buffer()[...] += dxp

    tape.record(out, backfn)
    return out


def relu(tape: Tape, x: Node) -> Node:
    out = Node(np.maximum(x.data, 0))

    def backfn():
        x.grad_buffer()[...] += out.grad * (x.data > 0)

    tape.record(out, backfn)
    return out


def maxpool2(tape: Tape, x: Node) -> Node:
    """2x2 max pooling with stride 2. Even spatial dims only, no implicit padding."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"maxpool2: need 4-d input, got {xd.shape}")
    batch, ch, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = xd.reshape(batch, ch, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h2, w2, 4)
    # first max in window scan order wins; keeps the subgradient deterministic
    idx = windows.argmax(axis=-1)
    out = Node(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def backfn():
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
        x.grad_buffer()[...] += (
            dwin.reshape(batch, ch, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h, w)
        )

    tape.record(out, backfn)
    return out


def global_avg_pool(tape: Tape, x: Node) -> Node:
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"global_avg_pool: need 4-d input, got {xd.shape}")
    area = xd.shape[2] * xd.shape[3]
    out = Node(xd.mean(axis=(2, 3)))

    def backfn():
        x.grad_buffer()[...] += out.grad[:, :, None, None] / area

    tape.record(out, backfn)
    return out


def linear(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    """Affine map: y = x @ w.T + b with w shaped (out_features, in_features)."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear: incompatible shapes, input {xd.shape} vs weights {wd.shape}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"linear: bias shape {bd.shape} does not match out-features {wd.shape[0]}")
    out = Node(xd @ wd.T + bd)

    def backfn():
        dy = out.grad
        x.grad_buffer()[...] += dy @ wd
        w.grad_buffer()[...] += dy.T @ xd
        b.grad_buffer()[...] += dy.sum(axis=0)

    tape.record(out, backfn)
    return out


def sigmoid(tape: Tape, x: Node) -> Node:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    # keep the output inside the open interval even where exp saturates
    info = np.finfo(xd.dtype)
    np.clip(y, info.tiny, 1.0 - info.epsneg, out=y)
    out = Node(y)

    def backfn():
        x.grad_buffer()[...] += out.grad * y * (1.0 - y)

    tape.record(out, backfn)
    return out


def bce_loss(tape: Tape, probs: Node, targets) -> Node:
    """Mean binary cross entropy against {0,1} targets, clamped at BCE_CLIP."""
    pd = probs.data
    td = np.asarray(targets)
    if td.shape != pd.shape:
        raise ValueError(f"bce_loss: targets shape {td.shape} != probabilities shape {pd.shape}")
    if not np.isin(td, (0, 1)).all():
        raise ValueError("bce_loss: targets must be 0 or 1")
    td = td.astype(pd.dtype, copy=False)
    lo = pd.dtype.type(BCE_CLIP)
    hi = pd.dtype.type(1.0) - lo
    pc = np.clip(pd, lo, hi)
    loss = -(td * np.log(pc) + (1.0 - td) * np.log1p(-pc)).mean()
    out = Node(np.asarray(loss, dtype=pd.dtype))

    def backfn():
        inside = (pd > lo) & (pd < hi)  # clamp is flat outside
        dp = (pc - td) / (pc * (1.0 - pc) * pd.size)
        probs.grad_buffer()[...] += out.grad * inside * dp

    tape.record(out, backfn)
    return out


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Node], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter buffers."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params vs {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"adam_step: state holds {len(state.m)} moments for {len(params)} params")
    state.step_count += 1
    mc = 1.0 - state.beta1**state.step_count
    vc = 1.0 - state.beta2**state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / mc) / (np.sqrt(v / vc) + state.eps)
