"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Only the operations the classifier needs are implemented. Recording is
opt-in: ops executed inside a ``with Tape() as tape:`` block append their
backward rules in execution order, and :func:`backward` replays them in
exact reverse order, accumulating gradients into ``Tensor.grad``. Outside
a tape block every op is a plain forward computation, which is what
inference uses.

All math is float64; narrower dtypes appear only in serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    """A computation produced or consumed a non-finite value."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _TapeOp:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn):
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops in execution order so backward can replay them in reverse."""

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted: exited a tape that was not innermost")

    def __len__(self) -> int:
        return len(self.ops)


def _record(output: Tensor, backward_fn) -> None:
    if _TAPE_STACK and output.requires_grad:
        _TAPE_STACK[-1].ops.append(_TapeOp(output, backward_fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(input) into every recorded input's ``.grad``.

    The tape is replayed strictly in reverse recording order, so a tensor
    consumed by several later ops has all downstream contributions summed
    before its own producer runs.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        op.backward_fn(g)


# ---------------------------------------------------------------------------
# Activation-pattern recording (used by gradient_check to detect kinks)
# ---------------------------------------------------------------------------

_PATTERN_SINK: list[bytes] | None = None


class PatternRecorder:
    """Collects the discrete decisions (ReLU masks, maxout argmax) of a forward pass.

    Two evaluations whose recorded patterns differ crossed a kink of a
    piecewise-linear activation, so a finite difference spanning them is
    meaningless.
    """

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self) -> "PatternRecorder":
        global _PATTERN_SINK
        self._prev = _PATTERN_SINK
        _PATTERN_SINK = self.patterns
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _PATTERN_SINK
        _PATTERN_SINK = self._prev

    def signature(self) -> tuple[bytes, ...]:
        return tuple(self.patterns)


def _record_pattern(raw: bytes) -> None:
    if _PATTERN_SINK is not None:
        _PATTERN_SINK.append(raw)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    _record(out, backward_fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    _record(out, backward_fn)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad)

    def backward_fn(g):
        a._accumulate(g * c)

    _record(out, backward_fn)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    _record_pattern(mask.tobytes())
    out = Tensor(np.where(mask, a.data, 0.0), a.requires_grad)

    def backward_fn(g):
        a._accumulate(g * mask)

    _record(out, backward_fn)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign to avoid overflow in exp for large |x|.
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(s, a.requires_grad)

    def backward_fn(g):
        a._accumulate(g * s * (1.0 - s))

    _record(out, backward_fn)
    return out


def elementwise(kind: str, a: Tensor, other: Tensor | float | None = None) -> Tensor:
    """Dispatch by name; `add`/`mul` need a Tensor operand, `scale` a float."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "add":
        if not isinstance(other, Tensor):
            raise ValueError("elementwise add requires a Tensor operand")
        return add(a, other)
    if kind == "mul":
        if not isinstance(other, Tensor):
            raise ValueError("elementwise mul requires a Tensor operand")
        return mul(a, other)
    if kind == "scale":
        if other is None or isinstance(other, Tensor):
            raise ValueError("elementwise scale requires a scalar operand")
        return scale(a, float(other))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = a.data.shape
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def backward_fn(g):
        a._accumulate(g.reshape(old_shape))

    _record(out, backward_fn)
    return out


def swap_last2(a: Tensor) -> Tensor:
    """Transpose the last two axes (copying, so downstream matmuls stay contiguous)."""
    if a.data.ndim < 2:
        raise ValueError(f"swap_last2 requires ndim >= 2, got {a.data.ndim}")
    out = Tensor(np.ascontiguousarray(a.data.swapaxes(-1, -2)), a.requires_grad)

    def backward_fn(g):
        a._accumulate(g.swapaxes(-1, -2))

    _record(out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either both 2-D or both 3-D with a shared batch axis."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul: unsupported ranks {a.data.ndim} and {b.data.ndim}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"matmul: batch dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    _record(out, backward_fn)
    return out


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-K vector to every row of an [N, K] matrix."""
    if a.data.ndim != 2 or b.data.shape != (a.data.shape[1],):
        raise ValueError(f"add_rowvec: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    _record(out, backward_fn)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), a.requires_grad)

    def backward_fn(g):
        a._accumulate(np.full_like(a.data, float(g)))

    _record(out, backward_fn)
    return out


def mean_spatial(a: Tensor) -> Tensor:
    """Global average pool: [N, C, H, W] -> [N, C]."""
    if a.data.ndim != 4:
        raise ValueError(f"mean_spatial requires [N, C, H, W], got shape {a.data.shape}")
    n, c, h, w = a.data.shape
    out = Tensor(a.data.mean(axis=(2, 3)), a.requires_grad)

    def backward_fn(g):
        a._accumulate(np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Structured ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) via im2col and one matmul.

    x: [N, Cin, H, W], kernel: [Cout, Cin, kH, kW], bias: [Cout].
    Output spatial size (H + 2*padding - kH) / stride + 1 must be integral.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be [N, Cin, H, W], got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be [Cout, Cin, kH, kW], got shape {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not tile input {h}x{w} to an integral output size"
        )
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, Cin, Ho, Wo, kH, kW]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    prod = cols @ wmat.T + bias.data  # [N, Ho*Wo, Cout]
    out_data = prod.transpose(0, 2, 1).reshape(n, cout, ho, wo)
    out = Tensor(out_data, x.requires_grad or kernel.requires_grad or bias.requires_grad)

    def backward_fn(g):
        gm = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)  # [N, Ho*Wo, Cout]
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            gk = gm.reshape(-1, cout).T @ cols.reshape(-1, cin * kh * kw)
            kernel._accumulate(gk.reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = gm @ wmat  # [N, Ho*Wo, Cin*kH*kW]
            dwin = dcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
            if padding:
                x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])
            else:
                x._accumulate(dxp)

    _record(out, backward_fn)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes of [N, C, H, W].

    Train mode normalizes by batch statistics (biased variance) and, unless
    ``update_running`` is off, folds them into the running buffers with
    ``running = (1 - momentum) * running + momentum * batch``. Eval mode
    normalizes by the running buffers and never mutates them.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm input must be [N, C, H, W], got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    axes = (0, 2, 3)
    if mode == "train":
        if n < 2:
            raise ValueError(f"batch_norm: train mode requires batch size >= 2, got {n}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(out_data, x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def backward_fn(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * w
                term = (
                    gxhat
                    - gxhat.sum(axis=axes, keepdims=True) / m
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / m
                )
                x._accumulate(term * inv_std[None, :, None, None])
            else:
                x._accumulate(gxhat * inv_std[None, :, None, None])

    _record(out, backward_fn)
    return out


def softmax_axis(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along one axis; rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def backward_fn(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    _record(out, backward_fn)
    return out


def group_max(a: Tensor, pieces: int) -> Tensor:
    """Max over contiguous groups of ``pieces`` columns: [N, k*d] -> [N, d].

    Gradient routes to the argmax of each group; exact ties go to the
    lowest piece index.
    """
    if a.data.ndim != 2:
        raise ValueError(f"group_max requires [N, k*d], got shape {a.data.shape}")
    n, kd = a.data.shape
    if pieces < 1 or kd % pieces:
        raise ValueError(f"group_max: width {kd} is not a multiple of pieces {pieces}")
    d = kd // pieces
    grouped = a.data.reshape(n, d, pieces)
    idx = grouped.argmax(axis=-1)  # ties resolve to the lowest index
    _record_pattern(idx.tobytes())
    out = Tensor(np.take_along_axis(grouped, idx[..., None], axis=-1)[..., 0], a.requires_grad)

    def backward_fn(g):
        dg = np.zeros((n, d, pieces))
        np.put_along_axis(dg, idx[..., None], g[..., None], axis=-1)
        a._accumulate(dg.reshape(n, kd))

    _record(out, backward_fn)
    return out


def bce_loss(p: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12].

    Targets may be fractional (soft or mixed labels). The clamp keeps exact
    0/1 predictions finite; gradients are zero in the clamped region.
    """
    eps = 1e-12
    y = np.asarray(targets, dtype=np.float64)
    if p.data.shape != y.shape:
        raise ValueError(f"bce_loss: prediction shape {p.data.shape} vs target shape {y.shape}")
    if p.data.ndim != 1:
        raise ValueError(f"bce_loss expects 1-D predictions, got shape {p.data.shape}")
    if y.size == 0:
        raise ValueError("bce_loss: empty batch")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("bce_loss: targets must lie in [0, 1]")
    ph = np.clip(p.data, eps, 1.0 - eps)
    losses = -(y * np.log(ph) + (1.0 - y) * np.log(1.0 - ph))
    out = Tensor(losses.mean(), p.requires_grad)
    if not np.isfinite(out.data):
        raise NumericError("bce_loss produced a non-finite value")

    def backward_fn(g):
        inside = (p.data > eps) & (p.data < 1.0 - eps)
        dp = np.where(inside, (ph - y) / (ph * (1.0 - ph)), 0.0) / y.size
        p._accumulate(float(g) * dp)

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Plain SGD (no momentum) with optional step decay of the learning rate."""

    learning_rate: float = 0.01
    step_decay_factor: float = 0.1
    decay_every_epochs: int | None = 50

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.step_decay_factor <= 0.0:
            raise ValueError(f"step_decay_factor must be positive, got {self.step_decay_factor}")
        if self.decay_every_epochs is not None and self.decay_every_epochs < 1:
            raise ValueError(f"decay_every_epochs must be >= 1, got {self.decay_every_epochs}")


def learning_rate_at(config: SgdConfig, epoch: int) -> float:
    """lr(epoch) = lr0 * factor ** floor(epoch / decay_every_epochs)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if config.decay_every_epochs is None:
        return config.learning_rate
    return config.learning_rate * config.step_decay_factor ** (epoch // config.decay_every_epochs)


def sgd_step(params: list[tuple[str, Tensor]], config: SgdConfig, epoch: int) -> float:
    """Apply p <- p - lr(epoch) * p.grad to every named parameter, then zero grads.

    Parameters whose grad is None (not reached by the loss) are left
    unchanged. Returns the learning rate that was applied.
    """
    lr = learning_rate_at(config, epoch)
    for name, p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p.data -= lr * p.grad
        p.grad = None
    return lr


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central finite differences."""

    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tolerance


def _eval_with_patterns(net_fn) -> tuple[float, tuple[bytes, ...]]:
    with PatternRecorder() as rec:
        loss = net_fn()
    return float(loss.data), rec.signature()


def gradient_check(
    net_fn,
    params: list[tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-3,
    rng: np.random.Generator | None = None,
    max_coords_per_param: int = 8,
) -> GradCheckReport:
    """Compare tape gradients of ``net_fn()`` with central finite differences.

    ``net_fn`` must rebuild the scalar loss from the live ``params`` on every
    call and must be deterministic (fixed inputs, no dropout, no running-stat
    updates). Up to ``max_coords_per_param`` coordinates are sampled per
    parameter. A coordinate whose +step/-step evaluations disagree on any
    activation pattern (ReLU mask or maxout argmax) straddles a kink of the
    piecewise-linear network and is excluded rather than compared.

    Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    rng = rng if rng is not None else np.random.default_rng(0)

    for _, p in params:
        p.grad = None
    with Tape() as tape:
        loss = net_fn()
    backward(loss, tape)
    analytic = {}
    for name, p in params:
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        p.grad = None

    max_rel = 0.0
    worst = ""
    n_checked = 0
    n_excluded = 0
    per_param: dict[str, float] = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        n_coords = min(max_coords_per_param, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        param_max = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus, pat_plus = _eval_with_patterns(net_fn)
            flat[idx] = orig - step
            f_minus, pat_minus = _eval_with_patterns(net_fn)
            flat[idx] = orig
            if pat_plus != pat_minus:
                n_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            n_checked += 1
            param_max = max(param_max, rel)
            if rel > max_rel:
                max_rel = rel
                worst = name
        per_param[name] = param_max

    return GradCheckReport(
        max_rel_error=max_rel,
        n_checked=n_checked,
        n_excluded=n_excluded,
        worst_param=worst,
        per_param=per_param,
    )
