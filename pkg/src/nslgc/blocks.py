"""Network building blocks: conv/BN/ReLU, residual, non-local attention, maxout head.

Every block is a plain dataclass of parameter tensors plus a forward
function, so the model layer can compose them freely and checkpointing
can walk them by name. Train/eval behaviour differences (batch stats,
dropout, stochastic depth) are driven by an explicit ``mode`` argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nslgc import tensor as T
from nslgc.tensor import Tensor


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Conv + BN (+ ReLU)
# ---------------------------------------------------------------------------


@dataclass
class ConvBlockParams:
    """Convolution followed by batch norm; ReLU is applied by the caller's choice."""

    kernel: Tensor  # [Cout, Cin, kH, kW]
    bias: Tensor  # [Cout]
    gamma: Tensor  # [Cout]
    beta: Tensor  # [Cout]
    running_mean: np.ndarray  # [Cout]
    running_var: np.ndarray  # [Cout]
    stride: int = 1
    padding: int = 0


def init_conv_block(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    stride: int = 1,
    padding: int = 0,
) -> ConvBlockParams:
    """He-initialized kernel, zero bias, identity batch norm, unit running variance."""
    fan_in = in_channels * kernel_size * kernel_size
    std = np.sqrt(2.0 / fan_in)
    return ConvBlockParams(
        kernel=Tensor(rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True),
        bias=Tensor(np.zeros(out_channels), requires_grad=True),
        gamma=Tensor(np.ones(out_channels), requires_grad=True),
        beta=Tensor(np.zeros(out_channels), requires_grad=True),
        running_mean=np.zeros(out_channels),
        running_var=np.ones(out_channels),
        stride=stride,
        padding=padding,
    )


def conv_bn_forward(p: ConvBlockParams, x: Tensor, mode: str, update_bn_stats: bool = True) -> Tensor:
    _check_mode(mode)
    h = T.conv2d(x, p.kernel, p.bias, stride=p.stride, padding=p.padding)
    return T.batch_norm(
        h, p.gamma, p.beta, p.running_mean, p.running_var, mode=mode, update_running=update_bn_stats
    )


def conv_block_forward(p: ConvBlockParams, x: Tensor, mode: str, update_bn_stats: bool = True) -> Tensor:
    """Conv -> BN -> ReLU."""
    return T.relu(conv_bn_forward(p, x, mode, update_bn_stats))


# ---------------------------------------------------------------------------
# Residual block
# ---------------------------------------------------------------------------


@dataclass
class ResidualBlockParams:
    """Two conv/BN blocks with a skip connection: ReLU(block2(block1(x)) + proj(x)).

    block1 carries its own ReLU; block2's ReLU is deferred until after the
    skip addition. ``proj`` is a 1x1 (or strided 2x2) conv/BN used only when
    channels or spatial size change; otherwise the skip is the identity.
    """

    block1: ConvBlockParams
    block2: ConvBlockParams
    proj: ConvBlockParams | None = None


def init_residual_block(
    rng: np.random.Generator, in_channels: int, out_channels: int, downsample: bool = False
) -> ResidualBlockParams:
    """3x3 conv pair; downsampling uses a 2x2 stride-2 second conv and projection."""
    block1 = init_conv_block(rng, in_channels, out_channels, kernel_size=3, stride=1, padding=1)
    if downsample:
        block2 = init_conv_block(rng, out_channels, out_channels, kernel_size=2, stride=2, padding=0)
        proj = init_conv_block(rng, in_channels, out_channels, kernel_size=2, stride=2, padding=0)
    else:
        block2 = init_conv_block(rng, out_channels, out_channels, kernel_size=3, stride=1, padding=1)
        proj = None if in_channels == out_channels else init_conv_block(rng, in_channels, out_channels, kernel_size=1)
    return ResidualBlockParams(block1=block1, block2=block2, proj=proj)


def residual_block_forward(p: ResidualBlockParams, x: Tensor, mode: str, update_bn_stats: bool = True) -> Tensor:
    h = conv_block_forward(p.block1, x, mode, update_bn_stats)
    h = conv_bn_forward(p.block2, h, mode, update_bn_stats)
    skip = x if p.proj is None else conv_bn_forward(p.proj, x, mode, update_bn_stats)
    return T.relu(T.add(h, skip))


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: train-mode mask scaled by 1/(1-rate); identity in eval."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return T.mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# Non-local (embedded-Gaussian self-attention) block
# ---------------------------------------------------------------------------


@dataclass
class Linear1x1:
    """A bare 1x1 convolution (kernel + bias), no normalization."""

    kernel: Tensor  # [Cout, Cin, 1, 1]
    bias: Tensor  # [Cout]


@dataclass
class NonLocalBlockParams:
    """Embedded-Gaussian self-attention over all spatial positions.

    theta/phi/g are 1x1 convs into an inner width of C/2; ``out`` maps back
    to C. The attended signal is dropout-regularized and added to the input.
    """

    theta: Linear1x1
    phi: Linear1x1
    g: Linear1x1
    out: Linear1x1
    dropout_rate: float = 0.0


def init_linear_1x1(rng: np.random.Generator, in_channels: int, out_channels: int) -> Linear1x1:
    std = np.sqrt(2.0 / in_channels)
    return Linear1x1(
        kernel=Tensor(rng.normal(0.0, std, size=(out_channels, in_channels, 1, 1)), requires_grad=True),
        bias=Tensor(np.zeros(out_channels), requires_grad=True),
    )


def init_nonlocal_block(rng: np.random.Generator, channels: int, dropout_rate: float) -> NonLocalBlockParams:
    if channels < 2 or channels % 2:
        raise ValueError(f"non-local block needs an even channel count >= 2, got {channels}")
    inner = channels // 2
    return NonLocalBlockParams(
        theta=init_linear_1x1(rng, channels, inner),
        phi=init_linear_1x1(rng, channels, inner),
        g=init_linear_1x1(rng, channels, inner),
        out=init_linear_1x1(rng, inner, channels),
        dropout_rate=dropout_rate,
    )


def nonlocal_block_forward(
    p: NonLocalBlockParams,
    x: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    dropout_enabled: bool = True,
) -> Tensor:
    """y = x + dropout(W_out (softmax(theta(x)^T phi(x)) g(x))).

    Attention weights are a softmax over key positions, so each query
    position mixes features from every spatial location (P x P weights
    for P = H*W positions).
    """
    _check_mode(mode)
    n, c, h, w = x.data.shape
    pos = h * w
    inner = p.theta.kernel.data.shape[0]

    theta = T.reshape(T.conv2d(x, p.theta.kernel, p.theta.bias), (n, inner, pos))
    phi = T.reshape(T.conv2d(x, p.phi.kernel, p.phi.bias), (n, inner, pos))
    gx = T.reshape(T.conv2d(x, p.g.kernel, p.g.bias), (n, inner, pos))

    logits = T.matmul(T.swap_last2(theta), phi)  # [N, P, P]: query rows, key columns
    attn = T.softmax_axis(logits, axis=-1)
    mixed = T.matmul(attn, T.swap_last2(gx))  # [N, P, inner]
    mixed = T.reshape(T.swap_last2(mixed), (n, inner, h, w))
    y = T.conv2d(mixed, p.out.kernel, p.out.bias)
    rate = p.dropout_rate if dropout_enabled else 0.0
    y = dropout(y, rate, mode, rng)
    return T.add(x, y)


def attention_weights(p: NonLocalBlockParams, x: Tensor) -> np.ndarray:
    """The [N, P, P] softmax attention map (diagnostics and tests)."""
    n, c, h, w = x.data.shape
    pos = h * w
    inner = p.theta.kernel.data.shape[0]
    theta = T.reshape(T.conv2d(x, p.theta.kernel, p.theta.bias), (n, inner, pos))
    phi = T.reshape(T.conv2d(x, p.phi.kernel, p.phi.bias), (n, inner, pos))
    return T.softmax_axis(T.matmul(T.swap_last2(theta), phi), axis=-1).data


# ---------------------------------------------------------------------------
# Maxout head
# ---------------------------------------------------------------------------


@dataclass
class MaxoutHeadParams:
    """k affine pieces over pooled features; the logit is their pointwise max.

    k = 1 degenerates to an ordinary linear head.
    """

    weight: Tensor  # [k, F]
    bias: Tensor  # [k]
    pieces: int = 2


def init_maxout_head(rng: np.random.Generator, in_features: int, pieces: int) -> MaxoutHeadParams:
    """Pieces start as zero-sum perturbations of one shared He-scaled draw.

    A one-piece head is exactly a linear scorer (the shared draw itself).
    With several pieces the initial logit is base.x + max_i(delta_i.x) with
    the deltas summing to zero, so the head opens as a linear scorer plus a
    small convex bump, and gradient routing starts as a stable partition by
    sign of the delta projections. Independent per-piece draws would instead
    make the initial logit a max over unrelated random directions, which
    trains noisily on small datasets.
    """
    if pieces < 1:
        raise ValueError(f"maxout head needs >= 1 piece, got {pieces}")
    std = np.sqrt(2.0 / in_features)
    base = rng.normal(0.0, std, size=in_features)
    if pieces == 1:
        weight = base[None, :].copy()
    else:
        delta = rng.normal(0.0, 0.1 * std, size=(pieces, in_features))
        delta -= delta.mean(axis=0)
        weight = base[None, :] + delta
    return MaxoutHeadParams(
        weight=Tensor(weight, requires_grad=True),
        bias=Tensor(np.zeros(pieces), requires_grad=True),
        pieces=pieces,
    )


def maxout_head_forward(p: MaxoutHeadParams, features: Tensor) -> Tensor:
    """[N, F] -> [N] logits: max over the k affine pieces per example."""
    if features.data.ndim != 2 or features.data.shape[1] != p.weight.data.shape[1]:
        raise ValueError(
            f"maxout head expects [N, {p.weight.data.shape[1]}] features, got shape {features.data.shape}"
        )
    pieces = T.add_rowvec(T.matmul(features, T.swap_last2(p.weight)), p.bias)  # [N, k]
    return T.reshape(T.group_max(pieces, pieces=p.pieces), (features.data.shape[0],))


# ---------------------------------------------------------------------------
# Stochastic depth
# ---------------------------------------------------------------------------


@dataclass
class StochasticDepthConfig:
    """Survival probability of a residual branch."""

    survival_prob: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.survival_prob <= 1.0:
            raise ValueError(f"survival_prob must be in (0, 1], got {self.survival_prob}")


def stochastic_depth_apply(
    config: StochasticDepthConfig,
    branch: Tensor,
    skip: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Train: keep the branch with probability p1, else pass the skip alone.

    Eval: deterministic expectation, skip + p1 * branch.
    """
    _check_mode(mode)
    if mode == "train":
        if rng is None:
            raise ValueError("stochastic depth in train mode requires an rng")
        if rng.random() < config.survival_prob:
            return T.add(skip, branch)
        return skip
    return T.add(skip, T.scale(branch, config.survival_prob))
