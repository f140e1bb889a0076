"""Model assembly: variant topologies, forward pass, per-nodule prediction.

All variants share a stem conv block and a global-average-pooled head; they
differ in which body blocks sit between (residual vs. non-local attention),
how many stages there are, and whether the head is linear (one piece) or
maxout. The final logit is wrapped in stochastic depth, so at eval time it
is scaled by the survival probability before the sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from nslgc import blocks as B
from nslgc import tensor as T
from nslgc.preprocess import center_views
from nslgc.tensor import Tensor

VARIANTS = (
    "local_global_linear",
    "maxout_local_global",
    "maxout_a",
    "resnet_a",
    "resnet_a_maxout",
)


@dataclass
class ModelConfig:
    variant: str = "maxout_local_global"
    input_size: int = 16
    base_channels: int = 8
    maxout_pieces: int = 2
    dropout_rates: tuple[float, float] = (0.1, 0.2)
    survival_prob: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.input_size < 8 or self.input_size % 4:
            raise ValueError(f"input_size must be a multiple of 4 and >= 8, got {self.input_size}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.maxout_pieces < 1:
            raise ValueError(f"maxout_pieces must be >= 1, got {self.maxout_pieces}")
        if len(self.dropout_rates) != 2:
            raise ValueError("dropout_rates must hold exactly two rates")


@dataclass
class ModelState:
    config: ModelConfig
    stem: B.ConvBlockParams
    body: list[tuple[str, str, object]]  # (name, kind in {"res", "nonlocal"}, params)
    head: B.MaxoutHeadParams
    sd: B.StochasticDepthConfig
    epoch: int = 0

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Named trainable tensors in a stable traversal order."""
        out: list[tuple[str, Tensor]] = []

        def conv(name, p):
            out.extend(
                [(f"{name}.kernel", p.kernel), (f"{name}.bias", p.bias), (f"{name}.gamma", p.gamma), (f"{name}.beta", p.beta)]
            )

        conv("stem", self.stem)
        for name, kind, p in self.body:
            if kind == "res":
                conv(f"{name}.block1", p.block1)
                conv(f"{name}.block2", p.block2)
                if p.proj is not None:
                    conv(f"{name}.proj", p.proj)
            else:
                for sub in ("theta", "phi", "g", "out"):
                    lin = getattr(p, sub)
                    out.append((f"{name}.{sub}.kernel", lin.kernel))
                    out.append((f"{name}.{sub}.bias", lin.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def bn_buffers(self) -> list[tuple[str, np.ndarray]]:
        """Named batch-norm running buffers, same traversal order as parameters()."""
        out: list[tuple[str, np.ndarray]] = []

        def conv(name, p):
            out.append((f"{name}.running_mean", p.running_mean))
            out.append((f"{name}.running_var", p.running_var))

        conv("stem", self.stem)
        for name, kind, p in self.body:
            if kind == "res":
                conv(f"{name}.block1", p.block1)
                conv(f"{name}.block2", p.block2)
                if p.proj is not None:
                    conv(f"{name}.proj", p.proj)
        return out


def _body_plan(config: ModelConfig) -> list[tuple[str, str, dict]]:
    """The (name, kind, geometry) sequence for each variant.

    Geometry keys: in/out channels for residual stages, channels and
    dropout rate for attention blocks.
    """
    c = config.base_channels
    d1, d2 = config.dropout_rates
    if config.variant in ("local_global_linear", "maxout_local_global"):
        return [
            ("res1", "res", dict(cin=c, cout=c, down=True)),
            ("nl1", "nonlocal", dict(c=c, rate=d1)),
            ("res2", "res", dict(cin=c, cout=2 * c, down=True)),
            ("nl2", "nonlocal", dict(c=2 * c, rate=d2)),
        ]
    if config.variant == "maxout_a":
        return [
            ("res1", "res", dict(cin=c, cout=c, down=True)),
            ("nl1", "nonlocal", dict(c=c, rate=d1)),
            ("res2", "res", dict(cin=c, cout=2 * c, down=True)),
            ("nl2", "nonlocal", dict(c=2 * c, rate=d2)),
            ("res3", "res", dict(cin=2 * c, cout=2 * c, down=False)),
        ]
    # resnet_a family: attention blocks replaced by residual stages, plus an
    # extra stage, so it is strictly larger than the local-global models.
    return [
        ("res1", "res", dict(cin=c, cout=c, down=True)),
        ("res2", "res", dict(cin=c, cout=c, down=False)),
        ("res3", "res", dict(cin=c, cout=2 * c, down=True)),
        ("res4", "res", dict(cin=2 * c, cout=2 * c, down=False)),
        ("res5", "res", dict(cin=2 * c, cout=2 * c, down=False)),
    ]


def _head_pieces(config: ModelConfig) -> int:
    if config.variant in ("local_global_linear", "resnet_a"):
        return 1
    return config.maxout_pieces


def build_model(config: ModelConfig) -> ModelState:
    """Deterministically initialize a model from its config (seeded)."""
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    stem = B.init_conv_block(rng, 1, config.base_channels, kernel_size=3, stride=1, padding=1)
    body: list[tuple[str, str, object]] = []
    for name, kind, geo in _body_plan(config):
        if kind == "res":
            body.append((name, kind, B.init_residual_block(rng, geo["cin"], geo["cout"], downsample=geo["down"])))
        else:
            body.append((name, kind, B.init_nonlocal_block(rng, geo["c"], geo["rate"])))
    head = B.init_maxout_head(rng, 2 * config.base_channels, _head_pieces(config))
    return ModelState(
        config=config,
        stem=stem,
        body=body,
        head=head,
        sd=B.StochasticDepthConfig(survival_prob=config.survival_prob),
    )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected parameter shapes derived from the config alone (no model build)."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.kernel"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
        shapes[f"{name}.gamma"] = (cout,)
        shapes[f"{name}.beta"] = (cout,)

    conv("stem", 1, config.base_channels, 3)
    for name, kind, geo in _body_plan(config):
        if kind == "res":
            cin, cout, down = geo["cin"], geo["cout"], geo["down"]
            conv(f"{name}.block1", cin, cout, 3)
            conv(f"{name}.block2", cout, cout, 2 if down else 3)
            if down:
                conv(f"{name}.proj", cin, cout, 2)
            elif cin != cout:
                conv(f"{name}.proj", cin, cout, 1)
        else:
            c, inner = geo["c"], geo["c"] // 2
            for sub, (ci, co) in {"theta": (c, inner), "phi": (c, inner), "g": (c, inner), "out": (inner, c)}.items():
                shapes[f"{name}.{sub}.kernel"] = (co, ci, 1, 1)
                shapes[f"{name}.{sub}.bias"] = (co,)
    k = _head_pieces(config)
    shapes["head.weight"] = (k, 2 * config.base_channels)
    shapes["head.bias"] = (k,)
    return shapes


def param_count(state: ModelState) -> int:
    return sum(p.size for _, p in state.parameters())


def clone_model(state: ModelState) -> ModelState:
    """Deep copy: fresh tensors and buffers, identical values, no shared storage."""

    def conv(p: B.ConvBlockParams) -> B.ConvBlockParams:
        return B.ConvBlockParams(
            kernel=Tensor(p.kernel.data.copy(), requires_grad=True),
            bias=Tensor(p.bias.data.copy(), requires_grad=True),
            gamma=Tensor(p.gamma.data.copy(), requires_grad=True),
            beta=Tensor(p.beta.data.copy(), requires_grad=True),
            running_mean=p.running_mean.copy(),
            running_var=p.running_var.copy(),
            stride=p.stride,
            padding=p.padding,
        )

    def lin(p: B.Linear1x1) -> B.Linear1x1:
        return B.Linear1x1(
            kernel=Tensor(p.kernel.data.copy(), requires_grad=True),
            bias=Tensor(p.bias.data.copy(), requires_grad=True),
        )

    body: list[tuple[str, str, object]] = []
    for name, kind, p in state.body:
        if kind == "res":
            body.append(
                (name, kind, B.ResidualBlockParams(conv(p.block1), conv(p.block2), None if p.proj is None else conv(p.proj)))
            )
        else:
            body.append(
                (name, kind, B.NonLocalBlockParams(lin(p.theta), lin(p.phi), lin(p.g), lin(p.out), p.dropout_rate))
            )
    head = B.MaxoutHeadParams(
        weight=Tensor(state.head.weight.data.copy(), requires_grad=True),
        bias=Tensor(state.head.bias.data.copy(), requires_grad=True),
        pieces=state.head.pieces,
    )
    return ModelState(
        config=replace(state.config),
        stem=conv(state.stem),
        body=body,
        head=head,
        sd=B.StochasticDepthConfig(survival_prob=state.sd.survival_prob),
        epoch=state.epoch,
    )


def model_forward(
    state: ModelState,
    x: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    dropout_enabled: bool = True,
    stochastic_depth_enabled: bool = True,
    update_bn_stats: bool = True,
) -> Tensor:
    """[N, 1, S, S] view batch -> [N] malignancy probabilities.

    The noise switches disable the corresponding mechanism entirely: with
    stochastic depth off the head logit is never dropped in train mode and
    never rescaled in eval mode.
    """
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ValueError(f"model input must be [N, 1, S, S], got shape {x.data.shape}")
    if x.data.shape[2] != state.config.input_size or x.data.shape[3] != state.config.input_size:
        raise ValueError(
            f"model expects {state.config.input_size}x{state.config.input_size} views, "
            f"got {x.data.shape[2]}x{x.data.shape[3]}"
        )
    h = B.conv_block_forward(state.stem, x, mode, update_bn_stats)
    for _, kind, p in state.body:
        if kind == "res":
            h = B.residual_block_forward(p, h, mode, update_bn_stats)
        else:
            h = B.nonlocal_block_forward(p, h, mode, rng=rng, dropout_enabled=dropout_enabled)
    feats = T.mean_spatial(h)
    logit = B.maxout_head_forward(state.head, feats)
    if stochastic_depth_enabled:
        zero = Tensor(np.zeros_like(logit.data))
        logit = B.stochastic_depth_apply(state.sd, logit, zero, mode, rng=rng)
    return T.sigmoid(logit)


def predict_nodule(state: ModelState, volume: np.ndarray) -> float:
    """Mean eval-mode probability over the three orthogonal center views."""
    if np.min(volume) < 0.0 or np.max(volume) > 1.0:
        raise ValueError("nodule volume must be normalized to [0, 1] before prediction")
    views = center_views(volume)[:, None, :, :]
    probs = model_forward(state, Tensor(views), mode="eval")
    return float(probs.data.mean())
