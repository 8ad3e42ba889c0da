"""TSNet: a 3D U-shaped regressor whose nonlinear layers are SkipBlocks."""

import copy
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import InvalidInputError, NumericalError
from models.schemas import DistanceLoss, GradcheckEntry, GradcheckReport
from services.autograd import (
    Tensor, as_tensor, concat, conv3d, conv_transpose3d, max_pool3d, no_grad, parameter,
)

logger = logging.getLogger(__name__)

TRAIN, EVAL = "train", "eval"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEVELS = 4
# gradients below this magnitude are compared by absolute error
GRADCHECK_FLOOR = 1e-3


def glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormParams":
        return cls(
            weight=parameter(np.ones(channels)),
            bias=parameter(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )


@dataclass
class SkipBlockParams:
    in_channels: int
    out_channels: int
    groups: int
    convs: List[Tensor]
    norms: List[BatchNormParams]
    merge: Tensor
    skip: Optional[Tensor] = None

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for s, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            yield f"{prefix}.stage{s}.conv.weight", conv
            yield f"{prefix}.stage{s}.bn.weight", norm.weight
            yield f"{prefix}.stage{s}.bn.bias", norm.bias
        yield f"{prefix}.merge.weight", self.merge
        if self.skip is not None:
            yield f"{prefix}.skip.weight", self.skip

    def named_buffers(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        for s, norm in enumerate(self.norms):
            yield f"{prefix}.stage{s}.bn.running_mean", norm.running_mean
            yield f"{prefix}.stage{s}.bn.running_var", norm.running_var


def init_skip_block(in_channels: int, k: int, groups: int, rng: np.random.Generator) -> SkipBlockParams:
    if in_channels % groups or k % groups:
        raise InvalidInputError(
            f"SkipBlock channels ({in_channels} -> {k}) must be divisible by groups={groups}"
        )
    convs = [
        parameter(glorot_uniform((k, in_channels // groups, 3, 3, 3), rng)),
        parameter(glorot_uniform((k, k // groups, 3, 3, 3), rng)),
    ]
    skip = None if in_channels == k else parameter(glorot_uniform((k, in_channels, 1, 1, 1), rng))
    return SkipBlockParams(
        in_channels=in_channels,
        out_channels=k,
        groups=groups,
        convs=convs,
        norms=[BatchNormParams.create(k), BatchNormParams.create(k)],
        merge=parameter(glorot_uniform((k, k, 1, 1, 1), rng)),
        skip=skip,
    )


@dataclass
class TsnetParams:
    widths: Tuple[int, ...]
    groups: int
    in_channels: int
    encoder: List[SkipBlockParams]
    up: List[Tensor]
    decoder: List[SkipBlockParams]
    head_weight: Tensor
    head_bias: Tensor
    relu_head: bool = False
    meta: Dict[str, object] = field(default_factory=dict)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for level, block in enumerate(self.encoder):
            yield from block.named_parameters(f"encoder.{level}")
        for level, (up, block) in enumerate(zip(self.up, self.decoder)):
            yield f"up.{level}.weight", up
            yield from block.named_parameters(f"decoder.{level}")
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for level, block in enumerate(self.encoder):
            yield from block.named_buffers(f"encoder.{level}")
        for level, block in enumerate(self.decoder):
            yield from block.named_buffers(f"decoder.{level}")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def weight_tensors(self) -> List[Tensor]:
        """Convolution kernels only; norm affine terms and biases are not decayed."""
        return [t for name, t in self.named_parameters() if name.endswith("weight") and ".bn." not in name]

    def weight_norm_sq(self) -> float:
        return float(sum(np.sum(t.data ** 2) for t in self.weight_tensors()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def clone(self) -> "TsnetParams":
        self.zero_grad()
        return copy.deepcopy(self)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, t in self.named_parameters():
            state[name] = t.data.copy()
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - (set(params) | set(buffers))
        if missing or unexpected:
            raise InvalidInputError(
                f"checkpoint does not fit the network: missing={sorted(missing)[:3]} unexpected={sorted(unexpected)[:3]}"
            )
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise InvalidInputError(f"checkpoint array {name} has shape {np.shape(value)}, expected {target.shape}")
            target[...] = value


def init_tsnet(
    widths: Sequence[int] = (16, 32, 64, 128),
    groups: int = 4,
    seed: int = 0,
    in_channels: int = 1,
    relu_head: bool = False,
) -> TsnetParams:
    """Xavier-initialised TSNet. The first block uses one group when the input has fewer channels."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != LEVELS:
        raise InvalidInputError(f"TSNet needs {LEVELS} widths, got {widths}")
    rng = np.random.default_rng(seed)
    encoder = []
    previous = in_channels
    for w in widths:
        block_groups = groups if previous % groups == 0 else 1
        encoder.append(init_skip_block(previous, w, block_groups, rng))
        previous = w
    up, decoder = [], []
    for level in range(LEVELS - 1):
        up.append(parameter(glorot_uniform((widths[level + 1], widths[level], 2, 2, 2), rng)))
        decoder.append(init_skip_block(2 * widths[level], widths[level], groups, rng))
    return TsnetParams(
        widths=widths,
        groups=groups,
        in_channels=in_channels,
        encoder=encoder,
        up=up,
        decoder=decoder,
        head_weight=parameter(glorot_uniform((1, widths[0], 1, 1, 1), rng)),
        head_bias=parameter(np.zeros(1)),
        relu_head=relu_head,
    )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _channel_view(t: Tensor) -> Tensor:
    return t.reshape(1, -1, 1, 1, 1)


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = TRAIN, update_stats: bool = True) -> Tensor:
    if x.ndim != 5:
        raise InvalidInputError(f"batch_norm expects (N, C, X, Y, Z), got {x.shape}")
    axes = (0, 2, 3, 4)
    count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
    if mode == TRAIN:
        if count < 2:
            raise InvalidInputError("batch_norm in train mode needs more than one value per channel")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        normed = centered * (var + BN_EPS) ** -0.5
        if update_stats:
            params.running_mean[...] = (1 - BN_MOMENTUM) * params.running_mean + BN_MOMENTUM * mean.data.ravel()
            unbiased = var.data.ravel() * count / (count - 1)
            params.running_var[...] = (1 - BN_MOMENTUM) * params.running_var + BN_MOMENTUM * unbiased
    elif mode == EVAL:
        mean = params.running_mean.reshape(1, -1, 1, 1, 1)
        scale = 1.0 / np.sqrt(params.running_var.reshape(1, -1, 1, 1, 1) + BN_EPS)
        normed = (x - mean) * scale
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")
    return normed * _channel_view(params.weight) + _channel_view(params.bias)


def skip_block(x: Tensor, p: SkipBlockParams, mode: str = TRAIN, update_stats: bool = True) -> Tensor:
    """Two (grouped 3^3 conv, BN, ReLU) stages, 1^3 merge, plus the skip path."""
    if x.ndim != 5 or x.shape[1] != p.in_channels:
        raise InvalidInputError(f"skip_block expects {p.in_channels} input channels, got shape {x.shape}")
    h = x
    for conv, norm in zip(p.convs, p.norms):
        h = conv3d(h, conv, padding="same", groups=p.groups)
        h = batch_norm(h, norm, mode, update_stats).relu()
    merged = conv3d(h, p.merge)
    shortcut = x if p.skip is None else conv3d(x, p.skip)
    return merged + shortcut


def tsnet_forward(x, p: TsnetParams, mode: str = TRAIN, update_stats: bool = True) -> Tensor:
    """U-shaped pass; accepts (C, X, Y, Z) or (N, C, X, Y, Z) and returns the same layout."""
    x = as_tensor(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 5 or x.shape[1] != p.in_channels:
        raise InvalidInputError(f"TSNet expects {p.in_channels}-channel input, got shape {x.shape}")
    factor = 2 ** (LEVELS - 1)
    if any(s % factor for s in x.shape[2:]):
        raise InvalidInputError(f"TSNet spatial dims must be divisible by {factor}, got {x.shape[2:]}")

    skips = []
    h = x
    for level, block in enumerate(p.encoder):
        h = skip_block(h, block, mode, update_stats)
        if level < LEVELS - 1:
            skips.append(h)
            h = max_pool3d(h)
    for level in reversed(range(LEVELS - 1)):
        h = conv_transpose3d(h, p.up[level])
        h = concat([skips[level], h], axis=1)
        h = skip_block(h, p.decoder[level], mode, update_stats)
    out = conv3d(h, p.head_weight, p.head_bias)
    if p.relu_head:
        out = out.relu()
    return out.reshape(*out.shape[1:]) if squeeze else out


def predict(p: TsnetParams, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return tsnet_forward(Tensor(x), p, mode=EVAL).data


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


def soft_dice_loss(pred: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - soft Dice of sigmoid(pred) against a binary mask."""
    prob = pred.sigmoid()
    mask = np.asarray(mask, dtype=np.float64)
    inter = (prob * mask).sum()
    return 1.0 - (inter * 2.0 + smooth) / (prob.sum() + float(mask.sum()) + smooth)


def weight_penalty(p: TsnetParams) -> Tensor:
    total = Tensor(0.0)
    for w in p.weight_tensors():
        total = total + (w * w).sum()
    return total


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    for t in params:
        if t.grad is not None:
            t.data = t.data - lr * t.grad
        t.zero_grad()


def train_step(
    p: TsnetParams,
    batch: Tuple[np.ndarray, np.ndarray],
    lr: float,
    alpha: float = 0.1,
    loss: DistanceLoss = DistanceLoss.DISTANCE,
) -> Tuple[TsnetParams, float]:
    """One gradient-descent step on data loss + alpha * ||W||^2; returns (new params, pre-step loss)."""
    if lr < 0:
        raise InvalidInputError("learning rate must be non-negative")
    inputs, targets = batch
    updated = p.clone()
    out = tsnet_forward(Tensor(inputs), updated, mode=TRAIN)
    if loss == DistanceLoss.DICE:
        data_term = soft_dice_loss(out, np.asarray(targets) > 0)
    else:
        data_term = mse(out, np.asarray(targets, dtype=np.float64))
    total = data_term + weight_penalty(updated) * alpha
    value = total.item()
    if not np.isfinite(value):
        raise NumericalError(f"training loss is not finite ({value})")
    total.backward()
    sgd_step(updated.parameters(), lr)
    return updated, value


def fit(
    p: TsnetParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    steps: int,
    lr: float,
    alpha: float = 0.1,
    loss: DistanceLoss = DistanceLoss.DISTANCE,
) -> Tuple[TsnetParams, List[float]]:
    losses = []
    for step in range(steps):
        p, value = train_step(p, (inputs, targets), lr, alpha, loss)
        losses.append(value)
        if step % 20 == 0:
            logger.debug("step %d loss %.6f", step, value)
    return p, losses


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tuple[str, Tensor]],
    n_samples: int = 50,
    eps: float = 1e-5,
    seed: int = 0,
    tolerance: float = 1e-4,
    floor: float = GRADCHECK_FLOOR,
) -> GradcheckReport:
    """Compare backward gradients with central differences on sampled entries.

    fn must rebuild the scalar loss from scratch on each call. Relative error is
    |a - n| / max(|a|, |n|, floor).
    """
    for _, t in params:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for _, t in params]

    sizes = np.array([t.data.size for _, t in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)

    entries = []
    for flat in np.sort(picks):
        which = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[which - 1] if which else 0))
        name, t = params[which]
        index = np.unravel_index(local, t.data.shape)
        original = t.data[index]
        with no_grad():
            t.data[index] = original + eps
            plus = fn().item()
            t.data[index] = original - eps
            minus = fn().item()
        t.data[index] = original
        numeric = (plus - minus) / (2 * eps)
        grad = float(analytic[which][index])
        rel = abs(grad - numeric) / max(abs(grad), abs(numeric), floor)
        entries.append(GradcheckEntry(name=name, index=[int(i) for i in index], analytic=grad, numeric=numeric, rel_error=rel))

    worst = max((e.rel_error for e in entries), default=0.0)
    return GradcheckReport(entries=entries, max_rel_error=worst, passed=worst <= tolerance, floor=floor)


def projection_loss(out: Tensor, projection: np.ndarray) -> Tensor:
    """Scalar sum(out * R) used by gradient checks."""
    return (out * projection).sum()


def verify_layers(
    widths: Sequence[int] = (4, 8, 16, 32),
    dims: Sequence[int] = (16, 16, 32),
    groups: int = 4,
    n_samples: int = 50,
    tolerance: float = 1e-4,
    seed: int = 0,
    eps: float = 1e-6,
) -> Dict[str, GradcheckReport]:
    """Central-difference checks of every layer type and of a small full TSNet."""
    rng = np.random.default_rng(seed)

    def check(fn: Callable[[], Tensor], params: Sequence[Tuple[str, Tensor]]) -> GradcheckReport:
        return gradcheck(fn, params, n_samples=n_samples, eps=eps, seed=seed, tolerance=tolerance)

    reports: Dict[str, GradcheckReport] = {}

    x = parameter(rng.normal(size=(2, 4, 5, 5, 6)))
    w = parameter(rng.normal(size=(4, 2, 3, 3, 3)) * 0.3)
    b = parameter(rng.normal(size=4))
    projection = rng.normal(size=(2, 4, 5, 5, 6))
    reports["conv3d"] = check(
        lambda: projection_loss(conv3d(x, w, b, padding="same", groups=2), projection),
        [("input", x), ("weight", w), ("bias", b)],
    )

    x = parameter(rng.normal(size=(1, 4, 3, 3, 4)))
    w = parameter(rng.normal(size=(4, 2, 2, 2, 2)) * 0.3)
    b = parameter(rng.normal(size=2))
    projection = rng.normal(size=(1, 2, 6, 6, 8))
    reports["conv_transpose3d"] = check(
        lambda: projection_loss(conv_transpose3d(x, w, b), projection),
        [("input", x), ("weight", w), ("bias", b)],
    )

    x = parameter(rng.normal(size=(1, 2, 4, 4, 6)))
    projection = rng.normal(size=(1, 2, 2, 2, 3))
    reports["max_pool3d"] = check(lambda: projection_loss(max_pool3d(x), projection), [("input", x)])

    x = parameter(rng.normal(size=(2, 3, 4, 4, 4)) * 2.0 + 1.0)
    norm = BatchNormParams.create(3)
    norm.weight.data = rng.normal(size=3)
    norm.bias.data = rng.normal(size=3)
    projection = rng.normal(size=(2, 3, 4, 4, 4))
    reports["batch_norm"] = check(
        lambda: projection_loss(batch_norm(x, norm, TRAIN, update_stats=False), projection),
        [("input", x), ("weight", norm.weight), ("bias", norm.bias)],
    )

    x = parameter(rng.normal(size=(1, 4, 4, 4, 4)))
    block = init_skip_block(4, 8, 2, rng)
    projection = rng.normal(size=(1, 8, 4, 4, 4))
    reports["skip_block"] = check(
        lambda: projection_loss(skip_block(x, block, TRAIN, update_stats=False), projection),
        [("input", x)] + list(block.named_parameters("block")),
    )

    net = init_tsnet(widths, groups, seed)
    x = rng.normal(size=(1, 1, *dims))
    projection = rng.normal(size=(1, 1, *dims))
    reports["tsnet"] = check(
        lambda: projection_loss(tsnet_forward(Tensor(x), net, TRAIN, update_stats=False), projection),
        list(net.named_parameters()),
    )
    for name, report in reports.items():
        logger.debug("gradcheck %s: max rel error %.2e", name, report.max_rel_error)
    return reports
