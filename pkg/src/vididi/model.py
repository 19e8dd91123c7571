"""Trainable encoder/projector/predictor with reverse-mode gradients.

The network is a fixed stack of small layers over (B, C, T, H, W) clip
batches: per-frame flatten, dense layers with a pointwise nonlinearity,
a temporal mean-pool, and a feature head. Projection (and for the
teacher-student objective, prediction) heads are dense stacks with
per-sample normalization on hidden layers, which keeps every row's
embedding independent of the rest of the batch.

Gradients come from an explicit activation tape recorded during
``forward`` and replayed by ``backward``. No framework autodiff is
involved, so the loss modules' closed-form gradients and central
finite differences are both independent cross-checks.

Optimization is momentum SGD with decoupled weight decay, an optional
per-tensor trust-ratio scaling (LARS-style), cosine learning-rate
decay with an optional linear warmup, and for the teacher-student
path an EMA target whose momentum anneals toward 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .augment import sample_clip_pair, spatial_augment
from .objectives import LossReport, byol_loss, infonce_loss, vicreg_loss
from .rng import stream
from .schedule import Policy, ViewPairSpec, select_pair
from .tensors import ClipBatch, VideoTensor, derive_view

if TYPE_CHECKING:
    from .config import ExperimentConfig

OBJECTIVES = ("simclr", "byol", "vicreg")


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# network spec and parameters


@dataclass(frozen=True)
class NetSpec:
    """Layer widths and kinds for encoder, projector and predictor."""

    encoder_hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    projector_hidden: int = 64
    projector_dim: int = 32
    predictor_hidden: int = 64
    nonlinearity: str = "relu"
    normalization: str = "layer"

    def __post_init__(self):
        if self.feature_dim <= 0 or self.projector_dim <= 0:
            raise ValueError("feature and projector dimensions must be positive")
        if any(w <= 0 for w in self.encoder_hidden):
            raise ValueError("hidden widths must be positive")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.normalization not in ("layer", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


class ParamSet:
    """Named parameter tensors with a parallel gradient accumulator.

    ``target`` holds the EMA copy for the teacher-student objective.
    ``version`` increments on every optimizer step so stale tapes are
    detected instead of silently producing wrong gradients.
    """

    def __init__(self, values: dict[str, np.ndarray], target: dict[str, np.ndarray] | None = None):
        self.values = values
        self.grads = {name: np.zeros_like(v) for name, v in values.items()}
        self.target = target
        self.version = 0

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def add_grad(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g

    def make_target(self) -> None:
        self.target = {name: v.copy() for name, v in self.values.items()}


# ---------------------------------------------------------------------------
# layers

class _Layer:
    """One differentiable op. Subclasses cache what backward needs."""

    def param_specs(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, fan_in) triples for this layer's tensors."""
        return []

    def forward(self, x: np.ndarray, values: dict[str, np.ndarray]):
        raise NotImplementedError

    def backward(self, g: np.ndarray, cache, values, grads: dict[str, np.ndarray] | None):
        raise NotImplementedError


class Linear(_Layer):
    def __init__(self, name: str, d_in: int, d_out: int):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out

    def param_specs(self):
        return [
            (f"{self.name}.w", (self.d_in, self.d_out), self.d_in),
            (f"{self.name}.b", (self.d_out,), self.d_in),
        ]

    def forward(self, x, values):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"{self.name}: expected last dim {self.d_in}, got {x.shape[-1]}")
        return x @ values[f"{self.name}.w"] + values[f"{self.name}.b"], x

    def backward(self, g, cache, values, grads):
        x = cache
        if grads is not None:
            x2 = x.reshape(-1, self.d_in)
            g2 = g.reshape(-1, self.d_out)
            grads[f"{self.name}.w"] += x2.T @ g2
            grads[f"{self.name}.b"] += g2.sum(axis=0)
        return g @ values[f"{self.name}.w"].T


class Activation(_Layer):
    def __init__(self, kind: str):
        self.kind = kind

    def forward(self, x, values):
        if self.kind == "tanh":
            y = np.tanh(x)
            return y, y
        y = np.maximum(x, 0.0)
        return y, (x > 0.0)

    def backward(self, g, cache, values, grads):
        if self.kind == "tanh":
            return g * (1.0 - cache**2)
        return g * cache


class LayerNorm(_Layer):
    """Per-sample standardization over the last axis, no affine terms."""

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x, values):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered**2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv
        return xhat, (xhat, inv)

    def backward(self, g, cache, values, grads):
        xhat, inv = cache
        return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class FrameFlatten(_Layer):
    """(B, C, T, H, W) -> (B, T, C*H*W)."""

    def forward(self, x, values):
        b, c, t, h, w = x.shape
        y = np.transpose(x, (0, 2, 1, 3, 4)).reshape(b, t, c * h * w)
        return y, (b, c, t, h, w)

    def backward(self, g, cache, values, grads):
        b, c, t, h, w = cache
        return np.transpose(g.reshape(b, t, c, h, w), (0, 2, 1, 3, 4))


class TemporalMeanPool(_Layer):
    """(B, T, F) -> (B, F) by averaging over frames."""

    def forward(self, x, values):
        return x.mean(axis=1), x.shape[1]

    def backward(self, g, cache, values, grads):
        t = cache
        return np.repeat(g[:, None, :] / t, t, axis=1)


@dataclass
class Model:
    spec: NetSpec
    objective: str
    input_dim: int
    stacks: dict[str, list[_Layer]]

    @property
    def head_names(self) -> tuple[str, ...]:
        return tuple(self.stacks)


def build_model(spec: NetSpec, objective: str, input_dim: int) -> Model:
    """Assemble the layer stacks for one objective.

    The projector is 3 dense layers for the contrastive and
    regularization objectives and 2 for the teacher-student one, which
    additionally gets a 2-layer predictor on the online branch.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    act = spec.nonlinearity

    encoder: list[_Layer] = [FrameFlatten()]
    d = input_dim
    for i, width in enumerate(spec.encoder_hidden):
        encoder += [Linear(f"enc.fc{i}", d, width), Activation(act)]
        d = width
    encoder += [TemporalMeanPool(), Linear("enc.out", d, spec.feature_dim)]

    def hidden_block(name: str, d_in: int, d_out: int) -> list[_Layer]:
        block: list[_Layer] = [Linear(name, d_in, d_out)]
        if spec.normalization == "layer":
            block.append(LayerNorm())
        block.append(Activation(act))
        return block

    n_proj = 2 if objective == "byol" else 3
    projector: list[_Layer] = []
    d = spec.feature_dim
    for i in range(n_proj - 1):
        projector += hidden_block(f"proj.fc{i}", d, spec.projector_hidden)
        d = spec.projector_hidden
    projector.append(Linear("proj.out", d, spec.projector_dim))

    stacks = {"encoder": encoder, "projector": projector}
    if objective == "byol":
        predictor = hidden_block("pred.fc0", spec.projector_dim, spec.predictor_hidden)
        predictor.append(Linear("pred.out", spec.predictor_hidden, spec.projector_dim))
        stacks["predictor"] = predictor
    return Model(spec=spec, objective=objective, input_dim=input_dim, stacks=stacks)


def init_params(model: Model, rng: np.random.Generator) -> ParamSet:
    """Fan-in uniform init, one draw per tensor in stack order."""
    values: dict[str, np.ndarray] = {}
    for stack in model.stacks.values():
        for layer in stack:
            for name, shape, fan_in in layer.param_specs():
                bound = 1.0 / math.sqrt(fan_in)
                values[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(values)


@dataclass
class Tape:
    steps: list[tuple[_Layer, object]]
    pset: ParamSet
    version: int
    from_target: bool


def forward(
    model: Model,
    pset: ParamSet,
    clips: ClipBatch | np.ndarray,
    heads: Sequence[str] = ("encoder", "projector"),
    *,
    use_target: bool = False,
    want_tape: bool = True,
) -> tuple[np.ndarray, Tape | None]:
    """Run the requested stacks and record the activation tape.

    ``use_target`` reads the EMA parameter copy (and never produces a
    tape; the target branch is stop-gradient by construction).
    """
    x = clips.stack() if isinstance(clips, ClipBatch) else np.asarray(clips, dtype=np.float64)
    if x.ndim != 5:
        raise ValueError(f"expected (B, C, T, H, W) input, got shape {x.shape}")
    if x.shape[1] * x.shape[3] * x.shape[4] != model.input_dim:
        raise ValueError(
            f"clip shape {x.shape[1:]} gives {x.shape[1] * x.shape[3] * x.shape[4]} "
            f"inputs per frame, model expects {model.input_dim}"
        )
    values = pset.target if use_target else pset.values
    if values is None:
        raise ValueError("parameter set has no target copy")
    if use_target:
        want_tape = False

    steps: list[tuple[_Layer, object]] = []
    for head in heads:
        if head not in model.stacks:
            raise ValueError(f"model for {model.objective!r} has no {head!r} stack")
        for layer in model.stacks[head]:
            x, cache = layer.forward(x, values)
            if want_tape:
                steps.append((layer, cache))
    tape = Tape(steps=steps, pset=pset, version=pset.version, from_target=use_target) if want_tape else None
    return x, tape


def backward(tape: Tape, upstream: np.ndarray) -> np.ndarray:
    """Replay the tape, accumulating parameter gradients.

    Returns the gradient at the tape's input (rarely needed; the data
    path carries no parameters upstream of the encoder).
    """
    if tape.pset.version != tape.version:
        raise RuntimeError("stale tape: parameters changed since forward")
    g = np.asarray(upstream, dtype=np.float64)
    values = tape.pset.values
    grads = tape.pset.grads
    for layer, cache in reversed(tape.steps):
        g = layer.backward(g, cache, values, grads)
    return g


# ---------------------------------------------------------------------------
# optimizer and schedules


@dataclass
class OptimState:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    weight_decay: float = 1e-6
    momentum: float = 0.9
    lars: bool = False
    tau_base: float = 0.99
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(k: int, total: int, eta: float, warmup_steps: int = 0) -> float:
    """Linear warmup to eta, then cosine decay eta*0.5*(cos(pi k/K)+1)."""
    if k < 0 or (total > 0 and k > total):
        raise ValueError(f"step {k} outside 0..{total}")
    if warmup_steps > 0 and k < warmup_steps:
        return eta * k / warmup_steps
    if total <= 0:
        return eta
    return eta * 0.5 * (math.cos(math.pi * (k / total)) + 1.0)


def tau_at(k: int, total: int, tau_base: float) -> float:
    """EMA momentum annealed from tau_base at k=0 to 1 at k=K."""
    if k < 0 or (total > 0 and k > total):
        raise ValueError(f"step {k} outside 0..{total}")
    if total <= 0:
        return tau_base
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * (k / total)) + 1.0) / 2.0


def sgd_step(pset: ParamSet, optim: OptimState, lr: float) -> None:
    """Momentum SGD update from the accumulated gradients.

    Default path uses decoupled weight decay: w *= (1 - lr*wd) before
    the momentum update. With ``lars`` the decay folds into the update
    direction and a per-tensor trust ratio |w| / |g + wd*w| scales it.
    """
    for name, w in pset.values.items():
        g = pset.grads[name]
        buf = optim.buffers.get(name)
        if buf is None:
            buf = optim.buffers[name] = np.zeros_like(w)
        if optim.lars:
            d = g + optim.weight_decay * w
            wn = float(np.linalg.norm(w))
            dn = float(np.linalg.norm(d))
            trust = wn / dn if wn > 0.0 and dn > 0.0 else 1.0
            buf *= optim.momentum
            buf += trust * d
            w -= lr * buf
        else:
            w *= 1.0 - lr * optim.weight_decay
            buf *= optim.momentum
            buf += g
            w -= lr * buf
    optim.step += 1
    pset.version += 1


def ema_update(pset: ParamSet, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, per tensor."""
    if pset.target is None:
        raise ValueError("parameter set has no target copy")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if set(pset.target) != set(pset.values):
        raise ValueError("target and online parameter names differ")
    for name, tgt in pset.target.items():
        if tgt.shape != pset.values[name].shape:
            raise ValueError(f"target shape mismatch for {name}")
        tgt *= tau
        tgt += (1.0 - tau) * pset.values[name]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepLog:
    step: int
    epoch: int
    order_a: int
    order_b: int
    lr: float
    tau: float
    loss: float
    terms: dict[str, float]


@dataclass
class TrainResult:
    model: Model
    params: ParamSet
    logs: list[StepLog]


def _objective_fn(cfg: "ExperimentConfig"):
    kind = cfg.objective
    lc = cfg.loss
    if kind == "simclr":
        return lambda za, zb: infonce_loss(za, zb, lc.alpha)
    if kind == "byol":
        return byol_loss
    if kind == "vicreg":
        return lambda za, zb: vicreg_loss(za, zb, lc.lambda_, lc.mu, lc.nu, lc.gamma, lc.eps)
    raise ValueError(f"unknown objective {kind!r}")


def train(
    videos: Sequence[VideoTensor],
    cfg: "ExperimentConfig",
    *,
    force_epsilon: float | None = None,
) -> TrainResult:
    """Run the full two-stream pretraining loop.

    Per batch: sample two clip windows of T+2 frames per video, augment
    each clip-wise, pick the derivative-order pair from the schedule,
    differentiate and truncate to T frames, encode both streams, apply
    the objective, backprop, and step the optimizer (plus the EMA target
    for the teacher-student objective). Deterministic for a given
    config: every random draw comes from a stream keyed by its role and
    position, so logs and checkpoints are reproducible bit for bit.
    """
    if not videos:
        raise ValueError("dataset is empty")
    if cfg.batch_size < 2:
        raise ValueError("batch size must be at least 2")
    if len(videos) < cfg.batch_size:
        raise ValueError(f"{len(videos)} videos cannot fill a batch of {cfg.batch_size}")
    policy = Policy(cfg.schedule)
    seed = cfg.seed
    t_plus = cfg.t_frames + 2

    channels = videos[0].channels
    input_dim = channels * cfg.augment.out_height * cfg.augment.out_width
    model = build_model(cfg.net, cfg.objective, input_dim)
    pset = init_params(model, stream(seed, "init"))
    if cfg.objective == "byol":
        pset.make_target()

    steps_per_epoch = len(videos) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    optim = OptimState(
        base_lr=cfg.optim.base_lr * cfg.optim.lr_scale,
        total_steps=total_steps,
        warmup_steps=cfg.optim.warmup_epochs * steps_per_epoch,
        weight_decay=cfg.optim.weight_decay,
        momentum=cfg.optim.momentum,
        lars=cfg.optim.lars,
        tau_base=cfg.optim.tau_base,
    )
    loss_fn = _objective_fn(cfg)

    logs: list[StepLog] = []
    k = 0
    for epoch in range(cfg.epochs):
        order = stream(seed, "order", epoch).permutation(len(videos))
        for batch_idx in range(steps_per_epoch):
            indices = order[batch_idx * cfg.batch_size : (batch_idx + 1) * cfg.batch_size]
            pair = select_pair(
                policy, epoch, stream(seed, "schedule", epoch, batch_idx), epsilon=force_epsilon
            )
            xa, xb = _build_batch(videos, indices, pair, cfg, seed, epoch, batch_idx)

            lr = lr_at(k, total_steps, optim.base_lr, optim.warmup_steps)
            tau = tau_at(k, total_steps, optim.tau_base)
            pset.zero_grads()
            if cfg.objective == "byol":
                za, tape = forward(model, pset, xa, ("encoder", "projector", "predictor"))
                zb, _ = forward(model, pset, xb, ("encoder", "projector"), use_target=True)
                _check_finite(za, zb, k)
                report = loss_fn(za, zb)
                backward(tape, report.grad_a)
            else:
                za, tape_a = forward(model, pset, xa)
                zb, tape_b = forward(model, pset, xb)
                _check_finite(za, zb, k)
                report = loss_fn(za, zb)
                backward(tape_a, report.grad_a)
                backward(tape_b, report.grad_b)
            if not math.isfinite(report.total):
                raise DivergenceError(k, report.total)

            sgd_step(pset, optim, lr)
            if cfg.objective == "byol":
                ema_update(pset, tau)

            logs.append(
                StepLog(
                    step=k,
                    epoch=epoch,
                    order_a=pair.order_a,
                    order_b=pair.order_b,
                    lr=lr,
                    tau=tau,
                    loss=report.total,
                    terms=dict(report.terms),
                )
            )
            k += 1
    return TrainResult(model=model, params=pset, logs=logs)


def _check_finite(za: np.ndarray, zb: np.ndarray, step: int) -> None:
    if not (np.all(np.isfinite(za)) and np.all(np.isfinite(zb))):
        raise DivergenceError(step, float("nan"))


def _build_batch(
    videos: Sequence[VideoTensor],
    indices: np.ndarray,
    pair: ViewPairSpec,
    cfg: "ExperimentConfig",
    seed: int,
    epoch: int,
    batch_idx: int,
) -> tuple[ClipBatch, ClipBatch]:
    """Sample, augment and differentiate one batch of view pairs.

    Augmentation always precedes differentiation: each T+2-frame clip
    runs the full spatial pipeline (crop, flip, blur, jitter, gray,
    normalize), and only then is differenced down to its view order and
    truncated to T frames.
    """
    items_a = []
    items_b = []
    for item_idx, vid_idx in enumerate(indices):
        video = videos[int(vid_idx)]
        clip_a, clip_b = sample_clip_pair(
            video, cfg.t_frames + 2, cfg.stride, stream(seed, "clips", epoch, batch_idx, item_idx)
        )
        aug_a, _ = spatial_augment(clip_a, cfg.augment, stream(seed, "augment", epoch, batch_idx, item_idx, 0))
        aug_b, _ = spatial_augment(clip_b, cfg.augment, stream(seed, "augment", epoch, batch_idx, item_idx, 1))
        items_a.append(derive_view(aug_a, pair.order_a, cfg.t_frames))
        items_b.append(derive_view(aug_b, pair.order_b, cfg.t_frames))
    return ClipBatch(tuple(items_a)), ClipBatch(tuple(items_b))
