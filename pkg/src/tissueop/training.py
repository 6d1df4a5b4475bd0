"""Losses, exact reverse-mode gradients, Adam, and the training loop.

The data loss is the sum over samples of squared discrete L2 norms of
the prediction error (trapezoidal quadrature, both displacement
channels). The physics penalty is the squared norm of the prediction
under zero loading, weighted by ``gamma``; ``gamma = 0`` recovers the
purely data-driven objective bitwise.

Gradients are exact reverse-mode with hand-derived adjoints for the
lifting, the shared layers (gradients accumulate across the reused
parameter copies), the spectral convolution (the adjoint of the forward
transform is the scaled inverse transform), and the projection. Complex
spectral kernels are differentiated via their real and imaginary parts.
Finite differences are used only as a verification oracle
(:func:`fd_gradient_check`), never for training.

Learning-rate schedule: the stated stage schedule admits two readings;
by default the rate is halved every ``lr_decay_every`` epochs *during*
each depth stage (``decay_during_training=True``); the alternative
constant-rate reading is available via the flag.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .grid import (
    GridSpec,
    Sample,
    build_input_features,
    node_coordinates,
    relative_l2_error,
    GridField,
    trapezoid_weights,
)
from .ifno import (
    ACTIVATIONS,
    IfnoParams,
    ModelConfig,
    SubnetCache,
    SubNetParams,
    init_params,
    shallow_to_deep,
    subnet_forward,
)
from .spectral import SpectralWeights, spectral_conv_vjp

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

#: Chunk size used when accumulating gradients over large batches; the
#: reduction order is fixed, so chunking does not change the result.
GRAD_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss weighting."""

    epochs_per_depth: int = 1000
    lr0: float = 3e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 100
    decay_during_training: bool = True
    depth_schedule: tuple[int, ...] = (3, 6, 12)
    gamma: float = 0.0
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not self.depth_schedule:
            raise ConfigError("depth schedule must be nonempty")
        if any(b <= a for a, b in zip(self.depth_schedule, self.depth_schedule[1:])):
            raise ConfigError("depth schedule must be strictly increasing")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.epochs_per_depth < 1:
            raise ConfigError("epochs_per_depth must be >= 1")

    def learning_rate(self, epoch_in_stage: int) -> float:
        if not self.decay_during_training:
            return self.lr0
        return self.lr0 * self.lr_decay ** (epoch_in_stage // self.lr_decay_every)


@dataclass
class TrainHistory:
    """Per-epoch training trace plus final evaluation summaries."""

    epoch: list[int] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    data_loss: list[float] = field(default_factory=list)
    physics_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    final_train_error: float | None = None
    final_test_error: float | None = None

    def append(self, epoch, depth, lr, data_loss, physics_loss, seconds):
        self.epoch.append(int(epoch))
        self.depth.append(int(depth))
        self.lr.append(float(lr))
        self.data_loss.append(float(data_loss))
        self.physics_loss.append(float(physics_loss))
        self.seconds.append(float(seconds))

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "depth", "lr", "data_loss", "physics_loss", "seconds"])
            for row in zip(
                self.epoch, self.depth, self.lr, self.data_loss, self.physics_loss, self.seconds
            ):
                writer.writerow(row)


def prepare_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, GridSpec]:
    """Stack samples into (features, targets) training arrays."""
    if not samples:
        raise ValueError("need at least one sample")
    spec = samples[0].field.spec
    feats = np.stack([build_input_features(s.boundary).values for s in samples])
    targets = np.stack([s.field.values for s in samples])
    return feats, targets, spec

def zero_loading_features(spec: GridSpec) -> np.ndarray:
    """Input features of the all-zero boundary loading, shape (1, nx, ny, 4)."""
    coords = node_coordinates(spec)
    feats = np.concatenate([coords, np.zeros_like(coords)], axis=-1)
    return feats[None]


def _batch_loss_sq(diff: np.ndarray, quad: np.ndarray) -> float:
    """Sum over a batch of squared quadrature norms; diff (B, nx, ny)."""
    return float(np.einsum("ij,bij->", quad, diff * diff))


def data_loss(params: IfnoParams, samples: list[Sample]) -> float:
    """Sum of squared L2 errors over the samples (both channels)."""
    feats, targets, spec = prepare_arrays(samples)
    return _forward_data_loss(params, feats, targets, trapezoid_weights(spec))


def _forward_data_loss(params, feats, targets, quad) -> float:
    total = 0.0
    for ch, sub in ((0, params.sub_x), (1, params.sub_y)):
        for lo in range(0, feats.shape[0], GRAD_CHUNK):
            sl = slice(lo, lo + GRAD_CHUNK)
            out, _ = subnet_forward(
                feats[sl], sub, params.depth, params.dt, params.activation
            )
            total += _batch_loss_sq(out - targets[sl, :, :, ch], quad)
    return total


def physics_loss(params: IfnoParams, spec: GridSpec) -> float:
    """Squared L2 norm of the prediction under zero boundary loading."""
    feats = zero_loading_features(spec)
    quad = trapezoid_weights(spec)
    total = 0.0
    for sub in (params.sub_x, params.sub_y):
        out, _ = subnet_forward(feats, sub, params.depth, params.dt, params.activation)
        total += _batch_loss_sq(out, quad)
    return total


def hybrid_loss(
    params: IfnoParams, samples: list[Sample], gamma: float, spec: GridSpec | None = None
) -> float:
    """Data loss plus ``gamma`` times the zero-loading penalty."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    total = data_loss(params, samples)
    if gamma > 0:
        spec = spec if spec is not None else samples[0].field.spec
        total += gamma * physics_loss(params, spec)
    return total


def _zero_blocks(sub: SubNetParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in sub.blocks().items()}


def _subnet_backward(
    features: np.ndarray,
    sub: SubNetParams,
    depth: int,
    dt: float,
    activation: str,
    cache: SubnetCache,
    g_out: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one sub-network batch.

    ``g_out`` is the cotangent of the (B, nx, ny) output. Gradients sum
    across the shared-layer applications and across the batch.
    """
    d = sub.width
    dq = sub.proj_width
    h_last = cache.hiddens[-1]

    # Projection: out = act(h Q1^T + b1) @ q2 + b2
    grads["proj_out_bias"] += g_out.sum()
    grads["proj_out_weight"] += np.einsum(
        "bxy,bxyk->k", g_out, cache.proj_hidden, optimize=True
    )
    g_hidden_pre = (g_out[..., None] * sub.proj_out_weight) * cache.proj_act_deriv
    flat_pre = g_hidden_pre.reshape(-1, dq)
    grads["proj_hidden_weight"] += flat_pre.T @ h_last.reshape(-1, d)
    grads["proj_hidden_bias"] += flat_pre.sum(axis=0)
    g_h = g_hidden_pre @ sub.proj_hidden_weight

    # Shared layers, reverse order: h' = h + dt * act(h W^T + conv(h) + c)
    g_kernel = np.zeros_like(sub.spectral.kernel)
    for layer in range(depth - 1, -1, -1):
        h_l = cache.hiddens[layer]
        g_pre = (dt * g_h) * cache.act_derivs[layer]
        flat_pre = g_pre.reshape(-1, d)
        grads["mix_weight"] += flat_pre.T @ h_l.reshape(-1, d)
        grads["layer_bias"] += flat_pre.sum(axis=0)
        g_conv, g_k = spectral_conv_vjp(g_pre, sub.spectral, cache.conv_coeffs[layer])
        g_kernel += g_k
        g_h = g_h + g_pre @ sub.mix_weight + g_conv
    grads["spectral_kernel"] += g_kernel

    # Lifting: h0 = f P^T + p
    flat_h = g_h.reshape(-1, d)
    grads["lift_weight"] += flat_h.T @ features.reshape(-1, features.shape[-1])
    grads["lift_bias"] += flat_h.sum(axis=0)


def grad(
    params: IfnoParams,
    samples: list[Sample] | tuple[np.ndarray, np.ndarray],
    gamma: float = 0.0,
    spec: GridSpec | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Hybrid loss and its exact gradient with respect to every block.

    ``samples`` may be a list of :class:`Sample` or a precomputed
    ``(features, targets)`` pair (requires ``spec``). Returns
    ``(loss, grads)`` where ``grads`` is keyed like
    :meth:`IfnoParams.blocks`.
    """
    if isinstance(samples, tuple):
        feats, targets = samples
        if spec is None:
            raise ValueError("spec is required with precomputed arrays")
    else:
        feats, targets, spec = prepare_arrays(samples)
    quad = trapezoid_weights(spec)

    grads = {}
    total = 0.0
    for prefix, sub, ch in (("x", params.sub_x, 0), ("y", params.sub_y, 1)):
        sub_grads = _zero_blocks(sub)
        for lo in range(0, feats.shape[0], GRAD_CHUNK):
            sl = slice(lo, lo + GRAD_CHUNK)
            out, cache = subnet_forward(
                feats[sl], sub, params.depth, params.dt, params.activation, keep_cache=True
            )
            diff = out - targets[sl, :, :, ch]
            total += _batch_loss_sq(diff, quad)
            g_out = 2.0 * quad[None] * diff
            _subnet_backward(
                feats[sl], sub, params.depth, params.dt, params.activation,
                cache, g_out, sub_grads,
            )
        if gamma > 0:
            feats0 = zero_loading_features(spec)
            out0, cache0 = subnet_forward(
                feats0, sub, params.depth, params.dt, params.activation, keep_cache=True
            )
            total += gamma * _batch_loss_sq(out0, quad)
            g_out0 = gamma * 2.0 * quad[None] * out0
            _subnet_backward(
                feats0, sub, params.depth, params.dt, params.activation,
                cache0, g_out0, sub_grads,
            )
        for name, arr in sub_grads.items():
            grads[f"{prefix}.{name}"] = arr
    return total, grads


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def fresh(params: IfnoParams) -> "AdamState":
        m, v = {}, {}
        for name, arr in params.blocks().items():
            view = arr.view(np.float64) if np.iscomplexobj(arr) else arr
            m[name] = np.zeros_like(view, dtype=np.float64)
            v[name] = np.zeros_like(view, dtype=np.float64)
        return AdamState(step=0, m=m, v=v)


def adam_step(
    params: IfnoParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[IfnoParams, AdamState]:
    """Standard bias-corrected Adam, applied per parameter block.

    Complex blocks are updated via their real/imaginary components.
    """
    t = state.step + 1
    new_blocks = {}
    new_m, new_v = {}, {}
    for name, arr in params.blocks().items():
        is_complex = np.iscomplexobj(arr)
        theta = arr.view(np.float64).copy() if is_complex else arr.astype(np.float64, copy=True)
        g = grads[name]
        g = g.view(np.float64) if np.iscomplexobj(g) else np.asarray(g, dtype=np.float64)
        g = g.reshape(theta.shape)
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
        new_blocks[name] = theta.view(np.complex128) if is_complex else theta
    return params.with_blocks(new_blocks), AdamState(step=t, m=new_m, v=new_v)


def evaluate_relative_errors(params: IfnoParams, samples: list[Sample]) -> np.ndarray:
    """Per-sample relative L2 errors (NaN where undefined)."""
    feats, targets, spec = prepare_arrays(samples)
    errs = np.empty(len(samples))
    for lo in range(0, feats.shape[0], GRAD_CHUNK):
        sl = slice(lo, lo + GRAD_CHUNK)
        out_x, _ = subnet_forward(feats[sl], params.sub_x, params.depth, params.dt, params.activation)
        out_y, _ = subnet_forward(feats[sl], params.sub_y, params.depth, params.dt, params.activation)
        pred = np.stack([out_x, out_y], axis=-1)
        for b in range(pred.shape[0]):
            errs[lo + b] = relative_l2_error(
                GridField(pred[b], spec.extent), GridField(targets[lo + b], spec.extent)
            )
    return errs


def train(
    samples: list[Sample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    test_samples: list[Sample] | None = None,
) -> tuple[IfnoParams, TrainHistory]:
    """Shallow-to-deep Adam training; returns the best-loss checkpoint.

    For each depth in the schedule the network trains for
    ``epochs_per_depth`` epochs with the stepped learning rate, then the
    parameters seed the next (deeper) stage. The run is deterministic
    given the seed: initialization and shuffling use fixed streams and
    reductions have a fixed order. A non-finite loss raises
    :class:`TrainingDivergedError` carrying the history so far.
    """
    if not samples:
        raise ValueError("training split is empty")
    feats, targets, spec = prepare_arrays(samples)
    quad = trapezoid_weights(spec)

    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])

    schedule = train_config.depth_schedule
    params = init_params(replace(model_config, depth=schedule[0]), init_seed)
    history = TrainHistory()
    best_loss = np.inf
    best_params = params.copy()
    n = feats.shape[0]
    batch = train_config.batch_size or n
    global_epoch = 0

    for depth in schedule:
        if depth != params.depth:
            params = shallow_to_deep(params, depth)
        state = AdamState.fresh(params)
        for epoch in range(train_config.epochs_per_depth):
            t0 = time.perf_counter()
            lr = train_config.learning_rate(epoch)
            order = shuffle_rng.permutation(n) if batch < n else np.arange(n)
            epoch_data = 0.0
            epoch_physics = 0.0
            n_batches = 0
            for lo in range(0, n, batch):
                idx = order[lo : lo + batch]
                loss, grads = grad(
                    params, (feats[idx], targets[idx]), train_config.gamma, spec
                )
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at depth {depth}, epoch {epoch} (lr={lr:g})",
                        history=history,
                        params=params,
                    )
                phys = physics_loss(params, spec) if train_config.gamma > 0 else 0.0
                epoch_data += loss - train_config.gamma * phys
                epoch_physics += phys
                n_batches += 1
                params, state = adam_step(params, grads, state, lr)
            epoch_physics /= max(n_batches, 1)
            epoch_total = epoch_data + train_config.gamma * epoch_physics
            history.append(
                global_epoch, depth, lr, epoch_data, epoch_physics, time.perf_counter() - t0
            )
            if epoch_total < best_loss:
                best_loss = epoch_total
                best_params = params.copy()
            global_epoch += 1

    train_errs = evaluate_relative_errors(best_params, samples)
    defined = train_errs[~np.isnan(train_errs)]
    history.final_train_error = float(defined.mean()) if defined.size else float("nan")
    if test_samples:
        test_errs = evaluate_relative_errors(best_params, test_samples)
        defined = test_errs[~np.isnan(test_errs)]
        history.final_test_error = float(defined.mean()) if defined.size else float("nan")
    return best_params, history


def fd_gradient_check(
    params: IfnoParams,
    samples: list[Sample],
    eps: float = 1e-6,
    gamma: float = 0.0,
    max_coords_per_block: int | None = None,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Central-difference verification of the reverse-mode gradient.

    Requires the smooth activation (finite differences are ill-posed at
    ReLU kinks). Checks every parameter block of both sub-networks; for
    each block either all coordinates or a random subset. Returns per
    block ``{"max_rel": .., "mean_rel": .., "n": ..}`` where the
    relative error is ``|fd - grad| / max(|fd|, |grad|, 1e-8)``.
    """
    if params.activation == "relu":
        raise ValueError("fd_gradient_check requires the smooth activation mode")
    feats, targets, spec = prepare_arrays(samples)

    def loss_of(p: IfnoParams) -> float:
        total = _forward_data_loss(p, feats, targets, trapezoid_weights(spec))
        if gamma > 0:
            total += gamma * physics_loss(p, spec)
        return total

    _, grads = grad(params, (feats, targets), gamma, spec)
    rng = np.random.default_rng(seed)
    report = {}
    for name, arr in params.blocks().items():
        an = grads[name]
        an_view = an.view(np.float64).ravel() if np.iscomplexobj(an) else an.ravel()
        size = an_view.size
        if max_coords_per_block is not None and size > max_coords_per_block:
            coords = rng.choice(size, size=max_coords_per_block, replace=False)
        else:
            coords = np.arange(size)
        rels = np.empty(len(coords))
        for pos, flat_idx in enumerate(coords):
            rels[pos] = _fd_coordinate(params, name, int(flat_idx), eps, loss_of, an_view)
        report[name] = {
            "max_rel": float(rels.max()),
            "mean_rel": float(rels.mean()),
            "n": int(len(coords)),
        }
    return report


def _fd_coordinate(params, name, flat_idx, eps, loss_of, an_view) -> float:
    blocks = {k: v.copy() for k, v in params.blocks().items()}
    view = blocks[name].view(np.float64) if np.iscomplexobj(blocks[name]) else blocks[name]
    flat = view.reshape(-1)
    orig = flat[flat_idx]
    flat[flat_idx] = orig + eps
    lo_plus = loss_of(params.with_blocks(blocks))
    flat[flat_idx] = orig - eps
    lo_minus = loss_of(params.with_blocks(blocks))
    flat[flat_idx] = orig
    fd = (lo_plus - lo_minus) / (2 * eps)
    an = an_view[flat_idx]
    return abs(fd - an) / max(abs(fd), abs(an), 1e-8)
