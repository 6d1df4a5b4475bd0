"""Implicit Fourier neural operator: lifting, shared iterative spectral
layers, projection, two independent sub-networks for the x/y displacement
components, and shallow-to-deep parameter transfer.

The layer update is a residual step of size ``dt = total_time / depth``:

    h <- h + dt * act(h @ mix_weight.T + spectral_conv(h) + layer_bias)

All layers of a sub-network share one copy of the mixing weight, the
spectral kernel, and the bias; increasing the depth only shrinks the
step size, which is what makes depth continuation (initializing a deep
network from a trained shallow one) a parameter copy.

Parameter arrays are float64 (the spectral kernel complex128). The
checkpoint file format is a JSON header describing the dimensions and
the block order, followed by the raw little-endian 64-bit float arrays;
round-trips are byte-exact.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError
from .grid import BoundaryLoading, GridField, GridSpec, build_input_features
from .spectral import SpectralWeights, spectral_conv_with_coeffs

CHECKPOINT_MAGIC = "tissueop-ifno"
CHECKPOINT_VERSION = 1

#: Names of the trainable arrays of one sub-network, in storage order.
SUBNET_BLOCKS = (
    "lift_weight",
    "lift_bias",
    "mix_weight",
    "spectral_kernel",
    "layer_bias",
    "proj_hidden_weight",
    "proj_hidden_bias",
    "proj_out_weight",
    "proj_out_bias",
)

IN_CHANNELS = 4  # [x, y, padded loading x, padded loading y]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_deriv(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


#: Sharpness of the smooth activation used in gradient-verification mode.
SOFTPLUS_BETA = 100.0


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, SOFTPLUS_BETA * x) / SOFTPLUS_BETA


def softplus_deriv(x: np.ndarray) -> np.ndarray:
    from scipy.special import expit

    return expit(SOFTPLUS_BETA * x)


ACTIVATIONS = {
    "relu": (relu, relu_deriv),
    "softplus": (softplus, softplus_deriv),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of one two-sub-network operator."""

    width: int = 16
    proj_width: int = 64
    modes: tuple[int, int] = (8, 8)
    depth: int = 12
    activation: str = "relu"
    total_time: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.proj_width < 1:
            raise ValueError("widths must be positive")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.modes[0] < 1 or self.modes[1] < 1:
            raise ValueError("mode counts must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.total_time <= 0:
            raise ValueError("total_time must be positive")


@dataclass
class SubNetParams:
    """Trainable arrays of one sub-network (one output channel).

    The mixing weight, spectral kernel, and layer bias are shared across
    all layer applications: exactly one copy exists per sub-network.
    """

    lift_weight: np.ndarray  # (d, 4)
    lift_bias: np.ndarray  # (d,)
    mix_weight: np.ndarray  # (d, d)
    spectral: SpectralWeights  # kernel (d, d, k1, k2)
    layer_bias: np.ndarray  # (d,)
    proj_hidden_weight: np.ndarray  # (d_q, d)
    proj_hidden_bias: np.ndarray  # (d_q,)
    proj_out_weight: np.ndarray  # (d_q,)
    proj_out_bias: np.ndarray  # () scalar array

    @property
    def width(self) -> int:
        return self.lift_weight.shape[0]

    @property
    def proj_width(self) -> int:
        return self.proj_hidden_weight.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "lift_weight": self.lift_weight,
            "lift_bias": self.lift_bias,
            "mix_weight": self.mix_weight,
            "spectral_kernel": self.spectral.kernel,
            "layer_bias": self.layer_bias,
            "proj_hidden_weight": self.proj_hidden_weight,
            "proj_hidden_bias": self.proj_hidden_bias,
            "proj_out_weight": self.proj_out_weight,
            "proj_out_bias": self.proj_out_bias,
        }

    @staticmethod
    def from_blocks(blocks: dict[str, np.ndarray]) -> "SubNetParams":
        return SubNetParams(
            lift_weight=blocks["lift_weight"],
            lift_bias=blocks["lift_bias"],
            mix_weight=blocks["mix_weight"],
            spectral=SpectralWeights(blocks["spectral_kernel"]),
            layer_bias=blocks["layer_bias"],
            proj_hidden_weight=blocks["proj_hidden_weight"],
            proj_hidden_bias=blocks["proj_hidden_bias"],
            proj_out_weight=blocks["proj_out_weight"],
            proj_out_bias=blocks["proj_out_bias"],
        )


@dataclass
class IfnoParams:
    """Full parameter set: two sub-networks plus depth and step size."""

    sub_x: SubNetParams
    sub_y: SubNetParams
    depth: int
    total_time: float = 1.0
    activation: str = "relu"
    seed: int | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.total_time <= 0:
            raise ValueError("total_time must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dt(self) -> float:
        return self.total_time / self.depth

    def blocks(self) -> dict[str, np.ndarray]:
        """All trainable arrays keyed 'x.<name>' / 'y.<name>'."""
        out = {}
        for prefix, sub in (("x", self.sub_x), ("y", self.sub_y)):
            for name, arr in sub.blocks().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "IfnoParams":
        subs = {}
        for prefix in ("x", "y"):
            subs[prefix] = SubNetParams.from_blocks(
                {name: blocks[f"{prefix}.{name}"] for name in SUBNET_BLOCKS}
            )
        return replace(self, sub_x=subs["x"], sub_y=subs["y"])

    def copy(self) -> "IfnoParams":
        return copy.deepcopy(self)


def _init_subnet(config: ModelConfig, rng: np.random.Generator) -> SubNetParams:
    d, dq = config.width, config.proj_width
    k1, k2 = config.modes

    def uniform(shape, fan_in):
        return rng.uniform(-1.0 / fan_in, 1.0 / fan_in, size=shape)

    kern_scale = 1.0 / np.sqrt(d * k1 * k2)
    kernel = rng.uniform(-kern_scale, kern_scale, size=(d, d, k1, k2)) + 1j * rng.uniform(
        -kern_scale, kern_scale, size=(d, d, k1, k2)
    )
    return SubNetParams(
        lift_weight=uniform((d, IN_CHANNELS), IN_CHANNELS),
        lift_bias=np.zeros(d),
        mix_weight=uniform((d, d), d),
        spectral=SpectralWeights(kernel),
        layer_bias=np.zeros(d),
        proj_hidden_weight=uniform((dq, d), d),
        proj_hidden_bias=np.zeros(dq),
        proj_out_weight=uniform((dq,), dq),
        proj_out_bias=np.zeros(()),
    )


def init_params(config: ModelConfig, seed: int) -> IfnoParams:
    """Deterministic scaled-uniform initialization.

    Matrices are uniform in [-1/fan_in, 1/fan_in]; the spectral kernel
    uniform (real and imaginary parts) with scale 1/sqrt(d*k1*k2);
    biases start at zero. The x sub-network is drawn first.
    """
    rng = np.random.default_rng(seed)
    return IfnoParams(
        sub_x=_init_subnet(config, rng),
        sub_y=_init_subnet(config, rng),
        depth=config.depth,
        total_time=config.total_time,
        activation=config.activation,
        seed=int(seed),
    )


def lift(features: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Pointwise affine map into the hidden width.

    ``features`` has shape (..., 4); the result (..., d).
    """
    if features.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"feature channels {features.shape[-1]} != lift fan-in {weight.shape[1]}"
        )
    return features @ weight.T + bias


def layer_step(
    h: np.ndarray, sub: SubNetParams, dt: float, activation: str = "relu"
) -> np.ndarray:
    """One shared-parameter residual layer update."""
    act, _ = ACTIVATIONS[activation]
    if h.shape[-1] != sub.width:
        raise ValueError(f"hidden channels {h.shape[-1]} != width {sub.width}")
    conv, _ = spectral_conv_with_coeffs(h, sub.spectral)
    pre = h @ sub.mix_weight.T + conv + sub.layer_bias
    return h + dt * act(pre)


def project(h: np.ndarray, sub: SubNetParams, activation: str = "relu") -> np.ndarray:
    """Pointwise two-layer map from the hidden width to one channel."""
    act, _ = ACTIVATIONS[activation]
    if h.shape[-1] != sub.width:
        raise ValueError(f"hidden channels {h.shape[-1]} != width {sub.width}")
    hidden = act(h @ sub.proj_hidden_weight.T + sub.proj_hidden_bias)
    return hidden @ sub.proj_out_weight + sub.proj_out_bias


@dataclass
class SubnetCache:
    """Forward intermediates needed by the reverse pass."""

    hiddens: list[np.ndarray]  # h_0 .. h_L, each (B, nx, ny, d)
    act_derivs: list[np.ndarray]  # act'(pre_l), l = 0 .. L-1
    conv_coeffs: list[np.ndarray]  # retained input coefficients per layer
    proj_hidden: np.ndarray  # act(pre) of the projection hidden layer
    proj_act_deriv: np.ndarray


def subnet_forward(
    features: np.ndarray,
    sub: SubNetParams,
    depth: int,
    dt: float,
    activation: str,
    keep_cache: bool = False,
) -> tuple[np.ndarray, SubnetCache | None]:
    """Lift, apply ``depth`` shared layers, project. Batched.

    ``features`` has shape (B, nx, ny, 4); the output (B, nx, ny).
    """
    act, dact = ACTIVATIONS[activation]
    h = lift(features, sub.lift_weight, sub.lift_bias)
    hiddens = [h] if keep_cache else None
    act_derivs = [] if keep_cache else None
    conv_coeffs = [] if keep_cache else None
    for _ in range(depth):
        conv, coeffs = spectral_conv_with_coeffs(h, sub.spectral)
        pre = h @ sub.mix_weight.T + conv + sub.layer_bias
        h = h + dt * act(pre)
        if keep_cache:
            hiddens.append(h)
            act_derivs.append(dact(pre))
            conv_coeffs.append(coeffs)
    proj_pre = h @ sub.proj_hidden_weight.T + sub.proj_hidden_bias
    hidden = act(proj_pre)
    out = hidden @ sub.proj_out_weight + sub.proj_out_bias
    cache = None
    if keep_cache:
        cache = SubnetCache(
            hiddens=hiddens,
            act_derivs=act_derivs,
            conv_coeffs=conv_coeffs,
            proj_hidden=hidden,
            proj_act_deriv=dact(proj_pre),
        )
    return out, cache


def forward_features(features: np.ndarray, params: IfnoParams) -> np.ndarray:
    """Batched forward pass on precomputed input features.

    ``features`` (B, nx, ny, 4) -> displacement predictions (B, nx, ny, 2),
    channel 0 from the x sub-network, channel 1 from the y sub-network.
    """
    out_x, _ = subnet_forward(features, params.sub_x, params.depth, params.dt, params.activation)
    out_y, _ = subnet_forward(features, params.sub_y, params.depth, params.dt, params.activation)
    return np.stack([out_x, out_y], axis=-1)


def forward(b: BoundaryLoading, params: IfnoParams) -> GridField:
    """Predict the full displacement field for one boundary loading."""
    features = build_input_features(b).values[None]
    out = forward_features(features, params)[0]
    return GridField(out, b.extent)


def shallow_to_deep(params: IfnoParams, new_depth: int) -> IfnoParams:
    """Reuse trained shallow parameters as the initializer of a deeper net.

    Layer parameters are shared, so the arrays are copied verbatim; only
    the depth (and hence the step size) changes.
    """
    if new_depth <= params.depth:
        raise ValueError(
            f"new depth must exceed the current depth {params.depth}, got {new_depth}"
        )
    out = params.copy()
    out.depth = int(new_depth)
    return out


def save_checkpoint(params: IfnoParams, path) -> None:
    """Write a self-describing checkpoint (JSON header + raw f64 arrays)."""
    blocks = params.blocks()
    manifest = []
    payload = []
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], order="C")  # keeps 0-d shapes intact
        if np.iscomplexobj(arr):
            dtype = "c16"
            raw = arr.astype("<c16").tobytes()
        else:
            dtype = "f8"
            raw = arr.astype("<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payload.append(raw)
    sub = params.sub_x
    header = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "width": sub.width,
        "proj_width": sub.proj_width,
        "modes": [sub.spectral.k1, sub.spectral.k2],
        "depth": params.depth,
        "dt": params.dt,
        "total_time": params.total_time,
        "activation": params.activation,
        "seed": params.seed,
        "blocks": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> IfnoParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(head_len))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise DataFormatError("not a tissueop checkpoint")
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataFormatError(
                f"unsupported checkpoint version {header.get('format_version')}"
            )
        blocks = {}
        for entry in header["blocks"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype("<c16") if entry["dtype"] == "c16" else np.dtype("<f8")
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise DataFormatError(f"truncated checkpoint block {entry['name']}")
            blocks[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    subs = {}
    for prefix in ("x", "y"):
        subs[prefix] = SubNetParams.from_blocks(
            {name: blocks[f"{prefix}.{name}"] for name in SUBNET_BLOCKS}
        )
    return IfnoParams(
        sub_x=subs["x"],
        sub_y=subs["y"],
        depth=int(header["depth"]),
        total_time=float(header["total_time"]),
        activation=header["activation"],
        seed=header["seed"],
    )
