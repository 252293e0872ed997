"""The co-learned fusion segmentation network.

Two modality-specific encoders (four conv-norm-activate blocks each, max
pooled between blocks) feed four co-learning units. Each unit convolves the
stacked modality features with a 3D kernel to produce a spatially varying
fusion map, multiplies that map onto the concatenated modality features, and
hands the fused result to a mirrored reconstruction path that upsamples back
to input resolution. A 1x1 convolution plus pixel-wise softmax yields one
probability map per region class plus an `other' class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .ops import BatchNormState
from .tensor import DTYPE, Parameter, Tensor


@dataclass
class ColearnConfig:
    """Architecture hyperparameters; defaults follow the standard training setup."""

    input_size: tuple = (256, 256)
    channels: int = 64
    num_rois: int = 3
    kernel2d: int = 3
    kernel3d: tuple = (3, 3, 2)
    alpha: float = 0.1

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ConfigError(f"input extents must be divisible by 16, got {h}x{w}")
        if self.num_rois < 1:
            raise ConfigError(f"num_rois must be >= 1, got {self.num_rois}")
        if self.kernel3d[2] != 2 or self.kernel3d[0] != self.kernel3d[1]:
            raise ConfigError(f"3D kernel must be (k, k, 2), got {self.kernel3d}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def num_classes(self) -> int:
        return self.num_rois + 1


class ModelParams:
    """Ordered registry of every Parameter and BatchNormState in a network."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._bn: dict[str, BatchNormState] = {}

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ConfigError(f"duplicate parameter id {p.name}")
        self._params[p.name] = p
        return p

    def add_bn(self, state: BatchNormState, name: str) -> BatchNormState:
        if name in self._bn:
            raise ConfigError(f"duplicate batch norm id {name}")
        self._bn[name] = state
        self.add(state.gamma)
        self.add(state.beta)
        return state

    def parameters(self) -> list:
        return list(self._params.values())

    def kernels(self) -> list:
        return [p for p in self._params.values() if p.kind == "kernel"]

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode}")
        for state in self._bn.values():
            state.mode = mode

    def state_arrays(self) -> dict:
        """All persistent arrays keyed by id: parameters plus running statistics."""
        out = {name: p.data for name, p in self._params.items()}
        for name, state in self._bn.items():
            out[f"{name}/running_mean"] = state.running_mean
            out[f"{name}/running_var"] = state.running_var
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        """Bit-exact restore; every id must be present with a matching shape."""
        own = self.state_arrays()
        for name, target in own.items():
            if name not in arrays:
                raise DimensionError(f"weight file is missing layer {name}")
            src = arrays[name]
            if tuple(src.shape) != tuple(target.shape):
                raise DimensionError(f"layer {name} shape mismatch",
                                     expected=tuple(target.shape), got=tuple(src.shape))
        extra = set(arrays) - set(own)
        if extra:
            raise DimensionError(f"weight file has unknown layers: {sorted(extra)[:4]}")
        for name, target in own.items():
            target[...] = arrays[name].astype(DTYPE)

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def count_matching(self, prefix: str) -> int:
        return sum(p.data.size for n, p in self._params.items() if n.startswith(prefix))


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Zero-mean normal scaled for variance 2/fan_in, matching the leaky activations."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class ConvBnLrelu:
    """conv -> batch norm -> leaky relu, the standard feature-map stage."""

    def __init__(self, store: ModelParams, name: str, cin: int, cout: int,
                 k: int, alpha: float, rng: np.random.Generator):
        self.alpha = alpha
        self.w = store.add(Parameter(he_normal(rng, (k, k, cin, cout), k * k * cin),
                                     f"{name}/w", kind="kernel"))
        self.b = store.add(Parameter(np.zeros(cout, dtype=DTYPE), f"{name}/b", kind="bias"))
        self.bn = store.add_bn(BatchNormState(cout, f"{name}/bn"), f"{name}/bn")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(ops.batch_norm(ops.conv2d(x, self.w, self.b), self.bn),
                              self.alpha)


class EncoderBranch:
    """Four blocks of two conv stages each, max pooled after every block.

    ``forward`` returns the pooled output of each block; those four maps are
    both the next block's input and the per-scale taps consumed downstream.
    """

    def __init__(self, store: ModelParams, name: str, cin: int, channels: int,
                 k: int, alpha: float, rng: np.random.Generator):
        self.blocks = []
        for i in range(4):
            c_in = cin if i == 0 else channels
            self.blocks.append((
                ConvBnLrelu(store, f"{name}/b{i + 1}/conv1", c_in, channels, k, alpha, rng),
                ConvBnLrelu(store, f"{name}/b{i + 1}/conv2", channels, channels, k, alpha, rng),
            ))

    def forward(self, x: Tensor, trace: list | None = None) -> list:
        taps = []
        for conv1, conv2 in self.blocks:
            x = ops.max_pool2d(conv2(conv1(x)))
            taps.append(x)
            if trace is not None:
                trace.append(x.shape)
        return taps


class ColearnUnit:
    """3D convolution across the stacked modality axis, emitting a fusion map.

    The fusion map doubles the channel count of its scale and is NOT batch
    normalized; it multiplicatively gates the concatenated modality features.
    """

    def __init__(self, store: ModelParams, name: str, channels: int,
                 kernel3d: tuple, alpha: float, rng: np.random.Generator):
        k, _, m = kernel3d
        cout = 2 * channels
        fan_in = k * k * m * channels
        self.alpha = alpha
        self.w = store.add(Parameter(he_normal(rng, (k, k, m, channels, cout), fan_in),
                                     f"{name}/w3d", kind="kernel"))
        self.b = store.add(Parameter(np.zeros(cout, dtype=DTYPE), f"{name}/b3d", kind="bias"))

    def forward(self, f_ct: Tensor, f_pet: Tensor, override: str | None = None):
        """Returns (fused, fusion_map); ``override`` forces the map to zeros/ones."""
        if f_ct.shape != f_pet.shape:
            raise DimensionError("modality features must match",
                                 expected=f_ct.shape, got=f_pet.shape)
        stacked = ops.stack_modality(f_ct, f_pet)
        if override is None:
            fusion_map = ops.leaky_relu(ops.conv3d_modality(stacked, self.w, self.b),
                                        self.alpha)
        elif override in ("zeros", "ones"):
            b, h, w, _, c = stacked.shape
            fill = np.zeros if override == "zeros" else np.ones
            fusion_map = Tensor(fill((b, h, w, 2 * c), dtype=DTYPE))
        else:
            raise ConfigError(f"unknown fusion override {override!r}")
        fused = ops.elementwise_mul(fusion_map, ops.concat_channels(f_ct, f_pet))
        return fused, fusion_map


class Reconstruction:
    """Four upsample-then-convolve blocks walking from the deepest scale back up.

    Block input is the scale-matched skip tensor concatenated with the previous
    block's output; the first block consumes the deepest skip alone.
    """

    def __init__(self, store: ModelParams, name: str, skip_channels: int,
                 channels: int, k: int, alpha: float, rng: np.random.Generator):
        self.blocks = []
        for i in range(4):
            cin = skip_channels if i == 0 else skip_channels + channels
            self.blocks.append((
                ConvBnLrelu(store, f"{name}/b{i + 1}/conv1", cin, channels, k, alpha, rng),
                ConvBnLrelu(store, f"{name}/b{i + 1}/conv2", channels, channels, k, alpha, rng),
            ))

    def forward(self, skips_deepest_first: list, trace: list | None = None) -> Tensor:
        out = None
        for (conv1, conv2), skip in zip(self.blocks, skips_deepest_first):
            if out is None:
                x = skip
            else:
                if skip.shape[1:3] != out.shape[1:3]:
                    raise DimensionError("skip scale mismatch", expected=out.shape[1:3],
                                         got=skip.shape[1:3])
                x = ops.concat_channels(skip, out)
            out = conv2(conv1(ops.upsample_nearest(x)))
            if trace is not None:
                trace.append(out.shape)
        return out


class ClassifierHead:
    """1x1 convolution to R+1 logits followed by pixel-wise softmax."""

    def __init__(self, store: ModelParams, name: str, cin: int, num_classes: int,
                 rng: np.random.Generator):
        self.w = store.add(Parameter(he_normal(rng, (1, 1, cin, num_classes), cin),
                                     f"{name}/w", kind="kernel"))
        self.b = store.add(Parameter(np.zeros(num_classes, dtype=DTYPE),
                                     f"{name}/b", kind="bias"))

    def logits(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.softmax_pixelwise(self.logits(x))


class ColearnNet:
    """Full network: two encoders, four co-learning units, reconstruction, head."""

    variant = "colearn"

    def __init__(self, config: ColearnConfig, seed: int = 0):
        self.config = config
        self.params = ModelParams()
        rng = np.random.default_rng(seed)
        c, k, alpha = config.channels, config.kernel2d, config.alpha
        self.enc_ct = EncoderBranch(self.params, "enc_ct", 1, c, k, alpha, rng)
        self.enc_pet = EncoderBranch(self.params, "enc_pet", 1, c, k, alpha, rng)
        self.units = [ColearnUnit(self.params, f"fuse/u{s}", c, config.kernel3d, alpha, rng)
                      for s in range(4)]
        self.recon = Reconstruction(self.params, "recon", 2 * c, c, k, alpha, rng)
        self.head = ClassifierHead(self.params, "head", c, config.num_classes, rng)

    def _check_inputs(self, ct: Tensor, pet: Tensor) -> None:
        h, w = self.config.input_size
        expected = (h, w, 1)
        for name, x in (("ct", ct), ("pet", pet)):
            if x.ndim != 4 or x.shape[1:] != expected:
                raise DimensionError(f"{name} input must be [b,{h},{w},1]", got=x.shape)

    def forward(self, ct: Tensor, pet: Tensor, mode: str = "train",
                fusion_overrides: dict | None = None, trace: dict | None = None):
        """Run the network; returns (prob[b,h,w,R+1], fusion_maps list of 4).

        ``fusion_overrides`` maps unit index -> "zeros" | "ones" for gating
        experiments. ``trace``, when given, collects per-stage output shapes.
        """
        self._check_inputs(ct, pet)
        self.params.set_mode(mode)
        overrides = fusion_overrides or {}
        enc_trace = [] if trace is not None else None
        taps_ct = self.enc_ct.forward(ct, enc_trace)
        taps_pet = self.enc_pet.forward(pet)
        fused_maps, fusion_maps = [], []
        for s, unit in enumerate(self.units):
            fused, fmap = unit.forward(taps_ct[s], taps_pet[s], overrides.get(s))
            fused_maps.append(fused)
            fusion_maps.append(fmap)
        recon_trace = [] if trace is not None else None
        features = self.recon.forward(fused_maps[::-1], recon_trace)
        prob = self.head(features)
        if trace is not None:
            trace["encoder_blocks"] = enc_trace
            trace["fusion_maps"] = [m.shape for m in fusion_maps]
            trace["reconstruction_blocks"] = recon_trace
            trace["output"] = prob.shape
        return prob, fusion_maps

    def predict(self, ct: Tensor, pet: Tensor, mode: str = "infer"):
        return self.forward(ct, pet, mode=mode)
