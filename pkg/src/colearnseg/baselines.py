"""Comparison fusion networks built from the same blocks, co-learning removed.

MB keeps both modality encoders and concatenates their per-scale outputs; MC
runs a single encoder over a two-channel input; FS runs a single encoder over
a pixel-intermixed image. Reconstruction and classifier head are identical to
the co-learn network so that the fusion mechanism is the only variable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .model import ClassifierHead, ColearnConfig, EncoderBranch, ModelParams, Reconstruction
from .tensor import DTYPE, Tensor


@dataclass
class FusionRatio:
    """Uniform pixel-intermixing weight: out = (1 - pet_weight)*ct + pet_weight*pet."""

    pet_weight: float

    def __post_init__(self):
        if not (0.0 <= self.pet_weight <= 1.0):
            raise ConfigError(f"pet_weight must lie in [0, 1], got {self.pet_weight}")

    @property
    def ct_weight(self) -> float:
        return 1.0 - self.pet_weight


def normalize_ct_display(ct: np.ndarray) -> np.ndarray:
    """Per-slice min-max rescale of CT intensities into [0, 1]."""
    lo, hi = float(ct.min()), float(ct.max())
    if hi - lo < 1e-12:
        return np.zeros_like(ct, dtype=DTYPE)
    return ((ct - lo) / (hi - lo)).astype(DTYPE)


SUV_DISPLAY_CEILING = 20.0


def normalize_pet_display(pet_suv: np.ndarray) -> np.ndarray:
    """Clip SUV at the display ceiling and rescale into [0, 1]."""
    return (np.clip(pet_suv, 0.0, SUV_DISPLAY_CEILING) / SUV_DISPLAY_CEILING).astype(DTYPE)


def intermix(ct: np.ndarray, pet: np.ndarray, ratio: FusionRatio) -> np.ndarray:
    """Blend two display-range images at a uniform ratio, clamped to [0, 1].

    Both inputs must already be in [0, 1] display range.
    """
    if ct.shape != pet.shape:
        raise DimensionError("intermix needs matching shapes", expected=ct.shape,
                             got=pet.shape)
    out = ratio.ct_weight * ct.astype(DTYPE) + np.float32(ratio.pet_weight) * pet.astype(DTYPE)
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


class MultiBranchNet:
    """Two modality encoders; per-scale skips are plain channel concatenations."""

    variant = "mb"

    def __init__(self, config: ColearnConfig, seed: int = 0):
        self.config = config
        self.params = ModelParams()
        rng = np.random.default_rng(seed)
        c, k, alpha = config.channels, config.kernel2d, config.alpha
        self.enc_ct = EncoderBranch(self.params, "enc_ct", 1, c, k, alpha, rng)
        self.enc_pet = EncoderBranch(self.params, "enc_pet", 1, c, k, alpha, rng)
        self.recon = Reconstruction(self.params, "recon", 2 * c, c, k, alpha, rng)
        self.head = ClassifierHead(self.params, "head", c, config.num_classes, rng)

    def forward(self, ct: Tensor, pet: Tensor, mode: str = "train"):
        self.params.set_mode(mode)
        taps_ct = self.enc_ct.forward(ct)
        taps_pet = self.enc_pet.forward(pet)
        skips = [ops.concat_channels(a, b) for a, b in zip(taps_ct, taps_pet)]
        prob = self.head(self.recon.forward(skips[::-1]))
        return prob, None


class MultiChannelNet:
    """Single encoder over a two-channel input: CT in channel 0, PET in channel 1."""

    variant = "mc"

    def __init__(self, config: ColearnConfig, seed: int = 0):
        self.config = config
        self.params = ModelParams()
        rng = np.random.default_rng(seed)
        c, k, alpha = config.channels, config.kernel2d, config.alpha
        self.enc = EncoderBranch(self.params, "enc", 2, c, k, alpha, rng)
        self.recon = Reconstruction(self.params, "recon", c, c, k, alpha, rng)
        self.head = ClassifierHead(self.params, "head", c, config.num_classes, rng)

    def forward_stacked(self, stacked: Tensor, mode: str = "train"):
        if stacked.ndim != 4 or stacked.shape[3] != 2:
            raise DimensionError("stacked input must be [b,h,w,2]", got=stacked.shape)
        self.params.set_mode(mode)
        taps = self.enc.forward(stacked)
        prob = self.head(self.recon.forward(taps[::-1]))
        return prob, None

    def forward(self, ct: Tensor, pet: Tensor, mode: str = "train"):
        return self.forward_stacked(ops.concat_channels(ct, pet), mode=mode)


class FusedInputNet:
    """Single encoder over a pixel-intermixed single-channel input."""

    variant = "fs"

    def __init__(self, config: ColearnConfig, seed: int = 0,
                 ratio: FusionRatio | None = None):
        self.config = config
        self.ratio = ratio if ratio is not None else FusionRatio(0.5)
        self.params = ModelParams()
        rng = np.random.default_rng(seed)
        c, k, alpha = config.channels, config.kernel2d, config.alpha
        self.enc = EncoderBranch(self.params, "enc", 1, c, k, alpha, rng)
        self.recon = Reconstruction(self.params, "recon", c, c, k, alpha, rng)
        self.head = ClassifierHead(self.params, "head", c, config.num_classes, rng)

    def forward(self, ct: Tensor, pet: Tensor, mode: str = "train"):
        """``ct`` and ``pet`` must already be display-normalized to [0, 1]."""
        self.params.set_mode(mode)
        mixed = Tensor(intermix(ct.data, pet.data, self.ratio))
        taps = self.enc.forward(mixed)
        prob = self.head(self.recon.forward(taps[::-1]))
        return prob, None
