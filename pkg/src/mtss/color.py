"""sRGB / CIELAB conversion, L-channel harmonization and ab quantization.

Images are float arrays with channels last, shape ``(..., 3)``, RGB in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# sRGB primaries, D65 white
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# white taken from the matrix itself so that RGB (1,1,1) lands exactly on L=100
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0

AB_RANGE = 110.0


@dataclass
class ClampCounter:
    """Counts input values that were clamped into the valid RGB range."""
    count: int = 0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def rgb_to_lab(image, counter: ClampCounter | None = None) -> np.ndarray:
    """Convert sRGB in [0, 1] to Lab (L in [0, 100]).

    Values outside [0, 1] are clamped; the number of clamped values is added to
    ``counter`` if given, otherwise a warning is emitted.
    """
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected 3 channels last, got shape {rgb.shape}")
    bad = int(np.count_nonzero((rgb < 0.0) | (rgb > 1.0)))
    if bad:
        rgb = np.clip(rgb, 0.0, 1.0)
        if counter is not None:
            counter.count += bad
        else:
            warnings.warn(f"rgb_to_lab: clamped {bad} out-of-range values", RuntimeWarning, stacklevel=2)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    f3 = f ** 3
    xyz = np.where(f3 > _EPS, f3, (116.0 * f - 16.0) / _KAPPA)
    # L uses its own branch point so dark greys invert exactly
    xyz[..., 1] = np.where(lab[..., 0] > _KAPPA * _EPS, f3[..., 1], lab[..., 0] / _KAPPA)
    return _linear_to_srgb((xyz * _WHITE) @ _XYZ_TO_RGB.T)


def harmonize(patch) -> np.ndarray:
    """Replace an RGB patch by its Lab L channel replicated three times."""
    lab = rgb_to_lab(patch)
    return np.repeat(lab[..., :1], 3, axis=-1)


def lightness_input(image) -> np.ndarray:
    """Network input shared by colorization and harmonized tasks: L/100 on 3 channels."""
    return harmonize(image) / 100.0


class AbQuantizer:
    """Maps ab pairs to class ids on a uniform ``bins x bins`` grid over [-110, 110]^2.

    Ids are row-major with ``a`` as the row. When ``centers`` is given the
    quantizer instead assigns each pair to its nearest center.
    """

    def __init__(self, bins: int = 13, centers=None):
        if centers is None and bins < 2:
            raise ValueError("need at least 2 bins per axis")
        self.bins = bins
        self.centers = None if centers is None else np.asarray(centers, dtype=np.float64).reshape(-1, 2)

    @property
    def num_classes(self) -> int:
        return self.bins * self.bins if self.centers is None else len(self.centers)

    def __call__(self, ab) -> np.ndarray:
        ab = np.asarray(ab, dtype=np.float64)
        if self.centers is not None:
            d = ((ab[..., None, :] - self.centers) ** 2).sum(-1)
            return np.argmin(d, axis=-1)
        idx = np.floor((ab + AB_RANGE) * (self.bins / (2 * AB_RANGE))).astype(np.int64)
        idx = np.clip(idx, 0, self.bins - 1)
        return idx[..., 0] * self.bins + idx[..., 1]

    def bin_center(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if self.centers is not None:
            return self.centers[ids]
        width = 2 * AB_RANGE / self.bins
        ia, ib = np.divmod(ids, self.bins)
        return np.stack([-AB_RANGE + (ia + 0.5) * width, -AB_RANGE + (ib + 0.5) * width], axis=-1)


def quantize_ab(ab, bins: int = 13) -> np.ndarray:
    return AbQuantizer(bins)(ab)


def bin_center(ids, bins: int = 13) -> np.ndarray:
    return AbQuantizer(bins).bin_center(ids)
