"""ISP-style colour and tone transforms, device profiles, random WB/gamma.

Images are float arrays with a trailing RGB axis and values in [0, 1]; any
number of leading axes is accepted, so the same functions work on one image
(H, W, 3) or a stack (N, H, W, 3). Every stage clips back into [0, 1].

A stage whose parameter is its identity value is skipped outright, which is
what makes the identity profile a bit-exact no-op (``(x - 0.5) + 0.5`` is not
always ``x`` in floating point).

Hue rotation goes through HSV with the usual hexcone formulas::

    V = max(R, G, B)        C = V - min(R, G, B)        S = C / V  (0 if V = 0)
    H = 60 * ((G - B) / C mod 6)   if V == R
        60 * ((B - R) / C + 2)     if V == G
        60 * ((R - G) / C + 4)     otherwise             (H = 0 if C = 0)

and back: C = V*S, X = C*(1 - |(H/60) mod 2 - 1|), m = V - C, with (R, G, B)
picked by the 60-degree sector of H and shifted by m.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import stream

LUMA = np.array([0.299, 0.587, 0.114])


def _clip(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class WbGains:
    r1: float = 1.0
    r2: float = 1.0
    r3: float = 1.0

    def __post_init__(self):
        if min(self.r1, self.r2, self.r3) <= 0:
            raise ValueError(f"white-balance gains must be positive, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r1, self.r2, self.r3)


def apply_wb(img: np.ndarray, g: WbGains | tuple | np.ndarray) -> np.ndarray:
    """Per-channel diagonal gain. ``g`` may also be an (..., 3) array of
    per-image gains broadcast against a stack of images."""
    if isinstance(g, WbGains):
        g = g.as_tuple()
    g = np.asarray(g, dtype=float)
    if np.any(g <= 0):
        raise ValueError("white-balance gains must be positive")
    if g.ndim > 1:
        g = g.reshape(g.shape[:-1] + (1,) * (img.ndim - g.ndim) + (3,))
    elif np.all(g == 1.0):
        return img
    return _clip(img * g)


def apply_gamma(img: np.ndarray, gamma) -> np.ndarray:
    """Pointwise power law ``img ** gamma``; ``gamma`` may be per-image."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gamma.ndim == 0:
        if gamma == 1.0:
            return img
    else:
        gamma = gamma.reshape(gamma.shape + (1,) * (img.ndim - gamma.ndim))
    return _clip(np.power(img, gamma))


def adjust_brightness(img: np.ndarray, b: float) -> np.ndarray:
    return img if b == 0 else _clip(img + b)


def adjust_contrast(img: np.ndarray, c: float) -> np.ndarray:
    return img if c == 1 else _clip((img - 0.5) * c + 0.5)


def adjust_saturation(img: np.ndarray, s: float) -> np.ndarray:
    if s == 1:
        return img
    y = (img @ LUMA)[..., None]
    return _clip(y + (img - y) * s)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=-1)
    c = v - img.min(axis=-1)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        np.mod((g - b) / safe_c, 6.0),
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h * 60.0, 0.0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = np.mod(h, 360.0) / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    z = np.zeros_like(c)
    sector = np.minimum(np.floor(hp).astype(int), 5)
    choices = [
        (c, x, z), (x, c, z), (z, c, x), (z, x, c), (x, z, c), (c, z, x),
    ]
    rgb = np.zeros(hsv.shape, dtype=float)
    for k, (rr, gg, bb) in enumerate(choices):
        m = sector == k
        rgb[..., 0] = np.where(m, rr, rgb[..., 0])
        rgb[..., 1] = np.where(m, gg, rgb[..., 1])
        rgb[..., 2] = np.where(m, bb, rgb[..., 2])
    return rgb + (v - c)[..., None]


def rotate_hue(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + degrees, 360.0)
    return _clip(hsv_to_rgb(hsv))


def quantize(img: np.ndarray, levels: int | None) -> np.ndarray:
    """Uniform quantisation to ``levels`` values per channel, a stand-in for
    lossy compression."""
    if levels is None:
        return img
    if levels < 2:
        raise ValueError(f"quant_levels must be >= 2, got {levels}")
    return np.round(img * (levels - 1)) / (levels - 1)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    wb: WbGains = field(default_factory=WbGains)
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    saturation: float = 1.0
    hue_shift: float = 0.0
    quant_levels: int | None = None

    def __post_init__(self):
        if isinstance(self.wb, (tuple, list)):
            object.__setattr__(self, "wb", WbGains(*self.wb))
        if self.gamma <= 0:
            raise ValueError(f"profile {self.name}: gamma must be positive")
        if self.contrast <= 0:
            raise ValueError(f"profile {self.name}: contrast must be positive")
        if self.saturation < 0:
            raise ValueError(f"profile {self.name}: saturation must be >= 0")
        if not -1.0 <= self.brightness <= 1.0:
            raise ValueError(f"profile {self.name}: brightness must be in [-1, 1]")
        if not -180.0 <= self.hue_shift <= 180.0:
            raise ValueError(f"profile {self.name}: hue_shift must be in [-180, 180]")
        if self.quant_levels is not None and int(self.quant_levels) < 2:
            raise ValueError(f"profile {self.name}: quant_levels must be >= 2 or off")

    @property
    def is_identity(self) -> bool:
        return self == identity_profile(self.name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wb"] = list(self.wb.as_tuple())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        wb = d.pop("wb", (1.0, 1.0, 1.0))
        if isinstance(wb, dict):
            wb = (wb["r1"], wb["r2"], wb["r3"])
        return cls(wb=WbGains(*wb), **d)


def identity_profile(name: str = "identity") -> DeviceProfile:
    return DeviceProfile(name)


def apply_profile(img: np.ndarray, p: DeviceProfile) -> np.ndarray:
    """WB → gamma → brightness → contrast → saturation → hue → quantisation."""
    out = apply_wb(img, p.wb)
    out = apply_gamma(out, p.gamma)
    out = adjust_brightness(out, p.brightness)
    out = adjust_contrast(out, p.contrast)
    out = adjust_saturation(out, p.saturation)
    out = rotate_hue(out, p.hue_shift)
    return quantize(out, p.quant_levels)


@dataclass(frozen=True)
class ProfileRanges:
    wb: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.7, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    brightness: tuple[float, float] = (-0.15, 0.15)
    saturation: tuple[float, float] = (0.5, 1.5)
    hue: tuple[float, float] = (-25.0, 25.0)
    quant_levels: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("wb", "gamma", "contrast", "brightness", "saturation", "hue"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name}: lower bound {lo} exceeds upper bound {hi}")
        if self.quant_levels is not None and self.quant_levels[0] > self.quant_levels[1]:
            raise ValueError("range quant_levels: lower bound exceeds upper bound")


def make_profiles(n: int, ranges: ProfileRanges | None = None, seed: int = 0) -> list[DeviceProfile]:
    """``n`` profiles; profile 0 is always the identity (reference) device."""
    if n < 1:
        raise ValueError("need at least one profile")
    ranges = ranges or ProfileRanges()
    rng = stream(seed, "profiles")
    profiles = [identity_profile("dev00")]
    for i in range(1, n):
        u = lambda r: float(rng.uniform(r[0], r[1]))
        wb = WbGains(u(ranges.wb), u(ranges.wb), u(ranges.wb))
        gamma, contrast = u(ranges.gamma), u(ranges.contrast)
        brightness, saturation, hue = u(ranges.brightness), u(ranges.saturation), u(ranges.hue)
        q = None
        if ranges.quant_levels is not None:
            q = int(rng.integers(ranges.quant_levels[0], ranges.quant_levels[1] + 1))
        profiles.append(DeviceProfile(f"dev{i:02d}", wb, gamma, contrast, brightness, saturation, hue, q))
    return profiles


@dataclass(frozen=True)
class TransformDegrees:
    wb_degree: float = 0.001
    gamma_degree: float = 0.9

    def __post_init__(self):
        for name in ("wb_degree", "gamma_degree"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")


def sample_random_transforms(deg: TransformDegrees, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-image gains (n, 3) ~ U(1±wb_degree) and gammas (n,) ~ U(1±gamma_degree).

    Consumes exactly 4 draws per image: one uniform block of shape (n, 4),
    row i feeding image i as (r1, r2, r3, gamma).
    """
    u = rng.uniform(0.0, 1.0, (n, 4))
    lo = np.array([1 - deg.wb_degree] * 3 + [1 - deg.gamma_degree])
    span = np.array([2 * deg.wb_degree] * 3 + [2 * deg.gamma_degree])
    draws = lo + span * u
    return draws[:, :3], draws[:, 3]


def sample_random_transform(deg: TransformDegrees, rng) -> tuple[WbGains, float]:
    gains, gammas = sample_random_transforms(deg, rng, 1)
    return WbGains(*map(float, gains[0])), float(gammas[0])


def random_wb_gamma(images: np.ndarray, deg: TransformDegrees, rng) -> np.ndarray:
    """Random WB then random gamma, parameters drawn independently per image.

    Returns a new array; ``images`` is not modified.
    """
    gains, gammas = sample_random_transforms(deg, rng, len(images))
    return apply_gamma(apply_wb(images, gains), gammas)
