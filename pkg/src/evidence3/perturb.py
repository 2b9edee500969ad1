"""Photometric perturbations: hue shift, illumination gain, additive noise.

A :class:`PerturbationSpec` records which transforms were applied and with
which parameters, so the same adversarial variant can be regenerated from
the spec alone.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .imgcore import check_image, hsv_to_rgb, rgb_to_hsv

TRANSFORMS = ("color", "illum", "noise")

# every nonempty subset of TRANSFORMS as (use_color, use_illum, use_noise)
_NONEMPTY_SUBSETS = tuple(
    (bool(k & 1), bool(k & 2), bool(k & 4)) for k in range(1, 8)
)


def mix_seed(seed, index):
    """Derive an independent 64-bit seed for item ``index`` of a run.

    Used wherever work is split per sample so that parallel and serial
    execution draw identical random streams.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class PerturbationSpec:
    use_color: bool = False
    delta_hue: float = 0.0
    use_illum: bool = False
    gain: float = 1.0
    use_noise: bool = False
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.use_color and not -180.0 < self.delta_hue <= 180.0:
            raise ValueError(f"delta_hue must lie in (-180, 180], got {self.delta_hue}")
        if self.use_illum and not self.gain > 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if self.use_noise and not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def is_clean(self):
        return not (self.use_color or self.use_illum or self.use_noise)

    @property
    def active(self):
        """Names of the active transforms, in application order."""
        flags = (self.use_color, self.use_illum, self.use_noise)
        return tuple(name for name, on in zip(TRANSFORMS, flags) if on)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            use_color=bool(d["use_color"]),
            delta_hue=float(d["delta_hue"]),
            use_illum=bool(d["use_illum"]),
            gain=float(d["gain"]),
            use_noise=bool(d["use_noise"]),
            sigma=float(d["sigma"]),
            seed=int(d["seed"]),
        )


CLEAN = PerturbationSpec()


@dataclass(frozen=True)
class SamplerConfig:
    """Parameter ranges for :func:`sample_spec`.

    ``hue_range`` bounds ``|delta_hue|``; the sign is drawn separately.
    ``gain_ranges`` holds one or more intervals, one of which is picked
    uniformly before drawing the gain (by default a darkening and a
    brightening branch).
    """

    hue_range: tuple = (30.0, 150.0)
    gain_ranges: tuple = ((0.4, 0.8), (1.25, 2.5))
    sigma_range: tuple = (0.02, 0.10)
    p_clean: float = 0.5
    transforms: tuple = field(default=TRANSFORMS)

    def __post_init__(self):
        # normalise list inputs (e.g. from JSON) to tuples
        object.__setattr__(self, "hue_range", tuple(float(x) for x in self.hue_range))
        object.__setattr__(
            self, "gain_ranges", tuple(tuple(float(x) for x in r) for r in self.gain_ranges)
        )
        object.__setattr__(self, "sigma_range", tuple(float(x) for x in self.sigma_range))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        for name, (lo, hi) in [("hue_range", self.hue_range), ("sigma_range", self.sigma_range)]:
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.hue_range[0] < 0.0 or self.hue_range[1] > 180.0:
            raise ValueError("hue_range must lie within [0, 180]")
        if not self.gain_ranges:
            raise ValueError("gain_ranges must not be empty")
        for lo, hi in self.gain_ranges:
            if lo > hi or lo <= 0:
                raise ValueError("gain ranges need 0 < lo <= hi")
        if self.sigma_range[0] < 0:
            raise ValueError("sigma_range must be non-negative")
        if not 0.0 <= self.p_clean <= 1.0:
            raise ValueError("p_clean must be a probability")
        if not self.transforms or not set(self.transforms) <= set(TRANSFORMS):
            raise ValueError(f"transforms must be a nonempty subset of {TRANSFORMS}")

    def to_dict(self):
        return {
            "hue_range": list(self.hue_range),
            "gain_ranges": [list(r) for r in self.gain_ranges],
            "sigma_range": list(self.sigma_range),
            "p_clean": self.p_clean,
            "transforms": list(self.transforms),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def hue_shift(img, delta_hue):
    """Rotate every pixel's hue by ``delta_hue`` degrees; s and v are kept."""
    img = check_image(img)
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + delta_hue, 360.0)
    return hsv_to_rgb(hsv)


def illum_adjust(img, gain):
    """Scale all channels by ``gain`` and clamp to ``[0, 1]``."""
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    img = check_image(img)
    return np.clip(img * gain, 0.0, 1.0)


def noise_inject(img, sigma, seed):
    """Add i.i.d. Gaussian noise of standard deviation ``sigma``, then clamp.

    The noise is drawn from a PCG64 generator seeded with ``seed``, so equal
    arguments give bit-identical output.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    img = check_image(img, copy=True)
    if sigma == 0:
        return img
    rng = np.random.default_rng(int(seed))
    noise = rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def apply_perturbation(img, spec):
    """Apply ``spec`` as colour -> illumination -> noise."""
    out = check_image(img, copy=True)
    if spec.use_color:
        out = hue_shift(out, spec.delta_hue)
    if spec.use_illum:
        out = illum_adjust(out, spec.gain)
    if spec.use_noise:
        out = noise_inject(out, spec.sigma, spec.seed)
    return out


def _subsets_for(transforms):
    allowed = set(transforms)
    return [
        s for s in _NONEMPTY_SUBSETS
        if {n for n, on in zip(TRANSFORMS, s) if on} <= allowed
    ]


def sample_spec(cfg, rng_seed):
    """Draw a random :class:`PerturbationSpec` from ``cfg``.

    With probability ``cfg.p_clean`` the clean (empty) spec is returned;
    otherwise the subset of transforms is uniform over the nonempty subsets
    of ``cfg.transforms`` and each active parameter is uniform over its range.
    """
    rng = np.random.default_rng(int(rng_seed))
    # all draws happen unconditionally so the stream layout never depends on branches
    u_clean = rng.random()
    subsets = _subsets_for(cfg.transforms)
    subset = subsets[int(rng.integers(len(subsets)))]
    hue_mag = rng.uniform(*cfg.hue_range)
    hue_sign = 1.0 if rng.random() < 0.5 else -1.0
    branch = cfg.gain_ranges[int(rng.integers(len(cfg.gain_ranges)))]
    gain = rng.uniform(*branch)
    sigma = rng.uniform(*cfg.sigma_range)
    noise_seed = int(rng.integers(0, 2**64, dtype=np.uint64))

    if u_clean < cfg.p_clean:
        return CLEAN
    use_color, use_illum, use_noise = subset
    delta = hue_sign * hue_mag
    if delta <= -180.0:
        delta += 360.0
    return PerturbationSpec(
        use_color=use_color,
        delta_hue=float(delta) if use_color else 0.0,
        use_illum=use_illum,
        gain=float(gain) if use_illum else 1.0,
        use_noise=use_noise,
        sigma=float(sigma) if use_noise else 0.0,
        seed=noise_seed if use_noise else 0,
    )
