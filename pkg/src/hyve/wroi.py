"""Learnable Gaussian wavelength ranges of interest (WROIs) and kernel synthesis.

A layer keeps G Gaussian distributions over wavelength (means in nm, variances
in nm^2 behind a softplus) plus G kernel prototypes. For a camera with channel
wavelengths `lam`, a C_in x G range-impact matrix of Gaussian densities weights
the prototypes into per-channel convolution kernels, so kernels follow
wavelengths instead of channel indices.

Notes on the math as implemented:
  - the Gaussian uses the standard squared exponent
    exp(-(x - mu)^2 / (2 sigma^2)) with the 1/sqrt(2 pi sigma^2) constant;
    the range-impact matrix is deliberately NOT row-normalized
  - the default initial variance is (1/G)^2 * (w_max - w_min); an override is
    available via `initial_variance`
  - a small floor (1e-6 nm^2) is added after softplus so variances can never
    reach zero
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ContractError, DimensionError, InputError

__all__ = [
    "GaussianWroiSet",
    "KernelPrototypeBundle",
    "HyveConvLayer",
    "gaussian_eval",
    "softplus_variance",
    "inverse_softplus",
    "init_wrois",
    "range_impact",
    "extend_prototypes",
    "synthesize_kernels",
    "wroi_snapshot",
]

DEFAULT_VARIANCE_FLOOR = 1e-6
DEFAULT_ALPHA0 = 0.1
DEFAULT_BETA0 = 0.1
_TWO_PI = 2.0 * math.pi


def gaussian_eval(x, mean, variance):
    """Gaussian density (1/sqrt(2 pi s2)) * exp(-(x-mu)^2 / (2 s2)).

    Plain float/array arithmetic; the differentiable path lives in
    `range_impact`.
    """
    variance = float(variance)
    if variance <= 0.0:
        raise InputError("variance must be positive, got %r" % variance)
    x = np.asarray(x, dtype=np.float64)
    mean = float(mean)
    out = np.exp(-((x - mean) ** 2) / (2.0 * variance)) / math.sqrt(_TWO_PI * variance)
    return float(out) if out.ndim == 0 else out


def softplus_variance(v_raw, variance_floor=DEFAULT_VARIANCE_FLOOR):
    """ln(1 + exp(v_raw)) + floor, overflow-safe for any real v_raw."""
    return float(np.logaddexp(0.0, float(v_raw)) + variance_floor)


def inverse_softplus(y):
    """Solve softplus(x) == y for y > 0; exact enough that the round trip
    reproduces y to float64 precision."""
    y = float(y)
    if y <= 0.0:
        raise InputError("softplus is positive; cannot invert %r" % y)
    if y > 30.0:
        return y
    return float(np.log(np.expm1(y)))


class GaussianWroiSet:
    """G learnable wavelength ranges: means (nm) and raw variance parameters."""

    def __init__(self, means, raw_variances, variance_floor=DEFAULT_VARIANCE_FLOOR):
        self.means = means if isinstance(means, Variable) else Variable(means, requires_grad=True)
        self.raw_variances = (raw_variances if isinstance(raw_variances, Variable)
                              else Variable(raw_variances, requires_grad=True))
        if self.means.value.ndim != 1 or self.means.shape != self.raw_variances.shape:
            raise DimensionError("means and raw variances must be 1-d and equal length")
        if self.means.size < 1:
            raise InputError("need at least one WROI")
        self.variance_floor = float(variance_floor)

    @property
    def count(self):
        return self.means.size

    def variances_variable(self):
        """Effective variances softplus(V_raw) + floor as a differentiable node."""
        return ad.softplus(self.raw_variances) + self.variance_floor

    def variances(self):
        return np.logaddexp(0.0, self.raw_variances.value) + self.variance_floor

    def params(self):
        return [("means", self.means), ("raw_variances", self.raw_variances)]


def init_wrois(num_wrois, w_min, w_max, variance_floor=DEFAULT_VARIANCE_FLOOR,
               initial_variance=None):
    """Evenly spaced means over [w_min, w_max] (midpoint for G=1) with the
    default overlap variance (1/G)^2 * (w_max - w_min)."""
    g = int(num_wrois)
    if g < 1:
        raise InputError("number of WROIs must be >= 1, got %r" % num_wrois)
    w_min, w_max = float(w_min), float(w_max)
    if not (math.isfinite(w_min) and math.isfinite(w_max)) or w_max <= w_min:
        raise InputError("degenerate wavelength range [%r, %r]" % (w_min, w_max))
    if g == 1:
        means = np.array([0.5 * (w_min + w_max)])
    else:
        means = np.linspace(w_min, w_max, g)
    if initial_variance is None:
        sigma0 = (1.0 / g) ** 2 * (w_max - w_min)
    else:
        sigma0 = float(initial_variance)
    if sigma0 <= variance_floor:
        raise InputError("initial variance %r must exceed the floor %r"
                         % (sigma0, variance_floor))
    raw = np.full(g, inverse_softplus(sigma0 - variance_floor))
    return GaussianWroiSet(Variable(means, requires_grad=True),
                           Variable(raw, requires_grad=True),
                           variance_floor=variance_floor)


def range_impact(wavelengths, wrois):
    """C_in x G matrix of Gaussian densities at the channel wavelengths.

    Differentiable w.r.t. the WROI means and raw variances; the wavelengths
    are data, not parameters.
    """
    lam = np.asarray(wavelengths, dtype=np.float64).reshape(-1)
    if lam.size < 1:
        raise InputError("need at least one wavelength")
    if not np.all(np.isfinite(lam)):
        raise InputError("wavelengths must be finite")
    var = wrois.variances_variable()                      # (G,)
    diff = Variable(lam[:, None]) - wrois.means           # (C_in, G)
    norm = (var * _TWO_PI) ** -0.5
    return norm * ad.exp(-(diff * diff) / (var * 2.0))


class KernelPrototypeBundle:
    """G kernel prototypes, optionally extended with shared prototypes.

    The extension adds a per-output-channel prototype and a layer-wide
    prototype, weighted by learnable scalars alpha and beta.
    """

    def __init__(self, kp, extended=False, alpha=None, kp_cout=None, beta=None, kp_conv=None):
        self.kp = kp if isinstance(kp, Variable) else Variable(kp, requires_grad=True)
        if self.kp.value.ndim != 4:
            raise DimensionError("KP must be G x C_out x K_x x K_y, got %r" % (self.kp.shape,))
        self.extended = bool(extended)
        self.alpha = alpha
        self.kp_cout = kp_cout
        self.beta = beta
        self.kp_conv = kp_conv
        if self.extended:
            g, c_out, kx, ky = self.kp.shape
            if self.kp_cout is None or self.kp_cout.shape != (1, c_out, kx, ky):
                raise DimensionError("KP_cout must be 1 x C_out x K_x x K_y")
            if self.kp_conv is None or self.kp_conv.shape != (1, 1, kx, ky):
                raise DimensionError("KP_conv must be 1 x 1 x K_x x K_y")
            if self.alpha is None or self.beta is None:
                raise DimensionError("extended bundle needs alpha and beta scalars")

    @classmethod
    def initialize(cls, num_wrois, c_out, kx, ky, rng, extended=False,
                   alpha0=DEFAULT_ALPHA0, beta0=DEFAULT_BETA0):
        std = math.sqrt(2.0 / (kx * ky * max(num_wrois, 1)))
        kp = Variable(rng.normal(0.0, std, (num_wrois, c_out, kx, ky)), requires_grad=True)
        if not extended:
            return cls(kp)
        return cls(
            kp,
            extended=True,
            alpha=Variable(np.float64(alpha0), requires_grad=True),
            kp_cout=Variable(rng.normal(0.0, std, (1, c_out, kx, ky)), requires_grad=True),
            beta=Variable(np.float64(beta0), requires_grad=True),
            kp_conv=Variable(rng.normal(0.0, std, (1, 1, kx, ky)), requires_grad=True),
        )

    def effective_prototypes(self):
        return extend_prototypes(self) if self.extended else self.kp

    def params(self):
        out = [("kp", self.kp)]
        if self.extended:
            out += [("alpha", self.alpha), ("kp_cout", self.kp_cout),
                    ("beta", self.beta), ("kp_conv", self.kp_conv)]
        return out


def extend_prototypes(bundle):
    """KP + alpha * KP_cout + beta * KP_conv, broadcast over G (and C_out)."""
    if not bundle.extended:
        raise ContractError("extend_prototypes called on a non-extended bundle")
    return bundle.kp + bundle.alpha * bundle.kp_cout + bundle.beta * bundle.kp_conv


def synthesize_kernels(ri, bundle):
    """Weight the (effective) prototypes with the range-impact matrix:
    K[c, o, x, y] = sum_g RI[c, g] * KP_eff[g, o, x, y]."""
    prototypes = bundle.effective_prototypes()
    ri_var = ri if isinstance(ri, Variable) else Variable(ri)
    if ri_var.value.ndim != 2 or ri_var.shape[1] != prototypes.shape[0]:
        raise DimensionError("range-impact matrix %r does not match %d prototypes"
                             % (ri_var.shape, prototypes.shape[0]))
    return ad.ri_contract(ri_var, prototypes)


class HyveConvLayer:
    """Wavelength-aware convolution layer with per-camera kernel caching.

    Forward synthesizes kernels from the current WROIs and prototypes for the
    given channel wavelengths, then runs a standard stride-1 cross-correlation.
    `freeze_kernels` stores the synthesized kernels for one camera; a cached
    entry is used only while no parameter has changed since it was frozen.
    """

    def __init__(self, num_wrois, c_out, kernel_size, padding, wavelength_range,
                 rng, extended=False, variance_floor=DEFAULT_VARIANCE_FLOOR,
                 initial_variance=None, alpha0=DEFAULT_ALPHA0, beta0=DEFAULT_BETA0):
        kx, ky = (kernel_size if isinstance(kernel_size, (tuple, list))
                  else (kernel_size, kernel_size))
        w_min, w_max = wavelength_range
        self.wrois = init_wrois(num_wrois, w_min, w_max, variance_floor=variance_floor,
                                initial_variance=initial_variance)
        self.prototypes = KernelPrototypeBundle.initialize(
            num_wrois, c_out, kx, ky, rng, extended=extended, alpha0=alpha0, beta0=beta0)
        self.c_out = int(c_out)
        self.kx, self.ky = int(kx), int(ky)
        self.padding = int(padding)
        self.extended = bool(extended)
        self.wavelength_range = (float(w_min), float(w_max))
        self._cache = {}
        self.synth_count = 0  # diagnostic: number of kernel synthesis passes

    @property
    def num_wrois(self):
        return self.wrois.count

    def params(self):
        return self.wrois.params() + self.prototypes.params()

    def _fingerprint(self):
        h = hashlib.blake2b(digest_size=16)
        for _, p in self.params():
            h.update(p.value.tobytes())
        return h.digest()

    @staticmethod
    def _cache_key(lam):
        return hashlib.blake2b(lam.tobytes(), digest_size=16).digest()

    def synthesize(self, wavelengths):
        """Differentiable kernels C_in x C_out x K_x x K_y for these wavelengths."""
        self.synth_count += 1
        ri = range_impact(wavelengths, self.wrois)
        return synthesize_kernels(ri, self.prototypes)

    def forward(self, x, wavelengths):
        x = x if isinstance(x, Variable) else Variable(x)
        lam = np.asarray(wavelengths, dtype=np.float64).reshape(-1)
        if x.value.ndim != 4:
            raise DimensionError("input must be N x C x H x W, got %r" % (x.shape,))
        if lam.size != x.shape[1]:
            raise InputError(
                "camera provides %d wavelengths but the input has %d channels; "
                "every channel needs a wavelength" % (lam.size, x.shape[1]))
        key = self._cache_key(lam)
        entry = self._cache.get(key)
        if entry is not None:
            kernels_value, fingerprint = entry
            if fingerprint == self._fingerprint():
                return ad.conv2d(x, Variable(kernels_value), self.padding)
            del self._cache[key]  # stale: a parameter changed since freezing
        return ad.conv2d(x, self.synthesize(lam), self.padding)

    def freeze_kernels(self, camera_or_wavelengths):
        """Synthesize and store kernels for one camera; returns the cache key."""
        lam = getattr(camera_or_wavelengths, "wavelengths", camera_or_wavelengths)
        lam = np.asarray(lam, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(lam)):
            raise InputError("camera wavelengths must be finite")
        key = self._cache_key(lam)
        kernels = self.synthesize(lam).value.copy()
        self._cache[key] = (kernels, self._fingerprint())
        return key

    def cached_cameras(self):
        return len(self._cache)

    def snapshot(self, epoch):
        """Read-only rows (epoch, wroi index, mean nm, variance nm^2)."""
        variances = self.wrois.variances()
        return [(int(epoch), i, float(self.wrois.means.value[i]), float(variances[i]))
                for i in range(self.wrois.count)]


def wroi_snapshot(layer, epoch):
    return layer.snapshot(epoch)
