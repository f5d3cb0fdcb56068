"""Camera descriptors, synthetic scenes, sampling, and baseline preprocessing.

A camera is an ordered channel -> wavelength (nm) assignment. A scene holds a
continuous reflectance spectrum per class (a gentle slope plus a few Gaussian
bumps), so any camera whose wavelengths lie inside the scene range can sample
it. Two baseline schemes for reconciling cameras with different grids are
provided: per-pixel linear interpolation onto a target grid (edge-clamped
outside the source range) and zero padding in the channel dimension.

Cube file format: one JSON header line, then the raw little-endian float64
payload in (h, w, c) order. Labels live in a sibling file of little-endian
int64 referenced from the header.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

__all__ = [
    "CameraDescriptor",
    "SpectralScene",
    "HyperCube",
    "linspace_camera",
    "subset_camera",
    "generate_scene",
    "sample_camera",
    "linear_interpolate",
    "zero_pad_channels",
    "write_cube",
    "read_cube",
]


@dataclass(frozen=True, eq=False)
class CameraDescriptor:
    """Ordered channel -> wavelength assignment. `synthetic_tail` counts
    trailing placeholder wavelengths appended by zero padding."""

    name: str
    wavelengths: np.ndarray
    synthetic_tail: int = 0

    def __post_init__(self):
        lam = np.asarray(self.wavelengths, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "wavelengths", lam)
        if lam.size < 1:
            raise InputError("camera %r has no channels" % self.name)
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise InputError("camera %r has non-finite or non-positive wavelengths" % self.name)
        if lam.size > 1 and not np.all(np.diff(lam) > 0):
            bad = int(np.argmax(np.diff(lam) <= 0))
            raise InputError("camera %r wavelengths not strictly increasing at index %d"
                             % (self.name, bad + 1))

    @property
    def channels(self):
        return int(self.wavelengths.size)


def linspace_camera(name, w_min, w_max, channels):
    channels = int(channels)
    if channels < 2:
        raise InputError("linspace camera needs at least 2 channels")
    if not float(w_max) > float(w_min):
        raise InputError("degenerate wavelength range [%r, %r]" % (w_min, w_max))
    return CameraDescriptor(name, np.linspace(float(w_min), float(w_max), channels))


def subset_camera(cam, stride, offset, name):
    """Keep the channels whose index is offset mod stride."""
    stride, offset = int(stride), int(offset)
    if stride < 1:
        raise InputError("stride must be >= 1")
    if not 0 <= offset < stride:
        raise InputError("offset must be in [0, stride)")
    lam = cam.wavelengths[offset::stride]
    if lam.size == 0:
        raise InputError("subset of camera %r is empty" % cam.name)
    return CameraDescriptor(name, lam.copy())


@dataclass
class SpectralScene:
    """Per-pixel class labels plus one continuous spectrum per class.

    Spectrum c at wavelength x (nm) is
      base + slope * (x - w_min) / (w_max - w_min)
      + sum over bumps of amp * exp(-(x - center)^2 / (2 * width^2)).
    """

    height: int
    width: int
    num_classes: int
    w_min: float
    w_max: float
    seed: int
    tile_size: int
    labels: np.ndarray
    base: tuple                 # (offset, slope)
    bumps: list = field(default_factory=list)  # per class: [(amp, center, width), ...]

    def spectrum(self, cls, wavelengths):
        lam = np.asarray(wavelengths, dtype=np.float64)
        t = (lam - self.w_min) / (self.w_max - self.w_min)
        out = self.base[0] + self.base[1] * t
        for amp, center, width in self.bumps[cls]:
            out = out + amp * np.exp(-((lam - center) ** 2) / (2.0 * width ** 2))
        return out

    def derivative_bound(self, cls):
        """Upper bound on |d spectrum / d lambda| from the generator parameters.

        A Gaussian bump's slope peaks at amp / (width * sqrt(e))."""
        bound = abs(self.base[1]) / (self.w_max - self.w_min)
        for amp, _, width in self.bumps[cls]:
            bound += abs(amp) / (width * math.sqrt(math.e))
        return bound


@dataclass
class HyperCube:
    """H x W x C reflectance values paired with the recording camera."""

    data: np.ndarray
    camera: CameraDescriptor
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise InputError("cube data must be H x W x C, got %r" % (self.data.shape,))
        if self.data.shape[2] != self.camera.channels:
            raise InputError("cube has %d channels, camera %r has %d"
                             % (self.data.shape[2], self.camera.name, self.camera.channels))
        if not np.all(np.isfinite(self.data)):
            raise InputError("cube contains non-finite values")


# narrow band that separates classes 0 and 1; kept <= 30 nm wide in total
_NARROW_SIGMA = 6.0
_NARROW_AMP = 0.35


def generate_scene(classes, height, width, wavelength_range, seed, tile_size=8,
                   spectra_seed=None):
    """Deterministic synthetic scene with contiguous same-class tiles.

    Classes 0 and 1 share identical broad spectra and differ only inside a
    narrow (~3 sigma = 18 nm, < 30 nm) band, so solving the task requires
    finding that band. Every class appears at least once. `spectra_seed`
    (default: `seed`) controls the class spectra separately from the spatial
    layout, so several scenes can share one set of class spectra.
    """
    classes = int(classes)
    if classes < 2:
        raise InputError("need at least 2 classes")
    w_min, w_max = float(wavelength_range[0]), float(wavelength_range[1])
    if w_max <= w_min:
        raise InputError("degenerate wavelength range")
    rng = np.random.default_rng(seed)
    spectra_rng = np.random.default_rng(seed if spectra_seed is None else spectra_seed)
    span = w_max - w_min

    base = (0.3 + 0.2 * spectra_rng.random(), 0.1 * (spectra_rng.random() - 0.5))
    # broad shape shared by classes 0 and 1
    shared = [(0.1 + 0.15 * spectra_rng.random(),
               spectra_rng.uniform(w_min + 0.1 * span, w_max - 0.1 * span),
               spectra_rng.uniform(0.08 * span, 0.2 * span)) for _ in range(2)]
    narrow_center = spectra_rng.uniform(w_min + 0.25 * span, w_max - 0.25 * span)
    bumps = [list(shared)]
    bumps.append(list(shared) + [(_NARROW_AMP, narrow_center, _NARROW_SIGMA)])
    for _ in range(classes - 2):
        n_bumps = int(spectra_rng.integers(2, 5))
        bumps.append([(0.1 + 0.2 * spectra_rng.random(),
                       spectra_rng.uniform(w_min + 0.1 * span, w_max - 0.1 * span),
                       spectra_rng.uniform(0.05 * span, 0.15 * span)) for _ in range(n_bumps)])

    tiles_h = -(-height // tile_size)
    tiles_w = -(-width // tile_size)
    n_tiles = tiles_h * tiles_w
    if n_tiles < classes:
        raise InputError("%dx%d scene with tile %d cannot hold %d classes"
                         % (height, width, tile_size, classes))
    tile_classes = np.concatenate([np.arange(classes),
                                   rng.integers(0, classes, n_tiles - classes)])
    rng.shuffle(tile_classes)
    labels = np.zeros((height, width), dtype=np.int64)
    for i in range(tiles_h):
        for j in range(tiles_w):
            labels[i * tile_size:(i + 1) * tile_size,
                   j * tile_size:(j + 1) * tile_size] = tile_classes[i * tiles_w + j]

    return SpectralScene(height=height, width=width, num_classes=classes,
                         w_min=w_min, w_max=w_max, seed=int(seed), tile_size=int(tile_size),
                         labels=labels, base=base, bumps=bumps)


def sample_camera(scene, cam, noise_sd=0.01, seed=0):
    """Record the scene with one camera; additive Gaussian reflectance noise."""
    lam = cam.wavelengths
    if lam[0] < scene.w_min or lam[-1] > scene.w_max:
        raise InputError("camera %r range [%g, %g] outside scene range [%g, %g]"
                         % (cam.name, lam[0], lam[-1], scene.w_min, scene.w_max))
    data = np.empty((scene.height, scene.width, cam.channels))
    for cls in range(scene.num_classes):
        mask = scene.labels == cls
        if mask.any():
            data[mask] = scene.spectrum(cls, lam)
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, noise_sd, data.shape)
    return HyperCube(data, cam, labels=scene.labels.copy())


def linear_interpolate(cube, target):
    """Per-pixel piecewise-linear resampling onto the target camera's grid.

    Outside the source range the nearest edge value is used (no extrapolation).
    """
    src = cube.camera.wavelengths
    tgt = target.wavelengths
    flat = cube.data.reshape(-1, src.size)
    if src.size == 1:
        out = np.repeat(flat[:, :1], tgt.size, axis=1)
    else:
        idx = np.clip(np.searchsorted(src, tgt, side="left"), 1, src.size - 1)
        x0, x1 = src[idx - 1], src[idx]
        w = np.clip((tgt - x0) / (x1 - x0), 0.0, 1.0)
        out = flat[:, idx - 1] * (1.0 - w) + flat[:, idx] * w
    labels = None if cube.labels is None else cube.labels.copy()
    return HyperCube(out.reshape(cube.data.shape[0], cube.data.shape[1], tgt.size),
                     target, labels=labels)


def zero_pad_channels(cube, target_channels):
    """Append all-zero channels with placeholder wavelengths past the top end."""
    target_channels = int(target_channels)
    c = cube.camera.channels
    if target_channels < c:
        raise InputError("cannot pad %d channels down to %d" % (c, target_channels))
    if target_channels == c:
        return HyperCube(cube.data.copy(), cube.camera,
                         labels=None if cube.labels is None else cube.labels.copy())
    extra = target_channels - c
    lam = cube.camera.wavelengths
    step = lam[-1] - lam[-2] if c > 1 else 1.0
    tail = lam[-1] + step * np.arange(1, extra + 1)
    cam = CameraDescriptor(cube.camera.name + "+zeropad",
                           np.concatenate([lam, tail]),
                           synthetic_tail=extra + cube.camera.synthetic_tail)
    data = np.concatenate(
        [cube.data, np.zeros((cube.data.shape[0], cube.data.shape[1], extra))], axis=2)
    return HyperCube(data, cam, labels=None if cube.labels is None else cube.labels.copy())


# ---------------------------------------------------------------------------
# cube file I/O

_FORMAT = "hyvecube"
_VERSION = 1


def write_cube(cube, path):
    path = os.fspath(path)
    labels_name = None
    if cube.labels is not None:
        labels_name = os.path.basename(path) + ".labels"
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "height": cube.data.shape[0],
        "width": cube.data.shape[1],
        "channels": cube.data.shape[2],
        "dtype": "f64le",
        "camera": cube.camera.name,
        "wavelengths": [float(x) for x in cube.camera.wavelengths],
        "synthetic_tail": int(cube.camera.synthetic_tail),
        "labels": labels_name,
    }
    payload = np.ascontiguousarray(cube.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    if labels_name is not None:
        with open(os.path.join(os.path.dirname(path) or ".", labels_name), "wb") as fh:
            fh.write(np.ascontiguousarray(cube.labels, dtype="<i8").tobytes())


def read_cube(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("%s: no header line found" % path)
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError("%s: invalid header JSON at byte %d: %s"
                          % (path, exc.pos, exc.msg)) from exc
    if header.get("format") != _FORMAT or header.get("version") != _VERSION:
        raise FormatError("%s: not a %s v%d file" % (path, _FORMAT, _VERSION))
    for key in ("height", "width", "channels", "wavelengths", "camera", "dtype"):
        if key not in header:
            raise FormatError("%s: header missing field %r" % (path, key))
    if header["dtype"] != "f64le":
        raise FormatError("%s: unsupported dtype %r" % (path, header["dtype"]))
    h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    lam = np.asarray(header["wavelengths"], dtype=np.float64)
    if lam.size != c:
        raise FormatError("%s: header declares %d channels but lists %d wavelengths"
                          % (path, c, lam.size))
    if lam.size > 1 and not np.all(np.diff(lam) > 0):
        bad = int(np.argmax(np.diff(lam) <= 0))
        raise FormatError("%s: wavelengths not strictly increasing at index %d"
                          % (path, bad + 1))
    payload = blob[nl + 1:]
    expected = h * w * c * 8
    if len(payload) != expected:
        raise FormatError("%s: payload length mismatch: expected %d bytes, got %d"
                          % (path, expected, len(payload)))
    data = np.frombuffer(payload, dtype="<f8").reshape(h, w, c).copy()
    cam = CameraDescriptor(header["camera"], lam,
                           synthetic_tail=int(header.get("synthetic_tail", 0)))
    labels = None
    if header.get("labels"):
        labels_path = os.path.join(os.path.dirname(path) or ".", header["labels"])
        with open(labels_path, "rb") as fh:
            raw = fh.read()
        if len(raw) != h * w * 8:
            raise FormatError("%s: label payload length mismatch: expected %d bytes, got %d"
                              % (labels_path, h * w * 8, len(raw)))
        labels = np.frombuffer(raw, dtype="<i8").reshape(h, w).copy()
    return HyperCube(data, cam, labels=labels)
