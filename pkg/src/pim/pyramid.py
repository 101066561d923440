"""Parameter-free linear multi-scale decompositions.

Two variants over [N, 3, H, W] images:

* a real-valued two-orientation steerable-style pyramid (highpass, three
  bandpass scales with horizontal/vertical derivative-of-Gaussian subbands,
  lowpass residual), forward transform only;
* the classic binomial Laplacian pyramid (four detail levels plus residual),
  exactly invertible.

Both produce five levels.  All filtering uses reflect padding so constants
are preserved and borders do not leak zeros into subband statistics.
"""

from dataclasses import dataclass

import numpy as np

# binomial 5-tap, the classic construction
_BLUR_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
# derivative-of-Gaussian style pair: difference along one axis, smoothing
# along the other
_DERIV_TAPS = np.array([-1.0, 0.0, 1.0]) / 2.0
_SMOOTH_TAPS = np.array([1.0, 2.0, 1.0]) / 4.0

N_LEVELS = 5


@dataclass
class PyramidDecomposition:
    """Five scale entries plus their descriptors.

    ``levels[i]`` is [N, C_i, H_i, W_i]; ``factors[i]`` is the downsampling
    factor relative to the input; ``orientations[i]`` counts oriented
    subbands (0 for highpass/lowpass/detail levels).
    """

    kind: str
    levels: list
    factors: list
    orientations: list

    @property
    def n_levels(self):
        return len(self.levels)


def _filter_axis(x, taps, axis):
    """Correlate one spatial axis with ``taps`` under reflect padding."""
    k = len(taps)
    p = k // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (p, p)
    xp = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    n = x.shape[axis]
    for i, t in enumerate(taps):
        sl[axis] = slice(i, i + n)
        out += t * xp[tuple(sl)]
    return out


def blur(x):
    """Separable binomial blur on the two trailing axes."""
    taps = _BLUR_TAPS.astype(x.dtype)
    return _filter_axis(_filter_axis(x, taps, -2), taps, -1)


def downsample2(x):
    return np.ascontiguousarray(x[..., ::2, ::2])


def upsample2(x):
    """Zero-insert 2x then interpolate with the gain-compensated blur."""
    n_extra = x.shape[:-2]
    h, w = x.shape[-2:]
    z = np.zeros(n_extra + (2 * h, 2 * w), dtype=x.dtype)
    z[..., ::2, ::2] = x
    taps = (2.0 * _BLUR_TAPS).astype(x.dtype)
    return _filter_axis(_filter_axis(z, taps, -2), taps, -1)


def _oriented(x):
    """Two oriented subbands: horizontal and vertical derivative, each
    smoothed along the orthogonal axis.  Output doubles the channel count."""
    d = _DERIV_TAPS.astype(x.dtype)
    s = _SMOOTH_TAPS.astype(x.dtype)
    gx = _filter_axis(_filter_axis(x, d, -1), s, -2)
    gy = _filter_axis(_filter_axis(x, d, -2), s, -1)
    return np.concatenate([gx, gy], axis=1)


def _validate_input(image):
    if image.ndim != 4:
        raise ValueError(f"expected [N, C, H, W] image batch, got shape {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h < 32 or w < 32:
        raise ValueError(f"image extents must be at least 32, got {h}x{w}")
    if h % 8 or w % 8:
        raise ValueError(f"image extents must be divisible by 8, got {h}x{w}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")


def steerable_decompose(image):
    """Five levels: highpass, three 2-orientation bandpass scales, lowpass.

    Resolution layout: highpass and bandpass1 at full resolution, then
    bandpass2, bandpass3 and the lowpass at 1/2, 1/4 and 1/8.  Linear in the
    input; bandpass and highpass reject constants exactly.
    """
    image = np.asarray(image)
    _validate_input(image)
    low0 = blur(image)
    high = image - low0
    band1 = _oriented(low0)
    low1 = downsample2(blur(low0))
    band2 = _oriented(low1)
    low2 = downsample2(blur(low1))
    band3 = _oriented(low2)
    low3 = downsample2(blur(low2))
    return PyramidDecomposition(
        kind="steerable",
        levels=[high, band1, band2, band3, low3],
        factors=[1, 1, 2, 4, 8],
        orientations=[0, 2, 2, 2, 0],
    )


def laplacian_decompose(image):
    """Burt-Adelson pyramid: four detail levels plus the blurred residual."""
    image = np.asarray(image)
    _validate_input(image)
    levels = []
    g = image
    for _ in range(N_LEVELS - 1):
        nxt = downsample2(blur(g))
        levels.append(g - upsample2(nxt))
        g = nxt
    levels.append(g)
    return PyramidDecomposition(
        kind="laplacian",
        levels=levels,
        factors=[1, 2, 4, 8, 16],
        orientations=[0] * N_LEVELS,
    )


def laplacian_reconstruct(pyr):
    """Exact inverse of :func:`laplacian_decompose`."""
    if pyr.kind != "laplacian":
        raise ValueError(f"cannot reconstruct a {pyr.kind!r} pyramid")
    g = pyr.levels[-1]
    for detail in reversed(pyr.levels[:-1]):
        g = detail + upsample2(g)
    return g


def decompose(image, kind):
    if kind == "steerable":
        return steerable_decompose(image)
    if kind == "laplacian":
        return laplacian_decompose(image)
    raise ValueError(f"unknown pyramid kind {kind!r}")


def scale_channels(kind, colors=3):
    """Channel count per level for a given pyramid kind."""
    if kind == "steerable":
        return [colors, 2 * colors, 2 * colors, 2 * colors, colors]
    if kind == "laplacian":
        return [colors] * N_LEVELS
    raise ValueError(f"unknown pyramid kind {kind!r}")


def level_extents(kind, h, w):
    """Spatial extent of each level for an HxW input."""
    if kind == "steerable":
        factors = [1, 1, 2, 4, 8]
    elif kind == "laplacian":
        factors = [1, 2, 4, 8, 16]
    else:
        raise ValueError(f"unknown pyramid kind {kind!r}")
    return [(h // f, w // f) for f in factors]
