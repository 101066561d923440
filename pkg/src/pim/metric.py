"""The perceptual distance.

Encodes each image into a per-location, per-scale Gaussian mixture with the
trained marginal encoder (full-resolution features, no crop) and estimates
the symmetrized KL divergence between the two mixture fields by Monte Carlo
sampling.  With a single mixture component the divergence collapses to a
squared distance between the means, available in closed form.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from pim import encoders
from pim.checkpoint import load_checkpoint

logger = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)

_SAMPLE_CHUNK = 16  # fixed so the draw order is reproducible


@dataclass
class EncodedField:
    """Numeric (non-differentiable) mixture field for one image."""

    weights: list      # [C, H, W] per scale
    log_weights: list  # [C, H, W]
    means: list        # [C, L, H, W]


@dataclass
class PimModel:
    """A loaded model plus metric settings.

    ``mc_samples`` is the per-direction Monte Carlo sample count of the KL
    estimator; the component count and pyramid kind come from the
    architecture descriptor.
    """

    params: object
    mc_samples: int = 64

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @property
    def arch(self):
        return self.params.arch

    @property
    def components(self):
        return self.params.arch.components

    @classmethod
    def from_checkpoint(cls, path, mc_samples=64):
        return cls(params=load_checkpoint(path), mc_samples=mc_samples)


def derive_seed(seed, index):
    """Stable per-item seed derivation from a run seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def encode_marginal(image, params):
    """Marginal-encode one [3, H, W] image over full-resolution features."""
    arr = np.asarray(image, dtype=np.float32)
    feats = encoders.frontend(arr[None], params)
    field = encoders.marginal_encode(feats, params)
    return EncodedField(
        weights=[w.data[0] for w in field.weights],
        log_weights=[lw.data[0] for lw in field.log_weights],
        means=[m.data[0] for m in field.means],
    )


def _mixture_logdens_np(field, z_per_scale):
    """Joint mixture log density of stacked samples; returns [S]."""
    total = None
    for (lw, mu), z in zip(zip(field.log_weights, field.means), z_per_scale):
        c, ld, h, w = mu.shape
        d = z[:, None] - mu[None]                      # [S, C, L, H, W]
        sq = np.einsum("sclhw,sclhw->schw", d, d)
        a = lw[None] - 0.5 * sq                        # [S, C, H, W]
        m = a.max(axis=1)
        loc = m + np.log(np.exp(a - m[:, None]).sum(axis=1))
        per = loc.sum(axis=(1, 2)) - 0.5 * ld * h * w * LOG2PI
        total = per if total is None else total + per
    return total


def _sample_field(field, n, rng):
    """Draw n joint samples from a mixture field; list of [S, L, H, W]."""
    out = []
    for w, mu in zip(field.weights, field.means):
        c, ld, h, wd = mu.shape
        u = rng.random((n, 1, h, wd))
        cum = np.cumsum(w[None], axis=1)
        idx = np.minimum((u > cum).sum(axis=1), c - 1)     # [S, H, W]
        sel = np.take_along_axis(mu[None], idx[:, None, None, :, :], axis=1)[:, 0]
        noise = rng.standard_normal((n, ld, h, wd)).astype(np.float32)
        out.append(sel + noise)
    return out


def _kl_samples(field_from, field_to, n, rng):
    """Per-sample log-ratios log q_from(z) - log q_to(z), z ~ q_from; [n]."""
    vals = np.empty(n, dtype=np.float64)
    done = 0
    while done < n:
        take = min(_SAMPLE_CHUNK, n - done)
        z = _sample_field(field_from, take, rng)
        vals[done:done + take] = (_mixture_logdens_np(field_from, z)
                                  - _mixture_logdens_np(field_to, z))
        done += take
    return vals


def mc_symmetrized_kl(field_a, field_b, n, rng):
    """Monte Carlo estimate of KL(a||b) + KL(b||a) with its standard error."""
    ra = _kl_samples(field_a, field_b, n, rng)
    rb = _kl_samples(field_b, field_a, n, rng)
    est = float(ra.mean() + rb.mean())
    if n > 1:
        se = float(np.sqrt(ra.var(ddof=1) / n + rb.var(ddof=1) / n))
    else:
        se = float("inf")
    return est, se


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if x.shape != y.shape:
        raise ValueError(f"image extents differ: {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] images, got {x.shape}")
    for name, img in (("first", x), ("second", y)):
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"{name} image has values outside [0, 1]")
    return x, y


def pim(x, y, model, seed=0):
    """Perceptual distance between two [3, H, W] images in [0, 1].

    Monte Carlo symmetrized KL between the marginal encodings, summed over
    latent dimensions, spatial locations and scales.  Negative estimates
    (possible at small sample counts) clamp to zero.  Deterministic for a
    fixed seed.
    """
    x, y = _validate_pair(x, y)
    fa = encode_marginal(x, model.params)
    fb = encode_marginal(y, model.params)
    rng = np.random.default_rng(seed)
    est, _ = mc_symmetrized_kl(fa, fb, model.mc_samples, rng)
    if est < 0.0:
        logger.warning("negative KL estimate %.6g clamped to 0", est)
        return 0.0
    return est


def pim1(x, y, model):
    """Closed-form single-component distance: sum of squared mean differences."""
    if model.components != 1:
        raise ValueError(
            f"pim1 requires a single-component model, this one has {model.components}")
    x, y = _validate_pair(x, y)
    fa = encode_marginal(x, model.params)
    fb = encode_marginal(y, model.params)
    total = 0.0
    for ma, mb in zip(fa.means, fb.means):
        d = ma.astype(np.float64) - mb.astype(np.float64)
        total += float((d * d).sum())
    return total


def distance(x, y, model, seed=0):
    """pim1 for single-component models, Monte Carlo pim otherwise."""
    if model.components == 1:
        return pim1(x, y, model)
    return pim(x, y, model, seed=seed)


def batch_distance(pairs, model, seed=0):
    """Element-wise distances with independent per-pair derived seeds.

    Order-preserving; a failing element is reported as NaN with a warning
    and the run continues.
    """
    out = []
    for i, (x, y) in enumerate(pairs):
        try:
            out.append(distance(x, y, model, seed=derive_seed(seed, i)))
        except Exception as e:  # noqa: BLE001 - per-element error reporting
            logger.warning("pair %d failed: %s", i, e)
            out.append(float("nan"))
    return out
