"""The three-encoder architecture.

A shared multi-scale frontend (pyramid followed by one CNN per scale,
parameters unshared across scales) feeds two heads per scale:

* the marginal encoder, a 1x1-support network emitting mixture weights and
  component means of a unit-variance Gaussian mixture per spatial location
  (identical parameters for both frames of a pair);
* the full encoder, a 1x1-support network over one frame's features whose
  second-layer activations are modulated by an elementwise affine transform
  predicted from the other frame's features, emitting a single conditional
  mean (unit variance).
"""

from dataclasses import dataclass, field

import numpy as np

from pim import pyramid as pyr_mod
from pim.autodiff import Tensor, affine, conv2d, logsumexp, relu, reshape, softmax

KERNEL = 5  # spatial support of every frontend CNN layer


@dataclass
class Architecture:
    pyramid_kind: str = "steerable"
    cnn_depth: int = 4
    components: int = 5
    latent_dim: int = 10
    frontend_units: int = 64
    head_units: int = 50
    full_units: int = 10

    def __post_init__(self):
        if self.pyramid_kind not in ("steerable", "laplacian"):
            raise ValueError(f"unknown pyramid kind {self.pyramid_kind!r}")
        if not 1 <= self.cnn_depth <= 8:
            raise ValueError(f"cnn_depth out of range: {self.cnn_depth}")
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    @property
    def n_scales(self):
        return pyr_mod.N_LEVELS

    def scale_channels(self):
        return pyr_mod.scale_channels(self.pyramid_kind)

    @property
    def crop_margin(self):
        # receptive-field half-width of the frontend stack
        return (KERNEL // 2) * self.cnn_depth

    def describe(self):
        return (f"pyramid={self.pyramid_kind} depth={self.cnn_depth} "
                f"components={self.components} latent={self.latent_dim} "
                f"units={self.frontend_units} head={self.head_units} full={self.full_units}")

    @classmethod
    def from_description(cls, text):
        kv = dict(item.split("=", 1) for item in text.split())
        return cls(
            pyramid_kind=kv["pyramid"],
            cnn_depth=int(kv["depth"]),
            components=int(kv["components"]),
            latent_dim=int(kv["latent"]),
            frontend_units=int(kv["units"]),
            head_units=int(kv["head"]),
            full_units=int(kv["full"]),
        )


@dataclass
class ConvLayer:
    weight: Tensor  # [O, C, kh, kw]
    bias: Tensor    # [O, 1, 1]


@dataclass
class FullEncoderScale:
    x_layers: list  # three 1x1 ConvLayers
    y_layer: ConvLayer  # 1x1, emits latent_dim factors then latent_dim offsets


@dataclass
class ModelParameters:
    """Trainable parameter groups: frontend (theta), marginal heads (phi),
    full-encoder heads (psi), one set per scale each."""

    arch: Architecture
    theta: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    psi: list = field(default_factory=list)

    def named_tensors(self):
        for s, layers in enumerate(self.theta):
            for i, layer in enumerate(layers):
                yield f"theta/s{s}/l{i}/w", layer.weight
                yield f"theta/s{s}/l{i}/b", layer.bias
        for s, layers in enumerate(self.phi):
            for i, layer in enumerate(layers):
                yield f"phi/s{s}/l{i}/w", layer.weight
                yield f"phi/s{s}/l{i}/b", layer.bias
        for s, fe in enumerate(self.psi):
            for i, layer in enumerate(fe.x_layers):
                yield f"psi/s{s}/x{i}/w", layer.weight
                yield f"psi/s{s}/x{i}/b", layer.bias
            yield f"psi/s{s}/y/w", fe.y_layer.weight
            yield f"psi/s{s}/y/b", fe.y_layer.bias

    def trainable(self):
        return [t for _, t in self.named_tensors()]

    def parameter_count(self):
        return sum(t.size for t in self.trainable())


@dataclass
class MixtureField:
    """Per-scale Gaussian mixture: weights on the probability simplex and
    unit-variance component means.  ``log_weights`` carries the numerically
    safe log-simplex used by the densities."""

    weights: list      # [N, components, H, W]
    log_weights: list  # [N, components, H, W]
    means: list        # [N, components, latent, H, W]


@dataclass
class GaussianMeanField:
    means: list  # [N, latent, H, W]


def _new_layer(rng, c_in, c_out, kh, kw, dtype=np.float32):
    fan_in = c_in * kh * kw
    limit = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-limit, limit, size=(c_out, c_in, kh, kw)).astype(dtype)
    return ConvLayer(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros((c_out, 1, 1), dtype=dtype), requires_grad=True),
    )


def init_parameters(seed, arch):
    """Deterministic fan-in-scaled uniform initialization; biases zero.

    The full encoder's affine branch starts at the identity (factors 1,
    offsets 0) so early training behaves like an unconditional encoder.
    """
    rng = np.random.default_rng(seed)
    chans = arch.scale_channels()
    units = [arch.frontend_units] * (arch.cnn_depth - 1) + [3]

    theta = []
    for s in range(arch.n_scales):
        layers = []
        c = chans[s]
        for u in units:
            layers.append(_new_layer(rng, c, u, KERNEL, KERNEL))
            c = u
        theta.append(layers)

    head_out = arch.components * (1 + arch.latent_dim)
    phi = []
    for _ in range(arch.n_scales):
        phi.append([
            _new_layer(rng, 3, arch.head_units, 1, 1),
            _new_layer(rng, arch.head_units, arch.head_units, 1, 1),
            _new_layer(rng, arch.head_units, head_out, 1, 1),
        ])

    ld = arch.latent_dim
    psi = []
    for _ in range(arch.n_scales):
        x_layers = [
            _new_layer(rng, 3, arch.full_units, 1, 1),
            _new_layer(rng, arch.full_units, arch.full_units, 1, 1),
            _new_layer(rng, arch.full_units, ld, 1, 1),
        ]
        fu = arch.full_units
        y_w = np.zeros((2 * fu, 3, 1, 1), dtype=np.float32)
        y_b = np.concatenate([np.ones(fu), np.zeros(fu)]).astype(np.float32)
        y_layer = ConvLayer(
            weight=Tensor(y_w, requires_grad=True),
            bias=Tensor(y_b.reshape(2 * fu, 1, 1), requires_grad=True),
        )
        psi.append(FullEncoderScale(x_layers=x_layers, y_layer=y_layer))

    return ModelParameters(arch=arch, theta=theta, phi=phi, psi=psi)


def _run_stack(x, layers, padding, last_linear=True):
    t = x
    for i, layer in enumerate(layers):
        t = conv2d(t, layer.weight, stride=1, padding=padding) + layer.bias
        if i < len(layers) - 1 or not last_linear:
            t = relu(t)
    return t


def frontend_from_pyramid(pyr, params):
    """Apply the per-scale CNNs to an existing decomposition."""
    if pyr.n_levels != params.arch.n_scales:
        raise ValueError(f"expected {params.arch.n_scales} pyramid levels, got {pyr.n_levels}")
    feats = []
    for s, level in enumerate(pyr.levels):
        t = level if isinstance(level, Tensor) else Tensor(level)
        feats.append(_run_stack(t, params.theta[s], padding="same"))
    return feats


def frontend(image, params):
    """Decompose ``image`` [N, 3, H, W] and apply the frontend CNNs.

    Returns one [N, 3, Hs, Ws] tensor per scale at the pyramid's resolution
    layout.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    pyr = pyr_mod.decompose(arr, params.arch.pyramid_kind)
    return frontend_from_pyramid(pyr, params)


def center_offsets(extent, target):
    if target > extent:
        raise ValueError(f"crop size {target} exceeds extent {extent}")
    return (extent - target) // 2


def cropped_subbands(image, arch, size):
    """Pyramid subbands pre-cropped for the fused crop-then-convolve path.

    For scales whose extent allows it, the subband is center-cropped to
    size + 2*margin so a valid convolution stack lands exactly on the
    center crop of the full feature map.  Smaller scales pass through whole
    (mode "same": run padded, crop the output).  Returns a list of
    (array, mode) pairs.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    pyr = pyr_mod.decompose(arr, arch.pyramid_kind)
    margin = arch.crop_margin
    out = []
    for level in pyr.levels:
        h, w = level.shape[2], level.shape[3]
        if min(h, w) < size:
            raise ValueError(f"scale extent {h}x{w} smaller than crop size {size}")
        big = size + 2 * margin
        if h >= big and w >= big:
            oh, ow = center_offsets(h, big), center_offsets(w, big)
            out.append((np.ascontiguousarray(level[:, :, oh:oh + big, ow:ow + big]), "valid"))
        else:
            out.append((level, "same"))
    return out


def frontend_from_crops(crops, params, size):
    """Frontend features restricted to the aligned center crop.

    ``crops`` comes from :func:`cropped_subbands`.  Output per scale is
    [N, 3, size, size], equal to center-cropping the full frontend output.
    """
    feats = []
    for s, (arr, mode) in enumerate(crops):
        t = arr if isinstance(arr, Tensor) else Tensor(arr)
        if mode == "valid":
            f = _run_stack(t, params.theta[s], padding="valid")
            if f.shape[2] != size or f.shape[3] != size:
                raise ValueError(f"valid stack produced {f.shape}, expected {size}x{size}")
        else:
            f = _run_stack(t, params.theta[s], padding="same")
            oh = center_offsets(f.shape[2], size)
            ow = center_offsets(f.shape[3], size)
            f = f[:, :, oh:oh + size, ow:ow + size]
        feats.append(f)
    return feats


def frontend_cropped(image, params, size):
    crops = cropped_subbands(image, params.arch, size)
    return frontend_from_crops(crops, params, size)


def marginal_encode(features, params):
    """Mixture marginal encoder q(z|x) over frontend features.

    Per scale and location: softmax weights over ``components`` plus one
    mean vector of ``latent_dim`` per component, unit variance implied.
    """
    arch = params.arch
    c, ld = arch.components, arch.latent_dim
    weights, log_weights, means = [], [], []
    for s, f in enumerate(features):
        out = _run_stack(f, params.phi[s], padding="valid")
        logits = out[:, :c]
        w = softmax(logits, axis=1)
        lw = logits - logsumexp(logits, axis=1, keepdims=True)
        n, _, h, wd = out.shape
        mu = reshape(out[:, c:], (n, c, ld, h, wd))
        weights.append(w)
        log_weights.append(lw)
        means.append(mu)
    return MixtureField(weights=weights, log_weights=log_weights, means=means)


def full_encode(features_x, features_y, params):
    """Pair-conditioned encoder p(z|x, y): mean of a unit-variance Gaussian.

    The y-branch linear layer emits per-location scale factors and offsets,
    one of each per unit of the x-branch's second layer, applied elementwise
    to those activations before the final linear layer.
    """
    arch = params.arch
    fu = arch.full_units
    means = []
    for s, (fx, fy) in enumerate(zip(features_x, features_y)):
        fe = params.psi[s]
        h1 = relu(conv2d(fx, fe.x_layers[0].weight, padding="valid") + fe.x_layers[0].bias)
        h2 = relu(conv2d(h1, fe.x_layers[1].weight, padding="valid") + fe.x_layers[1].bias)
        yo = conv2d(fy, fe.y_layer.weight, padding="valid") + fe.y_layer.bias
        factors = yo[:, :fu]
        offsets = yo[:, fu:]
        a = affine(h2, factors, offsets)
        mu = conv2d(a, fe.x_layers[2].weight, padding="valid") + fe.x_layers[2].bias
        means.append(mu)
    return GaussianMeanField(means=means)
