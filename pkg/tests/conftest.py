"""Shared test utilities: finite differences and tiny model builders."""

import numpy as np
import pytest

from pim.autodiff import Tensor
from pim.encoders import Architecture, ConvLayer, FullEncoderScale, ModelParameters


def fd_gradient(f, arrays, h=1e-6):
    """Central finite differences of a scalar function of float64 arrays."""
    grads = []
    for ai in range(len(arrays)):
        g = np.zeros_like(arrays[ai])
        it = np.nditer(arrays[ai], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            up = [a.copy() for a in arrays]
            dn = [a.copy() for a in arrays]
            up[ai][idx] += h
            dn[ai][idx] -= h
            g[idx] = (f(up) - f(dn)) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-8):
    scale = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def tiny_layer(rng, c_in, c_out, kh=1, kw=1, dtype=np.float32, scale=0.5):
    w = (rng.standard_normal((c_out, c_in, kh, kw)) * scale).astype(dtype)
    b = (rng.standard_normal((c_out, 1, 1)) * 0.1).astype(dtype)
    return ConvLayer(weight=Tensor(w, requires_grad=True, dtype=dtype),
                     bias=Tensor(b, requires_grad=True, dtype=dtype))


def tiny_params(rng, n_scales=1, chans=2, components=2, latent=2, head=4, full=3,
                depth=2, dtype=np.float32):
    """Hand-sized ModelParameters for oracle and gradient tests."""
    arch = Architecture(components=components, latent_dim=latent,
                        frontend_units=4, head_units=head, full_units=full,
                        cnn_depth=depth)
    theta, phi, psi = [], [], []
    for _ in range(n_scales):
        layers = []
        c = chans
        for u in [4] * (depth - 1) + [3]:
            layers.append(tiny_layer(rng, c, u, 5, 5, dtype=dtype, scale=0.2))
            c = u
        theta.append(layers)
        phi.append([
            tiny_layer(rng, 3, head, dtype=dtype),
            tiny_layer(rng, head, head, dtype=dtype),
            tiny_layer(rng, head, components * (1 + latent), dtype=dtype),
        ])
        psi.append(FullEncoderScale(
            x_layers=[
                tiny_layer(rng, 3, full, dtype=dtype),
                tiny_layer(rng, full, full, dtype=dtype),
                tiny_layer(rng, full, latent, dtype=dtype),
            ],
            y_layer=tiny_layer(rng, 3, 2 * full, dtype=dtype),
        ))
    return ModelParameters(arch=arch, theta=theta, phi=phi, psi=psi)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
