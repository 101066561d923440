"""Training objectives and the training loop.

The main objective maximizes a variational lower bound on the three-way
mutual information between two adjacent frames and the latent, with a
Lagrangian weight beta annealed from 0 to 1 that trades informativeness
against the two conditional-compression terms.  Two contrastive ablation
objectives (standard and single-variable) are included.

All objectives draw one latent sample per pair per step and operate on
aligned center crops of the frontend features to bound memory.
"""

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from pim import encoders
from pim.autodiff import Tape, Tensor, backward, logsumexp, reshape, square, tmean, tsum
from pim.checkpoint import save_checkpoint
from pim.optim import AdamState, adam_step, learning_rate

OBJECTIVES = ("ixyz", "infonce", "single_infonce")

LOG2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    steps: int = 100_000
    batch_size: int = 50
    base_lr: float = 1e-3
    beta_horizon: int = 10_000
    objective: str = "ixyz"
    crop_size: int = 8
    seed: int = 0
    checkpoint_every: int = 500
    cache_crops: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2 or self.crop_size < 1:
            raise ValueError("steps, batch_size >= 2 and crop_size must be positive")
        if self.beta_horizon < 1:
            raise ValueError("beta_horizon must be >= 1")
        if self.beta_horizon > self.steps:
            raise ValueError(
                f"beta_horizon ({self.beta_horizon}) must not exceed steps ({self.steps})")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be nonnegative")


@dataclass
class LossReport:
    """Objective value decomposition at one step.

    ``term_informativeness`` bounds I(Z;X,Y) from below; the two compression
    terms bound I(X;Z|Y) and I(Y;Z|X) from above.  For any beta,
    total == -(term_informativeness - beta * (term_compress_x + term_compress_y)).
    """

    total: float
    term_informativeness: float
    term_compress_x: float
    term_compress_y: float
    beta: float


def beta_schedule(step, horizon=10_000):
    """Linear ramp: 0 at step 0, 1 at and after ``horizon``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= horizon:
        return 1.0
    return step / horizon


def center_crop_aligned(features, size=8):
    """Center-crop every scale of a frontend feature list to size x size.

    Crop centers coincide across scales (all extents and the target are
    even), preserving translation equivariance of the cropped stack.
    """
    out = []
    for f in features:
        h, w = f.shape[2], f.shape[3]
        if h < size or w < size:
            raise ValueError(f"feature extent {h}x{w} smaller than crop size {size}")
        oh = encoders.center_offsets(h, size)
        ow = encoders.center_offsets(w, size)
        out.append(f[:, :, oh:oh + size, ow:ow + size])
    return out


# ---------------------------------------------------------------------------
# log densities (differentiable)


def _total_dims(z_list):
    return sum(int(np.prod(z.shape[1:])) for z in z_list)


def _gauss_self_logdens(z_list, mean_list):
    """log N(z_j; mu_j, I) summed over latent dims, locations, scales -> [K]."""
    acc = None
    for z, mu in zip(z_list, mean_list):
        s = tsum(square(z - mu), axis=(1, 2, 3))
        acc = s if acc is None else acc + s
    return -0.5 * acc - 0.5 * _total_dims(z_list) * LOG2PI


def _gauss_cross_logdens(z_list, mean_list):
    """[K, K] matrix: log N(z_j; mu_i, I) over the joint latent."""
    k = z_list[0].shape[0]
    acc = None
    for z, mu in zip(z_list, mean_list):
        _, ld, h, w = z.shape
        zr = reshape(z, (k, 1, ld, h, w))
        mr = reshape(mu, (1, k, ld, h, w))
        s = tsum(square(zr - mr), axis=(2, 3, 4))
        acc = s if acc is None else acc + s
    return -0.5 * acc - 0.5 * _total_dims(z_list) * LOG2PI


def mixture_self_logdens(field, z_list):
    """log q(z_j | image_j) for the j-th sample under the j-th mixture -> [K]."""
    acc = None
    for lw, mu, z in zip(field.log_weights, field.means, z_list):
        k, c, ld, h, w = mu.shape
        zr = reshape(z, (k, 1, ld, h, w))
        sq = tsum(square(zr - mu), axis=2)              # [K, C, H, W]
        loc = logsumexp(lw + -0.5 * sq, axis=1)          # [K, H, W]
        s = tsum(loc, axis=(1, 2))
        acc = s if acc is None else acc + s
    return acc - 0.5 * _total_dims(z_list) * LOG2PI


def mixture_cross_logdens(field, z_list):
    """[K, K] matrix: log q(z_j | image_i) under mixture i."""
    k = z_list[0].shape[0]
    acc = None
    for lw, mu, z in zip(field.log_weights, field.means, z_list):
        _, c, ld, h, w = mu.shape
        zr = reshape(z, (k, 1, 1, ld, h, w))
        mr = reshape(mu, (1, k, c, ld, h, w))
        sq = tsum(square(zr - mr), axis=3)               # [K, K, C, H, W]
        lwr = reshape(lw, (1, k, c, h, w))
        loc = logsumexp(lwr + -0.5 * sq, axis=2)         # [K, K, H, W]
        s = tsum(loc, axis=(2, 3))
        acc = s if acc is None else acc + s
    return acc - 0.5 * _total_dims(z_list) * LOG2PI


def minibatch_marginal_log_density(full, z):
    """log of the minibatch marginal, (1/K) sum_i p(z | x_i, y_i), at one z.

    ``full`` holds the K conditional means per scale; ``z`` is one latent
    sample per scale, shaped [latent, H, W] or [1, latent, H, W].
    """
    if not full.means or full.means[0].shape[0] < 1:
        raise ValueError("minibatch marginal needs at least one full-encoder mean")
    k = full.means[0].shape[0]
    acc = None
    dims = 0
    for mu, zs in zip(full.means, z):
        zz = zs if isinstance(zs, Tensor) else Tensor(zs, dtype=mu.dtype)
        if zz.ndim == 3:
            zz = reshape(zz, (1,) + zz.shape)
        if zz.shape[1:] != mu.shape[1:]:
            raise ValueError(f"z shape {zz.shape} incompatible with means {mu.shape}")
        dims += int(np.prod(mu.shape[1:]))
        s = tsum(square(zz - mu), axis=(1, 2, 3))
        acc = s if acc is None else acc + s
    logdens = -0.5 * acc - 0.5 * dims * LOG2PI           # [K]
    return logsumexp(logdens, axis=0) - math.log(k)


# ---------------------------------------------------------------------------
# sampling helpers


def _draw_eps(rng, shapes, dtype=np.float32):
    return [rng.standard_normal(s).astype(dtype) for s in shapes]


def _sample_full(pfull, rng, eps=None):
    """Reparameterized draw z = mu + eps from the full encoder."""
    if eps is None:
        eps = _draw_eps(rng, [m.shape for m in pfull.means])
    return [mu + Tensor(e, dtype=mu.dtype) for mu, e in zip(pfull.means, eps)], eps


def _sample_mixture(field, rng):
    """Draw one z per location from a mixture field.

    The component index is sampled by weight (treated as a constant for the
    gradient); the Gaussian part is reparameterized through the selected
    component mean.
    """
    z_list = []
    for w, mu in zip(field.weights, field.means):
        k, c, ld, h, wd = mu.shape
        wdata = w.data
        u = rng.random((k, 1, h, wd))
        cum = np.cumsum(wdata, axis=1)
        idx = (u > cum).sum(axis=1)                      # [K, H, W] in [0, C-1]
        idx = np.minimum(idx, c - 1)
        onehot = np.zeros((k, c, 1, h, wd), dtype=mu.dtype)
        np.put_along_axis(onehot, idx[:, None, None, :, :], 1.0, axis=1)
        sel = tsum(mu * Tensor(onehot, dtype=mu.dtype), axis=1)   # [K, L, H, W]
        eps = rng.standard_normal(sel.shape).astype(np.dtype(mu.dtype))
        z_list.append(sel + Tensor(eps, dtype=mu.dtype))
    return z_list


# ---------------------------------------------------------------------------
# objectives


def _batch_features(crops_x, crops_y, params, size):
    """Run both frame batches through the frontend in one pass."""
    joint = []
    for (ax, mode_x), (ay, mode_y) in zip(crops_x, crops_y):
        assert mode_x == mode_y
        joint.append((np.concatenate([ax, ay], axis=0), mode_x))
    feats = encoders.frontend_from_crops(joint, params, size)
    k = crops_x[0][0].shape[0]
    fx = [f[:k] for f in feats]
    fy = [f[k:] for f in feats]
    return fx, fy


def _prepare_crops(batch, arch, size):
    return encoders.cropped_subbands(np.asarray(batch, dtype=np.float32), arch, size)


def ixyz_terms(qx, qy, pfull, z_list):
    """Per-pair log-density terms of the bound: (lqx, lqy, lp, lphat), each [K]."""
    lqx = mixture_self_logdens(qx, z_list)
    lqy = mixture_self_logdens(qy, z_list)
    lp = _gauss_self_logdens(z_list, pfull.means)
    cross = _gauss_cross_logdens(z_list, pfull.means)
    k = z_list[0].shape[0]
    lphat = logsumexp(cross, axis=1) - math.log(k)
    return lqx, lqy, lp, lphat


def lagrangian_loss(lqx, lqy, lp, lphat, beta):
    """Negated Lagrangian bound: mean over the batch of
    beta*log q(z|x) + beta*log q(z|y) - log phat(z) - (2*beta - 1)*log p(z|x,y)."""
    obj = tmean(beta * lqx + beta * lqy - lphat - (2.0 * beta - 1.0) * lp)
    loss = -obj
    t_i = float(tmean(lp - lphat).data)
    t_cx = float(tmean(lp - lqy).data)
    t_cy = float(tmean(lp - lqx).data)
    report = LossReport(
        total=float(loss.data),
        term_informativeness=t_i,
        term_compress_x=t_cx,
        term_compress_y=t_cy,
        beta=float(beta),
    )
    return loss, report


def ixyz_loss_from_crops(crops_x, crops_y, params, beta, rng, size=8, eps=None):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    k = crops_x[0][0].shape[0]
    if k < 2:
        raise ValueError("the minibatch marginal needs a batch of at least 2 pairs")
    fx, fy = _batch_features(crops_x, crops_y, params, size)
    qx = encoders.marginal_encode(fx, params)
    qy = encoders.marginal_encode(fy, params)
    pfull = encoders.full_encode(fx, fy, params)
    z_list, eps = _sample_full(pfull, rng, eps)
    loss, report = lagrangian_loss(*ixyz_terms(qx, qy, pfull, z_list), beta)
    if not math.isfinite(report.total):
        raise TrainingError(
            f"non-finite objective: {report} "
            f"(informativeness={report.term_informativeness}, "
            f"cx={report.term_compress_x}, cy={report.term_compress_y})")
    return loss, report


def ixyz_loss(batch_x, batch_y, params, beta, rng, crop_size=8):
    """The Lagrangian training loss over a batch of frame pairs.

    Computes frontend features for both frames, takes aligned center crops,
    full-encodes, draws one latent sample per pair, and evaluates the bound.
    Returns (scalar loss tensor, LossReport).
    """
    crops_x = _prepare_crops(batch_x, params.arch, crop_size)
    crops_y = _prepare_crops(batch_y, params.arch, crop_size)
    return ixyz_loss_from_crops(crops_x, crops_y, params, beta, rng, crop_size)


def _infonce_from_fields(q_score, z_list):
    """Negated contrastive bound: mean_j of log q(z_j|j) - log mean_i q(z_j|i)."""
    diag = mixture_self_logdens(q_score, z_list)
    cross = mixture_cross_logdens(q_score, z_list)
    k = z_list[0].shape[0]
    bound = tmean(diag - (logsumexp(cross, axis=1) - math.log(k)))
    return -bound


def infonce_loss_from_crops(crops_x, crops_y, params, rng, size=8):
    k = crops_x[0][0].shape[0]
    if k < 2:
        raise ValueError("contrastive objectives need a batch of at least 2 pairs")
    fx, fy = _batch_features(crops_x, crops_y, params, size)
    qx = encoders.marginal_encode(fx, params)
    qy = encoders.marginal_encode(fy, params)
    z_list = _sample_mixture(qx, rng)
    return _infonce_from_fields(qy, z_list)


def infonce_loss(batch_x, batch_y, params, rng, crop_size=8):
    """Contrastive ablation: z ~ q(z|x), scored against the y-encodings."""
    crops_x = _prepare_crops(batch_x, params.arch, crop_size)
    crops_y = _prepare_crops(batch_y, params.arch, crop_size)
    return infonce_loss_from_crops(crops_x, crops_y, params, rng, crop_size)


def single_infonce_loss_from_crops(crops_x, crops_y, params, rng, size=8):
    k = crops_x[0][0].shape[0]
    if k < 2:
        raise ValueError("contrastive objectives need a batch of at least 2 pairs")
    fx, _ = _batch_features(crops_x, crops_y, params, size)
    qx = encoders.marginal_encode(fx, params)
    z_list = _sample_mixture(qx, rng)
    return _infonce_from_fields(qx, z_list)


def single_infonce_loss(batch_x, batch_y, params, rng, crop_size=8):
    """Weaker ablation: z ~ q(z|x) scored against the x-encodings themselves."""
    crops_x = _prepare_crops(batch_x, params.arch, crop_size)
    crops_y = _prepare_crops(batch_y, params.arch, crop_size)
    return single_infonce_loss_from_crops(crops_x, crops_y, params, rng, crop_size)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogEntry:
    step: int
    loss: float
    beta: float
    lr: float
    term_i: float
    term_cx: float
    term_cy: float

    def format(self):
        return (f"step {self.step} loss {self.loss!r} beta {self.beta!r} lr {self.lr!r} "
                f"term_i {self.term_i!r} term_cx {self.term_cx!r} term_cy {self.term_cy!r}")

    @classmethod
    def parse(cls, line):
        tok = line.split()
        if len(tok) != 14 or tok[0] != "step":
            raise ValueError(f"malformed loss-log line: {line!r}")
        return cls(step=int(tok[1]), loss=float(tok[3]), beta=float(tok[5]),
                   lr=float(tok[7]), term_i=float(tok[9]), term_cx=float(tok[11]),
                   term_cy=float(tok[13]))


@dataclass
class TrainResult:
    params: object
    log: list
    final_checkpoint: str | None = None


def _materialize_crops(pairs, arch, size):
    cache = []
    for x, y in pairs:
        cx = encoders.cropped_subbands(np.asarray(x, dtype=np.float32)[None], arch, size)
        cy = encoders.cropped_subbands(np.asarray(y, dtype=np.float32)[None], arch, size)
        cache.append(([a[0] for a, _ in cx], [a[0] for a, _ in cy]))
    modes = [m for _, m in encoders.cropped_subbands(
        np.zeros((1, 3) + pairs[0][0].shape[1:], dtype=np.float32), arch, size)]
    return cache, modes


def _gather_crops(cache, modes, idxs, side):
    out = []
    n_scales = len(modes)
    for s in range(n_scales):
        arrs = np.stack([cache[i][side][s] for i in idxs])
        out.append((arrs, modes[s]))
    return out


def train(config, pairs, params, out_dir=None):
    """Run the configured objective with Adam and both schedules.

    ``pairs`` is a finite iterable of (frame_a, frame_b) arrays.  Emits
    checkpoints every ``checkpoint_every`` steps plus a final one, and an
    append-only loss log, into ``out_dir`` when given.  Deterministic for a
    fixed config and seed.  On a non-finite loss the run aborts, leaving the
    last good parameters in ``checkpoint_abort.pimk``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training requires at least one frame pair")
    arch = params.arch

    seq = np.random.SeedSequence(config.seed)
    child_batch, child_sample = seq.spawn(2)
    rng_batch = np.random.default_rng(child_batch)
    rng_sample = np.random.default_rng(child_sample)

    if config.cache_crops:
        cache, modes = _materialize_crops(pairs, arch, config.crop_size)
    else:
        cache, modes = None, None

    trainable = params.trainable()
    state = AdamState(trainable)
    log_entries = []
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "loss_log.txt"), "w")
        log_file.write(f"# objective {config.objective} seed {config.seed} "
                       f"batch {config.batch_size} steps {config.steps} "
                       f"crop {config.crop_size} beta_horizon {config.beta_horizon}\n")

    def emit_checkpoint(tag):
        if out_dir is None:
            return None
        path = os.path.join(out_dir, f"checkpoint_{tag}.pimk")
        save_checkpoint(path, params)
        return path

    final_path = None
    try:
        for step in range(config.steps):
            beta = beta_schedule(step, config.beta_horizon)
            lr = learning_rate(step, config.base_lr)
            idxs = rng_batch.integers(0, len(pairs), size=config.batch_size)
            if cache is not None:
                crops_x = _gather_crops(cache, modes, idxs, 0)
                crops_y = _gather_crops(cache, modes, idxs, 1)
            else:
                bx = np.stack([np.asarray(pairs[i][0], dtype=np.float32) for i in idxs])
                by = np.stack([np.asarray(pairs[i][1], dtype=np.float32) for i in idxs])
                crops_x = _prepare_crops(bx, arch, config.crop_size)
                crops_y = _prepare_crops(by, arch, config.crop_size)

            try:
                with Tape() as tape:
                    if config.objective == "ixyz":
                        loss, report = ixyz_loss_from_crops(
                            crops_x, crops_y, params, beta, rng_sample, config.crop_size)
                    elif config.objective == "infonce":
                        loss = infonce_loss_from_crops(
                            crops_x, crops_y, params, rng_sample, config.crop_size)
                        report = LossReport(float(loss.data), -float(loss.data),
                                            0.0, 0.0, beta)
                    else:
                        loss = single_infonce_loss_from_crops(
                            crops_x, crops_y, params, rng_sample, config.crop_size)
                        report = LossReport(float(loss.data), -float(loss.data),
                                            0.0, 0.0, beta)
                if not math.isfinite(report.total):
                    raise TrainingError(f"non-finite loss at step {step}: {report}")
            except (TrainingError, FloatingPointError) as e:
                emit_checkpoint("abort")
                raise TrainingError(f"aborted at step {step}: {e}") from e

            if config.base_lr > 0:
                backward(tape, loss)
                grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                         for t in trainable]
                adam_step(trainable, grads, state, lr)
                for t in trainable:
                    t.grad = None

            entry = LogEntry(step=step, loss=report.total, beta=beta, lr=lr,
                             term_i=report.term_informativeness,
                             term_cx=report.term_compress_x,
                             term_cy=report.term_compress_y)
            log_entries.append(entry)
            if log_file is not None:
                log_file.write(entry.format() + "\n")

            if (step + 1) % config.checkpoint_every == 0 and step + 1 < config.steps:
                emit_checkpoint(f"{step + 1:06d}")

        final_path = emit_checkpoint("final")
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(params=params, log=log_entries, final_checkpoint=final_path)
