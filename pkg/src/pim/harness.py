"""Quantitative experiments over eval records.

Two-alternative forced choice agreement, just-noticeable-difference mAP,
pixel-shift robustness, equivalent-Gaussian-noise calibration, Spearman rank
correlation, and an RMSE baseline used for harness self-tests.  Experiments
derive per-record metric seeds from (run seed, record index) so results do
not depend on evaluation order.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from pim import metric as metric_mod
from pim.metric import derive_seed


@dataclass
class MetricFn:
    """A named distance: fn(x, y, seed) -> nonnegative float."""

    name: str
    fn: object

    def __call__(self, x, y, seed=0):
        return float(self.fn(x, y, seed))


def baseline_rmse(x, y):
    """Root mean squared pixel difference."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image extents differ: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def rmse_metric():
    return MetricFn(name="rmse", fn=lambda x, y, seed: baseline_rmse(x, y))


def model_metric(model):
    """Wrap a loaded model as a MetricFn (pim1 when single-component)."""
    name = "pim1" if model.components == 1 else "pim"
    return MetricFn(name=name, fn=lambda x, y, seed: metric_mod.distance(x, y, model, seed=seed))


# ---------------------------------------------------------------------------
# scores


def score_2afc(records, metric, seed=0):
    """Percentage of human preference mass agreeing with the metric.

    Per triplet with human fraction h preferring img1: credit h when the
    metric prefers img1 (d1 < d0), 1-h when it prefers img0, and 0.5 on an
    exact tie.
    """
    records = [r for r in records if r.kind == "triplet"]
    if not records:
        raise ValueError("score_2afc needs at least one triplet record")
    credit = 0.0
    for i, rec in enumerate(records):
        ref, img0, img1 = rec.images
        rs = derive_seed(seed, i)
        d0 = metric(ref, img0, derive_seed(rs, 0))
        d1 = metric(ref, img1, derive_seed(rs, 1))
        if d1 < d0:
            credit += rec.h
        elif d0 < d1:
            credit += 1.0 - rec.h
        else:
            credit += 0.5
    return 100.0 * credit / len(records)


def score_jnd_map(records, metric, seed=0):
    """Average precision of same/different classification by distance.

    Pairs sorted by ascending distance (ties broken by record index);
    records flagged same=1 are the positives.
    """
    records = [r for r in records if r.kind == "pair"]
    if not records:
        raise ValueError("score_jnd_map needs at least one pair record")
    if not any(r.same == 1 for r in records):
        raise ValueError("score_jnd_map needs at least one positive (same=1) record")
    dists = []
    for i, rec in enumerate(records):
        img0, img1 = rec.images
        dists.append((metric(img0, img1, derive_seed(seed, i)), i, rec.same))
    dists.sort(key=lambda t: (t[0], t[1]))
    n_pos = sum(1 for _, _, s in dists if s == 1)
    hits = 0
    ap = 0.0
    for rank, (_, _, same) in enumerate(dists, start=1):
        if same == 1:
            hits += 1
            ap += hits / rank
    return ap / n_pos


def average_precision(distances, labels):
    """AP of ``labels`` (1 = positive) ranked by ascending ``distances``."""
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    n_pos = sum(labels)
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    hits = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            ap += hits / rank
    return ap / n_pos


# ---------------------------------------------------------------------------
# pixel shift


def shift_image(img, shift, direction):
    """Translate [3, H, W] by ``shift`` pixels with edge replication."""
    if direction not in ("left", "right", "up", "down"):
        raise ValueError(f"unknown direction {direction!r}")
    h, w = img.shape[1], img.shape[2]
    if shift >= h or shift >= w:
        raise ValueError(f"shift {shift} is not smaller than the image extent {h}x{w}")
    if shift == 0:
        return img.copy()
    if direction == "left":
        body = img[:, :, shift:]
        return np.concatenate([body, np.repeat(img[:, :, -1:], shift, axis=2)], axis=2)
    if direction == "right":
        body = img[:, :, :-shift]
        return np.concatenate([np.repeat(img[:, :, :1], shift, axis=2), body], axis=2)
    if direction == "up":
        body = img[:, shift:, :]
        return np.concatenate([body, np.repeat(img[:, -1:, :], shift, axis=1)], axis=1)
    body = img[:, :-shift, :]
    return np.concatenate([np.repeat(img[:, :1, :], shift, axis=1), body], axis=1)


_DIRECTIONS = ("left", "right", "up", "down")


def _shift_records(records, shift, seed):
    out = []
    for i, rec in enumerate(records):
        rng = np.random.default_rng(derive_seed(derive_seed(seed, 7919), i))
        direction = _DIRECTIONS[int(rng.integers(0, 4))]
        if rec.kind == "triplet":
            ref, img0, img1 = rec.images
            moved = shift_image(ref, shift, direction)
            out.append(type(rec)(kind=rec.kind, images=(moved, img0, img1), h=rec.h))
        else:
            img0, img1 = rec.images
            moved = shift_image(img0, shift, direction)
            out.append(type(rec)(kind=rec.kind, images=(moved, img1), same=rec.same))
    return out


def pixel_shift_experiment(records, metric, shifts=(1, 2, 3, 4, 5), seed=0):
    """Score deltas when the reference image is shifted by s pixels.

    The shift direction is a seeded per-record choice among the four axis
    directions; vacated pixels use edge replication.  Returns the baseline
    score and a {shift: score_delta} map (triplets are scored with 2AFC,
    pairs with JND mAP).
    """
    records = list(records)
    if not records:
        raise ValueError("pixel_shift_experiment needs records")
    kind = records[0].kind
    if any(r.kind != kind for r in records):
        raise ValueError("records must all be triplets or all pairs")
    scorer = score_2afc if kind == "triplet" else score_jnd_map
    base = scorer(records, metric, seed=seed)
    deltas = {}
    for s in shifts:
        if s == 0:
            deltas[0] = 0.0
            continue
        shifted = _shift_records(records, s, seed)
        deltas[s] = scorer(shifted, metric, seed=seed) - base
    return base, deltas


# ---------------------------------------------------------------------------
# equivalent noise


def default_sigma_grid(n=40, low=0.01, high=0.60):
    return np.linspace(low, high, n)


def add_gaussian_noise(img, sigma, rng):
    noisy = img + rng.standard_normal(img.shape).astype(np.float32) * sigma
    return np.clip(noisy, 0.0, 1.0)


def equivalent_noise(ref_images, corrupted_images, metric, sigmas=None, seed=0):
    """Gaussian-noise strength whose mean metric value matches a corruption.

    Computes the mean metric value over (ref, corrupted) pairs, then the
    mean metric value of (ref, ref + sigma noise clipped to [0, 1]) for each
    grid sigma, and returns the nearest grid point (no interpolation).
    """
    ref_images = list(ref_images)
    corrupted_images = list(corrupted_images)
    if not ref_images or len(ref_images) != len(corrupted_images):
        raise ValueError("need equally many reference and corrupted images")
    sigmas = default_sigma_grid() if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    if sigmas.size == 0:
        raise ValueError("sigma grid must be nonempty")

    target = float(np.mean([
        metric(r, c, derive_seed(seed, i))
        for i, (r, c) in enumerate(zip(ref_images, corrupted_images))]))

    curve = []
    for si, sigma in enumerate(sigmas):
        vals = []
        for i, r in enumerate(ref_images):
            rng = np.random.default_rng(derive_seed(derive_seed(seed, 104729 + si), i))
            noisy = add_gaussian_noise(r, float(sigma), rng)
            vals.append(metric(r, noisy, derive_seed(derive_seed(seed, 15485863 + si), i)))
        curve.append(float(np.mean(vals)))

    best = int(np.argmin([abs(v - target) for v in curve]))
    return float(sigmas[best]), {"target": target,
                                 "sigmas": [float(s) for s in sigmas],
                                 "curve": curve}


# ---------------------------------------------------------------------------
# rank correlation


def _average_ranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(scores_a, scores_b):
    """Pearson correlation of the rank vectors; ties get average ranks."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"score lists must be 1-D and equally long, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("score lists are empty")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("rank correlation is undefined for a constant score list")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))


# ---------------------------------------------------------------------------
# experiment report container


@dataclass
class ExperimentReport:
    kind: str
    score: float | None
    seed: int
    conditions: list = field(default_factory=list)  # (label, value) pairs
    config: dict = field(default_factory=dict)
