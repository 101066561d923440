"""Frame-pair construction, synthetic scenes, manifests and PPM I/O.

Real data enters as directories of pre-extracted frames
(``<root>/<segment_id>/frame_0000.ppm`` ...); each segment is downsampled to
a randomized height, split into non-overlapping neighboring-frame pairs, and
a colocated 64x64 patch is cropped from each pair.  A procedural generator
provides desk-scale stand-in pairs with the same contract: persistent scene
content plus small shifts, brightness jitter and sensor noise.
"""

import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

PATCH = 64


class FramePair(NamedTuple):
    frame_a: np.ndarray  # [3, 64, 64] in [0, 1]
    frame_b: np.ndarray


@dataclass
class EvalRecord:
    """One harness record: a triplet (reference, two candidates, human
    fraction preferring the second) or a pair with a same/different flag."""

    kind: str                 # "triplet" | "pair"
    images: tuple             # (ref, img0, img1) or (img0, img1)
    h: float | None = None    # triplet only
    same: int | None = None   # pair only


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM (binary P6, 8-bit)


def read_ppm(path):
    """Read a binary 8-bit P6 file into a [3, H, W] float array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PPM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise ValueError(f"{path}: truncated PPM payload "
                         f"({len(payload)} of {3 * w * h} bytes)")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0


def write_ppm(image, path):
    """Write a [3, H, W] array in [0, 1] as binary 8-bit P6."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1], q.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# resampling and crops


def resample_box(image, out_h, out_w):
    """Area-average resampling of [C, H, W] to [C, out_h, out_w].

    Each output cell averages the input region it covers, with fractional
    edge pixels weighted by overlap; a proper low-pass for downscaling.
    """
    c, h, w = image.shape
    return _resample_axis(_resample_axis(image, out_h, axis=1), out_w, axis=2)


def _resample_axis(x, out_n, axis):
    n = x.shape[axis]
    if out_n == n:
        return x
    scale = n / out_n
    weights = np.zeros((out_n, n), dtype=np.float64)
    for i in range(out_n):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                weights[i, j] = overlap / scale
    moved = np.moveaxis(x, axis, -1)
    out = moved @ weights.T
    return np.moveaxis(out, -1, axis).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# real frame-pair pipeline


@dataclass
class FramePairConfig:
    min_height: int = 128
    max_height: int = 160
    patch: int = PATCH
    shuffle_buffer: int = 1000


_FRAME_RE = re.compile(r"frame_(\d+)\.ppm$")


def _segment_frames(seg_dir):
    frames = []
    for p in sorted(seg_dir.iterdir()):
        m = _FRAME_RE.search(p.name)
        if m:
            frames.append((int(m.group(1)), p))
    return [p for _, p in sorted(frames)]


def _shuffled(stream, buffer_size, rng):
    """Running-buffer shuffle: bounded memory, permutes order only."""
    buf = []
    for item in stream:
        if len(buf) < buffer_size:
            buf.append(item)
            continue
        j = int(rng.integers(0, len(buf)))
        out, buf[j] = buf[j], item
        yield out
    while buf:
        j = int(rng.integers(0, len(buf)))
        yield buf.pop(j)


def build_frame_pairs(frames_dir, seed, config=None):
    """Stream colocated 64x64 frame pairs from per-segment frame directories.

    Per segment: downsample to a random height in [min_height, max_height]
    (aspect preserved, area averaging), pair consecutive frames without
    overlap, crop one random colocated patch per pair, shuffle through a
    bounded running buffer.
    """
    config = config or FramePairConfig()
    root = Path(frames_dir)
    if not root.is_dir():
        raise ValueError(f"{frames_dir}: not a directory")
    rng = np.random.default_rng(seed)

    def raw_pairs():
        for seg in sorted(p for p in root.iterdir() if p.is_dir()):
            paths = _segment_frames(seg)
            frames = []
            for p in paths:
                try:
                    frames.append(read_ppm(p))
                except (OSError, ValueError) as e:
                    warnings.warn(f"skipping unreadable frame {p}: {e}", stacklevel=2)
            if len(frames) < 2:
                continue
            h, w = frames[0].shape[1], frames[0].shape[2]
            target_h = int(rng.integers(config.min_height, config.max_height + 1))
            target_h = min(target_h, h)
            target_w = max(config.patch, round(w * target_h / h))
            target_h = max(config.patch, target_h)
            small = [resample_box(f, target_h, target_w) for f in frames]
            for i in range(0, len(small) - 1, 2):
                a, b = small[i], small[i + 1]
                oy = int(rng.integers(0, target_h - config.patch + 1))
                ox = int(rng.integers(0, target_w - config.patch + 1))
                pa = np.clip(a[:, oy:oy + config.patch, ox:ox + config.patch], 0.0, 1.0)
                pb = np.clip(b[:, oy:oy + config.patch, ox:ox + config.patch], 0.0, 1.0)
                yield FramePair(np.ascontiguousarray(pa), np.ascontiguousarray(pb))

    return _shuffled(raw_pairs(), config.shuffle_buffer, rng)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    size: int = PATCH
    max_shift: int = 2
    noise_sigma: float = 0.02
    brightness_jitter: float = 0.05
    octaves: int = 4
    n_shapes_max: int = 7


def _octave_noise(rng, size, octaves, dtype=np.float32):
    """Sum of upsampled white-noise grids, coarse octaves weighted heavier."""
    out = np.zeros((3, size, size), dtype=np.float64)
    for k in range(octaves):
        step = 2 ** (octaves - 1 - k)
        g = max(2, -(-size // step))
        grid = rng.standard_normal((3, g, g))
        up = np.repeat(np.repeat(grid, step, axis=1), step, axis=2)[:, :size, :size]
        out += up * (0.5 ** k)
    out /= np.abs(out).max() + 1e-9
    return out.astype(dtype)


def _add_shapes(canvas, rng, n_max):
    s = canvas.shape[1]
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(2, n_max + 1))):
        color = rng.random(3)
        cy, cx = rng.integers(0, s, size=2)
        r = int(rng.integers(s // 16, s // 4))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        alpha = 0.4 + 0.6 * rng.random()
        canvas[:, mask] = (1 - alpha) * canvas[:, mask] + alpha * color[:, None]
    return canvas


def make_scene(rng, size, config=None):
    """One procedural scene in [0, 1]: filtered noise plus opaque shapes."""
    config = config or SynthConfig(size=size)
    base = 0.5 + 0.25 * _octave_noise(rng, size, config.octaves)
    base = _add_shapes(base, rng, config.n_shapes_max)
    return np.clip(base, 0.0, 1.0).astype(np.float32)


def synth_pairs(seed, n, config=None):
    """Deterministic stream of n synthetic frame pairs.

    The second frame is the first under a small random shift (at most
    ``max_shift`` pixels per axis), a brightness jitter, and independent
    sensor noise on both frames; scene content persists across the pair.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or SynthConfig()
    rng = np.random.default_rng(seed)
    m = config.max_shift
    canvas_size = config.size + 2 * m

    def gen():
        for _ in range(n):
            scene = make_scene(rng, canvas_size, config)
            dy, dx = rng.integers(-m, m + 1, size=2)
            a = scene[:, m:m + config.size, m:m + config.size]
            b = scene[:, m + dy:m + dy + config.size, m + dx:m + dx + config.size]
            gain = 1.0 + config.brightness_jitter * (2.0 * rng.random() - 1.0)
            bias = 0.5 * config.brightness_jitter * (2.0 * rng.random() - 1.0)
            na = rng.standard_normal(a.shape).astype(np.float32) * config.noise_sigma
            nb = rng.standard_normal(b.shape).astype(np.float32) * config.noise_sigma
            fa = np.clip(a + na, 0.0, 1.0)
            fb = np.clip(b * gain + bias + nb, 0.0, 1.0)
            yield FramePair(np.ascontiguousarray(fa), np.ascontiguousarray(fb))

    return gen()


# ---------------------------------------------------------------------------
# manifests


def load_eval_records(path, kind):
    """Load and validate a triplet or pair manifest.

    Triplet lines: ``ref.ppm img0.ppm img1.ppm h`` with h in [0, 1].
    Pair lines: ``img0.ppm img1.ppm same={0|1}``.
    Paths resolve relative to the manifest.
    """
    if kind not in ("triplet", "pair"):
        raise ValueError(f"kind must be 'triplet' or 'pair', got {kind!r}")
    path = Path(path)
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            where = f"{path}:{lineno}"
            if kind == "triplet":
                if len(tok) != 4:
                    raise ManifestError(f"{where}: expected 4 fields, got {len(tok)}")
                try:
                    h = float(tok[3])
                except ValueError:
                    raise ManifestError(f"{where}: bad human fraction {tok[3]!r}") from None
                if not 0.0 <= h <= 1.0:
                    raise ManifestError(f"{where}: human fraction {h} outside [0, 1]")
                imgs = tuple(_load_record_image(base / t, where) for t in tok[:3])
                if imgs[0].shape != imgs[1].shape or imgs[0].shape != imgs[2].shape:
                    raise ManifestError(f"{where}: image extents differ within the record")
                records.append(EvalRecord(kind="triplet", images=imgs, h=h))
            else:
                if len(tok) != 3:
                    raise ManifestError(f"{where}: expected 3 fields, got {len(tok)}")
                m = re.fullmatch(r"same=([01])", tok[2])
                if not m:
                    raise ManifestError(f"{where}: expected same=0 or same=1, got {tok[2]!r}")
                imgs = tuple(_load_record_image(base / t, where) for t in tok[:2])
                if imgs[0].shape != imgs[1].shape:
                    raise ManifestError(f"{where}: image extents differ within the record")
                records.append(EvalRecord(kind="pair", images=imgs, same=int(m.group(1))))
    return records


def _load_record_image(p, where):
    try:
        return read_ppm(p)
    except (OSError, ValueError) as e:
        raise ManifestError(f"{where}: cannot load image {p}: {e}") from e


def write_triplet_manifest(path, entries):
    """Write ``ref img0 img1 h`` lines; paths are written as given."""
    with open(path, "w", encoding="utf-8") as f:
        for ref, img0, img1, h in entries:
            f.write(f"{ref} {img0} {img1} {h!r}\n")


def write_pair_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for img0, img1, same in entries:
            f.write(f"{img0} {img1} same={int(same)}\n")
