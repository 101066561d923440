"""Command-line entry point.

Commands: ``train``, ``distance``, ``eval {2afc|jnd|shift|noise-equiv|rankcorr}``,
``synth-data``.  Every command is reproducible from its flags, optional
``key = value`` config file, and seed; the resolved configuration is echoed
into the output directory.  Flags override config-file values; unknown
config keys are rejected.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from pim import data as data_mod
from pim import harness, metric, objective, pyramid, reports
from pim.checkpoint import CheckpointError, save_checkpoint
from pim.data import ManifestError
from pim.encoders import Architecture, init_parameters
from pim.objective import TrainingConfig, TrainingError


class ConfigError(ValueError):
    pass


_TRAIN_DEFAULTS = {
    "steps": 100_000,
    "batch_size": 50,
    "pairs": 5000,
    "objective": "ixyz",
    "pyramid": "steerable",
    "depth": 4,
    "components": 5,
    "latent": 10,
    "crop": 8,
    "beta_horizon": 0,  # 0 = min(10000, steps)
    "lr": 1e-3,
    "checkpoint_every": 500,
    "seed": 0,
    "synthetic": False,
    "frames": "",
}

_EVAL_COMMON = {"metric": "rmse", "checkpoint": "", "mc_samples": 64, "seed": 0}

_COMMAND_DEFAULTS = {
    "train": _TRAIN_DEFAULTS,
    "distance": {"checkpoint": "", "mc_samples": 64, "seed": 0},
    "eval:2afc": {**_EVAL_COMMON},
    "eval:jnd": {**_EVAL_COMMON},
    "eval:shift": {**_EVAL_COMMON, "task": "2afc", "shifts": "1,2,3,4,5"},
    "eval:noise-equiv": {**_EVAL_COMMON, "sigma_low": 0.01, "sigma_high": 0.60,
                         "sigma_count": 40},
    "eval:rankcorr": {"seed": 0},
    "synth-data": {"count": 10, "seed": 0, "kind": "all", "size": 64,
                   "distortions": "noise,blur,shift,brightness"},
}


def parse_config_file(path, allowed):
    """Parse ``key = value`` lines; keys must be known to the command."""
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in allowed:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = val
    return values


def _coerce(key, raw, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve_options(ns, command):
    """Merge defaults, config file, then explicit flags."""
    defaults = _COMMAND_DEFAULTS[command]
    resolved = dict(defaults)
    if getattr(ns, "config", None):
        file_vals = parse_config_file(ns.config, set(defaults))
        for k, v in file_vals.items():
            resolved[k] = _coerce(k, v, defaults[k])
    for k in defaults:
        v = getattr(ns, k, None)
        if v is not None:
            resolved[k] = v
    return resolved


def _echo_config(resolved, out_dir, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = dict(resolved)
    if extra:
        items.update(extra)
    with open(out / "resolved_config.txt", "w", encoding="utf-8") as f:
        for k in sorted(items):
            v = items[k]
            f.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(ns):
    opt = resolve_options(ns, "train")
    if bool(opt["synthetic"]) == bool(opt["frames"]):
        raise ConfigError("exactly one of --synthetic or --frames is required")
    beta_horizon = opt["beta_horizon"] or min(10_000, opt["steps"])
    config = TrainingConfig(
        steps=opt["steps"], batch_size=opt["batch_size"], base_lr=opt["lr"],
        beta_horizon=beta_horizon, objective=opt["objective"], crop_size=opt["crop"],
        seed=opt["seed"], checkpoint_every=opt["checkpoint_every"])
    arch = Architecture(pyramid_kind=opt["pyramid"], cnn_depth=opt["depth"],
                        components=opt["components"], latent_dim=opt["latent"])

    seq = np.random.SeedSequence(opt["seed"])
    init_child, data_child = seq.spawn(2)
    init_seed = int(init_child.generate_state(1)[0])
    data_seed = int(data_child.generate_state(1)[0])

    if opt["synthetic"]:
        pairs = list(data_mod.synth_pairs(data_seed, opt["pairs"]))
    else:
        pairs = list(data_mod.build_frame_pairs(opt["frames"], data_seed))
        if not pairs:
            raise ConfigError(f"no frame pairs found under {opt['frames']}")

    params = init_parameters(init_seed, arch)
    _echo_config(opt, ns.out, extra={"beta_horizon_resolved": beta_horizon,
                                     "n_pairs": len(pairs)})
    result = objective.train(config, pairs, params, out_dir=ns.out)
    reports.write_loss_curve(result.log, ns.out)
    print(f"trained {config.steps} steps; final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_distance(ns):
    opt = resolve_options(ns, "distance")
    if not opt["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    model = metric.PimModel.from_checkpoint(opt["checkpoint"], mc_samples=opt["mc_samples"])
    x = data_mod.read_ppm(ns.image_a)
    y = data_mod.read_ppm(ns.image_b)
    value = metric.distance(x, y, model, seed=opt["seed"])
    name = "PIM1" if model.components == 1 else "PIM"
    print(f"{name} {value!r}")
    return 0


def _load_metric(opt):
    name = opt["metric"]
    if name == "rmse":
        return harness.rmse_metric()
    if name in ("pim", "pim1"):
        if not opt["checkpoint"]:
            raise ConfigError(f"metric {name!r} requires --checkpoint")
        model = metric.PimModel.from_checkpoint(opt["checkpoint"],
                                                mc_samples=opt["mc_samples"])
        if name == "pim1" and model.components != 1:
            raise ConfigError("metric pim1 requires a single-component checkpoint")
        return harness.model_metric(model)
    raise ConfigError(f"unknown metric {name!r}")


def cmd_eval_2afc(ns):
    opt = resolve_options(ns, "eval:2afc")
    fn = _load_metric(opt)
    per_manifest = []
    pooled = []
    for m in ns.manifest:
        recs = data_mod.load_eval_records(m, "triplet")
        per_manifest.append((Path(m).name, harness.score_2afc(recs, fn, seed=opt["seed"])))
        pooled.extend(recs)
    score = harness.score_2afc(pooled, fn, seed=opt["seed"])
    rep = harness.ExperimentReport(kind="2afc", score=score, seed=opt["seed"],
                                   conditions=per_manifest,
                                   config={"metric": fn.name, "manifests": len(ns.manifest)})
    reports.write_report(rep, ns.out)
    _echo_config(opt, ns.out)
    print(f"2afc {score!r}")
    return 0


def cmd_eval_jnd(ns):
    opt = resolve_options(ns, "eval:jnd")
    fn = _load_metric(opt)
    aps = []
    for m in ns.manifest:
        recs = data_mod.load_eval_records(m, "pair")
        aps.append((Path(m).name, harness.score_jnd_map(recs, fn, seed=opt["seed"])))
    score = float(np.mean([v for _, v in aps]))
    rep = harness.ExperimentReport(kind="jnd", score=score, seed=opt["seed"],
                                   conditions=aps,
                                   config={"metric": fn.name, "manifests": len(ns.manifest)})
    reports.write_report(rep, ns.out)
    _echo_config(opt, ns.out)
    print(f"jnd_map {score!r}")
    return 0


def cmd_eval_shift(ns):
    opt = resolve_options(ns, "eval:shift")
    fn = _load_metric(opt)
    kind = "triplet" if opt["task"] == "2afc" else "pair"
    recs = []
    for m in ns.manifest:
        recs.extend(data_mod.load_eval_records(m, kind))
    shifts = [int(s) for s in str(opt["shifts"]).split(",") if s.strip()]
    base, deltas = harness.pixel_shift_experiment(recs, fn, shifts=shifts, seed=opt["seed"])
    conditions = [(f"shift_{s}", deltas[s]) for s in shifts]
    rep = harness.ExperimentReport(kind="shift", score=base, seed=opt["seed"],
                                   conditions=conditions,
                                   config={"metric": fn.name, "task": opt["task"]})
    reports.write_report(rep, ns.out)
    _echo_config(opt, ns.out)
    for s in shifts:
        print(f"shift {s} delta {deltas[s]!r}")
    return 0


def cmd_eval_noise_equiv(ns):
    opt = resolve_options(ns, "eval:noise-equiv")
    fn = _load_metric(opt)
    refs, corrupted = [], []
    base = Path(ns.images).parent
    with open(ns.images, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ManifestError(f"{ns.images}:{lineno}: expected 'ref corrupted'")
            refs.append(data_mod.read_ppm(base / tok[0]))
            corrupted.append(data_mod.read_ppm(base / tok[1]))
    sigmas = np.linspace(opt["sigma_low"], opt["sigma_high"], opt["sigma_count"])
    sigma, detail = harness.equivalent_noise(refs, corrupted, fn, sigmas=sigmas,
                                             seed=opt["seed"])
    conditions = [(f"sigma_{s:.4f}", v) for s, v in zip(detail["sigmas"], detail["curve"])]
    rep = harness.ExperimentReport(kind="noise_equiv", score=sigma, seed=opt["seed"],
                                   conditions=conditions,
                                   config={"metric": fn.name, "target": detail["target"]})
    reports.write_report(rep, ns.out)
    _echo_config(opt, ns.out)
    print(f"equivalent_sigma {sigma!r}")
    return 0


def _read_scores(path):
    vals = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line.split()[-1]))
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: cannot parse score {line!r}") from None
    return vals


def cmd_eval_rankcorr(ns):
    opt = resolve_options(ns, "eval:rankcorr")
    a = _read_scores(ns.scores_a)
    b = _read_scores(ns.scores_b)
    rho = harness.spearman_rho(a, b)
    rep = harness.ExperimentReport(kind="rankcorr", score=rho, seed=opt["seed"],
                                   conditions=[("n", len(a))],
                                   config={"scores_a": Path(ns.scores_a).name,
                                           "scores_b": Path(ns.scores_b).name})
    reports.write_report(rep, ns.out)
    _echo_config(opt, ns.out)
    print(f"spearman_rho {rho!r}")
    return 0


# ---------------------------------------------------------------------------
# synthetic data materialization


_NOISE_LEVELS = [0.02, 0.05, 0.10, 0.20, 0.35]


def _distort(img, kind, level, rng):
    if kind == "noise":
        return harness.add_gaussian_noise(img, _NOISE_LEVELS[level - 1], rng)
    if kind == "blur":
        out = img
        for _ in range(level):
            out = pyramid.blur(out)
        return np.clip(out, 0.0, 1.0)
    if kind == "shift":
        direction = harness._DIRECTIONS[int(rng.integers(0, 4))]
        return harness.shift_image(img, level, direction)
    if kind == "brightness":
        gain = 1.0 + 0.05 * level
        return np.clip(img * gain, 0.0, 1.0)
    raise ValueError(f"unknown distortion {kind!r}")


_DISTORTIONS = ("noise", "blur", "shift", "brightness")


def _write_synth_pairs(out, count, seed, size):
    root = Path(out) / "pairs"
    root.mkdir(parents=True, exist_ok=True)
    pairs = data_mod.synth_pairs(seed, count, data_mod.SynthConfig(size=size))
    for i, pair in enumerate(pairs):
        seg = root / f"seg_{i:04d}"
        seg.mkdir(exist_ok=True)
        data_mod.write_ppm(pair.frame_a, seg / "frame_0000.ppm")
        data_mod.write_ppm(pair.frame_b, seg / "frame_0001.ppm")
    return root


def _write_synth_triplets(out, count, seed, size, distortions=_DISTORTIONS):
    root = Path(out) / "triplets"
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(metric.derive_seed(seed, 1))
    entries = []
    for i in range(count):
        scene = data_mod.make_scene(rng, size)
        kind = distortions[int(rng.integers(0, len(distortions)))]
        l0, l1 = rng.choice(np.arange(1, 6), size=2, replace=False)
        img0 = _distort(scene, kind, int(l0), rng)
        img1 = _distort(scene, kind, int(l1), rng)
        # graded human fraction preferring img1, from the strength gap
        h = float(1.0 / (1.0 + np.exp(-(float(l0) - float(l1)))))
        names = (f"t{i:04d}_ref.ppm", f"t{i:04d}_a.ppm", f"t{i:04d}_b.ppm")
        data_mod.write_ppm(scene, root / names[0])
        data_mod.write_ppm(img0, root / names[1])
        data_mod.write_ppm(img1, root / names[2])
        entries.append((names[0], names[1], names[2], h))
    manifest = root / "manifest.txt"
    data_mod.write_triplet_manifest(manifest, entries)
    return manifest


def _write_synth_jnd(out, count, seed, size, distortions=_DISTORTIONS):
    root = Path(out) / "jnd"
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(metric.derive_seed(seed, 2))
    entries = []
    for i in range(count):
        scene = data_mod.make_scene(rng, size)
        same = 1 if i % 2 == 0 else 0
        if same:
            other = harness.add_gaussian_noise(scene, 0.004, rng)
        else:
            kind = distortions[int(rng.integers(0, len(distortions)))]
            level = int(rng.integers(2, 6))
            other = _distort(scene, kind, level, rng)
        names = (f"p{i:04d}_a.ppm", f"p{i:04d}_b.ppm")
        data_mod.write_ppm(scene, root / names[0])
        data_mod.write_ppm(other, root / names[1])
        entries.append((names[0], names[1], same))
    manifest = root / "manifest.txt"
    data_mod.write_pair_manifest(manifest, entries)
    return manifest


def cmd_synth_data(ns):
    opt = resolve_options(ns, "synth-data")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = tuple(s.strip() for s in str(opt["distortions"]).split(",") if s.strip())
    for k in kinds:
        if k not in _DISTORTIONS:
            raise ConfigError(f"unknown distortion {k!r} (choose from {_DISTORTIONS})")
    made = []
    if opt["kind"] in ("pairs", "all"):
        made.append(str(_write_synth_pairs(out, opt["count"], opt["seed"], opt["size"])))
    if opt["kind"] in ("triplets", "all"):
        made.append(str(_write_synth_triplets(out, opt["count"], opt["seed"], opt["size"],
                                              distortions=kinds)))
    if opt["kind"] in ("jnd", "all"):
        made.append(str(_write_synth_jnd(out, opt["count"], opt["seed"], opt["size"],
                                         distortions=kinds)))
    if not made:
        raise ConfigError(f"unknown synth-data kind {opt['kind']!r}")
    _echo_config(opt, ns.out)
    for m in made:
        print(f"wrote {m}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="pim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--synthetic", action="store_true", default=None)
    t.add_argument("--frames")
    t.add_argument("--pairs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--objective", choices=objective.OBJECTIVES)
    t.add_argument("--pyramid", choices=("steerable", "laplacian"))
    t.add_argument("--depth", type=int)
    t.add_argument("--components", type=int)
    t.add_argument("--latent", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--beta-horizon", dest="beta_horizon", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distance", help="distance between two PPM images")
    d.add_argument("image_a")
    d.add_argument("image_b")
    d.add_argument("--checkpoint")
    d.add_argument("--config")
    d.add_argument("--mc-samples", dest="mc_samples", type=int)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distance)

    e = sub.add_parser("eval", help="run an experiment")
    esub = e.add_subparsers(dest="experiment", required=True)

    def common_eval(sp, manifests=True):
        sp.add_argument("--out", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        if manifests:
            sp.add_argument("--manifest", action="append", required=True)
            sp.add_argument("--metric", choices=("rmse", "pim", "pim1"))
            sp.add_argument("--checkpoint")
            sp.add_argument("--mc-samples", dest="mc_samples", type=int)

    s2 = esub.add_parser("2afc")
    common_eval(s2)
    s2.set_defaults(func=cmd_eval_2afc)

    sj = esub.add_parser("jnd")
    common_eval(sj)
    sj.set_defaults(func=cmd_eval_jnd)

    ss = esub.add_parser("shift")
    common_eval(ss)
    ss.add_argument("--task", choices=("2afc", "jnd"))
    ss.add_argument("--shifts")
    ss.set_defaults(func=cmd_eval_shift)

    sn = esub.add_parser("noise-equiv")
    sn.add_argument("--out", required=True)
    sn.add_argument("--config")
    sn.add_argument("--seed", type=int)
    sn.add_argument("--images", required=True,
                    help="file of 'ref.ppm corrupted.ppm' lines")
    sn.add_argument("--metric", choices=("rmse", "pim", "pim1"))
    sn.add_argument("--checkpoint")
    sn.add_argument("--mc-samples", dest="mc_samples", type=int)
    sn.add_argument("--sigma-low", dest="sigma_low", type=float)
    sn.add_argument("--sigma-high", dest="sigma_high", type=float)
    sn.add_argument("--sigma-count", dest="sigma_count", type=int)
    sn.set_defaults(func=cmd_eval_noise_equiv)

    sr = esub.add_parser("rankcorr")
    sr.add_argument("--out", required=True)
    sr.add_argument("--config")
    sr.add_argument("--seed", type=int)
    sr.add_argument("--scores-a", dest="scores_a", required=True)
    sr.add_argument("--scores-b", dest="scores_b", required=True)
    sr.set_defaults(func=cmd_eval_rankcorr)

    g = sub.add_parser("synth-data", help="materialize synthetic data and manifests")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--kind", choices=("pairs", "triplets", "jnd", "all"))
    g.add_argument("--size", type=int)
    g.add_argument("--distortions", help="comma list: noise,blur,shift,brightness")
    g.set_defaults(func=cmd_synth_data)

    return p


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except (ConfigError, ManifestError, CheckpointError, TrainingError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
