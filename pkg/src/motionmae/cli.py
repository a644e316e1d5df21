"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, reconstruct, gradcheck, ablate.
All behavior is driven by a strict JSON config (unknown keys are errors);
every default is visible in `motionmae --help`. One config seed feeds the
whole pipeline through a fixed fan-out: data uses seed+1, masks seed+2,
parameter init seed+3.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error,
4 numerical error.

Heavy imports happen inside the handlers so the MOTIONMAE_THREADS cap
(default 1) is in place before the numerics stack loads.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

GRADCHECK_TOLERANCE = 1e-4


class ConfigError(Exception):
    """A run configuration is malformed; the message names the field."""


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "run_out",
    "data": {
        "dir": None,
        "val_dir": None,
        "num_clips": 64,
        "T": 8,
        "H": 16,
        "W": 16,
        "channels": 1,
        "min_speed": 1,
        "max_speed": 3,
        "stride": 1,
        "crop": False,
        "crop_scale": [0.5, 1.0],
        "flip": False,
    },
    "mask": {"ratio": 0.75, "strategy": "random"},
    "targets": {"kind": "both", "gap": 1, "normalize": False, "lambda": 1.0},
    "model": {
        "preset": "tiny",
        "arch": "parallel",
        "cube_t": 2,
        "cube_p": 4,
        "enc_depth": None,
        "enc_dim": None,
        "enc_heads": None,
        "enc_mlp": None,
        "dec_depth": None,
        "dec_dim": None,
        "dec_heads": None,
        "dec_mlp": None,
    },
    "train": {
        "lr": 1.5e-4,
        "beta1": 0.9,
        "beta2": 0.95,
        "eps": 1e-8,
        "weight_decay": 0.05,
        "warmup_steps": 10,
        "total_steps": 200,
        "batch_size": 8,
        "loss_kind": "mse",
        "precision": "single",
        "log_interval": 10,
        "checkpoint_interval": 0,
        "finetune_steps": None,
        "finetune_lr": None,
    },
    "ablate": {
        "gap": [1, 2, 4],
        "ratio": [0.75, 0.9],
        "decoder": ["parallel", "shared"],
    },
}


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _check_leaf(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return value
    raise ConfigError(f"{path} has unsupported type")


def _merge_strict(defaults: dict, user: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be an object")
            out[key] = _merge_strict(defaults[key], value, f"{path}.")
        else:
            out[key] = _check_leaf(path, defaults[key], value)
    return out


def _validate(cfg: dict) -> None:
    mask, tgt, model, train, data = (cfg["mask"], cfg["targets"], cfg["model"],
                                     cfg["train"], cfg["data"])
    if not 0.0 <= mask["ratio"] < 1.0:
        raise ConfigError("mask.ratio must lie in [0, 1)")
    if mask["strategy"] not in ("random", "tube", "time_only"):
        raise ConfigError(f"mask.strategy {mask['strategy']!r} is not one of "
                          "random, tube, time_only")
    if tgt["kind"] not in ("frame", "motion", "both"):
        raise ConfigError(f"targets.kind {tgt['kind']!r} is not one of "
                          "frame, motion, both")
    if tgt["gap"] < 1:
        raise ConfigError("targets.gap must be >= 1")
    if tgt["lambda"] < 0:
        raise ConfigError("targets.lambda must be >= 0")
    if train["loss_kind"] not in ("mse", "l1", "smooth_l1"):
        raise ConfigError(f"train.loss_kind {train['loss_kind']!r} is not one "
                          "of mse, l1, smooth_l1")
    if train["precision"] not in ("single", "double"):
        raise ConfigError("train.precision must be 'single' or 'double'")
    if train["warmup_steps"] > train["total_steps"]:
        raise ConfigError("train.warmup_steps must not exceed train.total_steps")
    if train["batch_size"] < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if model["arch"] not in ("parallel", "shared"):
        raise ConfigError("model.arch must be 'parallel' or 'shared'")
    if model["preset"] is not None and model["preset"] not in ("tiny", "desk", "base"):
        raise ConfigError(f"model.preset {model['preset']!r} is not one of "
                          "tiny, desk, base")
    if model["preset"] is None:
        for key in ("enc_depth", "enc_dim", "enc_heads", "enc_mlp",
                    "dec_depth", "dec_dim", "dec_heads", "dec_mlp"):
            if model[key] is None:
                raise ConfigError(f"model.{key} is required when model.preset is null")
        if model["enc_depth"] < 1 or model["dec_depth"] < 1:
            raise ConfigError("model depths must be >= 1")
    if model["cube_t"] < 1 or model["cube_p"] < 1:
        raise ConfigError("model cube dims must be >= 1")
    for key in ("T", "H", "W", "channels", "num_clips"):
        if data[key] < 1:
            raise ConfigError(f"data.{key} must be >= 1")
    if data["stride"] < 1:
        raise ConfigError("data.stride must be >= 1")
    if not (1 <= data["min_speed"] <= data["max_speed"]):
        raise ConfigError("data speeds must satisfy 1 <= min_speed <= max_speed")
    lo, hi = data["crop_scale"]
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigError("data.crop_scale must satisfy 0 < lo <= hi <= 1")


def load_config(path: str | None) -> dict:
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge_strict(DEFAULT_CONFIG, user)
    _validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Config -> concrete objects
# ---------------------------------------------------------------------------


def _build_grid(cfg: dict):
    from .tokenizer import TokenGrid

    data, model = cfg["data"], cfg["model"]
    ct, cp = model["cube_t"], model["cube_p"]
    T, H, W, C = data["T"], data["H"], data["W"], data["channels"]
    if T % ct or H % cp or W % cp:
        raise ConfigError(f"clip dims {T}x{H}x{W} not divisible by cube "
                          f"{ct}x{cp}x{cp}")
    return TokenGrid(T // ct, H // cp, W // cp, ct, cp, C)


def _build_model_cfgs(cfg: dict, grid):
    from .model import DecoderConfig, EncoderConfig, preset_configs

    model = cfg["model"]
    if model["preset"] is not None:
        return preset_configs(model["preset"], grid, arch=model["arch"])
    enc = EncoderConfig(depth=model["enc_depth"], embed_dim=model["enc_dim"],
                        heads=model["enc_heads"], mlp_ratio=model["enc_mlp"],
                        token_dim=grid.token_dim)
    dec = DecoderConfig(depth=model["dec_depth"], embed_dim=model["dec_dim"],
                        heads=model["dec_heads"], mlp_ratio=model["dec_mlp"],
                        space_dim=grid.token_dim, time_dim=grid.motion_dim,
                        arch=model["arch"])
    return enc, dec


def _build_train_cfg(cfg: dict, finetune: bool = False):
    from .training import TrainConfig

    t, m, g = cfg["train"], cfg["mask"], cfg["targets"]
    steps = t["total_steps"]
    lr = t["lr"]
    if finetune:
        steps = t["finetune_steps"] if t["finetune_steps"] is not None else steps
        lr = t["finetune_lr"] if t["finetune_lr"] is not None else lr
    warmup = min(t["warmup_steps"], steps)
    return TrainConfig(
        lr=lr, beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
        weight_decay=t["weight_decay"], warmup_steps=warmup,
        total_steps=steps, batch_size=t["batch_size"],
        target_kind=g["kind"], lam=g["lambda"], loss_kind=t["loss_kind"],
        mask_ratio=m["ratio"], mask_strategy=m["strategy"], gap=g["gap"],
        normalize_space=g["normalize"], seed=cfg["seed"],
        precision=t["precision"], log_interval=t["log_interval"],
        checkpoint_interval=t["checkpoint_interval"],
    )


def _load_dataset(root, cfg: dict):
    """Read clips and integer labels from a dataset directory."""
    from .videodata import DIRECTIONS, load_dataset_clip, read_labels

    if root is None:
        raise ConfigError("data.dir must point to a dataset directory")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    clips, labels = [], []
    for clip_id, label in read_labels(root):
        if label not in DIRECTIONS:
            raise ConfigError(f"dataset label {label!r} is not a direction class")
        clips.append(load_dataset_clip(root, clip_id))
        labels.append(DIRECTIONS.index(label))
    if not clips:
        raise ConfigError(f"dataset at {root} is empty")
    want = (cfg["data"]["T"], cfg["data"]["H"], cfg["data"]["W"], cfg["data"]["channels"])
    if clips[0].shape != want:
        raise ConfigError(f"dataset clips have shape {clips[0].shape}, config "
                          f"says {want}")
    return clips, labels


def _make_augment(cfg: dict):
    data = cfg["data"]
    if not (data["crop"] or data["flip"]):
        return None
    import numpy as np

    from .training import derive_seed
    from .videodata import hflip, random_resized_crop

    scale = tuple(data["crop_scale"])
    h, w = data["H"], data["W"]
    base = cfg["seed"] + 1

    def augment(clip, step, j):
        rng = np.random.default_rng(derive_seed(base, step, j))
        if data["crop"]:
            clip = random_resized_crop(clip, scale, h, w,
                                       seed=int(rng.integers(2 ** 31)))
        if data["flip"] and rng.uniform() < 0.5:
            clip = hflip(clip)
        return clip

    return augment


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    from .videodata import generate_dataset

    out = args.out if args.out else cfg["data"]["dir"]
    if out is None:
        raise ConfigError("pass --out or set data.dir")
    count = args.count if args.count is not None else cfg["data"]["num_clips"]
    if count < 1:
        raise ConfigError("--count must be >= 1")
    data = cfg["data"]
    entries = generate_dataset(
        out, count, data["T"], data["H"], data["W"], seed=cfg["seed"] + 1,
        channels=data["channels"], min_speed=data["min_speed"],
        max_speed=data["max_speed"])
    print(f"wrote {len(entries)} clips to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    from .training import run_pretrain

    clips, _ = _load_dataset(cfg["data"]["dir"], cfg)
    grid = _build_grid(cfg)
    enc, dec = _build_model_cfgs(cfg, grid)
    train_cfg = _build_train_cfg(cfg)
    out_dir = Path(cfg["out_dir"])
    run_pretrain(clips, grid, enc, dec, train_cfg, out_dir,
                 augment=_make_augment(cfg))
    last = (out_dir / "loss.csv").read_text().strip().splitlines()[-1]
    print(f"final_loss={last.split(',')[1]}")
    print(f"checkpoint={out_dir / 'checkpoint_final.mmck'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    from .evalviz import metrics_report
    from .model import classify
    from .training import run_finetune
    from .videodata import DIRECTIONS

    train_clips, train_labels = _load_dataset(cfg["data"]["dir"], cfg)
    val_dir = cfg["data"]["val_dir"] or cfg["data"]["dir"]
    val_clips, val_labels = _load_dataset(val_dir, cfg)
    grid = _build_grid(cfg)
    enc, _ = _build_model_cfgs(cfg, grid)
    train_cfg = _build_train_cfg(cfg, finetune=True)
    init_from = None if args.init in (None, "none") else args.init

    report, params = run_finetune(train_clips, train_labels, val_clips,
                                  val_labels, grid, enc, train_cfg,
                                  num_classes=len(DIRECTIONS),
                                  init_from=init_from)
    logits = [classify(c, grid, enc, params, len(DIRECTIONS)).data[0]
              for c in val_clips]
    out = metrics_report(logits, val_labels)
    out["train_top1"] = report["train_top1"]
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out))
    return 0


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    import numpy as np

    from .evalviz import render_reconstruction
    from .model import forward_pretrain, init_params
    from .tokenizer import sample_mask
    from .training import load_checkpoint, params_from_arrays
    from .videodata import SyntheticSpec, generate_moving_square

    try:
        ratios = [float(r) for r in args.ratio.split(",") if r]
    except ValueError as e:
        raise ConfigError(f"--ratio must be a comma-separated float list: {e}") from e
    if not ratios:
        raise ConfigError("--ratio list is empty")
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ConfigError(f"reconstruction ratio {r} must lie in [0, 1)")

    data = cfg["data"]
    if data["dir"] is not None:
        clips, _ = _load_dataset(data["dir"], cfg)
        clip = clips[0]
    else:
        rng = np.random.default_rng(cfg["seed"] + 1)
        side = min(data["H"], data["W"])
        spec = SyntheticSpec(object_size=max(2, side // 3), velocity=(1, 0),
                             background_level=0.1, object_level=0.9, label="right")
        clip, _ = generate_moving_square(spec, data["T"], data["H"], data["W"],
                                         seed=int(rng.integers(2 ** 31)),
                                         channels=data["channels"])
    grid = _build_grid(cfg)
    enc, dec = _build_model_cfgs(cfg, grid)
    kind = cfg["targets"]["kind"]
    if args.init in (None, "none"):
        params = init_params(enc, dec, seed=cfg["seed"] + 3, target_kind=kind)
    else:
        arrays, _, _ = load_checkpoint(args.init)
        params = params_from_arrays(arrays)

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in ratios:
        mask = sample_mask(grid, r, cfg["mask"]["strategy"], seed=cfg["seed"] + 2)
        ps, pt = forward_pretrain(clip, mask, grid, enc, dec, params, kind)
        path = out_dir / f"recon_{int(round(r * 100)):02d}.ppm"
        render_reconstruction(clip, mask,
                              None if ps is None else ps.data,
                              None if pt is None else pt.data, grid, path)
        print(f"wrote {path}")
    return 0


def _primitive_checks():
    """Yield (name, runner) pairs; each runner returns a max relative error."""
    import numpy as np

    from . import numerics as nm

    rng = np.random.default_rng(7)

    def check(op_name, build, *shapes):
        xs = [nm.Tensor(rng.uniform(-0.9, 0.9, s)) for s in shapes]

        def runner():
            return nm.finite_diff_check(build, xs)

        return op_name, runner

    def unary(fn):
        return lambda t: nm.sum_all(fn(t[0]))

    yield check("add", lambda t: nm.sum_all(nm.add(t[0], t[1])), (3, 4), (3, 4))
    yield check("sub", lambda t: nm.sum_all(nm.sub(t[0], t[1])), (3, 4), (3, 4))
    yield check("mul", lambda t: nm.sum_all(nm.mul(t[0], t[1])), (3, 4), (3, 4))
    yield check("neg", unary(nm.neg), (3, 4))
    yield check("scale", unary(lambda x: nm.scale(x, 1.7)), (3, 4))
    yield check("exp", unary(nm.exp), (3, 4))
    yield check("log", lambda t: nm.sum_all(nm.log(nm.add(nm.mul(t[0], t[0]),
                nm.scale(nm.exp(nm.scale(t[0], 0.0)), 1.0)))), (3, 4))
    yield check("absolute", unary(nm.absolute), (3, 4))
    yield check("huber", unary(lambda x: nm.huber(x, 1.0)), (3, 4))
    yield check("matmul", lambda t: nm.sum_all(nm.matmul(t[0], t[1])),
                (3, 4), (4, 5))
    yield check("matmul_batched", lambda t: nm.sum_all(nm.matmul(t[0], t[1])),
                (2, 3, 4), (2, 4, 5))
    yield check("softmax", unary(lambda x: nm.mul(x, nm.softmax(x))), (3, 5))
    yield check("gelu", unary(nm.gelu), (3, 4))
    yield check("layer_norm",
                lambda t: nm.sum_all(nm.mul(t[0], nm.layer_norm(t[0], t[1], t[2]))),
                (3, 6), (6,), (6,))
    yield check("reshape", unary(lambda x: nm.mul(x, nm.reshape(nm.reshape(
                x, (12,)), (3, 4)))), (3, 4))
    yield check("transpose", lambda t: nm.sum_all(nm.mul(
                t[0], nm.transpose(t[1], (1, 0)))), (4, 3), (3, 4))
    yield check("gather_rows",
                lambda t: nm.sum_all(nm.gather_rows(t[0], np.array([0, 2, 2]))),
                (4, 3))
    yield check("scatter_rows",
                lambda t: nm.sum_all(nm.mul(nm.scatter_rows(
                    t[0], np.array([3, 0]), 5), nm.scatter_rows(
                    t[0], np.array([3, 0]), 5))), (2, 3))
    yield check("broadcast_rows",
                lambda t: nm.sum_all(nm.mul(t[1], nm.broadcast_rows(t[0], 4))),
                (3,), (4, 3))
    yield check("take_scalar", lambda t: nm.take_scalar(nm.mul(t[0], t[0]), 5),
                (3, 4))
    yield check("sum_all", unary(nm.sum_all), (3, 4))
    yield check("mean_all", unary(nm.mean_all), (3, 4))
    yield check("mean_axis", lambda t: nm.sum_all(nm.mul(
                nm.mean_axis(t[0], 0), nm.mean_axis(t[0], 0))), (4, 3))


def _end_to_end_check():
    """Full objective through a tiny two-head model, in float64."""
    import numpy as np

    from . import numerics as nm
    from .model import DecoderConfig, EncoderConfig, forward_pretrain, init_params
    from .targets import TargetConfig, make_targets
    from .tokenizer import TokenGrid, sample_mask
    from .training import masked_loss, total_loss

    grid = TokenGrid(2, 2, 2, 2, 4, 1)
    enc = EncoderConfig(depth=2, embed_dim=16, heads=2, mlp_ratio=2.0,
                        token_dim=grid.token_dim)
    dec = DecoderConfig(depth=1, embed_dim=8, heads=2, mlp_ratio=2.0,
                        space_dim=grid.token_dim, time_dim=grid.motion_dim)
    params = init_params(enc, dec, seed=11, dtype=np.float64)
    names = sorted(params)
    clip = np.random.default_rng(3).uniform(0.0, 1.0, grid.clip_shape)
    clip = clip.astype(np.float32)
    mask = sample_mask(grid, 0.5, "random", seed=4)
    bundle = make_targets(clip, mask, grid, TargetConfig("both", 1, False))

    def objective(tensors):
        p = dict(zip(names, tensors))
        ps, pt = forward_pretrain(clip, mask, grid, enc, dec, p, "both")
        return total_loss(masked_loss(ps, bundle.space, mask, "mse"),
                          masked_loss(pt, bundle.time, mask, "mse"), 1.0)

    # eps balances two error floors: smaller steps drown near-zero-gradient
    # coordinates in roundoff (ulp(loss)/2eps), larger ones pay curvature
    # truncation; 3e-4 keeps both below the 1e-4 acceptance line.
    return nm.finite_diff_check(objective, [params[n] for n in names], eps=3e-4)


def cmd_gradcheck(args) -> int:
    import time

    checks = list(_primitive_checks())
    checks.append(("end_to_end_tiny_model", _end_to_end_check))
    failures = []
    for name, runner in checks:
        t0 = time.perf_counter()
        err = runner()
        dt = time.perf_counter() - t0
        ok = err < GRADCHECK_TOLERANCE
        print(f"{name}: max_rel_err={err:.3e} ({dt:.2f}s) "
              f"{'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}")
        return 1
    print("all gradient checks passed")
    return 0


_ABLATION_AXES = ("target_kind", "gap", "loss_kind", "ratio", "decoder")


def _apply_setting(cfg: dict, axis: str, value) -> dict:
    out = copy.deepcopy(cfg)
    if axis == "target_kind":
        out["targets"]["kind"] = value
    elif axis == "gap":
        out["targets"]["gap"] = value
    elif axis == "loss_kind":
        out["train"]["loss_kind"] = value
    elif axis == "ratio":
        out["mask"]["ratio"] = value
    else:
        out["model"]["arch"] = value
    return out


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    from .training import run_finetune, run_pretrain
    from .videodata import DIRECTIONS

    if args.axis not in _ABLATION_AXES:
        raise ConfigError(f"--axis must be one of {', '.join(_ABLATION_AXES)}")
    values = {
        "target_kind": ["frame", "motion", "both"],
        "gap": sorted(cfg["ablate"]["gap"]),
        "loss_kind": ["mse", "l1", "smooth_l1"],
        "ratio": cfg["ablate"]["ratio"],
        "decoder": cfg["ablate"]["decoder"],
    }[args.axis]

    train_clips, train_labels = _load_dataset(cfg["data"]["dir"], cfg)
    val_dir = cfg["data"]["val_dir"] or cfg["data"]["dir"]
    val_clips, val_labels = _load_dataset(val_dir, cfg)

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub = _apply_setting(cfg, args.axis, value)
        _validate(sub)
        grid = _build_grid(sub)
        enc, dec = _build_model_cfgs(sub, grid)
        run_dir = out_dir / f"{args.axis}_{value}"
        _, _, ckpt = run_pretrain(train_clips, grid, enc, dec,
                                  _build_train_cfg(sub), run_dir,
                                  augment=_make_augment(sub))
        report, _ = run_finetune(train_clips, train_labels, val_clips,
                                 val_labels, grid, enc,
                                 _build_train_cfg(sub, finetune=True),
                                 num_classes=len(DIRECTIONS), init_from=ckpt)
        rows.append((value, report["val_top1"]))
        print(f"{args.axis}={value}: top1={report['val_top1']:.4f}")

    csv_path = out_dir / f"ablate_{args.axis}.csv"
    with open(csv_path, "w") as fh:
        fh.write("setting,top1\n")
        for value, top1 in rows:
            fh.write(f"{value},{top1:.6f}\n")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionmae",
        description="Masked video autoencoder with joint frame and "
                    "temporal-difference motion reconstruction.",
        epilog="Config defaults (strict JSON; unknown keys are errors):\n"
               + json.dumps(DEFAULT_CONFIG, indent=2),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning + accuracy report")
    p.add_argument("--config", default=None)
    p.add_argument("--init", default="none",
                   help="pretraining checkpoint path, or 'none'")
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("reconstruct", help="render reconstruction grids")
    p.add_argument("--config", default=None)
    p.add_argument("--init", default="none",
                   help="pretraining checkpoint path, or 'none'")
    p.add_argument("--ratio", default="0.9,0.95",
                   help="comma-separated masking ratios, one image per ratio")
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one axis, pretrain+finetune each value")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True,
                   help=f"one of {', '.join(_ABLATION_AXES)}")
    p.set_defaults(handler=cmd_ablate)
    return parser


def _cap_threads() -> None:
    n = os.environ.get("MOTIONMAE_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def main(argv=None) -> int:
    _cap_threads()
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # map remaining failures onto the exit contract
        from .numerics import NonFiniteError
        from .training import CheckpointError
        from .videodata import ClipFileError

        if isinstance(e, NonFiniteError):
            print(f"numerical error: {e}", file=sys.stderr)
            return 4
        if isinstance(e, CheckpointError):
            print(f"checkpoint error: {e}", file=sys.stderr)
            return 2
        if isinstance(e, ClipFileError) or isinstance(e, OSError):
            print(f"i/o error: {e}", file=sys.stderr)
            return 3
        if isinstance(e, ValueError):
            print(f"config error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
