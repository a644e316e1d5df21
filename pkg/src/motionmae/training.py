"""Masked reconstruction objective, training loops, and checkpointing.

Losses average over masked elements only. Pretraining optimizes
L_space + lambda * L_time with AdamW under a warmup+cosine schedule;
finetuning swaps the decoder for a mean-pool classifier trained with
cross-entropy. Checkpoints are a binary record stream with a config digest
and a trailing content digest, and training is bit-deterministic given
(seed, config, dataset), which makes mid-run resume reproduce the original
trajectory exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .model import (
    DecoderConfig,
    EncoderConfig,
    classify,
    forward_pretrain,
    init_params,
)
from .numerics import NonFiniteError, OptimState, Tape, Tensor, adamw_step, backward
from .targets import TargetConfig, make_targets
from .tokenizer import Mask, TokenGrid, sample_mask

LOSS_KINDS = ("mse", "l1", "smooth_l1")

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Missing magic bytes or malformed record structure."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint version."""


class CheckpointDigestError(CheckpointError):
    """Content or config digest does not match."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before its records do."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 0
    total_steps: int = 100
    batch_size: int = 8
    target_kind: str = "both"
    lam: float = 1.0
    loss_kind: str = "mse"
    mask_ratio: float = 0.75
    mask_strategy: str = "random"
    gap: int = 1
    normalize_space: bool = False
    seed: int = 0
    precision: str = "single"
    log_interval: int = 10
    checkpoint_interval: int = 0  # 0 = only at the end

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.lam < 0:
            raise ValueError("time-loss weight must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def target_config(self) -> TargetConfig:
        return TargetConfig(kind=self.target_kind, gap=self.gap,
                            normalize_space=self.normalize_space)


def config_digest(cfg) -> bytes:
    """Stable 32-byte digest of a config dataclass (for checkpoint pairing)."""
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def masked_loss(pred: Tensor, target: np.ndarray, mask: Mask, kind: str) -> Tensor:
    """Mean reconstruction penalty over the M x K masked elements only."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    idx = mask.masked_indices
    if idx.size == 0:
        raise ValueError("loss undefined with zero masked tokens")
    if target.shape[0] != idx.size or target.shape[1] != pred.shape[1]:
        raise ValueError(f"target {target.shape} does not pair with "
                         f"{idx.size} masked rows of width {pred.shape[1]}")
    sel = nm.gather_rows(pred, idx)
    diff = nm.sub(sel, Tensor(np.asarray(target, dtype=pred.dtype)))
    if kind == "mse":
        return nm.mean_all(nm.mul(diff, diff))
    if kind == "l1":
        return nm.mean_all(nm.absolute(diff))
    return nm.mean_all(nm.huber(diff, 1.0))


def total_loss(space_loss: Tensor | None, time_loss: Tensor | None, lam: float) -> Tensor:
    """Combined objective L_space + lam * L_time, dropping absent heads."""
    if space_loss is None and time_loss is None:
        raise ValueError("at least one loss component must be present")
    if time_loss is not None:
        time_loss = nm.scale(time_loss, lam)
    if space_loss is None:
        return time_loss
    if time_loss is None:
        return space_loss
    return nm.add(space_loss, time_loss)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Stable cross-entropy of a (1, C) logit row against an integer label."""
    c = logits.shape[1]
    if not 0 <= label < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    m = float(logits.data.max())
    shifted = nm.sub(logits, Tensor(np.asarray(m, dtype=logits.dtype)))
    lse = nm.log(nm.sum_all(nm.exp(shifted)))
    return nm.sub(lse, nm.take_scalar(shifted, label))


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain_step(
    batch: list[np.ndarray],
    params: dict[str, Tensor],
    opt: OptimState,
    grid: TokenGrid,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
    step: int,
) -> tuple[float, float | None, float | None]:
    """One optimizer update on a batch; returns (loss, space part, time part).

    Masks are drawn per sample from (seed + 2, step, position-in-batch) —
    the mask branch of the run-seed fan-out — so a given step always sees
    the same masks regardless of history.
    """
    tape = Tape()
    for p in params.values():
        tape.watch(p)
    tgt_cfg = cfg.target_config()
    mean_w = 1.0 / len(batch)
    combined = None
    space_vals: list[float] = []
    time_vals: list[float] = []
    try:
        for i, clip in enumerate(batch):
            mask = sample_mask(grid, cfg.mask_ratio, cfg.mask_strategy,
                               seed=derive_seed(cfg.seed + 2, step, i))
            bundle = make_targets(clip, mask, grid, tgt_cfg)
            pred_space, pred_time = forward_pretrain(
                clip, mask, grid, enc_cfg, dec_cfg, params, cfg.target_kind)
            ls = lt = None
            if pred_space is not None:
                ls = masked_loss(pred_space, bundle.space, mask, cfg.loss_kind)
                space_vals.append(float(ls.data))
            if pred_time is not None:
                lt = masked_loss(pred_time, bundle.time, mask, cfg.loss_kind)
                time_vals.append(float(lt.data))
            sample_loss = total_loss(ls, lt, cfg.lam)
            combined = sample_loss if combined is None else nm.add(combined, sample_loss)
        loss = nm.scale(combined, mean_w)
        backward(loss, tape)
    except NonFiniteError as e:
        raise NonFiniteError(f"non-finite value during step {step}: {e}") from e
    grads = {k: p.grad for k, p in params.items()}
    adamw_step(params, grads, opt, lr=lr_at(step, cfg), beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    mean = lambda vals: sum(vals) / len(vals) if vals else None
    return float(loss.data), mean(space_vals), mean(time_vals)


def _batch_at(clips: list[np.ndarray], step: int, batch_size: int) -> list[np.ndarray]:
    n = len(clips)
    return [clips[(step * batch_size + j) % n] for j in range(batch_size)]


def run_pretrain(
    clips: list[np.ndarray],
    grid: TokenGrid,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
    out_dir,
    resume_from=None,
    augment=None,
) -> tuple[dict[str, Tensor], OptimState, Path]:
    """Full pretraining loop; writes loss.csv and checkpoint files.

    Batches cycle through the clip list in index order. `augment`, when given,
    is called as augment(clip, step, index) and must be deterministic.
    Resuming from a step-s checkpoint replays steps s+1..total identically to
    an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    if resume_from is not None:
        arrays, opt, start_step = load_checkpoint(resume_from, expect_digest=digest)
        params = params_from_arrays(arrays)
    else:
        params = init_params(enc_cfg, dec_cfg, seed=cfg.seed + 3,
                             target_kind=cfg.target_kind, dtype=cfg.dtype)
        opt = OptimState.for_params(params)
        start_step = 0

    csv_path = out_dir / "loss.csv"
    mode = "a" if resume_from is not None and csv_path.exists() else "w"
    fmt = lambda v: "" if v is None else f"{v:.8e}"
    with open(csv_path, mode) as fh:
        if mode == "w":
            fh.write("step,loss,loss_space,loss_time\n")
        for step in range(start_step, cfg.total_steps):
            batch = _batch_at(clips, step, cfg.batch_size)
            if augment is not None:
                batch = [augment(c, step, j) for j, c in enumerate(batch)]
            loss, ls, lt = pretrain_step(batch, params, opt, grid, enc_cfg,
                                         dec_cfg, cfg, step)
            done = step + 1
            if done % cfg.log_interval == 0 or done == cfg.total_steps:
                fh.write(f"{done},{fmt(loss)},{fmt(ls)},{fmt(lt)}\n")
            if cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0 \
                    and done < cfg.total_steps:
                save_checkpoint(params, opt, done, digest,
                                out_dir / f"checkpoint_{done:06d}.mmck")
    final = out_dir / "checkpoint_final.mmck"
    save_checkpoint(params, opt, cfg.total_steps, digest, final)
    return params, opt, final


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def evaluate_top1(
    clips: list[np.ndarray],
    labels: list[int],
    grid: TokenGrid,
    enc_cfg: EncoderConfig,
    params: dict[str, Tensor],
    num_classes: int,
) -> float:
    hits = 0
    for clip, label in zip(clips, labels):
        logits = classify(clip, grid, enc_cfg, params, num_classes).data[0]
        hits += int(np.argmax(logits) == label)
    return hits / len(clips)


def run_finetune(
    train_clips: list[np.ndarray],
    train_labels: list[int],
    val_clips: list[np.ndarray],
    val_labels: list[int],
    grid: TokenGrid,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    num_classes: int,
    init_from=None,
) -> tuple[dict, dict[str, Tensor]]:
    """Train encoder + classifier with cross-entropy; returns (report, params).

    init_from may be a checkpoint path: its encoder weights (patch projection
    included) are copied in, everything decoder-side is discarded, and the
    classifier head starts fresh.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    params = init_params(enc_cfg, None, seed=cfg.seed + 3,
                         num_classes=num_classes, dtype=cfg.dtype)
    if init_from is not None:
        loaded, _, _ = load_checkpoint(init_from)
        for name, arr in loaded.items():
            if name.startswith(("enc.", "patch_proj.")):
                if name not in params:
                    raise ValueError(f"checkpoint encoder parameter {name!r} "
                                     "does not fit this architecture")
                if arr.shape != params[name].shape:
                    raise ValueError(f"shape mismatch for {name!r}: checkpoint "
                                     f"{arr.shape} vs model {params[name].shape}")
                params[name] = Tensor(arr.astype(cfg.dtype))
    opt = OptimState.for_params(params)

    n = len(train_clips)
    for step in range(cfg.total_steps):
        tape = Tape()
        for p in params.values():
            tape.watch(p)
        combined = None
        try:
            for j in range(cfg.batch_size):
                idx = (step * cfg.batch_size + j) % n
                logits = classify(train_clips[idx], grid, enc_cfg, params, num_classes)
                ce = cross_entropy(logits, train_labels[idx])
                combined = ce if combined is None else nm.add(combined, ce)
            loss = nm.scale(combined, 1.0 / cfg.batch_size)
            backward(loss, tape)
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite value during step {step}: {e}") from e
        adamw_step(params, {k: p.grad for k, p in params.items()}, opt,
                   lr=lr_at(step, cfg), beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps, weight_decay=cfg.weight_decay)

    report = {
        "train_top1": evaluate_top1(train_clips, train_labels, grid, enc_cfg,
                                    params, num_classes),
        "val_top1": evaluate_top1(val_clips, val_labels, grid, enc_cfg,
                                  params, num_classes),
        "n_train": len(train_clips),
        "n_val": len(val_clips),
    }
    return report, params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    payload = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", payload.ndim)
    head += struct.pack(f"<{payload.ndim}I", *payload.shape)
    return head + payload.tobytes()


def save_checkpoint(
    params: dict[str, Tensor],
    opt: OptimState,
    step: int,
    config_digest_bytes: bytes,
    path,
) -> None:
    """Serialize parameters and optimizer moments as float32 records.

    Single-precision state only: the format stores float32 payloads, and a
    silent down-cast would break bit-exact resume.
    """
    if len(config_digest_bytes) != 32:
        raise ValueError("config digest must be 32 bytes")
    for name, p in params.items():
        if p.data.dtype != np.float32:
            raise ValueError(f"checkpoint stores float32 only; {name!r} is "
                             f"{p.data.dtype}")
    body = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION),
            config_digest_bytes, struct.pack("<Q", step)]
    for name, p in params.items():
        body.append(_pack_record(f"param:{name}", p.data))
        body.append(_pack_record(f"m:{name}", opt.m[name]))
        body.append(_pack_record(f"v:{name}", opt.v[name]))
    blob = b"".join(body)
    Path(path).write_bytes(blob + hashlib.sha256(blob).digest())


def load_checkpoint(path, expect_digest: bytes | None = None):
    """Read a checkpoint; returns (param arrays by name, OptimState, step)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: missing {CHECKPOINT_MAGIC!r} magic")
    if len(blob) < 77:  # magic + version + digest + step + trailing digest
        raise CheckpointTruncatedError(f"{path}: only {len(blob)} bytes")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected "
                                     f"{CHECKPOINT_VERSION}")
    content, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(content).digest() != trailer:
        raise CheckpointDigestError(f"{path}: content digest mismatch")
    stored_digest = blob[5:37]
    if expect_digest is not None and stored_digest != expect_digest:
        raise CheckpointDigestError(f"{path}: config digest mismatch (checkpoint "
                                    "was written under a different configuration)")
    (step,) = struct.unpack("<Q", blob[37:45])

    arrays: dict[str, np.ndarray] = {}
    off = 45
    end = len(content)
    while off < end:
        if off + 2 > end:
            raise CheckpointTruncatedError(f"{path}: record header cut short")
        (name_len,) = struct.unpack_from("<H", content, off)
        off += 2
        if off + name_len + 1 > end:
            raise CheckpointTruncatedError(f"{path}: record name cut short")
        name = content[off : off + name_len].decode()
        off += name_len
        rank = content[off]
        off += 1
        if off + 4 * rank > end:
            raise CheckpointTruncatedError(f"{path}: record dims cut short")
        dims = struct.unpack_from(f"<{rank}I", content, off)
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > end:
            raise CheckpointTruncatedError(f"{path}: record payload cut short")
        arrays[name] = np.frombuffer(content, dtype="<f4", count=count,
                                     offset=off).reshape(dims).copy()
        off += nbytes

    params: dict[str, np.ndarray] = {}
    opt = OptimState(t=step)
    for name, arr in arrays.items():
        kind, _, pname = name.partition(":")
        if kind == "param":
            params[pname] = arr
        elif kind == "m":
            opt.m[pname] = arr
        elif kind == "v":
            opt.v[pname] = arr
        else:
            raise CheckpointFormatError(f"{path}: unknown record kind {kind!r}")
    missing = set(params) ^ set(opt.m) | set(params) ^ set(opt.v)
    if missing:
        raise CheckpointFormatError(f"{path}: incomplete records for {sorted(missing)}")
    return params, opt, step


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}
