import numpy as np
import pytest

from motionmae import model as md
from motionmae import numerics as nm
from motionmae import tokenizer as tk
from motionmae import training as tr
from motionmae import videodata as vd
from motionmae.numerics import OptimState, Tape, Tensor, backward


def _mask_of(bits):
    return tk.Mask(bits=np.asarray(bits, dtype=bool), ratio=0.5,
                   strategy="random", seed=0)


def _tiny_task(n_clips, seed, T=8, H=16, W=16):
    clips, labels = [], []
    for i in range(n_clips):
        label = vd.DIRECTIONS[i % 4]
        rng = np.random.default_rng([seed, i])
        sx, sy = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}[label]
        speed = int(rng.integers(1, 4))
        spec = vd.SyntheticSpec(object_size=int(rng.integers(4, 8)),
                                velocity=(sx * speed, sy * speed),
                                background_level=0.1, object_level=0.9, label=label)
        clip, _ = vd.generate_moving_square(spec, T, H, W,
                                            seed=int(rng.integers(2 ** 31)))
        clips.append(clip)
        labels.append(i % 4)
    return clips, labels


# ---- masked_loss ----


def test_masked_loss_zero_when_equal():
    pred = Tensor(np.random.default_rng(0).uniform(size=(6, 4)).astype(np.float32))
    mask = _mask_of([1, 0, 1, 0, 1, 0])
    target = pred.data[mask.masked_indices]
    for kind in tr.LOSS_KINDS:
        assert tr.masked_loss(pred, target, mask, kind).item() == 0.0


def test_masked_loss_constant_offset_mse():
    pred = Tensor(np.zeros((4, 5), dtype=np.float64) + 0.3)
    mask = _mask_of([1, 1, 0, 0])
    target = np.zeros((2, 5))
    loss = tr.masked_loss(pred, target, mask, "mse")
    np.testing.assert_allclose(loss.item(), 0.09, rtol=1e-12)


def test_masked_loss_two_loop_oracle():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.normal(size=(5, 3)))
    mask = _mask_of([0, 1, 1, 0, 1])
    target = rng.normal(size=(3, 3))
    got = tr.masked_loss(pred, target, mask, "l1").item()
    total = 0.0
    for r, tok in enumerate([1, 2, 4]):
        for k in range(3):
            total += abs(pred.data[tok, k] - target[r, k])
    np.testing.assert_allclose(got, total / 9.0, rtol=1e-12)


def test_masked_loss_requires_masked_tokens():
    pred = Tensor(np.ones((3, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        tr.masked_loss(pred, np.ones((0, 2)), _mask_of([0, 0, 0]), "mse")


def test_masked_loss_locality():
    """Visible-position predictions are invisible to the loss; masked ones
    are not."""
    rng = np.random.default_rng(2)
    base = rng.normal(size=(6, 4))
    mask = _mask_of([0, 1, 0, 1, 0, 1])
    target = rng.normal(size=(3, 4))

    loss0 = tr.masked_loss(Tensor(base), target, mask, "mse").item()
    bumped = base.copy()
    bumped[mask.visible_indices] += 17.0
    assert tr.masked_loss(Tensor(bumped), target, mask, "mse").item() == loss0

    for tok in mask.masked_indices:
        poked = base.copy()
        poked[tok] += 0.5
        assert tr.masked_loss(Tensor(poked), target, mask, "mse").item() != loss0


def test_masked_loss_gradients():
    rng = np.random.default_rng(3)
    mask = _mask_of([1, 0, 1, 0])
    target = rng.normal(size=(2, 3))
    for kind in tr.LOSS_KINDS:
        pred = Tensor(rng.normal(size=(4, 3)) * 2.0)
        err = nm.finite_diff_check(
            lambda p: tr.masked_loss(p[0], target, mask, kind), [pred])
        assert err < 1e-4, f"{kind}: {err:.3e}"


# ---- total_loss ----


def test_total_loss_sum_and_degenerate_weights():
    a = Tensor(np.asarray(0.7))
    b = Tensor(np.asarray(0.2))
    assert tr.total_loss(a, b, 1.0).item() == 0.7 + 0.2
    assert tr.total_loss(a, None, 1.0).item() == 0.7
    assert tr.total_loss(None, b, 2.0).item() == 0.4
    assert tr.total_loss(a, b, 0.0).item() == a.item()
    with pytest.raises(ValueError):
        tr.total_loss(None, None, 1.0)


def test_total_loss_machine_precision_sum():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = rng.uniform(size=2)
        got = tr.total_loss(Tensor(np.asarray(a)), Tensor(np.asarray(b)), 1.0)
        assert got.item() == a + b


# ---- lr schedule ----


def test_lr_schedule_endpoints():
    cfg = tr.TrainConfig(lr=2e-3, warmup_steps=10, total_steps=100)
    assert tr.lr_at(0, cfg) == 0.0
    assert tr.lr_at(10, cfg) == 2e-3
    assert abs(tr.lr_at(100, cfg)) < 1e-12
    assert tr.lr_at(5, cfg) == 1e-3  # halfway through warmup
    mid = tr.lr_at(55, cfg)  # halfway through decay
    np.testing.assert_allclose(mid, 1e-3, rtol=1e-12)


def test_lr_schedule_rejects_out_of_range():
    cfg = tr.TrainConfig(total_steps=10)
    with pytest.raises(ValueError):
        tr.lr_at(11, cfg)
    with pytest.raises(ValueError):
        tr.lr_at(-1, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(warmup_steps=5, total_steps=4)
    with pytest.raises(ValueError):
        tr.TrainConfig(lam=-0.5)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(loss_kind="l3")


# ---- cross entropy ----


def test_cross_entropy_uniform_logits_exact():
    logits = Tensor(np.full((1, 4), 1.7))
    assert tr.cross_entropy(logits, 2).item() == np.log(4.0)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(1, 5)))
    err = nm.finite_diff_check(lambda p: tr.cross_entropy(p[0], 3), [logits])
    assert err < 1e-4


def test_cross_entropy_label_bounds():
    with pytest.raises(ValueError):
        tr.cross_entropy(Tensor(np.zeros((1, 3))), 3)


# ---- pretrain step / loop ----


def _tiny_train_setup(seed=0, n_clips=4, **cfg_kw):
    clips, _ = _tiny_task(n_clips, seed=seed)
    _, grid = tk.patchify(clips[0], 2, 4)
    enc, dec = md.preset_configs("tiny", grid)
    defaults = dict(lr=1e-3, warmup_steps=2, total_steps=10, batch_size=2,
                    mask_ratio=0.75, seed=seed, log_interval=2)
    defaults.update(cfg_kw)
    cfg = tr.TrainConfig(**defaults)
    return clips, grid, enc, dec, cfg


def test_pretrain_trajectory_bit_deterministic():
    def run():
        clips, grid, enc, dec, cfg = _tiny_train_setup(seed=9)
        params = md.init_params(enc, dec, seed=1, dtype=np.float32)
        opt = OptimState.for_params(params)
        losses = []
        for step in range(10):
            batch = tr._batch_at(clips, step, cfg.batch_size)
            loss, _, _ = tr.pretrain_step(batch, params, opt, grid, enc, dec,
                                          cfg, step)
            losses.append(loss)
        return losses, {k: v.data.copy() for k, v in params.items()}

    (la, pa), (lb, pb) = run(), run()
    assert la == lb
    for k in pa:
        assert (pa[k] == pb[k]).all()


def test_batch_gradient_is_mean_of_sample_gradients():
    clips, grid, enc, dec, cfg = _tiny_train_setup(seed=11, precision="double")
    params = md.init_params(enc, dec, seed=2, dtype=np.float64)
    tgt = cfg.target_config()

    def sample_loss(i):
        from motionmae.targets import make_targets
        mask = tk.sample_mask(grid, 0.75, "random", seed=100 + i)
        bundle = make_targets(clips[i], mask, grid, tgt)
        ps, pt = md.forward_pretrain(clips[i], mask, grid, enc, dec, params)
        return tr.total_loss(tr.masked_loss(ps, bundle.space, mask, "mse"),
                             tr.masked_loss(pt, bundle.time, mask, "mse"), 1.0)

    tape = Tape()
    for p in params.values():
        tape.watch(p)
    backward(nm.scale(nm.add(sample_loss(0), sample_loss(1)), 0.5), tape)
    batch_grads = {k: p.grad.copy() for k, p in params.items()}

    singles = []
    for i in range(2):
        tape = Tape()
        for p in params.values():
            tape.watch(p)
        backward(sample_loss(i), tape)
        singles.append({k: p.grad.copy() for k, p in params.items()})

    for k in batch_grads:
        want = 0.5 * (singles[0][k] + singles[1][k])
        np.testing.assert_allclose(batch_grads[k], want, atol=1e-12)


def test_run_pretrain_csv_bookkeeping(tmp_path):
    clips, grid, enc, dec, cfg = _tiny_train_setup(total_steps=10, log_interval=3)
    tr.run_pretrain(clips, grid, enc, dec, cfg, tmp_path)
    rows = (tmp_path / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss,loss_space,loss_time"
    assert len(rows) - 1 == 4  # ceil(10 / 3)
    assert rows[-1].startswith("10,")


def test_run_pretrain_frame_only_empty_time_column(tmp_path):
    clips, grid, enc, dec, cfg = _tiny_train_setup(total_steps=4, log_interval=2,
                                                   target_kind="frame")
    tr.run_pretrain(clips, grid, enc, dec, cfg, tmp_path)
    for row in (tmp_path / "loss.csv").read_text().strip().splitlines()[1:]:
        assert row.endswith(",")


def test_run_pretrain_resume_bit_exact(tmp_path):
    clips, grid, enc, dec, cfg = _tiny_train_setup(total_steps=8,
                                                   checkpoint_interval=4)
    tr.run_pretrain(clips, grid, enc, dec, cfg, tmp_path / "full")
    tr.run_pretrain(clips, grid, enc, dec, cfg, tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "checkpoint_000004.mmck")
    a = (tmp_path / "full" / "checkpoint_final.mmck").read_bytes()
    b = (tmp_path / "resumed" / "checkpoint_final.mmck").read_bytes()
    assert a == b


# ---- finetune ----


def test_finetune_overfits_small_train_set(tmp_path):
    clips, labels = _tiny_task(16, seed=21)
    val_clips, val_labels = _tiny_task(8, seed=22)
    _, grid = tk.patchify(clips[0], 2, 4)
    enc, _ = md.preset_configs("tiny", grid)
    cfg = tr.TrainConfig(lr=1e-3, warmup_steps=10, total_steps=150,
                         batch_size=8, seed=5)
    report, params = tr.run_finetune(clips, labels, val_clips, val_labels,
                                     grid, enc, cfg, num_classes=4)
    assert report["train_top1"] >= 0.5  # far above the 0.25 chance level
    assert 0.0 <= report["val_top1"] <= 1.0
    assert report["n_train"] == 16


def test_finetune_restores_encoder_weights_bit_exact(tmp_path):
    clips, grid, enc, dec, cfg = _tiny_train_setup(total_steps=2)
    params, opt, ckpt = tr.run_pretrain(clips, grid, enc, dec, cfg, tmp_path)

    labels = [0, 1, 2, 3]
    cfg_ft = tr.TrainConfig(total_steps=0, batch_size=1, seed=3)
    _, ft_params = tr.run_finetune(clips, labels, clips, labels, grid, enc,
                                   cfg_ft, num_classes=4, init_from=ckpt)
    for name, p in params.items():
        if name.startswith(("enc.", "patch_proj.")):
            assert (ft_params[name].data == p.data).all(), name
    assert "cls.w" in ft_params
    assert not any(k.startswith("dec.") for k in ft_params)


def test_finetune_rejects_single_class():
    clips, labels = _tiny_task(4, seed=23)
    _, grid = tk.patchify(clips[0], 2, 4)
    enc, _ = md.preset_configs("tiny", grid)
    with pytest.raises(ValueError):
        tr.run_finetune(clips, labels, clips, labels, grid, enc,
                        tr.TrainConfig(), num_classes=1)


# ---- checkpoints ----


def _small_state(dtype=np.float32, seed=0):
    rng = np.random.default_rng(seed)
    params = {
        "enc.w": Tensor(rng.normal(size=(3, 4)).astype(dtype)),
        "enc.b": Tensor(rng.normal(size=4).astype(dtype)),
    }
    opt = OptimState.for_params(params)
    opt.m["enc.w"] += 0.25
    opt.v["enc.b"] += 0.5
    return params, opt


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params, opt = _small_state()
    digest = tr.config_digest(tr.TrainConfig())
    p = tmp_path / "c.mmck"
    tr.save_checkpoint(params, opt, 17, digest, p)
    arrays, opt2, step = tr.load_checkpoint(p, expect_digest=digest)
    assert step == 17 and opt2.t == 17
    for name, t in params.items():
        assert (arrays[name] == t.data).all()
        assert (opt2.m[name] == opt.m[name]).all()
        assert (opt2.v[name] == opt.v[name]).all()


def test_checkpoint_rejects_double_precision(tmp_path):
    params, opt = _small_state(dtype=np.float64)
    with pytest.raises(ValueError):
        tr.save_checkpoint(params, opt, 0, bytes(32), tmp_path / "c.mmck")


def test_checkpoint_corrupted_byte_digest_error(tmp_path):
    params, opt = _small_state()
    p = tmp_path / "c.mmck"
    tr.save_checkpoint(params, opt, 1, bytes(32), p)
    blob = bytearray(p.read_bytes())
    blob[60] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(tr.CheckpointDigestError):
        tr.load_checkpoint(p)


def test_checkpoint_config_digest_mismatch(tmp_path):
    params, opt = _small_state()
    p = tmp_path / "c.mmck"
    tr.save_checkpoint(params, opt, 1, tr.config_digest(tr.TrainConfig()), p)
    other = tr.config_digest(tr.TrainConfig(lr=9.9))
    with pytest.raises(tr.CheckpointDigestError):
        tr.load_checkpoint(p, expect_digest=other)


def test_checkpoint_version_and_magic_errors(tmp_path):
    params, opt = _small_state()
    p = tmp_path / "c.mmck"
    tr.save_checkpoint(params, opt, 1, bytes(32), p)

    blob = bytearray(p.read_bytes())
    blob[4] = 42
    content = bytes(blob[:-32])
    import hashlib
    p.write_bytes(content + hashlib.sha256(content).digest())
    with pytest.raises(tr.CheckpointVersionError):
        tr.load_checkpoint(p)

    p.write_bytes(b"JUNK" + bytes(80))
    with pytest.raises(tr.CheckpointFormatError):
        tr.load_checkpoint(p)


def test_checkpoint_truncation_error(tmp_path):
    params, opt = _small_state()
    p = tmp_path / "c.mmck"
    tr.save_checkpoint(params, opt, 1, bytes(32), p)
    p.write_bytes(p.read_bytes()[:50])
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(p)
