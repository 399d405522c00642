import math

import numpy as np
import pytest

from agotlab.autodiff import Tensor
from agotlab.data import DatasetManifest, generate_synthetic
from agotlab.errors import ConfigError, ContractError, FormatError, IntegrityError
from agotlab.heads import AgotConfig, HeadKind
from agotlab.train import (
    CKPT_VERSION,
    Checkpoint,
    NonFiniteLossError,
    TrainConfig,
    Vocabulary,
    build_model,
    evaluate,
    gradcheck_suite,
    in_batch_classes,
    load_checkpoint,
    make_split,
    restore_model,
    save_checkpoint,
    sgd_step,
    train_run,
)

SMALL = AgotConfig(Z=2, R=2, L=4, d_e=8, d=8, d_hidden=8)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(DatasetManifest(num_classes=4, raw_dim=6, sigma=0.2), 12)


def _cfg(**kw):
    base = dict(agot=SMALL, epochs=3, batch_size=8, shots=6, image_hidden=12)
    base.update(kw)
    return TrainConfig(**base)


def _param(value, grad):
    t = Tensor(np.array(value, dtype=float), requires_grad=True)
    t.grad = np.array(grad, dtype=float)
    return t


# ---------------------------------------------------------------- sgd_step


def test_sgd_zero_lr_leaves_parameters():
    p = _param([1.0, -2.0], [0.5, 0.5])
    sgd_step({"p": p}, 0.0, 0.9, {})
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_plain_step_and_grad_zeroing():
    p = _param([1.0, -2.0], [0.5, -0.25])
    sgd_step({"p": p}, 0.1, 0.0, {})
    assert p.data.tolist() == [1.0 - 0.1 * 0.5, -2.0 + 0.1 * 0.25]
    assert p.grad is None


def test_sgd_momentum_matches_unrolled_recurrence():
    g1, g2, lr, m = 0.3, -0.7, 0.05, 0.9
    p = _param([2.0], [g1])
    buffers = {}
    sgd_step({"p": p}, lr, m, buffers)
    p.grad = np.array([g2])
    sgd_step({"p": p}, lr, m, buffers)
    b1 = g1
    b2 = m * b1 + g2
    want = 2.0 - lr * b1 - lr * b2
    assert abs(p.data[0] - want) < 1e-15
    assert abs(buffers["p"][0] - b2) < 1e-15


def test_sgd_missing_grad_names_parameter():
    ok = _param([1.0], [1.0])
    missing = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ContractError, match="lonely"):
        sgd_step({"ok": ok, "lonely": missing}, 0.1, 0.9, {})
    assert ok.data.tolist() == [1.0]


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [
    dict(learning_rate=0.0), dict(momentum=1.0), dict(batch_size=1), dict(alpha_mode="1.5"),
    dict(alpha_mode="sometimes"), dict(split="other"), dict(tau=0.0), dict(shots=0), dict(epochs=-1),
    dict(head="clip"),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_flat_roundtrip_and_coercion():
    cfg = TrainConfig(head=HeadKind.COTPT, agot=AgotConfig(Z=3, R=1), alpha_mode="0.3", seed=4)
    flat = cfg.to_flat()
    assert TrainConfig.from_flat(flat) == cfg
    assert TrainConfig.from_flat({k: str(v) for k, v in flat.items()}) == cfg
    assert TrainConfig.from_flat({"agot.Z": "5"}).agot.Z == 5
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"agot.zz": "1"})
    with pytest.raises(ConfigError):
        TrainConfig.from_flat({"epochs": "many"})
    assert cfg.fixed_alpha == 0.3 and TrainConfig().fixed_alpha is None


def test_defaults_follow_retrieval_setup():
    cfg = TrainConfig()
    assert cfg.learning_rate == 0.02 and cfg.momentum == 0.9
    assert cfg.agot.Z == 5 and cfg.agot.L == 4 and cfg.shots == 16


# ---------------------------------------------------------------- batches and evaluation


def test_in_batch_classes_first_caption_wins():
    cands, targets = in_batch_classes(np.array([3, 1, 3, 2]), ["a", "b", "c", "d"])
    assert cands == ["a", "b", "d"]
    assert targets.tolist() == [0, 1, 0, 2]


def test_evaluate_is_pure(data):
    cfg = _cfg()
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
    before = {k: t.data.copy() for k, t in model.head.state().items()}
    a, b = evaluate(model, data, cfg.tau), evaluate(model, data, cfg.tau)
    assert a == b
    for k, t in model.head.state().items():
        np.testing.assert_array_equal(t.data, before[k])


def test_evaluate_needs_candidates_for_every_class(data):
    cfg = _cfg()
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
    with pytest.raises(ConfigError):
        evaluate(model, data, cfg.tau, candidates={0: "a photo of a cat"})


# ---------------------------------------------------------------- train_run


def test_zero_epochs_returns_initialization(data):
    cfg = _cfg(epochs=0)
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
    init = {k: t.data.copy() for k, t in model.head.state().items()}
    ckpt, history = train_run(cfg, data)
    assert history == [] and ckpt.epoch == 0
    for k, v in init.items():
        np.testing.assert_array_equal(ckpt.params[k], v)


@pytest.mark.parametrize("head", ["coop", "cocoop", "cotpt", "agot"])
def test_runs_are_deterministic(tmp_path, data, head):
    agot = AgotConfig(Z=2, R=1, L=4, d_e=8, d=8, d_hidden=8) if head == "cotpt" else SMALL
    paths = []
    for i in range(2):
        (tmp_path / str(i)).mkdir()
        path = tmp_path / str(i) / "ckpt.bin"  # the path is part of the stored config
        train_run(_cfg(head=head, agot=agot, checkpoint=str(path)), data)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_resume_matches_uninterrupted(tmp_path, data):
    full, _ = train_run(_cfg(epochs=6), data)
    half_path = tmp_path / "half.bin"
    train_run(_cfg(epochs=3, checkpoint=str(half_path)), data)
    resumed, history = train_run(_cfg(epochs=6), data, resume=load_checkpoint(half_path))
    assert len(history) == 6
    for k, v in full.params.items():
        np.testing.assert_array_equal(resumed.params[k], v)
    for k, v in full.buffers.items():
        np.testing.assert_array_equal(resumed.buffers[k], v)


def test_resume_rejects_incompatible_config(data):
    ckpt, _ = train_run(_cfg(epochs=1), data)
    with pytest.raises(ConfigError):
        train_run(_cfg(epochs=2, agot=AgotConfig(Z=3, R=2, L=4, d_e=8, d=8, d_hidden=8)), data, resume=ckpt)


def test_encoders_stay_frozen(data):
    cfg = _cfg()
    vocab = Vocabulary.from_texts(data.captions())
    model = build_model(cfg, vocab, data.raw_dim)
    before = {k: t.data.tobytes() for k, t in model.encoder_tensors().items()}
    train_run(cfg, data, model=model)
    assert {k: t.data.tobytes() for k, t in model.encoder_tensors().items()} == before
    fresh = build_model(cfg, vocab, data.raw_dim)
    assert {k: t.data.tobytes() for k, t in fresh.encoder_tensors().items()} == before


def test_initial_loss_near_uniform():
    C = 8
    data = generate_synthetic(DatasetManifest(num_classes=C, raw_dim=32, sigma=0.15), 16)
    for head in ("fixed", "coop", "agot"):
        cfg = TrainConfig(head=head, agot=AgotConfig(Z=3, R=4))
        model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
        loss = evaluate(model, data, cfg.tau).loss
        assert abs(loss - math.log(C)) <= 0.2 * math.log(C), (head, loss)


def test_nonfinite_loss_aborts_with_location(data):
    cfg = _cfg()
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim)
    model.head.agot.base_prompt.data[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="epoch 0, batch 0"):
        train_run(cfg, data, model=model)


def test_dataset_model_mismatch(data):
    cfg = _cfg()
    model = build_model(cfg, Vocabulary.from_texts(data.captions()), data.raw_dim + 1)
    with pytest.raises(ConfigError):
        train_run(cfg, data, model=model)


def test_training_reduces_loss(data):
    _, history = train_run(_cfg(epochs=15, shots=12, batch_size=8), data)
    assert all(math.isfinite(h.loss) for h in history)
    assert history[-1].loss < history[0].loss


def test_base_split_trains_only_base_classes(data):
    base, new = [0, 2], [1, 3]
    cfg = _cfg(split="base", epochs=1)
    split = make_split(cfg, data, base, new)
    assert set(split.train.labels().tolist()) == {0, 2}
    assert set(split.heldout.labels().tolist()) <= {0, 2}
    with pytest.raises(ConfigError):
        make_split(cfg, data)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, data):
    ckpt, _ = train_run(_cfg(epochs=2), data)
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    again = load_checkpoint(path)
    assert again.config == ckpt.config and again.epoch == ckpt.epoch
    assert repr(again.history) == repr(ckpt.history) and again.vocab == ckpt.vocab  # NaN fields
    assert (again.raw_dim, again.num_classes) == (ckpt.raw_dim, ckpt.num_classes)
    assert set(again.params) == set(ckpt.params) and set(again.buffers) == set(ckpt.buffers)
    for k in ckpt.params:
        np.testing.assert_array_equal(again.params[k], ckpt.params[k])
    for k in ckpt.buffers:
        np.testing.assert_array_equal(again.buffers[k], ckpt.buffers[k])
    model = restore_model(again)
    for k, t in model.head.state().items():
        np.testing.assert_array_equal(t.data, ckpt.params[k])


def test_truncated_checkpoint_is_integrity_error(tmp_path, data):
    ckpt, _ = train_run(_cfg(epochs=1), data)
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    for cut in (len(blob) - 1, len(blob) // 2, 10):
        path.write_bytes(blob[:cut])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)


def test_flipped_byte_is_integrity_error(tmp_path, data):
    ckpt, _ = train_run(_cfg(epochs=1), data)
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_unknown_version_is_format_error(tmp_path):
    import hashlib
    import struct

    ckpt = Checkpoint(config=TrainConfig(), params={"x": np.zeros(2)})
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    body = bytearray(path.read_bytes()[:-32])
    struct.pack_into("<I", body, 8, CKPT_VERSION + 1)
    path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(FormatError):
        load_checkpoint(path)


# ---------------------------------------------------------------- gradient check suite


def test_gradcheck_suite_passes_all_heads():
    rows = gradcheck_suite()
    heads = {r.head for r in rows}
    assert heads == {"coop", "cocoop", "cotpt", "agot"}  # fixed has nothing to check
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]
    agot = {r.param for r in rows if r.head == "agot"}
    for fam in ("weightnet", "metanet", "flowcontrol"):
        assert any(f".{fam}." in p for p in agot)
    assert sum(".subnode" in p for p in agot) == 4


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gradcheck_suite_other_seeds(seed):
    assert all(r.passed for r in gradcheck_suite(seed=seed))


def test_gradcheck_suite_reports_failures_by_name():
    rows = gradcheck_suite(heads=("coop",), tol=1e-30)
    bad = [r for r in rows if not r.passed]
    assert bad and bad[0].param == "prompt" and bad[0].coord is not None
    assert math.isfinite(bad[0].analytic) and math.isfinite(bad[0].numeric)


def test_gradcheck_suite_rejects_large_config():
    with pytest.raises(ConfigError):
        gradcheck_suite(agot=AgotConfig(Z=2, R=2, L=2, d_e=16, d=6, d_hidden=5))
