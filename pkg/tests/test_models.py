import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from i2iunlearn import numerics as nx
from i2iunlearn.checkpoint import (
    CheckpointError, load_checkpoint, load_model, load_probe, save_checkpoint, save_model, save_probe,
)
from i2iunlearn.models import (
    Adam, TrainConfig, decode, encode, init_model, init_probe, optimizer_step, patchify,
    probe_accuracy, probe_forward, reconstruct, reconstruction_loss, smoothed_nonincreasing,
    softmax, train_original, train_probe, unpatchify,
)
from i2iunlearn.numerics import Tape, Tensor, check_grad
from i2iunlearn.transforms import MaskSpec, apply_mask, make_mask


def test_patchify_round_trip(images):
    flat = patchify(images)
    assert flat.shape == (6, 1024)
    assert np.array_equal(unpatchify(flat), images)
    # first patch is the top-left 4x4 block
    assert np.array_equal(flat[0, :16], images[0, 0, :4, :4].reshape(-1))


def test_encoder_unit_norm_and_deterministic(model, images):
    x = Tensor(patchify(apply_mask(images, make_mask(MaskSpec()))))
    z1 = encode(model.encoder, x).data
    z2 = encode(model.encoder, x).data
    assert z1.shape == (6, 32)
    assert np.allclose(np.linalg.norm(z1, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(z1, z2)


def test_decode_shapes_and_zero_embedding(model, images):
    out = reconstruct(model, images)
    assert out.shape == images.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    z = decode(model.decoder, Tensor(np.zeros((2, 32)))).data
    assert np.array_equal(z[0], z[1])


def test_encoder_gradient_matches_fd(images):
    m = init_model(0)
    x = Tensor(patchify(images[:2]))
    # check the final projection and the first bias; full first-layer weights
    # would need 65k finite-difference evaluations
    keys = sorted(m.encoder)
    w_last, b_first = keys[-2], keys[0]
    target = Tensor(np.random.default_rng(1).normal(size=(2, 32)))

    def fn(w, b):
        enc = dict(m.encoder)
        enc[w_last], enc[b_first] = w, b
        return nx.mse(encode(enc, x), target)

    assert check_grad(fn, [m.encoder[w_last].data, m.encoder[b_first].data]) < 1e-4


def test_decoder_gradient_matches_fd():
    m = init_model(0)
    z = Tensor(np.linalg.qr(np.random.default_rng(2).normal(size=(32, 3)))[0].T)
    keys = sorted(m.decoder)
    b_mid, w_first = keys[1], keys[3]
    target = Tensor(np.random.default_rng(3).uniform(size=(3, 1024)))

    def fn(b, w):
        dec = dict(m.decoder)
        dec[b_mid], dec[w_first] = b, w
        return nx.mse(decode(dec, z), target)

    assert check_grad(fn, [m.decoder[b_mid].data, m.decoder[w_first].data]) < 1e-4


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = {"t": 0, "m": {}, "v": {}}
    for kind in ("adam", "adamw"):
        optimizer_step(kind, p, {"w": np.zeros(2)}, state, {"lr": 0.1})
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_hand_computed():
    p = {"w": Tensor(np.array([0.5]))}
    state = {"t": 0, "m": {}, "v": {}}
    optimizer_step("adam", p, {"w": np.array([1.0])}, state, {"lr": 0.1, "betas": (0.9, 0.95)})
    # bias-corrected m_hat = v_hat = 1 on the first step
    assert p["w"].data[0] == pytest.approx(0.5 - 0.1 / (1.0 + 1e-8), abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_adamw_without_decay_equals_adam(seed, steps):
    r = np.random.default_rng(seed)
    init = r.normal(size=4)
    grads = r.normal(size=(steps, 4))
    out = {}
    for kind in ("adam", "adamw"):
        p = {"w": Tensor(init.copy())}
        opt = Adam(kind, lr=0.01, weight_decay=0.0)
        for g in grads:
            opt.step(p, {"w": g})
        out[kind] = p["w"].data
    assert np.array_equal(out["adam"], out["adamw"])


def test_weight_decay_variants_differ():
    hyper = {"lr": 0.1, "weight_decay": 0.5}
    a = {"w": Tensor(np.array([2.0]))}
    b = {"w": Tensor(np.array([2.0]))}
    optimizer_step("adam", a, {"w": np.array([0.1])}, {"t": 0, "m": {}, "v": {}}, hyper)
    optimizer_step("adamw", b, {"w": np.array([0.1])}, {"t": 0, "m": {}, "v": {}}, hyper)
    # adamw: decoupled shrink then unit step; adam: decay enters the normalised gradient
    assert b["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0 - 0.1 / (1 + 1e-7), rel=1e-6)
    assert a["w"].data[0] == pytest.approx(2.0 - 0.1, rel=1e-6)


def test_optimizer_rejects_nonfinite():
    p = {"w": Tensor(np.ones(2))}
    with pytest.raises(nx.NonFiniteError):
        optimizer_step("adamw", p, {"w": np.array([np.nan, 0.0])}, {"t": 0, "m": {}, "v": {}}, {"lr": 0.1})


def test_encoder_stays_unit_norm_after_steps(images):
    m = init_model(1)
    x = Tensor(patchify(images))
    params = dict(m.encoder)
    names = list(params)
    opt = Adam("adamw", 0.05)
    for _ in range(3):
        with Tape() as tape:
            loss = nx.mse(encode(m.encoder, x), Tensor(np.ones((6, 32))))
        opt.step(params, dict(zip(names, tape.backward(loss, [params[n] for n in names]))))
        z = encode(m.encoder, x).data
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_small_training_run_is_deterministic_and_learns(images):
    x = np.random.default_rng(5).uniform(size=(40, 1, 32, 32))
    cfg = TrainConfig(lr=3e-3, epochs=4, batch=16, seed=9)
    a = train_original(x, [MaskSpec()], cfg)
    b = train_original(x, [MaskSpec()], cfg)
    assert all(np.array_equal(a.model.arrays()[k], b.model.arrays()[k]) for k in a.model.arrays())
    assert a.epoch_losses[0] > a.epoch_losses[-1]
    assert len(a.eval_losses) == 4


def test_smoothed_nonincreasing():
    assert smoothed_nonincreasing([5, 4, 4.1, 3, 2.5, 2.6, 2])
    assert not smoothed_nonincreasing([1, 2, 3, 4])


def test_probe_softmax_rows_sum_to_one(images):
    p = init_probe(5, 0)
    emb, logits = probe_forward(p, images)
    assert emb.shape == (6, 32)
    assert np.allclose(softmax(logits.data).sum(axis=1), 1.0, atol=1e-9)


def test_probe_training_deterministic():
    x = np.random.default_rng(0).uniform(size=(20, 1, 32, 32))
    y = np.arange(20) % 4
    cfg = TrainConfig(lr=1e-3, epochs=2, batch=8, seed=3)
    a, _ = train_probe(x, y, 4, cfg)
    b, _ = train_probe(x, y, 4, cfg)
    assert a.trained
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


# -- trained default models (shared session fixture) ------------------------------

def test_default_pretraining_meets_mse_threshold(default_lab):
    lab = default_lab
    # held-out samples of the classes the original model was trained on
    by = lab.splits.heldout_by_split
    held = lab.dataset.images[np.concatenate([by["retain"], by["forget"]])]
    var = lab.dataset.images.var(axis=0).mean()
    mse = reconstruction_loss(lab.original(), held, [lab.mask])
    assert mse < 0.5 * var


def test_default_pretraining_loss_curve(default_lab):
    losses = default_lab.ledger.runs["pretrain"].params["eval_losses"]
    assert losses[0] > losses[-1]
    assert smoothed_nonincreasing(losses, window=3)


def test_default_probe_accuracy(default_lab):
    lab = default_lab
    held = lab.splits.heldout
    acc = probe_accuracy(lab.probe(), lab.dataset.images[held], lab.dataset.labels[held])
    assert acc >= 0.90


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    model.meta = {"seed": 3, "config_hash": "abc"}
    save_model(model, path)
    back = load_model(path)
    for k, v in model.arrays().items():
        assert back.arrays()[k].tobytes() == v.tobytes()
    assert back.meta == {"seed": 3, "config_hash": "abc"}


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=4),
       st.integers(0, 2 ** 31))
def test_checkpoint_random_arrays_bit_exact(shapes, seed):
    import tempfile, os
    r = np.random.default_rng(seed)
    arrays = {f"a{i}": r.normal(size=s) for i, s in enumerate(shapes)}
    arrays["scalar"] = np.array(r.normal())
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.ckpt")
        save_checkpoint(arrays, path, {"k": 1})
        back, meta = load_checkpoint(path)
    assert list(back) == list(arrays) and meta == {"k": 1}
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint({"w": np.array([1.0, 2.0])}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"I2IU"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1
    import zlib
    assert int.from_bytes(raw[-4:], "little") == zlib.crc32(raw[12:-4])


def test_checkpoint_corruption_detected(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) // 2])
    flipped = bytearray(raw)
    flipped[100] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    version = bytearray(raw)
    version[4] = 7
    (tmp_path / "ver.ckpt").write_bytes(bytes(version))
    for name in ("magic", "short", "flip", "ver"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.ckpt")


def test_probe_checkpoint_round_trip(tmp_path):
    p = init_probe(4, 1)
    p.trained = True
    save_probe(p, tmp_path / "p.ckpt")
    q = load_probe(tmp_path / "p.ckpt")
    assert q.trained and q.num_classes == 4
    assert all(q.arrays()[k].tobytes() == v.tobytes() for k, v in p.arrays().items())
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "p.ckpt")
