"""AE / C-AE baseline: structure, shapes, training order, determinism."""

import numpy as np
import pytest

from bendlens.ae import Ae, Cae, ModelError, train_ae, train_cae
from bendlens.data import gen_shapes, synthesize_measurements
from bendlens.fiber import gen_speckle_ensemble, make_config_grid
from bendlens.nn import Dense, Tensor


@pytest.fixture(scope="module")
def train_set():
    ens = gen_speckle_ensemble(256, 256, make_config_grid(2), mode="random", seed=0)
    images = gen_shapes(24, 3, 16, seed=0)
    return synthesize_measurements(images, ens, ["C_1", "C_0"], noise_std=0.0,
                                   s=200.0, noise_seed=0, split="train",
                                   embed_images=True)


def test_ae_has_no_dense_bottleneck():
    model = Ae(16)
    # fully convolutional: no Dense layer anywhere in the parameter inventory
    assert not any(isinstance(m, Dense)
                   for block in model.enc_blocks + model.dec_blocks
                   for m in block.layers)
    assert all(p.data.ndim in (1, 4) for p in model.parameters().values())


def test_ae_rejects_bad_side():
    with pytest.raises(ModelError):
        Ae(12)


def test_ae_reconstruct_shape_and_range():
    model = Ae(16)
    y = np.random.default_rng(1).uniform(size=(3, 2 * 16 * 16))
    out = model.reconstruct(y)
    assert out.shape == (3, 256)
    assert out.min() > 0.0 and out.max() < 1.0
    assert np.array_equal(out, model.reconstruct(y))


def test_ae_rejects_wrong_measurement_length():
    with pytest.raises(ModelError):
        Ae(16).reconstruct(np.zeros((2, 100)))


def test_train_ae_deterministic(train_set):
    def run():
        model, log = train_ae(train_set, 16, epochs=2, lr=1e-3, batch=16, seed=4)
        return model.state_arrays(), log

    s1, log1 = run()
    s2, log2 = run()
    for name in s1:
        assert np.array_equal(s1[name], s2[name])
    assert log1 == log2


def test_train_ae_loss_decreases_early(train_set):
    _, log = train_ae(train_set, 16, epochs=5, lr=1e-3, batch=16, seed=5)
    losses = [row["loss"] for row in log]
    # moving-average non-increasing over the first epochs
    assert np.mean(losses[-2:]) <= np.mean(losses[:2])


def test_cae_requires_ae(train_set):
    with pytest.raises(ModelError, match="AE"):
        train_cae(None, train_set, 16, epochs=1, lr=1e-3, batch=16)


def test_cae_pipeline_emits_valid_classes(train_set):
    ae_model, _ = train_ae(train_set, 16, epochs=1, lr=1e-3, batch=16, seed=6)
    cae_model, log = train_cae(ae_model, train_set, 16, epochs=2, lr=1e-3,
                               batch=16, seed=6)
    recon = ae_model.reconstruct(train_set.stack_y())
    preds, probs = cae_model.classify(recon)
    assert set(np.unique(preds)) <= set(range(train_set.k))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert {"epoch", "loss", "train_acc"} == set(log[0])


def test_ae_checkpoint_round_trip(train_set, tmp_path):
    from bendlens.nn import load_checkpoint, save_checkpoint
    model, _ = train_ae(train_set, 16, epochs=1, lr=1e-3, batch=16, seed=7)
    path = tmp_path / "ae.blns"
    save_checkpoint(path, model.state_arrays())
    clone = Ae(16, init_seed=99)
    clone.load_state_arrays(load_checkpoint(path))
    y = train_set.stack_y()[:4]
    assert np.array_equal(clone.reconstruct(y), model.reconstruct(y))


def test_cae_checkpoint_round_trip(tmp_path):
    from bendlens.nn import load_checkpoint, save_checkpoint
    model = Cae(16, 3, init_seed=0)
    path = tmp_path / "cae.blns"
    save_checkpoint(path, model.state_arrays())
    clone = Cae(16, 3, init_seed=42)
    clone.load_state_arrays(load_checkpoint(path))
    imgs = np.random.default_rng(8).uniform(size=(3, 256))
    _, p1 = clone.classify(imgs)
    _, p2 = model.classify(imgs)
    assert np.array_equal(p1, p2)
