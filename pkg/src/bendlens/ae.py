"""Autoencoder baseline and its downstream classifier.

The AE maps measurement grids straight to images through a fully
convolutional encoder/decoder (no dense bottleneck). The C-AE classifier
reuses the GMVAE classifier architecture but consumes AE reconstructions.
"""

from __future__ import annotations

import numpy as np

from .nn import (
    Adam,
    BatchNorm,
    Conv2d,
    Dense,
    DivergenceError,
    Dropout,
    MaxPool2d,
    ReLU,
    Sequential,
    Tensor,
    log_softmax,
    softmax,
)
from .nn.layers import EVAL, TRAIN
from .gmvae import ModelError


def _dense_block(in_c: int, out_c: int, convs: int, rng, name: str) -> Sequential:
    layers = []
    c = in_c
    for i in range(convs):
        layers += [
            Conv2d(c, out_c, 3, 1, 1, rng, f"{name}.conv{i}", bias=False),
            BatchNorm(out_c, name=f"{name}.bn{i}"),
            ReLU(),
        ]
        c = out_c
    return Sequential(layers, name=name)


class Ae:
    """Encoder: 3 conv blocks + max pooling; decoder: 3 blocks + nearest upsampling."""

    def __init__(self, side: int, in_channels: int = 2,
                 channels: tuple = (8, 16, 32), convs_per_block: int = 2,
                 init_seed: int = 0):
        if side % 8:
            raise ModelError("image side must be divisible by 8 (three 2x2 pools)")
        self.side = side
        self.in_channels = in_channels
        rng = np.random.default_rng(init_seed)
        c1, c2, c3 = channels
        self.enc_blocks = [
            _dense_block(in_channels, c1, convs_per_block, rng, "ae.enc1"),
            _dense_block(c1, c2, convs_per_block, rng, "ae.enc2"),
            _dense_block(c2, c3, convs_per_block, rng, "ae.enc3"),
        ]
        self.pool = MaxPool2d(2)
        self.dec_blocks = [
            _dense_block(c3, c2, convs_per_block, rng, "ae.dec1"),
            _dense_block(c2, c1, convs_per_block, rng, "ae.dec2"),
            _dense_block(c1, c1, convs_per_block, rng, "ae.dec3"),
        ]
        self.out_conv = Conv2d(c1, 1, 3, 1, 1, rng, "ae.out")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for block in self.enc_blocks + self.dec_blocks:
            out.update(block.parameters())
        out.update(self.out_conv.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for block in self.enc_blocks + self.dec_blocks:
            out.update(block.buffers())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.parameters().items()}
        arrays.update(self.buffers())
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        for name, value in arrays.items():
            if name in params:
                params[name].data[...] = value
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise ModelError(f"unknown parameter '{name}' in checkpoint")

    def forward(self, y: Tensor, mode: str = EVAL, rng=None) -> Tensor:
        h = y
        for block in self.enc_blocks:
            h = block(h, mode=mode, rng=rng)
            h = self.pool(h)
        for block in self.dec_blocks:
            h = h.upsample_nearest2d(2)
            h = block(h, mode=mode, rng=rng)
        return self.out_conv(h).sigmoid()

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        yt = Tensor(_as_grid(y, self.in_channels, self.side))
        out = self.forward(yt, mode=EVAL)
        return out.data.reshape(out.shape[0], self.side * self.side)


class Cae:
    """Classifier with the GMVAE classification architecture, fed AE outputs."""

    def __init__(self, side: int, k: int, channels: tuple = (8, 16, 32),
                 hidden: int = 128, dropout: float = 0.2, init_seed: int = 0):
        if side % 8:
            raise ModelError("image side must be divisible by 8")
        self.side = side
        self.k = k
        rng = np.random.default_rng(init_seed)
        c1, c2, c3 = channels
        self.convs = Sequential([
            Conv2d(1, c1, 3, 2, 1, rng, "cae.conv1", bias=False), BatchNorm(c1, name="cae.bn1"), ReLU(),
            Conv2d(c1, c2, 3, 2, 1, rng, "cae.conv2", bias=False), BatchNorm(c2, name="cae.bn2"), ReLU(),
            Conv2d(c2, c3, 3, 2, 1, rng, "cae.conv3", bias=False), BatchNorm(c3, name="cae.bn3"), ReLU(),
        ], name="cae.convs")
        self.feat_dim = c3 * (side // 8) ** 2
        self.hidden = Dense(self.feat_dim, hidden, rng, "cae.hidden")
        self.drop = Dropout(dropout, "cae.drop")
        self.out = Dense(hidden, k, rng, "cae.out")

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.convs.parameters())
        params.update(self.hidden.parameters())
        params.update(self.out.parameters())
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.convs.buffers())

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.parameters().items()}
        arrays.update(self.buffers())
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        for name, value in arrays.items():
            if name in params:
                params[name].data[...] = value
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise ModelError(f"unknown parameter '{name}' in checkpoint")

    def logits(self, images: Tensor, mode: str = EVAL, rng=None) -> Tensor:
        h = self.convs(images, mode=mode, rng=rng)
        h = h.reshape(h.shape[0], self.feat_dim)
        h = self.hidden(h).relu()
        h = self.drop(h, mode=mode, rng=rng)
        return self.out(h)

    def classify(self, images: np.ndarray):
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 2:
            imgs = imgs.reshape(-1, 1, self.side, self.side)
        logits = self.logits(Tensor(imgs), mode=EVAL)
        probs = softmax(logits, axis=-1).data
        return probs.argmax(axis=1), probs


def _as_grid(y: np.ndarray, channels: int, side: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim == 2:
        expected = channels * side * side
        if y.shape[1] != expected:
            raise ModelError(
                f"measurement length {y.shape[1]} does not match {channels}x{side}x{side}"
            )
        y = y.reshape(-1, channels, side, side)
    return y


def train_ae(train_set, side: int, epochs: int, lr: float, batch: int,
             seed: int = 0, in_channels: int = 2, log_hook=None):
    """MSE measurement-to-image training; returns (model, per-epoch log)."""
    model = Ae(side, in_channels=in_channels, init_seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.parameters(), lr=lr)
    ys = train_set.stack_y()
    xs = train_set.stack_images().reshape(len(train_set), 1, side, side)
    n = len(train_set)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        steps = 0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            y = Tensor(_as_grid(ys[idx], in_channels, side))
            x = Tensor(xs[idx])
            out = model.forward(y, mode=TRAIN, rng=rng)
            diff = out - x
            loss = (diff * diff).mean()
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"AE diverged at epoch {epoch}, step {steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        row = {"epoch": epoch, "loss": total / steps}
        log.append(row)
        if log_hook is not None:
            log_hook(row)
    return model, log


def train_cae(ae_model: Ae, train_set, side: int, epochs: int, lr: float,
              batch: int, seed: int = 0, log_hook=None):
    """Fit the classifier on AE reconstructions of the training split."""
    if ae_model is None:
        raise ModelError("C-AE requires a trained AE model")
    model = Cae(side, train_set.k, init_seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.parameters(), lr=lr)
    ys = train_set.stack_y()
    # reconstruct in chunks: one giant AE forward pass over the whole split
    # materializes multi-GB im2col buffers
    recon = np.concatenate([ae_model.reconstruct(ys[lo : lo + 256])
                            for lo in range(0, len(ys), 256)])
    recon = recon.reshape(len(train_set), 1, side, side)
    labels = train_set.labels()
    n = len(train_set)
    log = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        correct = 0
        steps = 0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            logits = model.logits(Tensor(recon[idx]), mode=TRAIN, rng=rng)
            logp = log_softmax(logits, axis=-1)
            onehot = np.zeros((len(idx), model.k))
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            loss = -(logp * Tensor(onehot)).sum(axis=-1).mean()
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"C-AE diverged at epoch {epoch}, step {steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            steps += 1
        row = {"epoch": epoch, "loss": total / steps, "train_acc": correct / n}
        log.append(row)
        if log_hook is not None:
            log_hook(row)
    return model, log
