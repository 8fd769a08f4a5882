"""Gaussian-mixture variational autoencoder for measurement vectors.

Inference nets q(c|y) and q(z|y,c), prior p(z|c), generator p(x|z), trained
by maximizing a weighted ELBO plus a triplet metric-learning penalty so that
measurements of the same class cluster in the latent space regardless of
fiber configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Adam,
    BatchNorm,
    Conv2d,
    Dense,
    DivergenceError,
    Dropout,
    ReLU,
    Sequential,
    Tensor,
    TransposedConv2d,
    softmax,
)
from .nn.layers import EVAL, TRAIN

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class ModelError(ValueError):
    pass


# ---- loss building blocks -------------------------------------------------

def gumbel_softmax_sample(logits: Tensor, temperature: float,
                          rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> Tensor:
    """Differentiable draw from the Concrete relaxation of Cat(softmax(logits))."""
    if temperature <= 0:
        raise ModelError(f"Gumbel-Softmax temperature must be positive, got {temperature}")
    if noise is None:
        if rng is None:
            raise ModelError("gumbel_softmax_sample needs an rng or explicit noise")
        u = rng.uniform(1e-12, 1.0, size=logits.shape)
        noise = -np.log(-np.log(u))
    return softmax((logits + Tensor(noise)) / temperature, axis=-1)


def kl_gaussian_diag(mu_q: Tensor, logvar_q: Tensor,
                     mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """KL(N(mu_q, diag var_q) || N(mu_p, diag var_p)), summed over dimensions.

    Batched inputs (B,d) give the batch mean of per-sample KLs.
    """
    diff = mu_q - mu_p
    term = logvar_p - logvar_q + (logvar_q.exp() + diff * diff) / logvar_p.exp() - 1.0
    per_sample = term.sum(axis=-1) * 0.5
    if per_sample.data.ndim == 0:
        return per_sample
    return per_sample.mean()


def kl_categorical(pi: Tensor, ref: np.ndarray) -> Tensor:
    """KL(Cat(pi) || Cat(ref)) = sum pi log(pi / ref), with 0 log 0 = 0.

    ref is a fixed reference distribution (broadcastable against pi); every
    ref entry must be positive or the divergence is infinite.
    """
    safe = pi.clip(1e-300, 2.0)  # upper bound never binds; avoids log(0) only
    per_sample = (pi * (safe.log() - Tensor(np.log(ref)))).sum(axis=-1)
    if per_sample.data.ndim == 0:
        return per_sample
    return per_sample.mean()


def kl_categorical_uniform(pi: Tensor) -> Tensor:
    """KL(Cat(pi) || uniform over k) = sum pi log(k pi), with 0 log 0 = 0."""
    k = pi.shape[-1]
    return kl_categorical(pi, np.full(k, 1.0 / k))


def reconstruction_term(x: Tensor, mu_x: Tensor) -> Tensor:
    """Unit-variance Gaussian log-likelihood up to constants: -0.5 ||x - mu||^2.

    Summed over pixels; batched inputs give the batch mean.
    """
    diff = x - mu_x
    per_sample = (diff * diff).sum(axis=-1) * (-0.5)
    if per_sample.data.ndim == 0:
        return per_sample
    return per_sample.mean()


def triplet_loss(embeddings: Tensor, labels: np.ndarray, margin: float = 1.0):
    """Batch-hard triplet loss on squared Euclidean distances.

    Returns (loss, single_class_batch); a batch with fewer than two classes
    contributes zero loss and raises the warning flag.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return Tensor(0.0), True
    n2 = (embeddings * embeddings).sum(axis=1, keepdims=True)
    dist = n2 + n2.transpose(1, 0) - (embeddings @ embeddings.transpose(1, 0)) * 2.0
    same = labels[:, None] == labels[None, :]
    big = 1e12
    hardest_pos = (dist + Tensor(np.where(same, 0.0, -big))).max(axis=1)
    hardest_neg = ((dist * -1.0) + Tensor(np.where(same, -big, 0.0))).max(axis=1) * -1.0
    hinge = (hardest_pos - hardest_neg + margin).relu()
    return hinge.mean(), False


# ---- model ----------------------------------------------------------------

@dataclass
class GmvaeHyper:
    alpha: float = 1.0
    beta: float = 200.0
    omega: float = 50.0
    gamma: float = 50.0
    tau: float = 0.5
    margin: float = 1.0
    label_smooth: float = 0.001
    d: int = 64
    hidden: int = 128
    conv_channels: tuple = (8, 16, 32)
    dropout: float = 0.2


class Gmvae:
    def __init__(self, side: int, k: int, hyper: GmvaeHyper | None = None,
                 in_channels: int = 2, init_seed: int = 0):
        self.hyper = hyper or GmvaeHyper()
        h = self.hyper
        if side % 8:
            raise ModelError("image side must be divisible by 8 (three stride-2 convs)")
        self.side = side
        self.k = k
        self.in_channels = in_channels
        rng = np.random.default_rng(init_seed)

        c1, c2, c3 = h.conv_channels
        self.encoder = Sequential([
            Conv2d(in_channels, c1, 3, 2, 1, rng, "enc.conv1", bias=False), BatchNorm(c1, name="enc.bn1"), ReLU(),
            Conv2d(c1, c2, 3, 2, 1, rng, "enc.conv2", bias=False), BatchNorm(c2, name="enc.bn2"), ReLU(),
            Conv2d(c2, c3, 3, 2, 1, rng, "enc.conv3", bias=False), BatchNorm(c3, name="enc.bn3"), ReLU(),
        ], name="enc")
        self.feat_dim = c3 * (side // 8) ** 2

        self.cls_hidden = Dense(self.feat_dim, h.hidden, rng, "cls.hidden")
        self.cls_drop = Dropout(h.dropout, "cls.drop")
        self.cls_out = Dense(h.hidden, k, rng, "cls.out")

        self.feat_drop = Dropout(h.dropout, "inf.drop")
        self.inf_mu = Dense(self.feat_dim + k, h.d, rng, "inf.mu")
        self.inf_logvar = Dense(self.feat_dim + k, h.d, rng, "inf.logvar")

        self.prior_mu = Dense(k, h.d, rng, "prior.mu")
        self.prior_logvar = Dense(k, h.d, rng, "prior.logvar")

        gen_side = side // 8
        self.gen_dense = Dense(h.d, c3 * gen_side * gen_side, rng, "gen.dense")
        self.gen_convs = Sequential([
            TransposedConv2d(c3, c2, 3, 2, 1, 1, rng, "gen.tconv1", bias=False), BatchNorm(c2, name="gen.bn1"), ReLU(),
            TransposedConv2d(c2, c1, 3, 2, 1, 1, rng, "gen.tconv2", bias=False), BatchNorm(c1, name="gen.bn2"), ReLU(),
            TransposedConv2d(c1, c1, 3, 2, 1, 1, rng, "gen.tconv3", bias=False), BatchNorm(c1, name="gen.bn3"), ReLU(),
        ], name="gen")
        self.gen_out = Dense(c1 * side * side, side * side, rng, "gen.out")
        self._gen_shape = (c3, gen_side, gen_side)
        self._gen_c1 = c1
        self.single_class_batches = 0

    # -- parameter bookkeeping --

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod in (self.encoder, self.cls_hidden, self.cls_out, self.inf_mu,
                    self.inf_logvar, self.prior_mu, self.prior_logvar,
                    self.gen_dense, self.gen_convs, self.gen_out):
            out.update(mod.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        out.update(self.encoder.buffers())
        out.update(self.gen_convs.buffers())
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
                if params[name].data.shape != value.shape:
                    raise ModelError(f"shape mismatch loading parameter '{name}'")
                params[name].data[...] = value
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise ModelError(f"unknown parameter '{name}' in checkpoint")

    # -- forward pieces --

    def _features(self, y: Tensor, mode: str, rng=None) -> Tensor:
        if y.data.ndim != 4 or y.shape[1:] != (self.in_channels, self.side, self.side):
            raise ModelError(
                f"expected measurements shaped (B,{self.in_channels},{self.side},{self.side}), got {y.shape}"
            )
        feat = self.encoder(y, mode=mode, rng=rng)
        return feat.reshape(feat.shape[0], self.feat_dim)

    def class_logits(self, feat: Tensor, mode: str, rng=None) -> Tensor:
        hid = self.cls_hidden(feat).relu()
        hid = self.cls_drop(hid, mode=mode, rng=rng)
        return self.cls_out(hid)

    def encode(self, y: Tensor, mode: str = TRAIN, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None, gumbel: np.ndarray | None = None):
        """Returns (logits, sampled categories, mu_z, logvar_z, sampled z)."""
        feat = self._features(y, mode, rng)
        logits = self.class_logits(feat, mode, rng)
        if mode == TRAIN:
            c_sample = gumbel_softmax_sample(logits, self.hyper.tau, rng=rng, noise=gumbel)
        else:
            onehot = np.zeros((logits.shape[0], self.k))
            onehot[np.arange(logits.shape[0]), logits.data.argmax(axis=1)] = 1.0
            c_sample = Tensor(onehot)
        feat_d = self.feat_drop(feat, mode=mode, rng=rng)
        h = Tensor.concat([feat_d, c_sample], axis=1)
        mu_z = self.inf_mu(h)
        logvar_z = self.inf_logvar(h).clip(LOGVAR_MIN, LOGVAR_MAX)
        if mode == TRAIN:
            if eps is None:
                if rng is None:
                    raise ModelError("encode in train mode needs an rng")
                eps = rng.normal(size=mu_z.shape)
        else:
            eps = np.zeros(mu_z.shape) if eps is None else eps
        z = mu_z + (logvar_z * 0.5).exp() * Tensor(eps)
        return logits, c_sample, mu_z, logvar_z, z

    def prior(self, c: Tensor):
        mu = self.prior_mu(c)
        logvar = self.prior_logvar(c).clip(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def decode(self, z: Tensor, mode: str = EVAL, rng=None) -> Tensor:
        h = self.gen_dense(z).relu()
        c3, gs, _ = self._gen_shape
        h = h.reshape(h.shape[0], c3, gs, gs)
        h = self.gen_convs(h, mode=mode, rng=rng)
        h = h.reshape(h.shape[0], self._gen_c1 * self.side * self.side)
        return self.gen_out(h).sigmoid()

    # -- objective --

    def loss(self, y: Tensor, x: Tensor, labels: np.ndarray,
             rng: np.random.Generator | None = None, mode: str = TRAIN,
             eps: np.ndarray | None = None, gumbel: np.ndarray | None = None):
        """Minimized objective and its term breakdown.

        Maximizes -alpha KLg - beta KLc + omega recon - gamma triplet by
        minimizing the negation.
        """
        logits, c_sample, mu_z, logvar_z, z = self.encode(
            y, mode=mode, rng=rng, eps=eps, gumbel=gumbel)
        # The class is observed while fitting: the generative prior p(z|c) is
        # conditioned on the true one-hot label, and the categorical term
        # regularizes q(c|y) toward the observed label (smoothed so the KL
        # stays finite) rather than toward an uninformative reference. This
        # is what makes classify() predict actual class indices; with a
        # uniform reference and beta=200 the head provably sits at chance.
        labels = np.asarray(labels)
        onehot = np.zeros((len(labels), self.k))
        onehot[np.arange(len(labels)), labels] = 1.0
        mu_p, logvar_p = self.prior(Tensor(onehot))
        pi = softmax(logits, axis=-1)
        klg = kl_gaussian_diag(mu_z, logvar_z, mu_p, logvar_p)
        eps_s = self.hyper.label_smooth
        ref = onehot * (1.0 - eps_s) + eps_s / self.k
        klc = kl_categorical(pi, ref)
        mu_x = self.decode(z, mode=mode, rng=rng)
        recon = reconstruction_term(x, mu_x)
        trip, single = triplet_loss(mu_z, labels, self.hyper.margin)
        if single:
            self.single_class_batches += 1
        h = self.hyper
        total = klg * h.alpha + klc * h.beta - recon * h.omega + trip * h.gamma
        terms = {
            "kl_gauss": klg.item(), "kl_cat": klc.item(),
            "recon": recon.item(), "triplet": trip.item(),
            "total": total.item(),
        }
        for name, value in terms.items():
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss term '{name}'")
        return total, terms, logits

    # -- inference --

    def classify(self, y: np.ndarray):
        """(predicted classes, probability matrix) for a batch of measurements."""
        yt = Tensor(self._as_grid(y))
        feat = self._features(yt, EVAL)
        logits = self.class_logits(feat, EVAL)
        probs = softmax(logits, axis=-1).data
        return probs.argmax(axis=1), probs

    def latent_means(self, y: np.ndarray) -> np.ndarray:
        yt = Tensor(self._as_grid(y))
        _, _, mu_z, _, _ = self.encode(yt, mode=EVAL)
        return mu_z.data

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        """Deterministic reconstruction: argmax class, mean latent, decoder mean."""
        yt = Tensor(self._as_grid(y))
        _, _, mu_z, _, _ = self.encode(yt, mode=EVAL)
        return self.decode(mu_z, mode=EVAL).data

    def _as_grid(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[None, :]
        if y.ndim == 2:
            expected = self.in_channels * self.side * self.side
            if y.shape[1] != expected:
                raise ModelError(
                    f"measurement length {y.shape[1]} does not match "
                    f"{self.in_channels}x{self.side}x{self.side}"
                )
            y = y.reshape(-1, self.in_channels, self.side, self.side)
        return y


# ---- training -------------------------------------------------------------

def train_gmvae(train_set, side: int, hyper: GmvaeHyper, epochs: int, lr: float,
                batch: int, seed: int = 0, in_channels: int = 2,
                log_hook=None) -> tuple[Gmvae, list[dict]]:
    """Train on a MeasurementDataset; returns (model, per-epoch log rows)."""
    labels = train_set.labels()
    if len(np.unique(labels)) < 2:
        raise ModelError("training set must span at least 2 classes")
    if len(set(train_set.config_ids())) < 2:
        raise ModelError("training set must span at least 2 configurations")
    model = Gmvae(side, train_set.k, hyper, in_channels=in_channels, init_seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.parameters(), lr=lr)
    ys = train_set.stack_y()
    xs = train_set.stack_images()
    n = len(train_set)
    log: list[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {"kl_gauss": 0.0, "kl_cat": 0.0, "recon": 0.0, "triplet": 0.0, "total": 0.0}
        correct = 0
        steps = 0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            y = Tensor(model._as_grid(ys[idx]))
            x = Tensor(xs[idx])
            try:
                total, terms, logits = model.loss(y, x, labels[idx], rng=rng)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"divergence at epoch {epoch}, step {steps}: {exc}") from exc
            opt.zero_grad()
            total.backward()
            opt.step()
            for key in sums:
                sums[key] += terms[key]
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            steps += 1
        row = {"epoch": epoch, "loss": sums["total"] / steps,
               "kl_gauss": sums["kl_gauss"] / steps, "kl_cat": sums["kl_cat"] / steps,
               "recon": sums["recon"] / steps, "triplet": sums["triplet"] / steps,
               "train_acc": correct / n}
        log.append(row)
        if log_hook is not None:
            log_hook(row)
    return model, log
