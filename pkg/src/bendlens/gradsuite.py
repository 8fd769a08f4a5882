"""Gradient verification suite behind the `gradcheck` CLI subcommand.

Every layer kind, every loss term, and both assembled objectives are checked
against central finite differences across many random seeds. Stochastic
pieces (dropout masks, Gumbel and Gaussian draws) are frozen per seed by
rebuilding the same rng stream on every loss evaluation.
"""

from __future__ import annotations

import numpy as np

from .ae import Ae
from .gmvae import (
    Gmvae,
    GmvaeHyper,
    kl_categorical_uniform,
    kl_gaussian_diag,
    reconstruction_term,
    triplet_loss,
)
from .nn import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    MaxPool2d,
    Tensor,
    TransposedConv2d,
    grad_check,
)
from .nn.layers import TRAIN

THRESHOLD = 1e-4


def _layer_checks(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {}

    dense = Dense(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    t = rng.normal(size=(4, 3))
    results["dense"] = grad_check(
        lambda: ((dense(x) - Tensor(t)) ** 2.0).sum(), dense.parameters())

    conv = Conv2d(2, 3, 3, 2, 1, rng)
    xi = Tensor(rng.normal(size=(3, 2, 8, 8)))
    tgt = rng.normal(size=(3, 3, 4, 4))
    results["conv2d"] = grad_check(
        lambda: ((conv(xi) - Tensor(tgt)) ** 2.0).sum(), conv.parameters())

    tconv = TransposedConv2d(3, 2, 3, 2, 1, 1, rng)
    zi = Tensor(rng.normal(size=(2, 3, 4, 4)))
    tgt = rng.normal(size=(2, 2, 8, 8))
    results["transposed_conv2d"] = grad_check(
        lambda: ((tconv(zi) - Tensor(tgt)) ** 2.0).sum(), tconv.parameters())

    bn = BatchNorm(3)
    bx = Tensor(rng.normal(size=(6, 3, 4, 4)), requires_grad=True)
    bt = rng.normal(size=(6, 3, 4, 4))

    def bn_loss():
        return ((bn(bx, mode=TRAIN) - Tensor(bt)) ** 2.0).sum()

    results["batchnorm"] = grad_check(bn_loss, {**bn.parameters(), "input": bx})

    # inputs bounded away from 0 so the kink never sits inside the stencil
    raw = rng.normal(size=(4, 6))
    raw += np.where(raw >= 0, 0.5, -0.5)
    rx = Tensor(raw, requires_grad=True)
    rw = rng.normal(size=(4, 6))
    results["relu"] = grad_check(lambda: (rx.relu() * Tensor(rw)).sum(), {"input": rx})

    sx = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    st = rng.normal(size=(4, 6))
    results["sigmoid"] = grad_check(
        lambda: ((sx.sigmoid() - Tensor(st)) ** 2.0).sum(), {"input": sx})

    drop = Dropout(0.3)
    dx = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    mask_seed = seed + 1000

    def drop_loss():
        return (drop(dx, mode=TRAIN, rng=np.random.default_rng(mask_seed)) ** 2.0).sum()

    results["dropout"] = grad_check(drop_loss, {"input": dx})

    pool = MaxPool2d(2)
    # jitter keeps pooled maxima unique so the finite difference stays one-sided
    base = rng.normal(size=(2, 2, 6, 6))
    base += np.arange(base.size).reshape(base.shape) * 1e-3
    px = Tensor(base, requires_grad=True)
    results["maxpool2d"] = grad_check(lambda: (pool(px) ** 2.0).sum(), {"input": px})
    return results


def _loss_checks(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {}

    mu_q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    lv_q = Tensor(rng.normal(size=(3, 4)) * 0.3, requires_grad=True)
    mu_p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    lv_p = Tensor(rng.normal(size=(3, 4)) * 0.3, requires_grad=True)
    results["kl_gaussian"] = grad_check(
        lambda: kl_gaussian_diag(mu_q, lv_q, mu_p, lv_p),
        {"mu_q": mu_q, "lv_q": lv_q, "mu_p": mu_p, "lv_p": lv_p})

    from .nn import softmax

    logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    results["kl_categorical"] = grad_check(
        lambda: kl_categorical_uniform(softmax(logits)), {"logits": logits})

    x = rng.uniform(size=(3, 8))
    mu_x = Tensor(rng.uniform(0.1, 0.9, size=(3, 8)), requires_grad=True)
    results["reconstruction"] = grad_check(
        lambda: reconstruction_term(Tensor(x), mu_x) * -1.0, {"mu_x": mu_x})

    emb = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2])
    results["triplet"] = grad_check(
        lambda: triplet_loss(emb, labels, margin=1.0)[0], {"embeddings": emb})
    return results


def _objective_checks(seed: int, max_entries: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {}

    hyper = GmvaeHyper(d=4, hidden=5, conv_channels=(2, 2, 3))
    model = Gmvae(8, 3, hyper, in_channels=2, init_seed=seed)
    # nudge post-ReLU dense biases positive so no unit is dead across the
    # whole batch (a dead unit has an exactly-zero gradient, which finite
    # differences can only resolve down to truncation noise)
    model.cls_hidden.bias.data += 0.5
    model.gen_dense.bias.data += 0.5
    batch = 8
    y = Tensor(rng.uniform(size=(batch, 2, 8, 8)))
    x = Tensor(rng.uniform(size=(batch, 64)))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    noise_seed = seed + 2000

    def gmvae_loss():
        frozen = np.random.default_rng(noise_seed)
        gumbel = -np.log(-np.log(frozen.uniform(1e-12, 1.0, size=(batch, 3))))
        eps = frozen.normal(size=(batch, hyper.d))
        total, _, _ = model.loss(y, x, labels, rng=np.random.default_rng(noise_seed + 1),
                                 eps=eps, gumbel=gumbel)
        return total

    results["gmvae_objective"] = grad_check(
        gmvae_loss, model.parameters(), max_entries=max_entries,
        rng=np.random.default_rng(seed), kink_aware=True)

    ae = Ae(8, in_channels=2, channels=(2, 3, 4), convs_per_block=1, init_seed=seed)
    ya = Tensor(rng.uniform(size=(batch, 2, 8, 8)))
    xa = Tensor(rng.uniform(size=(batch, 1, 8, 8)))

    def ae_loss():
        out = ae.forward(ya, mode=TRAIN)
        diff = out - xa
        return (diff * diff).mean()

    results["ae_objective"] = grad_check(
        ae_loss, ae.parameters(), max_entries=max_entries,
        rng=np.random.default_rng(seed + 1), kink_aware=True)
    return results


def run_gradient_suite(seeds: int = 20, objective_entries: int = 6):
    """Returns rows of (check name, worst error over seeds, passed)."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, err in _layer_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in _loss_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in _objective_checks(seed, objective_entries).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return [(name, err, err <= THRESHOLD) for name, err in worst.items()]
