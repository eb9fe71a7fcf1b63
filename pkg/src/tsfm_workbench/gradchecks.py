"""Registered finite-difference gradient checks.

One entry per differentiable operation plus end-to-end checks of reduced
configurations of both encoder architectures and both classifier heads.
Everything runs in float64; the pass threshold is 1e-4 except the pure
quadratic probe, where central differences are exact up to roundoff.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .cbramod import CBraModConfig, CBraModEncoder, mae_loss, mask_patches
from .mantis import MantisConfig, MantisEncoder
from .training import ClassifierHead, HeadConfig, cross_entropy, info_nce

DEFAULT_THRESHOLD = 1e-4


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _sq_sum(t: Tensor) -> Tensor:
    return (t * t).sum()


# -- per-op probes ---------------------------------------------------------------


def check_quadratic(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 6)
    return grad_check(lambda a: _sq_sum(a[0]), [x]), 1e-8


def check_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    err = grad_check(lambda t: _sq_sum(ad.matmul(t[0], t[1])), [a, b])
    a2, b2 = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    err = max(err, grad_check(lambda t: _sq_sum(ad.matmul(t[0], t[1])), [a2, b2]))
    return err, DEFAULT_THRESHOLD


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    x, k = _rand(rng, 2, 3, 12), _rand(rng, 4, 3, 5)
    err = grad_check(lambda t: _sq_sum(ad.conv1d(t[0], t[1], stride=2, padding=1)), [x, k])
    x2, k2 = _rand(rng, 3, 1, 10), _rand(rng, 2, 1, 4)
    err = max(err, grad_check(
        lambda t: _sq_sum(ad.conv1d(t[0], t[1], stride=1, padding=(1, 2))), [x2, k2]))
    return err, DEFAULT_THRESHOLD


def check_depthwise_grid_conv(seed):
    rng = np.random.default_rng(seed)
    x, w = _rand(rng, 2, 4, 5, 3), _rand(rng, 3, 3)
    err = grad_check(lambda t: _sq_sum(ad.depthwise_grid_conv(t[0], t[1], axis=2)), [x, w])
    w2 = _rand(rng, 3, 3)
    err = max(err, grad_check(
        lambda t: _sq_sum(ad.depthwise_grid_conv(t[0], t[1], axis=1)), [x, w2]))
    return err, DEFAULT_THRESHOLD


def check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _rand(rng, 3, 4, 6), _rand(rng, 6), _rand(rng, 6)
    err = grad_check(lambda t: _sq_sum(ad.layer_norm(t[0], t[1], t[2])), [x, g, b])
    return err, DEFAULT_THRESHOLD


def check_softmax_attention(seed):
    rng = np.random.default_rng(seed)
    q, k, v = _rand(rng, 2, 5, 4), _rand(rng, 2, 5, 4), _rand(rng, 2, 5, 4)
    err = grad_check(lambda t: _sq_sum(ad.softmax_attention(t[0], t[1], t[2])), [q, k, v])
    return err, DEFAULT_THRESHOLD


def check_elementwise(seed):
    rng = np.random.default_rng(seed)
    x, y = _rand(rng, 3, 4), _rand(rng, 3, 4)
    err = grad_check(lambda t: _sq_sum(t[0] * t[1] + t[0] - t[1]), [x, y])
    z = _rand(rng, 8)
    err = max(err, grad_check(lambda t: _sq_sum(ad.gelu(t[0])), [z]))
    err = max(err, grad_check(lambda t: _sq_sum(ad.elu(t[0])), [z]))
    w = Tensor(rng.uniform(0.5, 2.0, size=6), requires_grad=True, dtype=np.float64)
    err = max(err, grad_check(lambda t: _sq_sum(ad.tlog(ad.texp(t[0]) + ad.tsqrt(t[0]))), [w]))
    return err, DEFAULT_THRESHOLD


def check_dropout_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 4, 5)

    def f(t):
        mask_rng = np.random.default_rng(seed + 1)  # frozen mask per evaluation
        return _sq_sum(ad.dropout(t[0], 0.4, mask_rng))

    return grad_check(f, [x]), DEFAULT_THRESHOLD


def check_pool_reshape(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 12)
    err = grad_check(lambda t: _sq_sum(ad.mean_pool(t[0], axis=-1, window=4)), [x])
    err = max(err, grad_check(
        lambda t: _sq_sum(ad.swapaxes(t[0], 0, 2).reshape(12, 6)[1:4, :2]), [x]))
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    err = max(err, grad_check(lambda t: _sq_sum(ad.concat([t[0], t[1]], axis=1)), [a, b]))
    err = max(err, grad_check(
        lambda t: _sq_sum(ad.broadcast_to(t[0].reshape(2, 1, 3), (2, 4, 3))), [a]))
    return err, DEFAULT_THRESHOLD


def check_losses(seed):
    rng = np.random.default_rng(seed)
    logits = _rand(rng, 5, 3)
    labels = rng.integers(0, 3, size=5)
    err = grad_check(lambda t: cross_entropy(t[0], labels), [logits])
    za, zb = _rand(rng, 4, 6), _rand(rng, 4, 6)
    err = max(err, grad_check(lambda t: info_nce(t[0], t[1], 0.5), [za, zb]))
    return err, DEFAULT_THRESHOLD


# -- end-to-end probes ---------------------------------------------------------------


def mini_mantis_config() -> MantisConfig:
    return MantisConfig(token_dim=32, n_heads=4, scalar_dim=8, n_blocks=2, dropout=0.0)


def mini_cbramod_config() -> CBraModConfig:
    return CBraModConfig(patch_len=40, embed_dim=40, n_blocks=2, n_heads=4)


def _params_check(encoder_forward, params: dict, seed, coords=4):
    names = sorted(params)
    inputs = [params[n] for n in names]

    def f(tensors):
        return encoder_forward(dict(zip(names, tensors)))

    return grad_check(f, inputs, coords_per_input=coords,
                      rng=np.random.default_rng(seed))


def check_mantis_mini(seed):
    enc = MantisEncoder(mini_mantis_config(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    prepared = enc.prepare(rng.normal(size=(1, 1, 96)))

    def forward(params):
        enc.params = params
        return _sq_sum(enc.encode(prepared, rng=None))

    return _params_check(forward, dict(enc.params), seed), DEFAULT_THRESHOLD


def check_cbramod_mini(seed):
    enc = CBraModEncoder(mini_cbramod_config(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    grid = enc.prepare(rng.normal(size=(1, 2, 120)))
    mask = mask_patches(2, 3, 0.5, np.random.default_rng(seed + 200)).mask

    def forward(params):
        enc.params = params
        encoded = enc.encode(grid, mask=mask)
        return mae_loss(enc.reconstruct(encoded), grid, mask)

    return _params_check(forward, dict(enc.params), seed), DEFAULT_THRESHOLD


def check_heads(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=4)
    features = rng.normal(size=(4, 10))
    err = 0.0
    for kind, hidden in (("linear_preln", ()), ("mlp3", (8, 6))):
        cfg = HeadConfig(kind=kind, in_dim=10, n_classes=3,
                         hidden=hidden or (8, 6), dropout=0.0)
        head = ClassifierHead(cfg, seed=seed, dtype=np.float64)

        def forward(params, head=head):
            head.params = params
            return cross_entropy(head.forward(Tensor(features, dtype=np.float64), rng=None), labels)

        err = max(err, _params_check(forward, dict(head.params), seed, coords=8))
    return err, DEFAULT_THRESHOLD


REGISTRY = [
    ("ops.quadratic", "ops", check_quadratic),
    ("ops.matmul", "ops", check_matmul),
    ("ops.conv1d", "ops", check_conv1d),
    ("ops.depthwise_grid_conv", "ops", check_depthwise_grid_conv),
    ("ops.layer_norm", "ops", check_layer_norm),
    ("ops.softmax_attention", "ops", check_softmax_attention),
    ("ops.elementwise", "ops", check_elementwise),
    ("ops.dropout_fixed_mask", "ops", check_dropout_fixed_mask),
    ("ops.pool_reshape_concat", "ops", check_pool_reshape),
    ("training.losses", "training", check_losses),
    ("training.heads", "training", check_heads),
    ("mantis.mini_end_to_end", "mantis", check_mantis_mini),
    ("cbramod.mini_end_to_end", "cbramod", check_cbramod_mini),
]


def run_registry(module: str | None = None, seeds=(0, 1, 2)):
    """Run (a module's) registered checks; returns rows of (name, err, threshold, ok)."""
    rows = []
    for name, mod, fn in REGISTRY:
        if module is not None and mod != module and name != module:
            continue
        worst = 0.0
        threshold = DEFAULT_THRESHOLD
        for seed in seeds:
            err, threshold = fn(seed)
            worst = max(worst, err)
        rows.append((name, worst, threshold, worst < threshold))
    return rows
