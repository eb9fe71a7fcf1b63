"""Channel-independent tokenizer + transformer encoder (Mantis architecture).

Each channel is resized to a fixed length, instance-standardized, cut into 32
token windows by a conv + mean-pool tokenizer (applied to the series and its
first difference), enriched with per-window raw statistics through a scalar
encoder, projected to the token width, and run through a stack of pre-norm
transformer blocks behind a learnable class token.  Channel descriptors are
the final class embeddings, concatenated in channel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .signal import first_difference, instance_standardize, patch_stats, resize_to_length

PATCH_WINDOW = 16  # samples pooled into one token


@dataclass
class MantisConfig:
    token_dim: int = 256
    n_patches: int = 32
    input_len: int = 512
    scalar_dim: int = 64
    n_blocks: int = 6
    n_heads: int = 8
    dropout: float = 0.1
    conv_kernel: int = 16

    def __post_init__(self):
        if self.token_dim % self.n_heads != 0:
            raise ConfigError(f"token_dim {self.token_dim} must be divisible by n_heads {self.n_heads}")
        if self.input_len != PATCH_WINDOW * self.n_patches:
            raise ConfigError(f"input_len must equal {PATCH_WINDOW} * n_patches, got {self.input_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def proj_in_dim(self):
        return 2 * self.token_dim + self.scalar_dim


def sinusoidal_position_encoding(length: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos table with base 10000; pe[pos, 2i] = sin(pos / 10000^(2i/dim))."""
    if dim % 2 != 0:
        raise ConfigError(f"encoding dim must be even, got {dim}")
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def augment(x: np.ndarray, rng: np.random.Generator,
            crop_min: float = 0.8, crop_max: float = 1.0,
            jitter_scale: float = 0.05) -> np.ndarray:
    """Random crop (fraction of the support, resized back) plus Gaussian jitter.

    Jitter sigma is ``jitter_scale`` times the per-channel std.  Crop and jitter
    draws are independent per call; crop_min == crop_max == 1 with zero jitter
    is the identity.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_channels, length = x.shape
    frac = rng.uniform(crop_min, crop_max)
    crop_len = max(2, int(round(frac * length)))
    start = int(rng.integers(0, length - crop_len + 1))
    cropped = x[:, start:start + crop_len]
    if crop_len == length:
        out = cropped.copy()
    else:
        old = np.linspace(0.0, 1.0, crop_len)
        new = np.linspace(0.0, 1.0, length)
        out = np.stack([np.interp(new, old, row) for row in cropped])
    if jitter_scale > 0.0:
        sigma = jitter_scale * x.std(axis=-1, keepdims=True)
        out = out + rng.normal(0.0, 1.0, out.shape) * sigma
    return out


def _linear(rng, fan_in, fan_out, dtype):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)


class MantisEncoder:
    """Channel-independent encoder; parameters live under the ``mantis.*`` namespace."""

    kind = "mantis"

    def __init__(self, config: MantisConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or MantisConfig()
        self.dtype = dtype
        self.params = self._init_params(np.random.default_rng(seed))
        self._pe_cache = None

    def _init_params(self, rng) -> dict[str, Tensor]:
        cfg = self.config
        d = cfg.token_dim
        p: dict[str, np.ndarray] = {}
        p["mantis.tokenizer.conv.weight"] = (
            rng.normal(0.0, 1.0 / np.sqrt(cfg.conv_kernel), size=(d, 1, cfg.conv_kernel)))
        p["mantis.tokenizer.conv.bias"] = np.zeros(d)
        p["mantis.tokenizer.scalar.weight"] = _linear(rng, 2, cfg.scalar_dim, np.float64)
        p["mantis.tokenizer.scalar.bias"] = np.zeros(cfg.scalar_dim)
        p["mantis.tokenizer.proj.weight"] = _linear(rng, cfg.proj_in_dim, d, np.float64)
        p["mantis.tokenizer.norm.gamma"] = np.ones(d)
        p["mantis.tokenizer.norm.beta"] = np.zeros(d)
        p["mantis.cls_token"] = rng.normal(0.0, 0.02, size=(d,))
        for b in range(cfg.n_blocks):
            pre = f"mantis.blocks.{b}"
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}.weight"] = _linear(rng, d, d, np.float64)
                p[f"{pre}.attn.{name}.bias"] = np.zeros(d)
            p[f"{pre}.norm1.gamma"] = np.ones(d)
            p[f"{pre}.norm1.beta"] = np.zeros(d)
            p[f"{pre}.norm2.gamma"] = np.ones(d)
            p[f"{pre}.norm2.beta"] = np.zeros(d)
            p[f"{pre}.mlp.fc1.weight"] = _linear(rng, d, 4 * d, np.float64)
            p[f"{pre}.mlp.fc1.bias"] = np.zeros(4 * d)
            p[f"{pre}.mlp.fc2.weight"] = _linear(rng, 4 * d, d, np.float64)
            p[f"{pre}.mlp.fc2.bias"] = np.zeros(d)
        return {k: Tensor(v, requires_grad=True, dtype=self.dtype) for k, v in p.items()}

    # -- preprocessing ---------------------------------------------------------

    def prepare(self, batch: np.ndarray) -> dict[str, np.ndarray]:
        """Resize / standardize / difference a raw (B, C, T) batch.

        Returns constant model inputs: the standardized series, its first
        difference, and per-window (mean, std) statistics of the raw resized
        series, each flattened over (batch, channel).
        """
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        n_batch, n_channels, _ = batch.shape
        flat = batch.reshape(n_batch * n_channels, -1)
        raw = resize_to_length(flat, self.config.input_len)
        stats = patch_stats(raw, self.config.n_patches)
        norm = instance_standardize(raw)
        return {
            "x_norm": norm,
            "x_diff": first_difference(norm),
            "stats": np.stack([stats.mu, stats.sigma], axis=-1),  # (N, 32, 2)
            "n_batch": n_batch,
            "n_channels": n_channels,
        }

    # -- forward pieces -----------------------------------------------------------

    def _conv_tokens(self, x: Tensor) -> Tensor:
        """Conv (same-padded) + mean pooling: (N, L) -> (N, n_patches, token_dim)."""
        cfg = self.config
        k = cfg.conv_kernel
        pad = ((k - 1) // 2, k // 2)
        h = ad.conv1d(x.reshape(x.shape[0], 1, cfg.input_len),
                      self.params["mantis.tokenizer.conv.weight"], stride=1, padding=pad)
        h = h + self.params["mantis.tokenizer.conv.bias"].reshape(1, cfg.token_dim, 1)
        pooled = ad.mean_pool(h, axis=-1, window=PATCH_WINDOW)
        return ad.swapaxes(pooled, -1, -2)

    def tokenize(self, x_norm: Tensor, x_diff: Tensor, stats: Tensor) -> Tensor:
        """Fuse base, differential, and scalar-statistics features into tokens."""
        base = self._conv_tokens(x_norm)
        diff = self._conv_tokens(x_diff)
        scal = ad.gelu(ad.matmul(stats, self.params["mantis.tokenizer.scalar.weight"])
                       + self.params["mantis.tokenizer.scalar.bias"])
        fused = ad.concat([base, diff, scal], axis=-1)
        proj = ad.matmul(fused, self.params["mantis.tokenizer.proj.weight"])
        return ad.layer_norm(proj, self.params["mantis.tokenizer.norm.gamma"],
                             self.params["mantis.tokenizer.norm.beta"])

    def _attention(self, x: Tensor, block: int, rng) -> Tensor:
        cfg = self.config
        pre = f"mantis.blocks.{block}.attn"
        n_tokens = x.shape[-2]
        head_dim = cfg.token_dim // cfg.n_heads

        def split_heads(t):
            t = t.reshape(t.shape[0], n_tokens, cfg.n_heads, head_dim)
            return ad.swapaxes(t, 1, 2)

        q = split_heads(ad.matmul(x, self.params[f"{pre}.wq.weight"]) + self.params[f"{pre}.wq.bias"])
        k = split_heads(ad.matmul(x, self.params[f"{pre}.wk.weight"]) + self.params[f"{pre}.wk.bias"])
        v = split_heads(ad.matmul(x, self.params[f"{pre}.wv.weight"]) + self.params[f"{pre}.wv.bias"])
        attn = ad.softmax_attention(q, k, v)
        merged = ad.swapaxes(attn, 1, 2).reshape(x.shape[0], n_tokens, cfg.token_dim)
        out = ad.matmul(merged, self.params[f"{pre}.wo.weight"]) + self.params[f"{pre}.wo.bias"]
        return ad.dropout(out, cfg.dropout, rng.next_op() if rng else None)

    def _mlp(self, x: Tensor, block: int, rng) -> Tensor:
        cfg = self.config
        pre = f"mantis.blocks.{block}.mlp"
        h = ad.gelu(ad.matmul(x, self.params[f"{pre}.fc1.weight"]) + self.params[f"{pre}.fc1.bias"])
        h = ad.matmul(h, self.params[f"{pre}.fc2.weight"]) + self.params[f"{pre}.fc2.bias"]
        return ad.dropout(h, cfg.dropout, rng.next_op() if rng else None)

    def _block(self, x: Tensor, block: int, rng) -> Tensor:
        pre = f"mantis.blocks.{block}"
        normed = ad.layer_norm(x, self.params[f"{pre}.norm1.gamma"], self.params[f"{pre}.norm1.beta"])
        x = x + self._attention(normed, block, rng)
        normed = ad.layer_norm(x, self.params[f"{pre}.norm2.gamma"], self.params[f"{pre}.norm2.beta"])
        return x + self._mlp(normed, block, rng)

    def _position_table(self) -> np.ndarray:
        cfg = self.config
        if self._pe_cache is None or self._pe_cache.shape != (cfg.n_patches + 1, cfg.token_dim):
            self._pe_cache = sinusoidal_position_encoding(cfg.n_patches + 1, cfg.token_dim)
        return self._pe_cache

    def encode_tokens(self, tokens: Tensor, rng=None) -> Tensor:
        """Class token + positions + block stack: (N, 32, d) -> (N, d)."""
        cfg = self.config
        n = tokens.shape[0]
        cls = ad.broadcast_to(self.params["mantis.cls_token"].reshape(1, 1, cfg.token_dim),
                              (n, 1, cfg.token_dim))
        seq = ad.concat([cls, tokens], axis=1)
        seq = seq + ad.constant(self._position_table(), dtype=seq.dtype)
        for b in range(cfg.n_blocks):
            seq = self._block(seq, b, rng)
        return seq[:, 0, :]

    def encode(self, prepared: dict, rng=None) -> Tensor:
        """Full forward: prepared batch -> (B, token_dim * C) descriptors."""
        dt = self.params["mantis.cls_token"].dtype
        x_norm = ad.constant(prepared["x_norm"], dtype=dt)
        x_diff = ad.constant(prepared["x_diff"], dtype=dt)
        stats = ad.constant(prepared["stats"], dtype=dt)
        tokens = self.tokenize(x_norm, x_diff, stats)
        z = self.encode_tokens(tokens, rng)
        n_batch = prepared["n_batch"]
        n_channels = prepared["n_channels"]
        return z.reshape(n_batch, n_channels * self.config.token_dim)

    # -- per-channel contract wrappers -------------------------------------------

    def tokenize_channel(self, x_norm: np.ndarray, x_raw: np.ndarray) -> Tensor:
        """Tokens for a single preprocessed channel: (512,) x 2 -> (32, token_dim)."""
        cfg = self.config
        x_norm = np.asarray(x_norm, dtype=np.float64)
        x_raw = np.asarray(x_raw, dtype=np.float64)
        if x_norm.shape != (cfg.input_len,) or x_raw.shape != (cfg.input_len,):
            raise ShapeError(f"expected two ({cfg.input_len},) channels, "
                             f"got {x_norm.shape} and {x_raw.shape}")
        stats = patch_stats(x_raw, cfg.n_patches)
        dt = self.params["mantis.cls_token"].dtype
        tokens = self.tokenize(
            ad.constant(x_norm[None, :], dtype=dt),
            ad.constant(first_difference(x_norm)[None, :], dtype=dt),
            ad.constant(np.stack([stats.mu, stats.sigma], axis=-1)[None], dtype=dt))
        return tokens[0]

    def encode_channel(self, tokens: Tensor, rng=None) -> Tensor:
        """Channel descriptor from a (32, token_dim) token matrix."""
        return self.encode_tokens(tokens.reshape(1, *tokens.shape), rng)[0]

    # -- trainer-facing surface ---------------------------------------------------

    def features(self, batch: np.ndarray, rng=None) -> Tensor:
        """Raw (B, C, T) batch to classifier features (B, token_dim * C)."""
        return self.encode(self.prepare(batch), rng)

    def contrastive_embedding(self, batch: np.ndarray, rng=None) -> Tensor:
        """Descriptor used by contrastive pretraining; same as ``features``."""
        return self.features(batch, rng)

    # -- parameter plumbing ----------------------------------------------------------

    def feature_dim(self, n_channels: int, series_length: int | None = None) -> int:
        return self.config.token_dim * n_channels

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "MantisEncoder":
        """Copy of this encoder with parameters cast to ``dtype`` (grad checks)."""
        clone = MantisEncoder.__new__(MantisEncoder)
        clone.config = self.config
        clone.dtype = dtype
        clone.params = {k: Tensor(v.data, requires_grad=True, dtype=dtype)
                        for k, v in self.params.items()}
        clone._pe_cache = None
        return clone
