"""Patch-embedding criss-cross transformer with a masked-autoencoding head
(CBraMod architecture).

Each (channel, window) patch is embedded by a small time-domain conv stack
plus a linear map of its FFT magnitude spectrum.  Input-dependent positional
offsets come from two depthwise convolutions over the (channel, patch) grid
with asymmetric kernels (wide along time, narrow across channels).  Blocks run
spatial attention (across channels, per window) and temporal attention
(across windows, per channel) in parallel, merge the two halves back to the
embedding width, and finish with a pre-norm MLP.  A shared linear readout maps
embeddings back to the time domain for masked reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .signal import PatchGrid, partition_patches

TIME_KERNEL = 7      # positional offset kernel along the patch axis
CHANNEL_KERNEL = 3   # positional offset kernel across channels
CONV_WIDTH = 8       # hidden width of the patch conv stack
CONV_KERNEL = 7


@dataclass
class CBraModConfig:
    patch_len: int = 200
    embed_dim: int = 200
    n_blocks: int = 12
    n_heads: int = 8
    mask_ratio: float = 0.5

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by n_heads {self.n_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.embed_dim != self.patch_len:
            # The conv stack flattens to patch_len and the spectrum projection is
            # square, so the embedding width is tied to the patch width.
            raise ConfigError(
                f"embed_dim {self.embed_dim} must equal patch_len {self.patch_len}: "
                "the patch conv stack and spectrum projection close dimensions only then")


@dataclass
class MaskSpec:
    """Boolean (C, p) grid marking patches hidden from the encoder."""

    mask: np.ndarray
    n_masked: int


def mask_patches(n_channels: int, n_patches: int, ratio: float = 0.5,
                 rng: np.random.Generator | None = None) -> MaskSpec:
    """Uniform random patch subset of size exactly floor(ratio * C * p)."""
    total = n_channels * n_patches
    if total < 2:
        raise DataError(f"need at least 2 patches to mask, got grid {n_channels}x{n_patches}")
    n_masked = int(ratio * total)
    if n_masked == 0:
        raise DataError(f"mask ratio {ratio} masks zero of {total} patches; nothing to reconstruct")
    rng = rng or np.random.default_rng()
    chosen = rng.choice(total, size=n_masked, replace=False)
    flat = np.zeros(total, dtype=bool)
    flat[chosen] = True
    return MaskSpec(flat.reshape(n_channels, n_patches), n_masked)


def _linear(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


class CBraModEncoder:
    """Criss-cross encoder; parameters live under the ``cbramod.*`` namespace."""

    kind = "cbramod"

    def __init__(self, config: CBraModConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or CBraModConfig()
        self.dtype = dtype
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict[str, Tensor]:
        cfg = self.config
        d = cfg.embed_dim
        p: dict[str, np.ndarray] = {}
        scale = 1.0 / np.sqrt(CONV_KERNEL)
        p["cbramod.embed.conv1.weight"] = rng.normal(0.0, scale, size=(CONV_WIDTH, 1, CONV_KERNEL))
        p["cbramod.embed.conv1.bias"] = np.zeros(CONV_WIDTH)
        p["cbramod.embed.conv2.weight"] = rng.normal(
            0.0, scale / np.sqrt(CONV_WIDTH), size=(CONV_WIDTH, CONV_WIDTH, CONV_KERNEL))
        p["cbramod.embed.conv2.bias"] = np.zeros(CONV_WIDTH)
        p["cbramod.embed.conv3.weight"] = rng.normal(
            0.0, scale / np.sqrt(CONV_WIDTH), size=(1, CONV_WIDTH, CONV_KERNEL))
        p["cbramod.embed.conv3.bias"] = np.zeros(1)
        p["cbramod.embed.spectrum.weight"] = _linear(rng, cfg.patch_len, d)
        p["cbramod.mask_token"] = rng.normal(0.0, 0.02, size=(d,))
        p["cbramod.pos.time.weight"] = rng.normal(0.0, 0.02, size=(d, TIME_KERNEL))
        p["cbramod.pos.channel.weight"] = rng.normal(0.0, 0.02, size=(d, CHANNEL_KERNEL))
        for b in range(self.config.n_blocks):
            pre = f"cbramod.blocks.{b}"
            for branch in ("spatial", "temporal"):
                for name in ("wq", "wk", "wv"):
                    p[f"{pre}.{branch}.{name}.weight"] = _linear(rng, d, d)
                    p[f"{pre}.{branch}.{name}.bias"] = np.zeros(d)
            p[f"{pre}.merge.weight"] = _linear(rng, 2 * d, d)
            p[f"{pre}.merge.bias"] = np.zeros(d)
            p[f"{pre}.norm1.gamma"] = np.ones(d)
            p[f"{pre}.norm1.beta"] = np.zeros(d)
            p[f"{pre}.norm2.gamma"] = np.ones(d)
            p[f"{pre}.norm2.beta"] = np.zeros(d)
            p[f"{pre}.mlp.fc1.weight"] = _linear(rng, d, 4 * d)
            p[f"{pre}.mlp.fc1.bias"] = np.zeros(4 * d)
            p[f"{pre}.mlp.fc2.weight"] = _linear(rng, 4 * d, d)
            p[f"{pre}.mlp.fc2.bias"] = np.zeros(d)
        p["cbramod.recon.weight"] = _linear(rng, d, cfg.patch_len)
        p["cbramod.recon.bias"] = np.zeros(cfg.patch_len)
        return {k: Tensor(v, requires_grad=True, dtype=self.dtype) for k, v in p.items()}

    # -- preprocessing -------------------------------------------------------------

    def prepare(self, batch: np.ndarray) -> np.ndarray:
        """Cut a raw (B, C, T) batch into (B, C, p, patch_len) windows."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        grids = [partition_patches(sample, self.config.patch_len).data for sample in batch]
        return np.stack(grids)

    # -- forward pieces ---------------------------------------------------------------

    def embed_patches(self, grid: Tensor) -> Tensor:
        """Per-patch conv + spectrum embedding: (..., p, t) -> (..., p, d)."""
        cfg = self.config
        if grid.shape[-1] != cfg.patch_len:
            raise ConfigError(f"patch length {grid.shape[-1]} does not match config {cfg.patch_len}")
        lead = grid.shape[:-1]
        flat = grid.reshape(int(np.prod(lead)), 1, cfg.patch_len)
        pad = (CONV_KERNEL // 2, CONV_KERNEL // 2)
        h = ad.conv1d(flat, self.params["cbramod.embed.conv1.weight"], padding=pad)
        h = ad.gelu(h + self.params["cbramod.embed.conv1.bias"].reshape(1, CONV_WIDTH, 1))
        h = ad.conv1d(h, self.params["cbramod.embed.conv2.weight"], padding=pad)
        h = ad.gelu(h + self.params["cbramod.embed.conv2.bias"].reshape(1, CONV_WIDTH, 1))
        h = ad.conv1d(h, self.params["cbramod.embed.conv3.weight"], padding=pad)
        h = h + self.params["cbramod.embed.conv3.bias"].reshape(1, 1, 1)
        time_embed = h.reshape(*lead, cfg.patch_len)

        spectrum = ad.fft_magnitude(grid)
        freq_embed = ad.matmul(spectrum, self.params["cbramod.embed.spectrum.weight"])
        return time_embed + freq_embed

    def position_offsets(self, embedded: Tensor) -> Tensor:
        """Input-conditioned offsets over the (channel, patch) grid, zero-padded."""
        along_time = ad.depthwise_grid_conv(embedded, self.params["cbramod.pos.time.weight"],
                                            axis=embedded.ndim - 2)
        across_channels = ad.depthwise_grid_conv(embedded, self.params["cbramod.pos.channel.weight"],
                                                 axis=embedded.ndim - 3)
        return along_time + across_channels

    def _branch_attention(self, x: Tensor, block: int, branch: str, token_axis: int) -> Tensor:
        """Multi-head attention along ``token_axis`` of a (B, C, p, d) tensor."""
        cfg = self.config
        d = cfg.embed_dim
        head_dim = d // cfg.n_heads
        pre = f"cbramod.blocks.{block}.{branch}"
        moved = ad.swapaxes(x, token_axis, 2) if token_axis != 2 else x
        b0, b1, n = moved.shape[0], moved.shape[1], moved.shape[2]

        def project(name):
            t = ad.matmul(moved, self.params[f"{pre}.{name}.weight"]) + self.params[f"{pre}.{name}.bias"]
            t = t.reshape(b0, b1, n, cfg.n_heads, head_dim)
            return ad.swapaxes(t, 2, 3)  # (b0, b1, heads, n, head_dim)

        attn = ad.softmax_attention(project("wq"), project("wk"), project("wv"))
        merged = ad.swapaxes(attn, 2, 3).reshape(b0, b1, n, d)
        return ad.swapaxes(merged, token_axis, 2) if token_axis != 2 else merged

    def crisscross_block(self, x: Tensor, block: int) -> Tensor:
        """One block: parallel channel-wise and window-wise attention, merge, MLP."""
        pre = f"cbramod.blocks.{block}"
        normed = ad.layer_norm(x, self.params[f"{pre}.norm1.gamma"], self.params[f"{pre}.norm1.beta"])
        spatial = self._branch_attention(normed, block, "spatial", token_axis=1)
        temporal = self._branch_attention(normed, block, "temporal", token_axis=2)
        fused = ad.concat([spatial, temporal], axis=-1)
        fused = ad.matmul(fused, self.params[f"{pre}.merge.weight"]) + self.params[f"{pre}.merge.bias"]
        x = x + fused
        normed = ad.layer_norm(x, self.params[f"{pre}.norm2.gamma"], self.params[f"{pre}.norm2.beta"])
        h = ad.gelu(ad.matmul(normed, self.params[f"{pre}.mlp.fc1.weight"])
                    + self.params[f"{pre}.mlp.fc1.bias"])
        h = ad.matmul(h, self.params[f"{pre}.mlp.fc2.weight"]) + self.params[f"{pre}.mlp.fc2.bias"]
        return x + h

    def encode(self, grid, mask: MaskSpec | np.ndarray | None = None) -> Tensor:
        """Embed (with optional mask-token substitution), add offsets, run blocks.

        ``grid`` is a PatchGrid, a (C, p, t) array, or a batched (B, C, p, t)
        array; the result keeps the same leading shape with t -> embed_dim.
        """
        if isinstance(grid, PatchGrid):
            grid = grid.data
        grid = np.asarray(grid)
        squeeze = grid.ndim == 3
        if squeeze:
            grid = grid[None]
        dt = self.params["cbramod.mask_token"].dtype
        x = ad.constant(grid, dtype=dt)
        embedded = self.embed_patches(x)
        if mask is not None:
            mask_arr = mask.mask if isinstance(mask, MaskSpec) else np.asarray(mask)
            if mask_arr.ndim == 2:
                mask_arr = np.broadcast_to(mask_arr, grid.shape[:3])
            keep = ad.constant(1.0 - mask_arr[..., None].astype(dt), dtype=dt)
            hide = ad.constant(mask_arr[..., None].astype(dt), dtype=dt)
            token = self.params["cbramod.mask_token"].reshape(1, 1, 1, self.config.embed_dim)
            embedded = embedded * keep + token * hide
        out = embedded + self.position_offsets(embedded)
        for b in range(self.config.n_blocks):
            out = self.crisscross_block(out, b)
        return out[0] if squeeze else out

    def reconstruct(self, encoded: Tensor) -> Tensor:
        """Shared linear readout back to the time domain, applied per patch."""
        return ad.matmul(encoded, self.params["cbramod.recon.weight"]) + self.params["cbramod.recon.bias"]

    def classify_features(self, encoded: Tensor) -> Tensor:
        """Flatten (..., C, p, d) embeddings in (channel, patch, dim) order."""
        if encoded.ndim == 3:
            return encoded.reshape(encoded.size)
        return encoded.reshape(encoded.shape[0], -1)

    def embedding_summary(self, encoded: Tensor) -> Tensor:
        """Grid-mean embedding, the contrastive descriptor for this encoder."""
        axes = (0, 1) if encoded.ndim == 3 else (1, 2)
        return encoded.mean(axis=axes)

    # -- trainer-facing surface ------------------------------------------------------

    def features(self, batch: np.ndarray, rng=None) -> Tensor:
        """Raw (B, C, T) batch to flattened classifier features (B, C*p*d)."""
        return self.classify_features(self.encode(self.prepare(batch)))

    def contrastive_embedding(self, batch: np.ndarray, rng=None) -> Tensor:
        """Grid-mean embedding used when this encoder pretrains contrastively."""
        return self.embedding_summary(self.encode(self.prepare(batch)))

    # -- parameter plumbing -----------------------------------------------------------

    def feature_dim(self, n_channels: int, series_length: int) -> int:
        p = series_length // self.config.patch_len
        if p < 1:
            raise ShapeError(f"series length {series_length} is shorter than one patch "
                             f"of {self.config.patch_len}")
        return n_channels * p * self.config.embed_dim

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "CBraModEncoder":
        clone = CBraModEncoder.__new__(CBraModEncoder)
        clone.config = self.config
        clone.dtype = dtype
        clone.params = {k: Tensor(v.data, requires_grad=True, dtype=dtype)
                        for k, v in self.params.items()}
        return clone


def mae_loss(x_hat: Tensor, grid: np.ndarray, mask) -> Tensor:
    """Mean squared reconstruction error over masked patch entries only."""
    mask_arr = mask.mask if isinstance(mask, MaskSpec) else np.asarray(mask)
    grid = np.asarray(grid)
    if x_hat.shape != grid.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} does not match target {grid.shape}")
    lead = x_hat.shape[:-1]
    try:
        mask_full = np.broadcast_to(mask_arr, lead)
    except ValueError:
        raise ShapeError(f"mask shape {mask_arr.shape} does not broadcast over grid {lead}") from None
    n_entries = float(mask_full.sum()) * x_hat.shape[-1]
    if n_entries == 0:
        raise DataError("mask selects no patches; nothing to reconstruct")
    weights = mask_full[..., None].astype(x_hat.dtype)
    diff = x_hat - ad.constant(grid, dtype=x_hat.dtype)
    masked_sq = diff * diff * ad.constant(weights, dtype=x_hat.dtype)
    return masked_sq.sum() * (1.0 / n_entries)
