"""Losses, optimizer, schedule, early stopping, time cap, and the
pretraining / fine-tuning loops.

Fine-tuning always updates the encoder together with the head (frozen-encoder
transfer is deliberately unsupported; it collapses performance on this kind of
signal).  Every loop is deterministic for a fixed (config, seed, data) triple:
batch order, augmentation draws, and dropout masks are all keyed by counters.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutRng, Tensor
from .errors import ConfigError, DataError, ShapeError
from .mantis import augment
from .cbramod import mae_loss, mask_patches
from .metrics import compute_metrics, default_metric_names

STATUS_CONVERGED = "converged"
STATUS_EARLY_STOPPED = "early_stopped"
STATUS_TIME_LIMIT = "time_limit_exceeded"


@dataclass
class TrainConfig:
    max_epochs: int = 20          # 20 for trial-based tasks, 50 for sleep-style tasks
    batch_size: int = 64
    weight_decay: float = 0.01
    base_lr: float = 1e-4
    warmup_frac: float = 0.2
    clip_norm: float = 1.0
    patience: int = 3             # 3 for trial-based tasks, 5 for sleep-style tasks
    max_wallclock_hours: float = 5.0
    seed: int = 0
    temperature: float = 0.1
    max_steps: int = 500          # pretraining loops are step-driven

    def __post_init__(self):
        positive = ("max_epochs", "batch_size", "weight_decay", "base_lr",
                    "clip_norm", "patience", "temperature", "max_steps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.max_wallclock_hours < 0:
            raise ConfigError(f"max_wallclock_hours must be >= 0, got {self.max_wallclock_hours}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class HeadConfig:
    kind: str                       # "linear_preln" or "mlp3"
    in_dim: int
    n_classes: int
    hidden: tuple = (256, 128)
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in ("linear_preln", "mlp3"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "mlp3" and len(self.hidden) != 2:
            raise ConfigError(f"mlp3 head needs two hidden widths, got {self.hidden}")
        self.hidden = tuple(self.hidden)


class ClassifierHead:
    """Classification head; parameters live under the ``head.*`` namespace."""

    def __init__(self, config: HeadConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        if config.kind == "linear_preln":
            p["head.norm.gamma"] = np.ones(config.in_dim)
            p["head.norm.beta"] = np.zeros(config.in_dim)
            p["head.out.weight"] = rng.normal(0.0, 1.0 / np.sqrt(config.in_dim),
                                              size=(config.in_dim, config.n_classes))
            p["head.out.bias"] = np.zeros(config.n_classes)
        else:
            dims = (config.in_dim, *config.hidden, config.n_classes)
            for i in range(3):
                p[f"head.fc{i + 1}.weight"] = rng.normal(
                    0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
                p[f"head.fc{i + 1}.bias"] = np.zeros(dims[i + 1])
        self.params = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in p.items()}

    def forward(self, z: Tensor, rng=None) -> Tensor:
        cfg = self.config
        if z.shape[-1] != cfg.in_dim:
            raise ShapeError(f"head expects feature dim {cfg.in_dim}, got {z.shape}")
        if cfg.kind == "linear_preln":
            h = ad.layer_norm(z, self.params["head.norm.gamma"], self.params["head.norm.beta"])
            return ad.matmul(h, self.params["head.out.weight"]) + self.params["head.out.bias"]
        h = z
        for i in (1, 2):
            h = ad.elu(ad.matmul(h, self.params[f"head.fc{i}.weight"]) + self.params[f"head.fc{i}.bias"])
            h = ad.dropout(h, cfg.dropout, rng.next_op() if rng else None)
        return ad.matmul(h, self.params["head.fc3.weight"]) + self.params["head.fc3.bias"]

    def astype(self, dtype) -> "ClassifierHead":
        clone = ClassifierHead.__new__(ClassifierHead)
        clone.config = self.config
        clone.params = {k: Tensor(v.data, requires_grad=True, dtype=dtype)
                        for k, v in self.params.items()}
        return clone


# -- losses ---------------------------------------------------------------------------


def scos(a, b, eps: float = 1e-12) -> float:
    """Cosine similarity of two vectors, norm-guarded."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na = max(float(np.linalg.norm(a)), eps)
    nb = max(float(np.linalg.norm(b)), eps)
    return float(np.dot(a / na, b / nb))


def _row_normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    sq = (z * z).sum(axis=-1, keepdims=True)
    return z / ad.tsqrt(sq + eps)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class; max-shifted for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected (B, K) logits with (B,) labels, "
                         f"got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    shift = ad.constant(logits.data.max(axis=1, keepdims=True), dtype=logits.dtype)
    z = logits - shift
    log_norm = ad.tlog(ad.texp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = log_probs * ad.constant(onehot, dtype=logits.dtype)
    return picked.sum() * (-1.0 / n)


def info_nce(z_a: Tensor, z_b: Tensor, temperature: float) -> Tensor:
    """Contrastive loss over paired views: each row of ``z_a`` must identify its
    partner row of ``z_b`` among all rows, under temperature-scaled cosine
    similarity."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ShapeError(f"expected matching (N, D) embeddings, got {z_a.shape} and {z_b.shape}")
    sims = ad.matmul(_row_normalize(z_a), ad.swapaxes(_row_normalize(z_b), 0, 1))
    return cross_entropy(sims * (1.0 / temperature), np.arange(z_a.shape[0]))


# -- optimizer / schedule -----------------------------------------------------------------


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state,
               lr: float, weight_decay: float = 0.01,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One decoupled-weight-decay Adam step; returns (new params, new state).

    Decay multiplies parameters by (1 - lr * wd) separately from the
    bias-corrected adaptive update, so zero gradients still shrink weights.
    """
    if state is None:
        state = {"t": 0,
                 "m": {k: np.zeros_like(t.data) for k, t in params.items()},
                 "v": {k: np.zeros_like(t.data) for k, t in params.items()}}
    state["t"] += 1
    t = state["t"]
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    new_params = {}
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state["m"][name] = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = state["v"][name] = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        updated = tensor.data * (1.0 - lr * weight_decay) - step
        new_params[name] = Tensor(updated, requires_grad=True, dtype=tensor.dtype)
    return new_params, state


def cosine_warmup_lr(step: int, total_steps: int, warmup_frac: float = 0.2,
                     base_lr: float = 1e-4) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = int(warmup_frac * total_steps)
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# -- reports --------------------------------------------------------------------------------


@dataclass
class FitReport:
    status: str
    epochs_run: int
    best_val_metric: float
    test_metrics: dict
    wallclock_s: float
    history: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0

    _TIMING_KEYS = ("wallclock_s",)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def deterministic_digest(self) -> str:
        """Digest over every field except measured wallclock times."""
        payload = self.to_dict()
        for key in self._TIMING_KEYS:
            payload.pop(key, None)
        payload["history"] = [{k: v for k, v in row.items() if k not in self._TIMING_KEYS}
                              for row in payload["history"]]
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class PretrainReport:
    status: str
    steps_run: int
    initial_loss: float
    final_loss: float
    wallclock_s: float
    history: list = field(default_factory=list)   # rows: step, loss, lr
    config: dict = field(default_factory=dict)
    seed: int = 0


# -- shared loop machinery ----------------------------------------------------------------


def _combined_params(encoder, head=None) -> dict[str, Tensor]:
    params = dict(encoder.params)
    if head is not None:
        params.update(head.params)
    return params


def _apply_params(encoder, head, params: dict[str, Tensor]):
    encoder.params = {k: v for k, v in params.items() if not k.startswith("head.")}
    if head is not None:
        head.params = {k: v for k, v in params.items() if k.startswith("head.")}


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _evaluate(encoder, head, data: np.ndarray, labels: np.ndarray, batch_size: int):
    """Eval-mode loss / predictions / class scores over a whole array."""
    losses, sizes, preds, scores = [], [], [], []
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data[start:start + batch_size]
            lab = labels[start:start + batch_size]
            logits = head.forward(encoder.features(batch), rng=None)
            losses.append(cross_entropy(logits, lab).item())
            sizes.append(len(batch))
            scores.append(softmax_scores(logits.data))
            preds.append(np.argmax(logits.data, axis=1))
    loss = float(np.average(losses, weights=sizes))
    return loss, np.concatenate(preds), np.concatenate(scores)


def _check_split_subjects(splits):
    names = ("train", "val", "test")
    views = [splits.train, splits.val, splits.test]
    for name, view in zip(names, views):
        if len(view) == 0:
            raise DataError(f"{name} split is empty")
    for i in range(3):
        for j in range(i + 1, 3):
            shared = set(views[i].subjects) & set(views[j].subjects)
            if shared:
                raise DataError(f"subjects {sorted(shared)} appear in both "
                                f"{names[i]} and {names[j]} splits")


def fit(encoder, head, splits, cfg: TrainConfig, metric_names=None) -> FitReport:
    """Fine-tune encoder plus head with early stopping and a wall-clock cap.

    Monitors validation cross-entropy, restores the best-validation weights
    before the single test evaluation, and reports NaN test metrics when the
    time limit preempts the run.
    """
    _check_split_subjects(splits)
    n_classes = splits.n_classes
    if metric_names is None:
        metric_names = default_metric_names(n_classes)

    t_start = time.monotonic()
    budget_s = cfg.max_wallclock_hours * 3600.0
    train = splits.train
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch

    params = _combined_params(encoder, head)
    state = None
    drop_rng = DropoutRng(cfg.seed)
    history = []
    order_hash = hashlib.sha256()
    best_val = math.inf
    best_params = dict(params)
    bad_epochs = 0
    status = STATUS_CONVERGED
    epochs_run = 0
    global_step = 0
    timed_out = time.monotonic() - t_start >= budget_s

    for epoch in range(cfg.max_epochs):
        if timed_out:
            status = STATUS_TIME_LIMIT
            break
        perm = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(train))
        order_hash.update(perm.astype(np.int64).tobytes())
        epoch_losses = []
        lr = 0.0
        for start in range(0, len(train), cfg.batch_size):
            if time.monotonic() - t_start >= budget_s:
                timed_out = True
                break
            idx = perm[start:start + cfg.batch_size]
            batch, lab = train.take(idx)
            lr = cosine_warmup_lr(global_step, total_steps, cfg.warmup_frac, cfg.base_lr)
            drop_rng.begin_step(global_step)
            _apply_params(encoder, head, params)
            logits = head.forward(encoder.features(batch, rng=drop_rng), rng=drop_rng)
            loss = cross_entropy(logits, lab)
            loss.backward()
            grads = clip_grad_norm({k: t.grad for k, t in params.items()}, cfg.clip_norm)
            params, state = adamw_step(params, grads, state, lr, cfg.weight_decay)
            epoch_losses.append(loss.item())
            global_step += 1
        if timed_out:
            status = STATUS_TIME_LIMIT
            break

        _apply_params(encoder, head, params)
        val_data, val_labels = splits.val.take_all()
        val_loss, _, _ = _evaluate(encoder, head, val_data, val_labels, cfg.batch_size)
        epochs_run = epoch + 1
        history.append({"epoch": epochs_run,
                        "train_loss": float(np.mean(epoch_losses)),
                        "val_loss": val_loss,
                        "lr": lr,
                        "wallclock_s": time.monotonic() - t_start})
        if val_loss < best_val:
            best_val = val_loss
            best_params = dict(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                status = STATUS_EARLY_STOPPED
                break
        if time.monotonic() - t_start >= budget_s:
            timed_out = True
            status = STATUS_TIME_LIMIT
            break

    final_eval_order = splits.read_counter()
    if status == STATUS_TIME_LIMIT:
        test_metrics = {name: math.nan for name in metric_names}
    else:
        _apply_params(encoder, head, best_params)
        test_data, test_labels = splits.test.take_all()
        _, preds, scores = _evaluate(encoder, head, test_data, test_labels, cfg.batch_size)
        test_metrics = compute_metrics(metric_names, test_labels, preds, scores)

    audit = {
        "train_reads": splits.train.reads,
        "val_reads": splits.val.reads,
        "test_reads": splits.test.reads,
        "first_test_read_order": splits.test.first_read_order,
        "final_eval_order": final_eval_order,
        "test_read_before_final_eval": (
            splits.test.first_read_order is not None
            and splits.test.first_read_order < final_eval_order),
        "data_order_digest": order_hash.hexdigest(),
    }
    return FitReport(
        status=status,
        epochs_run=epochs_run,
        best_val_metric=best_val if math.isfinite(best_val) else math.nan,
        test_metrics=test_metrics,
        wallclock_s=time.monotonic() - t_start,
        history=history,
        audit=audit,
        config={"train": asdict(cfg), "head": asdict(head.config),
                "encoder": asdict(encoder.config), "model": encoder.kind},
        seed=cfg.seed,
    )


# -- pretraining loops -----------------------------------------------------------------------


def _pretrain_loop(encoder, data: np.ndarray, cfg: TrainConfig, step_loss) -> PretrainReport:
    t_start = time.monotonic()
    budget_s = cfg.max_wallclock_hours * 3600.0
    n = len(data)
    params = dict(encoder.params)
    state = None
    drop_rng = DropoutRng(cfg.seed)
    history = []
    status = STATUS_CONVERGED
    steps_run = 0
    for step in range(cfg.max_steps):
        if time.monotonic() - t_start >= budget_s:
            status = STATUS_TIME_LIMIT
            break
        idx = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, step])).choice(
            n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        lr = cosine_warmup_lr(step, cfg.max_steps, cfg.warmup_frac, cfg.base_lr)
        drop_rng.begin_step(step)
        encoder.params = params
        loss = step_loss(encoder, data[idx], idx, step, drop_rng)
        loss.backward()
        grads = clip_grad_norm({k: t.grad for k, t in params.items()}, cfg.clip_norm)
        params, state = adamw_step(params, grads, state, lr, cfg.weight_decay)
        history.append({"step": step, "loss": loss.item(), "lr": lr})
        steps_run = step + 1
    encoder.params = params
    return PretrainReport(
        status=status,
        steps_run=steps_run,
        initial_loss=history[0]["loss"] if history else math.nan,
        final_loss=history[-1]["loss"] if history else math.nan,
        wallclock_s=time.monotonic() - t_start,
        history=history,
        config={"train": asdict(cfg), "encoder": asdict(encoder.config), "model": encoder.kind},
        seed=cfg.seed,
    )


def pretrain_contrastive(encoder, data: np.ndarray, cfg: TrainConfig) -> PretrainReport:
    """Contrastive pretraining: two augmented views per sample, paired-view loss."""

    def step_loss(enc, batch, idx, step, drop_rng):
        views = []
        for view in (0, 1):
            rows = [augment(batch[i], np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 3, step, int(sample), view])))
                for i, sample in enumerate(idx)]
            views.append(np.stack(rows))
        z_a = enc.contrastive_embedding(views[0], rng=drop_rng)
        z_b = enc.contrastive_embedding(views[1], rng=drop_rng)
        return info_nce(z_a, z_b, cfg.temperature)

    return _pretrain_loop(encoder, np.asarray(data, dtype=np.float64), cfg, step_loss)


def pretrain_mae(encoder, data: np.ndarray, cfg: TrainConfig) -> PretrainReport:
    """Masked-autoencoding pretraining: hide patches, reconstruct, score masked only."""
    if encoder.kind != "cbramod":
        raise ConfigError("masked-autoencoding pretraining requires the cbramod model")

    def step_loss(enc, batch, idx, step, drop_rng):
        grids = enc.prepare(batch)
        _, n_channels, n_patches, _ = grids.shape
        masks = np.stack([
            mask_patches(n_channels, n_patches, enc.config.mask_ratio,
                         np.random.default_rng(
                             np.random.SeedSequence([cfg.seed, 4, step, int(sample)]))).mask
            for sample in idx])
        encoded = enc.encode(grids, mask=masks)
        return mae_loss(enc.reconstruct(encoded), grids, masks)

    return _pretrain_loop(encoder, np.asarray(data, dtype=np.float64), cfg, step_loss)
