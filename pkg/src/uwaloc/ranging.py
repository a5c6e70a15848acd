"""Range bins, soft labels, network training, Bartlett MFP and point estimates."""

from __future__ import annotations

import configparser
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .signals import Dataset, ScmSample, add_noise, scm_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RangeGrid:
    """Classification bins of width ``bin_m``; bin ``k`` is centred on ``d_min + k bin``."""

    d_min_m: float = 900.0
    d_max_m: float = 9000.0
    bin_m: float = 100.0

    def __post_init__(self):
        if self.bin_m <= 0 or self.d_max_m < self.d_min_m:
            raise ValueError("invalid range grid")

    @property
    def class_count(self) -> int:
        return int(math.floor((self.d_max_m - self.d_min_m) / self.bin_m + 0.5)) + 1

    @property
    def midpoints(self) -> np.ndarray:
        return self.d_min_m + self.bin_m * np.arange(self.class_count)

    def to_dict(self):
        return asdict(self)


class RangeOutsideGrid(UserWarning):
    pass


def quantize_range(d_m, grid: RangeGrid):
    """Class index ``floor((d - d_min) / B + 0.5)``, clamped to ``[0, M-1]``.

    Ranges outside ``[d_min - B/2, d_max + B/2]`` are clamped with a
    :class:`RangeOutsideGrid` warning.
    """
    d = np.asarray(d_m, dtype=float)
    q = np.floor((d - grid.d_min_m) / grid.bin_m + 0.5).astype(int)
    outside = (d < grid.d_min_m - grid.bin_m / 2) | (d > grid.d_max_m + grid.bin_m / 2)
    if np.any(outside):
        warnings.warn("range outside the grid; clamped", RangeOutsideGrid, stacklevel=2)
    q = np.clip(q, 0, grid.class_count - 1)
    return int(q) if q.ndim == 0 else q


def soften_label(index, sigma: float, grid: RangeGrid) -> np.ndarray:
    """Soft label ``exp(-|k - index| / sigma)``, normalized over the bins.

    ``index`` may be an array; the result then has one row per index.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    idx = np.asarray(index)
    k = np.arange(grid.class_count)
    logits = -np.abs(k - idx[..., None]) / sigma
    y = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return y / y.sum(axis=-1, keepdims=True)


def predict_range(pmf, grid: RangeGrid):
    """Midpoint of the most probable bin; ties go to the lowest index."""
    p = np.asarray(pmf)
    return grid.d_min_m + grid.bin_m * np.argmax(p, axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

DEFAULT_FINETUNE_SNRS = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    sigma: float = 2.0
    patience_reduce: int = 75
    patience_stop: int = 125
    finetune_snrs_db: tuple[float, ...] = DEFAULT_FINETUNE_SNRS
    seed: int = 0
    lr_decay: float = 0.1
    max_epochs: int = 10_000
    finetune_max_epochs: int = 10_000
    dropout: float = 0.0
    chunk: int = 64

    def __post_init__(self):
        self.finetune_snrs_db = tuple(float(s) for s in self.finetune_snrs_db)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 1.0 <= self.sigma <= 10.0:
            raise ValueError("sigma must lie in [1, 10]")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @classmethod
    def from_file(cls, path, section: str = "train") -> "TrainConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_section(cp[section])

    @classmethod
    def from_section(cls, sec) -> "TrainConfig":
        kw = {}
        for f in ("lr", "sigma", "lr_decay", "dropout"):
            if f in sec:
                kw[f] = sec.getfloat(f)
        for f in ("batch_size", "patience_reduce", "patience_stop", "seed", "max_epochs",
                  "finetune_max_epochs", "chunk"):
            if f in sec:
                kw[f] = sec.getint(f)
        if "finetune_snrs_db" in sec:
            raw = sec["finetune_snrs_db"].replace(",", " ").split()
            kw["finetune_snrs_db"] = tuple(float(v) for v in raw)
        return cls(**kw)


def split_train_val(n: int, val_fraction: float, seed: int):
    """Random split keeping ``floor((1 - f) n)`` samples for training."""
    n_train = int(math.floor(round((1.0 - val_fraction) * n, 9)))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class _Schedule:
    lr: float
    best: float = np.inf
    since_best: int = 0
    since_reduce: int = 0
    best_params: object = None
    log: list = field(default_factory=list)


def _fit(params, x_tr, y_tr, x_val, y_val, loss, cfg: TrainConfig, phase: str,
         max_epochs: int, sched: _Schedule, make_inputs=None):
    """Epoch loop with plateau LR decay and early stopping on validation loss."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, len(sched.log), 17]))
    n = x_tr.shape[0]
    sched.best, sched.since_best, sched.since_reduce = np.inf, 0, 0
    for epoch in range(max_epochs):
        xe = x_tr if make_inputs is None else make_inputs(epoch)
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n - cfg.batch_size + 1, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            dseed = int(rng.integers(2**31)) if params.spec.dropout > 0 else None
            value, grads = nn.loss_and_gradients(params, xe[idx], y_tr[idx], loss=loss,
                                                 mode="train", dropout_seed=dseed, chunk=cfg.chunk)
            nn.adam_step(params, grads, sched.lr)
            losses.append(value)
        train_loss = float(np.mean(losses))
        if x_val is not None and len(x_val):
            val_loss = _eval_loss(params, x_val, y_val, loss)
        else:
            val_loss = train_loss
        sched.log.append({"phase": phase, "epoch": epoch, "lr": sched.lr,
                          "train_loss": train_loss, "val_loss": val_loss})
        log.info("%s epoch %d lr %.2e train %.5f val %.5f", phase, epoch, sched.lr, train_loss, val_loss)
        if val_loss < sched.best:
            sched.best, sched.since_best, sched.since_reduce = val_loss, 0, 0
            sched.best_params = params.copy(with_optimizer=False)
        else:
            sched.since_best += 1
            sched.since_reduce += 1
        if sched.since_best >= cfg.patience_stop:
            break
        if sched.since_reduce >= cfg.patience_reduce:
            sched.lr *= cfg.lr_decay
            sched.since_reduce = 0
    if sched.best_params is not None:
        for k, v in sched.best_params.tensors.items():
            params.tensors[k][...] = v


def _eval_loss(params, x, y, loss):
    out = nn.predict_logits(params, x)
    if loss == "ce":
        return float(np.mean(nn.cross_entropy(y, out)))
    return float(np.mean((out[:, 0] - y.reshape(-1)) ** 2))


def _noisy_inputs(snaps, snrs, seed):
    """Per-sample SNR drawn uniformly from ``snrs``; fresh noise for each seed."""
    rng = np.random.default_rng(seed)
    choice = rng.integers(0, len(snrs), size=snaps.shape[0])
    noisy = np.empty_like(snaps)
    for c in np.unique(choice):
        sel = np.flatnonzero(choice == c)
        noisy[sel] = add_noise(snaps[sel], float(snrs[c]), seed=[*seed, 100 + int(c)], per_sample=True)
    return scm_batch(noisy)[0]


def _train(train: Dataset, val_fraction: float, cfg: TrainConfig, spec: nn.ModelSpec,
           targets: np.ndarray, loss: str, meta: dict) -> nn.ModelParameters:
    if any(not s.labeled for s in train.samples):
        raise ValueError("training needs a labeled dataset")
    idx_tr, idx_val = split_train_val(len(train), val_fraction, cfg.seed)
    if len(idx_tr) < cfg.batch_size:
        raise ValueError(f"training split has {len(idx_tr)} samples, fewer than one batch")
    x = train.inputs()
    params = nn.init_params(spec, cfg.seed)
    params.meta.update(meta)
    sched = _Schedule(lr=cfg.lr)
    x_val = x[idx_val] if len(idx_val) else None
    _fit(params, x[idx_tr], targets[idx_tr], x_val, targets[idx_val], loss, cfg, "clean",
         cfg.max_epochs, sched)

    if cfg.finetune_snrs_db and cfg.finetune_max_epochs > 0:
        snaps = train.recover_snapshots()
        val_noisy = (_noisy_inputs(snaps[idx_val], cfg.finetune_snrs_db, [cfg.seed, 1])
                     if len(idx_val) else None)
        sched.best_params = None
        _fit(params, x[idx_tr], targets[idx_tr], val_noisy, targets[idx_val], loss, cfg, "noisy",
             cfg.finetune_max_epochs, sched,
             make_inputs=lambda e: _noisy_inputs(snaps[idx_tr], cfg.finetune_snrs_db, [cfg.seed, 2, e]))
    params.meta["train_log"] = sched.log
    params.reset_optimizer()
    return params


def train_classifier(train: Dataset, val_fraction: float = 0.18, config: TrainConfig | None = None,
                     grid: RangeGrid | None = None, spec_overrides: dict | None = None) -> nn.ModelParameters:
    """Train the soft-label classifier (clean phase, then noisy fine-tuning).

    ``val_fraction = 0`` monitors the training loss instead of a held-out set.
    """
    cfg = config or TrainConfig()
    grid = grid or RangeGrid()
    spec = nn.ModelSpec(L=train.n_elements, M=grid.class_count, dropout=cfg.dropout,
                        **(spec_overrides or {}))
    y = soften_label(quantize_range(train.ranges(), grid), cfg.sigma, grid)
    meta = {"task": "classifier", "grid": grid.to_dict(), "sigma": cfg.sigma,
            "frequency_hz": train.frequency_hz}
    return _train(train, val_fraction, cfg, spec, y, "ce", meta)


def train_regressor(train: Dataset, val_fraction: float = 0.18, config: TrainConfig | None = None,
                    grid: RangeGrid | None = None, spec_overrides: dict | None = None) -> nn.ModelParameters:
    """Train the scalar-output regressor on min-max normalized range with MSE.

    Dropout defaults to 0.2 so the model supports MC-dropout sampling.
    """
    cfg = config or TrainConfig(dropout=0.2)
    grid = grid or RangeGrid()
    spec = nn.ModelSpec(L=train.n_elements, M=1, dropout=cfg.dropout, task="regressor",
                        **(spec_overrides or {}))
    y = normalize_range(train.ranges(), grid)[:, None]
    meta = {"task": "regressor", "grid": grid.to_dict(), "sigma": cfg.sigma,
            "frequency_hz": train.frequency_hz}
    return _train(train, val_fraction, cfg, spec, y, "mse", meta)


def normalize_range(d, grid: RangeGrid):
    return (np.asarray(d, dtype=float) - grid.d_min_m) / (grid.d_max_m - grid.d_min_m)


def denormalize_range(u, grid: RangeGrid):
    d = grid.d_min_m + np.asarray(u, dtype=float) * (grid.d_max_m - grid.d_min_m)
    return np.clip(d, grid.d_min_m, grid.d_max_m)


def model_grid(params: nn.ModelParameters) -> RangeGrid:
    return RangeGrid(**params.meta["grid"]) if "grid" in params.meta else RangeGrid()


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _inputs(samples):
    if isinstance(samples, Dataset):
        return samples.inputs()
    if isinstance(samples, ScmSample):
        return samples.features[None]
    return np.asarray(samples, dtype=float)


def predict_pmf(params: nn.ModelParameters, samples) -> np.ndarray:
    """Softmax outputs; one row per sample (a single vector for one ScmSample)."""
    p = nn.softmax(nn.predict_logits(params, _inputs(samples)))
    return p[0] if isinstance(samples, ScmSample) else p


def predict_regression(params: nn.ModelParameters, samples) -> np.ndarray:
    """Deterministic regressor estimates in metres, clamped to the grid."""
    out = nn.predict_logits(params, _inputs(samples))[:, 0]
    d = denormalize_range(out, model_grid(params))
    return d[0] if isinstance(samples, ScmSample) else d


def mc_dropout_outputs(params: nn.ModelParameters, samples, J: int, seed: int) -> np.ndarray:
    """Raw outputs of ``J`` dropout realizations, shape ``(N, J, M)``.

    Dropout sits only after the feature layer, so the deterministic trunk
    is evaluated once and each pass re-samples the mask on the features.
    Pass ``j`` of sample ``i`` uses ``SeedSequence([seed, i, j])``.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    x = _inputs(samples)
    phi = nn.predict_features(params, x)
    W, b = params["head.weight"], params["head.bias"]
    rate = params.spec.dropout
    out = np.empty((phi.shape[0], J, W.shape[1]))
    for i in range(phi.shape[0]):
        masks = np.stack([nn.dropout_mask(phi.shape[1], rate, np.random.SeedSequence([seed, i, j]))
                          for j in range(J)])
        out[i] = (masks * phi[i]) @ W + b
    return out


def bin_histogram(d_m, grid: RangeGrid) -> np.ndarray:
    """Empirical PMF over range bins of the estimates along the last axis."""
    d = np.atleast_2d(np.asarray(d_m, dtype=float))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RangeOutsideGrid)
        bins = np.atleast_2d(quantize_range(d, grid))
    M = grid.class_count
    pmf = np.zeros((d.shape[0], M))
    for i in range(d.shape[0]):
        pmf[i] = np.bincount(bins[i], minlength=M) / d.shape[1]
    return pmf


def mc_dropout_pmf(params: nn.ModelParameters, samples, J: int, grid: RangeGrid | None = None,
                   seed: int = 0) -> np.ndarray:
    """Histogram over range bins of ``J`` MC-dropout regressor outputs."""
    grid = grid or model_grid(params)
    out = mc_dropout_outputs(params, samples, J, seed)[..., 0]
    pmf = bin_histogram(denormalize_range(out, grid), grid)
    return pmf[0] if isinstance(samples, ScmSample) else pmf


# ---------------------------------------------------------------------------
# Bartlett MFP
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReplicaSet:
    """Unit-norm replica vectors sorted by range."""

    ranges_m: np.ndarray
    vectors: np.ndarray

    @classmethod
    def from_fields(cls, ranges_m, fields) -> "ReplicaSet":
        r = np.asarray(ranges_m, dtype=float)
        v = np.asarray(fields, dtype=complex).reshape(r.size, -1)
        if r.size == 0:
            raise ValueError("empty replica set")
        norm = np.linalg.norm(v, axis=1)
        if np.any(norm == 0):
            raise ValueError("zero replica vector")
        order = np.argsort(r, kind="stable")
        return cls(r[order], v[order] / norm[order, None])

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ReplicaSet":
        """Replicas as principal eigenvectors of a (rank-1) labeled dataset."""
        snaps = ds.recover_snapshots()[:, 0]
        return cls.from_fields(ds.ranges(), snaps)


def bartlett_power(scm, replicas: ReplicaSet) -> np.ndarray:
    """``r^H C r`` for every replica; ``scm`` is ``(L, L)`` or ``(N, L, L)``."""
    C = np.asarray(scm)
    v = replicas.vectors
    cv = C @ v.T
    return np.einsum("ri,...ir->...r", v.conj(), cv).real


def bartlett_mfp(test_scm, replicas: ReplicaSet):
    """Range of the replica maximizing the Bartlett power (ties: smallest range)."""
    if isinstance(test_scm, ScmSample):
        test_scm = test_scm.scm()
    elif isinstance(test_scm, Dataset):
        test_scm = np.stack([s.scm() for s in test_scm.samples])
    if replicas.ranges_m.size == 0:
        raise ValueError("empty replica set")
    return replicas.ranges_m[np.argmax(bartlett_power(test_scm, replicas), axis=-1)]
