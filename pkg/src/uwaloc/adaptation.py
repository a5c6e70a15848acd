"""Test-time adaptation: SHOT fine-tuning and power-based JSEA pseudo-labels."""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .ranging import RangeGrid, model_grid, predict_range, quantize_range, soften_label
from .signals import Dataset
from .uncertainty import (DEFAULT_Q, CertainSet, PeakReport, UncertaintyReport, analyze,
                          find_significant_peaks, partition_certain)

log = logging.getLogger(__name__)

CERTAIN_PEAK = "certain-peak"
POWER_SELECTED = "jsea-power-selected"
FALLBACK = "largest-peak-fallback"
SHOT_REPREDICTED = "shot-repredicted"


class NoCertainSamples(ValueError):
    """Adaptation needs at least one single-peak sample."""


@dataclass
class AdaptConfig:
    beta: float = 1.0
    mu_shot: float = 5e-6
    n_iterations: int = 100
    Q: float = DEFAULT_Q
    window_w: int = 1
    delta_m: float = 500.0
    sigma: float = 2.0
    #: JSEA fine-tuning step size and iteration count; default to the SHOT values.
    mu_jsea: float | None = None
    jsea_iterations: int | None = None
    chunk: int = 64

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mu_shot < 0:
            raise ValueError("step size must be non-negative")
        if self.delta_m <= 0:
            raise ValueError("delta must be positive")
        if self.n_iterations < 0:
            raise ValueError("iteration count must be non-negative")

    @property
    def jsea_lr(self) -> float:
        return self.mu_shot if self.mu_jsea is None else self.mu_jsea

    @property
    def jsea_steps(self) -> int:
        return self.n_iterations if self.jsea_iterations is None else self.jsea_iterations

    @classmethod
    def from_section(cls, sec) -> "AdaptConfig":
        kw = {}
        for f in ("beta", "mu_shot", "Q", "delta_m", "sigma", "mu_jsea"):
            if f in sec:
                kw[f] = sec.getfloat(f)
        for f in ("n_iterations", "window_w", "jsea_iterations", "chunk"):
            if f in sec:
                kw[f] = sec.getint(f)
        return cls(**kw)

    @classmethod
    def from_file(cls, path, section: str = "adapt") -> "AdaptConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_section(cp[section]) if cp.has_section(section) else cls()


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    sample_id: int
    d_hat_m: float
    soft: np.ndarray
    origin: str
    flagged: bool = False


@dataclass
class AdaptResult:
    """Per-sample estimates of one adaptation run.

    ``params`` is the adapted model (``None`` when no fine-tuning ran).
    """

    d_hat_m: np.ndarray
    origin: list[str]
    flagged: np.ndarray
    report: UncertaintyReport
    certain: CertainSet
    params: nn.ModelParameters | None = None
    pseudo_labels: list[PseudoLabel] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    @property
    def pu(self) -> np.ndarray:
        return self.report.pu


def _frozen_copy(params: nn.ModelParameters) -> nn.ModelParameters:
    model = params.copy(with_optimizer=False)
    model.reset_optimizer()
    model.freeze("head")
    return model


def _inputs_and_powers(test):
    if isinstance(test, Dataset):
        return test.inputs(), test.powers()
    x, psi = test
    return np.asarray(x, dtype=float), np.asarray(psi, dtype=float)


# ---------------------------------------------------------------------------
# SHOT
# ---------------------------------------------------------------------------

def shot_objective(certain_idx, pseudo, beta: float):
    """``-H(mean softmax) + beta/|S| sum_S CE(pseudo, softmax)`` and its logit gradient."""
    certain_idx = np.asarray(certain_idx, dtype=int)
    pseudo = np.asarray(pseudo, dtype=float)

    def objective(logits):
        N = logits.shape[0]
        logp = nn.log_softmax(logits)
        p = np.exp(logp)
        ybar = p.mean(axis=0)
        log_ybar = np.log(np.maximum(ybar, np.finfo(float).tiny))
        H = float(-np.sum(ybar * log_ybar))
        # d(-H)/dz_i = p_i * (log ybar - <p_i, log ybar>) / N
        grad = p * (log_ybar - (p @ log_ybar)[:, None]) / N
        S = certain_idx.size
        ce = 0.0
        if S:
            ce = float(-np.sum(pseudo * logp[certain_idx])) / S
            grad[certain_idx] += beta * (p[certain_idx] - pseudo) / S
        return -H + beta * ce, grad

    return objective


def shot_adapt(params: nn.ModelParameters, test, config: AdaptConfig | None = None,
               seed: int = 0, grid: RangeGrid | None = None) -> AdaptResult:
    """Fine-tune the trunk with the head frozen; re-predict only uncertain samples.

    Pseudo-labels on the certain set are softened single-peak estimates of
    the pre-trained model and stay fixed during the run.  ``seed`` is kept
    for interface symmetry; the full-batch eval-mode loop is deterministic.
    """
    cfg = config or AdaptConfig()
    grid = grid or model_grid(params)
    x, psi = _inputs_and_powers(test)
    pmf0 = nn.softmax(nn.predict_logits(params, x))
    report = analyze(pmf0, cfg.Q, cfg.window_w)
    certain, uncertain = partition_certain(report, grid=grid, powers=psi)
    if len(certain) == 0:
        raise NoCertainSamples("no certain samples in the test batch")
    pseudo = soften_label(quantize_range(certain.ranges_m, grid), cfg.sigma, grid)

    model = _frozen_copy(params)
    objective = shot_objective(certain.ids, pseudo, cfg.beta)
    history = []
    for it in range(cfg.n_iterations):
        value, grads = nn.objective_gradients(model, x, objective, chunk=cfg.chunk)
        nn.adam_step(model, grads, cfg.mu_shot)
        history.append(value)
        log.debug("shot iteration %d loss %.6f", it, value)

    d_hat = np.empty(len(x))
    origin = [CERTAIN_PEAK] * len(x)
    d_hat[certain.ids] = certain.ranges_m
    if uncertain.size:
        pmf1 = nn.softmax(nn.predict_logits(model, x[uncertain]))
        d_hat[uncertain] = predict_range(pmf1, grid)
        for i in uncertain:
            origin[i] = SHOT_REPREDICTED
    labels = [PseudoLabel(int(i), float(d), pseudo[n], CERTAIN_PEAK)
              for n, (i, d) in enumerate(zip(certain.ids, certain.ranges_m))]
    return AdaptResult(d_hat, origin, np.zeros(len(x), dtype=bool), report, certain, model,
                       labels, history)


# ---------------------------------------------------------------------------
# JSEA
# ---------------------------------------------------------------------------

def estimate_psi0(d_m: float, certain: CertainSet, delta_m: float) -> float | None:
    """Mean power of certain samples whose estimate lies within ``delta_m`` of ``d_m``.

    Returns ``None`` when that neighbourhood is empty.
    """
    near = np.abs(d_m - certain.ranges_m) <= delta_m
    if not np.any(near):
        return None
    return float(np.mean(certain.powers[near]))


def select_by_power(peak_ranges_m, psi: float, certain: CertainSet, delta_m: float):
    """Peak whose neighbourhood power is closest to ``psi`` (ties: smaller range).

    Returns ``(range, False)``, or ``(None, True)`` if every neighbourhood
    is empty.
    """
    best, best_cost = None, np.inf
    for d in sorted(float(r) for r in peak_ranges_m):
        psi0 = estimate_psi0(d, certain, delta_m)
        if psi0 is None:
            continue
        cost = (psi - psi0) ** 2
        if cost < best_cost:
            best, best_cost = d, cost
    return best, best is None


def jsea_select(pmf, psi: float, certain: CertainSet, config: AdaptConfig | None = None,
                grid: RangeGrid | None = None, sample_id: int = 0,
                report: PeakReport | None = None) -> PseudoLabel:
    """Pseudo-label of one sample.

    Single-peak outputs keep their peak.  Otherwise the peak minimizing
    ``(psi - psi0(d))**2`` wins, where ``psi0`` is estimated from the
    certain set; if no peak has certain neighbours the largest peak is
    used and the label is flagged as not rectifiable.
    """
    cfg = config or AdaptConfig()
    grid = grid or RangeGrid()
    rep = report or find_significant_peaks(pmf, cfg.Q, cfg.window_w)
    ranges = rep.peak_ranges(grid)
    if rep.pu == 0:
        d, origin, flagged = float(ranges[0]), CERTAIN_PEAK, False
    else:
        if len(certain) == 0:
            raise NoCertainSamples("uncertain sample but no certain samples to estimate power")
        d, flagged = select_by_power(ranges, psi, certain, cfg.delta_m)
        if flagged:
            d, origin = float(grid.midpoints[rep.top_bin]), FALLBACK
        else:
            origin = POWER_SELECTED
    soft = soften_label(quantize_range(d, grid), cfg.sigma, grid)
    return PseudoLabel(int(sample_id), d, soft, origin, flagged)


def jsea_from_pmfs(pmfs, powers, config: AdaptConfig | None = None,
                   grid: RangeGrid | None = None, report: UncertaintyReport | None = None) -> AdaptResult:
    """Pseudo-labels and range estimates for a batch of output PMFs."""
    cfg = config or AdaptConfig()
    grid = grid or RangeGrid()
    pmfs = np.atleast_2d(pmfs)
    psi = np.asarray(powers, dtype=float)
    report = report or analyze(pmfs, cfg.Q, cfg.window_w)
    certain, uncertain = partition_certain(report, grid=grid, powers=psi)
    if uncertain.size and len(certain) == 0:
        raise NoCertainSamples("no certain samples in the test batch")
    labels = [jsea_select(pmfs[i], psi[i], certain, cfg, grid, sample_id=i, report=report.peaks[i])
              for i in range(len(pmfs))]
    return AdaptResult(np.array([p.d_hat_m for p in labels]), [p.origin for p in labels],
                       np.array([p.flagged for p in labels]), report, certain, None, labels)


def jsea(params: nn.ModelParameters, test, config: AdaptConfig | None = None,
         grid: RangeGrid | None = None, finetune: bool = False, seed: int = 0) -> AdaptResult:
    """Range estimates from peak selection, optionally followed by fine-tuning.

    The estimates always come from the selection step; fine-tuning only
    prepares the model for later batches.
    """
    cfg = config or AdaptConfig()
    grid = grid or model_grid(params)
    x, psi = _inputs_and_powers(test)
    result = jsea_from_pmfs(nn.softmax(nn.predict_logits(params, x)), psi, cfg, grid)
    if finetune:
        result.params, result.loss_history = jsea_adapt(params, x, result.pseudo_labels, cfg, seed)
    return result


def jsea_adapt(params: nn.ModelParameters, inputs, pseudo_labels, config: AdaptConfig | None = None,
               seed: int = 0):
    """Fine-tune the trunk on ``sum_i CE(pseudo_i, softmax_i)`` with the head frozen.

    Returns ``(adapted params, loss history)``.
    """
    cfg = config or AdaptConfig()
    x = inputs.inputs() if isinstance(inputs, Dataset) else np.asarray(inputs, dtype=float)
    y = np.stack([p.soft for p in pseudo_labels])
    if y.shape[0] != x.shape[0]:
        raise ValueError("need one pseudo-label per sample")

    def objective(logits):
        logp = nn.log_softmax(logits)
        return float(-np.sum(y * logp)), np.exp(logp) - y

    model = _frozen_copy(params)
    history = []
    for _ in range(cfg.jsea_steps):
        value, grads = nn.objective_gradients(model, x, objective, chunk=cfg.chunk)
        nn.adam_step(model, grads, cfg.jsea_lr)
        history.append(value)
    return model, history
