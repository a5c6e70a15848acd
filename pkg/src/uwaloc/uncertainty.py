"""Peakwise uncertainty (PU/APU), MC-dropout mutual information and the certain set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .ranging import RangeGrid, mc_dropout_outputs, model_grid, quantize_range, denormalize_range
from .signals import Dataset

DEFAULT_Q = 10.0


@dataclass(frozen=True)
class PeakReport:
    """Significant peaks of one PMF.

    ``peak_bins`` is sorted ascending; ``pu`` is 0 exactly when a single
    peak is significant.
    """

    peak_bins: tuple[int, ...]
    peak_heights: tuple[float, ...]
    pu: int

    @property
    def n_peaks(self) -> int:
        return len(self.peak_bins)

    @property
    def top_bin(self) -> int:
        """Bin of the largest significant peak (leftmost on ties)."""
        return self.peak_bins[int(np.argmax(self.peak_heights))]

    def peak_ranges(self, grid: RangeGrid) -> np.ndarray:
        return grid.midpoints[list(self.peak_bins)]


def local_maxima(pmf, window_w: int = 1) -> np.ndarray:
    """Bins that dominate their ``+-window_w`` neighbourhood.

    A bin counts when it is strictly above every bin to its left within
    the window and no lower than every bin to its right.  For a flat run
    only its leftmost bin can qualify, and the run must not rise again
    within the window after it ends.
    """
    p = np.asarray(pmf, dtype=float)
    M = p.size
    out = []
    for k in range(M):
        left = p[max(0, k - window_w):k]
        if left.size and not np.all(p[k] > left):
            continue
        e = k
        while e + 1 < M and p[e + 1] == p[k]:
            e += 1
        right = p[e + 1:e + 1 + window_w]
        within = p[k + 1:min(M, k + 1 + window_w)]
        if (right.size and np.any(right > p[k])) or (within.size and np.any(within > p[k])):
            continue
        out.append(k)
    return np.array(out, dtype=int)


def find_significant_peaks(pmf, Q: float = DEFAULT_Q, window_w: int = 1) -> PeakReport:
    """Significant peaks and the PU bit of a PMF.

    With ``h1`` the largest local maximum, another local maximum ``h`` is
    significant when ``Q h > h1``.  PU is 0 iff ``h1 >= Q h2`` for the
    runner-up ``h2``, i.e. when the top peak is the only significant one.
    The test uses height ratios only, so it is unchanged by rescaling the
    PMF.
    """
    if Q <= 1:
        raise ValueError("Q must exceed 1")
    if window_w < 1:
        raise ValueError("window must be at least 1")
    p = np.asarray(pmf, dtype=float)
    peaks = local_maxima(p, window_w)
    h = p[peaks]
    top = int(np.argmax(h))
    keep = (Q * h > h[top])
    keep[top] = True
    bins = peaks[keep]
    return PeakReport(tuple(int(b) for b in bins), tuple(float(x) for x in p[bins]),
                      int(bins.size > 1))


def apu(reports) -> float:
    """Percentage of samples with more than one significant peak."""
    bits = [r.pu if isinstance(r, PeakReport) else int(r) for r in reports]
    if not bits:
        raise ValueError("APU of an empty batch")
    return 100.0 * sum(bits) / len(bits)


# ---------------------------------------------------------------------------
# MUMI
# ---------------------------------------------------------------------------

def mutual_information(pass_pmfs) -> np.ndarray:
    """``H(mean_j p_j) - mean_j H(p_j)`` over the pass axis (second to last).

    For one-hot passes the second term vanishes and this is the entropy
    of the pass histogram.
    """
    p = np.asarray(pass_pmfs, dtype=float)
    mi = nn.entropy(p.mean(axis=-2)) - nn.entropy(p).mean(axis=-1)
    return np.clip(mi, 0.0, np.log(p.shape[-1]))


def mumi(params: nn.ModelParameters, samples, J: int = 50, grid: RangeGrid | None = None,
         seed: int = 0) -> np.ndarray:
    """MC-dropout mutual information in nats, one value per sample.

    Regressors quantize each pass onto the range bins and one-hot encode
    it; classifiers use the per-pass softmax outputs.
    """
    if J < 2:
        raise ValueError("MUMI needs at least two dropout passes")
    if params.spec.dropout <= 0:
        raise ValueError("MUMI needs a model with dropout")
    grid = grid or model_grid(params)
    out = mc_dropout_outputs(params, samples, J, seed)
    if params.spec.task == "regressor":
        bins = quantize_range(denormalize_range(out[..., 0], grid), grid)
        passes = np.eye(grid.class_count)[np.atleast_2d(bins)]
    else:
        passes = nn.softmax(out)
    return mutual_information(passes)


# ---------------------------------------------------------------------------
# certain set
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CertainSet:
    """Samples with one significant peak: ids, their estimates and powers."""

    ids: np.ndarray
    ranges_m: np.ndarray
    powers: np.ndarray

    def __len__(self):
        return int(self.ids.size)


@dataclass
class UncertaintyReport:
    peaks: list[PeakReport]
    sample_ids: np.ndarray
    mumi_nats: np.ndarray | None = None

    @property
    def pu(self) -> np.ndarray:
        return np.array([r.pu for r in self.peaks], dtype=int)

    @property
    def apu_percent(self) -> float:
        return apu(self.peaks)

    @property
    def certain_ids(self) -> np.ndarray:
        return self.sample_ids[self.pu == 0]

    @property
    def uncertain_ids(self) -> np.ndarray:
        return self.sample_ids[self.pu == 1]

    @property
    def mean_mumi(self) -> float:
        return float("nan") if self.mumi_nats is None else float(np.mean(self.mumi_nats))


def analyze(pmfs, Q: float = DEFAULT_Q, window_w: int = 1, sample_ids=None,
            mumi_nats=None) -> UncertaintyReport:
    pmfs = np.atleast_2d(pmfs)
    ids = np.arange(len(pmfs)) if sample_ids is None else np.asarray(sample_ids)
    reports = [find_significant_peaks(p, Q, window_w) for p in pmfs]
    return UncertaintyReport(reports, ids, None if mumi_nats is None else np.asarray(mumi_nats))


def partition_certain(reports, dataset: Dataset | None = None, grid: RangeGrid | None = None,
                      powers=None):
    """Split indices by PU; the certain part carries estimates and powers.

    Returns ``(certain, uncertain_indices)`` where ``certain`` is a
    :class:`CertainSet` of positional indices into the batch.
    """
    if isinstance(reports, UncertaintyReport):
        reports = reports.peaks
    grid = grid or RangeGrid()
    if powers is None:
        powers = dataset.powers() if dataset is not None else np.full(len(reports), np.nan)
    powers = np.asarray(powers, dtype=float)
    if powers.size != len(reports):
        raise ValueError("reports do not cover the dataset")
    pu = np.array([r.pu for r in reports], dtype=int)
    idx = np.flatnonzero(pu == 0)
    d_hat = np.array([grid.midpoints[reports[i].peak_bins[0]] for i in idx], dtype=float)
    return CertainSet(idx, d_hat, powers[idx]), np.flatnonzero(pu == 1)
