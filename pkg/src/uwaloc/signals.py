"""Normalized sample-covariance features, noise injection and datasets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .waveguide import ArrayGeometry, Environment, pressure_fields, solve_modes


class NormalizationError(ValueError):
    """A snapshot with zero norm cannot be normalized."""


@dataclass(frozen=True)
class ScmSample:
    """One network input.

    ``features`` has shape ``(2, L, L)`` holding the real and imaginary
    parts of the unit-trace SCM.  ``true_range_m`` is NaN for unlabeled
    samples.
    """

    features: np.ndarray
    received_power: float
    true_range_m: float = float("nan")
    snapshot_count: int = 1
    sample_id: int = 0

    @property
    def labeled(self) -> bool:
        return not np.isnan(self.true_range_m)

    def scm(self) -> np.ndarray:
        return self.features[0] + 1j * self.features[1]


@dataclass
class Dataset:
    samples: list[ScmSample]
    array: ArrayGeometry | None
    frequency_hz: float
    metadata: dict = field(default_factory=dict)
    #: Optional complex snapshots, shape ``(N, P, L)``; kept in memory only.
    snapshots: np.ndarray | None = None

    def __post_init__(self):
        if self.samples:
            L = self.samples[0].features.shape[-1]
            if any(s.features.shape != (2, L, L) for s in self.samples):
                raise ValueError("all samples must share the array size")

    def __len__(self):
        return len(self.samples)

    @property
    def n_elements(self) -> int:
        if self.samples:
            return self.samples[0].features.shape[-1]
        return self.array.size

    def inputs(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 2, self.n_elements, self.n_elements))
        return np.stack([s.features for s in self.samples])

    def ranges(self) -> np.ndarray:
        return np.array([s.true_range_m for s in self.samples], dtype=float)

    def powers(self) -> np.ndarray:
        return np.array([s.received_power for s in self.samples], dtype=float)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        snaps = None if self.snapshots is None else self.snapshots[idx]
        return Dataset([self.samples[i] for i in idx], self.array, self.frequency_hz,
                       dict(self.metadata), snaps)

    def recover_snapshots(self) -> np.ndarray:
        """Snapshots, reconstructing them from rank-1 SCMs when not stored.

        For single-snapshot samples the SCM is ``r r^H / |r|^2`` so the
        snapshot is recovered up to a global phase as the principal
        eigenvector scaled by ``sqrt(psi)``.
        """
        if self.snapshots is not None:
            return self.snapshots
        if any(s.snapshot_count != 1 for s in self.samples):
            raise ValueError("snapshots can only be recovered for single-snapshot data")
        out = np.empty((len(self), 1, self.n_elements), dtype=complex)
        for i, s in enumerate(self.samples):
            w, v = np.linalg.eigh(s.scm())
            out[i, 0] = v[:, -1] * np.sqrt(s.received_power)
        return out


def compute_scm(snapshots, true_range_m: float = float("nan"), sample_id: int = 0) -> ScmSample:
    """Unit-trace SCM of ``P`` snapshots (rows of ``snapshots``)."""
    r = np.atleast_2d(np.asarray(snapshots, dtype=complex))
    if r.shape[0] < 1:
        raise ValueError("need at least one snapshot")
    power = np.sum(np.abs(r) ** 2, axis=1)
    if np.any(power <= 0):
        raise NormalizationError("zero-norm snapshot")
    rt = r / np.sqrt(power)[:, None]
    C = np.einsum("pi,pj->ij", rt, rt.conj()) / r.shape[0]
    C = 0.5 * (C + C.conj().T)
    features = np.stack([C.real, C.imag])
    return ScmSample(features, float(np.mean(power)), float(true_range_m), r.shape[0], sample_id)


def scm_batch(snapshots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`compute_scm` for ``(N, P, L)``; returns features, powers."""
    r = np.asarray(snapshots, dtype=complex)
    power = np.sum(np.abs(r) ** 2, axis=2)
    if np.any(power <= 0):
        raise NormalizationError("zero-norm snapshot")
    rt = r / np.sqrt(power)[:, :, None]
    C = np.einsum("npi,npj->nij", rt, rt.conj()) / r.shape[1]
    C = 0.5 * (C + np.swapaxes(C.conj(), 1, 2))
    return np.stack([C.real, C.imag], axis=1), power.mean(axis=1)


def batch_snr_db(signal: np.ndarray, noise_power: float) -> float:
    """Average array SNR of a batch of clean snapshots for a noise power per element."""
    s = np.asarray(signal)
    return float(10 * np.log10(np.sum(np.abs(s) ** 2) / (s.size * noise_power)))


def noise_power_for_snr(signal: np.ndarray, snr_db: float) -> float:
    s = np.asarray(signal)
    return float(np.sum(np.abs(s) ** 2) / (s.size * 10 ** (snr_db / 10)))


def _seed_words(seed) -> list[int]:
    if seed is None:
        return [0]
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return (list(ent) if isinstance(ent, (list, tuple)) else [int(ent)]) + list(seed.spawn_key)
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def add_noise(snapshots, snr_db: float, seed=None, noise=None, exact_power: bool = False,
              per_sample: bool = False) -> np.ndarray:
    """Add complex noise to a batch of snapshots at a target batch SNR.

    Parameters
    ----------
    snapshots : array_like, shape (N, P, L)
    snr_db : float
        Target average array SNR of the batch.  ``inf`` returns the batch
        unchanged.
    seed : int, sequence of int or SeedSequence, optional
        Sample ``i`` draws its noise from ``SeedSequence([*seed, i])`` so the
        result does not depend on how the batch is split.
    noise : array_like, shape (K, L), optional
        External noise coefficients.  Each snapshot receives a row drawn
        at random, rescaled to the target noise power.  White complex
        Gaussian noise is used when omitted.
    exact_power : bool
        Rescale the drawn noise so its empirical power equals the target
        exactly instead of only in expectation.
    per_sample : bool
        Set the SNR per sample instead of over the whole batch.
    """
    r = np.asarray(snapshots, dtype=complex)
    if r.ndim != 3 or r.shape[0] == 0:
        raise ValueError("expected a nonempty (N, P, L) batch")
    if np.isposinf(snr_db):
        return r.copy()
    if not np.isfinite(snr_db):
        raise ValueError("SNR must be finite or +inf")
    N, P, L = r.shape
    if noise is not None:
        noise = np.asarray(noise, dtype=complex)
        if noise.ndim != 2 or noise.shape[1] != L:
            raise ValueError(f"external noise must have shape (K, {L})")
        pool_power = np.mean(np.abs(noise) ** 2)

    if per_sample:
        psi_w = np.sum(np.abs(r) ** 2, axis=(1, 2)) / (P * L * 10 ** (snr_db / 10))
    else:
        psi_w = np.full(N, noise_power_for_snr(r, snr_db))

    base = _seed_words(seed)
    w = np.empty_like(r)
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence(base + [i]))
        if noise is None:
            w[i] = (rng.standard_normal((P, L)) + 1j * rng.standard_normal((P, L))) * np.sqrt(0.5)
        else:
            w[i] = noise[rng.integers(0, noise.shape[0], size=P)] / np.sqrt(pool_power)
    if exact_power:
        if per_sample:
            w /= np.sqrt(np.mean(np.abs(w) ** 2, axis=(1, 2)))[:, None, None]
        else:
            w /= np.sqrt(np.mean(np.abs(w) ** 2))
    return r + w * np.sqrt(psi_w)[:, None, None]


def make_dataset(snapshots, ranges_m, array, frequency_hz, metadata=None, keep_snapshots=True) -> Dataset:
    snaps = np.asarray(snapshots, dtype=complex)
    if snaps.shape[0] == 0:
        return Dataset([], array, frequency_hz, dict(metadata or {}),
                       snaps if keep_snapshots else None)
    feats, powers = scm_batch(snaps)
    ranges = np.asarray(ranges_m, dtype=float)
    samples = [ScmSample(feats[i], float(powers[i]), float(ranges[i]), snaps.shape[1], i)
               for i in range(snaps.shape[0])]
    return Dataset(samples, array, frequency_hz, dict(metadata or {}),
                   snaps if keep_snapshots else None)


def synthesize(env: Environment, source_depth_m: float, ranges_m, array: ArrayGeometry,
               frequency_hz: float, modes=None) -> np.ndarray:
    """Noiseless single-snapshot fields, shape ``(N, 1, L)``."""
    ranges = np.asarray(ranges_m, dtype=float)
    if ranges.size == 0:
        return np.zeros((0, 1, array.size), dtype=complex)
    array.check_within(env)
    if modes is None:
        modes = solve_modes(env, frequency_hz)
    return pressure_fields(modes, source_depth_m, ranges, array)[:, None, :]


def generate_dataset(env: Environment, source_depth_m: float, ranges_m, array: ArrayGeometry,
                     frequency_hz: float, snapshot_count: int = 1, snr_db: float = np.inf,
                     seed: int = 0, noise=None, exact_power: bool = False, modes=None) -> Dataset:
    """Synthesize a labeled dataset, one sample per source range.

    With ``snapshot_count > 1`` the clean field is repeated and each copy
    receives independent noise.
    """
    ranges = np.asarray(ranges_m, dtype=float)
    if np.any(ranges <= 0):
        raise ValueError("ranges must be positive")
    clean = synthesize(env, source_depth_m, ranges, array, frequency_hz, modes=modes)
    clean = np.repeat(clean, snapshot_count, axis=1)
    noisy = clean if len(ranges) == 0 else add_noise(clean, snr_db, seed=seed, noise=noise,
                                                     exact_power=exact_power)
    meta = {"environment": env.digest(), "seed": seed, "snr_db": snr_db,
            "source_depth_m": source_depth_m}
    return make_dataset(noisy, ranges, array, frequency_hz, meta)


def training_ranges(start_m=850.0, stop_m=9050.0, step_m=10.0) -> np.ndarray:
    """Inclusive uniform range grid (850:10:9050 gives 821 ranges)."""
    n = int(round((stop_m - start_m) / step_m)) + 1
    return start_m + step_m * np.arange(n)


# ---------------------------------------------------------------------------
# UWAD1 binary format
# ---------------------------------------------------------------------------

MAGIC = b"UWAD1"
_HEADER = struct.Struct("<HHIdI")
FLAG_LABELED = 1


def write_dataset(ds: Dataset, path, label_bins: int = 0) -> None:
    """Write ``ds`` in the UWAD1 layout.

    Header (little-endian): ``L: u16, M: u16, N: u32, frequency_hz: f64,
    flags: u32``.  Flag bit 0 marks a fully labeled set; bits 8-23 carry
    the snapshot count.  Each sample is ``2 L L`` float32 features, then
    float64 range (NaN when unlabeled) and float64 received power.
    """
    L = ds.n_elements
    P = ds.samples[0].snapshot_count if ds.samples else 1
    flags = (FLAG_LABELED if ds.samples and all(s.labeled for s in ds.samples) else 0) | (P << 8)
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(L, label_bins, len(ds), float(ds.frequency_hz), flags))
        for s in ds.samples:
            fh.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
            fh.write(struct.pack("<dd", s.true_range_m, s.received_power))


def read_dataset(path) -> tuple[Dataset, int]:
    """Read a UWAD1 file; returns the dataset and the stored label-bin count."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a UWAD1 file")
    L, M, N, freq, flags = _HEADER.unpack_from(data, 5)
    P = (flags >> 8) & 0xFFFF or 1
    off = 5 + _HEADER.size
    nf = 2 * L * L
    rec = nf * 4 + 16
    if len(data) != off + N * rec:
        raise ValueError(f"{path}: truncated or oversized dataset file")
    samples = []
    for i in range(N):
        base = off + i * rec
        feats = np.frombuffer(data, dtype="<f4", count=nf, offset=base).reshape(2, L, L)
        rng_m, psi = struct.unpack_from("<dd", data, base + nf * 4)
        samples.append(ScmSample(feats.astype(np.float64), psi, rng_m, P, i))
    ds = Dataset(samples, None, freq, {"source": str(path)})
    return ds, M
