"""
Range-independent normal-mode propagation.

The depth-separated Helmholtz equation

    rho d/dz (1/rho dPsi/dz) + (omega^2 / c(z)^2 - k^2) Psi = 0

is discretized with a density-weighted finite-volume scheme on a uniform
grid from the sea surface down to an artificial pressure-release
termination below the sediment.  The symmetrized problem is a real
symmetric tridiagonal eigenproblem, solved with LAPACK through
``scipy.linalg.eigh_tridiagonal``.  Sediment attenuation enters
perturbatively as the imaginary part of each horizontal wavenumber.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

#: Depth of the training environment; pivot of the SSP gradient perturbation.
TRAINING_DEPTH_M = 216.5

#: dB per neper.
DB_PER_NEPER = 20.0 * math.log10(math.e)


class NoModesError(RuntimeError):
    """Raised when no propagating mode exists at the requested frequency."""


@dataclass(frozen=True)
class SedimentLayer:
    thickness_m: float
    density_g_cm3: float
    c_top_m_s: float
    c_bottom_m_s: float
    attenuation_db_per_km_hz: float = 0.0

    def __post_init__(self):
        if self.thickness_m <= 0:
            raise ValueError("sediment layer thickness must be positive")
        if self.density_g_cm3 <= 0 or self.c_top_m_s <= 0 or self.c_bottom_m_s <= 0:
            raise ValueError("sediment density and sound speeds must be positive")
        if self.attenuation_db_per_km_hz < 0:
            raise ValueError("sediment attenuation must be non-negative")


@dataclass(frozen=True)
class Environment:
    """Flat-bottom ocean: water column over a stack of fluid sediment layers.

    The last sediment layer extends down to ``termination_depth_m`` if the
    stack is thinner than the space below the seabed.  ``ssp_gradient_delta``
    is the SSP gradient mismatch in (m/s)/m; it is applied on the fly by
    :meth:`sound_speed` and baked in by :func:`perturb_ssp`.
    """

    water_depth_m: float
    ssp_depths_m: tuple[float, ...]
    ssp_speeds_m_s: tuple[float, ...]
    sediment: tuple[SedimentLayer, ...]
    termination_depth_m: float
    ssp_gradient_delta: float = 0.0
    water_density_g_cm3: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ssp_depths_m", tuple(float(z) for z in self.ssp_depths_m))
        object.__setattr__(self, "ssp_speeds_m_s", tuple(float(c) for c in self.ssp_speeds_m_s))
        object.__setattr__(self, "sediment", tuple(self.sediment))
        if self.water_depth_m <= 0:
            raise ValueError("water depth must be positive")
        if self.termination_depth_m <= self.water_depth_m:
            raise ValueError("termination depth must lie below the seabed")
        z = np.asarray(self.ssp_depths_m)
        c = np.asarray(self.ssp_speeds_m_s)
        if z.size < 1 or z.size != c.size:
            raise ValueError("SSP depths and speeds must be nonempty and of equal length")
        if np.any(np.diff(z) <= 0):
            raise ValueError("SSP depths must be strictly increasing")
        if z[0] != 0.0 or z[-1] < self.water_depth_m:
            raise ValueError("SSP must span [0, water_depth_m]")
        if np.any(c <= 0):
            raise ValueError("SSP speeds must be positive")
        if not self.sediment:
            raise ValueError("at least one sediment layer is required")
        if self.water_density_g_cm3 <= 0:
            raise ValueError("water density must be positive")

    def sound_speed(self, z) -> np.ndarray:
        """Water sound speed at depth(s) ``z`` including the gradient mismatch."""
        z = np.asarray(z, dtype=float)
        c0 = np.interp(z, self.ssp_depths_m, self.ssp_speeds_m_s)
        if self.ssp_gradient_delta != 0.0:
            c0 = c0 + self.ssp_gradient_delta / TRAINING_DEPTH_M * (z - TRAINING_DEPTH_M)
        return c0

    def profile(self, z):
        """Return ``(c, rho, alpha)`` sampled at depths ``z``.

        ``alpha`` is in dB/(km Hz); it is zero in the water column.
        Points exactly on the seabed belong to the water.
        """
        z = np.asarray(z, dtype=float)
        c = np.empty_like(z)
        rho = np.empty_like(z)
        alpha = np.zeros_like(z)

        water = z <= self.water_depth_m
        c[water] = self.sound_speed(z[water])
        rho[water] = self.water_density_g_cm3

        top = self.water_depth_m
        remaining = ~water
        for n, layer in enumerate(self.sediment):
            bottom = top + layer.thickness_m
            last = n == len(self.sediment) - 1
            sel = remaining & ((z <= bottom) | last)
            frac = np.clip((z[sel] - top) / layer.thickness_m, 0.0, 1.0)
            c[sel] = layer.c_top_m_s + frac * (layer.c_bottom_m_s - layer.c_top_m_s)
            rho[sel] = layer.density_g_cm3
            alpha[sel] = layer.attenuation_db_per_km_hz
            remaining &= ~sel
            top = bottom
        return c, rho, alpha

    def digest(self) -> str:
        """Stable short hash used as dataset provenance."""
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ArrayGeometry:
    hydrophone_depths_m: tuple[float, ...]

    def __post_init__(self):
        depths = tuple(float(z) for z in self.hydrophone_depths_m)
        object.__setattr__(self, "hydrophone_depths_m", depths)
        if len(depths) < 1:
            raise ValueError("array needs at least one hydrophone")
        if any(z <= 0 for z in depths) or np.any(np.diff(depths) <= 0):
            raise ValueError("hydrophone depths must be positive and strictly increasing")

    @property
    def size(self) -> int:
        return len(self.hydrophone_depths_m)

    def check_within(self, env: Environment) -> None:
        if max(self.hydrophone_depths_m) >= env.water_depth_m:
            raise ValueError("hydrophones must lie inside the water column")


@dataclass(frozen=True, eq=False)
class ModeSet:
    """Normal modes at one frequency.

    ``mode_functions`` has shape ``(n_modes, n_grid)`` and is normalized so
    that the trapezoidal integral of ``Psi_m Psi_n / density`` over
    ``depth_grid`` equals the Kronecker delta.  ``density`` holds the
    effective (cell-averaged) density seen by the discretization.
    """

    frequency_hz: float
    wavenumbers: np.ndarray
    mode_functions: np.ndarray
    depth_grid: np.ndarray
    density: np.ndarray
    water_depth_m: float
    meta: dict = field(default_factory=dict)

    @property
    def mode_count(self) -> int:
        return int(self.wavenumbers.size)

    def orthonormality_residual(self) -> float:
        w = np.full(self.depth_grid.size, self.depth_grid[1] - self.depth_grid[0])
        w[[0, -1]] *= 0.5
        gram = (self.mode_functions * (w / self.density)) @ self.mode_functions.T
        return float(np.max(np.abs(gram - np.eye(self.mode_count))))


def swellex_environment(**overrides) -> Environment:
    """SWellEx-96-like shallow-water environment.

    The SSP is an approximate average downward-refracting profile; the
    sediment stack follows the published SWellEx-96 geoacoustic model,
    with the mudstone layer truncated at 200 m below the seabed.
    """
    depths = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0,
              75.0, 100.0, 125.0, 150.0, 175.0, 200.0, 216.5)
    speeds = (1521.9, 1521.4, 1519.0, 1513.5, 1508.0, 1503.0, 1499.6, 1495.8,
              1493.9, 1492.8, 1491.8, 1490.7, 1490.0, 1489.4, 1488.9, 1488.5, 1488.2)
    mudstone_thickness = 176.5
    sediment = (
        SedimentLayer(23.5, 1.76, 1572.37, 1593.02, 0.2),
        SedimentLayer(mudstone_thickness, 2.06, 1881.0,
                      1881.0 + (3245.8 - 1881.0) * mudstone_thickness / 800.0, 0.06),
    )
    env = Environment(
        water_depth_m=TRAINING_DEPTH_M,
        ssp_depths_m=depths,
        ssp_speeds_m_s=speeds,
        sediment=sediment,
        termination_depth_m=TRAINING_DEPTH_M + 200.0,
    )
    return replace(env, **overrides) if overrides else env


def swellex_array() -> ArrayGeometry:
    """21-element VLA spanning 94.125 m to 212.25 m."""
    return ArrayGeometry(tuple(np.linspace(94.125, 212.25, 21)))


def perturb_ssp(env: Environment) -> Environment:
    """Bake the SSP gradient mismatch into the profile samples.

    ``c(z) = c0(z) + (dc / 216.5) (z - 216.5)``; the returned environment
    has ``ssp_gradient_delta == 0``.
    """
    speeds = tuple(float(c) for c in env.sound_speed(np.asarray(env.ssp_depths_m)))
    return replace(env, ssp_speeds_m_s=speeds, ssp_gradient_delta=0.0)


def deepen(env: Environment, delta_d_m: float) -> Environment:
    """Shift the seabed (and everything below it) down by ``delta_d_m``.

    The SSP is extended below its last sample by holding the last speed.
    """
    if delta_d_m == 0:
        return env
    depth = env.water_depth_m + delta_d_m
    z = list(env.ssp_depths_m)
    c = list(env.ssp_speeds_m_s)
    if z[-1] < depth:
        z.append(depth)
        c.append(c[-1])
    return replace(env, water_depth_m=depth, ssp_depths_m=tuple(z), ssp_speeds_m_s=tuple(c),
                   termination_depth_m=env.termination_depth_m + delta_d_m)


def default_grid_points(env: Environment, spacing_m: float = 0.1) -> int:
    return int(round(env.termination_depth_m / spacing_m)) + 1


def _cell_means(env, edges_lo, edges_hi, n_sub):
    # midpoint-rule samples inside each [lo, hi] cell
    frac = (np.arange(n_sub) + 0.5) / n_sub
    z = edges_lo[:, None] + (edges_hi - edges_lo)[:, None] * frac[None, :]
    c, rho, alpha = env.profile(z)
    return c, rho, alpha


def solve_modes(env: Environment, frequency_hz: float, grid_points: int | None = None,
                max_phase_speed: float | None = None, n_sub: int = 8) -> ModeSet:
    """Solve for the trapped normal modes of ``env`` at ``frequency_hz``.

    Parameters
    ----------
    env : Environment
    frequency_hz : float
    grid_points : int, optional
        Number of nodes from the surface to the termination depth,
        inclusive.  Defaults to one node per 0.1 m.
    max_phase_speed : float, optional
        Upper phase-speed limit of retained modes.  Defaults to the
        largest sound speed anywhere on the solver grid.
    n_sub : int
        Sub-samples per cell used to average material properties, which
        handles interfaces falling between nodes.

    Returns
    -------
    ModeSet
        Modes ordered by decreasing ``Re(k)``.

    Raises
    ------
    NoModesError
        If no eigenvalue falls in the propagating band.
    """
    if frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    if grid_points is None:
        grid_points = default_grid_points(env)
    if grid_points < 500:
        raise ValueError("grid_points must be at least 500")

    omega = 2.0 * np.pi * frequency_hz
    z = np.linspace(0.0, env.termination_depth_m, grid_points)
    h = z[1] - z[0]
    zi = z[1:-1]

    # Node cells: averaged 1/rho, omega^2/(c^2 rho) and attenuation weight.
    c, rho, alpha = _cell_means(env, zi - h / 2, zi + h / 2, n_sub)
    b = np.mean(1.0 / rho, axis=1)
    q = np.mean(omega**2 / (c**2 * rho), axis=1)
    alpha_np = alpha * frequency_hz / 1000.0 / DB_PER_NEPER
    q_att = np.mean(alpha_np * omega / (c * rho), axis=1)

    # Segment coefficients: harmonic mean of 1/rho between adjacent nodes.
    _, rho_seg, _ = _cell_means(env, z[:-1], z[1:], n_sub)
    a = 1.0 / np.mean(rho_seg, axis=1)

    diag = (-(a[:-1] + a[1:]) / h**2 + q) / b
    off = a[1:-1] / h**2 / np.sqrt(b[:-1] * b[1:])

    c_grid = env.profile(z)[0]
    c_lo = float(np.min(c_grid))
    c_hi = float(np.max(c_grid)) if max_phase_speed is None else float(max_phase_speed)
    lo, hi = (omega / c_hi) ** 2, (omega / c_lo) ** 2
    if not lo < hi:
        raise NoModesError(f"no propagating modes at {frequency_hz} Hz (empty phase-speed band)")
    try:
        k2, u = eigh_tridiagonal(diag, off, select="v", select_range=(lo, hi))
    except np.linalg.LinAlgError:
        k2 = np.empty(0)
    keep = (k2 > lo) & (k2 < hi)
    if not np.any(keep):
        raise NoModesError(f"no propagating modes at {frequency_hz} Hz")
    k2, u = k2[keep][::-1], u[:, keep][:, ::-1]

    psi = (u / np.sqrt(b * h)[:, None]).T
    # sign convention: positive slope at the surface
    first = np.argmax(np.abs(psi) > 1e-12 * np.max(np.abs(psi), axis=1, keepdims=True), axis=1)
    sign = np.sign(psi[np.arange(psi.shape[0]), first])
    psi *= sign[:, None]

    kr = np.sqrt(k2)
    ki = h * (psi**2 @ q_att) / kr
    modes = np.zeros((psi.shape[0], grid_points))
    modes[:, 1:-1] = psi

    density = np.empty(grid_points)
    density[1:-1] = 1.0 / b
    density[0] = env.profile(np.array([0.0]))[1][0]
    density[-1] = env.profile(np.array([z[-1]]))[1][0]
    return ModeSet(
        frequency_hz=float(frequency_hz),
        wavenumbers=kr + 1j * ki,
        mode_functions=modes,
        depth_grid=z,
        density=density,
        water_depth_m=env.water_depth_m,
        meta={"env_digest": env.digest(), "grid_points": grid_points},
    )


def _interp_weights(grid, depths):
    h = grid[1] - grid[0]
    pos = (np.asarray(depths, dtype=float) - grid[0]) / h
    i0 = np.clip(np.floor(pos).astype(int), 0, grid.size - 2)
    w1 = pos - i0
    return i0, w1


def sample_modes(modes: ModeSet, depths) -> np.ndarray:
    """Linearly interpolate every mode at ``depths``; shape ``(n_modes, n_depths)``."""
    i0, w1 = _interp_weights(modes.depth_grid, depths)
    psi = modes.mode_functions
    return psi[:, i0] * (1.0 - w1) + psi[:, i0 + 1] * w1


def mode_sum(modes: ModeSet, excitation: np.ndarray, source_density: float,
             ranges_m, array: ArrayGeometry) -> np.ndarray:
    """Mode sum with explicit source excitation ``excitation[m] = Psi_m(z_s)``.

    Returns shape ``(n_ranges, L)``.
    """
    r = np.atleast_1d(np.asarray(ranges_m, dtype=float))
    if np.any(r <= 0):
        raise ValueError("range must be positive")
    k = modes.wavenumbers
    receivers = sample_modes(modes, array.hydrophone_depths_m)
    phase = np.exp(1j * np.outer(r, k)) / np.sqrt(k)[None, :]
    scale = 1j * np.exp(-1j * np.pi / 4) / (source_density * np.sqrt(8.0 * np.pi * r))
    return scale[:, None] * ((phase * excitation[None, :]) @ receivers)


def pressure_fields(modes: ModeSet, source_depth_m: float, ranges_m, array: ArrayGeometry) -> np.ndarray:
    """Complex pressure on the array for several source ranges, ``(n_ranges, L)``."""
    if not 0 < source_depth_m < modes.water_depth_m:
        raise ValueError("source must lie inside the water column")
    excitation = sample_modes(modes, [source_depth_m])[:, 0]
    i0, w1 = _interp_weights(modes.depth_grid, [source_depth_m])
    rho_s = float(modes.density[i0[0]] * (1 - w1[0]) + modes.density[i0[0] + 1] * w1[0])
    return mode_sum(modes, excitation, rho_s, ranges_m, array)


def pressure_field(modes: ModeSet, source_depth_m: float, range_m: float, array: ArrayGeometry) -> np.ndarray:
    """Complex pressure at each hydrophone for one source position (length L)."""
    if range_m <= 0:
        raise ValueError("range must be positive")
    return pressure_fields(modes, source_depth_m, [range_m], array)[0]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def load_environment(path) -> Environment:
    """Read an environment INI file.

    Layout::

        [environment]
        water_depth_m = 216.5
        termination_depth_m = 416.5
        ssp_gradient_delta = 0.0      ; optional
        water_density_g_cm3 = 1.0     ; optional

        [ssp]
        0.0 = 1521.9                  ; depth_m = speed_m_s
        216.5 = 1488.2

        [layer.1]                     ; layers ordered by their number
        thickness_m = 23.5
        density_g_cm3 = 1.76
        c_top_m_s = 1572.37
        c_bottom_m_s = 1593.02
        attenuation_db_per_km_hz = 0.2
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    sec = cp["environment"]
    ssp = sorted((float(k), float(v)) for k, v in cp["ssp"].items())
    layer_names = sorted((s for s in cp.sections() if s.startswith("layer.")),
                         key=lambda s: int(s.split(".", 1)[1]))
    layers = tuple(
        SedimentLayer(
            thickness_m=cp.getfloat(s, "thickness_m"),
            density_g_cm3=cp.getfloat(s, "density_g_cm3"),
            c_top_m_s=cp.getfloat(s, "c_top_m_s"),
            c_bottom_m_s=cp.getfloat(s, "c_bottom_m_s"),
            attenuation_db_per_km_hz=cp.getfloat(s, "attenuation_db_per_km_hz", fallback=0.0),
        )
        for s in layer_names
    )
    return Environment(
        water_depth_m=sec.getfloat("water_depth_m"),
        ssp_depths_m=tuple(z for z, _ in ssp),
        ssp_speeds_m_s=tuple(c for _, c in ssp),
        sediment=layers,
        termination_depth_m=sec.getfloat("termination_depth_m"),
        ssp_gradient_delta=sec.getfloat("ssp_gradient_delta", fallback=0.0),
        water_density_g_cm3=sec.getfloat("water_density_g_cm3", fallback=1.0),
    )


def save_environment(env: Environment, path) -> None:
    cp = configparser.ConfigParser()
    cp["environment"] = {
        "water_depth_m": repr(env.water_depth_m),
        "termination_depth_m": repr(env.termination_depth_m),
        "ssp_gradient_delta": repr(env.ssp_gradient_delta),
        "water_density_g_cm3": repr(env.water_density_g_cm3),
    }
    cp["ssp"] = {repr(z): repr(c) for z, c in zip(env.ssp_depths_m, env.ssp_speeds_m_s)}
    for n, layer in enumerate(env.sediment, start=1):
        cp[f"layer.{n}"] = {
            "thickness_m": repr(layer.thickness_m),
            "density_g_cm3": repr(layer.density_g_cm3),
            "c_top_m_s": repr(layer.c_top_m_s),
            "c_bottom_m_s": repr(layer.c_bottom_m_s),
            "attenuation_db_per_km_hz": repr(layer.attenuation_db_per_km_hz),
        }
    with Path(path).open("w") as fh:
        cp.write(fh)
