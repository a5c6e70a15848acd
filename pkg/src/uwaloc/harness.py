"""Metrics, mismatch sweeps, CSV persistence and the analytic complexity table."""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adaptation, nn, ranging, uncertainty, waveguide
from .signals import add_noise, scm_batch, synthesize, training_ranges

log = logging.getLogger(__name__)

METHODS = ("O-MFP", "M-MFP", "CNN-c", "SHOT", "JSEA-c", "CNN-r", "JSEA-r")
AXES = ("snr_db", "delta_c", "delta_d", "sediment_type")
CLASSIFIER_METHODS = {"CNN-c", "SHOT", "JSEA-c"}
REGRESSOR_METHODS = {"CNN-r", "JSEA-r"}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _pair(d_true, d_hat):
    d = np.asarray(d_true, dtype=float)
    e = np.asarray(d_hat, dtype=float)
    if d.shape != e.shape:
        raise ValueError("true and estimated ranges differ in length")
    if d.size == 0:
        raise ValueError("need at least one sample")
    return d, e


def mae(d_true, d_hat) -> float:
    d, e = _pair(d_true, d_hat)
    return float(np.mean(np.abs(d - e)))


def pcl(d_true, d_hat, zeta: float = 0.1) -> float:
    """Percentage of estimates with ``|d - d_hat| <= zeta d``."""
    d, e = _pair(d_true, d_hat)
    return float(100.0 * np.mean(np.abs(d - e) <= zeta * d))


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

#: density g/cm^3, c_min m/s, c_max m/s, attenuation dB/(km Hz)
SEDIMENTS = {
    "training": (1.76, 1572.37, 1593.02, 0.2),
    "clay": (1.5, 1500.0, 1520.0, 0.2),
    "silt": (1.7, 1575.0, 1595.0, 1.0),
    "sand": (1.9, 1650.0, 1670.0, 0.8),
    "gravel": (2.0, 1800.0, 1820.0, 0.6),
    "moraine": (2.1, 1950.0, 1970.0, 0.4),
}


def with_sediment(env: waveguide.Environment, name: str) -> waveguide.Environment:
    """Replace the top sediment layer by one of the tabulated sediment types.

    Thickness and the deeper layers are kept, so ``"training"`` returns
    the training sediment unchanged.
    """
    try:
        rho, c0, c1, alpha = SEDIMENTS[name]
    except KeyError:
        raise ValueError(f"unknown sediment type {name!r}; choose from {sorted(SEDIMENTS)}") from None
    top = env.sediment[0]
    layer = waveguide.SedimentLayer(top.thickness_m, rho, c0, c1, alpha)
    return replace(env, sediment=(layer,) + tuple(env.sediment[1:]))


def make_test_environment(train_env: waveguide.Environment, delta_c: float = 0.0, delta_d: float = 0.0,
                     sediment: str = "training") -> waveguide.Environment:
    env = with_sediment(train_env, sediment) if sediment != "training" else train_env
    if delta_c:
        env = waveguide.perturb_ssp(replace(env, ssp_gradient_delta=delta_c))
    return waveguide.deepen(env, delta_d)


# ---------------------------------------------------------------------------
# sweep spec and rows
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str
    values: list
    methods: list[str]
    snr_db: float = 15.0
    delta_c: float = 0.0
    delta_d: float = 0.0
    sediment_type: str = "training"
    n_noise_realizations: int = 20
    seed: int = 0
    n_test: int = 500
    source_depth_m: float = 9.0
    frequency_hz: float = 109.0
    mc_passes: int = 50
    zeta: float = 0.1
    adapt: adaptation.AdaptConfig = field(default_factory=adaptation.AdaptConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if not self.methods:
            raise ValueError("sweep needs at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.axis != "sediment_type":
            self.values = [float(v) for v in self.values]
        if self.n_noise_realizations < 1 or self.n_test < 1:
            raise ValueError("need at least one realization and one test sample")

    def cell(self, value) -> dict:
        """Fixed settings with the swept axis replaced by ``value``."""
        out = {"snr_db": self.snr_db, "delta_c": self.delta_c, "delta_d": self.delta_d,
               "sediment_type": self.sediment_type}
        out[self.axis] = value
        return out

    @classmethod
    def from_file(cls, path) -> "SweepSpec":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(path)
        s = cp["sweep"]
        split = lambda v: [t for t in v.replace(",", " ").split() if t]
        kw = {"axis": s["axis"], "values": split(s["values"]), "methods": split(s["methods"])}
        for k in ("n_noise_realizations", "seed", "n_test", "mc_passes"):
            if k in s:
                kw[k] = s.getint(k)
        for k in ("source_depth_m", "frequency_hz", "zeta"):
            if k in s:
                kw[k] = s.getfloat(k)
        if cp.has_section("fixed"):
            f = cp["fixed"]
            for k in ("snr_db", "delta_c", "delta_d"):
                if k in f:
                    kw[k] = f.getfloat(k)
            if "sediment_type" in f:
                kw["sediment_type"] = f["sediment_type"].strip()
        if cp.has_section("adapt"):
            kw["adapt"] = adaptation.AdaptConfig.from_section(cp["adapt"])
        return cls(**kw)


@dataclass
class ResultRow:
    axis: str
    value: str
    method: str
    realization: int
    mae_m: float
    pcl_percent: float
    apu_percent: float = float("nan")
    mean_mumi: float = float("nan")
    certain_count: float = float("nan")
    runtime_s: float = 0.0


CSV_FIELDS = [f.name for f in fields(ResultRow)]


def write_results(rows, path) -> None:
    """UTF-8 CSV with one header row; floats written with ``repr`` so they round-trip."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def read_results(path) -> list[ResultRow]:
    types = {f.name: f.type for f in fields(ResultRow)}
    conv = {"float": float, "int": int, "str": str}
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(ResultRow(**{k: conv[types[k]](v) for k, v in rec.items()}))
    return out


# ---------------------------------------------------------------------------
# sweep execution
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[ResultRow]
    realizations: list[ResultRow]

    def select(self, method: str, value=None, per_realization: bool = False) -> list[ResultRow]:
        src = self.realizations if per_realization else self.rows
        return [r for r in src if r.method == method and (value is None or r.value == _fmt(value))]


def _fmt(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def draw_test_ranges(n: int, seed: int, grid: ranging.RangeGrid | None = None) -> np.ndarray:
    grid = grid or ranging.RangeGrid()
    return np.random.default_rng(np.random.SeedSequence([seed, 7])).uniform(grid.d_min_m, grid.d_max_m, n)


def replicas_for(env, spec: SweepSpec, array, modes=None) -> ranging.ReplicaSet:
    r = training_ranges()
    fields_ = synthesize(env, spec.source_depth_m, r, array, spec.frequency_hz, modes=modes)[:, 0]
    return ranging.ReplicaSet.from_fields(r, fields_)


def evaluate_methods(methods, features, powers, d_true, *, classifier=None, regressor=None,
                     o_replicas=None, m_replicas=None, adapt_cfg=None, mc_passes: int = 50,
                     mc_seed: int = 0, zeta: float = 0.1, timing: bool = True) -> dict[str, dict]:
    """Metrics of every method on one noisy test batch."""
    cfg = adapt_cfg or adaptation.AdaptConfig()
    C = features[:, 0] + 1j * features[:, 1]
    out = {}
    cache = {}

    def clf_pmf():
        if "pmf" not in cache:
            cache["pmf"] = nn.softmax(nn.predict_logits(classifier, features))
            cache["rep"] = uncertainty.analyze(cache["pmf"], cfg.Q, cfg.window_w)
        return cache["pmf"], cache["rep"]

    def reg_pmf():
        if "mc" not in cache:
            cache["mc"] = ranging.mc_dropout_pmf(regressor, features, mc_passes, seed=mc_seed)
            # entropy of the histogram of one-hot passes is the MUMI
            cache["mc_rep"] = uncertainty.analyze(cache["mc"], cfg.Q, cfg.window_w,
                                                  mumi_nats=nn.entropy(cache["mc"]))
        return cache["mc"], cache["mc_rep"]

    for m in methods:
        t0 = time.perf_counter()
        extra = {}
        if m in ("O-MFP", "M-MFP"):
            reps = o_replicas if m == "O-MFP" else m_replicas
            d_hat = ranging.bartlett_mfp(C, reps)
        elif m in CLASSIFIER_METHODS:
            if classifier is None:
                raise ValueError(f"{m} needs a classifier checkpoint")
            grid = ranging.model_grid(classifier)
            pmf, rep = clf_pmf()
            extra = {"apu_percent": rep.apu_percent, "certain_count": float(rep.certain_ids.size)}
            if m == "CNN-c":
                d_hat = ranging.predict_range(pmf, grid)
            elif m == "SHOT":
                d_hat = adaptation.shot_adapt(classifier, (features, powers), cfg, grid=grid).d_hat_m
            else:
                d_hat = adaptation.jsea_from_pmfs(pmf, powers, cfg, grid, report=rep).d_hat_m
        else:
            if regressor is None:
                raise ValueError(f"{m} needs a regressor checkpoint")
            grid = ranging.model_grid(regressor)
            pmf, rep = reg_pmf()
            extra = {"apu_percent": rep.apu_percent, "certain_count": float(rep.certain_ids.size),
                     "mean_mumi": rep.mean_mumi}
            if m == "CNN-r":
                d_hat = ranging.predict_regression(regressor, features)
            else:
                d_hat = adaptation.jsea_from_pmfs(pmf, powers, cfg, grid, report=rep).d_hat_m
        out[m] = {"mae_m": mae(d_true, d_hat), "pcl_percent": pcl(d_true, d_hat, zeta),
                  "runtime_s": time.perf_counter() - t0 if timing else 0.0, **extra}
    return out


def run_sweep(spec: SweepSpec, classifier: nn.ModelParameters | None = None,
              regressor: nn.ModelParameters | None = None, train_env=None, array=None,
              timing: bool = True) -> SweepResult:
    """Evaluate every method at every axis value, averaging over noise realizations.

    Realization ``k`` of value ``v`` uses noise seed ``SeedSequence([seed, v_index, k])``
    and MC-dropout seed ``[seed, v_index, k, 1]``; the test ranges are shared
    by all cells.
    """
    train_env = train_env or waveguide.swellex_environment()
    array = array or waveguide.swellex_array()
    grid = ranging.model_grid(classifier or regressor) if (classifier or regressor) else ranging.RangeGrid()
    d_true = draw_test_ranges(spec.n_test, spec.seed, grid)
    m_replicas = None
    if "M-MFP" in spec.methods:
        m_replicas = replicas_for(train_env, spec, array)

    per_real: list[ResultRow] = []
    rows: list[ResultRow] = []
    for vi, value in enumerate(spec.values):
        cell = spec.cell(value)
        env = make_test_environment(train_env, cell["delta_c"], cell["delta_d"], cell["sediment_type"])
        modes = waveguide.solve_modes(env, spec.frequency_hz)
        clean = synthesize(env, spec.source_depth_m, d_true, array, spec.frequency_hz, modes=modes)
        o_replicas = replicas_for(env, spec, array, modes) if "O-MFP" in spec.methods else None
        acc: dict[str, list[dict]] = {m: [] for m in spec.methods}
        for k in range(spec.n_noise_realizations):
            ss = np.random.SeedSequence([spec.seed, vi, k])
            noisy = add_noise(clean, cell["snr_db"], seed=ss)
            feats, powers = scm_batch(noisy)
            res = evaluate_methods(spec.methods, feats, powers, d_true, classifier=classifier,
                                   regressor=regressor, o_replicas=o_replicas, m_replicas=m_replicas,
                                   adapt_cfg=spec.adapt, mc_passes=spec.mc_passes,
                                   mc_seed=int(ss.generate_state(1)[0]), zeta=spec.zeta,
                                   timing=timing)
            for m in spec.methods:
                acc[m].append(res[m])
                per_real.append(ResultRow(spec.axis, _fmt(value), m, k, **res[m]))
            log.info("%s=%s realization %d done", spec.axis, value, k)
        for m in spec.methods:
            keys = acc[m][0].keys()
            mean = {key: float(np.mean([a[key] for a in acc[m]])) for key in keys}
            if timing:
                mean["runtime_s"] = float(np.sum([a["runtime_s"] for a in acc[m]]))
            rows.append(ResultRow(spec.axis, _fmt(value), m, -1, **mean))
    return SweepResult(rows, per_real)


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityRow:
    item: str
    compute: int
    memory: int


def conv_ops(h_in: int, h_out: int, k: int, L: int) -> int:
    """Multiplications plus additions of a same-padded convolution."""
    return 2 * h_in * h_out * k * k * L * L


def complexity_report(L: int = 21, n_phi: int = 256, M: int = 82, n_tr: int = 821,
                      n_test: int = 500, n_itr: int = 100, W: int = 1, n_peaks: int = 2,
                      n_certain: int | None = None, channels=(2, 6, 38, 40),
                      kernels=(3, 5, 5)) -> list[ComplexityRow]:
    """Closed-form operation and memory counts, evaluated at the given sizes.

    Per-layer rows first (conv1..conv3, fc, head), then the method totals:
    MFP, CNN forward, JSEA refinement and trunk adaptation.
    """
    for v in (L, n_phi, M, n_tr, n_test, W, n_peaks):
        if v < 1:
            raise ValueError("sizes must be positive")
    if n_itr < 0:
        raise ValueError("iteration count must be non-negative")
    n_certain = n_test if n_certain is None else n_certain
    L2 = L * L
    rows = []
    for i, k in enumerate(kernels):
        h_in, h_out = channels[i], channels[i + 1]
        act = (h_in + h_out) * L2 if i == 0 else h_out * L2
        rows.append(ComplexityRow(f"conv{i + 1}", conv_ops(h_in, h_out, k, L), act + h_in * h_out * k * k))
    c_last = channels[-1]
    rows.append(ComplexityRow("fc", 2 * c_last * L2 * n_phi, c_last * L2 * n_phi))
    rows.append(ComplexityRow("head", 2 * n_phi * M, M * n_phi))
    fwd_compute = sum(r.compute for r in rows)
    fwd_memory = sum(r.memory for r in rows)
    rows.append(ComplexityRow("MFP", n_tr * (8 * L2 + 8 * L), 2 * n_tr * L))
    rows.append(ComplexityRow("CNN forward", fwd_compute, fwd_memory))
    rows.append(ComplexityRow("JSEA refinement", M + M * W + n_peaks * n_certain, n_test * (L + 1)))
    rows.append(ComplexityRow("adaptation", 2 * n_itr * fwd_compute, n_test * L + fwd_memory))
    return rows


def layer_polynomials(n_phi_symbol: str = "Nphi", m_symbol: str = "M", channels=(2, 6, 38, 40),
                      kernels=(3, 5, 5)) -> dict[str, str]:
    """Per-layer operation counts as printable polynomials in ``L``, ``Nphi``, ``M``."""
    out = {}
    for i, k in enumerate(kernels):
        out[f"conv{i + 1}"] = f"{2 * channels[i] * channels[i + 1] * k * k}*L^2"
    out["fc"] = f"{2 * channels[-1]}*{n_phi_symbol}*L^2"
    out["head"] = f"2*{n_phi_symbol}*{m_symbol}"
    return out
