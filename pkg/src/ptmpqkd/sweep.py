"""
Parameter sweeps, built-in figure datasets and Monte Carlo validation runs.

Configs are TOML files whose keys carry their unit in the name. Unknown
keys are rejected with their full path so that a typo never silently falls
back to a default.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ContractViolation, DomainError
from .gaussian import bob
from .keyrate import ProtocolParams, template_key_rate
from .network import DetectorModel, NoiseBudget, PONTemplate

log = logging.getLogger(__name__)

MODES = ("analytic", "worst-case", "mc-validate")
FORMATS = ("csv", "json")
ROW_FIELDS = ("distance_km", "N", "ratio", "I_AB", "chi_BE", "I_BB_max",
              "K_bit_per_pulse", "K_bps", "aggregate_bps", "binding_adversary")
DEFAULT_RATIOS = tuple(round(0.1 * k, 10) for k in range(11))


class ConfigError(ContractViolation):
    pass


@dataclass
class ProtocolSection:
    v_m_snu: float = 4.0
    beta: float = 0.956
    p_f: float = 0.0
    rep_rate_hz: float = 5e9


@dataclass
class NoiseSection:
    eps_tot_snu: float = 0.0383
    eps_a_snu: float = 0.004


@dataclass
class DetectorSection:
    ideal: bool = False
    efficiency: float = 0.6
    electronic_noise_snu: float = 0.15


@dataclass
class NetworkSection:
    n_bobs: list = field(default_factory=lambda: [8])
    atten_db_per_km: float = 0.2
    feeder_fraction: float = 1.0
    extra_loss_db: float = 0.0
    extra_loss_location: str = "drop"


@dataclass
class GridSection:
    distance_start_km: float = 0.0
    distance_stop_km: float = 220.0
    distance_step_km: float = 1.0
    distances_km: Optional[list] = None
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))


@dataclass
class OutputSection:
    path: str = ""
    format: str = "csv"


@dataclass
class MonteCarloSection:
    pulses: int = 10**7
    seed: int = 1
    disclosed_fraction: float = 0.5
    distance_km: float = 10.0
    n_bobs: int = 8


@dataclass
class SweepConfig:
    mode: str = "analytic"
    reduce: bool = True
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    grid: GridSection = field(default_factory=GridSection)
    output: OutputSection = field(default_factory=OutputSection)
    mc: MonteCarloSection = field(default_factory=MonteCarloSection)

    def validate(self) -> "SweepConfig":
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")

        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.output.format not in FORMATS:
            bad("output.format", f"must be one of {FORMATS}, got {self.output.format!r}")
        if not self.network.n_bobs:
            bad("network.n_bobs", "must not be empty")
        if any(int(n) != n or n < 2 for n in self.network.n_bobs):
            bad("network.n_bobs", "every entry must be an integer >= 2")
        if not self.distances():
            bad("grid", "distance grid is empty")
        if any(d < 0 for d in self.distances()):
            bad("grid", "distances must be >= 0 km")
        if self.grid.distance_step_km <= 0:
            bad("grid.distance_step_km", "must be positive")
        if not self.grid.ratios:
            bad("grid.ratios", "must not be empty")
        if any(not 0.0 <= r <= 1.0 for r in self.grid.ratios):
            bad("grid.ratios", "entries must lie in [0, 1]")
        if not 0 < self.mc.disclosed_fraction < 1:
            bad("mc.disclosed_fraction", "must lie in (0, 1)")
        if self.mc.pulses < 1:
            bad("mc.pulses", "must be >= 1")
        if not 0 <= self.mc.seed < 2**64:
            bad("mc.seed", "must be an unsigned 64-bit integer")
        # the domain types do the remaining range checks
        for path, build in (("protocol", self.protocol_params), ("noise", self.budget),
                            ("detector", self.detector_model), ("network", lambda: self.template(2))):
            try:
                build()
            except (DomainError, ContractViolation) as exc:
                bad(path, str(exc))
        return self

    def distances(self) -> list[float]:
        g = self.grid
        if g.distances_km is not None:
            return [float(d) for d in g.distances_km]
        count = int(math.floor((g.distance_stop_km - g.distance_start_km) / g.distance_step_km + 1e-9)) + 1
        return [round(g.distance_start_km + k * g.distance_step_km, 9) for k in range(max(count, 0))]

    def protocol_params(self) -> ProtocolParams:
        p = self.protocol
        return ProtocolParams(p.v_m_snu, p.beta, p.p_f, p.rep_rate_hz)

    def budget(self) -> NoiseBudget:
        return NoiseBudget(self.noise.eps_tot_snu, self.noise.eps_a_snu)

    def detector_model(self) -> Optional[DetectorModel]:
        d = self.detector
        return None if d.ideal else DetectorModel(d.efficiency, d.electronic_noise_snu)

    def template(self, n_bobs: int) -> PONTemplate:
        net = self.network
        return PONTemplate(int(n_bobs), self.budget(), self.detector_model(), net.atten_db_per_km,
                           net.feeder_fraction, net.extra_loss_db, net.extra_loss_location)

    def to_dict(self) -> dict:
        return asdict(self)


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        default = getattr(cls(), key)
        if hasattr(default, "__dataclass_fields__"):
            kwargs[key] = _build_section(type(default), value, where)
        else:
            kwargs[key] = _coerce(value, default, where)
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list) or default is None:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> SweepConfig:
    return _build_section(SweepConfig, data, "").validate()


def load_config(path) -> SweepConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


# -- evaluation -------------------------------------------------------------

def _row(distance, n, ratio, b) -> dict:
    return {"distance_km": float(distance), "N": int(n), "ratio": float(ratio),
            "I_AB": b.I_AB, "chi_BE": b.chi_BE, "I_BB_max": b.I_BB_max,
            "K_bit_per_pulse": b.K_bit_per_pulse, "K_bps": b.K_bps,
            "aggregate_bps": b.aggregate_bps, "binding_adversary": b.binding_adversary}


def _failed_row(distance, n, ratio, exc) -> dict:
    nan = float("nan")
    row = {k: nan for k in ROW_FIELDS}
    row.update(distance_km=float(distance), N=int(n), ratio=float(ratio), binding_adversary="error",
               error=f"{type(exc).__name__}: {exc}")
    return row


def _point(template, params, distance, ratio, reduce) -> dict:
    try:
        b = template_key_rate(template.with_ratio(ratio), distance, params, reduce=reduce)
        return _row(distance, template.n_bobs, ratio, b)
    except (ArithmeticError, ValueError) as exc:
        return _failed_row(distance, template.n_bobs, ratio, exc)


def _task(args) -> tuple[list[dict], list[dict]]:
    """One (N, distance) grid point: (ratio family, selected rows)."""
    template, params, distance, ratios, reduce, worst = args
    family = [_point(template, params, distance, r, reduce) for r in ratios]
    if not worst:
        return family, family
    ok = [r for r in family if "error" not in r]
    if not ok:
        return family, [family[0]]
    # ties go to the first ratio on the grid
    k = int(np.argmin([r["K_bit_per_pulse"] for r in ok]))
    return family, [ok[k]]


def _run_tasks(tasks, threads: int) -> list[tuple]:
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    return [_task(t) for t in tasks]


def max_secure_distance(rows: list[dict]) -> Optional[float]:
    """Last grid distance with K > 0, or None if no point is secure."""
    secure = [r["distance_km"] for r in rows if r["K_bit_per_pulse"] > 0]
    return max(secure) if secure else None


@dataclass
class SweepResult:
    rows: list
    summary: dict
    meta: dict
    family: list = field(default_factory=list, repr=False)

    def family_result(self) -> "SweepResult":
        """The full ratio family behind a worst-case sweep as its own dataset."""
        meta = dict(self.meta, mode="ratio-family")
        summary = {"max_secure_distance_km": {}, "failures": self.summary["failures"]}
        for n in sorted({r["N"] for r in self.family}):
            for ratio in sorted({r["ratio"] for r in self.family}):
                sub = [r for r in self.family if r["N"] == n and r["ratio"] == ratio]
                summary["max_secure_distance_km"][f"{n}@{ratio:g}"] = max_secure_distance(sub)
        return SweepResult(self.family, summary, meta)


def run_sweep(config: SweepConfig, threads: int = 1, *, ratios=None, worst: Optional[bool] = None) -> SweepResult:
    """Evaluate the key rate at every (N, distance) grid point, sorted by (N, distance, ratio).

    In analytic mode the noise split comes from noise.eps_a_snu; in
    worst-case mode each point keeps the minimum over grid.ratios.
    ``ratios`` overrides that choice (the ratio family of a figure).
    """
    config.validate()
    if config.mode == "mc-validate":
        raise ConfigError("mode: use mc_validate_command for mc-validate configs")
    t0 = time.perf_counter()
    params = config.protocol_params()
    worst = config.mode == "worst-case" if worst is None else worst
    if ratios is None:
        if worst:
            ratios = list(config.grid.ratios)
        else:
            eps_tot = config.noise.eps_tot_snu
            ratios = [config.noise.eps_a_snu / eps_tot if eps_tot > 0 else 0.0]
    tasks = [(config.template(n), params, d, tuple(ratios), config.reduce, worst)
             for n in config.network.n_bobs for d in config.distances()]
    done = _run_tasks(tasks, threads)
    rows = [r for _, chunk in done for r in chunk]
    family = [r for fam, _ in done for r in fam]
    rows.sort(key=lambda r: (r["N"], r["ratio"] if not worst else 0.0, r["distance_km"]))
    family.sort(key=lambda r: (r["N"], r["ratio"], r["distance_km"]))
    summary = {"max_secure_distance_km": {}, "failures": []}
    for n in config.network.n_bobs:
        sub = [r for r in rows if r["N"] == n]
        summary["max_secure_distance_km"][str(n)] = max_secure_distance(sub)
    summary["failures"] = [{k: r[k] for k in ("distance_km", "N", "ratio", "error")}
                           for r in rows if "error" in r]
    for f in summary["failures"]:
        log.warning("point failed: %s", f)
    meta = {"version": __version__, "config": config.to_dict(), "mode": "worst-case" if worst else "analytic",
            "ratios": list(ratios), "threads": threads, "elapsed_s": time.perf_counter() - t0}
    return SweepResult(rows, summary, meta, family)


# -- output -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".12g")


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in ROW_FIELDS])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_result(result: SweepResult, path, fmt: str = "csv") -> Path:
    """CSV (plus a .meta.json sidecar) or one JSON document with rows and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path.write_text(rows_to_csv(result.rows))
        side = path.with_name(path.stem + ".meta.json")
        side.write_text(json.dumps(_json_safe({"summary": result.summary, "meta": result.meta}), indent=2))
    elif fmt == "json":
        doc = {"rows": [{k: r[k] for k in ROW_FIELDS} | ({"error": r["error"]} if "error" in r else {})
                        for r in result.rows],
               "summary": result.summary, "meta": result.meta}
        path.write_text(json.dumps(_json_safe(doc), indent=2))
    else:
        raise ConfigError(f"output.format: unknown format {fmt!r}")
    return path


# -- figures ----------------------------------------------------------------

FIGURES = ("fig3a", "fig3b", "fig3c", "fig4")

# (N, distance_km, expected kbps per user)
FIG4_TARGETS = ((128, 25.0, 54.0), (32, 25.0, 518.0), (8, 25.0, 3294.0), (128, 18.0, 145.0))
FIG4_TOLERANCE = 0.20


def figure_config(name: str) -> SweepConfig:
    """Built-in parameters of each figure."""
    if name not in FIGURES:
        raise ConfigError(f"unknown figure {name!r}; choose from {FIGURES}")
    cfg = SweepConfig()
    if name == "fig3a":
        cfg.network.n_bobs = [8]
    elif name == "fig3b":
        cfg.mode = "worst-case"
        cfg.network.n_bobs = [8]
    elif name == "fig3c":
        cfg.network.n_bobs = [8, 32, 128]
    else:
        cfg.mode = "worst-case"
        cfg.protocol = ProtocolSection(v_m_snu=2.52, beta=0.90, p_f=0.0, rep_rate_hz=5e9)
        cfg.network.n_bobs = [8, 32, 128]
        cfg.network.extra_loss_db = 4.71
        cfg.grid.distance_stop_km = 60.0
    return cfg.validate()


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    threshold: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value} ({self.threshold})"


def _at(rows, n, d):
    for r in rows:
        if r["N"] == n and abs(r["distance_km"] - d) < 1e-9:
            return r
    raise ContractViolation(f"grid has no point N={n}, {d} km")


def _distances_with(cfg: SweepConfig, extra) -> SweepConfig:
    ds = sorted(set(cfg.distances()) | set(extra))
    return replace(cfg, grid=replace(cfg.grid, distances_km=ds))


def figure_command(name: str, out_dir=None, threads: int = 1, fmt: str = "csv",
                   config: Optional[SweepConfig] = None) -> dict:
    """Produce the datasets of one figure and evaluate its acceptance checks.

    Returns {"datasets": {label: SweepResult}, "checks": [Check], "passed": bool}.
    """
    cfg = config or figure_config(name)
    datasets: dict[str, SweepResult] = {}
    checks: list[Check] = []

    if name == "fig3a":
        res = run_sweep(_distances_with(cfg, [10.0, 100.0]), threads)
        datasets["fig3a"] = res
        k10, k100 = _at(res.rows, 8, 10.0)["K_bit_per_pulse"], _at(res.rows, 8, 100.0)["K_bit_per_pulse"]
        checks.append(Check("N=8 K at 10 km", k10 >= 1e-3, k10, ">= 1e-3 bit/pulse"))
        checks.append(Check("N=8 K at 100 km", k100 >= 1e-6, k100, ">= 1e-6 bit/pulse"))
        secure = [r for r in res.rows if r["K_bit_per_pulse"] > 0]
        ordered = all(r["chi_BE"] > r["I_BB_max"] for r in secure)
        checks.append(Check("chi_BE > I_BB_max wherever K > 0", ordered and bool(secure), len(secure),
                            "secure grid points checked"))
    elif name == "fig3b":
        worst = run_sweep(cfg, threads, worst=True)
        datasets["fig3b_family"] = worst.family_result()
        datasets["fig3b_worst"] = worst
        d = worst.summary["max_secure_distance_km"]["8"]
        checks.append(Check("N=8 worst-case max secure distance", d is not None and d > 180.0, d, "> 180 km"))
    elif name == "fig3c":
        res = run_sweep(cfg, threads)
        datasets["fig3c"] = res
        d = res.summary["max_secure_distance_km"].get("128")
        checks.append(Check("N=128 max secure distance", d is not None and d > 120.0, d, "> 120 km"))
        checks.append(Check("N=128 supports more than 125 km", d is not None and d > 125.0, d, "> 125 km"))
    else:
        cfg = _distances_with(cfg, [d for _, d, _ in FIG4_TARGETS])
        for loc in ("drop", "feeder"):
            placed = replace(cfg, network=replace(cfg.network, extra_loss_location=loc))
            res = run_sweep(placed, threads)
            datasets[f"fig4_{loc}"] = res
            datasets[f"fig4_{loc}_family"] = res.family_result()
            for n, dist, target in FIG4_TARGETS:
                kbps = _at(res.rows, n, dist)["K_bps"] / 1e3
                ok = abs(kbps - target) <= FIG4_TOLERANCE * target
                checks.append(Check(f"{loc} extra loss, N={n} at {dist:g} km", ok, round(kbps, 3),
                                    f"{target:g} kbps +/- {FIG4_TOLERANCE:.0%}"))

    passed = all(c.passed for c in checks)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, res in datasets.items():
            write_result(res, out / f"{label}.{fmt}", fmt)
        summary = {"figure": name, "passed": passed,
                   "checks": [asdict(c) for c in checks],
                   "max_secure_distance_km": {k: v.summary["max_secure_distance_km"] for k, v in datasets.items()}}
        (out / f"{name}_summary.json").write_text(json.dumps(_json_safe(summary), indent=2))
    return {"datasets": datasets, "checks": checks, "passed": passed}


# -- Monte Carlo ------------------------------------------------------------

def mc_validate_command(config: SweepConfig, seed: Optional[int] = None, threads: int = 1):
    """Simulate the configured network, estimate its matrix and compare rates."""
    from .montecarlo import validate

    config.validate()
    mc = config.mc
    template = config.template(mc.n_bobs).with_ratio(
        config.noise.eps_a_snu / config.noise.eps_tot_snu if config.noise.eps_tot_snu > 0 else 0.0)
    topo = template.topology(mc.distance_km)
    seed = mc.seed if seed is None else seed
    report = validate(topo, config.protocol_params(), mc.pulses, seed,
                      fraction=mc.disclosed_fraction, threads=threads, reduce=config.reduce)
    if report.insufficient_precision:
        log.warning("M = %d pulses is below %d; treat the comparison as indicative only",
                    mc.pulses, 10**6)
    return report


def write_mc_report(report, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe({"version": __version__, **report.to_dict()}), indent=2))
    return path


def keyrate_point(config: SweepConfig, distance_km: float, n_bobs: int, ratio: Optional[float] = None):
    """Single-point breakdown; ``ratio`` defaults to eps_a / eps_tot."""
    eps_tot = config.noise.eps_tot_snu
    if ratio is None:
        ratio = config.noise.eps_a_snu / eps_tot if eps_tot > 0 else 0.0
    tpl = config.template(n_bobs).with_ratio(ratio)
    return template_key_rate(tpl, distance_km, config.protocol_params(), reduce=config.reduce)


def reduction_trace(config: SweepConfig, distance_km: float, n_bobs: int) -> dict:
    from .network import build_network_cov
    from .reduction import reduce_to_three_modes

    eps_tot = config.noise.eps_tot_snu
    ratio = config.noise.eps_a_snu / eps_tot if eps_tot > 0 else 0.0
    topo = config.template(n_bobs).with_ratio(ratio).topology(distance_km)
    gamma = build_network_cov(topo, config.protocol.v_m_snu)
    res = reduce_to_three_modes(gamma, bob(n_bobs))
    return {"distance_km": distance_km, "N": n_bobs, "steps": res.trace(),
            "gamma3": res.gamma3.to_dict()}
