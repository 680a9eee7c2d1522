"""Experiment harness: scenario configuration, ground truth, measurements and Monte Carlo evaluation.

The truth runs on a refined mesh at a fine time step with the scheduled
boundary conditions.  The filters only see the measurement streams and an
adiabatic model of the coarse mesh.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import filter_central, filter_distributed
from .decomposition import (Decomposition, build_augmented, decompose, extract_local_blocks,
                            rectangle_seed_partition)
from .mesh import (Mesh, OutOfDomainError, apply_essential_bc, assemble_load, assemble_system,
                   generate_l_shaped_mesh, generate_rectangle_mesh, interpolation_matrix, locate_points,
                   refine_uniform)
from .model import build_measurement, compose_L_steps, discretize_central, local_models
from . import stability
from .stability import local_observability

__all__ = [
    "ConfigError",
    "BoundaryRule",
    "Scenario",
    "Setup",
    "RunResult",
    "Experiment",
    "load_scenario",
    "parse_scenario",
    "preset_path",
    "config_hash",
    "build_setup",
    "coarse_mesh",
    "evaluation_points",
    "simulate_truth",
    "sample_measurements",
    "compute_rmse",
    "run_experiment",
    "gamma_sweep",
    "schwarz_convergence",
    "single_node_equivalence",
    "stability_report",
    "jump_ratio",
    "smoothed_is_decreasing",
    "write_outputs",
]

KINDS = ("dirichlet", "neumann_zero", "robin")


class ConfigError(ValueError):
    """Invalid scenario configuration; ``line`` points into the source file when known."""

    def __init__(self, msg: str, source: str = "<config>", line: int | None = None):
        self.source, self.line, self.msg = source, line, msg
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {msg}")


@dataclass(frozen=True)
class BoundaryRule:
    """Boundary condition on ``label`` for samples ``start <= q < stop`` (stop None = open)."""

    label: str
    start: int
    stop: int | None
    kind: str
    value: float = 0.0
    nu: float = 0.0
    x_ext: float = 0.0

    def active(self, q: int) -> bool:
        return self.start <= q and (self.stop is None or q < self.stop)


@dataclass(frozen=True)
class Scenario:
    name: str
    shape: str = "l_shape"
    size: float = 2.0
    width: float = 1.0
    height: float = 1.0
    edge: float = 0.2
    refine: int = 1
    diffusivity: float = 1.11e-4
    sample_period: float = 100.0
    central_step: float = 10.0
    truth_step: float = 1.0
    L: tuple[int, ...] = (1, 2, 10)
    L_override: tuple[tuple[int, int], ...] = ()
    gamma: float = 1.1
    sigma_v: float = 0.1
    sigma_w: float = 3.0
    x0: float = 300.0
    prior: float = 305.0
    p0: float = 20.0
    sensors: tuple[tuple[float, float], ...] = ()
    blocks: tuple[tuple[float, float, float, float], ...] = ()
    overlap_layers: int = 1
    rules: tuple[BoundaryRule, ...] = ()
    default_kind: str | None = None
    duration: int = 300
    runs: int = 50
    seed: int = 0
    eval_spacing: float = 0.1
    snapshots: tuple[int, ...] = ()
    steady_fraction: float = 1.0 / 3.0
    chunk: int = 50
    gamma_sweep: tuple[float, ...] = ()
    include_central: bool = True
    digest: str = ""
    source: str = "<config>"

    def labels_at(self, q: int, labels: Sequence[str]) -> dict[str, BoundaryRule]:
        """Active rule per boundary label at sample ``q``; raises on gaps or clashes."""
        out = {}
        for lab in labels:
            hits = [r for r in self.rules if r.label == lab and r.active(q)]
            if len(hits) > 1:
                raise ConfigError(f"boundary {lab!r} has {len(hits)} rules at sample {q}")
            if hits:
                out[lab] = hits[0]
            elif self.default_kind is not None:
                out[lab] = BoundaryRule(lab, 0, None, self.default_kind)
            else:
                raise ConfigError(f"boundary {lab!r} has no condition at sample {q}")
        return out


# --------------------------------------------------------------------------- #
# configuration

def preset_path(name: str) -> Path:
    """Path of a shipped preset (``scenario1``/``scenario2``) or the name itself."""
    p = Path(name)
    if p.suffix == ".ini" or p.exists():
        return p
    ref = resources.files("dfekf") / "presets" / f"{name}.ini"
    return Path(str(ref))


def _locate(lines: list[str], section: str | None, key: str | None) -> int | None:
    cur = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
            if key is None and cur == section:
                return i
            continue
        if cur == section and key is not None and "=" in s:
            if s.split("=", 1)[0].strip().lower() == key.lower():
                return i
    return None


def config_hash(text: str) -> str:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    canon = []
    for sec in sorted(cp.sections()):
        for k in sorted(cp[sec]):
            canon.append(f"{sec}.{k}={' '.join(cp[sec][k].split())}")
    return hashlib.sha256("\n".join(canon).encode()).hexdigest()[:16]


def parse_scenario(text: str, source: str = "<config>") -> Scenario:
    lines = text.splitlines()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(getattr(exc, "message", str(exc)).splitlines()[0], source,
                          getattr(exc, "lineno", None)) from exc

    def err(section, key, msg):
        return ConfigError(msg, source, _locate(lines, section, key))

    def get(section, key, conv, default=None, required=False):
        if not cp.has_option(section, key):
            if required:
                raise ConfigError(f"missing [{section}] {key}", source, _locate(lines, section, None))
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise err(section, key, f"bad value for {key}: {raw!r} ({exc})") from exc

    def floats(raw):
        return tuple(float(v) for v in raw.replace(",", " ").split())

    def ints(raw):
        return tuple(int(v) for v in raw.replace(",", " ").split())

    def positive(section, key, val):
        if not (math.isfinite(val) and val > 0):
            raise err(section, key, f"{key} must be positive and finite")
        return val

    kw = {}
    kw["name"] = get("scenario", "name", str, "scenario")
    kw["duration"] = get("scenario", "duration", int, 300)
    kw["runs"] = get("scenario", "runs", int, 50)
    kw["seed"] = get("scenario", "seed", int, 0)
    kw["snapshots"] = get("scenario", "snapshots", ints, ())
    kw["steady_fraction"] = get("scenario", "steady_fraction", float, 1.0 / 3.0)
    kw["chunk"] = get("scenario", "chunk", int, 50)
    kw["gamma_sweep"] = get("scenario", "gamma_sweep", floats, ())
    kw["eval_spacing"] = get("scenario", "eval_spacing", float, 0.1)
    for key in ("duration", "runs", "chunk"):
        if kw[key] < 1:
            raise err("scenario", key, f"{key} must be >= 1")

    kw["shape"] = get("domain", "shape", str, "l_shape")
    if kw["shape"] not in ("l_shape", "rectangle"):
        raise err("domain", "shape", f"unknown shape {kw['shape']!r}")
    kw["size"] = positive("domain", "size", get("domain", "size", float, 2.0))
    kw["width"] = positive("domain", "width", get("domain", "width", float, 1.0))
    kw["height"] = positive("domain", "height", get("domain", "height", float, 1.0))
    kw["edge"] = positive("domain", "edge", get("domain", "edge", float, 0.2))
    kw["refine"] = get("domain", "refine", int, 1)
    kw["diffusivity"] = positive("physics", "diffusivity", get("physics", "diffusivity", float, 1.11e-4))

    kw["sample_period"] = positive("filter", "sample_period", get("filter", "sample_period", float, 100.0))
    kw["central_step"] = positive("filter", "central_step", get("filter", "central_step", float, 10.0))
    kw["truth_step"] = positive("filter", "truth_step", get("filter", "truth_step", float, 1.0))
    for key in ("central_step", "truth_step"):
        r = kw["sample_period"] / kw[key]
        if abs(r - round(r)) > 1e-9 * r:
            raise err("filter", key, f"{key} must divide the sampling period")
    kw["L"] = get("filter", "L", ints, (1, 2, 10))
    if not kw["L"] or min(kw["L"]) < 1:
        raise err("filter", "L", "L values must be >= 1")
    ov = []
    raw_ov = get("filter", "L_override", str, "")
    for tok in raw_ov.replace(",", " ").split():
        try:
            span, val = tok.split(":")
            a, b = (span.split("-") + [span])[:2]
            ov.extend((q, int(val)) for q in range(int(a), int(b) + 1))
        except ValueError as exc:
            raise err("filter", "L_override", f"bad override {tok!r}; expected start-stop:L") from exc
    kw["L_override"] = tuple(ov)
    kw["gamma"] = get("filter", "gamma", float, 1.1)
    if not kw["gamma"] >= 1.0:
        raise err("filter", "gamma", "gamma must be >= 1")
    kw["sigma_v"] = get("filter", "sigma_v", float, 0.1)
    kw["sigma_w"] = positive("filter", "sigma_w", get("filter", "sigma_w", float, 3.0))
    if kw["sigma_v"] < 0:
        raise err("filter", "sigma_v", "sigma_v must be >= 0")
    kw["x0"] = get("filter", "x0", float, 300.0)
    kw["prior"] = get("filter", "prior", float, 305.0)
    kw["p0"] = positive("filter", "p0", get("filter", "p0", float, 20.0))
    kw["overlap_layers"] = get("filter", "overlap_layers", int, 1)
    kw["include_central"] = get("filter", "central", lambda r: r.strip().lower() in ("1", "yes", "true", "on"), True)

    sensors = []
    if cp.has_section("sensors"):
        for key in cp["sensors"]:
            v = get("sensors", key, floats)
            if len(v) != 2:
                raise err("sensors", key, "sensor position needs two coordinates")
            sensors.append(v)
    if not sensors:
        raise ConfigError("no sensors configured", source, _locate(lines, "sensors", None))
    kw["sensors"] = tuple(sensors)

    blocks = []
    if cp.has_section("subdomains"):
        for key in cp["subdomains"]:
            v = get("subdomains", key, floats)
            if len(v) != 4 or v[0] >= v[1] or v[2] >= v[3]:
                raise err("subdomains", key, "block needs xmin, xmax, ymin, ymax with min < max")
            blocks.append(v)
    if not blocks:
        raise ConfigError("no subdomain blocks configured", source, _locate(lines, "subdomains", None))
    kw["blocks"] = tuple(blocks)

    rules = []
    default = None
    if cp.has_section("boundary"):
        for key in cp["boundary"]:
            raw = cp["boundary"][key]
            if key == "default":
                default = raw.strip()
                if default not in KINDS or default == "dirichlet":
                    raise err("boundary", key, f"default must be neumann_zero or robin, got {default!r}")
                if default == "robin":
                    raise err("boundary", key, "a robin default needs parameters; list the rule explicitly")
                continue
            tok = raw.split()
            try:
                label, a, b, kind = tok[0], int(tok[1]), tok[2], tok[3]
                stop = None if b in ("end", "-") else int(b)
                args = [float(t) for t in tok[4:]]
            except (IndexError, ValueError) as exc:
                raise err("boundary", key, "expected: <label> <from> <to|end> <kind> [params]") from exc
            if kind not in KINDS:
                raise err("boundary", key, f"unknown kind {kind!r}")
            need = {"dirichlet": 1, "neumann_zero": 0, "robin": 2}[kind]
            if len(args) != need:
                raise err("boundary", key, f"{kind} takes {need} parameter(s)")
            if not all(math.isfinite(x) for x in args):
                raise err("boundary", key, "parameters must be finite")
            if stop is not None and stop <= a:
                raise err("boundary", key, "empty sample range")
            if kind == "dirichlet":
                rules.append(BoundaryRule(label, a, stop, kind, value=args[0]))
            elif kind == "robin":
                if args[0] < 0:
                    raise err("boundary", key, "Robin coefficient must be non-negative")
                rules.append(BoundaryRule(label, a, stop, kind, nu=args[0], x_ext=args[1]))
            else:
                rules.append(BoundaryRule(label, a, stop, kind))
    kw["rules"] = tuple(rules)
    kw["default_kind"] = default
    kw["digest"] = config_hash(text)
    kw["source"] = source
    sc = Scenario(**kw)
    _check_schedule(sc, lines, source)
    _check_sensors(sc, lines, source, list(cp["sensors"]))
    return sc


def _check_sensors(sc: Scenario, lines: list[str], source: str, keys: list[str]) -> None:
    mesh = coarse_mesh(sc)
    for key, pos in zip(keys, sc.sensors):
        try:
            locate_points(mesh, np.array([pos]))
        except OutOfDomainError:
            raise ConfigError(f"sensor {key} at {pos} lies outside the domain", source,
                              _locate(lines, "sensors", key)) from None


def _check_schedule(sc: Scenario, lines: list[str], source: str) -> None:
    mesh = coarse_mesh(sc)
    labels = mesh.labels
    for r in sc.rules:
        if r.label not in labels:
            raise ConfigError(f"unknown boundary label {r.label!r} (known: {', '.join(labels)})",
                              source, _locate(lines, "boundary", None))
    # only rule endpoints can change the active set
    marks = sorted({0} | {r.start for r in sc.rules} | {r.stop for r in sc.rules if r.stop is not None})
    for q in marks:
        if q <= sc.duration:
            try:
                sc.labels_at(q, labels)
            except ConfigError as exc:
                raise ConfigError(exc.msg, source, _locate(lines, "boundary", None)) from None


def load_scenario(path) -> Scenario:
    p = preset_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_scenario(text, str(p))


# --------------------------------------------------------------------------- #
# setup

def coarse_mesh(sc: Scenario) -> Mesh:
    if sc.shape == "l_shape":
        return generate_l_shaped_mesh(sc.edge, sc.size)
    return generate_rectangle_mesh(sc.width, sc.height, sc.edge)


def evaluation_points(sc: Scenario, mesh: Mesh) -> np.ndarray:
    """Cell-centred lattice of spacing ``eval_spacing`` clipped to the domain."""
    h = sc.eval_spacing
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    xs = np.arange(lo[0] + h / 2, hi[0], h)
    ys = np.arange(lo[1] + h / 2, hi[1], h)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if sc.shape == "l_shape":
        half = sc.size / 2
        pts = pts[~((pts[:, 0] > half) & (pts[:, 1] > half))]
    return pts


@dataclass(eq=False)
class Setup:
    """Everything derived from a scenario that is shared by all runs."""

    scenario: Scenario
    mesh: Mesh
    fine: Mesh
    dec: Decomposition
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    C: np.ndarray
    per_node: list
    C_fine: sp.csr_matrix
    E_coarse: sp.csr_matrix
    E_fine: sp.csr_matrix
    eval_points: np.ndarray

    def central_model(self):
        sc = self.scenario
        n = self.mesh.n_vertices
        return discretize_central((self.mass, self.stiffness), sc.central_step).with_noise(
            self.C, sc.sigma_w ** 2 * np.eye(n), sc.sigma_v ** 2 * np.eye(len(sc.sensors)))

    def local_models(self, L: int):
        sc = self.scenario
        mods = local_models(self.mass, self.stiffness, self.dec, sc.sample_period / L)
        out = []
        for m, mod in enumerate(mods):
            Cm, ids = self.per_node[m]
            out.append(replace(mod, C=Cm, Q=sc.sigma_w ** 2 * np.eye(mod.n),
                               R=sc.sigma_v ** 2 * np.eye(len(ids)), sensors=ids))
        return out


def build_setup(sc: Scenario, check_observability: bool = True) -> Setup:
    mesh = coarse_mesh(sc)
    fine = mesh
    for _ in range(sc.refine):
        fine = refine_uniform(fine)
    fem = assemble_system(mesh, sc.diffusivity)
    dec = decompose(mesh, rectangle_seed_partition(mesh, sc.blocks), sc.overlap_layers)
    sensors = np.array(sc.sensors)
    try:
        C, per_node = build_measurement(mesh, sensors, dec)
        C_fine = interpolation_matrix(fine, sensors)
    except ValueError as exc:
        raise ConfigError(f"sensor layout: {exc}", sc.source) from exc
    pts = evaluation_points(sc, mesh)
    setup = Setup(sc, mesh, fine, dec, fem.mass, fem.stiffness, C, per_node, C_fine,
                  interpolation_matrix(mesh, pts), interpolation_matrix(fine, pts), pts)
    if check_observability:
        check_local_observability(setup)
    return setup


def check_local_observability(setup: Setup, delta: float | None = None) -> list[float]:
    """Verify each ``(A^m, C^m)`` pair is observable; raises ConfigError otherwise."""
    sc = setup.scenario
    delta = sc.sample_period if delta is None else delta
    margins = []
    for m in range(setup.dec.node_count):
        blk = extract_local_blocks(setup.mass, setup.stiffness, setup.dec, m)
        M = blk.mass.toarray()
        K = M + delta * blk.stiffness.toarray()
        Cm = setup.per_node[m][0]
        ok, smin = local_observability(None, Cm, M, K)
        if not ok:
            raise ConfigError(f"node {m} is not locally observable with its sensors (margin {smin:.2e})",
                              sc.source)
        margins.append(smin)
    return margins


# --------------------------------------------------------------------------- #
# truth

@dataclass(eq=False)
class _TruthStep:
    lu: spla.SuperLU
    free: np.ndarray
    fixed: np.ndarray
    values: np.ndarray
    M_ii: sp.csr_matrix
    M_ib: sp.csr_matrix
    const: np.ndarray


def _truth_operator(sc: Scenario, fine: Mesh, active: dict[str, BoundaryRule], dt: float) -> _TruthStep:
    robin = [(lab, r.nu, r.x_ext) for lab, r in sorted(active.items()) if r.kind == "robin"]
    dirichlet = [(lab, r.value) for lab, r in sorted(active.items()) if r.kind == "dirichlet"]
    fem = assemble_system(fine, sc.diffusivity, robin)
    u = assemble_load(fine, None, 0.0, robin)
    red = apply_essential_bc(fem, fine, dirichlet)
    K = (red.mass + dt * red.stiffness).tocsc()
    lu = spla.splu(K, permc_spec="NATURAL")
    g = red.values
    const = dt * u[red.free]
    if red.fixed.size:
        const = const - red.mass_coupling @ g - dt * (red.stiffness_coupling @ g)
    return _TruthStep(lu, red.free, red.fixed, g, red.mass, red.mass_coupling, const)


def simulate_truth(sc: Scenario, fine: Mesh | None = None, step: float | None = None,
                   n_samples: int | None = None) -> np.ndarray:
    """Truth field on the fine mesh at ``t_q = q T_s`` for ``q = 0..n_samples``.

    Backward Euler with step ``step`` (default ``truth_step``); the boundary
    data of step ``k -> k+1`` is the schedule active at ``t_{k+1}``.
    """
    if fine is None:
        fine = coarse_mesh(sc)
        for _ in range(sc.refine):
            fine = refine_uniform(fine)
    dt = sc.truth_step if step is None else step
    per = int(round(sc.sample_period / dt))
    if per < 1 or abs(per * dt - sc.sample_period) > 1e-9 * sc.sample_period:
        raise ConfigError("truth step must divide the sampling period")
    Q = sc.duration if n_samples is None else n_samples
    labels = fine.labels
    x = np.full(fine.n_vertices, sc.x0, dtype=float)
    out = np.empty((Q + 1, fine.n_vertices))
    out[0] = x
    cache: dict[tuple, _TruthStep] = {}
    for k in range(Q * per):
        t1 = (k + 1) * dt
        q_active = int(math.floor(t1 / sc.sample_period + 1e-12))
        active = sc.labels_at(q_active, labels)
        key = tuple(sorted((lab, r.kind, r.value, r.nu, r.x_ext) for lab, r in active.items()))
        op = cache.get(key)
        if op is None:
            op = cache[key] = _truth_operator(sc, fine, active, dt)
        rhs = op.M_ii @ x[op.free] + op.const
        if op.fixed.size:
            rhs = rhs + op.M_ib @ x[op.fixed]
        xn = np.empty_like(x)
        xn[op.free] = op.lu.solve(rhs)
        xn[op.fixed] = op.values
        x = xn
        if (k + 1) % per == 0:
            out[(k + 1) // per] = x
    return out


# --------------------------------------------------------------------------- #
# measurements and error metric

def sensor_rng(seed: int, run: int, sensor: int) -> np.random.Generator:
    """Counter-based stream for one (run, sensor) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(run, sensor))))


def sample_measurements(truth: np.ndarray, C_fine, sigma_v: float, seed: int,
                        runs: Sequence[int]) -> np.ndarray:
    """Noisy point samples ``(Q, S, R)`` of the truth at ``t_1..t_Q``.

    ``truth`` holds the field at ``t_0..t_Q`` (rows); run ``r`` and sensor
    ``i`` draw their noise from an independent Philox stream, so each
    stream is reproducible whatever subset of runs is generated.
    """
    clean = (C_fine @ truth[1:].T).T
    Q, S = clean.shape
    out = np.empty((Q, S, len(runs)))
    for c, r in enumerate(runs):
        for i in range(S):
            out[:, i, c] = clean[:, i] + sigma_v * sensor_rng(seed, r, i).standard_normal(Q)
    return out


def compute_rmse(E_est, estimates: np.ndarray, E_truth, truth: np.ndarray) -> np.ndarray:
    """RMSE over evaluation points; trailing batch axes of ``estimates`` are kept."""
    diff = E_est @ estimates - (E_truth @ truth).reshape((-1,) + (1,) * (np.ndim(estimates) - 1))
    return np.sqrt(np.mean(diff ** 2, axis=0))


# --------------------------------------------------------------------------- #
# experiment

@dataclass(eq=False)
class RunResult:
    variant: str
    rmse: np.ndarray  # (runs, Q)
    wall_clock: float
    seed: int
    config_hash: str

    @property
    def mean(self) -> np.ndarray:
        return self.rmse.mean(axis=0)

    def steady_mean(self, fraction: float) -> float:
        Q = self.rmse.shape[1]
        start = Q - max(1, int(round(Q * fraction)))
        return float(self.mean[start:].mean())


@dataclass(eq=False)
class Experiment:
    scenario: Scenario
    setup: Setup
    truth: np.ndarray
    results: dict[str, RunResult]
    snapshots: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    transport_trace: list | None = None


def variant_name(L: int | None) -> str:
    return "cFE-KF" if L is None else f"dFE-KF_L{L}"


def _chunks(runs: Sequence[int], size: int):
    for i in range(0, len(runs), size):
        yield list(runs[i:i + size])


def run_experiment(sc: Scenario, runs: int | None = None, threads: int = 1, trace_messages: bool = False,
                   setup: Setup | None = None, truth: np.ndarray | None = None,
                   variants: Sequence[int | None] | None = None, log=None) -> Experiment:
    """Monte Carlo comparison of the centralized filter and the distributed filter for each L.

    Gains are data independent and computed once per variant; the
    estimates of all runs are propagated together in fixed-size column
    chunks so the arithmetic does not depend on the thread count.
    """
    setup = build_setup(sc) if setup is None else setup
    if truth is None:
        truth = simulate_truth(sc, setup.fine)
    R = sc.runs if runs is None else runs
    run_ids = list(range(R))
    Q = truth.shape[0] - 1
    if variants is None:
        variants = ([None] if sc.include_central else []) + list(sc.L)
    n = setup.mesh.n_vertices
    x0 = np.full(n, sc.prior)
    snaps = {"truth": {q: truth[q] for q in sc.snapshots if 1 <= q <= Q}}
    results = {}
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    trace = None
    try:
        for L in variants:
            t0 = time.perf_counter()
            name = variant_name(L)
            if L is None:
                model = setup.central_model()
                gains = filter_central.covariance_schedule(model, sc.p0 * np.eye(n), Q, sc.sample_period)

                def estimate(ys, model=model, gains=gains):
                    return filter_central.run_with_gains(model, gains, ys, x0, sc.sample_period)
            else:
                net = filter_distributed.ConsensusNetwork(
                    setup.local_models(L), setup.dec, L, sc.gamma, executor=executor,
                    trace=trace_messages, L_override=dict(sc.L_override), model_factory=setup.local_models)
                gains = net.covariance_schedule(sc.p0, Q)

                def estimate(ys, net=net, gains=gains):
                    return net.run_with_gains(gains, ys, x0)
            rm = np.empty((R, Q))
            for chunk in _chunks(run_ids, sc.chunk):
                ys = sample_measurements(truth, setup.C_fine, sc.sigma_v, sc.seed, chunk)
                est = estimate(ys)  # (Q, n, r)
                for q in range(Q):
                    rm[chunk[0]:chunk[-1] + 1, q] = compute_rmse(setup.E_coarse, est[q], setup.E_fine, truth[q + 1])
                if chunk[0] == 0:
                    snaps[name] = {q: est[q - 1][:, 0].copy() for q in sc.snapshots if 1 <= q <= Q}
            if L is not None and trace_messages:
                trace = (trace or []) + [(name,) + row for row in net.transport.trace]
            results[name] = RunResult(name, rm, time.perf_counter() - t0, sc.seed, sc.digest)
            if log is not None:
                log(f"{name}: final mean RMSE {results[name].mean[-1]:.4f} K "
                    f"({results[name].wall_clock:.1f} s)")
    finally:
        if executor is not None:
            executor.shutdown()
    return Experiment(sc, setup, truth, results, snaps, trace)


def gamma_sweep(sc: Scenario, gammas: Sequence[float], Ls: Sequence[int] | None = None, runs: int | None = None,
                setup: Setup | None = None, truth: np.ndarray | None = None) -> list[tuple[float, int, float]]:
    """Steady-state mean RMSE of the distributed filter for each ``(gamma, L)``."""
    setup = build_setup(sc) if setup is None else setup
    truth = simulate_truth(sc, setup.fine) if truth is None else truth
    Ls = list(sc.L if Ls is None else Ls)
    rows = []
    for g in gammas:
        exp = run_experiment(replace(sc, gamma=float(g)), runs=runs, setup=setup, truth=truth, variants=Ls)
        for L in Ls:
            rows.append((float(g), L, exp.results[variant_name(L)].steady_mean(sc.steady_fraction)))
    return rows


def schwarz_convergence(setup: Setup, Ls: Sequence[int] = (1, 2, 10), field0: np.ndarray | None = None) -> dict:
    """One prediction cycle from a consistent smooth field, per L.

    Reports the largest spread between copies of duplicated vertices and
    the relative L2 gap to the centralized prediction (relative to the
    field and to the field's variation).
    """
    sc = setup.scenario
    mesh = setup.mesh
    if field0 is None:
        xy = mesh.vertices
        field0 = sc.x0 + 5.0 * np.cos(np.pi * xy[:, 0] / 2) * np.cos(np.pi * xy[:, 1] / 4) + 2.0 * xy[:, 1]
    central = discretize_central((setup.mass, setup.stiffness), sc.central_step)
    xc = field0.copy()
    for _ in range(int(round(sc.sample_period / sc.central_step))):
        xc = central.A @ xc
    dup = [len(c) > 1 for c in setup.dec.copies]
    out = {}
    for L in Ls:
        mods = local_models(setup.mass, setup.stiffness, setup.dec, sc.sample_period / L)
        nodes = [filter_distributed.NodeState(m, field0[ix].copy(), None, None, "posterior")
                 for m, ix in enumerate(setup.dec.internal)]
        tr = filter_distributed.InProcessTransport()
        for ell in range(1, L + 1):
            nodes = filter_distributed.consensus_round(nodes, mods, setup.dec, ell, tr)
        spread = 0.0
        for v, cp in enumerate(setup.dec.copies):
            if dup[v]:
                vals = [nodes[m].x[loc] for m, loc in cp]
                spread = max(spread, max(vals) - min(vals))
        xg = filter_distributed.gather_global_estimate(nodes, setup.dec)
        dev = xc - xc.mean()
        out[L] = {
            "disagreement": float(spread),
            "rel_l2": float(np.linalg.norm(xg - xc) / np.linalg.norm(xc)),
            "rel_l2_deviation": float(np.linalg.norm(xg - xc) / np.linalg.norm(dev)),
        }
    return out


def single_node_equivalence(setup: Setup, n_samples: int = 50) -> float:
    """Max abs gap between the centralized filter and a one-node distributed filter.

    The distributed filter runs ``T_s / Delta`` rounds of step ``Delta`` with
    no boost, which is algebraically the centralized recursion.
    """
    sc = setup.scenario
    mesh = setup.mesh
    n = mesh.n_vertices
    L = int(round(sc.sample_period / sc.central_step))
    dec = decompose(mesh, np.zeros(n, dtype=np.int64), 1)
    C, per = build_measurement(mesh, np.array(sc.sensors), dec)
    Qm, Rm = sc.sigma_w ** 2 * np.eye(n), sc.sigma_v ** 2 * np.eye(len(sc.sensors))
    mods = [replace(m, C=per[0][0], Q=Qm, R=Rm, sensors=per[0][1])
            for m in local_models(setup.mass, setup.stiffness, dec, sc.central_step)]
    central = setup.central_model()
    truth = simulate_truth(replace(sc, duration=n_samples), setup.fine)
    ys = sample_measurements(truth, setup.C_fine, sc.sigma_v, sc.seed, [0])[:, :, 0]
    x0 = np.full(n, sc.prior)
    xc, _ = filter_central.run(central, ys, x0, sc.p0 * np.eye(n), sc.sample_period)
    net = filter_distributed.ConsensusNetwork(mods, dec, L, 1.0)
    xd, _ = net.run(ys, x0, sc.p0)
    return float(np.max(np.abs(xc - xd)))


def stability_report(setup: Setup, L: int, gamma: float | None = None,
                     safety: float = 0.05) -> stability.StabilityReport:
    """Stability checks for the scenario's decomposition with ``L`` rounds.

    ``gamma`` is the total boost per sampling interval; the per-round
    factor ``gamma**(1/L)`` enters the Riccati recursion.
    """
    sc = setup.scenario
    gamma = sc.gamma if gamma is None else gamma
    aug = build_augmented(setup.mass, setup.stiffness, setup.dec)
    zs = stability.zero_stability(aug)
    comp_zs = stability.zero_stability_companion(aug, zs)
    om = stability.select_omega(aug, safety)
    mods = setup.local_models(L)
    comp = compose_L_steps(mods, setup.dec, L)
    Ct, Qt, Rt = stability.augmented_noise(mods, setup.dec)
    g = gamma ** (1.0 / L)
    obs, margin = stability.observability(np.linalg.matrix_power(comp.A_D, L), Ct)
    rep = stability.StabilityReport(rho_zero=zs.rho, omega_used=om.omega, rho_omega=om.rho_omega)
    rep.extras.update({"L": L, "gamma_total": gamma, "gamma_step": g, "rho_zero_companion": comp_zs.rho,
                       "observability_margin": float(margin)})
    rep.verdicts["zero_stable"] = zs.stable
    rep.verdicts["companion_agrees"] = comp_zs.stable == zs.stable
    rep.verdicts["omega_stable"] = om.stable and om.rho_omega < 1.0
    rep.verdicts["observable"] = obs
    try:
        ric = stability.steady_riccati(comp.A_D, L, g, Qt, Ct, Rt, check_observability=False)
    except stability.ConvergenceError as exc:
        rep.extras["riccati_residual"] = exc.residual
        rep.verdicts["riccati_converged"] = False
        return rep
    rep.P_star = ric.P
    gc = stability.check_gamma_condition(ric.P, comp.A_D, comp.A_FL, L, g, ric.gain, Ct)
    rep.gamma_bound, rep.gamma_L_actual = gc.bound, gc.gamma_L
    rep.rho_error = stability.error_dynamics(ric.gain, Ct, comp.A_D, comp.A_FL, L)
    rep.extras.update({"riccati_iterations": ric.iterations, "riccati_residual": ric.residual,
                       "boosted_contraction": gc.contraction})
    rep.verdicts["riccati_converged"] = ric.residual < 1e-7
    rep.verdicts["proof_inequality"] = gc.contraction <= 1.0 + 1e-8
    rep.verdicts["gamma_condition"] = gc.passed
    rep.verdicts["error_dynamics_stable"] = rep.rho_error < 1.0
    return rep


def jump_ratio(series: np.ndarray, sample: int, halfwidth: int = 5, baseline: int = 20) -> tuple[float, int]:
    """Peak within ``sample +- halfwidth`` over the mean of the preceding ``baseline`` samples.

    ``series[k]`` is the value at sample ``k + 1``; returns the ratio and
    the (1-based) sample of the peak.
    """
    lo, hi = sample - halfwidth - 1, sample + halfwidth
    pk = lo + int(np.argmax(series[lo:hi]))
    base = float(np.mean(series[lo - baseline:lo]))
    return float(series[pk] / base), pk + 1


def smoothed_is_decreasing(series: np.ndarray, peak_sample: int, length: int = 100, window: int = 10) -> bool:
    """Moving average (``window``) over the ``length`` samples from the peak is non-increasing."""
    seg = np.asarray(series)[peak_sample - 1:peak_sample - 1 + length]
    ma = np.convolve(seg, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(ma) <= 0.0))


# --------------------------------------------------------------------------- #
# outputs

def _fmt(v: float) -> str:
    return repr(float(v))


def write_outputs(exp: Experiment, out_dir, sweep: list | None = None) -> list[Path]:
    """Write ``rmse.csv``, ``rmse_mean.csv``, field snapshots and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "rmse.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "run", "sample", "rmse"])
        for name, res in exp.results.items():
            for r in range(res.rmse.shape[0]):
                for q in range(res.rmse.shape[1]):
                    w.writerow([name, r, q + 1, _fmt(res.rmse[r, q])])
    written.append(p)
    p = out / "rmse_mean.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "sample", "mean_rmse"])
        for name, res in exp.results.items():
            for q, v in enumerate(res.mean.tolist()):
                w.writerow([name, q + 1, _fmt(v)])
    written.append(p)
    for name, snaps in exp.snapshots.items():
        mesh = exp.setup.fine if name == "truth" else exp.setup.mesh
        d = out / "fields" / name
        d.mkdir(parents=True, exist_ok=True)
        for q, vals in sorted(snaps.items()):
            p = d / f"field_q{q}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["vertex", "x", "y", "value"])
                for v, ((x, y), val) in enumerate(zip(mesh.vertices.tolist(), vals.tolist())):
                    w.writerow([v, _fmt(x), _fmt(y), _fmt(val)])
            written.append(p)
    if sweep:
        p = out / "gamma_sweep.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gamma", "L", "steady_mean_rmse"])
            for g, L, v in sweep:
                w.writerow([_fmt(g), L, _fmt(v)])
        written.append(p)
    if exp.transport_trace is not None:
        p = out / "messages.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "cycle", "round", "sender", "receiver", "payload_size"])
            w.writerows(exp.transport_trace)
        written.append(p)
    sc = exp.scenario
    lines = [f"scenario = {sc.name}", f"config_hash = {sc.digest}", f"seed = {sc.seed}",
             f"runs = {next(iter(exp.results.values())).rmse.shape[0] if exp.results else 0}",
             f"samples = {exp.truth.shape[0] - 1}"]
    for name, res in exp.results.items():
        lines.append(f"{name}.final_mean_rmse = {_fmt(res.mean[-1])}")
        lines.append(f"{name}.steady_mean_rmse = {_fmt(res.steady_mean(sc.steady_fraction))}")
    p = out / "summary.txt"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)
    return written
