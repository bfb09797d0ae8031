"""AGC plant construction, discretization, gain design, and grid assembly.

A generator loop is the four-state system (rotor-speed deviation, mechanical
power, valve position, power reference) driven by the load deviation.  The
grid bundles n such loops with an m-breaker load topology, safety envelopes,
and per-generator residue-detector thresholds.

Conventions: power quantities are per-unit on each generator's rating; the
rotor-speed deviation state is rad/s and is reported as
f = nominal_hz + dw / (2*pi).
"""

import json
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, mat_exp, solve_dare

STATE_LABELS = ("d_omega", "d_p_mech", "d_p_valve", "d_p_ref")
OUTPUT_LABELS = ("d_omega", "d_p_ref")
N_STATES = 4
N_OUTPUTS = 2

THRESHOLD_FLOOR = 1e-9


class ConfigError(ValueError):
    """Grid-config schema or invariant violation, with a field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class AgcParams:
    """Physical parameters of one generator's AGC loop.

    droop must equal 1/regulation; governor_sign picks the sign of the
    rotor-speed coupling into the valve equation (-1 is the physical
    convention, +1 the alternate printed-matrix variant).
    """

    inertia: float                  # H, seconds
    droop: float                    # D = 1/R, per-unit
    regulation: float               # R, per-unit
    turbine_delay: float            # T_TR, seconds
    governor_delay: float           # T_G, seconds
    integrator_gain: float          # K_ref, per-unit
    nominal_frequency_hz: float = 60.0
    rated_power_mw: float = 100.0
    governor_sign: int = -1

    def __post_init__(self):
        if not self.inertia > 0:
            raise ValueError("inertia must be > 0")
        if not self.turbine_delay > 0:
            raise ValueError("turbine_delay must be > 0")
        if not self.governor_delay > 0:
            raise ValueError("governor_delay must be > 0")
        if not self.regulation > 0:
            raise ValueError("regulation must be > 0")
        if not self.nominal_frequency_hz > 0:
            raise ValueError("nominal_frequency_hz must be > 0")
        if abs(self.droop - 1.0 / self.regulation) > 1e-12:
            raise ValueError(
                f"droop ({self.droop}) must equal 1/regulation "
                f"({1.0 / self.regulation})"
            )
        if self.governor_sign not in (-1, 1):
            raise ValueError("governor_sign must be -1 or +1")


@dataclass(frozen=True)
class ContinuousStateSpace:
    a_c: np.ndarray   # 4x4
    b_c: np.ndarray   # 4x1
    c_c: np.ndarray   # 2x4, selects (d_omega, d_p_ref)

    def __post_init__(self):
        for name, arr, shape in (("a_c", self.a_c, (4, 4)),
                                 ("b_c", self.b_c, (4, 1)),
                                 ("c_c", self.c_c, (2, 4))):
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
            arr.setflags(write=False)


@dataclass(frozen=True)
class DiscreteLoop:
    """Discretized plant plus estimator and controller gains for one generator."""

    a: np.ndarray        # 4x4
    b: np.ndarray        # 4x1
    c: np.ndarray        # 2x4
    d_ff: np.ndarray     # 2x1, zero feedthrough
    k_gain: np.ndarray   # 1x4 state-feedback gain (0 by default)
    l_gain: np.ndarray   # 4x2 estimator gain
    ts: float
    q_noise: np.ndarray  # 4x4 process covariance
    r_noise: np.ndarray  # 2x2 measurement covariance

    def __post_init__(self):
        shapes = {"a": (self.a, (4, 4)), "b": (self.b, (4, 1)),
                  "c": (self.c, (2, 4)), "d_ff": (self.d_ff, (2, 1)),
                  "k_gain": (self.k_gain, (1, 4)), "l_gain": (self.l_gain, (4, 2)),
                  "q_noise": (self.q_noise, (4, 4)), "r_noise": (self.r_noise, (2, 2))}
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
        if not self.ts > 0:
            raise ValueError("ts must be > 0")
        if np.any(self.d_ff != 0.0):
            raise ValueError("d_ff must be zero")
        rad = spectral_radius(self.a - self.l_gain @ self.c)
        if not rad < 1.0:
            raise ValueError(f"estimator loop unstable: rho(A - L C) = {rad}")


@dataclass(frozen=True)
class LoadMap:
    """Breaker-to-load topology: entry [i, j] is the per-unit load that
    breaker j's feeder contributes to generator i."""

    matrix: np.ndarray   # n x m, entries >= 0
    b_nom: np.ndarray    # m nominal breaker states in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        b = np.asarray(self.b_nom, dtype=np.int64)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "b_nom", b)
        if m.ndim != 2 or m.shape[1] < 1:
            raise ValueError("load map matrix must be n x m with m >= 1")
        if np.any(m < 0):
            raise ValueError("load map entries must be >= 0")
        if b.shape != (m.shape[1],) or not np.all((b == 0) | (b == 1)):
            raise ValueError("b_nom must be m binary entries")
        dead = np.where(~m.any(axis=0))[0]
        if dead.size:
            raise ValueError(f"load map columns with all-zero entries: {dead.tolist()}")
        m.setflags(write=False)
        b.setflags(write=False)

    @property
    def n_breakers(self):
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SafetyEnvelope:
    f_lo: float
    f_hi: float
    pe_lo: float
    pe_hi: float

    def __post_init__(self):
        if not self.f_lo < self.f_hi:
            raise ValueError("f_lo must be < f_hi")
        if not self.pe_lo < self.pe_hi:
            raise ValueError("pe_lo must be < pe_hi")


@dataclass(frozen=True)
class GridModel:
    generators: tuple                 # of (AgcParams, DiscreteLoop)
    load_map: LoadMap
    envelope: SafetyEnvelope
    thresholds: np.ndarray            # n residue thresholds
    scheduled_load: np.ndarray        # n x T_sched per-unit load schedule
    noise_enabled: bool = True

    def __post_init__(self):
        if len(self.generators) < 1:
            raise ValueError("grid needs at least one generator")
        th = np.asarray(self.thresholds, dtype=float)
        sched = np.asarray(self.scheduled_load, dtype=float)
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "scheduled_load", sched)
        n = len(self.generators)
        if th.shape != (n,) or np.any(th <= 0):
            raise ValueError("thresholds must be n positive values")
        if sched.ndim != 2 or sched.shape[0] != n:
            raise ValueError("scheduled_load must be n x T")
        if self.load_map.matrix.shape[0] != n:
            raise ValueError("load map rows must match generator count")
        ts = {loop.ts for _, loop in self.generators}
        if len(ts) != 1:
            raise ValueError("all generator loops must share the same ts")
        th.setflags(write=False)
        sched.setflags(write=False)

    @property
    def n_generators(self):
        return len(self.generators)

    @property
    def n_breakers(self):
        return self.load_map.n_breakers

    @property
    def ts(self):
        return self.generators[0][1].ts

    def stacked(self):
        """Matrices stacked along a leading generator axis, for the kernels."""
        a = np.stack([loop.a for _, loop in self.generators])
        b = np.stack([loop.b[:, 0] for _, loop in self.generators])
        c = np.stack([loop.c for _, loop in self.generators])
        l = np.stack([loop.l_gain for _, loop in self.generators])
        k = np.stack([loop.k_gain[0] for _, loop in self.generators])
        return a, b, c, l, k


def build_continuous(params: AgcParams) -> ContinuousStateSpace:
    """Assemble the four-state continuous-time AGC loop for one generator."""
    d, h = params.droop, params.inertia
    t_tr, t_g = params.turbine_delay, params.governor_delay
    r, k_ref = params.regulation, params.integrator_gain
    rate_coupling = params.governor_sign / (r * t_g)
    a_c = np.array([
        [-d / (2 * h), 1 / (2 * h), 0.0, 0.0],
        [0.0, -1 / t_tr, 1 / t_tr, 0.0],
        [rate_coupling, 0.0, -1 / t_g, 1 / t_g],
        [-k_ref, 0.0, 0.0, 0.0],
    ])
    b_c = np.array([[-1 / (2 * h)], [0.0], [0.0], [0.0]])
    c_c = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    return ContinuousStateSpace(a_c=a_c, b_c=b_c, c_c=c_c)


def discretize_zoh(css: ContinuousStateSpace, ts: float):
    """Exact zero-order-hold discretization via the block matrix exponential.

    Returns (A, B); C passes through unchanged and the feedthrough is zero.
    """
    if not ts > 0:
        raise ValueError("ts must be > 0")
    n, k = css.a_c.shape[0], css.b_c.shape[1]
    block = np.zeros((n + k, n + k))
    block[:n, :n] = css.a_c
    block[:n, n:] = css.b_c
    ed = mat_exp(block * ts)
    a, b = ed[:n, :n], ed[:n, n:]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("discretization produced non-finite matrices")
    return a, b


def spectral_radius(m):
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def design_kalman_gain(a, c, q_n, r_n):
    """Steady-state estimator gain L = A P C' (C P C' + R)^-1.

    P solves the filter Riccati equation (dual of the control form).  The
    returned gain always satisfies rho(A - L C) < 1.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    p = solve_dare(a.T, c.T, np.asarray(q_n, dtype=float), np.asarray(r_n, dtype=float))
    s = c @ p @ c.T + r_n
    l = a @ p @ c.T @ np.linalg.inv(s)
    rad = spectral_radius(a - l @ c)
    if not rad < 1.0:
        raise ValueError(f"designed estimator is not contracting: rho = {rad}")
    return l


def design_lqr_gain(a, b, q_c, r_c):
    """Discrete LQR gain K = (R + B'PB)^-1 B'PA from the control Riccati solution."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p = solve_dare(a, b, np.asarray(q_c, dtype=float), np.asarray(r_c, dtype=float))
    return np.linalg.solve(r_c + b.T @ p @ b, b.T @ p @ a)


def calibrate_threshold(grid: GridModel, nominal_horizon: int, margin: float,
                        rng: RngStream):
    """Per-generator detector thresholds from an unattacked noisy run.

    Th_i = margin * max_k ||r_i_k||_inf over the nominal horizon, floored at
    THRESHOLD_FLOOR so a noise-free grid still yields usable thresholds.
    Raises if the nominal run itself leaves the frequency envelope.
    """
    from .sim import simulate  # local import to avoid a cycle

    if margin < 1.0:
        raise ValueError("margin must be >= 1")
    trace = simulate(grid, attack=None, horizon=nominal_horizon,
                     noise=grid.noise_enabled, rng=rng)
    f = trace.f_hz
    if np.any(f < grid.envelope.f_lo) or np.any(f > grid.envelope.f_hi):
        raise ValueError("nominal run leaves the frequency envelope; "
                         "grid is mis-configured")
    peak = np.max(np.abs(trace.residue), axis=(1, 2))
    return np.maximum(margin * peak, THRESHOLD_FLOOR)


# ---------------------------------------------------------------------------
# Grid-config loading


def _require(doc, path, keys_required, keys_optional=()):
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    unknown = set(doc) - set(keys_required) - set(keys_optional)
    if unknown:
        raise ConfigError(path, f"unknown keys: {sorted(unknown)}")
    missing = set(keys_required) - set(doc)
    if missing:
        raise ConfigError(path, f"missing keys: {sorted(missing)}")


def _number(doc, path, key, default=None):
    if key not in doc:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}", "missing")
    v = doc[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    return float(v)


def _matrix(value, path, shape=None):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a numeric array") from None
    if shape is not None and arr.shape != shape:
        raise ConfigError(path, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(path, "non-finite entries")
    return arr


def _covariance(value, path, dim):
    """Scalar -> scaled identity; otherwise a full dim x dim matrix."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if value < 0:
            raise ConfigError(path, "covariance scale must be >= 0")
        return float(value) * np.eye(dim)
    return _matrix(value, path, (dim, dim))


def _load_generator(doc, path, ts):
    _require(doc, path, ["params"], ["gains", "noise"])
    p = doc["params"]
    _require(p, f"{path}.params",
             ["inertia", "droop", "regulation", "turbine_delay",
              "governor_delay", "integrator_gain"],
             ["nominal_frequency_hz", "rated_power_mw", "governor_sign"])
    sign = p.get("governor_sign", -1)
    if sign not in (-1, 1):
        raise ConfigError(f"{path}.params.governor_sign", "must be -1 or +1")
    try:
        params = AgcParams(
            inertia=_number(p, f"{path}.params", "inertia"),
            droop=_number(p, f"{path}.params", "droop"),
            regulation=_number(p, f"{path}.params", "regulation"),
            turbine_delay=_number(p, f"{path}.params", "turbine_delay"),
            governor_delay=_number(p, f"{path}.params", "governor_delay"),
            integrator_gain=_number(p, f"{path}.params", "integrator_gain"),
            nominal_frequency_hz=_number(p, f"{path}.params", "nominal_frequency_hz", 60.0),
            rated_power_mw=_number(p, f"{path}.params", "rated_power_mw", 100.0),
            governor_sign=int(sign),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}.params", str(exc)) from None

    noise = doc.get("noise", {})
    _require(noise, f"{path}.noise", [], ["process", "measurement"])
    q_n = _covariance(noise.get("process", 1e-6), f"{path}.noise.process", N_STATES)
    r_n = _covariance(noise.get("measurement", 1e-6), f"{path}.noise.measurement", N_OUTPUTS)
    if np.min(np.linalg.eigvalsh(0.5 * (r_n + r_n.T))) <= 0:
        raise ConfigError(f"{path}.noise.measurement", "must be positive definite")

    css = build_continuous(params)
    a, b = discretize_zoh(css, ts)

    gains = doc.get("gains", {})
    _require(gains, f"{path}.gains", [], ["k", "l", "lqr"])
    if "k" in gains and "lqr" in gains:
        raise ConfigError(f"{path}.gains", "give either k or lqr, not both")
    if "lqr" in gains:
        lqr = gains["lqr"]
        _require(lqr, f"{path}.gains.lqr", ["q", "r"])
        k_gain = design_lqr_gain(a, b, _covariance(lqr["q"], f"{path}.gains.lqr.q", N_STATES),
                                 _covariance(lqr["r"], f"{path}.gains.lqr.r", 1))
    else:
        k_gain = _matrix(gains.get("k", np.zeros((1, N_STATES))),
                         f"{path}.gains.k", (1, N_STATES))
    if "l" in gains:
        l_gain = _matrix(gains["l"], f"{path}.gains.l", (N_STATES, N_OUTPUTS))
    else:
        try:
            l_gain = design_kalman_gain(a, css.c_c, q_n, r_n)
        except Exception as exc:
            raise ConfigError(f"{path}.gains.l", f"estimator design failed: {exc}") from None

    try:
        loop = DiscreteLoop(a=a, b=b, c=css.c_c.copy(), d_ff=np.zeros((2, 1)),
                            k_gain=k_gain, l_gain=l_gain, ts=ts,
                            q_noise=q_n, r_noise=r_n)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    return params, loop


def load_grid_config(document) -> GridModel:
    """Build a fully validated GridModel from a config document (dict or JSON text).

    Estimator gains are designed on load when not supplied; thresholds are
    calibrated from a nominal noisy run when absent.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None

    _require(document, "$",
             ["generators", "load_map", "envelope", "sampling_period_s"],
             ["thresholds", "scheduled_load", "calibration", "noise_enabled"])

    ts = _number(document, "$", "sampling_period_s")
    if ts <= 0:
        raise ConfigError("$.sampling_period_s", "must be > 0")

    gens_doc = document["generators"]
    if not isinstance(gens_doc, list) or not gens_doc:
        raise ConfigError("$.generators", "must be a non-empty array")
    generators = [
        _load_generator(g, f"$.generators[{i}]", ts) for i, g in enumerate(gens_doc)
    ]
    n = len(generators)

    lm_doc = document["load_map"]
    _require(lm_doc, "$.load_map", ["matrix", "b_nom"])
    matrix = _matrix(lm_doc["matrix"], "$.load_map.matrix")
    b_nom = np.asarray(lm_doc["b_nom"])
    try:
        load_map = LoadMap(matrix=matrix, b_nom=b_nom)
    except ValueError as exc:
        raise ConfigError("$.load_map", str(exc)) from None
    if load_map.matrix.shape[0] != n:
        raise ConfigError("$.load_map.matrix",
                          f"expected {n} rows (one per generator), got {load_map.matrix.shape[0]}")

    env_doc = document["envelope"]
    _require(env_doc, "$.envelope", ["f_lo", "f_hi", "pe_lo", "pe_hi"])
    try:
        envelope = SafetyEnvelope(
            f_lo=_number(env_doc, "$.envelope", "f_lo"),
            f_hi=_number(env_doc, "$.envelope", "f_hi"),
            pe_lo=_number(env_doc, "$.envelope", "pe_lo"),
            pe_hi=_number(env_doc, "$.envelope", "pe_hi"),
        )
    except ValueError as exc:
        raise ConfigError("$.envelope", str(exc)) from None

    sched = document.get("scheduled_load", [[0.0]] * n)
    sched = _matrix(sched, "$.scheduled_load")
    if sched.ndim != 2 or sched.shape[0] != n:
        raise ConfigError("$.scheduled_load", f"must be {n} rows")

    noise_enabled = document.get("noise_enabled", True)
    if not isinstance(noise_enabled, bool):
        raise ConfigError("$.noise_enabled", "must be a boolean")

    cal = document.get("calibration", {})
    _require(cal, "$.calibration", [], ["horizon", "margin", "seed"])
    if "thresholds" in document:
        thresholds = _matrix(document["thresholds"], "$.thresholds", (n,))
        if np.any(thresholds <= 0):
            raise ConfigError("$.thresholds", "must be positive")
        grid = GridModel(generators=tuple(generators), load_map=load_map,
                         envelope=envelope, thresholds=thresholds,
                         scheduled_load=sched, noise_enabled=noise_enabled)
    else:
        horizon = int(_number(cal, "$.calibration", "horizon", 1000))
        margin = _number(cal, "$.calibration", "margin", 1.1)
        seed = int(_number(cal, "$.calibration", "seed", 2024))
        provisional = GridModel(generators=tuple(generators), load_map=load_map,
                                envelope=envelope, thresholds=np.ones(n),
                                scheduled_load=sched, noise_enabled=noise_enabled)
        thresholds = calibrate_threshold(provisional, horizon, margin,
                                         RngStream(seed, 0))
        grid = GridModel(generators=tuple(generators), load_map=load_map,
                         envelope=envelope, thresholds=thresholds,
                         scheduled_load=sched, noise_enabled=noise_enabled)
    return grid


def load_grid_config_file(path) -> GridModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_grid_config(fh.read())
