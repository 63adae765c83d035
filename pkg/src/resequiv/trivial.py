"""The 1x1-kernel matrix-product model of dominant gradient flow, and phi(r).

Each trial draws, for m = l+1 .. L, a kernel ``K_m`` (``I + eps*A_m`` for the
residual model, ``A'_m`` for the plain one), a 0/1 gate diagonal ``S_m`` with
``P[1] = p`` and a final-gradient diagonal ``V``, then forms::

    theta = [prod_{m=l+1}^{L} K_m^T S_m] V

``r_i = |theta_ii| / |sum_{j != i} theta_ij|`` and sigma is the fraction
of rows with ``r_i > 1``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, special

from .errors import InvalidArgument, UnsupportedError

CHUNK = 4096


@dataclass(frozen=True)
class TrivialConfig:
    n: int = 20
    L: int = 10
    l: int = 5
    p: float = 0.9
    eps: float = 0.1
    sigma_a: float = 0.01
    sigma_v: float = 0.1
    trials: int = 100_000
    seed: int = 0
    kind: str = "residual"
    sigma_a_plain: float | None = None  # std of plain kernel entries; sqrt(2/n) when None

    def __post_init__(self):
        if not 1 <= self.l < self.L:
            raise InvalidArgument(f"need 1 <= l < L, got l={self.l}, L={self.L}")
        if self.n < 2:
            raise InvalidArgument("n must be >= 2")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgument("p must lie in [0, 1]")
        if min(self.eps, self.sigma_a, self.sigma_v) <= 0:
            raise InvalidArgument("eps, sigma_a and sigma_v must be positive")
        if self.trials < 1:
            raise InvalidArgument("trials must be >= 1")
        if self.kind not in ("residual", "plain"):
            raise InvalidArgument(f"kind must be residual or plain, got {self.kind!r}")

    @property
    def plain_std(self) -> float:
        return float(np.sqrt(2.0 / self.n)) if self.sigma_a_plain is None else self.sigma_a_plain

    def with_(self, **kw) -> TrivialConfig:
        return replace(self, **kw)


@dataclass(frozen=True)
class SigmaEstimate:
    mean: float
    stderr: float
    trials: int


def theta_batch(cfg: TrivialConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` independent theta matrices, shape (count, n, n).

    Standard normals are drawn in a fixed order and scaled afterwards, so
    equal seeds give scale-coupled draws across sigma_a and sigma_v.
    """
    n, depth = cfg.n, cfg.L - cfg.l
    z_a = rng.standard_normal((depth, count, n, n))
    gates = rng.random((depth, count, n)) < cfg.p
    v = cfg.sigma_v * rng.standard_normal((count, n))
    eye = np.eye(n)
    m = None
    for k in range(depth):
        if cfg.kind == "residual":
            kern = eye + cfg.eps * (cfg.sigma_a * z_a[k])
        else:
            kern = cfg.plain_std * z_a[k]
        # K^T S scales column j of K^T by the gate s_j
        factor = kern.transpose(0, 2, 1) * gates[k][:, None, :]
        m = factor if m is None else m @ factor
    return m * v[:, None, :]


def row_ratios(theta: np.ndarray) -> np.ndarray:
    """r_i per row; inf for x/0 and nan for 0/0."""
    diag = np.abs(np.diagonal(theta, axis1=-2, axis2=-1))
    off = _direct_off(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        return diag / off


def _direct_off(theta):
    # off-diagonal row sums without subtracting the diagonal back out
    n = theta.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return np.abs((theta * mask).sum(axis=-1))


def trial_sigmas(theta: np.ndarray) -> np.ndarray:
    diag = np.abs(np.diagonal(theta, axis1=-2, axis2=-1))
    off = _direct_off(theta)
    # diag > off covers r > 1 including x/0; 0/0 never counts
    return (diag > off).mean(axis=-1)


def simulate_sigma(cfg: TrivialConfig, threads: int = 1) -> SigmaEstimate:
    """Monte Carlo estimate of E[sigma]; chunk k uses the stream ``[seed, k]``."""
    chunks = [(k, min(CHUNK, cfg.trials - k * CHUNK)) for k in range(-(-cfg.trials // CHUNK))]

    def run(item):
        k, count = item
        rng = np.random.default_rng([cfg.seed, k])
        return trial_sigmas(theta_batch(cfg, rng, count))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    s = np.concatenate(parts)
    stderr = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
    return SigmaEstimate(float(s.mean()), stderr, int(s.size))


def p_prime(p: float, span: int) -> float:
    """``sum_{k=1}^{span} p^(2k)``, equal to ``span`` at p = 1."""
    if p == 1.0:
        return float(span)
    return p * p * (1.0 - p ** (2 * span)) / (1.0 - p * p)


def analytic_radius(cfg: TrivialConfig, form: str = "general") -> float:
    span = cfg.L - cfg.l
    es2 = (cfg.eps * cfg.sigma_a) ** 2
    if form == "general":
        pp = p_prime(cfg.p, span)
        if pp == 0.0:
            return float("inf")
        return float(np.sqrt(1.0 / (es2 * (cfg.n - 1) * pp) + span / ((cfg.n - 1) * pp)))
    if form == "conclusion":
        return float(np.sqrt(1.0 + span * es2) / (cfg.eps * np.sqrt(span * (cfg.n - 1)) * cfg.sigma_a))
    raise InvalidArgument(f"form must be 'general' or 'conclusion', got {form!r}")


def analytic_sigma(cfg: TrivialConfig, form: str = "general") -> float:
    """``p^(L-l) / (1 + r^-1.2)`` for the residual model."""
    if cfg.kind != "residual":
        raise UnsupportedError("no closed-form sigma exists for the plain model")
    r = analytic_radius(cfg, form)
    return cfg.p ** (cfg.L - cfg.l) * phi_approx(r) if np.isfinite(r) else cfg.p ** (cfg.L - cfg.l)


# -- phi ---------------------------------------------------------------------------


def _check_r(r) -> float:
    r = float(r)
    if not r > 0 or not np.isfinite(r):
        raise InvalidArgument(f"r must be a positive finite number, got {r}")
    return r


def phi(r) -> float:
    """P[|X| > |Y|] for X ~ N(0, r^2), Y ~ N(0, 1), by quadrature.

    ``phi(r) = 4 * int_0^inf g_r(u) G(u) du - 1`` truncated where the
    remaining mass is far below rounding, with G the standard normal CDF.
    """
    r = _check_r(r)

    def integrand(u):
        return np.exp(-0.5 * (u / r) ** 2) / (np.sqrt(2 * np.pi) * r) * special.ndtr(u)

    # g_r is negligible past 40r; G is 1 to rounding past 12
    upper = min(40.0 * r, max(12.0, 12.0 * r))
    # split at multiples of the density's scale so quad never misses the bulk
    knots = [k * r for k in (1, 2, 4, 8, 16) if k * r < upper] + [upper]
    total, a = 0.0, 0.0
    for b in knots:
        total += integrate.quad(integrand, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        a = b
    return 4.0 * total - 1.0


def phi_approx(r, c: float = 1.2) -> float:
    r = _check_r(r)
    return 1.0 / (1.0 + r ** (-c))


SWEEPS = {
    "n": ("n", [2, 5, 10, 20, 40, 80, 160]),
    "l": ("l", None),  # 1 .. L-1
    "p": ("p", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]),
    "eps": ("eps", [0.01, 0.03, 0.1, 0.3, 1.0, 3.0]),
    "sigma-a": ("sigma_a", [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0]),
    "sigma-v": ("sigma_v", [0.001, 0.01, 0.1, 1.0, 10.0]),
}

SWEEP_COLUMNS = ("parameter", "value", "kind", "sigma_sim", "stderr", "sigma_analytic",
                 "sigma_analytic_conclusion")


def sweep(cfg: TrivialConfig, name: str, kinds=("residual", "plain"), values=None, threads: int = 1):
    """Rows of SWEEP_COLUMNS over one parameter, other parameters from ``cfg``."""
    if name not in SWEEPS:
        raise InvalidArgument(f"unknown sweep {name!r}; expected one of {sorted(SWEEPS)}")
    field, default = SWEEPS[name]
    if default is None:
        default = list(range(1, cfg.L))
    rows = []
    for value in default if values is None else values:
        for kind in kinds:
            c = cfg.with_(**{field: type(getattr(cfg, field))(value), "kind": kind})
            est = simulate_sigma(c, threads)
            if kind == "residual":
                a, b = analytic_sigma(c), analytic_sigma(c, "conclusion")
            else:
                a = b = float("nan")
            rows.append((name, value, kind, est.mean, est.stderr, a, b))
    return rows
