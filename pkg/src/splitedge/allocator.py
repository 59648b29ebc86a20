"""Joint power / bandwidth / CPU-frequency allocation for split-learning devices.

Minimises ``alpha * energy + (1 - alpha) * latency`` (both over ``G`` rounds)
by alternating between

* Subproblem A: CPU frequencies and the per-round latency cap ``vartheta``
  for fixed uplink rates (convex; solved in the primal), and
* Subproblem B: transmit powers and bandwidths for fixed frequencies and cap.
  Its optimum is found by water-filling over each device's convex
  energy-versus-bandwidth curve and then certified with a Dinkelbach-type
  parametric loop whose inner problem is solved from its KKT conditions.

When the alternation stalls, a local joint step over all variables is tried
before declaring convergence (see :func:`alternate_optimize`).

``brute_force_allocate`` enumerates a grid of the original problem and is
kept independent of the alternating solver so the two can be cross-checked.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import lambertw

from .errors import DomainError, InfeasibleError, NumericalError
from .metrics import csv_text
from .wireless import DeviceProfile, SystemParams

__all__ = [
    "AllocationProblem",
    "AllocationSolution",
    "SubproblemAResult",
    "DinkelbachState",
    "NumericalError",
    "kkt_residuals",
    "solve_subproblem_a",
    "solve_subproblem_b",
    "newton_residual",
    "alternate_optimize",
    "brute_force_allocate",
    "evaluate_objective",
    "lambda_ratio",
    "gamma_power",
    "active_bandwidth",
    "trajectory_csv",
]

LN2 = math.log(2.0)
TRAJECTORY_FIELDS = ("iter", "objective", "E", "T", "max_constraint_violation")


@dataclass
class AllocationProblem:
    devices: list[DeviceProfile]
    sys: SystemParams

    def __post_init__(self):
        if len(self.devices) != self.sys.device_count:
            raise DomainError(
                f"{len(self.devices)} devices given but device_count={self.sys.device_count}")
        d = self.devices
        self.ids = np.array([x.id for x in d])
        self.gain = np.array([x.channel_gain for x in d], dtype=float)
        self.pmin = np.array([x.power_min for x in d], dtype=float)
        self.pmax = np.array([x.power_max for x in d], dtype=float)
        self.fmin = np.array([x.freq_min for x in d], dtype=float)
        self.fmax = np.array([x.freq_max for x in d], dtype=float)
        self.payload = np.array([x.payload_bits for x in d], dtype=float)
        # total CPU cycles per round, L * chi_u * D_u
        self.cycles = np.array(
            [self.sys.local_iters * x.cycles_per_sample * x.dataset_size for x in d],
            dtype=float)

    @property
    def m(self) -> int:
        return len(self.devices)

    def rate(self, power, bandwidth):
        """Rate of every device; zero bandwidth gives zero rate."""
        power = np.asarray(power, dtype=float)
        bandwidth = np.asarray(bandwidth, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            snr = power * self.gain / (self.sys.noise_psd * bandwidth)
            r = bandwidth * np.log1p(snr) / LN2
        return np.where(bandwidth > 0, r, 0.0)


@dataclass
class SubproblemAResult:
    freqs: np.ndarray
    latency_cap: float
    multipliers: np.ndarray


@dataclass
class DinkelbachState:
    upsilon: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray
    mu: float
    omega: np.ndarray
    iterations: int = 0
    residual_norm: float = float("nan")
    rate_floors: Optional[np.ndarray] = None


@dataclass
class AllocationSolution:
    powers: np.ndarray
    bandwidths: np.ndarray
    freqs: np.ndarray
    latency_cap: float
    objective: float
    energy: float
    time: float
    iterations: int
    converged: bool
    trajectory: list[dict] = field(default_factory=list)
    state: Optional[DinkelbachState] = None
    rate_floors: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# objective and bookkeeping


def _energy_terms(prob: AllocationProblem, power, bandwidth, freq):
    rate = prob.rate(power, bandwidth)
    with np.errstate(divide="ignore"):
        t_ul = prob.payload / rate
    tx = np.asarray(power) * t_ul
    cmp_e = prob.sys.capacitance * prob.cycles * np.asarray(freq) ** 2
    t_cmp = prob.cycles / np.asarray(freq)
    return tx, cmp_e, t_ul, t_cmp


def evaluate_objective(prob: AllocationProblem, power, bandwidth, freq,
                       latency_cap: float) -> float:
    s = prob.sys
    tx, cmp_e, _, _ = _energy_terms(prob, power, bandwidth, freq)
    return float(s.alpha * s.global_rounds * np.sum(tx + cmp_e)
                 + (1.0 - s.alpha) * s.global_rounds * latency_cap)


def _energy_time(prob, power, bandwidth, freq):
    tx, cmp_e, t_ul, t_cmp = _energy_terms(prob, power, bandwidth, freq)
    g = prob.sys.global_rounds
    return float(g * np.sum(tx + cmp_e)), float(g * np.max(t_ul + t_cmp))


def _violation(prob, power, bandwidth, freq, cap) -> float:
    _, _, t_ul, t_cmp = _energy_terms(prob, power, bandwidth, freq)
    bbar = prob.sys.total_bandwidth
    v = [
        np.sum(bandwidth) / bbar - 1.0,
        np.max((prob.pmin - power) / prob.pmax),
        np.max((power - prob.pmax) / prob.pmax),
        np.max((prob.fmin - freq) / prob.fmax),
        np.max((freq - prob.fmax) / prob.fmax),
        np.max(-np.asarray(bandwidth)) / bbar,
        np.max((t_ul + t_cmp) / cap - 1.0) if np.isfinite(cap) else 0.0,
    ]
    return float(max(0.0, *v))


def _check_finite(name: str, values, ids) -> None:
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise NumericalError(
            f"non-finite {name} for device(s) {list(np.asarray(ids)[bad])}")


# ---------------------------------------------------------------------------
# closed forms of the radio KKT system


def lambda_ratio(upsilon, zeta, theta, gain, noise_psd, payload):
    """``(upsilon*zeta + theta) * gamma / (N0 * delta * upsilon * ln 2)``."""
    return (upsilon * zeta + theta) * gain / (noise_psd * payload * upsilon * LN2)


def gamma_power(bandwidth, lam, gain, noise_psd):
    """Unclipped stationary power ``(Lambda - 1) * N0 * b / gamma``."""
    return (lam - 1.0) * noise_psd * bandwidth / gain


def active_bandwidth(rate_floor, lam):
    """Bandwidth when the rate floor is active, in the printed
    ``floor / log2(1 + Lambda)`` form.

    The solver itself uses the form consistent with :func:`gamma_power`,
    where the SNR at the optimum is ``Lambda - 1`` and hence
    ``b = floor / log2(Lambda)``.
    """
    return rate_floor / np.log2(1.0 + lam)


def _excess(w):
    """``log1p(w) - w/(1+w)``, accurate for small ``w``."""
    w = np.asarray(w, dtype=float)
    small = w < 1e-2
    ws = np.where(small, w, 0.0)
    series = sum((-1) ** n * (n - 1) / n * ws ** n for n in range(2, 12))
    with np.errstate(divide="ignore", invalid="ignore"):
        full = np.log1p(w) - w / (1.0 + w)
    return np.where(small, series, full)


def _solve_free_snr(k):
    """SNR ``w`` with ``ln(1+w) - w/(1+w) = k`` for ``k > 0``."""
    k = np.asarray(k, dtype=float)
    y = -lambertw(-np.exp(-(k + 1.0)), 0).real
    w = np.minimum(1.0 / np.maximum(y, 1e-100) - 1.0, 1e100)
    w = np.where(k < 1e-6, np.sqrt(2.0 * np.maximum(k, 1e-300)), w)
    # Newton polish where W is ill-conditioned; huge SNRs are already accurate
    for _ in range(3):
        polish = w < 1e8
        wp = np.where(polish, w, 1.0)
        g = _excess(wp) - k
        dg = wp / (1.0 + wp) ** 2
        w = np.where(polish, np.maximum(wp - g / dg, 1e-150), w)
    return w


def _solve_active_z(kp):
    """``z`` with ``1 + (z - 1) e^z = kp`` (``z = s ln 2``, s = spectral efficiency)."""
    kp = np.asarray(kp, dtype=float)
    z = 1.0 + lambertw((kp - 1.0) / math.e, 0).real
    z = np.where(kp < 1e-6, np.sqrt(2.0 * np.maximum(kp, 0.0)), z)
    for _ in range(3):
        polish = (z < 600.0) & (z > 0)
        zp = np.where(polish, z, 1.0)
        h = zp * np.exp(zp) - np.expm1(zp) - kp
        dh = zp * np.exp(zp)
        z = np.where(polish, np.maximum(zp - h / dh, 1e-300), z)
    return z


def _bandwidth_for_rate(rate, power, gain, noise_psd):
    """Bandwidth at which ``power`` achieves ``rate`` exactly (inf if never)."""
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore"):
        q = power * gain / (noise_psd * rate * LN2)  # (e^z - 1)/z = q
    out = np.full(np.broadcast(rate, q).shape, np.inf)
    ok = (q > 1.0) & (rate > 0)
    if np.any(ok):
        qq = np.broadcast_to(q, out.shape)[ok]
        arg = -np.exp(-1.0 / qq) / qq
        u = -lambertw(arg, -1).real
        z = u - 1.0 / qq
        for _ in range(3):
            k = np.expm1(z) - qq * z
            dk = np.exp(z) - qq
            z = np.where(dk > 0, z - k / np.where(dk > 0, dk, 1.0), z)
        out[ok] = np.broadcast_to(rate, out.shape)[ok] * LN2 / z
    out = np.where(rate <= 0, 0.0, out)
    return out


def _power_for_rate(rate, bandwidth, gain, noise_psd):
    """Power reaching ``rate`` on ``bandwidth`` (zero for a zero rate)."""
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        p = np.expm1(rate * LN2 / bandwidth) * noise_psd * bandwidth / gain
    return np.where(np.asarray(rate) > 0, p, 0.0)


def _slope_shape(w):
    """``h(w)``: minus the slope of the min-power energy curve, up to a device constant."""
    return LN2 * w ** 2 * _excess(w) / np.log1p(w) ** 2


def _inv_slope_shape(y):
    """Solve ``h(w) = y`` by Newton on ``log w`` (``log h`` has slope in (1, 2])."""
    y = np.asarray(y, dtype=float)
    t = 0.5 * np.log(2.0 * np.maximum(y, 1e-300) / LN2)
    ly = np.log(np.maximum(y, 1e-300))
    for _ in range(60):
        t = np.clip(t, -300.0, 300.0)
        w = np.exp(t)
        ex = _excess(w)
        L = np.log1p(w)
        f = np.log(_slope_shape(w)) - ly
        df = 2.0 + w ** 2 / ((1.0 + w) ** 2 * ex) - 2.0 * w / (L * (1.0 + w))
        step = f / df
        t = t - step
        if np.max(np.abs(step)) < 1e-14:
            break
    return np.exp(t)


# ---------------------------------------------------------------------------
# Subproblem A


def solve_subproblem_a(prob: AllocationProblem, rates) -> SubproblemAResult:
    """Optimal CPU frequencies and latency cap for fixed uplink rates.

    For a fixed cap the smallest feasible frequency is optimal, so only the
    cap is searched. The objective's derivative in the cap,
    ``(1-alpha) G - 2 alpha G xi sum(phi^3)`` over unclipped devices, is
    non-decreasing, and its sign change is located by bisection.
    """
    rates = np.asarray(rates, dtype=float)
    if np.any(~(rates > 0)) or np.any(~np.isfinite(rates)):
        bad = prob.ids[~(rates > 0) | ~np.isfinite(rates)]
        raise InfeasibleError(f"non-positive uplink rate for devices {list(bad)}", bad)
    s = prob.sys
    a, g, xi = s.alpha, s.global_rounds, s.capacitance
    tau = prob.payload / rates
    c = prob.cycles
    lo = float(np.max(tau + c / prob.fmax))
    hi = float(np.max(tau + c / prob.fmin))

    def freqs(cap):
        with np.errstate(divide="ignore"):
            raw = c / (cap - tau)
        return np.clip(np.where(cap > tau, raw, np.inf), prob.fmin, prob.fmax), raw

    def slope(cap):
        phi, raw = freqs(cap)
        inner = raw > prob.fmin
        return (1.0 - a) * g - 2.0 * a * g * xi * np.sum(np.where(inner, phi, 0.0) ** 3)

    if slope(lo) >= 0.0:
        cap = lo
    elif slope(hi) < 0.0:
        cap = hi
    else:
        left, right = lo, hi
        for _ in range(200):
            mid = 0.5 * (left + right)
            if mid <= left or mid >= right:
                break
            if slope(mid) >= 0.0:
                right = mid
            else:
                left = mid
        cap = right
    phi, _ = freqs(cap)
    if a == 0.0:
        # frequency is free of cost: run at full speed
        phi = prob.fmax.copy()
    cap = float(np.max(c / phi + tau))

    # multipliers from stationarity; clipped-but-tight devices share the rest
    tight = c / phi + tau >= cap * (1.0 - 1e-12)
    interior = tight & (phi > prob.fmin) & (phi < prob.fmax)
    base = 2.0 * a * g * xi * phi ** 3
    ell = np.where(interior, base, 0.0)
    clipped = tight & ~interior
    if np.any(clipped):
        rest = max((1.0 - a) * g - float(np.sum(ell)), 0.0)
        w = np.where(clipped, base, 0.0)
        if np.sum(w) > 0:
            ell = ell + w * (rest / np.sum(w))
        else:
            ell = ell + np.where(clipped, rest / np.count_nonzero(clipped), 0.0)
    return SubproblemAResult(freqs=phi, latency_cap=cap, multipliers=ell)


# ---------------------------------------------------------------------------
# Subproblem B


def newton_residual(state: DinkelbachState, power, bandwidth, prob: AllocationProblem):
    """Residual of the parametric fixed point and its diagonal Jacobian.

    Returns ``(phi, jac)`` where ``phi = [ -rho*delta + zeta*G ; -alpha*G_r + upsilon*G ]``
    (``G`` the per-device rate, ``G_r`` the number of rounds) and ``jac``
    holds the diagonal entries, i.e. the rates, for both blocks.
    """
    rate = prob.rate(power, bandwidth)
    s = prob.sys
    phi1 = -np.asarray(power) * prob.payload + state.zeta * rate
    phi2 = -s.alpha * s.global_rounds + state.upsilon * rate
    return np.concatenate([phi1, phi2]), np.concatenate([rate, rate])


class _RadioKKT:
    """Per-device KKT responses of the subtractive radio program."""

    def __init__(self, prob: AllocationProblem, floors):
        self.p = prob
        self.n0 = prob.sys.noise_psd
        self.floors = np.asarray(floors, dtype=float)
        # bandwidth interval along the rate-equality curve: b(pmax) .. b(pmin)
        self.b_at_pmax = _bandwidth_for_rate(self.floors, prob.pmax, prob.gain, self.n0)
        self.b_at_pmin = _bandwidth_for_rate(self.floors, prob.pmin, prob.gain, self.n0)

    def respond(self, mu, ups, zeta):
        p, n0 = self.p, self.n0
        # rate floor inactive: SNR fixed by the bandwidth price, power bang-bang
        lam = lambda_ratio(ups, zeta, 0.0, p.gain, n0, p.payload)
        w = _solve_free_snr(mu / (ups * zeta) * LN2)
        rho = np.where(w > lam - 1.0, p.pmin, p.pmax)
        b = rho * p.gain / (n0 * w)
        rate = b * np.log1p(w) / LN2
        active = rate < self.floors * (1.0 - 1e-13)
        if np.any(active):
            z = _solve_active_z(mu * p.gain / (ups * p.payload * n0))
            with np.errstate(divide="ignore", invalid="ignore"):
                bf = np.clip(self.floors * LN2 / z, self.b_at_pmax, self.b_at_pmin)
            rf = np.clip(_power_for_rate(self.floors, bf, p.gain, n0), p.pmin, p.pmax)
            b = np.where(active, bf, b)
            rho = np.where(active, rf, rho)
        return rho, b, active

    def multipliers(self, mu, ups, zeta, rho, b, active):
        p, n0 = self.p, self.n0
        omega = rho * p.gain / (n0 * b)
        interior = (rho > p.pmin * (1 + 1e-12)) & (rho < p.pmax * (1 - 1e-12))
        a_rho = ups * p.payload * n0 * LN2 * (1.0 + omega) / p.gain
        gb = _excess(omega) / LN2
        a_b = mu / np.where(gb > 0, gb, np.inf)
        a = np.where(interior, a_rho, a_b)
        theta = np.where(active, np.maximum(a - ups * zeta, 0.0), 0.0)
        return theta, omega


def _bisect_price(total, target, lo, hi):
    """Geometric bisection for the price at which ``total(price) == target``.

    ``total`` is non-increasing; returns the bracket ``(lo, hi)`` with
    ``total(lo) > target >= total(hi)`` shrunk to relative width ~1e-14.
    """
    while total(lo) <= target:
        lo *= 1e-3
        if lo < 1e-300:
            break
    while total(hi) > target:
        hi *= 1e3
        if hi > 1e300:
            raise InfeasibleError("bandwidth price diverged")
    llo, lhi = math.log(lo), math.log(hi)
    for _ in range(200):
        mid = 0.5 * (llo + lhi)
        if lhi - llo < 1e-14 * max(1.0, abs(mid)):
            break
        if total(math.exp(mid)) > target:
            llo = mid
        else:
            lhi = mid
    return math.exp(llo), math.exp(lhi)


def _blend(lo_resp, hi_resp, target):
    """Interpolate between the bracket responses so bandwidths sum to ``target``."""
    r_lo, b_lo = lo_resp[0], lo_resp[1]
    r_hi, b_hi = hi_resp[0], hi_resp[1]
    s_lo, s_hi = float(np.sum(b_lo)), float(np.sum(b_hi))
    t = 1.0 if s_lo <= s_hi else min(max((target - s_hi) / (s_lo - s_hi), 0.0), 1.0)
    return r_hi + t * (r_lo - r_hi), b_hi + t * (b_lo - b_hi), t


def _solve_inner(kkt: _RadioKKT, ups, zeta, bbar):
    """Subtractive program for fixed (upsilon, zeta); price found by bisection."""
    def total(mu):
        with np.errstate(over="ignore"):
            return float(np.sum(kkt.respond(mu, ups, zeta)[1]))

    scale = float(np.median(ups * zeta))
    mu_lo, mu_hi = _bisect_price(total, bbar * (1 + 1e-12), scale, scale)
    lo_resp = kkt.respond(mu_lo, ups, zeta)
    hi_resp = kkt.respond(mu_hi, ups, zeta)
    rho, b, t = _blend(lo_resp, hi_resp, bbar)
    active = hi_resp[2] if t < 0.5 else lo_resp[2]
    return rho, b, active, mu_hi


class _EnergyCurves:
    """Minimum transmit energy of each device as a function of its bandwidth.

    With the rate floor ``r`` fixed, the cheapest power on bandwidth ``b`` is
    ``max(pmin, power reaching r)``. The resulting energy is convex and
    decreasing in ``b``; its slope has a closed form on the floor-bound part
    (``b < b_pm``) and a one-dimensional inverse on the ``pmin`` part.
    """

    def __init__(self, prob: AllocationProblem, kkt: _RadioKKT):
        p, n0 = prob, kkt.n0
        self.p, self.n0, self.kkt = prob, n0, kkt
        r = kkt.floors
        self.r = r
        self.b_pm = np.where(r > 0, kkt.b_at_pmin, 0.0)
        self.c_min = p.payload * n0 ** 2 / (p.pmin * p.gain ** 2)
        with np.errstate(divide="ignore"):
            self.c_floor = np.where(r > 0, p.payload * n0 / (r * p.gain), np.inf)
        junction = (r > 0) & np.isfinite(self.b_pm)
        bj = np.where(junction, self.b_pm, 1.0)
        zj = np.where(junction, r * LN2 / bj, 1.0)
        self.slope_floor_j = np.where(
            junction, self.c_floor * (1.0 + (zj - 1.0) * np.exp(zj)), np.inf)
        wj = p.pmin * p.gain / (n0 * bj)
        self.slope_min_j = np.where(junction, self.c_min * _slope_shape(wj), 0.0)
        self.junction = junction

    def bandwidth(self, mu):
        p, n0, r = self.p, self.n0, self.r
        w = _inv_slope_shape(mu / self.c_min)
        b_min = p.pmin * p.gain / (n0 * w)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = _solve_active_z(mu / self.c_floor)
            b_fl = np.where(r > 0, r * LN2 / z, 0.0)
        b_fl = np.maximum(b_fl, self.kkt.b_at_pmax)
        b = np.where(
            r <= 0, b_min,
            np.where(~np.isfinite(self.b_pm), b_fl,
                     np.where(mu >= self.slope_floor_j, np.minimum(b_fl, self.b_pm),
                              np.where(mu <= self.slope_min_j, np.maximum(b_min, self.b_pm),
                                       self.b_pm))))
        return b

    def respond(self, mu):
        b = self.bandwidth(mu)
        rho = np.clip(_power_for_rate(self.r, b, self.p.gain, self.n0),
                      self.p.pmin, self.p.pmax)
        return rho, b


def _waterfill(prob: AllocationProblem, kkt: _RadioKKT):
    curves = _EnergyCurves(prob, kkt)
    bbar = prob.sys.total_bandwidth

    def total(mu):
        with np.errstate(over="ignore"):
            return float(np.sum(curves.bandwidth(mu)))

    w0 = prob.pmin * prob.gain / (prob.sys.noise_psd * bbar / prob.m)
    scale = float(np.median(curves.c_min * _slope_shape(w0)))
    mu_lo, mu_hi = _bisect_price(total, bbar * (1 + 1e-12), scale, scale)
    rho, b, _ = _blend(curves.respond(mu_lo), curves.respond(mu_hi), bbar)
    rho = np.clip(np.maximum(rho, _power_for_rate(kkt.floors, b, prob.gain, kkt.n0)),
                  prob.pmin, prob.pmax)
    return rho, b


def _dinkelbach(prob, kkt, floors, rho, b, tol, max_iter):
    """Parametric loop on (upsilon, zeta) with damped diagonal Newton steps."""
    s = prob.sys
    m = prob.m
    ag = s.alpha * s.global_rounds

    def evaluate(ups, zeta, it):
        _check_finite("Dinkelbach parameters", np.concatenate([ups, zeta]),
                      np.concatenate([prob.ids, prob.ids]))
        rho, b, active, mu = _solve_inner(kkt, ups, zeta, s.total_bandwidth)
        _check_finite("radio allocation", rho * b, prob.ids)
        theta, omega = kkt.multipliers(mu, ups, zeta, rho, b, active)
        st = DinkelbachState(upsilon=ups, zeta=zeta, theta=theta, mu=mu,
                             omega=omega, iterations=it, rate_floors=floors)
        res, jac = newton_residual(st, rho, b, prob)
        st.residual_norm = float(np.linalg.norm(res))
        return rho, b, st, res, jac

    rate = prob.rate(rho, b)
    rho, b, state, res, jac = evaluate(ag / rate, rho * prob.payload / rate, 1)
    for it in range(2, max_iter + 1):
        if state.residual_norm < tol:
            break
        dz, du = -res[:m] / jac[:m], -res[m:] / jac[m:]
        step = 1.0
        while True:
            trial = evaluate(state.upsilon + step * du, state.zeta + step * dz, it)
            if trial[2].residual_norm <= (1.0 - 0.1 * step) * state.residual_norm:
                break
            step *= 0.5
            if step < 1e-10:
                break
        rho, b, state, res, jac = trial
    return rho, b, state


def _tx_energy(prob, rho, b) -> float:
    return float(np.sum(rho * prob.payload / prob.rate(rho, b)))


def _rate_floors(prob, freqs, latency_cap):
    slack = latency_cap - prob.cycles / np.asarray(freqs, dtype=float)
    if np.any(slack <= 0):
        bad = prob.ids[slack <= 0]
        raise InfeasibleError(
            f"latency cap {latency_cap:g}s shorter than compute time for devices {list(bad)}",
            bad)
    return np.where(np.isfinite(slack), prob.payload / slack, 0.0)


def solve_subproblem_b(prob: AllocationProblem, freqs, latency_cap: float,
                       init_power=None, init_bandwidth=None, tol: float = 1e-4,
                       max_iter: int = 100, method: str = "waterfill"):
    """Transmit powers and bandwidths minimising transmission energy.

    Rate floors follow from ``latency_cap`` and ``freqs``; an infinite cap
    removes them. Returns ``(powers, bandwidths, state)``.

    ``method="waterfill"`` (default) computes the optimum from the convex
    energy-versus-bandwidth curves and then runs the parametric loop from it,
    so ``state`` certifies the point: its residual and multipliers come from
    the KKT closed forms. ``method="dinkelbach"`` runs the parametric loop
    from the initial point alone; it can stall when the rate floors are slack.
    """
    if method not in ("waterfill", "dinkelbach"):
        raise DomainError(f"unknown method {method!r}")
    s = prob.sys
    floors = _rate_floors(prob, freqs, latency_cap)
    kkt = _RadioKKT(prob, floors)
    need = kkt.b_at_pmax
    if np.any(~np.isfinite(need)) or np.sum(need) > s.total_bandwidth * (1 + 1e-12):
        bad = prob.ids[~np.isfinite(need)] if np.any(~np.isfinite(need)) else prob.ids
        raise InfeasibleError("rate floors unreachable within total bandwidth at max power",
                              bad)

    m = prob.m
    rho = prob.pmax.copy() if init_power is None else np.asarray(init_power, float).copy()
    b = (np.full(m, s.total_bandwidth / m) if init_bandwidth is None
         else np.asarray(init_bandwidth, float).copy())
    ag = s.alpha * s.global_rounds

    def fixed_state(rho, b, ups):
        rate = prob.rate(rho, b)
        st = DinkelbachState(upsilon=ups, zeta=rho * prob.payload / rate,
                             theta=np.zeros(m), mu=0.0,
                             omega=rho * prob.gain / (s.noise_psd * b),
                             rate_floors=floors)
        st.residual_norm = float(np.linalg.norm(newton_residual(st, rho, b, prob)[0]))
        return st

    if ag == 0.0:
        # objective vanishes: keep the incoming point when it meets the floors
        if np.any(prob.rate(rho, b) < floors * (1 - 1e-12)):
            rho = prob.pmax.copy()
            b = need + (s.total_bandwidth - need.sum()) / m
        return rho, b, fixed_state(rho, b, np.zeros(m))

    if np.sum(need) >= s.total_bandwidth * (1 - 1e-12):
        # the floors pin every device to max power on its minimal bandwidth
        rho = prob.pmax.copy()
        b = need * min(1.0, s.total_bandwidth / float(np.sum(need)))
        return rho, b, fixed_state(rho, b, ag / prob.rate(rho, b))

    if method == "dinkelbach":
        return _dinkelbach(prob, kkt, floors, rho, b, tol, max_iter)

    rho_w, b_w = _waterfill(prob, kkt)
    rho_d, b_d, state = _dinkelbach(prob, kkt, floors, rho_w, b_w, tol, max_iter)
    feasible = np.all(prob.rate(rho_d, b_d) >= floors * (1 - 1e-9))
    if feasible and _tx_energy(prob, rho_d, b_d) <= _tx_energy(prob, rho_w, b_w) * (1 + 1e-9):
        return rho_d, b_d, state
    return rho_w, b_w, state


# ---------------------------------------------------------------------------
# alternating optimisation


def _rel_change(new, old) -> float:
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-300)))


def _joint_refine(prob: AllocationProblem, rho, b, phi):
    """Local joint step over (power, bandwidth, frequency, cap) with SLSQP.

    Block alternation can stop at points where only a simultaneous move
    (faster CPU on one device, bandwidth moved to another, shorter cap)
    lowers the objective. This step looks for such a move from the current
    point. Variables are scaled to their upper bounds; the returned point is
    projected back onto the box and bandwidth budget.
    """
    s = prob.sys
    a, g_r, m, bbar = s.alpha, s.global_rounds, prob.m, s.total_bandwidth
    c, d, xi, n0, gain = prob.cycles, prob.payload, s.capacitance, s.noise_psd, prob.gain
    _, _, t_ul, t_cmp = _energy_terms(prob, rho, b, phi)
    t0 = float(np.max(t_ul + t_cmp))
    f0 = evaluate_objective(prob, rho, b, phi, t0)
    idx = np.arange(m)

    def parts(x):
        p, bw, f, cap = x[:m] * prob.pmax, x[m:2 * m] * bbar, x[2 * m:3 * m] * prob.fmax, x[-1] * t0
        snr = p * gain / (n0 * bw)
        ln = np.log1p(snr)
        rate = bw * ln / LN2
        dr_p = gain / (n0 * LN2 * (1.0 + snr))
        dr_b = (ln - snr / (1.0 + snr)) / LN2
        return p, bw, f, cap, rate, dr_p, dr_b

    def objective(x):
        p, _, f, cap, rate, dr_p, dr_b = parts(x)
        val = a * g_r * np.sum(p * d / rate + xi * c * f ** 2) + (1.0 - a) * g_r * cap
        grad = np.empty_like(x)
        grad[:m] = a * g_r * (d / rate - p * d / rate ** 2 * dr_p) * prob.pmax
        grad[m:2 * m] = -a * g_r * p * d / rate ** 2 * dr_b * bbar
        grad[2 * m:3 * m] = 2.0 * a * g_r * xi * c * f * prob.fmax
        grad[-1] = (1.0 - a) * g_r * t0
        return val / f0, grad / f0

    def cons(x):
        _, _, f, cap, rate, _, _ = parts(x)
        t = c / f + d / rate
        return np.concatenate([1.0 - t / cap, [1.0 - np.sum(x[m:2 * m])]])

    def cons_jac(x):
        _, _, f, cap, rate, dr_p, dr_b = parts(x)
        t = c / f + d / rate
        jac = np.zeros((m + 1, 3 * m + 1))
        jac[idx, idx] = d / rate ** 2 * dr_p / cap * prob.pmax
        jac[idx, m + idx] = d / rate ** 2 * dr_b / cap * bbar
        jac[idx, 2 * m + idx] = c / f ** 2 / cap * prob.fmax
        jac[idx, -1] = t / cap ** 2 * t0
        jac[m, m:2 * m] = -1.0
        return jac

    x0 = np.concatenate([rho / prob.pmax, b / bbar, phi / prob.fmax, [1.0]])
    bounds = ([(lo, 1.0) for lo in prob.pmin / prob.pmax] + [(1e-12, 1.0)] * m
              + [(lo, 1.0) for lo in prob.fmin / prob.fmax] + [(1e-9, None)])
    lower = np.array([lo for lo, _ in bounds])
    x0 = np.clip(x0, lower, np.concatenate([np.ones(3 * m), [np.inf]]))
    # SLSQP may probe slightly outside the box and warns when it clips
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(objective, x0, jac=True, method="SLSQP", bounds=bounds,
                       constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                       options={"ftol": 1e-12, "maxiter": 500})
    x = res.x
    p = np.clip(x[:m] * prob.pmax, prob.pmin, prob.pmax)
    bw = np.maximum(x[m:2 * m], 1e-12) * bbar
    bw = bw * min(1.0, bbar / float(np.sum(bw)))
    f = np.clip(x[2 * m:3 * m] * prob.fmax, prob.fmin, prob.fmax)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(bw)) and np.all(np.isfinite(f))):
        return rho, b, phi
    return p, bw, f


def alternate_optimize(prob: AllocationProblem, outer_tol: float = 1e-4,
                       inner_tol: float = 1e-4, max_outer: int = 200,
                       refine: bool = True) -> AllocationSolution:
    """Alternate the CPU/latency block and the radio block until the
    allocation stops moving.

    Starts from maximum power, equal bandwidth and maximum frequency. Each
    outer iteration solves Subproblem A for the current rates, then
    Subproblem B for the resulting frequencies and latency cap (no cap when
    ``alpha == 1``). Both steps are exact block minimisations, so the
    objective never increases.

    Subproblem A leaves every unclipped device's time constraint tight, which
    can freeze the alternation at a point where only a joint move helps. With
    ``refine=True`` (default) a stalled alternation takes one local joint step
    over all variables (see :func:`_joint_refine`); if it lowers the objective
    by more than ``outer_tol`` the alternation resumes from there. With
    ``refine=False`` the plain alternation is run.

    Every trajectory row is evaluated at the induced latency cap, the largest
    per-device round time.
    """
    s = prob.sys
    m = prob.m
    rho = prob.pmax.copy()
    b = np.full(m, s.total_bandwidth / m)
    phi = prob.fmax.copy()

    def row(k, rho, b, phi):
        _, _, t_ul, t_cmp = _energy_terms(prob, rho, b, phi)
        cap = float(np.max(t_ul + t_cmp))
        e, t = _energy_time(prob, rho, b, phi)
        return {"iter": k, "objective": evaluate_objective(prob, rho, b, phi, cap),
                "E": e, "T": t,
                "max_constraint_violation": _violation(prob, rho, b, phi, cap)}

    trajectory = [row(0, rho, b, phi)]
    converged = False
    just_refined = False
    state = None
    k = 0
    for k in range(1, max_outer + 1):
        a_res = solve_subproblem_a(prob, prob.rate(rho, b))
        phi_n = a_res.freqs
        cap = math.inf if s.alpha == 1.0 else a_res.latency_cap
        rho_n, b_n, state = solve_subproblem_b(prob, phi_n, cap, rho, b, tol=inner_tol)
        change = max(_rel_change(rho_n, rho), _rel_change(b_n, b), _rel_change(phi_n, phi))
        rho, b, phi = rho_n, b_n, phi_n
        trajectory.append(row(k, rho, b, phi))
        if change < outer_tol:
            if refine and not just_refined and k < max_outer:
                cur = trajectory[-1]["objective"]
                cand = _joint_refine(prob, rho, b, phi)
                cand_row = row(k, *cand)
                if cand_row["objective"] < cur * (1.0 - outer_tol):
                    rho, b, phi = cand
                    trajectory[-1] = cand_row
                    just_refined = True
                    continue
            converged = True
            break
        just_refined = False

    _, _, t_ul, t_cmp = _energy_terms(prob, rho, b, phi)
    cap = float(np.max(t_ul + t_cmp))
    e, t = _energy_time(prob, rho, b, phi)
    return AllocationSolution(
        powers=rho, bandwidths=b, freqs=phi, latency_cap=cap,
        objective=evaluate_objective(prob, rho, b, phi, cap), energy=e, time=t,
        iterations=k, converged=converged, trajectory=trajectory, state=state,
        rate_floors=None if state is None else state.rate_floors)


def kkt_residuals(prob: AllocationProblem, sol: AllocationSolution) -> dict:
    """Complementary-slackness and fixed-point residuals at a solution.

    ``rate_slackness`` is the largest, over devices, of
    ``min(|rate - floor| / floor, theta / (theta + upsilon*zeta))``: either the
    rate floor is tight or its multiplier vanishes. ``bandwidth_slackness`` is
    ``min(|sum(b) - bbar| / bbar, mu / (mu + median(upsilon*zeta)))``.
    ``newton_residual`` is the norm of the parametric fixed-point residual.
    """
    st = sol.state
    if st is None:
        raise DomainError("solution carries no radio-block state")
    floors = st.rate_floors if st.rate_floors is not None else np.zeros(prob.m)
    rate = prob.rate(sol.powers, sol.bandwidths)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.where(floors > 0, np.abs(rate - floors) / floors, np.inf)
        scale = st.upsilon * st.zeta
        theta_rel = np.where(st.theta > 0, st.theta / (st.theta + scale), 0.0)
    rate_cs = float(np.max(np.minimum(gap, theta_rel)))
    bbar = prob.sys.total_bandwidth
    med = float(np.median(scale)) if np.any(scale > 0) else 1.0
    mu_rel = st.mu / (st.mu + med) if st.mu > 0 else 0.0
    bw_cs = min(abs(float(np.sum(sol.bandwidths)) - bbar) / bbar, mu_rel)
    res = float(np.linalg.norm(newton_residual(st, sol.powers, sol.bandwidths, prob)[0]))
    return {"rate_slackness": rate_cs, "bandwidth_slackness": float(bw_cs),
            "newton_residual": res}


def trajectory_csv(solution: AllocationSolution) -> str:
    """Per-iteration objective trajectory as CSV text (6 significant digits, LF)."""
    return csv_text(TRAJECTORY_FIELDS, solution.trajectory)


# ---------------------------------------------------------------------------
# grid oracle


def _pareto(times, costs):
    order = np.lexsort((costs, times))
    t, c = times[order], costs[order]
    prev = np.concatenate([[np.inf], np.minimum.accumulate(c)[:-1]])
    keep = c < prev
    return t[keep], c[keep], order[keep]


def _step_min(times, costs, thresholds):
    idx = np.searchsorted(times, thresholds, side="right") - 1
    return np.where(idx >= 0, costs[np.maximum(idx, 0)], np.inf), idx


def brute_force_allocate(prob: AllocationProblem,
                         grid_points_per_axis: int = 101) -> AllocationSolution:
    """Exhaustive search over a grid of (power, bandwidth, frequency) per device.

    Power and frequency axes are ``linspace(min, max, n)``; the bandwidth axis
    is ``linspace(0, bbar, n)`` without its zero point, and combinations with
    ``sum(b) > bbar`` are discarded. Going from ``n`` to ``2n - 1`` points
    halves every spacing and keeps all old points, so the optimum can only
    improve. The latency cap is the induced maximum
    per-device time, so the search is exact over the grid: per device and
    bandwidth only the time/energy Pareto front can be optimal, and the
    minimum over all fronts is attained at one of their breakpoints.
    Ties go to the lowest index.
    """
    m = prob.m
    if m > 3:
        raise DomainError("brute_force_allocate refuses more than 3 devices")
    n = int(grid_points_per_axis)
    s = prob.sys
    a, g = s.alpha, s.global_rounds
    bbar = s.total_bandwidth
    if n < 2:
        raise DomainError("need at least two grid points per axis")
    b_axis = np.linspace(0.0, bbar, n)[1:]
    fronts = []  # fronts[u][j] = (times, costs, (rho, phi) arrays)
    for u in range(m):
        rho_axis = np.linspace(prob.pmin[u], prob.pmax[u], n)
        phi_axis = np.linspace(prob.fmin[u], prob.fmax[u], n)
        R, F = np.meshgrid(rho_axis, phi_axis, indexing="ij")
        R, F = R.ravel(), F.ravel()
        t_cmp = prob.cycles[u] / F
        e_cmp = s.capacitance * prob.cycles[u] * F ** 2
        per_b = []
        for bj in b_axis:
            rate = bj * np.log1p(R * prob.gain[u] / (s.noise_psd * bj)) / LN2
            t = t_cmp + prob.payload[u] / rate
            c = a * g * (R * prob.payload[u] / rate + e_cmp)
            tt, cc, idx = _pareto(t, c)
            per_b.append((tt, cc, R[idx], F[idx]))
        fronts.append(per_b)

    best = (np.inf, None)
    lat_w = (1.0 - a) * g
    # the first device's bandwidth index runs outermost; ties keep the first hit
    for combo in np.ndindex(*([n - 1] * m)):
        if sum(combo) + m > n - 1:  # sum(k_u) <= n - 1 with b_u = k_u * bbar / (n - 1)
            continue
        parts = [fronts[u][j] for u, j in enumerate(combo)]
        thr = np.unique(np.concatenate([p[0] for p in parts]))
        total = lat_w * thr
        picks = []
        for p in parts:
            cost, idx = _step_min(p[0], p[1], thr)
            total = total + cost
            picks.append(idx)
        k = int(np.argmin(total))
        if total[k] < best[0]:
            best = (float(total[k]),
                    (combo, [int(ix[k]) for ix in picks]))
    if best[1] is None:
        raise InfeasibleError("grid contains no feasible point", list(prob.ids))
    combo, idx = best[1]
    rho = np.array([fronts[u][j][2][i] for u, (j, i) in enumerate(zip(combo, idx))])
    phi = np.array([fronts[u][j][3][i] for u, (j, i) in enumerate(zip(combo, idx))])
    b = b_axis[list(combo)]
    _, _, t_ul, t_cmp = _energy_terms(prob, rho, b, phi)
    cap = float(np.max(t_ul + t_cmp))
    e, t = _energy_time(prob, rho, b, phi)
    return AllocationSolution(
        powers=rho, bandwidths=b, freqs=phi, latency_cap=cap,
        objective=evaluate_objective(prob, rho, b, phi, cap), energy=e, time=t,
        iterations=0, converged=True)
