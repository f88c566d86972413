"""First-passage distributions for piecewise-linear boundaries by sequential
quadrature: the absorbed density is pushed knot-to-knot through exact
one-block kernels (crossing-corrected Gaussian for the one-sided case, an
image expansion for the symmetric corridor).

Per-block survival and crossing probabilities from a fixed state have closed
forms, so slope candidates during root finding cost O(nodes) while the full
O(nodes**2) propagation runs once per block.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, roots_legendre

from .core import (
    BoundarySide,
    ConvergenceError,
    NumericalConsistencyError,
    PiecewiseLinearBoundary,
    SubDensity,
    TargetDistribution,
    block_mass,
)

__all__ = [
    "QuadratureConfig",
    "init_subdensity",
    "propagate_subdensity",
    "initial_subdensity",
    "propagated_subdensity",
    "survival_probability",
    "block_crossing_probability",
    "crossing_mass",
    "fpt_distribution_table",
    "FptTable",
    "residual_fgkey",
    "block_survival_upper",
    "block_crossing_upper",
    "block_survival_symmetric",
    "block_crossing_symmetric",
    "bridge_crossing_upper",
    "bridge_crossing_symmetric",
]

#: Gauss-Legendre points per panel.
_PANEL_ORDER = 12

#: Panel width in units of sqrt(block width); 12-point panels spanning three
#: standard deviations of the stepping kernel resolve it to machine precision.
_PANEL_SIGMAS = 3.0

#: Image-term budget for the symmetric corridor kernels.
_IMAGE_MAX = 256

#: Slack allowed on the survival-monotonicity consistency check.
_SURVIVAL_SLACK = 1e-9


@dataclass(frozen=True)
class QuadratureConfig:
    """Spatial quadrature controls.

    ``nodes_per_block`` is a floor; the node count grows automatically with
    the width of the alive region so that panels keep resolving the stepping
    kernel.  ``truncation_width`` is the number of standard deviations kept
    around the diffusion bulk.
    """

    nodes_per_block: int = 96
    truncation_width: float = 8.0
    panel_rule: str = "gauss-legendre"

    def __post_init__(self) -> None:
        if self.nodes_per_block < 8:
            raise ValueError("nodes_per_block must be at least 8")
        if self.truncation_width < 4.0:
            raise ValueError("truncation_width must be at least 4")
        if self.panel_rule != "gauss-legendre":
            raise ValueError(f"unknown panel rule {self.panel_rule!r}")


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order not in _GL_CACHE:
        x, w = roots_legendre(order)
        _GL_CACHE[order] = (x, w)
    return _GL_CACHE[order]


def _grade_edges(edges: np.ndarray, at_start: bool, at_end: bool) -> np.ndarray:
    # split the panel touching an absorbing boundary into shrinking subpanels
    if at_start:
        a, b = edges[0], edges[1]
        edges = np.concatenate([[a, a + (b - a) / 6.0, a + (b - a) / 2.0], edges[1:]])
    if at_end:
        a, b = edges[-2], edges[-1]
        edges = np.concatenate([edges[:-1], [b - (b - a) / 2.0, b - (b - a) / 6.0, b]])
    return edges


def _nodes_weights(
    lo: float, hi: float, dt: float, cfg: QuadratureConfig, grade_lo: bool, grade_hi: bool
) -> tuple[np.ndarray, np.ndarray]:
    width = hi - lo
    target = _PANEL_SIGMAS * math.sqrt(dt)
    panels = max(
        2,
        int(math.ceil(cfg.nodes_per_block / _PANEL_ORDER)),
        int(math.ceil(width / target)),
    )
    edges = _grade_edges(np.linspace(lo, hi, panels + 1), grade_lo, grade_hi)
    xg, wg = _gl(_PANEL_ORDER)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    x = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    return x, w


def _alive_interval(
    side: BoundarySide, g_t: float, t: float, cfg: QuadratureConfig
) -> tuple[float, float] | None:
    """Spatial window carrying all but ~Phi(-width) of the absorbed mass."""
    reach = cfg.truncation_width * math.sqrt(t)
    if side is BoundarySide.UPPER_ONLY:
        lo, hi = -reach, min(g_t, reach)
    else:
        if g_t <= 0.0:
            return None
        lo, hi = max(-g_t, -reach), min(g_t, reach)
    if not hi > lo:
        return None
    return lo, hi


# ---------------------------------------------------------------------------
# closed-form one-block functionals, one-sided case


def block_survival_upper(x, g0: float, g1: float, dt: float):
    """P(no crossing of the linear segment g0 -> g1 over one block | start x)."""
    x = np.asarray(x, dtype=float)
    s = math.sqrt(dt)
    expo = -2.0 * (g0 - x) * (g1 - g0) / dt + log_ndtr((g1 - 2.0 * g0 + x) / s)
    return np.clip(ndtr((g1 - x) / s) - np.exp(expo), 0.0, 1.0)


def block_crossing_upper(x, g0: float, g1: float, dt: float):
    """Exact complement of :func:`block_survival_upper`, accurate for tiny
    crossing probabilities (both contributions are nonnegative)."""
    x = np.asarray(x, dtype=float)
    s = math.sqrt(dt)
    expo = -2.0 * (g0 - x) * (g1 - g0) / dt + log_ndtr((g1 - 2.0 * g0 + x) / s)
    return np.clip(ndtr((x - g1) / s) + np.exp(expo), 0.0, 1.0)


def bridge_crossing_upper(x0, x1, g0: float, g1: float, dt: float):
    """Crossing probability of the pinned bridge below one linear segment."""
    return np.exp(-2.0 * (g0 - np.asarray(x0)) * (g1 - np.asarray(x1)) / dt)


# ---------------------------------------------------------------------------
# symmetric corridor: image expansion


def _sym_coeffs(x0, u0: float, u1: float, dt: float, k: int):
    """Log-weights and Gaussian means of the k-th image pair for the
    corridor (-u, u) with u linear u0 -> u1 over one block."""
    mu = (u1 - u0) / dt
    la = -8.0 * u0 * mu * k * k - 4.0 * k * mu * x0
    lb = la - 2.0 * mu * (u0 - x0 - 4.0 * k * u0)
    return la, x0 + 4.0 * k * u0, lb, 2.0 * u0 - x0 - 4.0 * k * u0


def _log_phi_diff(lo, hi):
    """log(Phi(hi) - Phi(lo)) for hi >= lo, stable in both tails."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    flip = lo + hi > 0.0
    lo_r = np.where(flip, -hi, lo)
    hi_r = np.where(flip, -lo, hi)
    top = log_ndtr(hi_r)
    bot = log_ndtr(lo_r)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = top + np.log1p(-np.exp(np.minimum(bot - top, 0.0)))
    return np.where(bot == top, -np.inf, out)


def _sym_image_sum(x, u0, u1, dt, make_pos, make_neg):
    """Accumulate image pairs until they stop contributing."""
    x = np.asarray(x, dtype=float)
    pos_total = np.zeros_like(x)
    neg_total = np.zeros_like(x)
    peak = 0.0
    for k in range(0, _IMAGE_MAX + 1):
        inc = 0.0
        for kk in ((k,) if k == 0 else (k, -k)):
            la, mean_a, lb, mean_b = _sym_coeffs(x, u0, u1, dt, kk)
            p = make_pos(la, mean_a)
            q = make_neg(lb, mean_b)
            pos_total += p
            neg_total += q
            inc = max(inc, float(np.max(p, initial=0.0)), float(np.max(q, initial=0.0)))
        peak = max(peak, inc)
        if k >= 1 and inc <= 1e-16 * peak:
            return pos_total, neg_total
    raise ConvergenceError(
        "image expansion for the symmetric corridor did not converge "
        f"within {_IMAGE_MAX} terms (corridor nearly pinched: u0={u0:g}, u1={u1:g})"
    )


def block_survival_symmetric(x, u0: float, u1: float, dt: float):
    """P(stay inside the corridor (-u, u) over one block | start x)."""
    x = np.asarray(x, dtype=float)
    if u1 <= 0.0:
        return np.zeros_like(x)
    s = math.sqrt(dt)

    def phi_diff(logw, mean):
        return np.exp(logw + _log_phi_diff((-u1 - mean) / s, (u1 - mean) / s))

    pos_total, neg_total = _sym_image_sum(x, u0, u1, dt, phi_diff, phi_diff)
    return np.clip(pos_total - neg_total, 0.0, 1.0)


def block_crossing_symmetric(x, u0: float, u1: float, dt: float):
    """Exact complement of :func:`block_survival_symmetric`; the base image
    contributes its two endpoint tails, keeping tiny results accurate."""
    x = np.asarray(x, dtype=float)
    if u1 <= 0.0:
        return np.ones_like(x)
    s = math.sqrt(dt)
    base = ndtr((-u1 - x) / s) + ndtr((x - u1) / s)

    def phi_diff(logw, mean):
        return np.exp(logw + _log_phi_diff((-u1 - mean) / s, (u1 - mean) / s))

    # accumulate manually: the k = 0 positive term is folded into ``base``
    pos_total = np.zeros_like(x)
    neg_total = np.zeros_like(x)
    peak = 0.0
    for k in range(0, _IMAGE_MAX + 1):
        inc = 0.0
        for kk in ((k,) if k == 0 else (k, -k)):
            la, mean_a, lb, mean_b = _sym_coeffs(x, u0, u1, dt, kk)
            q = phi_diff(lb, mean_b)
            neg_total += q
            inc = max(inc, float(np.max(q, initial=0.0)))
            if kk != 0:
                p = phi_diff(la, mean_a)
                pos_total += p
                inc = max(inc, float(np.max(p, initial=0.0)))
        peak = max(peak, inc, float(np.max(base, initial=0.0)))
        if k >= 1 and inc <= 1e-16 * peak:
            break
    else:
        raise ConvergenceError(
            "image expansion for the symmetric corridor did not converge "
            f"within {_IMAGE_MAX} terms (corridor nearly pinched: u0={u0:g}, u1={u1:g})"
        )
    return np.clip(base + neg_total - pos_total, 0.0, 1.0)


def bridge_crossing_symmetric(x0, x1, u0: float, u1: float, dt: float):
    """Crossing probability of the pinned bridge against either corridor wall."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if u1 <= 0.0 or u0 <= 0.0:
        return np.ones(np.broadcast(x0, x1).shape)
    v = x1 - x0
    ncp = np.zeros(np.broadcast(x0, x1).shape)
    peak = 0.0
    for k in range(0, _IMAGE_MAX + 1):
        inc = 0.0
        for kk in ((k,) if k == 0 else (k, -k)):
            la, mean_a, lb, mean_b = _sym_coeffs(x0, u0, u1, dt, kk)
            p = np.exp(la + (v**2 - (x1 - mean_a) ** 2) / (2.0 * dt))
            q = np.exp(lb + (v**2 - (x1 - mean_b) ** 2) / (2.0 * dt))
            ncp += p - q
            inc = max(inc, float(np.max(p, initial=0.0)), float(np.max(q, initial=0.0)))
        peak = max(peak, inc)
        if k >= 1 and inc <= 1e-16 * peak:
            break
    else:
        raise ConvergenceError("bridge image expansion did not converge")
    return np.clip(1.0 - ncp, 0.0, 1.0)


# ---------------------------------------------------------------------------
# kernels as matrices


def _kernel_matrix_upper(x_in, x_out, g0: float, g1: float, dt: float) -> np.ndarray:
    gauss = np.exp(-np.square(x_out[:, None] - x_in[None, :]) / (2.0 * dt))
    factor = -np.expm1(-2.0 * np.outer(g1 - x_out, g0 - x_in) / dt)
    return factor * gauss / math.sqrt(2.0 * math.pi * dt)


def _kernel_matrix_symmetric(x_in, x_out, u0: float, u1: float, dt: float) -> np.ndarray:
    diff = x_out[:, None] - x_in[None, :]
    ssum = x_out[:, None] + x_in[None, :]
    out = np.zeros_like(diff)
    peak = 0.0
    for k in range(0, _IMAGE_MAX + 1):
        inc = 0.0
        for kk in ((k,) if k == 0 else (k, -k)):
            la, _, lb, _ = _sym_coeffs(x_in, u0, u1, dt, kk)
            p = np.exp(la[None, :] - np.square(diff - 4.0 * kk * u0) / (2.0 * dt))
            q = np.exp(lb[None, :] - np.square(ssum - 2.0 * u0 + 4.0 * kk * u0) / (2.0 * dt))
            out += p - q
            inc = max(inc, float(p.max(initial=0.0)), float(q.max(initial=0.0)))
        peak = max(peak, inc)
        if k >= 1 and inc <= 1e-16 * peak:
            break
    else:
        raise ConvergenceError("kernel image expansion did not converge")
    return out / math.sqrt(2.0 * math.pi * dt)


# ---------------------------------------------------------------------------
# state construction and propagation


def _empty_state(t: float) -> SubDensity:
    z = np.empty(0)
    return SubDensity(time=t, nodes=z, weights=z, values=z)


def initial_subdensity(
    g0: float, g1: float, t1: float, side: BoundarySide, cfg: QuadratureConfig
) -> SubDensity:
    """Absorbed density at the first knot for a linear first segment g0 -> g1."""
    if g0 <= 0.0:
        raise ValueError("boundary must start strictly above the origin")
    window = _alive_interval(side, g1, t1, cfg)
    if window is None:
        return _empty_state(t1)
    lo, hi = window
    x, w = _nodes_weights(
        lo, hi, t1, cfg,
        grade_lo=side is BoundarySide.SYMMETRIC and lo == -g1,
        grade_hi=hi == g1,
    )
    if side is BoundarySide.UPPER_ONLY:
        vals = _kernel_matrix_upper(np.zeros(1), x, g0, g1, t1)[:, 0]
    else:
        vals = _kernel_matrix_symmetric(np.zeros(1), x, g0, g1, t1)[:, 0]
    return SubDensity(time=t1, nodes=x, weights=w, values=vals)


def propagated_subdensity(
    state: SubDensity,
    g0: float,
    g1: float,
    dt: float,
    side: BoundarySide,
    cfg: QuadratureConfig,
) -> SubDensity:
    """Push the absorbed density across one block with boundary values
    g0 at the state's knot and g1 at the next one."""
    t1 = state.time + dt
    if state.nodes.size == 0:
        return _empty_state(t1)
    window = _alive_interval(side, g1, t1, cfg)
    if window is None:
        return _empty_state(t1)
    lo, hi = window
    x, w = _nodes_weights(
        lo, hi, dt, cfg, grade_lo=side is BoundarySide.SYMMETRIC and lo == -g1, grade_hi=hi == g1
    )
    if side is BoundarySide.UPPER_ONLY:
        kern = _kernel_matrix_upper(state.nodes, x, g0, g1, dt)
    else:
        kern = _kernel_matrix_symmetric(state.nodes, x, g0, g1, dt)
    vals = kern @ (state.weights * state.values)
    out = SubDensity(time=t1, nodes=x, weights=w, values=vals)
    if out.survival > state.survival + _SURVIVAL_SLACK:
        raise NumericalConsistencyError(
            f"survival increased across block ending at t={t1:g}: "
            f"{state.survival:.17g} -> {out.survival:.17g}"
        )
    return out


def init_subdensity(b: PiecewiseLinearBoundary, cfg: QuadratureConfig) -> SubDensity:
    """Absorbed density at the first knot of the boundary's grid."""
    t1 = b.grid.knot(1)
    return initial_subdensity(float(b.knot_values[0]), float(b.knot_values[1]), t1, b.side, cfg)


def propagate_subdensity(
    p: SubDensity, b: PiecewiseLinearBoundary, cfg: QuadratureConfig
) -> SubDensity:
    """Advance the state from its knot to the next one along ``b``."""
    dt = b.grid.block_width
    m = int(round(p.time / dt))
    if not math.isclose(p.time, m * dt, rel_tol=0.0, abs_tol=1e-12 * b.grid.horizon):
        raise ValueError(f"state time {p.time} is not a knot of the boundary grid")
    if not 1 <= m <= b.grid.blocks - 1:
        raise ValueError(f"no block starts at knot {m}")
    return propagated_subdensity(
        p, float(b.knot_values[m]), float(b.knot_values[m + 1]), dt, b.side, cfg
    )


def _state_at(b: PiecewiseLinearBoundary, m: int, cfg: QuadratureConfig) -> SubDensity:
    state = init_subdensity(b, cfg)
    for _ in range(m - 1):
        state = propagate_subdensity(state, b, cfg)
    return state


def survival_probability(b: PiecewiseLinearBoundary, m: int, cfg: QuadratureConfig) -> float:
    """P(no crossing through knot m), by m-1 propagations from the first knot."""
    if not 1 <= m <= b.grid.blocks:
        raise ValueError(f"knot index {m} outside 1..{b.grid.blocks}")
    return _state_at(b, m, cfg).survival


def crossing_mass(
    state: SubDensity, g0: float, g1: float, dt: float, side: BoundarySide
) -> float:
    """Probability of crossing during one block with endpoint boundary values
    g0 -> g1, given the absorbed state at the block start.

    Evaluated as a weighted sum of per-node crossing probabilities, which
    keeps tiny masses accurate in relative terms.
    """
    if state.nodes.size == 0:
        return 0.0
    if side is BoundarySide.UPPER_ONLY:
        c = block_crossing_upper(state.nodes, g0, g1, dt)
    else:
        c = block_crossing_symmetric(state.nodes, g0, g1, dt)
    value = float((state.weights * state.values) @ c)
    if value < -_SURVIVAL_SLACK:
        raise NumericalConsistencyError(f"negative block crossing probability {value:g}")
    return min(max(value, 0.0), state.survival)


def block_crossing_probability(
    b: PiecewiseLinearBoundary,
    a: float,
    m: int,
    cfg: QuadratureConfig,
    state: SubDensity | None = None,
) -> float:
    """Probability that the first crossing happens in block m when the
    boundary continues from its value at knot m with slope ``a``.

    ``state`` may supply the absorbed density at knot m (it is recomputed
    from scratch otherwise); the candidate segment never mutates ``b``.
    """
    if not 1 <= m <= b.grid.blocks - 1:
        raise ValueError(f"block index {m} outside 1..{b.grid.blocks - 1}")
    dt = b.grid.block_width
    if state is None:
        state = _state_at(b, m, cfg)
    elif not math.isclose(state.time, m * dt, rel_tol=0.0, abs_tol=1e-12 * b.grid.horizon):
        raise ValueError("state does not sit at the requested knot")
    g0 = float(b.knot_values[m])
    return crossing_mass(state, g0, g0 + a * dt, dt, b.side)


@dataclass(frozen=True)
class FptTable:
    """Hitting-time distribution on the grid knots.

    ``cdf[m]`` is P(T <= t_m); ``block_masses[m]`` is the probability
    assigned to the block ending at t_m (0 for m = 0); the block-average
    density is the mass divided by the block width.
    """

    times: np.ndarray
    cdf: np.ndarray
    block_masses: np.ndarray
    avg_density: np.ndarray

    @property
    def final_survival(self) -> float:
        return 1.0 - float(self.cdf[-1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cdf", "block_mass", "avg_density"])
            for row in zip(self.times, self.cdf, self.block_masses, self.avg_density):
                w.writerow(["%.17g" % v for v in row])


def fpt_distribution_table(b: PiecewiseLinearBoundary, cfg: QuadratureConfig) -> FptTable:
    """Tabulate cdf, block masses and block-average densities at all knots."""
    blocks = b.grid.blocks
    dt = b.grid.block_width
    survivals = np.empty(blocks + 1)
    survivals[0] = 1.0
    state = init_subdensity(b, cfg)
    survivals[1] = state.survival
    for m in range(1, blocks):
        state = propagate_subdensity(state, b, cfg)
        survivals[m + 1] = state.survival
    masses = np.concatenate([[0.0], np.maximum(-np.diff(survivals), 0.0)])
    return FptTable(
        times=b.grid.knots.copy(),
        cdf=1.0 - survivals,
        block_masses=masses,
        avg_density=masses / dt,
    )


def residual_fgkey(
    b: PiecewiseLinearBoundary, d: TargetDistribution, m: int, cfg: QuadratureConfig
) -> float:
    """Block-averaged defect between the boundary's realized crossing density
    and the target density on block m (near zero for a solved boundary)."""
    if not 0 <= m <= b.grid.blocks - 1:
        raise ValueError(f"block index {m} outside 0..{b.grid.blocks - 1}")
    dt = b.grid.block_width
    if m == 0:
        realized = 1.0 - init_subdensity(b, cfg).survival
    else:
        state = _state_at(b, m, cfg)
        realized = block_crossing_probability(b, float(b.slopes[m]), m, cfg, state=state)
    target = block_mass(d, m * dt, (m + 1) * dt)
    return (realized - target) / dt
