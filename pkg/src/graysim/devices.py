"""Device models: residual contributions, Jacobian stamps, and data sweeps.

Each device contributes static currents (leaving its nodes), capacitance on
grounded nodes, and equations for its private internal variables. The same
evaluation serves three roles: physics inside the solver, ground truth for
training datasets, and the independent reference every trained macromodel is
checked against.

Two unit conventions exist. "si" circuits carry one real unknown per node
(volts, amps). "perunit" grids carry a rectangular voltage pair per node
(v_r, v_i) and complex currents, with shunt capacitors/inductors following
the quasi-stationary envelope form i = c*dV/dt + jcV (so their steady state
is the familiar susceptance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .errors import (
    DimensionMismatchError,
    OverflowGuardError,
    VoltageCollapseError,
)

GROUND = "0"

# Exponent cap for the diode law; past this the operating point is garbage
# and NaNs would otherwise leak into the Newton iteration.
DIODE_EXP_GUARD = 60.0


@dataclass(frozen=True)
class Diode:
    """Shockley diode, I = i_sat*(exp(V/v_thermal) - 1)."""

    name: str = ""
    nodes: tuple[str, str] = (GROUND, GROUND)
    i_sat: float = 1e-12
    v_thermal: float = 0.025

    def __post_init__(self):
        if self.i_sat <= 0 or self.v_thermal <= 0:
            raise ValueError("diode needs i_sat > 0 and v_thermal > 0")

    input_names = ("v",)
    output_names = ("i",)
    conventions = ("si",)

    def physics_fn(self, x):
        i, _ = diode_eval(self, float(x[0]))
        return np.array([i])

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        a, b = self.nodes
        v = ctx.v(a) - ctx.v(b)
        i, di = diode_eval(self, v)
        derivs = [(ctx.col_v(a), di), (ctx.col_v(b), -di)]
        ctx.add_current(a, i, derivs)
        ctx.add_current(b, -i, [(c, -d) for c, d in derivs])


def diode_eval(d: Diode, v: float) -> tuple[float, float]:
    """Current and conductance at bias v. Guards the exponent at 60."""
    ratio = v / d.v_thermal
    if ratio > DIODE_EXP_GUARD:
        raise OverflowGuardError(
            f"diode exponent {ratio:.1f} exceeds guard {DIODE_EXP_GUARD:g} (v={v:g})"
        )
    e = math.exp(ratio)
    return d.i_sat * (e - 1.0), d.i_sat / d.v_thermal * e


@dataclass(frozen=True)
class Mosfet:
    """Square-law NMOS with channel-length modulation, forward region only."""

    name: str = ""
    nodes: tuple[str, str, str] = (GROUND, GROUND, GROUND)  # drain, gate, source
    k: float = 2e-4
    v_th: float = 0.4
    lam: float = 0.0

    def __post_init__(self):
        if self.k <= 0 or self.lam < 0:
            raise ValueError("mosfet needs k > 0 and lambda >= 0")

    input_names = ("v_gs", "v_ds")
    output_names = ("i_ds",)
    conventions = ("si",)

    def physics_fn(self, x):
        i, _, _ = mosfet_eval(self, float(x[0]), float(x[1]))
        return np.array([i])

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        d, g, s = self.nodes
        vgs = ctx.v(g) - ctx.v(s)
        vds = ctx.v(d) - ctx.v(s)
        i, dgs, dds = mosfet_eval(self, vgs, vds)
        derivs = [
            (ctx.col_v(d), dds),
            (ctx.col_v(g), dgs),
            (ctx.col_v(s), -(dgs + dds)),
        ]
        ctx.add_current(d, i, derivs)
        ctx.add_current(s, -i, [(c, -dv) for c, dv in derivs])


def mosfet_eval(m: Mosfet, v_gs: float, v_ds: float) -> tuple[float, float, float]:
    """(i_ds, di/dv_gs, di/dv_ds); continuous across region boundaries."""
    if v_ds < 0:
        raise ValueError(f"forward region only (v_ds={v_ds:g} < 0)")
    v_ov = v_gs - m.v_th
    if v_ov <= 0.0:
        return 0.0, 0.0, 0.0
    clm = 1.0 + m.lam * v_ds
    if v_ds < v_ov:  # triode
        core = v_ov * v_ds - 0.5 * v_ds * v_ds
        i = m.k * core * clm
        di_dvgs = m.k * v_ds * clm
        di_dvds = m.k * (v_ov - v_ds) * clm + m.k * core * m.lam
    else:  # saturation
        i = 0.5 * m.k * v_ov * v_ov * clm
        di_dvgs = m.k * v_ov * clm
        di_dvds = 0.5 * m.k * v_ov * v_ov * m.lam
    return i, di_dvgs, di_dvds


@dataclass(frozen=True)
class Resistor:
    name: str
    nodes: tuple[str, str]
    resistance: float

    def __post_init__(self):
        if self.resistance <= 0:
            raise ValueError("resistance must be positive")

    conventions = ("si", "perunit")

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        a, b = self.nodes
        g = 1.0 / self.resistance
        if ctx.convention == "si":
            i = g * (ctx.v(a) - ctx.v(b))
            derivs = [(ctx.col_v(a), g), (ctx.col_v(b), -g)]
            ctx.add_current(a, i, derivs)
            ctx.add_current(b, -i, [(c, -d) for c, d in derivs])
        else:
            var, vai = ctx.v_ri(a)
            vbr, vbi = ctx.v_ri(b)
            car, cai = ctx.col_v_ri(a)
            cbr, cbi = ctx.col_v_ri(b)
            ir, ii = g * (var - vbr), g * (vai - vbi)
            ctx.add_current_ri(a, ir, ii,
                               [(car, g), (cbr, -g)], [(cai, g), (cbi, -g)])
            ctx.add_current_ri(b, -ir, -ii,
                               [(car, -g), (cbr, g)], [(cai, -g), (cbi, g)])


@dataclass(frozen=True)
class Capacitor:
    """Grounded shunt capacitor. Gives its node differential character in
    transient runs; in per-unit steady state it acts as the susceptance jc."""

    name: str
    nodes: tuple[str, str]
    capacitance: float

    def __post_init__(self):
        if self.capacitance <= 0:
            raise ValueError("capacitance must be positive")

    conventions = ("si", "perunit")

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        a, _ = self.nodes
        c = self.capacitance
        ctx.add_cap(a, c)
        if ctx.convention == "perunit":
            # envelope form: static part of i = c*dV/dt + jcV
            var, vai = ctx.v_ri(a)
            car, cai = ctx.col_v_ri(a)
            ctx.add_current_ri(a, -c * vai, c * var, [(cai, -c)], [(car, c)])


@dataclass(frozen=True)
class Inductor:
    """Branch inductor; its current is a private differential state."""

    name: str
    nodes: tuple[str, str]
    inductance: float

    def __post_init__(self):
        if self.inductance <= 0:
            raise ValueError("inductance must be positive")

    conventions = ("si", "perunit")

    def internal_vars(self, convention):
        if convention == "si":
            return [("i", True)]
        return [("ir", True), ("ii", True)]

    def stamp(self, ctx):
        a, b = self.nodes
        linv = 1.0 / self.inductance
        if ctx.convention == "si":
            il = ctx.x(0)
            # di/dt = (va - vb)/L
            ctx.set_internal(0, linv * (ctx.v(a) - ctx.v(b)),
                             [(ctx.col_v(a), linv), (ctx.col_v(b), -linv)])
            ctx.add_current(a, il, [(ctx.col_x(0), 1.0)])
            ctx.add_current(b, -il, [(ctx.col_x(0), -1.0)])
        else:
            ir, ii = ctx.x(0), ctx.x(1)
            var, vai = ctx.v_ri(a)
            vbr, vbi = ctx.v_ri(b)
            car, cai = ctx.col_v_ri(a)
            cbr, cbi = ctx.col_v_ri(b)
            # envelope form: l di/dt = v - j l i
            ctx.set_internal(0, linv * (var - vbr) + ii,
                             [(car, linv), (cbr, -linv), (ctx.col_x(1), 1.0)])
            ctx.set_internal(1, linv * (vai - vbi) - ir,
                             [(cai, linv), (cbi, -linv), (ctx.col_x(0), -1.0)])
            ctx.add_current_ri(a, ir, ii, [(ctx.col_x(0), 1.0)], [(ctx.col_x(1), 1.0)])
            ctx.add_current_ri(b, -ir, -ii,
                               [(ctx.col_x(0), -1.0)], [(ctx.col_x(1), -1.0)])


@dataclass(frozen=True)
class VSource:
    """Ideal voltage source; branch current is a private algebraic unknown.

    The branch current is measured flowing from the positive node through
    the source (so a source feeding a load carries negative current). With
    u_index set, the real/SI value follows the exogenous schedule.
    """

    name: str
    nodes: tuple[str, str]
    voltage: float
    v_imag: float = 0.0
    u_index: int | None = None

    conventions = ("si", "perunit")

    def _value(self, ctx):
        if self.u_index is not None:
            return ctx.u_val(self.u_index)
        return self.voltage

    def internal_vars(self, convention):
        if convention == "si":
            return [("i", False)]
        return [("ir", False), ("ii", False)]

    def stamp(self, ctx):
        a, b = self.nodes
        if ctx.convention == "si":
            ibr = ctx.x(0)
            ctx.set_internal(0, ctx.v(a) - ctx.v(b) - self._value(ctx),
                             [(ctx.col_v(a), 1.0), (ctx.col_v(b), -1.0)])
            ctx.add_current(a, ibr, [(ctx.col_x(0), 1.0)])
            ctx.add_current(b, -ibr, [(ctx.col_x(0), -1.0)])
        else:
            ir, ii = ctx.x(0), ctx.x(1)
            var, vai = ctx.v_ri(a)
            vbr, vbi = ctx.v_ri(b)
            car, cai = ctx.col_v_ri(a)
            cbr, cbi = ctx.col_v_ri(b)
            ctx.set_internal(0, var - vbr - self._value(ctx),
                             [(car, 1.0), (cbr, -1.0)])
            ctx.set_internal(1, vai - vbi - self.v_imag,
                             [(cai, 1.0), (cbi, -1.0)])
            ctx.add_current_ri(a, ir, ii, [(ctx.col_x(0), 1.0)], [(ctx.col_x(1), 1.0)])
            ctx.add_current_ri(b, -ir, -ii,
                               [(ctx.col_x(0), -1.0)], [(ctx.col_x(1), -1.0)])


@dataclass(frozen=True)
class ISource:
    """Ideal current source; positive current flows n+ -> n- through it."""

    name: str
    nodes: tuple[str, str]
    current: float
    i_imag: float = 0.0
    u_index: int | None = None

    conventions = ("si", "perunit")

    def _value(self, ctx):
        if self.u_index is not None:
            return ctx.u_val(self.u_index)
        return self.current

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        a, b = self.nodes
        if ctx.convention == "si":
            i = self._value(ctx)
            ctx.add_current(a, i, [])
            ctx.add_current(b, -i, [])
        else:
            ir, ii = self._value(ctx), self.i_imag
            ctx.add_current_ri(a, ir, ii, [], [])
            ctx.add_current_ri(b, -ir, -ii, [], [])


@dataclass(frozen=True)
class PqLoad:
    """Constant-power load, P + jQ = V I* (current drawn from its node).

    The fixed sensitivity baked into this surrogate is exactly what the
    hybrid models are compared against: at V = 1+j0 with q = 0 it predicts
    d(i_r)/d(v_r) = -p, a falling current for a rising voltage.
    """

    name: str = ""
    nodes: tuple[str] = (GROUND,)
    p: float = 0.0
    q: float = 0.0
    u_p: int | None = None
    u_q: int | None = None

    input_names = ("v_r", "v_i")
    output_names = ("i_r", "i_i")
    conventions = ("perunit",)

    def physics_fn(self, x):
        ir, ii, _ = pq_residual(self, float(x[0]), float(x[1]))
        return np.array([ir, ii])

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        (a,) = self.nodes
        vr, vi = ctx.v_ri(a)
        p = ctx.u_val(self.u_p) if self.u_p is not None else self.p
        q = ctx.u_val(self.u_q) if self.u_q is not None else self.q
        load = PqLoad(p=p, q=q)
        ir, ii, jac = pq_residual(load, vr, vi)
        cr, ci = ctx.col_v_ri(a)
        ctx.add_current_ri(a, ir, ii,
                           [(cr, jac[0, 0]), (ci, jac[0, 1])],
                           [(cr, jac[1, 0]), (ci, jac[1, 1])])


def pq_residual(load: PqLoad, v_r: float, v_i: float):
    """Current drawn by the load and its 2x2 voltage Jacobian."""
    s = v_r * v_r + v_i * v_i
    if s <= 1e-12:
        raise VoltageCollapseError(f"|V|^2 = {s:.3e} at a constant-power load")
    ir = (load.p * v_r + load.q * v_i) / s
    ii = (load.p * v_i - load.q * v_r) / s
    jac = np.array([
        [(load.p - 2.0 * v_r * ir) / s, (load.q - 2.0 * v_i * ir) / s],
        [(-load.q - 2.0 * v_r * ii) / s, (load.p - 2.0 * v_i * ii) / s],
    ])
    return ir, ii, jac


@dataclass(frozen=True)
class TransmissionNetwork:
    """Linear network between buses, I = (G + jB) V in per-unit."""

    name: str
    nodes: tuple[str, ...]
    g_matrix: np.ndarray
    b_matrix: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g_matrix, dtype=float)
        b = np.asarray(self.b_matrix, dtype=float)
        n = len(self.nodes)
        if g.shape != (n, n) or b.shape != (n, n):
            raise DimensionMismatchError(
                f"G/B must be {n}x{n} for {n} buses, got {g.shape} and {b.shape}"
            )
        object.__setattr__(self, "g_matrix", g)
        object.__setattr__(self, "b_matrix", b)

    conventions = ("perunit",)

    def internal_vars(self, convention):
        return []

    def stamp(self, ctx):
        n = len(self.nodes)
        vr = np.array([ctx.v_ri(nd)[0] for nd in self.nodes])
        vi = np.array([ctx.v_ri(nd)[1] for nd in self.nodes])
        ir = self.g_matrix @ vr - self.b_matrix @ vi
        ii = self.g_matrix @ vi + self.b_matrix @ vr
        cols = [ctx.col_v_ri(nd) for nd in self.nodes]
        for i, nd in enumerate(self.nodes):
            dr = [(cols[j][0], self.g_matrix[i, j]) for j in range(n)]
            dr += [(cols[j][1], -self.b_matrix[i, j]) for j in range(n)]
            di = [(cols[j][0], self.b_matrix[i, j]) for j in range(n)]
            di += [(cols[j][1], self.g_matrix[i, j]) for j in range(n)]
            ctx.add_current_ri(nd, ir[i], ii[i], dr, di)


MOTOR_STATE_NAMES = ("psi_ds", "psi_qs", "psi_dr", "psi_qr", "wr")


@dataclass(frozen=True)
class InductionMotorReduced:
    """Single-cage induction machine in a synchronous dq frame.

    Five states: stator and rotor flux linkages (d, q) plus rotor speed.
    The dq frame is locked to the network's rectangular frame (d = real,
    q = imag), so the stator current doubles as the bus current drawn.
    All electrical quantities per-unit; time in seconds via w_base.
    """

    name: str = ""
    nodes: tuple[str] = (GROUND,)
    r_s: float = 0.01
    r_r: float = 0.02
    l_ls: float = 0.05
    l_lr: float = 0.05
    l_m: float = 3.0
    inertia: float = 0.5      # H, seconds
    load_torque: float = 0.5  # per-unit
    w_base: float = 2.0 * math.pi * 60.0
    w_sync: float = 1.0

    def __post_init__(self):
        for val in (self.r_s, self.r_r, self.l_ls, self.l_lr, self.l_m,
                    self.inertia, self.w_base):
            if val <= 0:
                raise ValueError("motor parameters must be positive")

    input_names = ("v_r", "v_i")
    output_names = ("i_r", "i_i")
    conventions = ("perunit",)

    def physics_fn(self, x):
        state = motor_equilibrium(self, np.asarray(x, dtype=float))
        i_dq, _ = motor_currents(self, state)
        return i_dq

    def _coeffs(self):
        x_ad = 1.0 / (1.0 / self.l_m + 1.0 / self.l_ls + 1.0 / self.l_lr)
        a = (1.0 - x_ad / self.l_ls) / self.l_ls
        b = -x_ad / (self.l_ls * self.l_lr)
        c = (1.0 - x_ad / self.l_lr) / self.l_lr
        return a, b, c

    def internal_vars(self, convention):
        return [(nm, True) for nm in MOTOR_STATE_NAMES]

    def initial_internal(self, convention):
        # warm start near the flat-start terminal voltage 1 + j0; the exact
        # machine equations are polished by the Newton solve
        a, b, c = self._coeffs()
        psi_qs = -1.0 / self.w_sync
        psi_qr = psi_qs * (-b / c) if c else psi_qs
        return np.array([0.0, psi_qs, 0.0, psi_qr, 0.97 * self.w_sync])

    def stamp(self, ctx):
        (nd,) = self.nodes
        state = np.array([ctx.x(k) for k in range(5)])
        vr, vi = ctx.v_ri(nd)
        dstate, j_state, j_v = motor_derivatives(self, state, np.array([vr, vi]))
        xcols = [ctx.col_x(k) for k in range(5)]
        cr, ci = ctx.col_v_ri(nd)
        for k in range(5):
            derivs = [(xcols[j], j_state[k, j]) for j in range(5)]
            derivs += [(cr, j_v[k, 0]), (ci, j_v[k, 1])]
            ctx.set_internal(k, dstate[k], derivs)
        i_dq, j_i = motor_currents(self, state)
        ctx.add_current_ri(nd, i_dq[0], i_dq[1],
                           [(xcols[j], j_i[0, j]) for j in range(5)],
                           [(xcols[j], j_i[1, j]) for j in range(5)])


def motor_currents(m: InductionMotorReduced, state):
    """Stator current (i_d, i_q) drawn from the bus, plus d/d(state)."""
    a, b, _ = m._coeffs()
    psi_ds, psi_qs, psi_dr, psi_qr, _ = state
    i_d = a * psi_ds + b * psi_dr
    i_q = a * psi_qs + b * psi_qr
    jac = np.array([
        [a, 0.0, b, 0.0, 0.0],
        [0.0, a, 0.0, b, 0.0],
    ])
    return np.array([i_d, i_q]), jac


def motor_derivatives(m: InductionMotorReduced, state, v_dq):
    """d(state)/dt plus Jacobians w.r.t. state (5x5) and voltage (5x2)."""
    state = np.asarray(state, dtype=float)
    if state.shape != (5,):
        raise DimensionMismatchError(f"motor state must have 5 entries, got {state.shape}")
    a, b, c = m._coeffs()
    psi_ds, psi_qs, psi_dr, psi_qr, wr = state
    v_d, v_q = float(v_dq[0]), float(v_dq[1])
    wb, we = m.w_base, m.w_sync
    slip = we - wr

    i_ds = a * psi_ds + b * psi_dr
    i_qs = a * psi_qs + b * psi_qr
    i_dr = b * psi_ds + c * psi_dr
    i_qr = b * psi_qs + c * psi_qr
    te = b * (psi_ds * psi_qr - psi_qs * psi_dr)

    dstate = np.array([
        wb * (v_d - m.r_s * i_ds + we * psi_qs),
        wb * (v_q - m.r_s * i_qs - we * psi_ds),
        wb * (-m.r_r * i_dr + slip * psi_qr),
        wb * (-m.r_r * i_qr - slip * psi_dr),
        (te - m.load_torque) / (2.0 * m.inertia),
    ])
    h2 = 2.0 * m.inertia
    j_state = np.array([
        [-wb * m.r_s * a, wb * we, -wb * m.r_s * b, 0.0, 0.0],
        [-wb * we, -wb * m.r_s * a, 0.0, -wb * m.r_s * b, 0.0],
        [-wb * m.r_r * b, 0.0, -wb * m.r_r * c, wb * slip, -wb * psi_qr],
        [0.0, -wb * m.r_r * b, -wb * slip, -wb * m.r_r * c, wb * psi_dr],
        [b * psi_qr / h2, -b * psi_dr / h2, -b * psi_qs / h2, b * psi_ds / h2, 0.0],
    ])
    j_v = np.zeros((5, 2))
    j_v[0, 0] = wb
    j_v[1, 1] = wb
    return dstate, j_state, j_v


def motor_equilibrium(m: InductionMotorReduced, v_dq, tol=1e-12, max_iter=60):
    """Solve d(state)/dt = 0 at a fixed terminal voltage (local Newton)."""
    state = m.initial_internal("perunit")
    best = state
    for _ in range(max_iter):
        f, j, _ = motor_derivatives(m, state, v_dq)
        if float(np.max(np.abs(f))) <= tol:
            return state
        delta = np.linalg.solve(j, -f)
        # backtrack a little if the full step overshoots
        norm0 = float(np.max(np.abs(f)))
        step = 1.0
        for _ in range(6):
            trial = state + step * delta
            ft, _, _ = motor_derivatives(m, trial, v_dq)
            if float(np.max(np.abs(ft))) < norm0:
                break
            step *= 0.5
        state = state + step * delta
        best = state
    f, _, _ = motor_derivatives(m, best, v_dq)
    if float(np.max(np.abs(f))) > 1e-6:
        raise RuntimeError(
            f"motor equilibrium did not converge at v={v_dq} "
            f"(residual {float(np.max(np.abs(f))):.2e})"
        )
    return best


@dataclass
class NeuralDevice:
    """Trained macromodel bound into the system as a current injection.

    Input layout tokens, in order: "v" (terminal voltage: one value in SI,
    the v_r/v_i pair in per-unit), "u<k>" (exogenous schedule entry k), and
    "hist" (the device's own outputs from the previous accepted time step).
    Outputs are the current drawn: one branch current between the two nodes
    in SI, the (i_r, i_i) pair at the single node in per-unit.
    """

    name: str
    nodes: tuple[str, ...]
    model: neural.Mlp
    input_tokens: tuple[str, ...] = ("v",)
    model_path: str = ""

    conventions = ("si", "perunit")

    @property
    def has_history(self) -> bool:
        return "hist" in self.input_tokens

    def internal_vars(self, convention):
        return []

    def input_width(self, convention) -> int:
        width = 0
        for tok in self.input_tokens:
            if tok == "v":
                width += 1 if convention == "si" else 2
            elif tok == "hist":
                width += self.model.output_dim
            else:
                width += 1
        return width

    def output_width(self, convention) -> int:
        return 1 if convention == "si" else 2

    def _inputs(self, ctx):
        """Input vector; per "v" slot the z-columns it differentiates to;
        positions of the history slots within the vector."""
        vals: list[float] = []
        vcols: list[tuple[int, list[tuple[int | None, float]]]] = []
        hist_pos: list[int] = []
        for tok in self.input_tokens:
            if tok == "v":
                if ctx.convention == "si":
                    a, b = self.nodes
                    vals.append(ctx.v(a) - ctx.v(b))
                    vcols.append((len(vals) - 1,
                                  [(ctx.col_v(a), 1.0), (ctx.col_v(b), -1.0)]))
                else:
                    (a,) = self.nodes
                    vr, vi = ctx.v_ri(a)
                    cr, ci = ctx.col_v_ri(a)
                    vals.append(vr)
                    vcols.append((len(vals) - 1, [(cr, 1.0)]))
                    vals.append(vi)
                    vcols.append((len(vals) - 1, [(ci, 1.0)]))
            elif tok == "hist":
                h = ctx.hist()
                hist_pos.extend(range(len(vals), len(vals) + len(h)))
                vals.extend(h)
            elif tok.startswith("u"):
                vals.append(ctx.u_val(int(tok[1:])))
            else:
                raise ValueError(f"unknown input token {tok!r}")
        return np.array(vals), vcols, hist_pos

    def _solve_self_consistent(self, vals, hist_pos):
        """Steady state of the one-step map: h = model(..., h).

        Newton on r(h) = model(vals with h) - h, warm-started from the
        history prior already sitting in vals. Returns the solved input
        vector and the map Jacobian at the solution.
        """
        vals = vals.copy()
        pos = np.asarray(hist_pos, dtype=int)
        h = vals[pos]
        norm = None
        for _ in range(60):
            vals[pos] = h
            out = neural.forward(self.model, vals)
            r = out - h
            norm = float(np.max(np.abs(r)))
            if not math.isfinite(norm):
                raise RuntimeError(
                    f"macromodel '{self.name}' left its domain while solving "
                    f"the steady-state history"
                )
            if norm <= 1e-12:
                break
            jac = neural.input_jacobian(self.model, vals)
            m = jac[:, pos] - np.eye(len(pos))
            dh = np.linalg.solve(m, -r)
            step = 1.0
            for _ in range(8):
                vals[pos] = h + step * dh
                trial = float(np.max(np.abs(
                    neural.forward(self.model, vals) - vals[pos])))
                if math.isfinite(trial) and trial < norm:
                    break
                step *= 0.5
            h = h + step * dh
        vals[pos] = h
        if norm is not None and norm > 1e-8:
            raise RuntimeError(
                f"macromodel '{self.name}' steady-state history did not "
                f"converge (residual {norm:.2e})"
            )
        return vals, neural.input_jacobian(self.model, vals)

    def outputs(self, ctx) -> np.ndarray:
        vals, _, hist_pos = self._inputs(ctx)
        if ctx.self_consistent_history and hist_pos:
            vals, _ = self._solve_self_consistent(vals, hist_pos)
            return vals[np.asarray(hist_pos, dtype=int)].copy()
        return neural.forward(self.model, vals)

    def stamp(self, ctx):
        vals, vcols, hist_pos = self._inputs(ctx)
        if ctx.self_consistent_history and hist_pos:
            # steady state: history slots equal the outputs, so the voltage
            # sensitivity is the implicit-function total derivative
            vals, jac_raw = self._solve_self_consistent(vals, hist_pos)
            out = vals[np.asarray(hist_pos, dtype=int)].copy()
            if ctx.with_jacobian:
                a = jac_raw[:, hist_pos]
                jac = np.linalg.solve(np.eye(len(hist_pos)) - a, jac_raw)
                jac[:, hist_pos] = 0.0
            else:
                jac = None
        else:
            out = neural.forward(self.model, vals)
            jac = neural.input_jacobian(self.model, vals) if ctx.with_jacobian else None

        def derivs(row):
            if jac is None:
                return []
            d = []
            for j, cols in vcols:
                d.extend((col, w * jac[row, j]) for col, w in cols)
            return d

        if ctx.convention == "si":
            a, b = self.nodes
            ctx.add_current(a, out[0], derivs(0))
            ctx.add_current(b, -out[0], [(c, -d) for c, d in derivs(0)])
        else:
            (a,) = self.nodes
            ctx.add_current_ri(a, out[0], out[1], derivs(0), derivs(1))


def sweep_dataset(device, ranges, n_samples, seed=None, grid=True) -> neural.Dataset:
    """Sample device inputs over rectangular ranges with exact physics outputs.

    grid=True lays an even lattice including both endpoints (n_samples may be
    an int or a per-axis tuple); grid=False draws n_samples points uniformly
    with the given seed. Deterministic either way for a fixed seed.
    """
    ranges = [(float(lo), float(hi)) for lo, hi in ranges]
    dim = len(ranges)
    if dim != len(device.input_names):
        raise DimensionMismatchError(
            f"{device.__class__.__name__} expects {len(device.input_names)} "
            f"input ranges, got {dim}"
        )
    if grid:
        if isinstance(n_samples, int):
            shape = (n_samples,) * dim
        else:
            shape = tuple(int(k) for k in n_samples)
            if len(shape) != dim:
                raise DimensionMismatchError("grid shape rank != number of ranges")
        axes = [np.linspace(lo, hi, k) for (lo, hi), k in zip(ranges, shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        inputs = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        total = int(np.prod(n_samples)) if not isinstance(n_samples, int) else n_samples
        inputs = np.column_stack([
            rng.uniform(lo, hi, size=total) for lo, hi in ranges
        ])
    targets = np.array([device.physics_fn(row) for row in inputs])
    return neural.Dataset(inputs, targets)
