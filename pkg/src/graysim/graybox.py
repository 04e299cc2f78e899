"""System model: partition into subsystems and assemble residual + Jacobian.

The global unknown vector is z = [x; y]: first every subsystem's private
internal variables (in registration order), then one boundary slot per node
(SI) or a v_r/v_i pair per node (per-unit). Residual rows follow the same
order: internal equations first, then one current-balance row per boundary
slot. A converged solution therefore satisfies the current law at every
node by construction, no matter which devices are physics and which are
trained macromodels.

Two assemblies exist. The algebraic one evaluates equilibrium equations
(state derivatives equal zero, constraints hold, currents balance). The
trapezoidal one forms the implicit one-step residual

    x(t+dt) - x(t) - dt/2 * [f(t+dt) + f(t)]

for every differential row, keeping the previous step's evaluations (the
physics rates and the macromodel outputs alike) cached in TransientState so
each accepted step costs one extra evaluation, not two per iteration.
Boundary rows are differential when the node carries shunt capacitance and
plain algebraic constraints otherwise, so stiff sources and resistive nodes
coexist with the integrated states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .devices import GROUND, Capacitor, NeuralDevice
from .errors import (
    BuildError,
    DeviceError,
    DimensionMismatchError,
    ModelDimMismatchError,
    NotSquareError,
)

SI = "si"
PERUNIT = "perunit"


@dataclass(frozen=True)
class Analysis:
    kind: str = "dc"  # "dc" or "tran"
    dt: float = 0.0
    t_end: float = 0.0


@dataclass
class Subsystem:
    id: str
    kind: str  # "physics" or "neural"
    device: object
    internal_slots: list[int]
    differential: list[bool]


class GrayBoxSystem:
    """Partitioned system over a fixed node set and device list."""

    def __init__(self, convention, nodes, devices, analysis=Analysis(), u_size=None):
        if convention not in (SI, PERUNIT):
            raise BuildError(f"unknown unit convention {convention!r}")
        self.convention = convention
        self.nodes = list(nodes)
        if GROUND in self.nodes:
            raise BuildError("the ground node '0' is implicit; do not declare it")
        if len(set(self.nodes)) != len(self.nodes):
            raise BuildError("duplicate node names")
        self.analysis = analysis
        self.slots_per_node = 1 if convention == SI else 2
        self._node_slot = {n: i * self.slots_per_node for i, n in enumerate(self.nodes)}

        self.subsystems: list[Subsystem] = []
        self._internal_names: list[str] = []
        self._internal_diff: list[bool] = []
        referenced = {n: 0 for n in self.nodes}
        names_seen = set()
        max_u = -1
        for dev in devices:
            if self.convention not in dev.conventions:
                raise BuildError(
                    f"device '{dev.name}' ({dev.__class__.__name__}) does not "
                    f"support the {self.convention} convention"
                )
            if dev.name in names_seen:
                raise BuildError(f"duplicate device name '{dev.name}'")
            names_seen.add(dev.name)
            for nd in dev.nodes:
                if nd == GROUND:
                    continue
                if nd not in self._node_slot:
                    raise BuildError(f"device '{dev.name}' references unknown node '{nd}'")
                referenced[nd] += 1
            if isinstance(dev, Capacitor) and dev.nodes[1] != GROUND:
                raise BuildError(
                    f"capacitor '{dev.name}' must be grounded (shunt only)"
                )
            if isinstance(dev, NeuralDevice):
                want = 2 if self.convention == SI else 1
                if len(dev.nodes) != want:
                    raise BuildError(
                        f"nndevice '{dev.name}' needs {want} node(s) in "
                        f"{self.convention} netlists"
                    )
                if dev.input_width(self.convention) != dev.model.input_dim:
                    raise ModelDimMismatchError(
                        f"nndevice '{dev.name}': layout {dev.input_tokens} expands to "
                        f"{dev.input_width(self.convention)} inputs but the model "
                        f"takes {dev.model.input_dim}"
                    )
                if dev.output_width(self.convention) != dev.model.output_dim:
                    raise ModelDimMismatchError(
                        f"nndevice '{dev.name}': model emits {dev.model.output_dim} "
                        f"outputs but {dev.output_width(self.convention)} currents "
                        f"are needed here"
                    )
            max_u = max(max_u, _max_u_index(dev))

            slots = []
            diff_flags = []
            for var_name, is_diff in dev.internal_vars(self.convention):
                slots.append(len(self._internal_names))
                self._internal_names.append(f"{dev.name}.{var_name}")
                self._internal_diff.append(is_diff)
                diff_flags.append(is_diff)
            kind = "neural" if isinstance(dev, NeuralDevice) else "physics"
            self.subsystems.append(Subsystem(dev.name, kind, dev, slots, diff_flags))

        self.n_internal = len(self._internal_names)
        self.n_boundary = len(self.nodes) * self.slots_per_node
        self.n_total = self.n_internal + self.n_boundary
        self.required_u = max_u + 1
        if u_size is not None and u_size < self.required_u:
            raise BuildError(
                f"devices reference u[{self.required_u - 1}] but the schedule "
                f"provides only {u_size} entries"
            )
        self.internal_differential = np.array(self._internal_diff, dtype=bool)

        unreferenced = [n for n, c in referenced.items() if c == 0]
        if unreferenced:
            lines = [
                f"system is not structurally square: node(s) {unreferenced} have "
                f"current-balance equations but no device references them"
            ]
            for sub in self.subsystems:
                lines.append(
                    f"  subsystem '{sub.id}': {len(sub.internal_slots)} internal "
                    f"unknown(s), nodes {list(sub.device.nodes)}"
                )
            raise NotSquareError("\n".join(lines))

    # -- naming and indexing -------------------------------------------------

    def node_slot(self, node: str) -> int | None:
        if node == GROUND:
            return None
        return self._node_slot[node]

    def variable_names(self) -> list[str]:
        names = list(self._internal_names)
        for n in self.nodes:
            if self.convention == SI:
                names.append(f"v({n})")
            else:
                names.append(f"vr({n})")
                names.append(f"vi({n})")
        return names

    def internal_index(self, device_name: str, var_name: str) -> int:
        return self._internal_names.index(f"{device_name}.{var_name}")

    def subsystem(self, device_name: str) -> Subsystem:
        for sub in self.subsystems:
            if sub.id == device_name:
                return sub
        raise KeyError(device_name)

    def flat_start(self) -> np.ndarray:
        """Default initial iterate: 1+j0 pu at grid nodes, zero elsewhere,
        with device-supplied warm starts for machine states."""
        z = np.zeros(self.n_total)
        if self.convention == PERUNIT:
            z[self.n_internal::2] = 1.0
        for sub in self.subsystems:
            init = getattr(sub.device, "initial_internal", None)
            if init is not None and sub.internal_slots:
                z[sub.internal_slots] = init(self.convention)
        return z

    def has_history_devices(self) -> bool:
        return any(
            sub.kind == "neural" and sub.device.has_history for sub in self.subsystems
        )

    def _check_z_u(self, z, u):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_total,):
            raise DimensionMismatchError(
                f"z has shape {z.shape}, system needs ({self.n_total},)"
            )
        u = np.asarray([] if u is None else u, dtype=float)
        if u.size < self.required_u:
            raise DimensionMismatchError(
                f"u has {u.size} entries but devices reference u[{self.required_u - 1}]"
            )
        return z, u


def _max_u_index(dev) -> int:
    refs = [getattr(dev, "u_index", None), getattr(dev, "u_p", None),
            getattr(dev, "u_q", None)]
    out = max((r for r in refs if r is not None), default=-1)
    if isinstance(dev, NeuralDevice):
        for tok in dev.input_tokens:
            if tok.startswith("u") and tok != "u":
                out = max(out, int(tok[1:]))
    return out


class _Stamp:
    """Accumulator for one assembly pass."""

    def __init__(self, sys: GrayBoxSystem, with_jacobian: bool):
        self.f = np.zeros(sys.n_internal)
        self.i_static = np.zeros(sys.n_boundary)
        self.cap = np.zeros(sys.n_boundary)
        self.jf = np.zeros((sys.n_internal, sys.n_total)) if with_jacobian else None
        self.ji = np.zeros((sys.n_boundary, sys.n_total)) if with_jacobian else None
        self.neural_outputs: dict[str, np.ndarray] = {}


class _DeviceView:
    """Resolved read/write interface handed to one device's stamp()."""

    def __init__(self, sys, sub, z, u, stamp, hist, self_consistent=False):
        self._sys = sys
        self._sub = sub
        self._z = z
        self._u = u
        self._stamp = stamp
        self._hist = hist
        self.convention = sys.convention
        self.with_jacobian = stamp.jf is not None
        self.self_consistent_history = self_consistent

    # reads
    def v(self, node):
        s = self._sys.node_slot(node)
        return 0.0 if s is None else self._z[self._sys.n_internal + s]

    def v_ri(self, node):
        s = self._sys.node_slot(node)
        if s is None:
            return 0.0, 0.0
        base = self._sys.n_internal + s
        return self._z[base], self._z[base + 1]

    def x(self, k):
        return self._z[self._sub.internal_slots[k]]

    def u_val(self, idx):
        return float(self._u[idx])

    def hist(self):
        h = self._hist.get(self._sub.id)
        if h is None:
            # the model's output offset is its mean training output: the
            # sanest prior when no previous step exists yet
            return self._sub.device.model.output_offset.copy()
        return h

    # z-column indices (None for ground)
    def col_v(self, node):
        s = self._sys.node_slot(node)
        return None if s is None else self._sys.n_internal + s

    def col_v_ri(self, node):
        s = self._sys.node_slot(node)
        if s is None:
            return None, None
        base = self._sys.n_internal + s
        return base, base + 1

    def col_x(self, k):
        return self._sub.internal_slots[k]

    # writes
    def set_internal(self, k, value, derivs):
        row = self._sub.internal_slots[k]
        self._stamp.f[row] += value
        if self._stamp.jf is not None:
            for col, d in derivs:
                if col is not None:
                    self._stamp.jf[row, col] += d

    def _boundary_row(self, node):
        s = self._sys.node_slot(node)
        return s

    def add_current(self, node, value, derivs):
        row = self._boundary_row(node)
        if row is None:
            return
        self._stamp.i_static[row] += value
        if self._stamp.ji is not None:
            for col, d in derivs:
                if col is not None:
                    self._stamp.ji[row, col] += d

    def add_current_ri(self, node, val_r, val_i, derivs_r, derivs_i):
        row = self._boundary_row(node)
        if row is None:
            return
        self._stamp.i_static[row] += val_r
        self._stamp.i_static[row + 1] += val_i
        if self._stamp.ji is not None:
            for col, d in derivs_r:
                if col is not None:
                    self._stamp.ji[row, col] += d
            for col, d in derivs_i:
                if col is not None:
                    self._stamp.ji[row + 1, col] += d

    def add_cap(self, node, c):
        row = self._boundary_row(node)
        if row is None:
            return
        self._stamp.cap[row] += c
        if self.convention == PERUNIT:
            self._stamp.cap[row + 1] += c


def _run_stamps(sys: GrayBoxSystem, z, u, hist, with_jacobian,
                self_consistent=False) -> _Stamp:
    stamp = _Stamp(sys, with_jacobian)
    hist = hist or {}
    for sub in sys.subsystems:
        view = _DeviceView(sys, sub, z, u, stamp, hist, self_consistent)
        try:
            sub.device.stamp(view)
            if sub.kind == "neural":
                stamp.neural_outputs[sub.id] = sub.device.outputs(view)
        except DeviceError:
            raise
        except Exception as exc:
            raise DeviceError(sub.id, exc) from exc
    return stamp


def assemble_algebraic(sys: GrayBoxSystem, z, u=None, hist=None, with_jacobian=True,
                       self_consistent_history=False):
    """Steady-state residual and Jacobian at iterate z.

    Internal rows hold each device's equilibrium equations (rates of change
    for differential states, constraints otherwise); boundary rows hold the
    nodal current balance including every macromodel's predicted injection.
    With self_consistent_history=True, history-fed macromodels replace their
    lagged inputs by the steady state of their own one-step map.
    """
    z, u = sys._check_z_u(z, u)
    st = _run_stamps(sys, z, u, hist, with_jacobian,
                     self_consistent=self_consistent_history)
    residual = np.concatenate([st.f, st.i_static])
    if not with_jacobian:
        return residual, None
    return residual, np.vstack([st.jf, st.ji])


@dataclass
class TransientState:
    """Accepted solution at time t plus the cached evaluations the next
    trapezoidal step needs (rates, static currents, macromodel outputs)."""

    z: np.ndarray
    t: float
    f_cache: np.ndarray
    i_cache: np.ndarray
    cap: np.ndarray
    hist: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def at(cls, sys: GrayBoxSystem, z, u=None, t=0.0, hist=None):
        """Build the caches by evaluating the system once at z."""
        z, u = sys._check_z_u(z, u)
        st = _run_stamps(sys, z, u, hist, with_jacobian=False)
        return cls(z=z.copy(), t=t, f_cache=st.f, i_cache=st.i_static,
                   cap=st.cap, hist=st.neural_outputs)


def history_fixed_point(sys, z, u=None, hist=None, tol=1e-12, max_iter=200):
    """Self-consistent macromodel history at a fixed state (h = g(y, h)).

    At a steady state a history-fed macromodel must reproduce its own
    previous-step output. Plain repeated substitution is slowed badly by
    near-unit map poles (slow device modes), so every third sweep applies
    Aitken extrapolation per component.
    """
    z, u = sys._check_z_u(z, u)
    hist = dict(hist or {})
    if not sys.has_history_devices():
        st = _run_stamps(sys, z, u, hist, with_jacobian=False)
        return st.neural_outputs

    def sweep(h):
        return _run_stamps(sys, z, u, h, with_jacobian=False).neural_outputs

    def gap(h_next, h):
        vals = [float(np.max(np.abs(h_next[k] - h.get(k, np.zeros_like(h_next[k])))))
                for k in h_next]
        return max(vals, default=0.0)

    def finite(h):
        return all(np.all(np.isfinite(v)) for v in h.values())

    trail: list[dict[str, np.ndarray]] = []
    for _ in range(max_iter):
        new = sweep(hist)
        if not finite(new):
            # the map left the model's domain; restart plainly from the prior
            hist, trail = {}, []
            continue
        drift = gap(new, hist)
        hist = new
        if drift <= tol:
            break
        trail.append(new)
        if len(trail) == 3:
            h0, h1, h2 = trail
            accel = {}
            for key in h2:
                d1 = h1[key] - h0[key]
                d2 = h2[key] - h1[key]
                denom = d2 - d1
                ok = np.abs(denom) > 1e-9 * (np.abs(d1) + np.abs(d2) + 1e-300)
                with np.errstate(divide="ignore", invalid="ignore"):
                    step = np.where(ok, d2 * d2 / denom, 0.0)
                accel[key] = h2[key] - step
            trail = []
            # accept the extrapolation only if it is finite and contracts
            try:
                probe = sweep(accel)
            except Exception:
                continue
            if finite(probe) and gap(probe, accel) < drift:
                hist = probe
    if not finite(hist):
        hist = sweep({})  # best effort: one sweep from the model prior
    return hist


def assemble_trapezoidal(sys: GrayBoxSystem, state_prev: TransientState, z_guess,
                         u=None, dt=None, with_jacobian=True):
    """One-step implicit residual on [t, t+dt] and its Jacobian.

    Differential rows carry the trapezoidal form with the previous-time
    terms taken from state_prev's cache; rows without dynamics (source
    constraints, capacitance-free nodes) are enforced at the new time.
    """
    if dt is None or dt < 0:
        raise ValueError("dt must be a non-negative step length")
    z, u = sys._check_z_u(z_guess, u)
    st = _run_stamps(sys, z, u, state_prev.hist, with_jacobian)
    half = 0.5 * dt

    residual = np.empty(sys.n_total)
    jac = np.zeros((sys.n_total, sys.n_total)) if with_jacobian else None

    diff = sys.internal_differential
    for k in range(sys.n_internal):
        if diff[k]:
            residual[k] = (z[k] - state_prev.z[k]
                           - half * (st.f[k] + state_prev.f_cache[k]))
            if jac is not None:
                jac[k] = -half * st.jf[k]
                jac[k, k] += 1.0
        else:
            residual[k] = st.f[k]
            if jac is not None:
                jac[k] = st.jf[k]

    for b in range(sys.n_boundary):
        row = sys.n_internal + b
        c = st.cap[b]
        if c > 0.0:
            # C dv/dt + i_static = 0  =>  dv/dt = -i_static / C
            residual[row] = (z[row] - state_prev.z[row]
                             + half / c * (st.i_static[b] + state_prev.i_cache[b]))
            if jac is not None:
                jac[row] = (half / c) * st.ji[b]
                jac[row, row] += 1.0
        else:
            residual[row] = st.i_static[b]
            if jac is not None:
                jac[row] = st.ji[b]
    return residual, jac


def count_unknowns(sys: GrayBoxSystem) -> tuple[int, int]:
    """(internal, boundary) unknown counts; macromodeled subsystems
    contribute no internal unknowns."""
    return sys.n_internal, sys.n_boundary
