"""Plain-text system descriptions: parsing, re-emitting, and building.

The format is line oriented, one statement per line, `#` comments,
case-insensitive keywords, declare-before-use for nodes. See
docs/netlist_format.md for the full grammar. Node "0" is the implicit
ground reference and is never declared.

Model files named by `nndevice ... model=<path>` and sidecar matrix files
named by `txnet <path>` are resolved relative to the netlist's directory so
an experiment directory stays relocatable.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import devices as dv
from . import neural
from .errors import (
    BuildError,
    DuplicateNodeError,
    MissingAnalysisError,
    ParseError,
    UnknownNodeError,
)
from .graybox import Analysis, GrayBoxSystem
from .solvers import SolverConfig

_TOKEN = re.compile(r"\S+")

# statement kind -> (positional value count after nodes, node count, param spec)
# param spec maps key -> "float" | "int" | "str"; required keys marked with "!"
_DEVICE_GRAMMAR = {
    "resistor": (2, 1, {}),
    "capacitor": (2, 1, {}),
    "inductor": (2, 1, {}),
    "vsource": (2, 1, {"vi": "float", "u": "int"}),
    "isource": (2, 1, {"ii": "float", "u": "int"}),
    "diode": (2, 0, {"is!": "float", "vt!": "float"}),
    "mosfet": (3, 0, {"k!": "float", "vth!": "float", "lambda": "float"}),
    "pqload": (1, 0, {"p!": "float", "q!": "float", "up": "int", "uq": "int"}),
    "motor": (1, 0, {"rs": "float", "rr": "float", "lls": "float", "llr": "float",
                     "lm": "float", "h": "float", "tload": "float",
                     "wbase": "float"}),
}


@dataclass(frozen=True)
class Token:
    text: str
    line: int
    column: int


@dataclass
class DeviceStmt:
    kind: str
    name: str
    nodes: tuple[str, ...]
    values: tuple[float, ...] = ()
    params: dict = field(default_factory=dict)


@dataclass
class NetlistDoc:
    convention: str = "si"
    nodes: list[str] = field(default_factory=list)
    devices: list[DeviceStmt] = field(default_factory=list)
    txnets: list[str] = field(default_factory=list)
    uschedule: list[tuple[float, tuple[float, ...]]] = field(default_factory=list)
    ics: list[tuple[str, float, float]] = field(default_factory=list)
    analysis: Analysis | None = None
    solver: dict = field(default_factory=dict)


def _tokenize(line_text: str, line_no: int) -> list[Token]:
    hash_at = line_text.find("#")
    if hash_at >= 0:
        line_text = line_text[:hash_at]
    return [Token(m.group(0), line_no, m.start() + 1)
            for m in _TOKEN.finditer(line_text)]


def _parse_float(tok: Token) -> float:
    try:
        return float(tok.text)
    except ValueError:
        raise ParseError(tok.line, tok.column,
                         f"expected a number, got '{tok.text}'", tok.text) from None


def _parse_int(tok: Token, text: str | None = None) -> int:
    text = tok.text if text is None else text
    try:
        return int(text)
    except ValueError:
        raise ParseError(tok.line, tok.column,
                         f"expected an integer, got '{text}'", text) from None


def _split_params(tokens: list[Token]) -> tuple[list[Token], list[tuple[Token, str, str]]]:
    """Split trailing key=value tokens off the positional ones."""
    pos: list[Token] = []
    params: list[tuple[Token, str, str]] = []
    for tok in tokens:
        if "=" in tok.text:
            key, _, val = tok.text.partition("=")
            if not key or not val:
                raise ParseError(tok.line, tok.column,
                                 f"malformed parameter '{tok.text}'", tok.text)
            params.append((tok, key.lower(), val))
        else:
            if params:
                raise ParseError(tok.line, tok.column,
                                 "positional value after key=value parameters",
                                 tok.text)
            pos.append(tok)
    return pos, params


def _need(tokens: list[Token], n: int, line: int, what: str) -> None:
    if len(tokens) < n:
        last = tokens[-1] if tokens else Token("", line, 1)
        raise ParseError(line, last.column + len(last.text) + (1 if tokens else 0),
                         f"missing {what}")


def _check_node_ref(tok: Token, declared: set[str]) -> str:
    if tok.text == "0":
        return "0"
    if tok.text not in declared:
        raise UnknownNodeError(tok.line, tok.column,
                               f"unknown node '{tok.text}' (declare it first)",
                               tok.text)
    return tok.text


def parse(text: str) -> NetlistDoc:
    """Parse a netlist document; the first error wins."""
    doc = NetlistDoc()
    declared: set[str] = set()
    device_names: set[str] = set()
    units_seen = False

    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, line_no)
        if not tokens:
            continue
        head = tokens[0]
        kind = head.text.lower()

        if kind == "units":
            _need(tokens, 2, line_no, "unit convention (si or perunit)")
            value = tokens[1].text.lower()
            if value not in ("si", "perunit"):
                raise ParseError(tokens[1].line, tokens[1].column,
                                 f"unknown unit convention '{tokens[1].text}'",
                                 tokens[1].text)
            if units_seen:
                raise ParseError(head.line, head.column, "duplicate units statement")
            doc.convention = value
            units_seen = True

        elif kind == "node":
            _need(tokens, 2, line_no, "node name")
            name = tokens[1].text
            if name == "0":
                raise ParseError(tokens[1].line, tokens[1].column,
                                 "'0' is the implicit ground node", name)
            if name in declared:
                raise DuplicateNodeError(tokens[1].line, tokens[1].column,
                                         f"duplicate node '{name}'", name)
            declared.add(name)
            doc.nodes.append(name)

        elif kind in _DEVICE_GRAMMAR:
            doc.devices.append(
                _parse_device(kind, tokens, declared, device_names, line_no)
            )

        elif kind == "nndevice":
            doc.devices.append(
                _parse_nndevice(tokens, declared, device_names, line_no)
            )

        elif kind == "txnet":
            _need(tokens, 2, line_no, "matrix file path")
            doc.txnets.append(tokens[1].text)

        elif kind == "uschedule":
            _need(tokens, 3, line_no, "time and at least one value")
            t = _parse_float(tokens[1])
            vals = tuple(_parse_float(tok) for tok in tokens[2:])
            doc.uschedule.append((t, vals))

        elif kind == "ic":
            _need(tokens, 3, line_no, "node and initial value")
            node = _check_node_ref(tokens[1], declared)
            vr = _parse_float(tokens[2])
            vi = _parse_float(tokens[3]) if len(tokens) > 3 else 0.0
            doc.ics.append((node, vr, vi))

        elif kind == "analysis":
            if doc.analysis is not None:
                raise ParseError(head.line, head.column,
                                 "duplicate analysis directive")
            doc.analysis = _parse_analysis(tokens, line_no)

        elif kind == "solver":
            _, params = _split_params(tokens[1:])
            for tok, key, val in params:
                if key == "alpha":
                    doc.solver["alpha"] = _parse_float(Token(val, tok.line, tok.column))
                elif key == "eps":
                    doc.solver["epsilon"] = _parse_float(Token(val, tok.line, tok.column))
                elif key == "maxiter":
                    doc.solver["max_iter"] = _parse_int(tok, val)
                else:
                    raise ParseError(tok.line, tok.column,
                                     f"unknown solver option '{key}'", tok.text)

        else:
            raise ParseError(head.line, head.column,
                             f"unknown statement '{head.text}'", head.text)

    if doc.analysis is None:
        raise MissingAnalysisError("netlist has no analysis directive")
    return doc


def _parse_device(kind, tokens, declared, device_names, line_no) -> DeviceStmt:
    n_nodes, n_values, param_spec = _DEVICE_GRAMMAR[kind]
    pos, params = _split_params(tokens[1:])
    _need([tokens[0]] + pos, 1 + 1 + n_nodes + n_values, line_no,
          f"{kind} needs a name, {n_nodes} node(s) and {n_values} value(s)")
    if len(pos) > 1 + n_nodes + n_values:
        extra = pos[1 + n_nodes + n_values]
        raise ParseError(extra.line, extra.column,
                         f"unexpected extra token '{extra.text}'", extra.text)
    name_tok = pos[0]
    if name_tok.text in device_names:
        raise ParseError(name_tok.line, name_tok.column,
                         f"duplicate device name '{name_tok.text}'", name_tok.text)
    device_names.add(name_tok.text)
    nodes = tuple(_check_node_ref(tok, declared) for tok in pos[1:1 + n_nodes])
    values = tuple(_parse_float(tok) for tok in pos[1 + n_nodes:])

    spec = {key.rstrip("!"): (typ, key.endswith("!"))
            for key, typ in param_spec.items()}
    required = {key for key, (_, req) in spec.items() if req}
    parsed: dict = {}
    for tok, key, val in params:
        if key not in spec:
            raise ParseError(tok.line, tok.column,
                             f"unknown parameter '{key}' for {kind}", tok.text)
        typ, _ = spec[key]
        parsed[key] = (_parse_int(tok, val) if typ == "int"
                       else _parse_float(Token(val, tok.line, tok.column)))
        required.discard(key)
    if required:
        raise ParseError(tokens[0].line, tokens[0].column,
                         f"{kind} is missing required parameter(s) "
                         f"{sorted(required)}")
    return DeviceStmt(kind, name_tok.text, nodes, values, parsed)


def _parse_nndevice(tokens, declared, device_names, line_no) -> DeviceStmt:
    pos, params = _split_params(tokens[1:])
    _need([tokens[0]] + pos, 3, line_no, "nndevice needs a name and node(s)")
    name_tok = pos[0]
    if name_tok.text in device_names:
        raise ParseError(name_tok.line, name_tok.column,
                         f"duplicate device name '{name_tok.text}'", name_tok.text)
    device_names.add(name_tok.text)
    nodes = tuple(_check_node_ref(tok, declared) for tok in pos[1:])
    parsed: dict = {}
    for tok, key, val in params:
        if key == "model":
            parsed["model"] = val
        elif key == "inputs":
            toks = tuple(v.strip().lower() for v in val.split(","))
            for t in toks:
                if t in ("v", "hist"):
                    continue
                if re.fullmatch(r"u\d+", t):
                    continue
                raise ParseError(tok.line, tok.column,
                                 f"bad input token '{t}' (want v, u<k>, hist)",
                                 tok.text)
            parsed["inputs"] = toks
        else:
            raise ParseError(tok.line, tok.column,
                             f"unknown parameter '{key}' for nndevice", tok.text)
    for req in ("model", "inputs"):
        if req not in parsed:
            raise ParseError(tokens[0].line, tokens[0].column,
                             f"nndevice is missing required parameter '{req}'")
    return DeviceStmt("nndevice", name_tok.text, nodes, (), parsed)


def _parse_analysis(tokens, line_no) -> Analysis:
    _need(tokens, 2, line_no, "analysis kind (dc or tran)")
    kind = tokens[1].text.lower()
    if kind == "dc":
        if len(tokens) > 2:
            raise ParseError(tokens[2].line, tokens[2].column,
                             f"unexpected token '{tokens[2].text}' after 'dc'",
                             tokens[2].text)
        return Analysis("dc")
    if kind == "tran":
        _, params = _split_params(tokens[2:])
        dt = t_end = None
        for tok, key, val in params:
            if key == "dt":
                dt = _parse_float(Token(val, tok.line, tok.column))
            elif key == "tend":
                t_end = _parse_float(Token(val, tok.line, tok.column))
            else:
                raise ParseError(tok.line, tok.column,
                                 f"unknown tran option '{key}'", tok.text)
        if dt is None or t_end is None:
            raise ParseError(tokens[1].line, tokens[1].column,
                             "tran needs dt=<s> and tend=<s>")
        if dt <= 0 or t_end < dt:
            raise ParseError(tokens[1].line, tokens[1].column,
                             "tran needs dt > 0 and tend >= dt")
        return Analysis("tran", dt=dt, t_end=t_end)
    raise ParseError(tokens[1].line, tokens[1].column,
                     f"unknown analysis kind '{tokens[1].text}'", tokens[1].text)


def serialize(doc: NetlistDoc) -> str:
    """Re-emit a document; parsing the result reproduces the document."""
    out = [f"units {doc.convention}"]
    out.extend(f"node {n}" for n in doc.nodes)
    for dev in doc.devices:
        parts = [dev.kind, dev.name, *dev.nodes, *(repr(v) for v in dev.values)]
        for key in sorted(dev.params):
            val = dev.params[key]
            if key == "inputs":
                parts.append(f"inputs={','.join(val)}")
            elif isinstance(val, float):
                parts.append(f"{key}={val!r}")
            else:
                parts.append(f"{key}={val}")
        out.append(" ".join(parts))
    out.extend(f"txnet {path}" for path in doc.txnets)
    for t, vals in doc.uschedule:
        out.append("uschedule " + " ".join(repr(v) for v in (t, *vals)))
    for node, vr, vi in doc.ics:
        out.append(f"ic {node} {vr!r} {vi!r}")
    if doc.solver:
        keymap = {"alpha": "alpha", "epsilon": "eps", "max_iter": "maxiter"}
        parts = [f"{keymap[k]}={doc.solver[k]!r}" for k in sorted(doc.solver)]
        out.append("solver " + " ".join(parts))
    if doc.analysis is not None:
        if doc.analysis.kind == "dc":
            out.append("analysis dc")
        else:
            out.append(
                f"analysis tran dt={doc.analysis.dt!r} tend={doc.analysis.t_end!r}"
            )
    return "\n".join(out) + "\n"


def parse_txnet(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Sidecar matrix file: line 1 is n, then n rows of G, a blank line,
    and n rows of B."""
    with open(path) as fh:
        raw_lines = fh.read().splitlines()
    try:
        n = int(raw_lines[0].strip())
    except (IndexError, ValueError):
        raise BuildError(f"{path}: first line must be the bus count") from None

    def read_block(lines, start, label):
        rows = []
        idx = start
        while idx < len(lines) and len(rows) < n:
            stripped = lines[idx].strip()
            idx += 1
            if not stripped:
                continue
            row = [float(v) for v in stripped.split()]
            if len(row) != n:
                raise BuildError(
                    f"{path}: {label} row {len(rows) + 1} has {len(row)} "
                    f"entries, expected {n}"
                )
            rows.append(row)
        if len(rows) < n:
            raise BuildError(f"{path}: {label} block is missing rows")
        return np.array(rows), idx

    g, idx = read_block(raw_lines, 1, "G")
    b, _ = read_block(raw_lines, idx, "B")
    return g, b


def build(doc: NetlistDoc, base_dir: str = ".", model_loader=None) -> GrayBoxSystem:
    """Turn a parsed document into a solvable system.

    Model files are loaded once per distinct path, so several nndevice
    statements bound to one file share a single in-memory model.
    """
    loader = model_loader or neural.load_model
    model_cache: dict[str, neural.Mlp] = {}

    def load(path: str) -> neural.Mlp:
        resolved = os.path.normpath(os.path.join(base_dir, path))
        if resolved not in model_cache:
            model_cache[resolved] = loader(resolved)
        return model_cache[resolved]

    built: list = []
    for dev in doc.devices:
        built.append(_build_device(doc, dev, load))
    for path in doc.txnets:
        resolved = os.path.normpath(os.path.join(base_dir, path))
        g, b = parse_txnet(resolved)
        if g.shape[0] != len(doc.nodes):
            raise BuildError(
                f"{path}: matrix is {g.shape[0]}x{g.shape[0]} but the netlist "
                f"declares {len(doc.nodes)} node(s)"
            )
        built.append(dv.TransmissionNetwork(f"txnet{len(built)}",
                                            tuple(doc.nodes), g, b))

    if doc.uschedule:
        widths = {len(vals) for _, vals in doc.uschedule}
        if len(widths) > 1:
            raise BuildError("uschedule entries must all have the same width")
        u_size = widths.pop()
    else:
        u_size = 0

    sys = GrayBoxSystem(doc.convention, doc.nodes, built,
                        analysis=doc.analysis or Analysis(), u_size=u_size)
    sys.u_schedule = [(t, np.array(vals)) for t, vals in doc.uschedule]
    sys.solver_config = SolverConfig(**doc.solver) if doc.solver else SolverConfig()
    sys.ic = {node: (vr, vi) for node, vr, vi in doc.ics}
    return sys


def _build_device(doc: NetlistDoc, dev: DeviceStmt, load):
    kind, p = dev.kind, dev.params
    if kind == "resistor":
        return dv.Resistor(dev.name, dev.nodes, dev.values[0])
    if kind == "capacitor":
        return dv.Capacitor(dev.name, dev.nodes, dev.values[0])
    if kind == "inductor":
        return dv.Inductor(dev.name, dev.nodes, dev.values[0])
    if kind == "vsource":
        return dv.VSource(dev.name, dev.nodes, dev.values[0],
                          v_imag=p.get("vi", 0.0), u_index=p.get("u"))
    if kind == "isource":
        return dv.ISource(dev.name, dev.nodes, dev.values[0],
                          i_imag=p.get("ii", 0.0), u_index=p.get("u"))
    if kind == "diode":
        return dv.Diode(dev.name, dev.nodes, i_sat=p["is"], v_thermal=p["vt"])
    if kind == "mosfet":
        return dv.Mosfet(dev.name, dev.nodes, k=p["k"], v_th=p["vth"],
                         lam=p.get("lambda", 0.0))
    if kind == "pqload":
        return dv.PqLoad(dev.name, dev.nodes, p=p["p"], q=p["q"],
                         u_p=p.get("up"), u_q=p.get("uq"))
    if kind == "motor":
        return dv.InductionMotorReduced(
            dev.name, dev.nodes,
            r_s=p.get("rs", 0.01), r_r=p.get("rr", 0.02),
            l_ls=p.get("lls", 0.05), l_lr=p.get("llr", 0.05),
            l_m=p.get("lm", 3.0), inertia=p.get("h", 0.5),
            load_torque=p.get("tload", 0.5),
            w_base=p.get("wbase", 2.0 * np.pi * 60.0),
        )
    if kind == "nndevice":
        return dv.NeuralDevice(dev.name, dev.nodes, load(p["model"]),
                               input_tokens=p["inputs"], model_path=p["model"])
    raise BuildError(f"unhandled device kind '{kind}'")


def parse_file(path: str) -> NetlistDoc:
    with open(path) as fh:
        return parse(fh.read())


def build_file(path: str, model_loader=None) -> GrayBoxSystem:
    doc = parse_file(path)
    return build(doc, base_dir=os.path.dirname(os.path.abspath(path)),
                 model_loader=model_loader)
