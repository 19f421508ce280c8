"""State/input lattices, nominal flow, and finite abstraction construction.

The state lattice is anchored at the origin with per-axis half-pitch eta
(points sit at coordinates 2*k*eta_i), the input lattice is anchored at
the input-box centre.  Successors of an abstract state are all lattice
points within eta (per axis) of the noise-free endpoint after one
sampling period, so the transition map is set valued with at most 2^n
successors per triple.

Serialization is a plain text format with a content hash; building is
deterministic and byte-identical across worker counts.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import warnings
from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from .errors import AbstractionError, FormatError
from .sysdsl import SysModel, check_equilibrium

#: Absolute slack on lattice membership and successor tests; prevents
#: platform-dependent boundary flicker at exact ties.
GEOM_SLACK = 1e-9

FORMAT_HEADER = "STOCHABS v1"


def _g17(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass(frozen=True)
class Lattice:
    """Axis-aligned lattice restricted to a box.

    Coordinates are anchor_i + 2*k*pitch_i for integer k in
    [kmin_i, kmax_i].  A zero pitch collapses the axis to its anchor.
    """

    anchor: tuple
    pitch: tuple
    kmin: tuple
    kmax: tuple
    box: tuple

    @classmethod
    def create(cls, box, pitch, anchor=None):
        box = tuple((float(lo), float(hi)) for lo, hi in box)
        dim = len(box)
        if np.isscalar(pitch):
            pitch = (float(pitch),) * dim
        else:
            pitch = tuple(float(v) for v in pitch)
        if len(pitch) != dim:
            raise AbstractionError(f"pitch has {len(pitch)} axes, box has {dim}")
        if anchor is None:
            anchor = (0.0,) * dim
        else:
            anchor = tuple(float(v) for v in anchor)
        kmin, kmax = [], []
        for (lo, hi), h, a in zip(box, pitch, anchor):
            if h < 0:
                raise AbstractionError(f"negative pitch {h}")
            if h == 0.0:
                if not (lo - GEOM_SLACK <= a <= hi + GEOM_SLACK):
                    raise AbstractionError("zero pitch with anchor outside the box")
                kmin.append(0)
                kmax.append(0)
            else:
                kmin.append(math.ceil((lo - a - GEOM_SLACK) / (2.0 * h)))
                kmax.append(math.floor((hi - a + GEOM_SLACK) / (2.0 * h)))
        return cls(anchor=anchor, pitch=pitch, kmin=tuple(kmin), kmax=tuple(kmax), box=box)

    @property
    def dim(self):
        return len(self.pitch)

    @property
    def axis_counts(self):
        return tuple(hi - lo + 1 for lo, hi in zip(self.kmin, self.kmax))

    @property
    def count(self):
        c = 1
        for v in self.axis_counts:
            c *= max(v, 0)
        return c

    def coords(self, kvec):
        return tuple(a + 2.0 * k * h for a, k, h in zip(self.anchor, kvec, self.pitch))

    def points(self):
        """All lattice points inside the box, row major (first axis slowest)."""
        ranges = [range(lo, hi + 1) for lo, hi in zip(self.kmin, self.kmax)]
        return [self.coords(kvec) for kvec in itertools.product(*ranges)]

    def index_of_k(self, kvec):
        idx = 0
        for k, lo, cnt in zip(kvec, self.kmin, self.axis_counts):
            idx = idx * cnt + (k - lo)
        return idx

    def quantize_k(self, point):
        """Nearest lattice indices; exact midpoints round toward +infinity."""
        out = []
        for v, a, h in zip(point, self.anchor, self.pitch):
            if h == 0.0:
                out.append(0)
            else:
                out.append(math.floor((v - a) / (2.0 * h) + 0.5))
        return tuple(out)

    def quantize(self, point, clip=False):
        """Nearest lattice point (optionally clipped into the box range)."""
        kvec = self.quantize_k(point)
        if clip:
            kvec = tuple(min(max(k, lo), hi) for k, lo, hi in zip(kvec, self.kmin, self.kmax))
        return self.coords(kvec)

    def covers(self):
        """True when every box point is within pitch (per axis) of an
        in-box lattice point."""
        for (lo, hi), h, a, klo, khi in zip(self.box, self.pitch, self.anchor, self.kmin, self.kmax):
            if klo > khi:
                return False
            if h == 0.0:
                if hi - lo > GEOM_SLACK:
                    return False
                continue
            first = a + 2.0 * klo * h
            last = a + 2.0 * khi * h
            if first > lo + h + GEOM_SLACK or last < hi - h - GEOM_SLACK:
                return False
        return True


def quantize(point, eta):
    """Nearest origin-anchored lattice point with spacing 2*eta (per axis)."""
    point = np.atleast_1d(np.asarray(point, float))
    if np.isscalar(eta):
        eta = (float(eta),) * point.shape[0]
    out = []
    for v, h in zip(point, eta):
        out.append(2.0 * h * math.floor(v / (2.0 * h) + 0.5))
    return tuple(out)


def snap_state_pitch(domain, target) -> tuple:
    """Per-axis pitch <= target whose origin-anchored lattice covers the box.

    Searches spacings of the form width/q; raises when no aligned spacing
    exists within a generous search range (re-centre the domain then).
    """
    out = []
    for lo, hi in domain:
        width = hi - lo
        if width <= 0.0:
            if lo == 0.0:
                out.append(float(target))
                continue
            q = math.ceil(abs(lo) / (2.0 * target))
            out.append(abs(lo) / (2.0 * q))
            continue
        q0 = max(1, math.ceil(width / (2.0 * target)))
        for q in range(q0, q0 + 4096):
            h = width / (2.0 * q)
            if Lattice.create([(lo, hi)], (h,)).covers():
                out.append(h)
                break
        else:
            raise AbstractionError(
                f"cannot align a covering lattice to axis [{lo}, {hi}] with pitch <= {target}"
            )
    return tuple(out)


def snap_input_pitch(input_box, target) -> tuple:
    """Per-axis pitch <= target whose centre-anchored lattice covers the box."""
    out = []
    for lo, hi in input_box:
        hw = 0.5 * (hi - lo)
        if hw <= 0.0:
            out.append(0.0)
            continue
        j = max(0, math.ceil((hw / target - 1.0) / 2.0))
        out.append(hw / (2 * j + 1))
    return tuple(out)


def input_lattice(input_box, omega) -> Lattice:
    centre = tuple(0.5 * (lo + hi) for lo, hi in input_box)
    return Lattice.create(input_box, omega, anchor=centre)


@dataclass(frozen=True)
class FlowResult:
    endpoint: np.ndarray
    escaped: bool  # left the inflated working box mid-trajectory
    substeps: int


def _rk4(sys, x0, u, w, tau, steps, inflated):
    x = np.asarray(x0, float).copy()
    h = tau / steps
    escaped = False
    for _ in range(steps):
        k1 = sys.drift_eval(x, u, w)
        k2 = sys.drift_eval(x + 0.5 * h * k1, u, w)
        k3 = sys.drift_eval(x + 0.5 * h * k2, u, w)
        k4 = sys.drift_eval(x + h * k3, u, w)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            return x, True
        if np.any(x < inflated[:, 0]) or np.any(x > inflated[:, 1]):
            escaped = True
    return x, escaped


def flow_nominal(
    sys: SysModel,
    x0,
    u,
    w,
    tau: float,
    substeps: int = 16,
    tol: float = 1e-9,
    max_substeps: int = 1 << 20,
    domain_margin: float = 0.5,
) -> FlowResult:
    """Integrate the noise-free dynamics over [0, tau] with fixed-step RK4.

    The step count doubles until the step-doubling error estimate drops
    below tol; fixed steps keep results reproducible across platforms.
    A trajectory leaving the domain inflated by domain_margin (fraction
    of the box width per side) is flagged escaped, not an error.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    box = sys.domain_array()
    width = box[:, 1] - box[:, 0]
    inflated = np.column_stack([box[:, 0] - domain_margin * width, box[:, 1] + domain_margin * width])
    u = np.zeros(sys.m) if u is None else np.atleast_1d(np.asarray(u, float))
    w = np.zeros(sys.p) if w is None else np.atleast_1d(np.asarray(w, float))
    steps = substeps
    coarse, _ = _rk4(sys, x0, u, w, tau, steps, inflated)
    while True:
        fine, escaped = _rk4(sys, x0, u, w, tau, 2 * steps, inflated)
        err = float(np.abs(coarse - fine).max()) if np.all(np.isfinite(fine)) else math.inf
        if err <= tol:
            return FlowResult(endpoint=fine, escaped=escaped, substeps=2 * steps)
        steps *= 2
        if 2 * steps > max_substeps:
            raise AbstractionError(
                f"flow integration did not reach tolerance {tol} within {max_substeps} substeps"
            )
        coarse = fine


@dataclass
class FiniteAbstraction:
    """Countable deterministic transition system over lattice points.

    transitions maps (state, input, disturbance) index triples to a pair
    (successor index tuple sorted ascending, out-of-domain flag).  The
    disturbance vectors split into blocks (dist_blocks gives the sizes,
    dist_block_nodes the supplying node name or '' when free); the
    vector metric between two disturbance values is the per-block
    infinity norm.
    """

    system: str
    tau: float
    eta: tuple
    omega: tuple
    eps: float
    eps_tilde: tuple
    states: tuple
    inputs: tuple
    dists: tuple
    dist_blocks: tuple
    dist_block_nodes: tuple
    node_names: tuple
    node_dims: tuple
    external_names: tuple
    transitions: dict

    @property
    def dim(self):
        return sum(self.node_dims)

    def successor_counts(self):
        return [len(succ) for succ, _ in self.transitions.values()]

    def serialize(self) -> str:
        lines = [FORMAT_HEADER, f"system {self.system}"]
        if len(self.node_names) > 1:
            parts = [f"{n}:{d}" for n, d in zip(self.node_names, self.node_dims)]
            ext = [str(n) for n in self.external_names]
            lines.append("composed " + " ".join(parts) + " external" + ("" if not ext else " " + " ".join(ext)))
        lines.append(
            "tau "
            + _g17(self.tau)
            + " eta "
            + " ".join(_g17(v) for v in self.eta)
            + " omega "
            + (" ".join(_g17(v) for v in self.omega) if self.omega else "-")
            + " eps "
            + _g17(self.eps)
        )
        lines.append("epstilde" + "".join(" " + _g17(v) for v in self.eps_tilde))
        lines.append(
            "dblocks"
            + "".join(
                f" {s}:{n if n else '-'}" for s, n in zip(self.dist_blocks, self.dist_block_nodes)
            )
        )
        for label, items in (("states", self.states), ("inputs", self.inputs), ("dists", self.dists)):
            lines.append(f"{label} {len(items)}")
            for i, coords in enumerate(items):
                lines.append(f"{i}" + "".join(" " + _g17(c) for c in coords))
        lines.append(f"transitions {len(self.transitions)}")
        for (si, ui, di) in sorted(self.transitions):
            succ, ood = self.transitions[(si, ui, di)]
            mark = " *" if ood else ""
            lines.append(f"{si} {ui} {di} ->{mark}" + "".join(f" {s}" for s in succ))
        body = "\n".join(lines) + "\n"
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        return body + f"hash {digest}\n"

    def content_hash(self) -> str:
        return self.serialize().rsplit("hash ", 1)[1].strip()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.serialize())


def deserialize(text: str) -> FiniteAbstraction:
    """Parse the serialized form back; verifies version and content hash."""
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        raise FormatError(f"bad header (expected {FORMAT_HEADER!r})")
    if not lines[-1].startswith("hash "):
        raise FormatError("missing hash footer")
    body = "\n".join(lines[:-1]) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    stated = lines[-1].split()[1]
    if digest != stated:
        raise FormatError("content hash mismatch (file corrupted?)")

    pos = 1

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise FormatError("truncated file")
        line = lines[pos]
        pos += 1
        return line

    line = take()
    if not line.startswith("system "):
        raise FormatError("missing system line")
    system = line.split(None, 1)[1]
    node_names, node_dims, external = (system,), None, ()
    if lines[pos].startswith("composed "):
        toks = take().split()[1:]
        cut = toks.index("external")
        pairs = [t.rsplit(":", 1) for t in toks[:cut]]
        node_names = tuple(p[0] for p in pairs)
        node_dims = tuple(int(p[1]) for p in pairs)
        external = tuple(toks[cut + 1 :])
    line = take()
    toks = line.split()
    if toks[0] != "tau":
        raise FormatError("missing tau line")
    i_eta = toks.index("eta")
    i_om = toks.index("omega")
    i_eps = toks.index("eps")
    tau = float(toks[1])
    eta = tuple(float(v) for v in toks[i_eta + 1 : i_om])
    omega_toks = toks[i_om + 1 : i_eps]
    omega = () if omega_toks == ["-"] else tuple(float(v) for v in omega_toks)
    eps = float(toks[i_eps + 1])
    toks = take().split()
    if toks[0] != "epstilde":
        raise FormatError("missing epstilde line")
    eps_tilde = tuple(float(v) for v in toks[1:])
    toks = take().split()
    if toks[0] != "dblocks":
        raise FormatError("missing dblocks line")
    dist_blocks, dist_block_nodes = [], []
    for t in toks[1:]:
        size, node = t.rsplit(":", 1)
        dist_blocks.append(int(size))
        dist_block_nodes.append("" if node == "-" else node)

    def section(label):
        toks = take().split()
        if len(toks) != 2 or toks[0] != label:
            raise FormatError(f"missing {label} section")
        items = []
        for i in range(int(toks[1])):
            parts = take().split()
            if int(parts[0]) != i:
                raise FormatError(f"{label} indices out of order")
            items.append(tuple(float(v) for v in parts[1:]))
        return tuple(items)

    states = section("states")
    inputs = section("inputs")
    dists = section("dists")
    if node_dims is None:
        node_dims = (len(states[0]) if states else len(eta),)
    toks = take().split()
    if len(toks) != 2 or toks[0] != "transitions":
        raise FormatError("missing transitions section")
    transitions = {}
    for _ in range(int(toks[1])):
        parts = take().split()
        if len(parts) < 4 or parts[3] != "->":
            raise FormatError(f"bad transition line: {' '.join(parts)}")
        si, ui, di = int(parts[0]), int(parts[1]), int(parts[2])
        rest = parts[4:]
        ood = bool(rest) and rest[0] == "*"
        if ood:
            rest = rest[1:]
        transitions[(si, ui, di)] = (tuple(int(v) for v in rest), ood)
    return FiniteAbstraction(
        system=system,
        tau=tau,
        eta=eta,
        omega=omega,
        eps=eps,
        eps_tilde=eps_tilde,
        states=states,
        inputs=inputs,
        dists=dists,
        dist_blocks=tuple(dist_blocks),
        dist_block_nodes=tuple(dist_block_nodes),
        node_names=node_names,
        node_dims=node_dims,
        external_names=external,
        transitions=transitions,
    )


def read_abstraction(path) -> FiniteAbstraction:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize(fh.read())


# ---------------------------------------------------------------------------
# construction

_WORKER_CTX = {}


def _init_worker(payload):
    _WORKER_CTX["payload"] = payload


def _successors(grid: Lattice, endpoint, eta):
    ranges = []
    for v, h, klo, khi in zip(endpoint, eta, grid.kmin, grid.kmax):
        lo = max(math.ceil((v - h - GEOM_SLACK) / (2.0 * h)), klo)
        hi = min(math.floor((v + h + GEOM_SLACK) / (2.0 * h)), khi)
        if lo > hi:
            return ()
        ranges.append(range(lo, hi + 1))
    return tuple(sorted(grid.index_of_k(k) for k in itertools.product(*ranges)))


def _state_rows(payload, si):
    sys, grid, states, inputs, dists, tau, substeps, tol = payload
    box = sys.domain_array()
    rows = []
    x = states[si]
    for ui, u in enumerate(inputs):
        for di, w in enumerate(dists):
            res = flow_nominal(sys, x, u, w, tau, substeps=substeps, tol=tol)
            e = res.endpoint
            ood = res.escaped or bool(np.any(e < box[:, 0] - GEOM_SLACK) or np.any(e > box[:, 1] + GEOM_SLACK))
            rows.append(((si, ui, di), (_successors(grid, e, grid.pitch), ood)))
    return rows


def _state_rows_worker(si):
    return _state_rows(_WORKER_CTX["payload"], si)


def build_abstraction(
    sys: SysModel,
    tau: float,
    eta,
    omega,
    dists=None,
    dist_blocks=None,
    dist_block_nodes=None,
    eps: float = 0.0,
    eps_tilde=(),
    cert=None,
    psi_tau: float = 0.0,
    force: bool = False,
    max_cells: int = 250_000,
    workers: int = 1,
    substeps: int = 16,
) -> FiniteAbstraction:
    """Build the finite abstraction of sys at sampling time tau.

    eta/omega are scalars or per-axis vectors; the state lattice must
    cover the domain (use snap_state_pitch to align).  dists is the list
    of disturbance symbols (default: the singleton zero vector).  When a
    certificate and eps are supplied, eta is validated against the pitch
    bound unless force is set (then a warning is emitted).
    """
    check_equilibrium(sys)
    grid = Lattice.create(sys.domain, eta)
    if not grid.covers():
        raise AbstractionError(
            "state lattice does not cover the domain; snap the pitch with snap_state_pitch"
        )
    eta_t = grid.pitch
    if sys.m > 0:
        ilat = input_lattice(sys.input_box, omega)
        if not ilat.covers():
            raise AbstractionError(
                "input lattice does not cover the input box; use snap_input_pitch"
            )
        omega_t = ilat.pitch
        inputs = tuple(ilat.points())
    else:
        omega_t = ()
        inputs = ((),)
    if dists is None:
        dists = (tuple(0.0 for _ in range(sys.p)),)
    else:
        dists = tuple(tuple(float(v) for v in d) for d in dists)
    if dist_blocks is None:
        dist_blocks = (1,) * sys.p
    if dist_block_nodes is None:
        dist_block_nodes = ("",) * len(dist_blocks)
    eps_tilde = tuple(float(v) for v in eps_tilde)

    if cert is not None and eps > 0.0:
        from .certify import derive_bounds, pitch_upper_bound

        kit = derive_bounds(sys, cert)
        etn = max(eps_tilde) if eps_tilde else 0.0
        bound = pitch_upper_bound(
            kit, sys, tau, eps, max(omega_t) if omega_t else 0.0, eps_tilde_norm=etn, psi_tau=psi_tau
        )
        if max(eta_t) > bound + 1e-12:
            msg = f"pitch {max(eta_t)} exceeds the admissible bound {bound}"
            if not force:
                raise AbstractionError(msg + " (pass force=True to build anyway)")
            warnings.warn(msg + "; building anyway", stacklevel=2)

    cells = grid.count * len(inputs) * len(dists)
    if cells > max_cells:
        raise AbstractionError(f"abstraction needs {cells} cells, cap is {max_cells}")

    states = tuple(grid.points())
    tol = min(eta_t) / 10.0
    payload = (sys, grid, states, inputs, dists, tau, substeps, tol)
    transitions = {}
    if workers <= 1:
        for si in range(len(states)):
            for key, val in _state_rows(payload, si):
                transitions[key] = val
    else:
        with Pool(workers, initializer=_init_worker, initargs=(payload,)) as pool:
            for rows in pool.map(_state_rows_worker, range(len(states))):
                for key, val in rows:
                    transitions[key] = val

    return FiniteAbstraction(
        system=sys.name,
        tau=float(tau),
        eta=eta_t,
        omega=omega_t,
        eps=float(eps),
        eps_tilde=eps_tilde,
        states=states,
        inputs=inputs,
        dists=dists,
        dist_blocks=tuple(dist_blocks),
        dist_block_nodes=tuple(dist_block_nodes),
        node_names=(sys.name,),
        node_dims=(sys.n,),
        external_names=(),
        transitions=transitions,
    )
