"""Network machinery: neighbour sets, simultaneous parameter synthesis,
and composition of finite abstractions.

Each node's disturbance is the stacked state of its in-neighbours, so a
node's abstract disturbance alphabet is the product of the neighbours'
state lattices, and composing abstractions wires every node's coupling
blocks to the current product state while external blocks stay free.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .certify import (
    QuadraticCertificate,
    derive_bounds,
    neighbor_drift_bound,
    pitch_terms,
    precision_lower_bound,
    verify_certificate,
)
from .errors import AbstractionError, ModelError
from .gridabs import FiniteAbstraction, Lattice, snap_input_pitch, snap_state_pitch
from .sysdsl import NetworkSpec


def neighbors(spec: NetworkSpec, i: int) -> tuple:
    """In-neighbours of node i, ascending node indices."""
    return spec.neighbors(i)


def neighbors_of_set(spec: NetworkSpec, subset) -> tuple:
    """External in-neighbours of a subset (edges internal to it ignored)."""
    subset = set(subset)
    for i in subset:
        if not 0 <= i < len(spec.nodes):
            raise ModelError(f"unknown node index {i}")
    internal = {(j, i) for (j, i) in spec.edges if j in subset and i in subset}
    result = set()
    for i in subset:
        result.update(j for (j, k) in spec.edges - internal if k == i)
    return tuple(sorted(result))


def node_lattice(spec: NetworkSpec, j: int, eta_j) -> Lattice:
    return Lattice.create(spec.nodes[j].domain, eta_j)


def build_wtilde(spec: NetworkSpec, i: int, etas, max_symbols: int = 100_000):
    """Disturbance alphabet of node i: the product of neighbour lattices.

    etas maps node index to that node's state pitch.  Returns
    (symbols, block_sizes, block_nodes); without neighbours the alphabet
    is the singleton zero vector.
    """
    nbrs = spec.neighbors(i)
    if not nbrs:
        p = spec.nodes[i].p
        return ((0.0,) * p,), (1,) * p, ("",) * p
    grids = [node_lattice(spec, j, etas[j]) for j in nbrs]
    total = math.prod(g.count for g in grids)
    if total > max_symbols:
        raise AbstractionError(f"disturbance alphabet needs {total} symbols, cap is {max_symbols}")
    symbols = [
        tuple(itertools.chain.from_iterable(combo))
        for combo in itertools.product(*[g.points() for g in grids])
    ]
    blocks = tuple(spec.nodes[j].n for j in nbrs)
    block_nodes = tuple(spec.node_names[j] for j in nbrs)
    return tuple(symbols), blocks, block_nodes


def eps_tilde_vec(spec: NetworkSpec, i: int, eps=None, etas=None) -> np.ndarray:
    """Per-neighbour disturbance precision vector of node i.

    When etas is given, the selection hypothesis eta_j <= eps_j is
    enforced for every neighbour.
    """
    eps = spec.eps if eps is None else eps
    nbrs = spec.neighbors(i)
    if etas is not None:
        for j in nbrs:
            eta_j = etas[j]
            worst = max(eta_j) if np.iterable(eta_j) else eta_j
            if worst > eps[j] + 1e-12:
                raise ModelError(
                    f"node {spec.node_names[j]!r}: pitch {worst} exceeds its precision {eps[j]}"
                )
    return np.array([eps[j] for j in nbrs], float)


def psi_bound(spec: NetworkSpec, i: int, t: float) -> float:
    """Neighbour-drift bound for node i at time t."""
    return neighbor_drift_bound([spec.nodes[j] for j in spec.neighbors(i)], t)


@dataclass
class NodeSynthesis:
    name: str
    feasible: bool
    eps: float
    eps_floor: float
    eta: tuple  # per-axis pitch, () when infeasible
    omega: tuple
    psi_tau: float
    eps_tilde_norm: float
    terms: dict
    reason: str | None = None


@dataclass
class SynthesisResult:
    nodes: list
    feasible: bool

    def etas(self):
        return {i: node.eta for i, node in enumerate(self.nodes)}


def synthesize_params(
    spec: NetworkSpec,
    eta_floor: float = 1e-6,
    verify_samples: int = 2000,
    seed: int = 0,
) -> SynthesisResult:
    """Pick per-node (eta, omega) for the declared precision targets.

    For every node the input pitch starts at the input-box width and is
    halved until the admissible state pitch clears eta_floor; the state
    pitch is then capped by the node's precision and snapped down so its
    lattice covers the domain.  All-or-nothing: one infeasible node
    makes the whole network infeasible (each is still reported).
    """
    results = []
    all_ok = True
    for i, sys in enumerate(spec.nodes):
        name = spec.node_names[i]
        eps_i = spec.eps[i]
        etv = eps_tilde_vec(spec, i)
        etn = float(etv.max()) if etv.size else 0.0
        psi_tau = psi_bound(spec, i, spec.tau)

        def fail(reason, eps_floor=math.nan, terms=None):
            results.append(
                NodeSynthesis(
                    name=name,
                    feasible=False,
                    eps=eps_i,
                    eps_floor=eps_floor,
                    eta=(),
                    omega=(),
                    psi_tau=psi_tau,
                    eps_tilde_norm=etn,
                    terms=terms or {},
                    reason=reason,
                )
            )

        try:
            cert = QuadraticCertificate.from_model(sys)
        except Exception as exc:
            fail(str(exc))
            all_ok = False
            continue
        report = verify_certificate(sys, cert, mode="sampled", samples=verify_samples, seed=seed)
        if not report.accepted:
            fail(f"certificate refuted by sampling (margin {report.margin:.3g})")
            all_ok = False
            continue
        kit = derive_bounds(sys, cert)
        eps_floor = precision_lower_bound(kit, sys, spec.tau, eps_tilde_norm=etn, psi_tau=psi_tau)
        if eps_i <= eps_floor:
            fail(
                f"precision target {eps_i} is not above the achievable floor {eps_floor:.6g}",
                eps_floor=eps_floor,
            )
            all_ok = False
            continue

        widths = [hi - lo for lo, hi in sys.input_box]
        omega_max = min(widths) if widths else 0.0
        if spec.omega[i] is not None:
            omega_max = min(omega_max, spec.omega[i]) if omega_max > 0 else spec.omega[i]
        omega = omega_max
        terms = None
        for _ in range(60):
            terms = pitch_terms(
                kit, sys, spec.tau, eps_i, omega, eps_tilde_norm=etn, psi_tau=psi_tau
            )
            if terms["pitch_bound"] >= eta_floor or omega == 0.0:
                break
            omega *= 0.5
        if terms is None or terms["pitch_bound"] < eta_floor:
            fail(
                "no admissible state pitch above the floor "
                f"(best bound {terms['pitch_bound']:.6g} at omega {omega:.6g})",
                eps_floor=eps_floor,
                terms=terms,
            )
            all_ok = False
            continue

        eta_target = min(terms["pitch_bound"], eps_i)
        if spec.eta[i] is not None:
            eta_target = min(eta_target, spec.eta[i])
        eta = snap_state_pitch(sys.domain, eta_target)
        omega_snapped = snap_input_pitch(sys.input_box, omega) if sys.m else ()
        results.append(
            NodeSynthesis(
                name=name,
                feasible=True,
                eps=eps_i,
                eps_floor=eps_floor,
                eta=eta,
                omega=omega_snapped,
                psi_tau=psi_tau,
                eps_tilde_norm=etn,
                terms=terms,
            )
        )
    return SynthesisResult(nodes=results, feasible=all_ok)


def build_node_abstraction(
    spec: NetworkSpec,
    i: int,
    etas,
    omegas,
    force: bool = False,
    max_cells: int = 250_000,
    workers: int = 1,
) -> FiniteAbstraction:
    """Build node i's abstraction with its neighbour-product disturbances."""
    from .gridabs import build_abstraction

    sys = spec.nodes[i]
    symbols, blocks, block_nodes = build_wtilde(spec, i, etas)
    etv = eps_tilde_vec(spec, i, etas=etas)
    cert = None
    try:
        cert = QuadraticCertificate.from_model(sys)
    except Exception:
        pass
    abs_i = build_abstraction(
        sys,
        spec.tau,
        etas[i],
        omegas[i] if sys.m else 0.0,
        dists=symbols,
        dist_blocks=blocks,
        dist_block_nodes=block_nodes,
        eps=spec.eps[i],
        eps_tilde=tuple(etv),
        cert=cert,
        psi_tau=psi_bound(spec, i, spec.tau),
        force=force,
        max_cells=max_cells,
        workers=workers,
    )
    # Composition wires blocks by network node name, so label the part
    # with its node name rather than the underlying system name.
    abs_i.system = spec.node_names[i]
    abs_i.node_names = (spec.node_names[i],)
    return abs_i


def composed_relation_params(spec: NetworkSpec, subset, eps=None):
    """(eps, eps_tilde) for the composed relation over the subset."""
    eps = spec.eps if eps is None else eps
    subset = sorted(set(subset))
    if not subset:
        raise ModelError("empty composition subset")
    composed_eps = max(eps[i] for i in subset)
    externals = neighbors_of_set(spec, subset)
    return composed_eps, tuple(eps[j] for j in externals)


def _part_offsets(part: FiniteAbstraction):
    offsets = {}
    pos = 0
    for name, dim in zip(part.node_names, part.node_dims):
        offsets[name] = (pos, dim)
        pos += dim
    return offsets


def _block_values_in_order(part: FiniteAbstraction, offset, size):
    """Ordered distinct values of one disturbance block (the block's lattice)."""
    seen = {}
    for sym in part.dists:
        val = sym[offset : offset + size]
        if val not in seen:
            seen[val] = None
    return list(seen)


def compose_abstractions(spec: NetworkSpec, parts) -> FiniteAbstraction:
    """Compose disjoint abstraction parts over the network.

    Parts may be single-node abstractions or earlier compositions; the
    result is canonical (parts ordered by their smallest node index), so
    composing {a, b} then c equals composing {a, b, c} directly.
    """
    parts = list(parts)
    if not parts:
        raise ModelError("nothing to compose")
    name_to_idx = {n: i for i, n in enumerate(spec.node_names)}
    for part in parts:
        for n in part.node_names:
            if n not in name_to_idx:
                raise ModelError(f"abstraction node {n!r} is not in the network")
    parts.sort(key=lambda p: min(name_to_idx[n] for n in p.node_names))
    covered = [name_to_idx[n] for p in parts for n in p.node_names]
    if len(set(covered)) != len(covered):
        raise ModelError("parts overlap")
    if sorted(covered) != covered:
        raise ModelError("part node ordering is not ascending")
    taus = {p.tau for p in parts}
    if len(taus) != 1:
        raise ModelError(f"parts disagree on tau: {sorted(taus)}")

    subset = set(covered)
    externals = neighbors_of_set(spec, subset)
    part_of_node = {}
    for pi, part in enumerate(parts):
        offs = _part_offsets(part)
        for n in part.node_names:
            part_of_node[n] = (pi, *offs[n])

    # Free (external) disturbance lattices, recovered from whichever part
    # couples to that node.
    ext_grid = {}
    for j in externals:
        jname = spec.node_names[j]
        for part in parts:
            pos = 0
            for size, node in zip(part.dist_blocks, part.dist_block_nodes):
                if node == jname:
                    ext_grid[j] = _block_values_in_order(part, pos, size)
                    break
                pos += size
            if j in ext_grid:
                break
        if j not in ext_grid:
            raise ModelError(f"no part is coupled to external node {jname!r}")

    ext_dims = [spec.nodes[j].n for j in externals]
    if externals:
        ext_symbols = [
            tuple(itertools.chain.from_iterable(combo))
            for combo in itertools.product(*[ext_grid[j] for j in externals])
        ]
    else:
        ext_symbols = [()]

    dist_index = [{sym: k for k, sym in enumerate(part.dists)} for part in parts]
    state_lists = [part.states for part in parts]
    input_lists = [part.inputs for part in parts]

    states = [
        tuple(itertools.chain.from_iterable(combo)) for combo in itertools.product(*state_lists)
    ]
    inputs = [
        tuple(itertools.chain.from_iterable(combo)) for combo in itertools.product(*input_lists)
    ]

    state_counts = [len(s) for s in state_lists]
    input_counts = [len(s) for s in input_lists]

    def decode(idx, counts):
        out = []
        for c in reversed(counts):
            out.append(idx % c)
            idx //= c
        return list(reversed(out))

    def encode(indices, counts):
        idx = 0
        for k, c in zip(indices, counts):
            idx = idx * c + k
        return idx

    ext_offset = {}
    pos = 0
    for j, d in zip(externals, ext_dims):
        ext_offset[j] = (pos, d)
        pos += d

    def part_dist_symbol(pi, part, part_states, ext_sym):
        pieces = []
        for size, node in zip(part.dist_blocks, part.dist_block_nodes):
            if node in part_of_node:
                qi, off, dim = part_of_node[node]
                pieces.append(state_lists[qi][part_states[qi]][off : off + dim])
            elif node and name_to_idx.get(node) in ext_offset:
                off, dim = ext_offset[name_to_idx[node]]
                pieces.append(ext_sym[off : off + dim])
            else:
                raise ModelError(f"part {pi} has an unwireable disturbance block for {node!r}")
        return tuple(itertools.chain.from_iterable(pieces))

    transitions = {}
    for s_idx in range(len(states)):
        s_parts = decode(s_idx, state_counts)
        for u_idx in range(len(inputs)):
            u_parts = decode(u_idx, input_counts)
            for e_idx, ext_sym in enumerate(ext_symbols):
                succ_sets = []
                ood = False
                for pi, part in enumerate(parts):
                    wsym = part_dist_symbol(pi, part, s_parts, ext_sym)
                    di = dist_index[pi].get(wsym)
                    if di is None:
                        raise ModelError(
                            f"wiring mismatch: part {pi} has no disturbance symbol {wsym}"
                        )
                    succ, part_ood = part.transitions[(s_parts[pi], u_parts[pi], di)]
                    succ_sets.append(succ)
                    ood = ood or part_ood
                combos = tuple(
                    sorted(encode(list(c), state_counts) for c in itertools.product(*succ_sets))
                )
                transitions[(s_idx, u_idx, e_idx)] = (combos, ood)

    composed_eps, composed_et = composed_relation_params(spec, subset, spec.eps)
    return FiniteAbstraction(
        system="+".join(n for p in parts for n in p.node_names),
        tau=parts[0].tau,
        eta=tuple(v for p in parts for v in p.eta),
        omega=tuple(v for p in parts for v in p.omega),
        eps=composed_eps,
        eps_tilde=composed_et,
        states=tuple(states),
        inputs=tuple(inputs),
        dists=tuple(ext_symbols),
        dist_blocks=tuple(ext_dims),
        dist_block_nodes=tuple(spec.node_names[j] for j in externals),
        node_names=tuple(n for p in parts for n in p.node_names),
        node_dims=tuple(d for p in parts for d in p.node_dims),
        external_names=tuple(spec.node_names[j] for j in externals),
        transitions=transitions,
    )
