import dataclasses
import math

import numpy as np
import pytest

from stochabs import gridabs
from stochabs.errors import AbstractionError, FormatError, ModelError
from stochabs.expr import Bin, Lit, Neg, Var
from stochabs.gridabs import (
    FiniteAbstraction,
    Lattice,
    build_abstraction,
    deserialize,
    flow_nominal,
    quantize,
    snap_input_pitch,
    snap_state_pitch,
)
from stochabs.sysdsl import SysModel


def test_quantize_examples():
    assert quantize([0.35], 0.25) == (0.5,)
    assert quantize([0.0], 0.25) == (0.0,)
    # exact midpoints round toward +infinity
    assert quantize([0.25], 0.25) == (0.5,)
    assert quantize([-0.25], 0.25) == (0.0,)
    assert quantize([0.3, -0.8], (0.25, 0.5)) == (0.5, -1.0)


def test_cover_property():
    rng = np.random.default_rng(12)
    eta = (0.25, 0.4)
    for _ in range(10_000):
        p = rng.uniform(-3, 3, 2)
        q = quantize(p, eta)
        assert all(abs(a - b) <= h for a, b, h in zip(p, q, eta))


def test_lattice_count_matches_points(scalar_model):
    lat = Lattice.create(scalar_model.domain, 0.25)
    assert lat.count == len(lat.points()) == 5
    lat2 = Lattice.create([(-1, 1), (-0.5, 0.5)], (0.25, 0.25))
    assert lat2.count == len(lat2.points()) == 5 * 3


def test_snap_state_pitch():
    eta = snap_state_pitch([(-1.0, 1.0)], 0.3)
    assert eta == (0.25,)
    assert Lattice.create([(-1.0, 1.0)], eta).covers()
    eta2 = snap_state_pitch([(-2.0, 2.0), (-1.0, 1.0)], 0.7)
    for h, t in zip(eta2, (0.7, 0.7)):
        assert h <= t
    assert Lattice.create([(-2.0, 2.0), (-1.0, 1.0)], eta2).covers()


def test_snap_input_pitch():
    om = snap_input_pitch([(-0.1, 0.1)], 0.05)
    assert om == (0.1 / 3,)
    assert om[0] <= 0.05
    assert snap_input_pitch([(-0.1, 0.1)], 0.5) == (0.1,)
    assert snap_input_pitch([(0.2, 0.2)], 0.5) == (0.0,)


def _autonomous(drift_exprs, n=1, box=1.0, k=4.0):
    return SysModel(
        name="aut",
        n=n,
        m=0,
        p=0,
        r=1,
        drift=tuple(drift_exprs),
        diffusion=tuple((None,) for _ in range(n)),
        domain=tuple((-box, box) for _ in range(n)),
        input_box=(),
        dist_box=(),
        lf=1.0,
        lsigma=0.0,
        growth_k=k,
    )


def test_flow_linear_closed_form(scalar_model):
    res = flow_nominal(scalar_model, [1.0], [0.0], [0.0], 1.0)
    assert res.endpoint[0] == pytest.approx(math.exp(-1.0), abs=1e-9)
    assert not res.escaped
    res2 = flow_nominal(scalar_model, [0.0], [1.0], [0.0], 1.0)
    assert res2.endpoint[0] == pytest.approx(1.0 - math.exp(-1.0), abs=1e-9)


def test_flow_zero_drift_fixed_point():
    sys_model = _autonomous([Lit(0.0)])
    res = flow_nominal(sys_model, [0.3], None, None, 2.0)
    assert res.endpoint[0] == 0.3


def test_flow_substep_cap():
    sys_model = _autonomous([Neg(Var("x", 1))])
    with pytest.raises(AbstractionError, match="tolerance"):
        flow_nominal(sys_model, [1.0], None, None, 1.0, substeps=1, tol=0.0, max_substeps=64)


def test_equilibrium_required(scalar_model):
    shifted = dataclasses.replace(
        scalar_model, drift=(Bin("+", Neg(Var("x", 1)), Lit(1.0)),)
    )
    with pytest.raises(ModelError, match="origin"):
        build_abstraction(shifted, 0.5, 0.25, 0.1)


def test_equilibrium_self_loop(scalar_model):
    a = build_abstraction(scalar_model, 0.5, 0.25, 0.1)
    zero_state = a.states.index((0.0,))
    succ, ood = a.transitions[(zero_state, 0, 0)]
    assert succ == (zero_state,) and not ood


def test_boundary_tie_includes_both():
    # f = -x over tau = ln 2 halves the state: from 0.5 the endpoint 0.25
    # is exactly eta away from both 0 and 0.5
    sys_model = _autonomous([Neg(Var("x", 1))])
    a = build_abstraction(sys_model, math.log(2.0), 0.25, 0.0)
    si = a.states.index((0.5,))
    succ, _ = a.transitions[(si, 0, 0)]
    assert succ == (a.states.index((0.0,)), a.states.index((0.5,)))


def test_successor_counts_in_range(scalar_model):
    a = build_abstraction(scalar_model, 0.5, 0.125, 0.05)
    for (si, ui, di), (succ, ood) in a.transitions.items():
        if not ood:
            assert 1 <= len(succ) <= 2**scalar_model.n


def test_out_of_domain_flagged():
    # unstable f = x pushes boundary states out of D; transitions kept, marked
    sys_model = _autonomous([Var("x", 1)], k=1.0)
    a = build_abstraction(sys_model, 0.5, 0.25, 0.0)
    si = a.states.index((1.0,))
    succ, ood = a.transitions[(si, 0, 0)]
    assert ood and succ == ()
    zero, ood0 = a.transitions[(a.states.index((0.0,)), 0, 0)]
    assert not ood0 and zero == (a.states.index((0.0,)),)


def test_abstraction_vs_fine_integration_oracle(scalar_model):
    # independent route: plain RK4 at 10x the accepted substep count and a
    # brute-force scan over all grid states
    a = build_abstraction(scalar_model, 0.5, 0.25, 0.1, substeps=16)
    states = [s[0] for s in a.states]
    for (si, ui, di), (succ, ood) in a.transitions.items():
        x = states[si]
        u = a.inputs[ui][0]
        w = a.dists[di][0]
        steps = 320
        h = 0.5 / steps
        for _ in range(steps):
            k1 = -x + u + w
            k2 = -(x + 0.5 * h * k1) + u + w
            k3 = -(x + 0.5 * h * k2) + u + w
            k4 = -(x + h * k3) + u + w
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        expected = tuple(
            sorted(i for i, s in enumerate(states) if abs(s - x) <= 0.25 + 1e-9)
        )
        assert succ == expected


def test_max_cells_cap(scalar_model):
    with pytest.raises(AbstractionError, match="cap"):
        build_abstraction(scalar_model, 0.5, 0.001, 0.001, max_cells=100)


def test_pitch_validation_against_certificate(scalar_model, scalar_cert):
    with pytest.raises(AbstractionError, match="admissible"):
        build_abstraction(
            scalar_model, 0.5, 0.25, 0.1, eps=3.2, eps_tilde=(0.1,), cert=scalar_cert
        )
    with pytest.warns(UserWarning, match="building anyway"):
        build_abstraction(
            scalar_model, 0.5, 0.25, 0.1, eps=3.2, eps_tilde=(0.1,),
            cert=scalar_cert, force=True,
        )


def test_serialize_roundtrip(scalar_model):
    a = build_abstraction(scalar_model, 0.5, 0.25, 0.1, eps=3.2, eps_tilde=(0.1,))
    text = a.serialize()
    b = deserialize(text)
    assert a == b
    assert b.serialize() == text


def test_hash_detects_corruption(scalar_model):
    a = build_abstraction(scalar_model, 0.5, 0.25, 0.1)
    text = a.serialize()
    corrupted = text.replace("states 5", "states 5 ", 1)
    with pytest.raises(FormatError, match="hash"):
        deserialize(corrupted)
    with pytest.raises(FormatError, match="header"):
        deserialize("BOGUS v9\n" + text)


def test_empty_abstraction_roundtrip():
    empty = FiniteAbstraction(
        system="none", tau=0.5, eta=(0.25,), omega=(), eps=0.0, eps_tilde=(),
        states=(), inputs=(), dists=(), dist_blocks=(), dist_block_nodes=(),
        node_names=("none",), node_dims=(1,), external_names=(), transitions={},
    )
    text = empty.serialize()
    assert deserialize(text) == empty


def test_worker_determinism(scalar_model):
    texts = []
    for workers in (1, 2, 8):
        a = build_abstraction(scalar_model, 0.5, 0.125, 0.05, workers=workers)
        texts.append(a.serialize())
    assert texts[0] == texts[1] == texts[2]
    again = build_abstraction(scalar_model, 0.5, 0.125, 0.05)
    assert again.serialize() == texts[0]
