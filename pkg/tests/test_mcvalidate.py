import dataclasses
import math

import numpy as np
import pytest

from stochabs import certify, gridabs, mcvalidate
from stochabs.expr import Bin, Lit, Pow, Var
from stochabs.mcvalidate import (
    simulate_em,
    simulate_ensemble,
    validate_bisim_step,
    validate_delta_iss,
    validate_increment_bound,
    validate_moment_closeness,
)

SEED = 1729


def test_em_degenerates_to_explicit_euler(scalar_det_model):
    steps = 64
    path = simulate_em(scalar_det_model, [1.0], [0.0], [0.0], 1.0, steps, seed=SEED)
    x = 1.0
    expected = [x]
    for _ in range(steps):
        x = x + (-x) * (1.0 / steps)
        expected.append(x)
    assert path.states[:, 0].tolist() == expected
    assert not path.diverged


def test_constant_path_for_zero_dynamics(scalar_det_model):
    frozen = dataclasses.replace(scalar_det_model, drift=(Lit(0.0),))
    path = simulate_em(frozen, [0.7], [0.0], [0.0], 1.0, 32, seed=SEED)
    assert np.all(path.states == 0.7)


def test_divergence_flagged(scalar_det_model):
    # cubic blow-up from a large start leaves the finite range quickly
    cubic = dataclasses.replace(
        scalar_det_model, drift=(Bin("*", Lit(1e3), Pow(Var("x", 1), 3)),)
    )
    path = simulate_em(cubic, [5.0], [0.0], [0.0], 1.0, 16, seed=SEED)
    assert path.diverged and path.diverged_at is not None
    # frozen after divergence
    assert path.states[-1, 0] == path.states[path.diverged_at, 0]


def test_single_path_reproducible_inside_ensemble(scalar_model):
    vals, div = simulate_ensemble(
        scalar_model, [1.0], [0.05], [0.2], 1.0, 128, 16, seed=SEED, checkpoint_steps=[64, 128]
    )
    for k in (0, 5, 15):
        path = simulate_em(scalar_model, [1.0], [0.05], [0.2], 1.0, 128, seed=SEED, path_index=k)
        assert vals[k, 0, 0] == path.states[64, 0]
        assert vals[k, 1, 0] == path.states[128, 0]
    assert not div.any()


def test_ensemble_chunk_invariance(scalar_model):
    kw = dict(tau=0.5, steps=64, n_paths=23, seed=SEED, checkpoint_steps=[64])
    a, _ = simulate_ensemble(scalar_model, [0.5], [0.0], [0.1], chunk=7, **kw)
    b, _ = simulate_ensemble(scalar_model, [0.5], [0.0], [0.1], chunk=4096, **kw)
    assert np.array_equal(a, b)


def test_ensemble_mean_matches_closed_form(scalar_model):
    # E xi(t) = x0 e^{-t} for the linear system
    n = 20_000
    vals, _ = simulate_ensemble(
        scalar_model, [1.0], [0.0], [0.0], 1.0, 2048, n, seed=3, checkpoint_steps=[2048]
    )
    end = vals[:, 0, 0]
    se = end.std(ddof=1) / math.sqrt(n)
    assert abs(end.mean() - math.exp(-1.0)) <= 3.0 * se


def test_strong_convergence_slope(scalar_model):
    # EM strong order ~ 1/2 against the closed-form solution driven by the
    # same Brownian increments
    n = 2000
    errs = []
    step_list = [256, 512, 1024, 2048]
    for steps in step_list:
        vals, _ = simulate_ensemble(
            scalar_model, [1.0], [0.0], [0.0], 1.0, steps, n, seed=11, checkpoint_steps=[steps]
        )
        sq = 0.0
        dt = 1.0 / steps
        for k in range(n):
            z = np.random.default_rng([11, k]).standard_normal((steps, 1))
            b_t = math.sqrt(dt) * float(z.sum())
            exact = math.exp((-1.0 - 0.125) * 1.0 + 0.5 * b_t)
            sq += (vals[k, 0, 0] - exact) ** 2
        errs.append(math.sqrt(sq / n))
    slope, _ = np.polyfit([math.log2(1.0 / s) for s in step_list], [math.log2(e) for e in errs], 1)
    assert 0.3 <= slope <= 0.7


def test_moment_closeness_passes(scalar_model, scalar_kit):
    rep = validate_moment_closeness(scalar_model, scalar_kit, [0.5], 0.5, n_paths=4000, seed=SEED)
    assert rep.passed and rep.diverged == 0
    assert [r.label for r in rep.rows] == ["0.125", "0.25", "0.5"]
    for r in rep.rows:
        assert r.empirical <= r.bound  # wide margin expected, not just 3 SE


def test_moment_closeness_zero_noise(scalar_det_model, det_kit):
    # bound is exactly zero; only the integration slack absorbs the
    # Euler-vs-RK4 discrepancy
    rep = validate_moment_closeness(scalar_det_model, det_kit, [0.5], 0.5, n_paths=50, seed=SEED)
    assert rep.passed
    for r in rep.rows:
        assert r.bound == 0.0 and r.std_error <= 1e-20


def test_increment_bound_passes(scalar_model):
    rep = validate_increment_bound(scalar_model, [0.5], 0.5, n_paths=4000, seed=SEED)
    assert rep.passed
    assert len(rep.rows) == 15  # upper triangle incl. diagonal of 5x5
    diag = [r for r in rep.rows if r.empirical == 0.0 and r.bound == 0.0]
    assert len(diag) >= 5


def test_increment_bound_monotone_in_growth_constant(scalar_model):
    # over-declaring K only adds slack
    loose = dataclasses.replace(scalar_model, growth_k=16.0)
    tight = validate_increment_bound(scalar_model, [0.5], 0.5, n_paths=500, seed=SEED)
    slack = validate_increment_bound(loose, [0.5], 0.5, n_paths=500, seed=SEED)
    assert slack.passed
    for a, b in zip(tight.rows, slack.rows):
        assert b.bound >= a.bound


def test_delta_iss_passes(scalar_model, scalar_kit):
    rep = validate_delta_iss(
        scalar_model, scalar_kit, 0.5,
        a=[0.5], a2=[-0.5], u=[0.1], u2=[-0.1], w=[0.3], w2=[-0.3],
        n_paths=4000, seed=SEED,
    )
    assert rep.passed


def test_delta_iss_identical_configs(scalar_model, scalar_kit):
    rep = validate_delta_iss(
        scalar_model, scalar_kit, 0.5,
        a=[0.5], a2=[0.5], u=[0.1], u2=[0.1], w=[0.3], w2=[0.3],
        n_paths=200, seed=SEED,
    )
    assert rep.passed
    for r in rep.rows:
        assert r.empirical == 0.0  # same noise, same dynamics


def test_delta_iss_plateau(scalar_model, scalar_kit):
    # for large horizons the envelope decays to the mismatch plateau and
    # the empirical distance stays below it
    kit = scalar_kit
    rep = validate_delta_iss(
        scalar_model, kit, 4.0,
        a=[0.9], a2=[-0.9], u=[0.1], u2=[-0.1], w=[0.5], w2=[-0.5],
        n_paths=3000, seed=SEED, steps=4096,
    )
    assert rep.passed
    plateau = kit.rho_u(0.2) + kit.rho_d(1.0)
    last = rep.rows[-1]
    assert last.bound <= plateau * 1.05
    assert last.empirical <= plateau


def _frozen_params(model, cert, kit, tau, eps, etn):
    omega = gridabs.snap_input_pitch(model.input_box, 0.2)
    bound = certify.pitch_upper_bound(kit, model, tau, eps, omega[0], eps_tilde_norm=etn)
    eta = gridabs.snap_state_pitch(model.domain, min(bound, eps))
    return eta, omega


def test_bisim_step_passes(scalar_model, scalar_cert, scalar_kit):
    tau, eps, etn = 0.5, 3.2, 0.1
    eta, omega = _frozen_params(scalar_model, scalar_cert, scalar_kit, tau, eps, etn)
    a = gridabs.build_abstraction(
        scalar_model, tau, eta, omega, eps=eps, eps_tilde=(etn,), cert=scalar_cert
    )
    rep = validate_bisim_step(
        scalar_model, scalar_cert, scalar_kit, a, eps, eps_tilde_norm=etn,
        n_pairs=40, paths_per_pair=50, seed=SEED,
    )
    assert rep.passed and rep.skipped == 0


def test_bisim_step_deterministic_contraction(scalar_det_model, det_cert, det_kit):
    # sigma == 0, no mismatch: pure contraction of the relation level
    tau, eps = 0.5, 0.5
    omega = gridabs.snap_input_pitch(scalar_det_model.input_box, 0.0333333)
    bound = certify.pitch_upper_bound(det_kit, scalar_det_model, tau, eps, omega[0])
    eta = gridabs.snap_state_pitch(scalar_det_model.domain, bound)
    a = gridabs.build_abstraction(scalar_det_model, tau, eta, omega, eps=eps, cert=det_cert)
    rep = validate_bisim_step(
        scalar_det_model, det_cert, det_kit, a, eps,
        n_pairs=150, paths_per_pair=1, seed=SEED, steps=512,
    )
    assert rep.passed


def test_bisim_step_negative_control(scalar_det_model, det_cert, det_kit):
    # grossly inflated pitch (an order of magnitude) must produce observed
    # violations; statistically robust at this pair count but inherently
    # a sampled negative control
    tau, eps = 0.5, 0.5
    omega = gridabs.snap_input_pitch(scalar_det_model.input_box, 0.0333333)
    bound = certify.pitch_upper_bound(det_kit, scalar_det_model, tau, eps, omega[0])
    eta_bad = gridabs.snap_state_pitch(scalar_det_model.domain, 12.0 * bound)
    assert eta_bad[0] >= 10.0 * bound
    with pytest.warns(UserWarning):
        bad = gridabs.build_abstraction(
            scalar_det_model, tau, eta_bad, omega, eps=eps, cert=det_cert, force=True
        )
    rep = validate_bisim_step(
        scalar_det_model, det_cert, det_kit, bad, eps,
        n_pairs=2000, paths_per_pair=1, seed=2, steps=512,
    )
    violations = sum(1 for r in rep.rows if not r.passed)
    assert violations >= 1
    assert not rep.passed


def test_divergence_ratio_fails_report(scalar_det_model):
    cubic = dataclasses.replace(
        scalar_det_model, drift=(Bin("*", Lit(1e3), Pow(Var("x", 1), 3)),),
        domain=((-6.0, 6.0),),
    )
    rep = mcvalidate.BoundReport(check="x", n_paths=100, diverged=5)
    assert not rep.passed  # > 1% divergence fails even with no rows
    path = simulate_em(cubic, [5.0], [0.0], [0.0], 1.0, 16, seed=SEED)
    assert path.diverged
