"""Absorbing layer: profile, chain coefficients, degeneracy, absorption."""

from __future__ import annotations

import numpy as np
import pytest

from axipic.constants import C0, EPS0, MU0
from axipic.constitutive import edge_mass_weights
from axipic.field_solver import (
    build_operators,
    estimate_dt,
    new_state,
    step_te,
    step_tm,
)
from axipic.mesh import rectangle_mesh
from axipic.pml import AbsorbingLayer, PmlProfile


def test_sigma_max_from_reflection_target() -> None:
    prof = PmlProfile(rho0=1.0, thickness=0.1, taper_order=3, reflection_target=1e-6)
    # Analytic integral of the cubic taper is sigma_max * d / 4.
    integral = prof.sigma_max * prof.thickness / 4.0
    assert np.exp(-2.0 * integral / (EPS0 * C0)) == pytest.approx(1e-6, rel=1e-12)


def test_sigma_profile_midpoint_and_clamp() -> None:
    prof = PmlProfile(rho0=1.0, thickness=0.2, taper_order=3)
    assert prof.sigma(np.array([1.1]))[0] == pytest.approx(prof.sigma_max / 8.0)
    assert prof.sigma(np.array([0.5]))[0] == 0.0
    assert prof.sigma(np.array([5.0]))[0] == prof.sigma_max


def test_explicit_sigma_max_is_kept() -> None:
    prof = PmlProfile(rho0=1.0, thickness=0.1, sigma_max=42.0)
    assert prof.sigma_max == 42.0


def layered_mesh():
    # Physical region rho < 1.0, layer 1.0..1.25.
    return rectangle_mesh(0.0, 0.4, 1.25, 0.05)


def test_layer_weights_match_constitutive_outside() -> None:
    m = layered_mesh()
    ops = build_operators(m, polarization="te", solver_mode="direct")
    prof = PmlProfile(rho0=1.0, thickness=0.25)
    dt = estimate_dt(ops)
    layer = AbsorbingLayer(ops, prof, dt)
    wz_plain, wr_plain = edge_mass_weights(m, ops.materials.eps)
    outside = layer.sigma_face == 0.0
    assert outside.sum() > 0
    np.testing.assert_array_equal(layer.w_z[outside], wz_plain[outside])
    np.testing.assert_array_equal(layer.w_rho[outside], wr_plain[outside])
    # Inside: the rho-component weight follows the stretched formula.
    inside = ~outside
    tau = 2.0 / dt
    rho = m.centroids[inside, 1]
    sig = layer.sigma_face[inside]
    expect = EPS0 * rho * tau / (sig / EPS0 + tau)
    np.testing.assert_allclose(layer.w_rho[inside], expect, rtol=1e-15)


def test_face_chain_u0_is_exactly_one() -> None:
    m = layered_mesh()
    ops = build_operators(m, polarization="te", solver_mode="direct")
    layer = AbsorbingLayer(ops, PmlProfile(rho0=1.0, thickness=0.25), estimate_dt(ops))
    assert np.all(layer._fu0 == 1.0)


@pytest.mark.parametrize("pol", ["te", "tm"])
def test_zero_conductivity_layer_is_bitwise_plain(pol: str) -> None:
    m = rectangle_mesh(0.0, 0.5, 0.8, 0.1, jitter=0.2, seed=7)
    ops = build_operators(m, polarization=pol, solver_mode="direct")
    dt = estimate_dt(ops)
    # Front radius beyond the mesh: no face carries any conductivity.
    layer = AbsorbingLayer(ops, PmlProfile(rho0=2.0, thickness=0.1), dt)
    assert not layer.has_pml
    assert layer.A_par is ops.edge_mass

    rng = np.random.default_rng(17)
    a, b = new_state(ops), new_state(ops)
    a.edge[:] = rng.standard_normal(a.edge.size)
    a.face[:] = rng.standard_normal(a.face.size)
    b.edge[:] = a.edge.copy()
    b.face[:] = a.face.copy()
    step = step_te if pol == "te" else step_tm
    j_rng = np.random.default_rng(99)
    for _ in range(200):
        j = j_rng.standard_normal(a.edge.size if pol == "te" else a.face.size)
        step(ops, a, dt, j)
        layer.step(b, j)
        np.testing.assert_array_equal(a.edge, b.edge)
        np.testing.assert_array_equal(a.face, b.face)


def _interior_energy(m, ops, state, rho_limit: float) -> float:
    """Mass-weighted energy restricted to the region below rho_limit."""
    faces = m.centroids[:, 1] < rho_limit
    mid_rho = (m.nodes[m.edges[:, 0], 1] + m.nodes[m.edges[:, 1], 1]) / 2.0
    red = ops.dofs.edge_red_id
    keep = np.unique(red[(mid_rho < rho_limit) & (red >= 0)])
    e = np.zeros_like(state.edge)
    e[keep] = state.edge[keep]
    e_part = 0.5 * e @ (ops.edge_mass @ e)
    f_part = 0.5 * np.sum(state.face[faces] ** 2 * ops.face_inv[faces])
    return float(e_part + f_part)


@pytest.mark.parametrize("pol", ["te", "tm"])
def test_layer_absorbs_radial_pulse(pol: str) -> None:
    m = layered_mesh()
    ops = build_operators(m, polarization=pol, periodic=True, solver_mode="direct")
    dt = estimate_dt(ops)
    prof = PmlProfile(rho0=1.0, thickness=0.25)
    layer = AbsorbingLayer(ops, prof, dt)
    assert layer.has_pml

    st = new_state(ops)
    # z-independent ring pulse: a pure radially-propagating wave, so it
    # meets the layer head on instead of at grazing incidence.
    st.face[:] = np.exp(-((m.centroids[:, 1] - 0.5) ** 2) / 0.01) * m.areas
    if pol == "tm":
        # Uniform e_perp is an exact curl-free null mode of the reduced
        # system (the rows that would forbid its loop EMF are the
        # eliminated boundary edges); nothing can absorb it, so measure
        # the propagating remainder.
        null = 1.0 / ops.face_inv
        weight = ops.face_inv * null
        st.face -= null * (st.face @ weight) / (null @ weight)
    start = _interior_energy(m, ops, st, 0.95)

    n_steps = int(5 * 1.25 / C0 / dt)
    for _ in range(n_steps):
        layer.step(st)
    end = _interior_energy(m, ops, st, 0.95)
    assert end < 1e-4 * start


def test_layer_region_must_be_vacuum() -> None:
    m = layered_mesh()
    from axipic.constitutive import MaterialMap

    mats = MaterialMap.vacuum(m)
    mats.eps[m.centroids[:, 1] > 1.1, 0] *= 2.0
    ops = build_operators(m, mats, polarization="te", solver_mode="direct")
    with pytest.raises(ValueError):
        AbsorbingLayer(ops, PmlProfile(rho0=1.0, thickness=0.25), 1e-11)
