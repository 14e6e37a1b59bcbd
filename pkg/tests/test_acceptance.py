"""Acceptance gate: one test per numbered criterion, at the stated tolerances.

Each test prints a single ``criterion N: PASS/FAIL`` line with the measured
quantities so the suite output doubles as the acceptance report.  Criteria
with several sub-checks collect all of them before asserting, so a failure
message still shows every measurement.

Known red: the absorption bound inside criterion 6 (residual physical-region
energy < 1e-6 of peak at three radial transit times).  The measured floor is
~2e-3 (TE) / ~2e-2 (TM) and is insensitive to every layer knob; the analysis
lives in the project notes.  The test asserts the stated bound anyway.
"""

from __future__ import annotations

import math
import time
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import hankel2

from axipic.constants import C0, EPS0, MU0, M_E, Q_E
from axipic.constitutive import (
    MaterialMap,
    assemble_weighted,
    build_hodges,
    edge_mass_weights,
    face_hodge_inv_diag,
    inplane_kernels,
)
from axipic.driver import Simulation, fft_spectrum, make_config, preset, spectral_peak
from axipic.field_solver import (
    build_operators,
    estimate_dt,
    new_state,
    step_te,
    step_tm,
    te_energy,
    tm_energy,
)
from axipic.mesh import build_incidence, rectangle_mesh, whitney_eval
from axipic.pic import ParticleMover, ParticleSet
from axipic.pml import AbsorbingLayer, PmlProfile

DT_MM = 1e-3 / C0


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _silence(cfg: dict) -> dict:
    """Run without writing any artifacts."""
    cfg["output"]["directory"] = "unused"
    cfg["output"]["probe_file"] = ""
    cfg["output"]["config_echo"] = ""
    cfg["output"]["summary_file"] = ""
    cfg["output"]["snapshot_stride"] = 0
    return cfg


def masked_energy_fn(sim: Simulation, pol: str, mask: np.ndarray):
    """Closure evaluating the field energy restricted to the masked faces.

    The edge quadratic is reassembled with face-masked weights so an edge
    shared between regions contributes only its masked-face part.
    """
    m, mats, ops = sim.mesh, sim.materials, sim.ops[pol]
    kern = inplane_kernels(m)
    tensor = mats.eps if pol == "te" else mats.mu
    wz, wr = edge_mass_weights(m, tensor)
    S = ops.dofs.S_e
    A = (S.T @ assemble_weighted(m, wz * mask, wr * mask, kern) @ S).tocsr()
    tphi = mats.mu[:, 2] if pol == "te" else mats.eps[:, 2]
    dinv = face_hodge_inv_diag(m, tphi) * mask
    st = sim.states[pol]
    return lambda: 0.5 * (st.edge @ (A @ st.edge)) + 0.5 * (st.face @ (dinv * st.face))


def _warm_particle_kernels() -> None:
    """Touch the jitted particle paths once so timed budgets exclude JIT."""
    m = rectangle_mesh(-0.5, 0.5, 1.0, 0.25)
    mover = ParticleMover(m, periodic=True)
    p = ParticleSet.single(m, z=0.0, rho=0.5, charge=-Q_E, mass=M_E, v_z=1e6)
    mover.gather(p, ext_B=np.array([0.0, 0.0, 1e-4]))
    mover.push(p, np.zeros((1, 3)), np.full((1, 3), 1e-4), 1e-12)
    _, mid, midf = mover.advance(p, 1e-12)
    mover.deposit_azimuthal(p, mid, midf)


# ---------------------------------------------------------------------------
# criterion 1: exact discrete identities
# ---------------------------------------------------------------------------

def test_criterion_1_exact_discrete_identities() -> None:
    meshes = {
        "8-triangle": rectangle_mesh(0.0, 1.0, 1.0, 0.5),
        "200-triangle": rectangle_mesh(-0.5, 0.5, 1.0, 0.1),
    }
    assert meshes["8-triangle"].n_faces == 8
    assert meshes["200-triangle"].n_faces == 200
    for name, m in meshes.items():
        t0 = time.perf_counter()
        inc = build_incidence(m)
        full = (inc.C @ inc.G).tocsr()
        full.eliminate_zeros()
        assert full.nnz == 0, f"full-mesh C*G != 0 on {name}"
        # per-polarization operators under their regularity walls, where every
        # edge stays an unknown and the quotient gradient telescopes exactly
        for pol, wall in (("te", "pmc"), ("tm", "pec")):
            ops = build_operators(m, polarization=pol, axis_bc=wall, rim_bc=wall)
            prod = (ops.C @ ops.dofs.G).tocsr()
            prod.eliminate_zeros()
            assert prod.nnz == 0, f"C*G != 0 on {name} ({pol})"
        hs = build_hodges(m)
        for label, A in (("star_eps", hs.star_eps), ("star_mu", hs.star_mu)):
            diff = (A - A.T).tocsr()
            diff.eliminate_zeros()
            assert diff.nnz == 0, f"{label} not bitwise symmetric on {name}"
        # vacuum duality, entrywise <= 1e-14 relative
        lhs = hs.star_mu.tocsr().sorted_indices()
        rhs = hs.star_eps.tocsr().sorted_indices()
        assert (lhs.indptr == rhs.indptr).all() and (lhs.indices == rhs.indices).all()
        a, b = lhs.data / MU0, rhs.data / EPS0
        nz = b != 0.0
        assert not a[~nz].any(), f"duality pattern mismatch on {name}"
        rel = np.abs(a[nz] - b[nz]) / np.abs(b[nz])
        assert rel.max() <= 1e-14, f"edge duality off by {rel.max():.2e} on {name}"
        rel_f = np.abs(EPS0 * hs.star_eps_inv - MU0 * hs.star_mu_inv) / (
            MU0 * hs.star_mu_inv)
        assert rel_f.max() <= 1e-14, f"face duality off by {rel_f.max():.2e} on {name}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"{name} identities took {elapsed:.2f} s (>= 1 s)"
    print("criterion 1: PASS - C*G = 0, bitwise Hodge symmetry, vacuum duality "
          "<= 1e-14 on 8- and 200-triangle meshes, < 1 s each")


# ---------------------------------------------------------------------------
# criterion 2: axis robustness
# ---------------------------------------------------------------------------

def test_criterion_2_axis_robustness() -> None:
    coarse = rectangle_mesh(-0.5, 0.5, 1.0, 0.05)
    fine = rectangle_mesh(-0.5, 0.5, 1.0, 0.025)
    axis_faces = int((coarse.nodes[coarse.faces, 1] < 1e-9).any(axis=1).sum())
    assert axis_faces >= 20, f"only {axis_faces} faces touch the axis"

    hs_c = build_hodges(coarse)
    hs_f = build_hodges(fine)
    for hs, tag in ((hs_c, "coarse"), (hs_f, "fine")):
        for A in (hs.star_eps, hs.star_mu):
            assert np.isfinite(A.data).all(), f"non-finite Hodge entries ({tag})"
        for diag in (hs.star_eps_inv, hs.star_mu_inv):
            assert np.isfinite(diag).all() and (diag > 0).all(), \
                f"face Hodge diagonal not positive ({tag})"

    lam_min = min(
        np.linalg.eigvalsh(hs_c.star_eps.toarray())[0],
        np.linalg.eigvalsh(hs_c.star_mu.toarray())[0],
    )
    assert lam_min > 0, f"edge Hodge not SPD (lambda_min = {lam_min:.3e})"

    growth = max(
        np.abs(hs_f.star_eps.data).max() / np.abs(hs_c.star_eps.data).max(),
        np.abs(hs_f.star_mu.data).max() / np.abs(hs_c.star_mu.data).max(),
    )
    assert growth < 2.0, f"edge-mass entries grew {growth:.2f}x under refinement"
    print(f"criterion 2: PASS - {axis_faces} axis faces, SPD "
          f"(lambda_min = {lam_min:.3e}), entry growth {growth:.3f}x < 2x "
          "under one 4x refinement")


# ---------------------------------------------------------------------------
# criterion 3: charge conservation
# ---------------------------------------------------------------------------

def test_criterion_3_charge_conservation() -> None:
    _warm_particle_kernels()
    m = rectangle_mesh(-0.625, 0.625, 0.5, 0.05, jitter=0.3, seed=7)
    assert m.n_faces == 500
    G = build_incidence(m).G
    mover = ParticleMover(m, periodic=True, rho_reflect=0.45)
    rng = np.random.default_rng(11)
    dt = 1e-10
    charge = -1.602e-13

    def hat_charge(p: ParticleSet) -> np.ndarray:
        rho = np.zeros(m.n_nodes)
        lam, _, _ = whitney_eval(m, int(p.face[0]), p.pos[0])
        rho[m.faces[int(p.face[0])]] += p.charge[0] * lam
        return rho

    def fold(v: np.ndarray) -> np.ndarray:
        out = v.copy()
        for a, b in m.periodic_nodes:
            out[a] += out[b]
            out[b] = 0.0
        return out

    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = ParticleSet.single(
            m, z=rng.uniform(-0.6, 0.6), rho=rng.uniform(0.02, 0.43),
            charge=charge, mass=9.1e-25)
        p.vel[0] = rng.uniform(-1.0, 1.0, 3) * 1.5e9
        rho0 = hat_charge(p)
        j_full, _, _ = mover.advance(p, dt)
        assert p.face[0] >= 0
        residual = fold(G.T @ j_full - (hat_charge(p) - rho0) / dt)
        worst = max(worst, float(np.abs(residual).max()))
    elapsed = time.perf_counter() - t0
    bound = 1e-12 * abs(charge) / dt
    assert worst < bound, f"continuity residual {worst:.3e} >= {bound:.3e}"
    assert elapsed < 10.0, f"1000 paths took {elapsed:.1f} s (>= 10 s)"
    print(f"criterion 3: PASS - 1000 paths on an irregular 500-face mesh, "
          f"worst residual {worst:.3e} < 1e-12*|Q/dt| = {bound:.3e}, "
          f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# criterion 4: energy conservation
# ---------------------------------------------------------------------------

def test_criterion_4_energy_conservation() -> None:
    m = rectangle_mesh(-0.625, 0.625, 0.5, 0.05, jitter=0.3, seed=7)
    assert m.n_faces == 500
    t0 = time.perf_counter()
    drifts = {}
    for pol, axis_bc in (("te", "pmc"), ("tm", "pec")):
        ops = build_operators(m, polarization=pol, axis_bc=axis_bc,
                              solver_mode="direct")
        dt = 0.9 * estimate_dt(ops, safety=1.0)
        rng = np.random.default_rng(5)
        st = new_state(ops)
        st.edge[:] = rng.standard_normal(st.edge.size)
        st.face[:] = rng.standard_normal(st.face.size)
        step = step_te if pol == "te" else step_tm
        energy = te_energy if pol == "te" else tm_energy
        e0 = None
        drift = 0.0
        for _ in range(10_000):
            edge_prev = st.edge.copy()
            face_prev = st.face.copy()
            step(ops, st, dt)
            if pol == "te":
                en = energy(ops, edge_prev, face_prev, st.face)
            else:
                en = energy(ops, face_prev, edge_prev, st.edge)
            if e0 is None:
                e0 = en
            drift = max(drift, abs(en - e0) / abs(e0))
        drifts[pol] = drift
        assert drift < 1e-10, f"{pol} staggered energy drift {drift:.3e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"energy runs took {elapsed:.1f} s (>= 60 s)"
    print(f"criterion 4: PASS - 10^4 source-free steps at 0.9x stability, "
          f"drift te {drifts['te']:.3e} / tm {drifts['tm']:.3e} < 1e-10, "
          f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# criterion 5: gyromotion oracle
# ---------------------------------------------------------------------------

def _kasa_circle(points: np.ndarray) -> tuple[float, float, float]:
    """Least-squares circle fit; returns (center_z, center_rho, radius)."""
    z, r = points[:, 0], points[:, 1]
    M = np.column_stack([2 * z, 2 * r, np.ones_like(z)])
    b = z * z + r * r
    (cz, cr, c), *_ = np.linalg.lstsq(M, b, rcond=None)
    return cz, cr, math.sqrt(c + cz * cz + cr * cr)


def _push_orbit_error(dt: float, n_steps: int) -> float:
    """Pure-pusher position error after n_steps in a uniform azimuthal field."""
    m = rectangle_mesh(-0.5, 0.5, 1.125, 0.15)
    mover = ParticleMover(m, periodic=True)
    B0 = 8.53e-4
    q, mass = -Q_E, M_E
    omega_s = q * B0 / mass          # signed rotation rate of v_z + i*v_rho
    v0 = 0.025 * C0
    p = ParticleSet.single(m, z=0.0, rho=0.3, charge=q, mass=mass)
    # leapfrog staggering: the stored velocity lives at t = -dt/2
    w_half = v0 * np.exp(-1j * omega_s * (-dt / 2.0))
    p.vel[0] = (w_half.real, w_half.imag, 0.0)
    E = np.zeros((1, 3))
    B = np.array([[0.0, 0.0, B0]])
    for _ in range(n_steps):
        mover.push(p, E, B, dt)
        mover.advance(p, dt)
    t_end = n_steps * dt
    exact = (0.0 + 0.3j) + v0 * (1.0 - np.exp(-1j * omega_s * t_end)) / (
        1j * omega_s)
    err = abs(complex(p.pos[0, 0], p.pos[0, 1]) - exact)
    return float(err)


def test_criterion_5_gyromotion_oracle() -> None:
    _warm_particle_kernels()
    omega_ref = abs(Q_E) * 8.53e-4 / M_E       # 1.50e8 rad/s
    period_steps = int(round(2 * math.pi / omega_ref / DT_MM))
    cfg = _silence(preset("gyromotion-pmc"))
    cfg["mesh"]["h"] = 0.0335                   # ~2k-face desk mesh
    cfg["probes"]["stride"] = 16
    cfg["run"]["steps"] = 5 * period_steps      # five Larmor periods
    sim = Simulation(cfg)
    assert 1800 <= sim.mesh.n_faces <= 2400
    steps = cfg["run"]["steps"]
    pos = np.empty((steps // 4 + 1, 2))
    pos[0] = sim.particles.pos[0]
    k = [0]

    def record(n: int) -> None:
        if (n + 1) % 4 == 0:
            k[0] += 1
            pos[k[0]] = sim.particles.pos[0]

    t0 = time.perf_counter()
    sim.run(on_step=record)
    elapsed = time.perf_counter() - t0

    results: list[str] = []
    ok = True

    # orbit radius from the last Larmor period
    last_period = pos[:k[0] + 1][-(period_steps // 4):]
    _, _, radius = _kasa_circle(last_period)
    r_err = abs(radius - 0.05) / 0.05
    good = r_err < 0.01
    ok &= good
    results.append(f"radius {radius:.5f} m ({'PASS' if good else 'FAIL'}, "
                   f"err {100 * r_err:.2f}% vs 1%)")

    # probe spectrum fundamental
    rows = np.array(sim.probe_rows)
    b_phi = rows[:, 4]                          # te columns: E_z, E_rho, B_phi
    freq, amp = fft_spectrum(b_phi, DT_MM * 16)
    f_peak, _ = spectral_peak(freq, amp, 1.0e7, 4.0e7)
    w_err = abs(2 * math.pi * f_peak - 1.50e8) / 1.50e8
    good = w_err < 0.02
    ok &= good
    results.append(f"spectrum peak {2 * math.pi * f_peak:.4e} rad/s "
                   f"({'PASS' if good else 'FAIL'}, err {100 * w_err:.2f}% vs 2%)")

    # O(dt^2) convergence of the pusher
    n1 = int(round(2 * math.pi / omega_ref / DT_MM))
    e1 = _push_orbit_error(DT_MM, n1)
    e2 = _push_orbit_error(DT_MM / 2, 2 * n1)
    ratio = e1 / e2
    good = 3.2 <= ratio <= 4.8
    ok &= good
    results.append(f"dt-halving error ratio {ratio:.2f} "
                   f"({'PASS' if good else 'FAIL'}, window 4 +- 0.8)")

    good = elapsed < 30.0
    ok &= good
    results.append(f"runtime {elapsed:.1f} s ({'PASS' if good else 'FAIL'} vs 30 s)")

    line = f"criterion 5: {'PASS' if ok else 'FAIL'} - " + "; ".join(results)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 6: PML absorption (known red on the 1e-6 bound; see module docstring)
# ---------------------------------------------------------------------------

def _desk_surface_preset(name: str) -> dict:
    cfg = _silence(preset(name))
    cfg["mesh"]["h"] = 0.025
    cfg["mesh"]["rho_max"] = 1.25
    cfg["pml"]["thickness"] = 0.25              # keep the 10-element-layer rule
    cfg["run"]["steps"] = int((1e-9 + 3.0 / C0) / DT_MM) + 2
    return cfg


def test_criterion_6_pml_absorption() -> None:
    t0 = time.perf_counter()
    results: list[str] = []
    ok = True

    # (a) post-pulse residual energy after three radial transit times
    for name, pol in (("te-surface-current", "te"), ("tm-surface-current", "tm")):
        cfg = _desk_surface_preset(name)
        sim = Simulation(cfg)
        energy = masked_energy_fn(sim, pol, sim.mesh.centroids[:, 1] < 1.0)
        peak = [0.0]

        def track(n: int) -> None:
            peak[0] = max(peak[0], energy())

        sim.run(on_step=track)
        ratio = energy() / peak[0]
        good = ratio < 1e-6
        ok &= good
        results.append(f"{pol} residual/peak {ratio:.3e} "
                       f"({'PASS' if good else 'FAIL'} vs 1e-6)")

    # (b) sigma = 0 degeneracy against plain stepping, 1000 steps
    m = rectangle_mesh(-0.625, 0.625, 0.5, 0.05, jitter=0.3, seed=7)
    worst = 0.0
    for pol in ("te", "tm"):
        ops = build_operators(m, polarization=pol, solver_mode="direct")
        dt = estimate_dt(ops)
        layer = AbsorbingLayer(ops, PmlProfile(rho0=0.2, thickness=0.3,
                                               sigma_max=0.0), dt)
        rng = np.random.default_rng(23)
        a, b = new_state(ops), new_state(ops)
        a.edge[:] = rng.standard_normal(a.edge.size)
        a.face[:] = rng.standard_normal(a.face.size)
        b.edge[:] = a.edge.copy()
        b.face[:] = a.face.copy()
        step = step_te if pol == "te" else step_tm
        for _ in range(1000):
            step(ops, a, dt)
            layer.step(b)
        scale = max(np.abs(a.edge).max(), np.abs(a.face).max())
        worst = max(worst,
                    max(np.abs(a.edge - b.edge).max(),
                        np.abs(a.face - b.face).max()) / scale)
    good = worst <= 1e-13
    ok &= good
    results.append(f"sigma=0 degeneracy {worst:.1e} "
                   f"({'PASS' if good else 'FAIL'} vs 1e-13)")

    # (c) PMC-closed control retains more than half of peak
    cfg = _desk_surface_preset("te-surface-current")
    cfg["pml"]["enabled"] = False
    cfg["mesh"]["rho_max"] = 1.0
    sim = Simulation(cfg)
    energy = masked_energy_fn(sim, "te", np.ones(sim.mesh.n_faces, dtype=bool))
    peak = [0.0]

    def track_pmc(n: int) -> None:
        peak[0] = max(peak[0], energy())

    sim.run(on_step=track_pmc)
    retained = energy() / peak[0]
    good = retained > 0.5
    ok &= good
    results.append(f"pmc control retains {retained:.3f} "
                   f"({'PASS' if good else 'FAIL'} vs > 0.5)")

    elapsed = time.perf_counter() - t0
    good = elapsed < 180.0
    ok &= good
    results.append(f"runtime {elapsed:.0f} s ({'PASS' if good else 'FAIL'} vs 180 s)")

    line = f"criterion 6: {'PASS' if ok else 'FAIL'} - " + "; ".join(results)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 7: reflector placement study
# ---------------------------------------------------------------------------

def _ring_run(case: int | None) -> tuple[Simulation, np.ndarray, float]:
    """Run a desk-scale ring case; returns (sim, probe rows, max layer energy).

    ``case=None`` is the far-layer reference: the layer front retreats to
    rho0 = 1.35 on an extended copy of the same structured mesh, with the
    case-3 reflector, so the shared region is element-identical and only the
    layer position differs.
    """
    cfg = _silence(preset(f"ring-near-pml-case{case if case else 3}"))
    cfg["mesh"]["h"] = 0.025
    if case is None:
        cfg["mesh"]["rho_max"] = 1.6
        cfg["pml"]["rho0"] = 1.35
        cfg["pml"]["thickness"] = 0.25
    sim = Simulation(cfg)
    rho0 = cfg["pml"]["rho0"]
    inside = (sim.mesh.centroids[:, 1] > rho0) & (
        sim.mesh.centroids[:, 1] < rho0 + cfg["pml"]["thickness"])
    fns = [masked_energy_fn(sim, pol, inside) for pol in ("te", "tm")]
    worst = [0.0]

    def track(n: int) -> None:
        if (n + 1) % 20 == 0:
            worst[0] = max(worst[0], sum(f() for f in fns))

    sim.run(on_step=track)
    return sim, np.array(sim.probe_rows), worst[0]


def test_criterion_7_reflector_placement() -> None:
    _warm_particle_kernels()
    t0 = time.perf_counter()
    spurious = {}
    probes = {}
    for case in (1, 2, 3):
        _, rows, layer_peak = _ring_run(case)
        spurious[case] = layer_peak
        probes[case] = rows
    _, rows_ref, _ = _ring_run(None)

    results = []
    ok = True
    good = spurious[1] > spurious[2] > spurious[3]
    ok &= good
    results.append(
        "layer-interior energy case1 %.3e > case2 %.3e > case3 %.3e (%s)"
        % (spurious[1], spurious[2], spurious[3], "PASS" if good else "FAIL"))

    # case-3 perturbation at the probe, against the far-layer reference.
    # The near-field and its perturbation are field vectors; compare their
    # magnitudes in impedance-consistent units (E as-is, c*B and eta0*H),
    # so trace components with tiny absolute scales cannot dominate the
    # ratio the way per-component normalization would let them.
    eta0 = math.sqrt(MU0 / EPS0)
    w = np.array([1.0, 1.0, C0, 1.0, eta0, eta0])
    diff = (probes[3][:, 2:] - rows_ref[:, 2:]) * w
    ref = rows_ref[:, 2:] * w
    pert = float(np.linalg.norm(diff, axis=1).max()
                 / np.linalg.norm(ref, axis=1).max())
    in_plane_e = float(np.linalg.norm(diff[:, 0:2], axis=1).max()
                       / np.linalg.norm(ref[:, 0:2], axis=1).max())
    in_plane_h = float(np.linalg.norm(diff[:, 4:6], axis=1).max()
                       / np.linalg.norm(ref[:, 4:6], axis=1).max())
    good = pert < 0.05
    ok &= good
    results.append(
        f"case3 probe perturbation {100 * pert:.2f}% of the near-field "
        f"({'PASS' if good else 'FAIL'} vs 5%; in-plane E {100 * in_plane_e:.2f}%, "
        f"in-plane H alone {100 * in_plane_h:.2f}%)")

    elapsed = time.perf_counter() - t0
    good = elapsed < 300.0
    ok &= good
    results.append(f"runtime {elapsed:.0f} s ({'PASS' if good else 'FAIL'} vs 300 s)")

    line = f"criterion 7: {'PASS' if ok else 'FAIL'} - " + "; ".join(results)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 8: polarization isolation
# ---------------------------------------------------------------------------

def _mixed_cfg(sources: list[dict]) -> dict:
    return _silence(make_config({
        "mesh": {"h": 0.05, "rho_max": 1.25},
        "run": {"polarizations": ["te", "tm"], "steps": 500, "dt": DT_MM},
        "pml": {"enabled": True, "rho0": 1.0, "thickness": 0.25},
        "source": sources,
        "output": {},
    }))


def test_criterion_8_polarization_isolation() -> None:
    axial = {"kind": "axial-surface-current"}
    azim = {"kind": "azimuthal-surface-current"}
    mixed = Simulation(_mixed_cfg([axial, azim]))
    mixed.run()
    solo_te = Simulation(_mixed_cfg([axial]))
    solo_te.run()
    solo_tm = Simulation(_mixed_cfg([azim]))
    solo_tm.run()

    # an axial-only drive leaves every TM DoF exactly zero, and vice versa
    assert not solo_te.states["tm"].edge.any()
    assert not solo_te.states["tm"].face.any()
    assert not solo_tm.states["te"].edge.any()
    assert not solo_tm.states["te"].face.any()
    # the mixed run is the bitwise union of the two solo runs
    for pol, solo in (("te", solo_te), ("tm", solo_tm)):
        assert np.array_equal(mixed.states[pol].edge, solo.states[pol].edge)
        assert np.array_equal(mixed.states[pol].face, solo.states[pol].face)
    print("criterion 8: PASS - mixed 500-step run: cross-polarization DoFs "
          "exactly 0, each polarization bitwise equal to its solo run")


# ---------------------------------------------------------------------------
# criterion 9: outgoing cylindrical-wave convergence
# ---------------------------------------------------------------------------

def _outgoing_wave_error(h: float) -> float:
    """Relative L2 misfit against A*H0^2(k rho) over a probe ring sweep.

    Full-height axial source (k_z = 0 exactly); the domain is oversized and
    PMC-closed, and the analysis window closes before the rim reflection
    reaches any probe, so the windowed transform sees a pure outgoing wave.

    Two extraction details matter.  The probes sit at odd multiples of half
    the finest spacing so they never land on a node of any refinement level
    (one-sided evaluation at a vertex carries an O(h) bias that alternates
    between probes).  And the fit carries a constant column alongside the
    Hankel one: a cylindrical pulse leaves a slowly decaying afterglow, and
    the part of it the window cuts off is nearly uniform over the probe ring,
    so the constant absorbs that mesh-independent truncation term instead of
    letting it floor the convergence.
    """
    freq = 0.75e9
    dt = h / (4.0 * C0)
    t_window = 9.0e-9
    rhos = 0.50625 + 0.05 * np.arange(9)
    cfg = _silence(make_config({
        "mesh": {"h": h, "rho_max": 2.0},
        "run": {"polarizations": ["te"], "steps": int(t_window / dt), "dt": dt},
        "source": [{"kind": "axial-surface-current", "height": 1.0,
                     "frequency": freq, "cycles": 2}],
        "probe": [{"z": 0.00625, "rho": float(r)} for r in rhos],
        "output": {},
    }))
    sim = Simulation(cfg)
    sim.run()
    rows = np.array(sim.probe_rows)
    t = rows[:, 1]
    phase = np.exp(-2j * math.pi * freq * t) * dt
    # E_z is the first column of each probe's TE triple
    u_hat = np.array([phase @ rows[:, 2 + 3 * i] for i in range(len(rhos))])
    H = hankel2(0, 2 * math.pi * freq / C0 * rhos)
    M = np.column_stack([H, np.ones_like(H)])
    coef, *_ = np.linalg.lstsq(M, u_hat, rcond=None)
    return float(np.linalg.norm(u_hat - M @ coef) / np.linalg.norm(coef[0] * H))


def test_criterion_9_outgoing_wave_convergence() -> None:
    t0 = time.perf_counter()
    errs = [_outgoing_wave_error(h) for h in (0.05, 0.025, 0.0125)]
    r1 = errs[0] / errs[1]
    r2 = errs[1] / errs[2]
    elapsed = time.perf_counter() - t0
    ok = r1 >= 2.8 and r2 >= 2.8 and elapsed < 600.0
    line = (f"criterion 9: {'PASS' if ok else 'FAIL'} - L2 error vs hankel2 "
            f"oracle {errs[0]:.3e} -> {errs[1]:.3e} -> {errs[2]:.3e}, ratios "
            f"{r1:.2f}, {r2:.2f} (>= 2.8 each), {elapsed:.0f} s (< 600 s)")
    print(line)
    assert ok, line
