"""State algebra: registers, tensor/trace/permute, purification, distances."""

import numpy as np
import pytest

from qmcomp.states import (
    CLASSICAL,
    CqState,
    DensityOperator,
    Register,
    StateVector,
    apply_isometry,
    basis_vector,
    cq_fidelity,
    cq_trace_distance,
    fidelity,
    measure_register,
    purified_distance,
    purify,
    trace_distance,
)


def _rand_state(rng, dim):
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _rand_density(rng, dim, rank=None):
    rank = rank or dim
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    m = g @ g.conj().T
    return m / np.trace(m).real


def _bell_pair():
    regs = (Register("A", 2), Register("B", 2))
    amp = np.array([1, 0, 0, 1], dtype=complex) / np.sqrt(2)
    return StateVector(amp, regs)


def test_register_validation():
    with pytest.raises(ValueError):
        Register("", 2)
    with pytest.raises(ValueError):
        Register("A", 0)
    with pytest.raises(ValueError):
        Register("A", 2, "analog")


def test_bell_partial_trace_is_maximally_mixed():
    rho = _bell_pair().partial_trace(["B"])
    assert rho.registers[0].name == "A"
    assert np.allclose(rho.matrix, np.eye(2) / 2, atol=1e-12)


def test_state_vector_norm_enforced():
    with pytest.raises(ValueError):
        StateVector(np.array([1.0, 1.0]), (Register("A", 2),))


def test_density_validation():
    with pytest.raises(ValueError):
        DensityOperator(np.array([[1.0, 0.5], [0.2, 0.0]]), (Register("A", 2),))
    with pytest.raises(ValueError):
        DensityOperator(np.eye(2), (Register("A", 2),))


def test_permute_roundtrip():
    rng = np.random.default_rng(7)
    regs = (Register("X", 2), Register("Y", 3), Register("Z", 2))
    psi = StateVector(_rand_state(rng, 12), regs)
    back = psi.permute(["Z", "X", "Y"]).permute(["X", "Y", "Z"])
    assert np.allclose(back.amplitudes, psi.amplitudes)


def test_partial_trace_matches_vector_and_density_paths():
    rng = np.random.default_rng(11)
    regs = (Register("X", 2), Register("Y", 3), Register("Z", 2))
    psi = StateVector(_rand_state(rng, 12), regs)
    via_vec = psi.partial_trace(["Y"])
    via_den = psi.to_density().partial_trace(["Y"])
    assert np.allclose(via_vec.matrix, via_den.permute(["X", "Z"]).matrix, atol=1e-12)


def test_purify_roundtrip_rank_two():
    # oracle: eigendecompose, rebuild, compare the reduced state
    rng = np.random.default_rng(3)
    rho = DensityOperator(_rand_density(rng, 3, rank=2), (Register("S", 3),))
    psi = purify(rho, "P")
    assert psi.registers[-1].dim == 2  # purifier dimension equals the rank
    back = psi.partial_trace(["P"])
    assert np.allclose(back.matrix, rho.matrix, atol=1e-10)


def test_purify_full_rank():
    rng = np.random.default_rng(4)
    rho = DensityOperator(_rand_density(rng, 4), (Register("S", 4),))
    psi = purify(rho, "P")
    assert psi.registers[-1].dim == 4
    assert np.allclose(psi.partial_trace(["P"]).matrix, rho.matrix, atol=1e-10)


def test_fidelity_pure_vs_mixed_half():
    ket0 = basis_vector((Register("A", 2),), (0,))
    mixed = DensityOperator(np.eye(2) / 2, (Register("A", 2),))
    assert abs(fidelity(ket0, mixed) - 1 / np.sqrt(2)) < 1e-12
    assert abs(fidelity(ket0.to_density(), mixed) - 1 / np.sqrt(2)) < 1e-12


def test_distance_register_canonicalization():
    rng = np.random.default_rng(5)
    regs = (Register("A", 2), Register("B", 3))
    rho = DensityOperator(_rand_density(rng, 6), regs)
    sig = DensityOperator(_rand_density(rng, 6), regs).permute(["B", "A"])
    direct = fidelity(rho, sig.permute(["A", "B"]))
    assert abs(fidelity(rho, sig) - direct) < 1e-12
    with pytest.raises(ValueError):
        fidelity(rho, DensityOperator(_rand_density(rng, 6), (Register("A", 2), Register("C", 3))))


def test_fuchs_van_de_graaf_sandwich():
    rng = np.random.default_rng(6)
    for _ in range(40):
        d = int(rng.integers(2, 5))
        rho = DensityOperator(_rand_density(rng, d), (Register("A", d),))
        sig = DensityOperator(_rand_density(rng, d), (Register("A", d),))
        delta = trace_distance(rho, sig)
        pur = purified_distance(rho, sig)
        assert delta <= pur + 1e-9
        assert pur <= np.sqrt(2 * delta) + 1e-9


def test_purified_distance_isometry_invariance():
    rng = np.random.default_rng(8)
    regs = (Register("A", 3),)
    rho = DensityOperator(_rand_density(rng, 3), regs)
    sig = DensityOperator(_rand_density(rng, 3), regs)
    iso = np.linalg.qr(rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5)))[0][:, :3]
    target = (Register("T", 5),)
    rho2 = apply_isometry(iso, rho, ["A"], target)
    sig2 = apply_isometry(iso, sig, ["A"], target)
    assert abs(purified_distance(rho, sig) - purified_distance(rho2, sig2)) < 1e-9


def test_apply_isometry_rejects_non_isometry():
    rng = np.random.default_rng(9)
    rho = DensityOperator(_rand_density(rng, 2), (Register("A", 2),))
    with pytest.raises(ValueError):
        apply_isometry(np.array([[1.0, 0.0], [0.0, 0.5]]), rho, ["A"], (Register("T", 2),))


def test_measure_register_statevector():
    regs = (Register("A", 2), Register("B", 2))
    amp = np.array([np.sqrt(0.25), 0, 0, np.sqrt(0.75)], dtype=complex)
    psi = StateVector(amp, regs)
    outcomes = measure_register(psi, "A")
    assert [o for o, _, _ in outcomes] == [0, 1]
    assert abs(outcomes[0][1] - 0.25) < 1e-12
    assert abs(outcomes[1][1] - 0.75) < 1e-12
    # post states collapse on B
    assert np.allclose(outcomes[0][2].amplitudes, [1, 0])
    assert np.allclose(outcomes[1][2].amplitudes, [0, 1])


def test_measure_register_drops_tiny_outcomes():
    regs = (Register("A", 2),)
    amp = np.array([1.0, 1e-8], dtype=complex)
    psi = StateVector(amp / np.linalg.norm(amp), regs)
    outcomes = measure_register(psi, "A")
    assert [o for o, _, _ in outcomes] == [0]


def _rand_cq(rng, cdim, qdim, nblocks=None):
    creg = (Register("C", cdim, CLASSICAL),)
    qreg = (Register("Q", qdim),)
    keys = rng.choice(cdim, size=nblocks or cdim, replace=False)
    weights = rng.dirichlet(np.ones(len(keys)))
    blocks = {}
    for key, w in zip(keys, weights):
        blocks[(int(key),)] = (float(w), DensityOperator(_rand_density(rng, qdim), qreg))
    return CqState(creg, qreg, blocks)


def test_cq_fidelity_matches_dense_oracle():
    rng = np.random.default_rng(12)
    for _ in range(25):
        cdim = int(rng.integers(2, 5))
        qdim = int(rng.integers(2, 4))
        a = _rand_cq(rng, cdim, qdim)
        b = _rand_cq(rng, cdim, qdim)
        dense = fidelity(a.densify(), b.densify())
        sparse = cq_fidelity(a, b)
        assert abs(dense - sparse) < 1e-9


def test_cq_trace_distance_matches_dense_oracle():
    rng = np.random.default_rng(13)
    for _ in range(25):
        cdim = int(rng.integers(2, 4))
        qdim = int(rng.integers(2, 4))
        a = _rand_cq(rng, cdim, qdim)
        b = _rand_cq(rng, cdim, qdim)
        dense = trace_distance(a.densify(), b.densify())
        sparse = cq_trace_distance(a, b)
        assert abs(dense - sparse) < 1e-9


def test_cq_weights_must_sum_to_one():
    creg = (Register("C", 2, CLASSICAL),)
    qreg = (Register("Q", 2),)
    rho = DensityOperator(np.eye(2) / 2, qreg)
    with pytest.raises(ValueError):
        CqState(creg, qreg, {(0,): (0.4, rho), (1,): (0.4, rho)})


def test_cq_classical_kind_enforced():
    qreg = (Register("Q", 2),)
    rho = DensityOperator(np.eye(2) / 2, qreg)
    with pytest.raises(ValueError):
        CqState((Register("C", 2),), qreg, {(0,): (1.0, rho)})


def test_cq_partial_trace_classical_merges_blocks():
    c2 = (Register("C", 2, CLASSICAL), Register("D", 2, CLASSICAL))
    qreg = (Register("Q", 2),)
    p0 = DensityOperator(np.diag([1.0, 0.0]), qreg)
    p1 = DensityOperator(np.diag([0.0, 1.0]), qreg)
    cq = CqState(c2, qreg, {(0, 0): (0.5, p0), (0, 1): (0.5, p1)})
    reduced = cq.partial_trace_classical(["D"])
    assert set(reduced.blocks) == {(0,)}
    w, block = reduced.blocks[(0,)]
    assert abs(w - 1.0) < 1e-12
    assert np.allclose(block.matrix, np.eye(2) / 2)


def test_cq_densify_cap():
    creg = (Register("C", 2, CLASSICAL),)
    qreg = (Register("Q", 2 ** 14),)
    amp = np.zeros(2 ** 14)
    amp[0] = 1.0
    blocks = {(0,): (1.0, StateVector(amp, qreg))}
    cq = CqState(creg, qreg, blocks)
    with pytest.raises(ValueError):
        cq.densify()


def test_measure_cq_classical_register():
    creg = (Register("C", 2, CLASSICAL),)
    qreg = (Register("Q", 2),)
    rho = DensityOperator(np.eye(2) / 2, qreg)
    cq = CqState(creg, qreg, {(0,): (0.3, rho), (1,): (0.7, rho)})
    outcomes = measure_register(cq, "C")
    assert [(o, round(p, 12)) for o, p, _ in outcomes] == [(0, 0.3), (1, 0.7)]
    assert outcomes[0][2].classical_registers == ()


def test_purified_distance_triangle_inequality():
    rng = np.random.default_rng(11)
    regs = (Register("A", 3),)
    for _ in range(30):
        a = DensityOperator(_rand_density(rng, 3), regs)
        b = DensityOperator(_rand_density(rng, 3), regs)
        c = DensityOperator(_rand_density(rng, 3), regs)
        assert purified_distance(a, c) <= purified_distance(a, b) + purified_distance(b, c) + 1e-9


def test_fidelity_monotone_under_partial_trace():
    rng = np.random.default_rng(12)
    regs = (Register("A", 2), Register("B", 3))
    for _ in range(30):
        rho = DensityOperator(_rand_density(rng, 6), regs)
        sig = DensityOperator(_rand_density(rng, 6), regs)
        f_joint = fidelity(rho, sig)
        f_marg = fidelity(rho.partial_trace(["B"]), sig.partial_trace(["B"]))
        assert f_marg >= f_joint - 1e-9


def test_gentle_measurement():
    from qmcomp.linalg import clamped_eigh

    rng = np.random.default_rng(13)
    regs = (Register("A", 4),)
    for _ in range(30):
        rho = DensityOperator(_rand_density(rng, 4), regs)
        g = _rand_density(rng, 4)
        vals, vecs = clamped_eigh(g)
        a = (vecs * (vals / (vals.max() + 1e-3))) @ vecs.conj().T
        passed = float(np.real(np.trace(a @ rho.matrix @ a)))
        post = DensityOperator(a @ rho.matrix @ a / passed, regs)
        assert fidelity(rho, post) >= np.sqrt(passed) - 1e-9


def test_hayashi_nagaoka_operator_inequality():
    from qmcomp.linalg import clamped_eigh, pinv_sqrt

    rng = np.random.default_rng(14)
    for _ in range(30):
        d = 5
        g = _rand_density(rng, d)
        vals, vecs = clamped_eigh(g)
        s = (vecs * (vals / (vals.max() + 1e-3))) @ vecs.conj().T
        t = _rand_density(rng, d) * rng.uniform(0.1, 3.0)
        inv = pinv_sqrt(s + t)
        lhs = 2 * (np.eye(d) - s) + 4 * t - (np.eye(d) - inv @ s @ inv)
        low, _ = clamped_eigh(0.5 * (lhs + lhs.conj().T))
        assert low[0] >= -1e-9
