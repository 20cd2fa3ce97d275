"""Convex-split mixtures against hand enumeration and dense oracles."""

import math
from fractions import Fraction

import numpy as np
import pytest

from qmcomp.convex_split import (
    ConvexSplitInstance,
    build_tau,
    covering_check,
    iid_divergence,
    split_divergence,
    verify_lemma,
)
from qmcomp.entropies import rel_entropy_and_variance
from qmcomp.states import CLASSICAL, CqState, DensityOperator, Register, _block_matrix


def _cq(p, mats, dim_p=None, alphabet=None):
    alphabet = alphabet or len(p)
    dim_p = dim_p or mats[0].shape[0]
    creg = (Register("Q", alphabet, CLASSICAL),)
    qreg = (Register("P", dim_p),)
    blocks = {}
    for c, w in enumerate(p):
        if w > 0:
            blocks[(c,)] = (w, DensityOperator(mats[c], qreg))
    return CqState(creg, qreg, blocks)


def _rand_density(rng, dim):
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    m = g @ g.conj().T
    return m / np.trace(m).real


def _correlated_pair():
    mats = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]
    return _cq([0.5, 0.5], mats)


def test_hand_enumerated_correlated_instance():
    inst = ConvexSplitInstance(_correlated_pair(), [Fraction(1, 2), Fraction(1, 2)], 2)
    assert abs(inst.k - 1.0) < 1e-12
    tau = build_tau(inst)
    assert set(tau.blocks) == {(0, 0), (1, 1), (0, 1), (1, 0)}
    for s, (w, block) in tau.blocks.items():
        assert abs(w - 0.25) < 1e-12
        mat = _block_matrix(block)
        if s[0] == s[1]:
            expect = np.diag([1.0, 0.0]) if s[0] == 0 else np.diag([0.0, 1.0])
        else:
            expect = np.eye(2) / 2
        assert np.allclose(mat, expect, atol=1e-12)
    check = verify_lemma(inst)
    assert abs(check.d_split - 0.5) < 1e-12
    assert abs(check.bound - 1.0) < 1e-12
    assert check.passed


def test_product_instance_gives_zero_divergence():
    shared = np.array([[0.7, 0.1], [0.1, 0.3]], dtype=complex)
    rho = _cq([0.25, 0.75], [shared, shared])
    inst = ConvexSplitInstance(rho, [Fraction(1, 4), Fraction(3, 4)], 4)
    assert inst.k == 0.0
    assert split_divergence(inst) == 0.0
    assert abs(iid_divergence(inst)) < 1e-12
    tau = build_tau(inst)
    for s, (w, block) in tau.blocks.items():
        assert np.array_equal(_block_matrix(block), shared)
    # weights reproduce the family distribution itself
    fam_support = inst.family.support()
    assert len(tau.blocks) == len(fam_support)
    for s, (w, _) in tau.blocks.items():
        assert abs(w - float(fam_support[s])) < 1e-15


def test_single_copy_returns_the_input():
    rng = np.random.default_rng(0)
    mats = [_rand_density(rng, 2), _rand_density(rng, 2)]
    rho = _cq([0.3, 0.7], mats)
    inst = ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], 1)
    tau = build_tau(inst)
    assert set(tau.blocks) == {(0,), (1,)}
    for c in (0, 1):
        w, block = tau.blocks[(c,)]
        assert abs(w - [0.3, 0.7][c]) < 1e-12
        assert np.allclose(_block_matrix(block), mats[c], atol=1e-12)
    check = verify_lemma(inst)
    assert check.passed


def test_tau_marginals():
    rng = np.random.default_rng(1)
    mats = [_rand_density(rng, 3), _rand_density(rng, 3)]
    p = [0.2, 0.8]
    rho = _cq(p, mats)
    n = 4
    inst = ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], n)
    tau = build_tau(inst)
    # P marginal equals rho_P
    rho_p = p[0] * mats[0] + p[1] * mats[1]
    acc = np.zeros((3, 3), dtype=complex)
    for _, (w, block) in tau.blocks.items():
        acc += w * _block_matrix(block)
    assert np.abs(acc - rho_p).max() < 1e-10
    # each Q_j marginal is the (p + (n-1) sigma)/n mixture
    for j in range(n):
        got = {}
        for s, (w, _) in tau.blocks.items():
            got[s[j]] = got.get(s[j], 0.0) + w
        for c in (0, 1):
            expect = (p[c] + (n - 1) * 0.5) / n
            assert abs(got[c] - expect) < 1e-12


def test_sparse_divergence_matches_dense():
    rng = np.random.default_rng(2)
    for n in (2, 3):
        mats = [_rand_density(rng, 2), _rand_density(rng, 2)]
        p = [0.4, 0.6]
        rho = _cq(p, mats)
        inst = ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], n)
        sparse = split_divergence(inst)
        tau = build_tau(inst)
        dense_tau = tau.densify().matrix
        qn = 2 ** n
        rho_p = p[0] * mats[0] + p[1] * mats[1]
        ref = np.zeros((qn * 2, qn * 2), dtype=complex)
        for s, qbar in inst.family.support().items():
            flat = int(np.ravel_multi_index(s, [2] * n))
            ref[flat * 2:(flat + 1) * 2, flat * 2:(flat + 1) * 2] = float(qbar) * rho_p
        d_dense, _ = rel_entropy_and_variance(dense_tau, ref)
        assert abs(sparse - d_dense) < 1e-8


def test_iid_divergence_matches_manual_enumeration():
    rng = np.random.default_rng(3)
    mats = [_rand_density(rng, 2), _rand_density(rng, 2)]
    p = [0.35, 0.65]
    rho = _cq(p, mats)
    inst = ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], 2, mode="iid")
    rho_p = p[0] * mats[0] + p[1] * mats[1]
    manual = 0.0
    for s in ((0, 0), (0, 1), (1, 0), (1, 1)):
        qbar = 0.25
        gamma = sum(p[c] / 0.5 for c in s) / 2
        block = sum((p[c] / 0.5) * mats[c] for c in s) / (2 * gamma)
        d_block, _ = rel_entropy_and_variance(block, rho_p)
        manual += qbar * gamma * (math.log2(gamma) + d_block)
    assert abs(iid_divergence(inst) - manual) < 1e-10


def test_lemma_randomized_suite():
    rng = np.random.default_rng(4)
    for trial in range(20):
        q = int(rng.choice([2, 4]))
        dim_p = int(rng.integers(2, 5))
        n = int(rng.choice([2, 4, 8, 16]))
        p = rng.uniform(0.1, 1.0, size=q)
        p = p / p.sum()
        mats = [_rand_density(rng, dim_p) for _ in range(q)]
        rho = _cq(list(p), mats)
        inst = ConvexSplitInstance(rho, [Fraction(1, q)] * q, n)
        check = verify_lemma(inst)
        assert check.passed, (trial, check)
        assert check.d_split >= -1e-12
        assert check.d_iid >= -1e-12


def test_lemma_with_lifted_sigma():
    rng = np.random.default_rng(5)
    mats = [_rand_density(rng, 2), _rand_density(rng, 2)]
    rho = _cq([0.6, 0.4], mats)
    inst = ConvexSplitInstance(rho, [Fraction(3, 4), Fraction(1, 4)], 4)
    assert inst.family.marginal(0) == {0: Fraction(3, 4), 1: Fraction(1, 4)}
    check = verify_lemma(inst)
    assert check.passed
    tau = build_tau(inst)
    for j in range(4):
        got = {}
        for s, (w, _) in tau.blocks.items():
            got[s[j]] = got.get(s[j], 0.0) + w
        for c, sig in ((0, 0.75), (1, 0.25)):
            expect = ([0.6, 0.4][c] + 3 * sig) / 4
            assert abs(got[c] - expect) < 1e-12


def test_instance_validation():
    rho = _correlated_pair()
    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1, 2)], 2)
    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 4)], 2)
    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1), Fraction(0)], 2)
    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1, 3), Fraction(2, 3)], 2)
    from qmcomp.families import PairwiseFamily

    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], 2, family=PairwiseFamily(2, 3))
    with pytest.raises(ValueError):
        ConvexSplitInstance(rho, [Fraction(1, 2), Fraction(1, 2)], 2, family=PairwiseFamily(2, 2), mode="iid")


def test_covering_identical_blocks_mean_zero():
    shared = np.eye(2) / 2
    rho = _cq([0.5, 0.5], [shared, shared])
    mean, bound = covering_check(rho, 4)
    assert mean < 1e-12


def test_covering_orthogonal_pair_exact():
    rho = _correlated_pair()
    mean, bound = covering_check(rho, 2)
    assert abs(mean - 0.5) < 1e-12
    assert abs(bound - 1.0) < 1e-12


def test_covering_shrinks_with_n():
    rng = np.random.default_rng(6)
    mats = [_rand_density(rng, 2), _rand_density(rng, 2)]
    rho = _cq([0.5, 0.5], mats)
    means = [covering_check(rho, n, trials=4000, seed=7)[0] for n in (4, 16, 64)]
    assert means[2] < means[0]
