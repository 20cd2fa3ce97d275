import math
from collections import Counter

import numpy as np
import pytest

from qmcomp.compression import CompressionScenario, Povm
from qmcomp.entropies import dmax, rel_entropy_and_variance
from qmcomp.extractor import (
    CompositionReport,
    Factorization,
    build_plan,
    compress_without_feedback,
    run_extractor,
    run_shared_variant,
)
from qmcomp.linalg import trace_norm
from qmcomp.states import CLASSICAL, CqState, DensityOperator, Register, StateVector


def _greg(gdim):
    return (Register("G", gdim),)


def _product_source(size, gdim=2):
    # all side blocks share one object, so the run must report exact zeros
    op = DensityOperator(np.eye(gdim) / gdim, _greg(gdim))
    blocks = {(c,): (1.0 / size, op) for c in range(size)}
    return CqState((Register("C", size, CLASSICAL),), _greg(gdim), blocks)


def _spread_source(size, rng, lam=0.3, gdim=2):
    # uniform symbols with mildly distinct side states; the common floor
    # (1 - lam) * I/g keeps the conditional divergence under log(size) - 1
    blocks = {}
    base = np.eye(gdim) / gdim
    for c in range(size):
        v = rng.standard_normal(gdim) + 1j * rng.standard_normal(gdim)
        v /= np.linalg.norm(v)
        mat = (1.0 - lam) * base + lam * np.outer(v, v.conj())
        blocks[(c,)] = (1.0 / size, DensityOperator(mat, _greg(gdim)))
    return CqState((Register("C", size, CLASSICAL),), _greg(gdim), blocks)


def _block_matrix(block):
    if isinstance(block, StateVector):
        return np.outer(block.amplitudes, block.amplitudes.conj())
    return block.matrix


def _side_marginal(source):
    psi = None
    for _key, (w, block) in source.blocks.items():
        term = w * _block_matrix(block)
        psi = term if psi is None else psi + term
    return psi


def _dense_output(state, plan):
    par = plan.params
    keys = par.v_size * par.ubar_size
    g = state.quantum_registers[0].dim
    out = np.zeros((keys * g, keys * g), dtype=complex)
    for (v, u), (w, block) in state.blocks.items():
        i = v * par.ubar_size + u
        out[i * g:(i + 1) * g, i * g:(i + 1) * g] = w * _block_matrix(block)
    return out


class TestBuildPlan:
    def test_reference_arithmetic(self):
        plan = build_plan(1024, 6.0, 0.25)
        par = plan.params
        assert par.alphabet == 1024
        assert par.n == 64 and not par.rounded
        assert par.t == 1
        assert par.u1_size == 1024 and par.j_size == 64
        assert par.ubar_size == 1024 * 64
        assert par.v_size == 16
        assert par.seed_bits == 16.0
        assert par.seed_bound == 2 * 10 - 6 + 4
        assert par.seed_bound_met
        assert par.extracted_bits == 4.0
        assert par.guaranteed_bits == 3.0
        assert par.split_error == 0.0

    def test_rounding_flag(self):
        par = build_plan(16, 3.0, 0.3).params
        # 16 * 2^-3 / 0.3 = 6.67 rounds through 7 to the next power of two
        assert par.n == 8 and par.rounded
        assert par.v_size == 2 and par.extracted_bits == 1.0

    def test_degenerate_guarantee_still_runs(self):
        par = build_plan(16, 3.0, 0.25).params
        assert par.guaranteed_bits == 0.0
        assert par.extracted_bits >= 0.0

    def test_alphabet_embedding(self):
        par = build_plan(3, 1.0, 0.5).params
        assert par.alphabet == 4
        assert par.n == 4 and par.v_size == 1

    def test_k_out_of_range(self):
        with pytest.raises(ValueError, match="k out of range"):
            build_plan(4, 0.0, 0.5)
        with pytest.raises(ValueError, match="k out of range"):
            build_plan(4, 2.5, 0.5)
        with pytest.raises(ValueError, match="k out of range"):
            build_plan(4, 0.5, 0.25)

    def test_epsilon_domain(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                build_plan(4, 1.0, bad)

    def test_small_alphabet_rejected(self):
        with pytest.raises(ValueError):
            build_plan(1, 0.5, 0.5)


class TestPlanTables:
    def test_rank_table_is_a_bijection(self):
        plan = build_plan(4, 1.0, 0.5)
        order, index, _ = plan.tables()
        assert len(order) == plan.family.size == 16
        for i, s in enumerate(order):
            assert index[s] == i
        assert sorted(index.values()) == list(range(16))

    def test_slices_partition_and_round_trip(self):
        plan = build_plan(4, 1.0, 0.5)
        par = plan.params
        order, _index, slices = plan.tables()
        for j in range(par.n):
            union = set()
            for c in range(par.alphabet):
                block = slices[(j, c)]
                assert len(block) == par.u1_size
                for u, s in enumerate(block):
                    assert s[j] == c
                    assert block.index(s) == u
                union.update(block)
            assert union == set(order)

    def test_split_covers_every_pair_once(self):
        plan = build_plan(4, 2.0, 0.5)
        par = plan.params
        pairs = [plan.split(i) for i in range(par.alphabet ** (par.t + 1))]
        assert len(set(pairs)) == par.v_size * par.ubar_size
        per_seed = Counter(u for _v, u in pairs)
        assert set(per_seed.values()) == {par.v_size}

    def test_digits_match_rank(self):
        plan = build_plan(4, 1.0, 0.5)
        q = plan.params.alphabet
        for i in (0, 5, 15):
            d = plan.digits(i)
            back = 0
            for x in d:
                back = back * q + x
            assert back == i


class TestRunExtractor:
    def test_two_symbol_relabeling(self):
        plan = build_plan(2, 1.0, 0.5)
        assert plan.params.n == 2 and plan.params.v_size == 1
        state, rep = run_extractor(_product_source(2), plan)
        assert rep.d_out == 0.0 and rep.delta_out == 0.0
        assert rep.extracted_bits == 0.0
        assert len(state.blocks) == 4

    @pytest.mark.parametrize("size", [2, 4, 8, 16])
    def test_product_source_is_exactly_uniform(self, size):
        plan = build_plan(size, float(math.log2(size)), 0.5)
        state, rep = run_extractor(_product_source(size), plan)
        assert rep.d_out == 0.0
        assert rep.delta_out == 0.0
        assert rep.k_eff == 0.0
        assert sum(w for w, _ in state.blocks.values()) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic_source_refused(self):
        plan = build_plan(4, 1.0, 0.5)
        op = DensityOperator(np.eye(2) / 2, _greg(2))
        blocks = {(0,): (1.0, op)}
        source = CqState((Register("C", 4, CLASSICAL),), _greg(2), blocks)
        with pytest.raises(ValueError, match="eligibility violation.*0.0"):
            run_extractor(source, plan)

    def test_alphabet_mismatch(self):
        plan = build_plan(4, 1.0, 0.5)
        with pytest.raises(ValueError, match="alphabet mismatch"):
            run_extractor(_product_source(8), plan)

    def test_half_heavy_source_runs(self):
        # p = (1/2, 1/6, 1/6, 1/6) with the heavy block equal to the marginal
        greg = _greg(2)
        mix = DensityOperator(np.eye(2) / 2, greg)
        blocks = {
            (0,): (0.5, mix),
            (1,): (1.0 / 6.0, DensityOperator(np.diag([1.0, 0.0]), greg)),
            (2,): (1.0 / 6.0, DensityOperator(np.diag([0.0, 1.0]), greg)),
            (3,): (1.0 / 6.0, DensityOperator(np.eye(2) / 2, greg)),
        }
        source = CqState((Register("C", 4, CLASSICAL),), greg, blocks)
        plan = build_plan(4, 1.0, 0.5)
        _state, rep = run_extractor(source, plan)
        assert rep.d_out <= rep.d_bound + 1e-8
        assert rep.eligibility_dmax <= -1.0 + 1e-9

    def test_divergence_against_dense_oracle(self):
        greg = _greg(2)
        rng = np.random.default_rng(7)
        source = _spread_source(4, rng)
        plan = build_plan(4, 1.0, 0.5)
        state, rep = run_extractor(source, plan)
        psi_g = _side_marginal(source)
        keys = plan.params.v_size * plan.params.ubar_size
        dense = _dense_output(state, plan)
        ref = np.kron(np.eye(keys) / keys, psi_g)
        want, _ = rel_entropy_and_variance(dense, ref)
        assert rep.d_out == pytest.approx(want, abs=1e-9)
        assert rep.delta_out == pytest.approx(0.5 * trace_norm(dense - ref), abs=1e-9)

    def test_embedded_source_keeps_total_mass(self):
        greg = _greg(2)
        blocks = {
            (0,): (0.5, DensityOperator(np.eye(2) / 2, greg)),
            (1,): (0.25, DensityOperator(np.diag([1.0, 0.0]), greg)),
            (2,): (0.25, DensityOperator(np.diag([0.0, 1.0]), greg)),
        }
        source = CqState((Register("C", 3, CLASSICAL),), greg, blocks)
        plan = build_plan(3, 1.0, 0.5)
        state, rep = run_extractor(source, plan)
        assert sum(w for w, _ in state.blocks.values()) == pytest.approx(1.0, abs=1e-10)
        assert rep.d_out <= rep.d_bound + 1e-8

    @pytest.mark.parametrize("size", [4, 8, 16])
    def test_seeded_sources_obey_all_bounds(self, size):
        rng = np.random.default_rng(100 + size)
        for trial in range(4):
            source = _spread_source(size, rng)
            k = math.log2(size) - 1.0
            plan = build_plan(size, k, 0.5)
            par = plan.params
            # independent eligibility oracle straight from the definitions
            psi_g = _side_marginal(source)
            worst = max(
                math.log2(w) + dmax(_block_matrix(b), psi_g)
                for (_c,), (w, b) in source.blocks.items()
            )
            assert worst <= -k + 1e-9
            _state, rep = run_extractor(source, plan)
            assert rep.d_out <= rep.d_bound + 1e-8
            assert rep.delta_out <= math.sqrt(2.0 * max(rep.d_out, 0.0)) + 1e-9
            assert rep.extracted_bits >= rep.guaranteed_bits - 1e-9
            assert par.seed_bits <= par.seed_bound + 1e-9


class TestSharedVariant:
    def test_requires_perfect_copies(self):
        greg = _greg(2)
        op = DensityOperator(np.eye(2) / 2, greg)
        regs = (Register("C", 2, CLASSICAL), Register("Cp", 2, CLASSICAL))
        bad = CqState(regs, greg, {(0, 0): (0.5, op), (0, 1): (0.5, op)})
        plan = build_plan(2, 1.0, 0.5)
        with pytest.raises(ValueError, match="not a copy"):
            run_shared_variant(bad, plan)

    def test_matches_single_party(self):
        greg = _greg(2)
        rng = np.random.default_rng(11)
        single = _spread_source(4, rng)
        regs = (Register("C", 4, CLASSICAL), Register("Cp", 4, CLASSICAL))
        paired = CqState(
            regs, greg, {(c, c): entry for (c,), entry in single.blocks.items()}
        )
        plan = build_plan(4, 1.0, 0.5)
        state2, rep2 = run_shared_variant(paired, plan)
        _state1, rep1 = run_extractor(single, plan)
        assert rep2.d_out == rep1.d_out
        assert rep2.delta_out == rep1.delta_out
        names = [r.name for r in state2.classical_registers]
        assert names == ["V", "Ubar", "Vp", "Ubarp"]
        for (v, u, vp, up), (_w, _b) in state2.blocks.items():
            assert (v, u) == (vp, up)


def _entangled():
    regs = (Register("R", 2), Register("A", 2), Register("B", 2))
    amp = np.zeros(8, dtype=complex)
    amp[0] = amp[6] = 1.0 / math.sqrt(2.0)
    return StateVector(amp, regs)


def _scenario(povm, seed=0):
    return CompressionScenario(
        _entangled(), povm, 0.25, n_override=8, b_override=2, seed=seed
    )


class TestFactorization:
    def test_conditional_validation(self):
        target = Povm([np.eye(2)])
        with pytest.raises(ValueError, match="sum to one"):
            Factorization(target, np.array([[0.9, 0.9, 0.9, 0.9]]))
        with pytest.raises(ValueError, match="nonnegative"):
            Factorization(Povm([np.eye(2) / 2, np.eye(2) / 2]), np.array([[1.5, 1.0], [-0.5, 0.0]]))
        with pytest.raises(ValueError, match="rows"):
            Factorization(target, np.array([[0.5, 0.5], [0.5, 0.5]]))

    def test_factorization_inconsistency(self):
        povm = Povm([np.eye(2) / 2, np.eye(2) / 2])
        fact = Factorization(
            Povm([np.eye(2) / 3, 2 * np.eye(2) / 3]), np.eye(2)
        )
        with pytest.raises(ValueError, match="factorization inconsistency"):
            compress_without_feedback(_scenario(povm), fact, 0.9)

    def test_wrong_width(self):
        povm = Povm([np.eye(2) / 2, np.eye(2) / 2])
        fact = Factorization(Povm([np.eye(2)]), np.array([[1.0, 1.0, 1.0, 1.0]]))
        with pytest.raises(ValueError, match="columns"):
            compress_without_feedback(_scenario(povm), fact, 0.9)


class TestComposition:
    def test_identity_factorization_is_degenerate(self):
        povm = Povm([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])])
        fact = Factorization(povm, np.eye(2))
        rep = compress_without_feedback(_scenario(povm), fact, 0.9)
        assert rep.degenerate and rep.extraction is None
        assert abs(rep.k_residual) <= 1e-6
        assert rep.d_composed <= rep.stage_sum + 1e-6
        assert rep.stage_sum == rep.stage_one.d_final
        assert rep.initial_bits == rep.stage_one.r1_bits
        assert rep.final_bits == rep.stage_one.r2_bits
        assert rep.extracted_bits == 0.0

    def test_coin_measurement_recycles_a_bit(self):
        # a fair four-sided coin: the outcome is independent of everything,
        # so after discarding it the copies convert back into shared bits
        povm = Povm([np.eye(2) / 4] * 4)
        fact = Factorization(Povm([np.eye(2)]), np.ones((1, 4)))
        rep = compress_without_feedback(_scenario(povm), fact, 0.9)
        assert not rep.degenerate
        assert rep.k_residual == pytest.approx(2.0, abs=1e-9)
        assert rep.extracted_bits == 1.0
        assert rep.d_composed <= rep.stage_sum + 1e-6
        assert rep.final_bits == rep.initial_bits - rep.stage_one.consumed_bits + 1.0
        assert rep.extraction.d_out <= rep.extraction.d_bound + 1e-8

    def test_coarse_graining_passes_the_check(self):
        povm = Povm([np.eye(2) / 2, np.eye(2) / 2])
        cond = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
        fact = Factorization(
            Povm([np.eye(2) / 4, np.eye(2) / 2, np.eye(2) / 4]), cond
        )
        rep = compress_without_feedback(_scenario(povm), fact, 0.9)
        assert isinstance(rep, CompositionReport)
        # the first coarse outcome identifies the fine one, so nothing is left
        assert rep.degenerate
        assert rep.d_composed <= rep.stage_sum + 1e-6

    def test_delta_domain(self):
        povm = Povm([np.diag([1.0, 0.0]), np.diag([0.0, 1.0])])
        fact = Factorization(povm, np.eye(2))
        with pytest.raises(ValueError, match="delta"):
            compress_without_feedback(_scenario(povm), fact, 0.0)

    def test_ledger_reports_net_flow(self):
        povm = Povm([np.eye(2) / 4] * 4)
        fact = Factorization(Povm([np.eye(2)]), np.ones((1, 4)))
        rep = compress_without_feedback(_scenario(povm), fact, 0.9)
        assert rep.net_consumed_bits == rep.initial_bits - rep.final_bits
        assert rep.seed_bits == rep.extraction.seed_bits
        assert rep.error_budget == pytest.approx(10 * 0.25 + 3 * 0.9)
        assert rep.message_bits == rep.stage_one.message_bits
