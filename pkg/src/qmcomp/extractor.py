"""Seeded randomness extraction secure against quantum side information.

The source is a classical register C loosely coupled to a quantum system G.
C is absorbed into one position of a pairwise independent family, the family
registers are relabeled so that the uniform seed comes back untouched, and
the surplus randomness lands in a fresh register V.  Because every step is a
permutation of classical labels the whole run is simulated sparsely and
exactly; the reported divergence from uniform is measured, not estimated.

The same machinery composes with the measurement-compression protocol: after
compressing a finer measurement and sampling the coarse outcome from it, the
leftover correlation in the outcome copies is converted back into shared
uniform bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import block_diag

from .compression import CompressionReport, CompressionScenario, Povm, run_protocol
from .entropies import dmax, dmax_smooth_upper, rel_entropy_blocks
from .families import PairwiseFamily, embed_alphabet
from .linalg import trace_norm
from .states import (
    CLASSICAL,
    CqState,
    DensityOperator,
    Register,
    StateVector,
    cq_fidelity,
    purified_from_fidelity,
)

TABLE_CAP = 2 ** 20
RUN_CAP = 2 ** 26
DEGENERATE_TOL = 1e-6


@dataclass(frozen=True)
class ExtractorParams:
    """Sizes and bit counts fixed by (alphabet, k, epsilon)."""

    alphabet: int  # source symbols after power-of-two embedding
    k: float  # certified min-entropy of C given G, in bits
    epsilon: float  # divergence target for the output
    n: int  # absorbing positions, a power of two
    t: int  # family degree: alphabet**t >= n
    u1_size: int
    j_size: int
    v_size: int
    ubar_size: int
    seed_bits: float
    extracted_bits: float
    guaranteed_bits: float
    split_error: float
    rounded: bool  # n was bumped to the next power of two
    seed_bound: float
    seed_bound_met: bool


@dataclass(frozen=True)
class ExtractorReport:
    d_out: float
    d_bound: float
    extracted_bits: float
    seed_bits: float
    split_error: float
    k_eff: float
    eligibility_dmax: float
    delta_out: float
    guaranteed_bits: float


class ExtractorPlan:
    """Relabeling tables turning the extraction into a permutation.

    The first table sends a seed index to the family string consistent with a
    fixed symbol at a fixed position; the second sends every support string to
    its rank, whose base-``alphabet`` digits split into the returned seed and
    the fresh output.  Tables are built on first use and checked to be
    bijections; both directions share one index, so the involution check is
    the round trip through it.
    """

    def __init__(self, params: ExtractorParams):
        self.params = params
        self.family = PairwiseFamily(params.alphabet, params.n)
        if self.family.t != params.t:
            raise AssertionError(
                f"family degree {self.family.t} disagrees with the planned {params.t}"
            )
        self._tables = None

    def tables(self):
        """(ordered support, string -> rank, (position, symbol) -> strings)."""
        if self._tables is None:
            p = self.params
            if self.family.size * p.n > TABLE_CAP:
                raise ValueError(
                    f"budget exceeded: relabeling tables need {self.family.size} strings"
                    f" x {p.n} positions"
                )
            supp = self.family.support()
            expect = Fraction(1, self.family.size)
            order = sorted(supp)
            if len(order) != self.family.size or any(supp[s] != expect for s in order):
                raise AssertionError("family support is not uniform over distinct strings")
            index = {s: i for i, s in enumerate(order)}
            slices = {}
            for j in range(p.n):
                seen = set()
                for c in range(p.alphabet):
                    sl = self.family.conditional_slice(j, c)
                    full = tuple(rest[:j] + (c,) + rest[j:] for rest in sl.strings)
                    if len(full) != p.u1_size or len(set(full)) != p.u1_size:
                        raise AssertionError(
                            f"slice at position {j} symbol {c} is not a {p.u1_size}-element block"
                        )
                    for s in full:
                        if index.get(s) is None:
                            raise AssertionError("slice string escapes the support")
                    seen.update(full)
                    slices[(j, c)] = full
                if len(seen) != self.family.size:
                    raise AssertionError(f"slices at position {j} do not partition the support")
            self._tables = (order, index, slices)
        return self._tables

    def split(self, rank: int) -> tuple[int, int]:
        """Map a support rank to (fresh output, returned seed)."""
        return divmod(rank, self.params.ubar_size)

    def digits(self, rank: int) -> tuple[int, ...]:
        q, width = self.params.alphabet, self.params.t + 1
        out = []
        for _ in range(width):
            rank, d = divmod(rank, q)
            out.append(d)
        return tuple(reversed(out))


def build_plan(alphabet: int, k: float, epsilon: float) -> ExtractorPlan:
    """Fix all sizes for extracting against side information.

    ``alphabet`` is the raw symbol count; it is embedded into the next power
    of two, and the absorbing register count is likewise rounded up so that
    the final register split is exact.
    """
    if alphabet < 2:
        raise ValueError(f"need at least 2 source symbols, got {alphabet}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    q = embed_alphabet(alphabet)[0]
    if not 0.0 < k <= math.log2(q) + 1e-12:
        raise ValueError(f"k out of range: need 0 < k <= {math.log2(q)}, got {k}")
    x = q * 2.0 ** (-k) / epsilon
    n_raw = math.ceil(x - 1e-12)
    n = 1 << (n_raw - 1).bit_length()
    if n > q:
        raise ValueError(
            f"k out of range: {n} absorbing positions exceed the alphabet {q},"
            f" so no output register is left"
        )
    t = 1
    while q ** t < n:
        t += 1
    u1 = q ** t
    ubar = u1 * n
    v, rem = divmod(q ** (t + 1), ubar)
    if rem:
        raise AssertionError(f"register split {q}^{t + 1} / {ubar} is not exact")
    seed_bits = t * math.log2(q) + math.log2(n)
    extracted = math.log2(v)
    guaranteed = k - math.log2(1.0 / epsilon) - 1.0
    seed_bound = 2.0 * math.log2(q) - k + 2.0 * math.log2(1.0 / epsilon)
    met = seed_bits <= seed_bound + 1e-9
    if epsilon <= 0.5 and not met:
        raise AssertionError(f"seed length {seed_bits} exceeds its bound {seed_bound}")
    if extracted < guaranteed - 1e-9:
        raise AssertionError(f"extracted {extracted} bits fall below the promise {guaranteed}")
    params = ExtractorParams(
        alphabet=q,
        k=k,
        epsilon=epsilon,
        n=n,
        t=t,
        u1_size=u1,
        j_size=n,
        v_size=v,
        ubar_size=ubar,
        seed_bits=seed_bits,
        extracted_bits=extracted,
        guaranteed_bits=guaranteed,
        split_error=0.0,
        rounded=n != n_raw,
        seed_bound=seed_bound,
        seed_bound_met=met,
    )
    return ExtractorPlan(params)


def _block_matrix(block) -> np.ndarray:
    if isinstance(block, StateVector):
        amp = block.amplitudes
        return np.outer(amp, amp.conj())
    return block.matrix


def _source_arrays(source: CqState, alphabet: int):
    """Probabilities, block matrices, block objects, and the side marginal."""
    if len(source.classical_registers) != 1:
        raise ValueError("the source must carry exactly one classical register")
    dim = source.classical_registers[0].dim
    if dim > alphabet:
        raise ValueError(
            f"alphabet mismatch: source dimension {dim} exceeds the plan alphabet {alphabet}"
        )
    p = np.zeros(alphabet)
    mats: dict[int, np.ndarray] = {}
    objs: dict[int, object] = {}
    for key, (w, block) in source.blocks.items():
        c = key[0]
        p[c] = w
        mats[c] = _block_matrix(block)
        objs[c] = block
    psi_g = None
    for c, mat in mats.items():
        term = p[c] * mat
        psi_g = term if psi_g is None else psi_g + term
    return p, mats, objs, psi_g


def _eligibility(p: np.ndarray, mats: dict, psi_g: np.ndarray) -> float:
    worst = -math.inf
    for c, mat in mats.items():
        if p[c] <= 0.0:
            continue
        if np.array_equal(mat, psi_g):
            # identical side blocks contribute only their weight, exactly
            val = 0.0
        else:
            val = dmax(mat, psi_g)
        worst = max(worst, math.log2(p[c]) + val)
    return worst


def run_extractor(source: CqState, plan: ExtractorPlan) -> tuple[CqState, ExtractorReport]:
    """Relabel the classical register of ``source`` into (V, Ubar) exactly.

    Refuses sources whose measured conditional min-entropy falls short of the
    planned k.  The output's divergence from side-marginal x uniform is
    computed on the sparse support and checked against the mixing bound.
    """
    par = plan.params
    p, mats, objs, psi_g = _source_arrays(source, par.alphabet)
    gdim = psi_g.shape[0]
    if plan.family.size * par.n * gdim * gdim > RUN_CAP:
        raise ValueError(
            f"budget exceeded: {plan.family.size} strings x {par.n} positions"
            f" x side dimension {gdim}^2"
        )
    d_id = _eligibility(p, mats, psi_g)
    if d_id > -par.k + 1e-9:
        raise ValueError(
            f"eligibility violation: measured conditional divergence {d_id:.9f}"
            f" exceeds the planned -k = {-par.k:.9f}"
        )
    k_eff = math.log2(par.alphabet) + d_id

    order, index, slices = plan.tables()
    inv_unit = 1.0 / (par.n * par.u1_size)
    ref_w = 1.0 / (par.v_size * par.ubar_size)
    out_raw: dict[tuple[int, int], tuple[float, np.ndarray]] = {}
    out_blocks: dict[tuple[int, int], tuple[float, object]] = {}
    for s in order:
        coeffs = [(j, p[c] * inv_unit) for j, c in enumerate(s) if p[c] > 0.0]
        if not coeffs:
            continue
        w = 0.0
        for _, cf in coeffs:
            w += cf
        contrib = {id(objs[s[j]]) for j, _ in coeffs}
        if len(contrib) == 1:
            j0 = coeffs[0][0]
            mat = mats[s[j0]]
            block = objs[s[j0]]
        else:
            acc = np.zeros((gdim, gdim), dtype=complex)
            for j, cf in coeffs:
                acc += cf * mats[s[j]]
            mat = acc / w
            block = DensityOperator(mat, source.quantum_registers)
        key = plan.split(index[s])
        if key in out_raw:
            raise AssertionError("relabeling is not injective")
        out_raw[key] = (w, mat)
        out_blocks[key] = (w, block)

    ref_raw = {}
    for i in range(par.v_size * par.ubar_size):
        ref_raw[divmod(i, par.ubar_size)] = (ref_w, psi_g)
    d_out = rel_entropy_blocks(out_raw, ref_raw)
    d_bound = math.log2(1.0 + 2.0 ** k_eff / par.n)
    if d_out > d_bound + 1e-8:
        raise AssertionError(f"output divergence {d_out} exceeds the mixing bound {d_bound}")

    delta = 0.0
    for key, (rw, rmat) in ref_raw.items():
        entry = out_raw.get(key)
        if entry is None:
            delta += 0.5 * rw * trace_norm(rmat)
            continue
        w, mat = entry
        if w == rw and (mat is rmat or np.array_equal(mat, rmat)):
            continue
        delta += 0.5 * trace_norm(w * mat - rw * rmat)
    if delta > math.sqrt(2.0 * max(d_out, 0.0)) + 1e-9:
        raise AssertionError(f"trace distance {delta} exceeds the divergence corollary")

    cregs = (
        Register("V", par.v_size, CLASSICAL),
        Register("Ubar", par.ubar_size, CLASSICAL),
    )
    state = CqState(cregs, source.quantum_registers, out_blocks)
    report = ExtractorReport(
        d_out=d_out,
        d_bound=d_bound,
        extracted_bits=par.extracted_bits,
        seed_bits=par.seed_bits,
        split_error=par.split_error,
        k_eff=k_eff,
        eligibility_dmax=d_id,
        delta_out=delta,
        guaranteed_bits=par.guaranteed_bits,
    )
    return state, report


def run_shared_variant(source: CqState, plan: ExtractorPlan) -> tuple[CqState, ExtractorReport]:
    """Both parties relabel their copy of C with the same seed.

    The input must hold two classical registers in perfect correlation; the
    outputs are then perfectly correlated as well, and the report coincides
    with the single-party run on the shared marginal.
    """
    cregs = source.classical_registers
    if len(cregs) != 2:
        raise ValueError("the shared variant needs exactly two classical registers")
    if cregs[0].dim != cregs[1].dim:
        raise ValueError("the two classical registers must have equal dimension")
    marg_blocks = {}
    for (c, cp), entry in source.blocks.items():
        if entry[0] > 0.0 and c != cp:
            raise ValueError(f"second register is not a copy: saw outcome pair ({c}, {cp})")
        marg_blocks[(c,)] = entry
    marginal = CqState((cregs[0],), source.quantum_registers, marg_blocks)
    single, report = run_extractor(marginal, plan)
    par = plan.params
    pair_regs = (
        Register("V", par.v_size, CLASSICAL),
        Register("Ubar", par.ubar_size, CLASSICAL),
        Register("Vp", par.v_size, CLASSICAL),
        Register("Ubarp", par.ubar_size, CLASSICAL),
    )
    paired = {(v, u, v, u): entry for (v, u), entry in single.blocks.items()}
    return CqState(pair_regs, source.quantum_registers, paired), report


@dataclass(frozen=True)
class Factorization:
    """A stochastic map p(c|w) expressing one measurement through another.

    ``conditional[c, w]`` is the probability of reporting coarse outcome c
    after observing fine outcome w; the target's elements must match the
    corresponding mixtures of the fine elements.
    """

    target: Povm
    conditional: np.ndarray

    def __post_init__(self):
        cond = np.asarray(self.conditional, dtype=float)
        object.__setattr__(self, "conditional", cond)
        if cond.ndim != 2:
            raise ValueError("conditional must be a 2d array p(c|w)")
        if cond.shape[0] != self.target.size:
            raise ValueError(
                f"conditional has {cond.shape[0]} rows but the target has"
                f" {self.target.size} outcomes"
            )
        if np.min(cond) < -1e-12:
            raise ValueError("conditional probabilities must be nonnegative")
        sums = np.sum(cond, axis=0)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValueError("conditional columns must each sum to one")


@dataclass(frozen=True)
class CompositionReport:
    """Outcome of compressing a measurement without keeping its fine outcome."""

    stage_one: CompressionReport
    extraction: ExtractorReport | None
    degenerate: bool
    k_residual: float
    d_composed: float
    d_extraction: float
    stage_sum: float
    error_budget: float  # the 10 eps + 3 delta composition target
    message_bits: int
    initial_bits: float
    final_bits: float
    net_consumed_bits: float
    extracted_bits: float
    seed_bits: float
    m_bound: float
    r1_bound: float
    r2_bound: float
    delta: float


def _check_factorization(povm: Povm, fact: Factorization) -> None:
    cond = fact.conditional
    if cond.shape[1] != povm.size:
        raise ValueError(
            f"conditional has {cond.shape[1]} columns but the fine measurement has"
            f" {povm.size} outcomes"
        )
    if fact.target.dim != povm.dim:
        raise ValueError("the two measurements act on different dimensions")
    for c in range(fact.target.size):
        mix = np.zeros_like(povm.elements[0])
        for w in range(povm.size):
            if cond[c, w] > 0.0:
                mix = mix + cond[c, w] * povm.elements[w]
        dev = float(np.max(np.abs(fact.target.elements[c] - mix)))
        if dev > 1e-9:
            raise ValueError(f"factorization inconsistency: outcome {c} deviates by {dev:.3e}")


def _symbol_conditional(prep, fact: Factorization) -> np.ndarray:
    """p(c|w) re-indexed by working symbols; padding symbols sample uniformly."""
    n_c = fact.target.size
    cond = np.zeros((n_c, prep.alphabet))
    for s, lab in enumerate(prep.labels):
        if lab is None:
            cond[:, s] = 1.0 / n_c
        else:
            cond[:, s] = fact.conditional[:, lab]
    return cond


def _rb_matrices(prep) -> dict[int, np.ndarray]:
    dr, da, db = prep.dims
    out = {}
    for s, v in prep.vecs.items():
        flat = v.transpose(0, 2, 1).reshape(dr * db, da)
        out[s] = flat @ flat.conj().T
    return out


def _residual_entropy(prep, cond: np.ndarray, rho_s: dict, n_c: int):
    """-dmax of the retained state against (its outcome marginal) x identity."""
    pc = np.zeros(n_c)
    for s in rho_s:
        pc += prep.p[s] * cond[:, s]
    rho_c: dict[int, np.ndarray] = {}
    for c in range(n_c):
        if pc[c] <= 0.0:
            continue
        parts = [(s, prep.p[s] * cond[c, s]) for s in rho_s if prep.p[s] * cond[c, s] > 0.0]
        if len(parts) == 1 and parts[0][1] == pc[c]:
            rho_c[c] = rho_s[parts[0][0]]
        else:
            acc = np.zeros_like(next(iter(rho_s.values())))
            for s, wt in parts:
                acc = acc + wt * rho_s[s]
            rho_c[c] = acc / pc[c]
    worst = -math.inf
    for s in rho_s:
        for c in range(n_c):
            wt = prep.p[s] * cond[c, s]
            if wt <= 0.0:
                continue
            ref = rho_c[c]
            mat = rho_s[s]
            term = 0.0 if (mat is ref or np.array_equal(mat, ref)) else dmax(mat, ref)
            worst = max(worst, math.log2(wt / pc[c]) + term)
    return -worst, pc, rho_c


def _densified_input(prep, cond: np.ndarray, rho_s: dict, n_c: int):
    """The retained registers folded into one block-diagonal side system."""
    dr, da, db = prep.dims
    drb = dr * db
    gdim = n_c * drb
    greg = (Register("G", gdim),)
    wreg = (Register("W", prep.alphabet, CLASSICAL),)
    blocks = {}
    for s, mat in rho_s.items():
        big = np.zeros((gdim, gdim), dtype=complex)
        for c in range(n_c):
            if cond[c, s] > 0.0:
                big[c * drb:(c + 1) * drb, c * drb:(c + 1) * drb] = cond[c, s] * mat
        blocks[(s,)] = (float(prep.p[s]), DensityOperator(big, greg))
    return CqState(wreg, greg, blocks), greg


def compress_without_feedback(
    scenario: CompressionScenario, factorization: Factorization, delta: float
) -> CompositionReport:
    """Compress a fine measurement, sample the coarse outcome from it, then
    recycle the leftover correlation in the fine-outcome copies.

    The composed state is simulated exactly: the compression protocol runs
    first, the receiver samples the coarse outcome from his fine copy, and
    both parties push their fine copies through the extraction relabeling.
    The composed distance is checked against the sum of the two measured
    stage errors.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not isinstance(scenario.sigma, str):
        raise ValueError("composition requires the uniform reference over fine outcomes")
    _check_factorization(scenario.povm, factorization)

    rep1, phi, prep = run_protocol(scenario, return_state=True)
    n_c = factorization.target.size
    cond = _symbol_conditional(prep, factorization)
    rho_s = _rb_matrices(prep)
    k_res, pc, rho_c = _residual_entropy(prep, cond, rho_s, n_c)

    degenerate = k_res <= DEGENERATE_TOL
    plan = None
    if not degenerate:
        plan = build_plan(prep.alphabet, k_res, delta * delta)

    dr, da, db = prep.dims
    qregs = (Register("R", dr), Register("B", db))
    n1, q1 = rep1.n, prep.alphabet
    fanout = 1 if degenerate else plan.params.n * plan.params.u1_size
    if len(phi.blocks) * n_c * fanout > 2 ** 22:
        raise ValueError(
            f"budget exceeded: {len(phi.blocks)} branches x {n_c} outcomes"
            f" x {fanout} seeds"
        )
    if not degenerate:
        order, index, slices = plan.tables()
        ubar = plan.params.ubar_size
        pairmap = {
            (j, c): tuple(divmod(index[s], ubar) for s in slices[(j, c)])
            for j in range(plan.params.n)
            for c in range(q1)
        }
        seed_w = 1.0 / fanout

    acc: dict[tuple, np.ndarray] = {}
    for key, (w, block) in phi.blocks.items():
        c1, c1p, c2, c2p, j, jp = key
        rb = block.partial_trace(["A"]).matrix
        for c in range(n_c):
            pw = cond[c, c1p]
            if pw <= 0.0:
                continue
            base = w * pw
            if degenerate:
                out_key = (c1, c1p, c2, c2p, j, jp, c)
                mat = base * rb
                if out_key in acc:
                    acc[out_key] = acc[out_key] + mat
                else:
                    acc[out_key] = mat
            else:
                for je in range(plan.params.n):
                    row_a = pairmap[(je, c1)]
                    row_b = pairmap[(je, c1p)]
                    for u in range(plan.params.u1_size):
                        va, ua = row_a[u]
                        vb, ub = row_b[u]
                        out_key = (c2, c2p, j, jp, c, va, ua, vb, ub)
                        mat = (base * seed_w) * rb
                        if out_key in acc:
                            acc[out_key] = acc[out_key] + mat
                        else:
                            acc[out_key] = mat

    if degenerate:
        cregs = (
            Register("C1", q1, CLASSICAL),
            Register("C1p", q1, CLASSICAL),
            Register("C2", q1, CLASSICAL),
            Register("C2p", q1, CLASSICAL),
            Register("J", n1 + 1, CLASSICAL),
            Register("Jp", n1 + 1, CLASSICAL),
            Register("C", n_c, CLASSICAL),
        )
    else:
        cregs = (
            Register("C2", q1, CLASSICAL),
            Register("C2p", q1, CLASSICAL),
            Register("J", n1 + 1, CLASSICAL),
            Register("Jp", n1 + 1, CLASSICAL),
            Register("C", n_c, CLASSICAL),
            Register("V", plan.params.v_size, CLASSICAL),
            Register("Ubar", plan.params.ubar_size, CLASSICAL),
            Register("Vp", plan.params.v_size, CLASSICAL),
            Register("Ubarp", plan.params.ubar_size, CLASSICAL),
        )
    blocks = {}
    for out_key, mat in acc.items():
        wt = float(np.real(np.trace(mat)))
        if wt < 1e-18:
            continue
        blocks[out_key] = (wt, DensityOperator(mat / wt, qregs))
    composed = CqState(cregs, qregs, blocks)

    rho_c_ops = {c: DensityOperator(m, qregs) for c, m in rho_c.items()}
    ideal_blocks = {}
    if degenerate:
        rho_s_ops = {s: DensityOperator(m, qregs) for s, m in rho_s.items()}
        for s in rho_s:
            for d in range(q1):
                if prep.q[d] <= 0.0:
                    continue
                for j in range(1, n1 + 1):
                    for c in range(n_c):
                        wt = prep.p[s] * cond[c, s] * prep.q[d] / n1
                        if wt <= 0.0:
                            continue
                        ideal_blocks[(s, s, d, d, j, j, c)] = (wt, rho_s_ops[s])
    else:
        ref_w = 1.0 / (plan.params.v_size * plan.params.ubar_size)
        for d in range(q1):
            if prep.q[d] <= 0.0:
                continue
            for j in range(1, n1 + 1):
                for c in range(n_c):
                    if pc[c] <= 0.0:
                        continue
                    for i in range(plan.params.v_size * plan.params.ubar_size):
                        v, u = divmod(i, plan.params.ubar_size)
                        wt = prep.q[d] / n1 * pc[c] * ref_w
                        ideal_blocks[(d, d, j, j, c, v, u, v, u)] = (wt, rho_c_ops[c])
    ideal = CqState(cregs, qregs, ideal_blocks)
    d_comp = purified_from_fidelity(cq_fidelity(composed, ideal))

    ext_report = None
    d_ext = 0.0
    if not degenerate:
        dens_in, greg = _densified_input(prep, cond, rho_s, n_c)
        ext_state, ext_report = run_extractor(dens_in, plan)
        psi_g = None
        for (_s,), (wt, blk) in dens_in.blocks.items():
            term = wt * blk.matrix
            psi_g = term if psi_g is None else psi_g + term
        ref_w = 1.0 / (plan.params.v_size * plan.params.ubar_size)
        psi_op = DensityOperator(psi_g, greg)
        ref_blocks = {}
        for i in range(plan.params.v_size * plan.params.ubar_size):
            ref_blocks[divmod(i, plan.params.ubar_size)] = (ref_w, psi_op)
        reference = CqState(ext_state.classical_registers, greg, ref_blocks)
        d_ext = purified_from_fidelity(cq_fidelity(ext_state, reference))

    stage_sum = rep1.d_final + d_ext
    if d_comp > stage_sum + 1e-6:
        raise AssertionError(
            f"composed distance {d_comp} exceeds the stage sum {stage_sum}"
        )

    seed_bits = 0.0 if degenerate else plan.params.seed_bits
    extracted = 0.0 if degenerate else plan.params.extracted_bits
    initial_bits = rep1.r1_bits + seed_bits
    final_bits = rep1.r2_bits + seed_bits + extracted
    if final_bits != initial_bits - rep1.consumed_bits + extracted:
        raise AssertionError("randomness ledger does not balance")

    eps = scenario.epsilon
    log_q1 = math.log2(q1)
    m_bound = rep1.k - rep1.dh_bits + 7.0 * math.log2(1.0 / eps)
    r1_bound = 4.0 * log_q1 + math.log2(64.0 / (eps ** 5 * delta ** 5))
    drb = dr * db
    gdim = n_c * drb
    dense_joint = block_diag(
        *[
            prep.p[s] * _densify_symbol(cond, rho_s, s, n_c, drb, gdim)
            if s in rho_s
            else np.zeros((gdim, gdim), dtype=complex)
            for s in range(q1)
        ]
    )
    psi_g_dense = np.zeros((gdim, gdim), dtype=complex)
    for s in rho_s:
        psi_g_dense = psi_g_dense + prep.p[s] * _densify_symbol(cond, rho_s, s, n_c, drb, gdim)
    dense_ref = block_diag(*[psi_g_dense / q1 for _ in range(q1)])
    dmax_raw = dmax_smooth_upper(dense_joint, dense_ref, delta / 2.0).value
    r2_bound = 4.0 * log_q1 + rep1.k - dmax_raw - math.log2(8.0 * eps ** 5 / delta ** 5)

    return CompositionReport(
        stage_one=rep1,
        extraction=ext_report,
        degenerate=degenerate,
        k_residual=k_res,
        d_composed=d_comp,
        d_extraction=d_ext,
        stage_sum=stage_sum,
        error_budget=10.0 * eps + 3.0 * delta,
        message_bits=rep1.message_bits,
        initial_bits=initial_bits,
        final_bits=final_bits,
        net_consumed_bits=initial_bits - final_bits,
        extracted_bits=extracted,
        seed_bits=seed_bits,
        m_bound=m_bound,
        r1_bound=r1_bound,
        r2_bound=r2_bound,
        delta=delta,
    )


def _densify_symbol(cond, rho_s, s, n_c, drb, gdim):
    big = np.zeros((gdim, gdim), dtype=complex)
    for c in range(n_c):
        if cond[c, s] > 0.0:
            big[c * drb:(c + 1) * drb, c * drb:(c + 1) * drb] = cond[c, s] * rho_s[s]
    return big
