"""Registers and exact state representations.

Three state classes cover everything the protocols need:

* :class:`StateVector` -- pure states, amplitudes over an ordered register list.
* :class:`DensityOperator` -- mixed states as dense Hermitian matrices.
* :class:`CqState` -- classical-quantum states stored sparsely as a map from
  classical strings to weighted quantum blocks, so protocol states whose dense
  dimension would be astronomical stay desk-sized.

Distances canonicalize register order lexicographically before comparing, so
callers never have to pre-align operands.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .linalg import mat_sqrt, trace_norm

NORM_TOL = 1e-12
TRACE_TOL = 1e-10
WEIGHT_TOL = 1e-10
ISOMETRY_TOL = 1e-9
# Measurement outcomes below this probability are dropped.
OUTCOME_TOL = 1e-14
# densify() refuses above this total dimension.
DENSIFY_CAP = 2 ** 14

CLASSICAL = "classical"
QUANTUM = "quantum"


@dataclass(frozen=True)
class Register:
    """A named subsystem with a fixed dimension and a classical/quantum kind."""

    name: str
    dim: int
    kind: str = QUANTUM

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("register name must be non-empty")
        if self.dim < 1:
            raise ValueError(f"register {self.name!r} has dimension {self.dim} < 1")
        if self.kind not in (CLASSICAL, QUANTUM):
            raise ValueError(f"register {self.name!r} has unknown kind {self.kind!r}")


def _check_registers(registers: tuple[Register, ...]) -> None:
    names = [r.name for r in registers]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate register names in {names}")


def total_dim(registers: tuple[Register, ...]) -> int:
    return prod(r.dim for r in registers)


def _index_of(registers: tuple[Register, ...], name: str) -> int:
    for i, r in enumerate(registers):
        if r.name == name:
            return i
    raise KeyError(f"no register named {name!r} in {[r.name for r in registers]}")


class StateVector:
    """Normalized pure state over an ordered tuple of registers."""

    def __init__(self, amplitudes: np.ndarray, registers: tuple[Register, ...]):
        registers = tuple(registers)
        _check_registers(registers)
        amp = np.asarray(amplitudes, dtype=complex).reshape(-1)
        if amp.size != total_dim(registers):
            raise ValueError(
                f"amplitude length {amp.size} does not match register dimension {total_dim(registers)}"
            )
        norm = float(np.linalg.norm(amp))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"state vector norm {norm} is not 1")
        if abs(norm - 1.0) > NORM_TOL:
            amp = amp / norm
        self.amplitudes = amp
        self.registers = registers

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(r.dim for r in self.registers)

    def tensor(self, other: "StateVector") -> "StateVector":
        both = self.registers + other.registers
        _check_registers(both)
        return StateVector(np.kron(self.amplitudes, other.amplitudes), both)

    def permute(self, order: list[str]) -> "StateVector":
        if sorted(order) != sorted(r.name for r in self.registers):
            raise ValueError(f"permutation {order} is not a reordering of the register names")
        perm = [_index_of(self.registers, n) for n in order]
        tensor = self.amplitudes.reshape(self.dims).transpose(perm)
        return StateVector(tensor.reshape(-1), tuple(self.registers[i] for i in perm))

    def to_density(self) -> "DensityOperator":
        return DensityOperator(np.outer(self.amplitudes, self.amplitudes.conj()), self.registers)

    def partial_trace(self, drop: list[str]) -> "DensityOperator":
        """Reduced density operator after tracing out the named registers."""
        keep = [r.name for r in self.registers if r.name not in drop]
        for n in drop:
            _index_of(self.registers, n)
        moved = self.permute(keep + list(drop))
        keep_dim = prod(r.dim for r in moved.registers[: len(keep)])
        mat = moved.amplitudes.reshape(keep_dim, -1)
        return DensityOperator(mat @ mat.conj().T, moved.registers[: len(keep)])

    def overlap(self, other: "StateVector") -> complex:
        aligned = other.permute([r.name for r in self.registers])
        return complex(np.vdot(self.amplitudes, aligned.amplitudes))


class DensityOperator:
    """Unit-trace PSD operator over an ordered tuple of registers."""

    def __init__(self, matrix: np.ndarray, registers: tuple[Register, ...]):
        registers = tuple(registers)
        _check_registers(registers)
        mat = np.asarray(matrix, dtype=complex)
        d = total_dim(registers)
        if mat.shape != (d, d):
            raise ValueError(f"matrix shape {mat.shape} does not match register dimension {d}")
        if np.max(np.abs(mat - mat.conj().T)) > 1e-9:
            raise ValueError("density matrix is not Hermitian")
        tr = float(np.real(np.trace(mat)))
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace {tr} is not 1")
        self.matrix = 0.5 * (mat + mat.conj().T)
        self.registers = registers

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(r.dim for r in self.registers)

    def tensor(self, other: "DensityOperator") -> "DensityOperator":
        both = self.registers + other.registers
        _check_registers(both)
        return DensityOperator(np.kron(self.matrix, other.matrix), both)

    def permute(self, order: list[str]) -> "DensityOperator":
        if sorted(order) != sorted(r.name for r in self.registers):
            raise ValueError(f"permutation {order} is not a reordering of the register names")
        perm = [_index_of(self.registers, n) for n in order]
        n = len(self.registers)
        tensor = self.matrix.reshape(self.dims + self.dims)
        tensor = tensor.transpose(perm + [p + n for p in perm])
        d = total_dim(self.registers)
        return DensityOperator(tensor.reshape(d, d), tuple(self.registers[i] for i in perm))

    def partial_trace(self, drop: list[str]) -> "DensityOperator":
        keep = [r.name for r in self.registers if r.name not in drop]
        for n in drop:
            _index_of(self.registers, n)
        moved = self.permute(keep + list(drop))
        kd = prod(r.dim for r in moved.registers[: len(keep)])
        dd = prod(r.dim for r in moved.registers[len(keep):])
        tensor = moved.matrix.reshape(kd, dd, kd, dd)
        return DensityOperator(np.einsum("ajbj->ab", tensor), moved.registers[: len(keep)])


Block = StateVector | DensityOperator


def _block_matrix(block: Block) -> np.ndarray:
    if isinstance(block, StateVector):
        return np.outer(block.amplitudes, block.amplitudes.conj())
    return block.matrix


class CqState:
    """Sparse classical-quantum state: weighted quantum blocks keyed by classical strings.

    ``blocks`` maps a tuple of classical symbol indices (one per classical
    register, in order) to ``(weight, block)`` where the block lives on the
    quantum registers.  Only strings with nonzero weight are stored.
    """

    def __init__(
        self,
        classical_registers: tuple[Register, ...],
        quantum_registers: tuple[Register, ...],
        blocks: dict[tuple[int, ...], tuple[float, Block]],
    ):
        classical_registers = tuple(classical_registers)
        quantum_registers = tuple(quantum_registers)
        _check_registers(classical_registers + quantum_registers)
        for r in classical_registers:
            if r.kind != CLASSICAL:
                raise ValueError(f"register {r.name!r} in the classical part must have kind 'classical'")
        qnames = tuple(r.name for r in quantum_registers)
        total = 0.0
        for key, (weight, block) in blocks.items():
            if len(key) != len(classical_registers):
                raise ValueError(f"key {key} length does not match the classical register count")
            for sym, reg in zip(key, classical_registers):
                if not 0 <= sym < reg.dim:
                    raise ValueError(f"symbol {sym} out of range for register {reg.name!r}")
            if weight < -WEIGHT_TOL:
                raise ValueError(f"negative weight {weight} at key {key}")
            if tuple(r.name for r in block.registers) != qnames:
                raise ValueError(
                    f"block at {key} lives on {[r.name for r in block.registers]}, expected {list(qnames)}"
                )
            total += weight
        if blocks and abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"block weights sum to {total}, not 1")
        self.classical_registers = classical_registers
        self.quantum_registers = quantum_registers
        self.blocks = dict(blocks)

    def weight_of(self, key: tuple[int, ...]) -> float:
        entry = self.blocks.get(key)
        return 0.0 if entry is None else entry[0]

    def classical_distribution(self) -> dict[tuple[int, ...], float]:
        return {key: w for key, (w, _) in self.blocks.items()}

    def permute_classical(self, order: list[str]) -> "CqState":
        if sorted(order) != sorted(r.name for r in self.classical_registers):
            raise ValueError(f"{order} is not a reordering of the classical registers")
        perm = [_index_of(self.classical_registers, n) for n in order]
        new_regs = tuple(self.classical_registers[i] for i in perm)
        new_blocks = {
            tuple(key[i] for i in perm): entry for key, entry in self.blocks.items()
        }
        return CqState(new_regs, self.quantum_registers, new_blocks)

    def permute_quantum(self, order: list[str]) -> "CqState":
        new_blocks = {}
        new_regs = None
        for key, (w, block) in self.blocks.items():
            moved = block.permute(order)
            new_regs = moved.registers
            new_blocks[key] = (w, moved)
        if new_regs is None:
            new_regs = tuple(
                self.quantum_registers[_index_of(self.quantum_registers, n)] for n in order
            )
        return CqState(self.classical_registers, new_regs, new_blocks)

    def partial_trace_classical(self, drop: list[str]) -> "CqState":
        """Marginalize classical registers; colliding keys mix their blocks."""
        keep_idx = [i for i, r in enumerate(self.classical_registers) if r.name not in drop]
        for n in drop:
            _index_of(self.classical_registers, n)
        groups: dict[tuple[int, ...], list[tuple[float, Block]]] = {}
        for key, entry in self.blocks.items():
            groups.setdefault(tuple(key[i] for i in keep_idx), []).append(entry)
        new_blocks: dict[tuple[int, ...], tuple[float, Block]] = {}
        for key, entries in groups.items():
            if len(entries) == 1:
                new_blocks[key] = entries[0]
                continue
            weight = sum(w for w, _ in entries)
            if weight <= OUTCOME_TOL:
                continue
            mat = sum(w * _block_matrix(b) for w, b in entries) / weight
            new_blocks[key] = (weight, DensityOperator(mat, entries[0][1].registers))
        return CqState(
            tuple(self.classical_registers[i] for i in keep_idx), self.quantum_registers, new_blocks
        )

    def partial_trace_quantum(self, drop: list[str]) -> "CqState":
        new_blocks = {}
        new_regs: tuple[Register, ...] | None = None
        for key, (w, block) in self.blocks.items():
            reduced = block.partial_trace(drop)
            new_regs = reduced.registers
            new_blocks[key] = (w, reduced)
        if new_regs is None:
            new_regs = tuple(r for r in self.quantum_registers if r.name not in drop)
        return CqState(self.classical_registers, new_regs, new_blocks)

    def densify(self) -> DensityOperator:
        """Debug path: dense matrix with classical registers first.

        Refuses when the total dimension exceeds DENSIFY_CAP.
        """
        regs = self.classical_registers + self.quantum_registers
        d = total_dim(regs)
        if d > DENSIFY_CAP:
            raise ValueError(f"densify refused: total dimension {d} exceeds {DENSIFY_CAP}")
        cdims = [r.dim for r in self.classical_registers]
        qd = total_dim(self.quantum_registers)
        out = np.zeros((d, d), dtype=complex)
        for key, (w, block) in self.blocks.items():
            flat = int(np.ravel_multi_index(key, cdims)) if cdims else 0
            out[flat * qd:(flat + 1) * qd, flat * qd:(flat + 1) * qd] += w * _block_matrix(block)
        return DensityOperator(out, regs)


def purify(rho: DensityOperator, purifier_name: str) -> StateVector:
    """Purification with purifier dimension equal to the rank of ``rho``.

    Eigenvalues above 1e-12 count toward the rank.
    """
    vals, vecs = np.linalg.eigh(rho.matrix)
    keep = vals > 1e-12
    lam = vals[keep]
    vec = vecs[:, keep]
    rank = int(lam.size)
    if rank == 0:
        raise ValueError("cannot purify the zero operator")
    amp = (vec * np.sqrt(lam)).reshape(-1)
    regs = rho.registers + (Register(purifier_name, rank, QUANTUM),)
    return StateVector(amp, regs)


def apply_isometry(
    iso: np.ndarray,
    state: StateVector | DensityOperator,
    source: list[str],
    target: tuple[Register, ...],
):
    """Apply an isometry mapping the named source registers onto new target registers.

    ``iso`` has shape (target_dim, source_dim).  Output register order: the
    untouched registers in their original order, then the targets.
    """
    target = tuple(target)
    src_dim = prod(state.registers[_index_of(state.registers, n)].dim for n in source)
    tgt_dim = total_dim(target)
    iso = np.asarray(iso, dtype=complex)
    if iso.shape != (tgt_dim, src_dim):
        raise ValueError(f"isometry shape {iso.shape} does not match ({tgt_dim}, {src_dim})")
    gram = iso.conj().T @ iso
    if np.max(np.abs(gram - np.eye(src_dim))) > ISOMETRY_TOL:
        raise ValueError("operator is not an isometry: V^dag V differs from the identity")
    rest = [r.name for r in state.registers if r.name not in source]
    if isinstance(state, StateVector):
        moved = state.permute(rest + list(source))
        mat = moved.amplitudes.reshape(-1, src_dim)
        out = mat @ iso.T
        regs = moved.registers[: len(rest)] + target
        return StateVector(out.reshape(-1), regs)
    moved = state.permute(rest + list(source))
    rd = prod(r.dim for r in moved.registers[: len(rest)])
    tensor = moved.matrix.reshape(rd, src_dim, rd, src_dim)
    out = np.einsum("ts,asbu,vu->atbv", iso, tensor, iso.conj(), optimize=True)
    regs = moved.registers[: len(rest)] + target
    d = rd * tgt_dim
    return DensityOperator(out.reshape(d, d), regs)


def measure_register(state: StateVector | CqState, name: str):
    """Projective computational-basis measurement of one register.

    Returns a list of ``(outcome, probability, post_state)`` sorted by outcome,
    omitting outcomes with probability below OUTCOME_TOL.  The measured
    register is removed from the post-states.
    """
    if isinstance(state, StateVector):
        idx = _index_of(state.registers, name)
        rest = [r.name for r in state.registers if r.name != name]
        moved = state.permute([name] + rest)
        dim = state.registers[idx].dim
        slices = moved.amplitudes.reshape(dim, -1)
        results = []
        for outcome in range(dim):
            p = float(np.sum(np.abs(slices[outcome]) ** 2))
            if p < OUTCOME_TOL:
                continue
            post = StateVector(slices[outcome] / np.sqrt(p), moved.registers[1:])
            results.append((outcome, p, post))
        return results
    if isinstance(state, CqState):
        cnames = [r.name for r in state.classical_registers]
        if name in cnames:
            idx = cnames.index(name)
            rest_regs = tuple(r for i, r in enumerate(state.classical_registers) if i != idx)
            per_outcome: dict[int, dict[tuple[int, ...], tuple[float, Block]]] = {}
            probs: dict[int, float] = {}
            for key, (w, block) in state.blocks.items():
                outcome = key[idx]
                sub = key[:idx] + key[idx + 1:]
                probs[outcome] = probs.get(outcome, 0.0) + w
                per_outcome.setdefault(outcome, {})[sub] = (w, block)
            results = []
            for outcome in sorted(per_outcome):
                p = probs[outcome]
                if p < OUTCOME_TOL:
                    continue
                rescaled = {k: (w / p, b) for k, (w, b) in per_outcome[outcome].items()}
                results.append((outcome, p, CqState(rest_regs, state.quantum_registers, rescaled)))
            return results
        # quantum register of a cq state: measure every block and regroup
        dim = state.quantum_registers[_index_of(state.quantum_registers, name)].dim
        collected: dict[int, dict[tuple[int, ...], list[tuple[float, Block]]]] = {}
        probs = {}
        for key, (w, block) in state.blocks.items():
            vec_measurements = (
                measure_register(block, name)
                if isinstance(block, StateVector)
                else _measure_density(block, name)
            )
            for outcome, p, post in vec_measurements:
                probs[outcome] = probs.get(outcome, 0.0) + w * p
                collected.setdefault(outcome, {}).setdefault(key, []).append((w * p, post))
        results = []
        for outcome in sorted(collected):
            p = probs[outcome]
            if p < OUTCOME_TOL:
                continue
            new_blocks: dict[tuple[int, ...], tuple[float, Block]] = {}
            qregs = None
            for key, entries in collected[outcome].items():
                weight = sum(w for w, _ in entries)
                if len(entries) == 1:
                    new_blocks[key] = (weight / p, entries[0][1])
                else:
                    mat = sum(w * _block_matrix(b) for w, b in entries) / weight
                    new_blocks[key] = (weight / p, DensityOperator(mat, entries[0][1].registers))
                qregs = entries[0][1].registers
            results.append((outcome, p, CqState(state.classical_registers, qregs, new_blocks)))
        return results
    raise TypeError(f"cannot measure a {type(state).__name__}")


def _measure_density(rho: DensityOperator, name: str):
    rest = [r.name for r in rho.registers if r.name != name]
    moved = rho.permute([name] + rest)
    dim = moved.registers[0].dim
    sub = total_dim(moved.registers[1:])
    tensor = moved.matrix.reshape(dim, sub, dim, sub)
    results = []
    for outcome in range(dim):
        blockmat = tensor[outcome, :, outcome, :]
        p = float(np.real(np.trace(blockmat)))
        if p < OUTCOME_TOL:
            continue
        results.append((outcome, p, DensityOperator(blockmat / p, moved.registers[1:])))
    return results


def _canonical_pair(a, b):
    """Permute both operands into lexicographic register order."""
    names_a = sorted(r.name for r in a.registers)
    names_b = sorted(r.name for r in b.registers)
    if names_a != names_b:
        raise ValueError(f"states live on different registers: {names_a} vs {names_b}")
    for n in names_a:
        da = a.registers[_index_of(a.registers, n)].dim
        db = b.registers[_index_of(b.registers, n)].dim
        if da != db:
            raise ValueError(f"register {n!r} has mismatched dimensions {da} vs {db}")
    return a.permute(names_a), b.permute(names_b)


def fidelity(a, b) -> float:
    """Root fidelity ||sqrt(rho) sqrt(sigma)||_1 after canonical register alignment."""
    a, b = _canonical_pair(a, b)
    if isinstance(a, StateVector) and isinstance(b, StateVector):
        return min(1.0, abs(np.vdot(a.amplitudes, b.amplitudes)))
    if isinstance(a, StateVector):
        val = np.real(np.vdot(a.amplitudes, b.matrix @ a.amplitudes))
        return min(1.0, float(np.sqrt(max(val, 0.0))))
    if isinstance(b, StateVector):
        return fidelity(b, a)
    return min(1.0, trace_norm(mat_sqrt(a.matrix) @ mat_sqrt(b.matrix)))


def trace_distance(a, b) -> float:
    a, b = _canonical_pair(a, b)
    ma = _block_matrix(a) if not isinstance(a, DensityOperator) else a.matrix
    mb = _block_matrix(b) if not isinstance(b, DensityOperator) else b.matrix
    return 0.5 * trace_norm(ma - mb)


def purified_distance(a, b) -> float:
    return purified_from_fidelity(fidelity(a, b))


def purified_from_fidelity(f: float) -> float:
    return float(np.sqrt(max(0.0, 1.0 - min(1.0, f) ** 2)))


def distance(metric: str, a, b) -> float:
    """Dispatch on metric name: 'fidelity', 'trace', or 'purified'."""
    if metric == "fidelity":
        return fidelity(a, b)
    if metric == "trace":
        return trace_distance(a, b)
    if metric == "purified":
        return purified_distance(a, b)
    raise ValueError(f"unknown metric {metric!r}")


def _block_fidelity(a: Block, b: Block) -> float:
    if isinstance(a, StateVector) and isinstance(b, StateVector):
        return abs(np.vdot(a.amplitudes, b.amplitudes))
    if isinstance(a, StateVector):
        return float(np.sqrt(max(0.0, np.real(np.vdot(a.amplitudes, _block_matrix(b) @ a.amplitudes)))))
    if isinstance(b, StateVector):
        return _block_fidelity(b, a)
    return trace_norm(mat_sqrt(a.matrix) @ mat_sqrt(b.matrix))


def cq_fidelity(a: CqState, b: CqState) -> float:
    """Fidelity of two cq states as the weighted sum of block fidelities.

    Computed sparsely over the shared classical support; never materializes a
    dense joint matrix.
    """
    order_c = sorted(r.name for r in a.classical_registers)
    if order_c != sorted(r.name for r in b.classical_registers):
        raise ValueError("cq states have different classical registers")
    order_q = sorted(r.name for r in a.quantum_registers)
    if order_q != sorted(r.name for r in b.quantum_registers):
        raise ValueError("cq states have different quantum registers")
    a2 = a.permute_classical(order_c).permute_quantum(order_q) if a.blocks else a
    b2 = b.permute_classical(order_c).permute_quantum(order_q) if b.blocks else b
    total = 0.0
    for key, (wa, block_a) in a2.blocks.items():
        entry = b2.blocks.get(key)
        if entry is None:
            continue
        wb, block_b = entry
        total += np.sqrt(wa * wb) * _block_fidelity(block_a, block_b)
    return min(1.0, total)


def cq_trace_distance(a: CqState, b: CqState) -> float:
    """Trace distance of two cq states, blockwise over the union support."""
    order_c = sorted(r.name for r in a.classical_registers)
    order_q = sorted(r.name for r in a.quantum_registers)
    a2 = a.permute_classical(order_c).permute_quantum(order_q) if a.blocks else a
    b2 = b.permute_classical(order_c).permute_quantum(order_q) if b.blocks else b
    total = 0.0
    for key in set(a2.blocks) | set(b2.blocks):
        wa, ba = a2.blocks.get(key, (0.0, None))
        wb, bb = b2.blocks.get(key, (0.0, None))
        ma = wa * _block_matrix(ba) if ba is not None else 0.0
        mb = wb * _block_matrix(bb) if bb is not None else 0.0
        total += 0.5 * trace_norm(np.atleast_2d(ma - mb))
    return total


def basis_vector(registers: tuple[Register, ...], values: tuple[int, ...]) -> StateVector:
    """Computational basis state |values> on the given registers."""
    dims = [r.dim for r in registers]
    amp = np.zeros(total_dim(tuple(registers)), dtype=complex)
    amp[int(np.ravel_multi_index(values, dims))] = 1.0
    return StateVector(amp, tuple(registers))
