"""Pairwise-independent hash families over finite fields, with exact weights.

The affine family h_{a,b}(x) = phi(a*x) + b lives over a degree-t extension
of F_q and is restricted to n embedded positions.  The resulting strings form
a pairwise-independent distribution with uniform marginals; all weights are
Fractions so independence checks are exact equalities, never float
comparisons.  Marginal lifting reaches non-uniform rational targets by
pushing a larger uniform alphabet through a symbol map.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

# Exhaustive support enumeration is refused above this many seeds.
ENUMERATION_CAP = 2 ** 20


class PrimeField:
    """F_p with integer elements 0..p-1."""

    def __init__(self, p: int):
        if p < 2 or any(p % k == 0 for k in range(2, int(p ** 0.5) + 1)):
            raise ValueError(f"characteristic must be prime, got {p}")
        self.p = p
        self.order = p
        self.zero = 0
        self.one = 1

    def add(self, a, b):
        return (a + b) % self.p

    def sub(self, a, b):
        return (a - b) % self.p

    def mul(self, a, b):
        return (a * b) % self.p

    def neg(self, a):
        return (-a) % self.p

    def element(self, i: int):
        return i

    def index(self, e) -> int:
        return e


class ExtensionField:
    """Degree-d extension of a base field, modulo a monic irreducible.

    Elements are length-d tuples of base-field elements (coefficients in
    ascending degree); ``modulus`` holds the non-leading coefficients of the
    monic modulus polynomial.
    """

    def __init__(self, base, degree: int, modulus: tuple):
        if degree < 1:
            raise ValueError(f"extension degree must be positive, got {degree}")
        if len(modulus) != degree:
            raise ValueError("modulus must list the non-leading coefficients")
        self.base = base
        self.degree = degree
        self.modulus = tuple(modulus)
        self.order = base.order ** degree
        self.zero = tuple(base.zero for _ in range(degree))
        self.one = tuple(base.one if k == 0 else base.zero for k in range(degree))

    def add(self, a, b):
        return tuple(self.base.add(x, y) for x, y in zip(a, b))

    def sub(self, a, b):
        return tuple(self.base.sub(x, y) for x, y in zip(a, b))

    def neg(self, a):
        return tuple(self.base.neg(x) for x in a)

    def mul(self, a, b):
        base = self.base
        d = self.degree
        full = [base.zero] * (2 * d - 1)
        for i, x in enumerate(a):
            if x == base.zero:
                continue
            for j, y in enumerate(b):
                full[i + j] = base.add(full[i + j], base.mul(x, y))
        for k in range(2 * d - 2, d - 1, -1):
            c = full[k]
            if c == base.zero:
                continue
            for m in range(d):
                full[k - d + m] = base.sub(full[k - d + m], base.mul(c, self.modulus[m]))
            full[k] = base.zero
        return tuple(full[:d])

    def constant_coeff(self, a):
        return a[0]

    def element(self, i: int):
        out = []
        for _ in range(self.degree):
            out.append(self.base.element(i % self.base.order))
            i //= self.base.order
        return tuple(out)

    def index(self, e) -> int:
        i = 0
        for coeff in reversed(e):
            i = i * self.base.order + self.base.index(coeff)
        return i


def _poly_mod(dividend: list, divisor_low: tuple, base) -> list:
    # divisor is monic: x^len(divisor_low) + sum divisor_low[m] x^m
    rem = list(dividend)
    dd = len(divisor_low)
    for k in range(len(rem) - 1, dd - 1, -1):
        c = rem[k]
        if c == base.zero:
            continue
        for m in range(dd):
            rem[k - dd + m] = base.sub(rem[k - dd + m], base.mul(c, divisor_low[m]))
        rem[k] = base.zero
    return rem[:dd]


def _is_irreducible(low: tuple, degree: int, base) -> bool:
    if degree == 1:
        return True
    dividend = list(low) + [base.one]
    for ddeg in range(1, degree // 2 + 1):
        for didx in range(base.order ** ddeg):
            div = tuple(base.element(d) for d in _digits(didx, base.order, ddeg))
            rem = _poly_mod(dividend, div, base)
            if all(c == base.zero for c in rem):
                return False
    return True


def find_irreducible(base, degree: int) -> tuple:
    """Non-leading coefficients of the lexicographically smallest monic
    irreducible of the given degree, so field tables are reproducible."""
    for idx in range(base.order ** degree):
        low = tuple(base.element(d) for d in _digits(idx, base.order, degree))
        if _is_irreducible(low, degree, base):
            return low
    raise ValueError(f"no irreducible of degree {degree} found")  # unreachable


def _digits(i: int, radix: int, width: int) -> list[int]:
    out = []
    for _ in range(width):
        out.append(i % radix)
        i //= radix
    return out


def _prime_power(q: int) -> tuple[int, int]:
    if q < 2:
        raise ValueError(f"alphabet size must be at least 2, got {q}")
    n = q
    p = None
    for cand in range(2, int(q ** 0.5) + 1):
        if n % cand == 0:
            p = cand
            break
    if p is None:
        return q, 1
    d = 0
    while n % p == 0:
        n //= p
        d += 1
    if n != 1:
        raise ValueError(f"alphabet size must be a prime power, got {q}")
    return p, d


def is_prime_power(q: int) -> bool:
    try:
        _prime_power(q)
        return True
    except ValueError:
        return False


def field_of_order(q: int):
    """GF(q) for a prime power q, with the canonical smallest modulus."""
    p, d = _prime_power(q)
    prime = PrimeField(p)
    if d == 1:
        return prime
    return ExtensionField(prime, d, find_irreducible(prime, d))


@dataclass(frozen=True)
class ConditionalSlice:
    """Seeds consistent with one fixed position value, in canonical order."""

    seeds: tuple[tuple[int, int], ...]
    strings: tuple[tuple[int, ...], ...]  # remaining positions, same order as seeds
    probability: Fraction


class PairwiseFamily:
    """The q^{t+1} affine hash functions restricted to n positions.

    Position i embeds as the field element with base-q digits of i, so the
    zero element is always in use; pairwise independence is unaffected.
    Seeds are pairs (a_index, b_index) with a over the extension field and b
    over the alphabet field.
    """

    def __init__(self, q: int, n: int):
        if n < 2:
            raise ValueError(f"need at least 2 positions, got {n}")
        self.q = q
        self.n = n
        self.alphabet = field_of_order(q)
        t = 1
        while q ** t < n:
            t += 1
        self.t = t
        self.ext = ExtensionField(self.alphabet, t, find_irreducible(self.alphabet, t))
        self.positions = tuple(self.ext.element(i) for i in range(n))
        self._support: dict[tuple[int, ...], Fraction] | None = None

    @property
    def size(self) -> int:
        return self.q ** (self.t + 1)

    def evaluate(self, a_idx: int, b_idx: int, position: int) -> int:
        a = self.ext.element(a_idx)
        b = self.alphabet.element(b_idx)
        prod = self.ext.mul(a, self.positions[position])
        return self.alphabet.index(self.alphabet.add(self.ext.constant_coeff(prod), b))

    def string(self, a_idx: int, b_idx: int) -> tuple[int, ...]:
        a = self.ext.element(a_idx)
        b = self.alphabet.element(b_idx)
        out = []
        for x in self.positions:
            prod = self.ext.mul(a, x)
            out.append(self.alphabet.index(self.alphabet.add(self.ext.constant_coeff(prod), b)))
        return tuple(out)

    def seeds(self):
        for a_idx in range(self.q ** self.t):
            for b_idx in range(self.q):
                yield a_idx, b_idx

    def support(self) -> dict[tuple[int, ...], Fraction]:
        """All support strings with their exact weights (each 1/size)."""
        if self._support is None:
            if self.size > ENUMERATION_CAP:
                raise ValueError(f"support enumeration refused above {ENUMERATION_CAP} seeds")
            w = Fraction(1, self.size)
            table: dict[tuple[int, ...], Fraction] = {}
            for a_idx, b_idx in self.seeds():
                s = self.string(a_idx, b_idx)
                table[s] = table.get(s, Fraction(0)) + w
            self._support = table
        return self._support

    def marginal(self, position: int) -> dict[int, Fraction]:
        return {c: Fraction(1, self.q) for c in range(self.q)}

    def conditional_slice(self, position: int, value: int) -> ConditionalSlice:
        """The q^t seeds with h(position) = value, ordered by a_index.

        For each a the offset b is determined, so the slice has exactly one
        seed per a and the conditional string distribution is uniform.
        """
        if not 0 <= value < self.q:
            raise ValueError(f"value {value} outside alphabet of size {self.q}")
        x = self.positions[position]
        target = self.alphabet.element(value)
        seeds = []
        strings = []
        for a_idx in range(self.q ** self.t):
            a = self.ext.element(a_idx)
            shift = self.ext.constant_coeff(self.ext.mul(a, x))
            b = self.alphabet.sub(target, shift)
            b_idx = self.alphabet.index(b)
            seeds.append((a_idx, b_idx))
            full = self.string(a_idx, b_idx)
            strings.append(full[:position] + full[position + 1:])
        return ConditionalSlice(tuple(seeds), tuple(strings), Fraction(1, self.q ** self.t))


class LiftedFamily:
    """A pairwise family pushed through a symbol map to hit a rational marginal.

    ``mapping`` sends each base-alphabet symbol to a target symbol; the
    marginal of every position is multiplicity/|C'| exactly, and pairwise
    independence survives the pushforward.
    """

    def __init__(self, base_family: PairwiseFamily, mapping: tuple[int, ...], target_size: int | None = None):
        if len(mapping) != base_family.q:
            raise ValueError("mapping must cover the base alphabet")
        self.base_family = base_family
        self.mapping = tuple(mapping)
        self.target_size = target_size if target_size is not None else max(mapping) + 1
        if any(not 0 <= m < self.target_size for m in mapping):
            raise ValueError("mapping value outside the target alphabet")
        self.n = base_family.n
        self._support: dict[tuple[int, ...], Fraction] | None = None

    @property
    def size(self) -> int:
        return self.base_family.size

    def string(self, a_idx: int, b_idx: int) -> tuple[int, ...]:
        return tuple(self.mapping[c] for c in self.base_family.string(a_idx, b_idx))

    def marginal(self, position: int) -> dict[int, Fraction]:
        out = {c: Fraction(0) for c in range(self.target_size)}
        for m in self.mapping:
            out[m] += Fraction(1, self.base_family.q)
        return out

    def support(self) -> dict[tuple[int, ...], Fraction]:
        """Mapped strings with aggregated exact weights; strings can collide."""
        if self._support is None:
            table: dict[tuple[int, ...], Fraction] = {}
            for s, w in self.base_family.support().items():
                mapped = tuple(self.mapping[c] for c in s)
                table[mapped] = table.get(mapped, Fraction(0)) + w
            self._support = table
        return self._support

    def conditional_seeds(self, position: int, value: int) -> tuple[tuple[int, int], ...]:
        out = []
        for pre in range(self.base_family.q):
            if self.mapping[pre] == value:
                out.extend(self.base_family.conditional_slice(position, pre).seeds)
        return tuple(sorted(out))


def lift_marginal(base_family: PairwiseFamily, mapping, target_size: int | None = None) -> LiftedFamily:
    return LiftedFamily(base_family, tuple(mapping), target_size)


def plan_lift(marginal, n: int) -> LiftedFamily:
    """Family over an enlarged power-of-two alphabet realizing the marginal.

    Every weight must be dyadic (denominator a power of two); symbols of the
    target alphabet receive counts proportional to their weights.
    """
    fracs = [Fraction(m) for m in marginal]
    if any(f < 0 for f in fracs) or sum(fracs) != 1:
        raise ValueError("marginal must be a probability distribution")
    denom = 1
    for f in fracs:
        d = f.denominator
        if d & (d - 1):
            raise ValueError(f"marginal weight {f} is not dyadic")
        denom = max(denom, d)
    denom = max(denom, 2)
    mapping = []
    for c, f in enumerate(fracs):
        mapping.extend([c] * int(f * denom))
    return LiftedFamily(PairwiseFamily(denom, n), tuple(mapping), len(fracs))


def embed_alphabet(dim: int) -> tuple[int, tuple[int, ...]]:
    """Smallest power-of-two alphabet holding dim symbols, with the identity
    embedding; padding symbols carry zero weight downstream."""
    if dim < 1:
        raise ValueError(f"dimension must be positive, got {dim}")
    q = 2
    while q < dim:
        q *= 2
    return q, tuple(range(dim))


def family_table_rows(fam) -> list[tuple[int, ...]]:
    """Audit rows (a_index, b_index, c_1..c_n) over all seeds."""
    base = fam.base_family if isinstance(fam, LiftedFamily) else fam
    if base.size > ENUMERATION_CAP:
        raise ValueError(f"table export refused above {ENUMERATION_CAP} seeds")
    rows = []
    for a_idx, b_idx in base.seeds():
        rows.append((a_idx, b_idx) + fam.string(a_idx, b_idx))
    return rows
