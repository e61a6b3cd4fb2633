"""Fixed-length bit strings and the r-contiguous matching rule.

Bits are stored most-significant-first: string index 0 is the highest bit of
the underlying integer, so gene 0 of an antigen occupies indices 0-9.
"""
import re
from dataclasses import dataclass
from typing import List, NamedTuple, Set

_AGREEMENT_RUN = re.compile("1+")


class ContractViolation(ValueError):
    """Raised when a caller breaks a precondition of a pure function."""


@dataclass(frozen=True, slots=True)
class BitString:
    value: int
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise ContractViolation(f"Bit string length must be positive, got {self.length}")
        if self.value < 0 or self.value >> self.length:
            raise ContractViolation(f"Value {self.value} does not fit in {self.length} bits")

    @classmethod
    def from_str(cls, text: str) -> "BitString":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ContractViolation(f"Not a bit string: {text!r}")
        return cls(int(text, 2), len(text))

    @classmethod
    def one_hot(cls, index: int, length: int) -> "BitString":
        if not 0 <= index < length:
            raise ContractViolation(f"Index {index} outside 0..{length - 1}")
        return cls(1 << (length - 1 - index), length)

    def __str__(self) -> str:
        return format(self.value, f"0{self.length}b")

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> int:
        if not 0 <= index < self.length:
            raise IndexError(index)
        return (self.value >> (self.length - 1 - index)) & 1

    @property
    def bits(self) -> tuple:
        return tuple(int(c) for c in str(self))

    def popcount(self) -> int:
        return bin(self.value).count("1")

    def set_positions(self) -> List[int]:
        return [i for i, c in enumerate(str(self)) if c == "1"]

    def concat(self, other: "BitString") -> "BitString":
        return BitString((self.value << other.length) | other.value, self.length + other.length)


class MatchSpan(NamedTuple):
    position: int
    length: int


def _check(a: BitString, b: BitString, r: int):
    if a.length != b.length:
        raise ContractViolation(f"Length mismatch: {a.length} != {b.length}")
    if not 1 <= r <= a.length:
        raise ContractViolation(f"r={r} outside 1..{a.length}")


def agreement_mask(a: BitString, b: BitString) -> int:
    """Integer whose set bits mark positions where a and b agree."""
    return ~(a.value ^ b.value) & ((1 << a.length) - 1)


def has_run(mask: int, r: int) -> bool:
    """True iff mask holds r consecutive set bits."""
    run = mask
    for shift in range(1, r):
        run &= mask >> shift
        if not run:
            return False
    return bool(run)


def r_contiguous_match(a: BitString, b: BitString, r: int) -> bool:
    """Interrupting variant: stops at the first window of r agreeing bits."""
    _check(a, b, r)
    return has_run(agreement_mask(a, b), r)


def all_match_spans(a: BitString, b: BitString, r: int) -> List[MatchSpan]:
    """Exhaustive variant: every maximal agreement run of length >= r, left to right."""
    _check(a, b, r)
    agree = format(agreement_mask(a, b), f"0{a.length}b")
    return [
        MatchSpan(m.start(), m.end() - m.start())
        for m in _AGREEMENT_RUN.finditer(agree)
        if m.end() - m.start() >= r
    ]


def longest_agreement_run(a: BitString, b: BitString) -> int:
    if a.length != b.length:
        raise ContractViolation(f"Length mismatch: {a.length} != {b.length}")
    agree = format(agreement_mask(a, b), f"0{a.length}b")
    return max((len(m.group()) for m in _AGREEMENT_RUN.finditer(agree)), default=0)


def genes_touched(span: MatchSpan, gene_width: int) -> Set[int]:
    if gene_width <= 0:
        raise ContractViolation(f"gene_width must be positive, got {gene_width}")
    first = span.position // gene_width
    last = (span.position + span.length - 1) // gene_width
    return set(range(first, last + 1))
