"""Interval encoding of gene values into one-hot 10-bit signatures."""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from app.ais.bitmatch import BitString, ContractViolation

logger = logging.getLogger(__name__)

BINS = 10
GENE_COUNT = 5
ANTIGEN_LENGTH = BINS * GENE_COUNT

# Genes 1, 2 and 4 are ratios; genes 3 and 5 are delays in seconds
RATIO_GENES = (0, 1, 3)
DELAY_GENES = (2, 4)

RANGE_INFLATION = 1.1
RATIO_CEILING = 1.1
MIN_RANGE_WIDTH = 1e-3

INFINITY = math.inf


@dataclass(frozen=True)
class RangeSpec:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ContractViolation(f"Range lower {self.lower} must be below upper {self.upper}")

    def bin_of(self, value: float) -> int:
        if math.isnan(value):
            raise ContractViolation("Gene value is NaN")
        if math.isinf(value):
            return BINS - 1
        index = math.floor((value - self.lower) / (self.upper - self.lower) * BINS)
        return min(max(index, 0), BINS - 1)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class Antigen:
    bits: BitString
    node: int
    window: int
    run: int

    def __str__(self) -> str:
        return str(self.bits)


def encode_gene(value: float, spec: RangeSpec) -> BitString:
    return BitString.one_hot(spec.bin_of(value), BINS)


def resolve_gene_order(order: Optional[Sequence[int]]) -> Tuple[int, ...]:
    order = tuple(range(GENE_COUNT)) if order is None else tuple(order)
    if sorted(order) != list(range(GENE_COUNT)):
        raise ContractViolation(f"Gene order {order} is not a permutation of 0..{GENE_COUNT - 1}")
    return order


def build_antigen(
    genes: Sequence[float],
    specs: Sequence[RangeSpec],
    node: int = -1,
    window: int = -1,
    run: int = -1,
    gene_order: Optional[Sequence[int]] = None,
) -> Antigen:
    """Concatenate the five gene signatures; field f carries gene gene_order[f]."""
    if len(genes) != GENE_COUNT or len(specs) != GENE_COUNT:
        raise ContractViolation(f"Expected {GENE_COUNT} gene values and range specs")
    bits = None
    for gene in resolve_gene_order(gene_order):
        field = encode_gene(genes[gene], specs[gene])
        bits = field if bits is None else bits.concat(field)
    return Antigen(bits=bits, node=node, window=window, run=run)


def calibrate_ranges(self_samples: Sequence[Sequence[float]]) -> List[RangeSpec]:
    """Per-gene [0, max*1.1] ranges from misbehavior-free gene vectors."""
    if not self_samples:
        raise ValueError("Cannot calibrate ranges from an empty sample set")
    specs = []
    for gene in range(GENE_COUNT):
        finite = [s[gene] for s in self_samples if math.isfinite(s[gene])]
        upper = max(finite, default=0.0) * RANGE_INFLATION
        if gene in RATIO_GENES:
            upper = min(upper, RATIO_CEILING)
        specs.append(RangeSpec(0.0, max(upper, MIN_RANGE_WIDTH)))
    return specs
