"""Negative selection: random-generate-and-test detectors and r self-tuning."""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from app.ais.bitmatch import BitString, ContractViolation, agreement_mask, has_run
from app.ais.encoding import ANTIGEN_LENGTH, Antigen

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 10**7
CANDIDATE_BATCH = 4096


class GenerationBudgetError(RuntimeError):
    def __init__(self, node: int, r: int, iterations: int, accepted: int):
        self.node = node
        self.r = r
        self.iterations = iterations
        self.accepted = accepted
        super().__init__(
            f"Node {node}: iteration budget of {iterations} candidates exhausted at r={r} "
            f"with only {accepted} valid detectors; the self set is over-constrained"
        )


@dataclass
class Detector:
    bits: BitString
    id: int
    match_count: int = 0
    windows_matched: Set[Tuple[int, int]] = field(default_factory=set)


@dataclass
class GenerationStats:
    iterations: int = 0
    non_valid: int = 0
    wall_time: float = 0.0

    @property
    def non_valid_rate(self) -> float:
        return self.non_valid / self.iterations if self.iterations else 0.0


@dataclass
class SelfSet:
    node: int
    antigens: List[Antigen] = field(default_factory=list)
    length: int = ANTIGEN_LENGTH

    def unique_values(self) -> List[int]:
        """Distinct bit patterns in first-seen order; duplicates cannot change a match."""
        return list(dict.fromkeys(a.bits.value for a in self.antigens))

    def __len__(self) -> int:
        return len(self.antigens)


@dataclass
class DetectorSet:
    node: int
    r: int
    detectors: List[Detector]
    seed: int = 0
    length: int = ANTIGEN_LENGTH
    stats: GenerationStats = field(default_factory=GenerationStats)
    _first_match: Dict[int, Optional[int]] = field(default_factory=dict, init=False, repr=False)

    def __len__(self) -> int:
        return len(self.detectors)

    def first_match(self, bits: BitString) -> Optional[int]:
        """Index of the first detector matching bits, memoised per bit pattern."""
        if bits.value not in self._first_match:
            hit = None
            for index, detector in enumerate(self.detectors):
                if has_run(agreement_mask(detector.bits, bits), self.r):
                    hit = index
                    break
            self._first_match[bits.value] = hit
        return self._first_match[bits.value]

    def matching(self, bits: BitString) -> List[Detector]:
        return [d for d in self.detectors if has_run(agreement_mask(d.bits, bits), self.r)]

    def used(self) -> List[Detector]:
        return [d for d in self.detectors if d.match_count]

    def reset_usage(self):
        for detector in self.detectors:
            detector.match_count = 0
            detector.windows_matched = set()


def random_candidates(rng: np.random.Generator, length: int, count: int) -> List[int]:
    """Uniform random bit patterns, each bit an independent fair coin."""
    words = math.ceil(length / 32)
    raw = rng.integers(0, 2**32, size=(count, words), dtype=np.uint64)
    excess = words * 32 - length
    values = []
    for row in raw:
        value = 0
        for word in row:
            value = (value << 32) | int(word)
        values.append(value >> excess)
    return values


def _matches_any(value: int, self_values: Sequence[int], r: int, full: int) -> bool:
    for s in self_values:
        if has_run(~(value ^ s) & full, r):
            return True
    return False


def generate_detectors(
    self_set: SelfSet,
    count: int,
    r: int,
    seed: int,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> DetectorSet:
    length = self_set.length
    if count < 1:
        raise ContractViolation(f"Detector count must be at least 1, got {count}")
    if not 1 <= r <= length:
        raise ContractViolation(f"r={r} outside 1..{length}")

    rng = np.random.default_rng(seed)
    self_values = self_set.unique_values()
    full = (1 << length) - 1
    stats = GenerationStats()
    detectors: List[Detector] = []
    started = time.perf_counter()

    while len(detectors) < count:
        if stats.iterations >= max_iterations:
            raise GenerationBudgetError(self_set.node, r, stats.iterations, len(detectors))
        batch = min(CANDIDATE_BATCH, max_iterations - stats.iterations)
        for value in random_candidates(rng, length, batch):
            stats.iterations += 1
            if _matches_any(value, self_values, r, full):
                stats.non_valid += 1
            else:
                detectors.append(Detector(bits=BitString(value, length), id=len(detectors)))
                if len(detectors) == count:
                    break

    stats.wall_time = time.perf_counter() - started
    logger.debug(
        "Node %s: %d detectors at r=%d after %d candidates (%d non-valid)",
        self_set.node, count, r, stats.iterations, stats.non_valid,
    )
    return DetectorSet(node=self_set.node, r=r, detectors=detectors, seed=seed, length=length, stats=stats)


def audit(ds: DetectorSet, self_set: SelfSet) -> List[Tuple[int, int]]:
    """(detector id, antigen index) pairs that violate negative selection."""
    violations = []
    for detector in ds.detectors:
        for index, antigen in enumerate(self_set.antigens):
            if has_run(agreement_mask(detector.bits, antigen.bits), ds.r):
                violations.append((detector.id, index))
    return violations


def detect(antigen: Antigen, ds: DetectorSet) -> Optional[int]:
    if antigen.bits.length != ds.length:
        raise ContractViolation(f"Antigen length {antigen.bits.length} != detector length {ds.length}")
    index = ds.first_match(antigen.bits)
    if index is None:
        return None
    detector = ds.detectors[index]
    detector.match_count += 1
    detector.windows_matched.add((antigen.run, antigen.window))
    return detector.id


def initial_r(length: int) -> int:
    return math.ceil(length / 2)


def _tuning_predicate(candidate: BitString, self_set: SelfSet):
    if candidate.length != self_set.length:
        raise ContractViolation(f"Candidate length {candidate.length} != self length {self_set.length}")
    self_values = self_set.unique_values()
    full = (1 << candidate.length) - 1
    return lambda r: not _matches_any(candidate.value, self_values, r, full)


def _smallest_valid_r(valid, lo: int, hi: int) -> int:
    """Smallest r in [lo, hi] with valid(r), given valid(hi); valid is monotone in r."""
    while lo < hi:
        mid = (lo + hi) // 2
        if valid(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def grow_detector(candidate: BitString, self_set: SelfSet) -> Optional[int]:
    """Smallest r at which candidate matches no self antigen, or None if none exists.

    Binary search over 1..l that starts at r0 = ceil(l/2); a candidate
    invalid at r0 grows towards l.
    """
    valid = _tuning_predicate(candidate, self_set)
    length = candidate.length
    if not valid(length):
        return None
    r0 = initial_r(length)
    if valid(r0):
        return _smallest_valid_r(valid, 1, r0)
    return _smallest_valid_r(valid, r0 + 1, length)


def shrink_detector(candidate: BitString, self_set: SelfSet) -> Optional[int]:
    """Smallest r at or below r0 = ceil(l/2) at which candidate still matches no self antigen.

    A candidate that already matches self at r0 is rejected instead of grown.
    """
    valid = _tuning_predicate(candidate, self_set)
    r0 = initial_r(candidate.length)
    if not valid(r0):
        return None
    return _smallest_valid_r(valid, 1, r0)


def _mean_tuned_r(tune, candidates: Iterable[BitString], self_set: SelfSet, what: str) -> float:
    tuned = [r for r in (tune(c, self_set) for c in candidates) if r is not None]
    if not tuned:
        raise ValueError(f"Node {self_set.node}: every candidate was rejected while {what}")
    return sum(tuned) / len(tuned)


def mean_grown_r(candidates: Iterable[BitString], self_set: SelfSet) -> float:
    return _mean_tuned_r(grow_detector, candidates, self_set, "growing")


def mean_shrunk_r(candidates: Iterable[BitString], self_set: SelfSet) -> float:
    return _mean_tuned_r(shrink_detector, candidates, self_set, "shrinking")


def sample_candidates(length: int, count: int, seed: int) -> List[BitString]:
    rng = np.random.default_rng(seed)
    return [BitString(v, length) for v in random_candidates(rng, length, count)]
