import pytest

from app.ais.bitmatch import BitString, ContractViolation, r_contiguous_match
from app.ais.encoding import Antigen, build_antigen, calibrate_ranges
from app.ais.negsel import (
    Detector, DetectorSet, GenerationBudgetError, SelfSet, audit, detect, generate_detectors, grow_detector,
    initial_r, mean_grown_r, mean_shrunk_r, random_candidates, sample_candidates, shrink_detector,
)
from tests.conftest import antigen

import numpy as np

NORMAL = (1.0, 1.0, 0.05, 1.0, 0.0)


@pytest.fixture
def self_set():
    """Self antigens of a node with steady traffic plus one quiet window."""
    vectors = [NORMAL, (0.95, 1.0, 0.04, 1.0, 0.0), (1.0, 0.98, 0.06, 1.0, 0.0), (float("inf"),) * 2 + (0.0, float("inf"), 0.0)]
    specs = calibrate_ranges(vectors)
    return SelfSet(node=4, antigens=[build_antigen(v, specs, node=4, window=w, run=0) for w, v in enumerate(vectors)])


class TestGeneration:

    def test_detectors_pass_audit(self, self_set):
        ds = generate_detectors(self_set, count=200, r=10, seed=11)
        assert len(ds) == 200
        assert [d.id for d in ds.detectors] == list(range(200))
        assert audit(ds, self_set) == []
        assert ds.stats.iterations == 200 + ds.stats.non_valid

    def test_same_seed_same_detectors(self, self_set):
        first = generate_detectors(self_set, count=50, r=10, seed=3)
        second = generate_detectors(self_set, count=50, r=10, seed=3)
        assert [d.bits for d in first.detectors] == [d.bits for d in second.detectors]

    def test_smaller_r_rejects_more(self, self_set):
        loose = generate_detectors(self_set, count=100, r=7, seed=5)
        strict = generate_detectors(self_set, count=100, r=22, seed=5)
        assert loose.stats.non_valid_rate > strict.stats.non_valid_rate

    def test_budget_error(self):
        """At r=1 only the exact complement of the self string survives"""
        lonely = SelfSet(node=9, antigens=[antigen("1" * 50)])
        with pytest.raises(GenerationBudgetError) as info:
            generate_detectors(lonely, count=5, r=1, seed=0, max_iterations=100)
        assert info.value.node == 9
        assert info.value.iterations == 100

    @pytest.mark.parametrize("count,r", [(0, 10), (10, 0), (10, 51)])
    def test_bad_parameters(self, self_set, count, r):
        with pytest.raises(ContractViolation):
            generate_detectors(self_set, count=count, r=r, seed=0)

    def test_random_candidates_fit_length(self):
        rng = np.random.default_rng(1)
        values = random_candidates(rng, 50, 500)
        assert len(values) == 500
        assert all(0 <= v < 2 ** 50 for v in values)
        assert len(set(values)) == 500


class TestDetection:

    def test_self_antigens_never_flagged(self, self_set):
        ds = generate_detectors(self_set, count=300, r=10, seed=2)
        for a in self_set.antigens:
            assert detect(a, ds) is None
        assert ds.used() == []

    def test_match_updates_usage(self):
        target = "1010101010" * 5
        ds = DetectorSet(node=0, r=10, detectors=[
            Detector(bits=BitString.from_str("0" * 50), id=0),
            Detector(bits=BitString.from_str(target), id=1),
        ])
        assert detect(antigen(target, window=2, run=1), ds) == 1
        assert detect(antigen(target, window=3, run=1), ds) == 1
        assert ds.detectors[1].match_count == 2
        assert ds.detectors[1].windows_matched == {(1, 2), (1, 3)}
        assert [d.id for d in ds.matching(BitString.from_str(target))] == [1]
        ds.reset_usage()
        assert ds.used() == []

    def test_first_match_wins(self):
        target = "1" * 50
        ds = DetectorSet(node=0, r=10, detectors=[
            Detector(bits=BitString.from_str("1" * 20 + "0" * 30), id=0),
            Detector(bits=BitString.from_str(target), id=1),
        ])
        assert detect(antigen(target), ds) == 0

    def test_length_mismatch(self):
        ds = DetectorSet(node=0, r=2, detectors=[Detector(bits=BitString.from_str("1111"), id=0)], length=4)
        with pytest.raises(ContractViolation):
            detect(antigen("11111"), ds)


class TestGrowing:

    def small_self(self):
        return SelfSet(node=1, antigens=[antigen("0000")], length=4)

    @pytest.mark.parametrize("candidate,expected", [("1111", 1), ("0011", 3), ("0101", 2), ("0001", 4)])
    def test_grown_r(self, candidate, expected):
        assert grow_detector(BitString.from_str(candidate), self.small_self()) == expected

    def test_candidate_equal_to_self(self):
        assert grow_detector(BitString.from_str("0000"), self.small_self()) is None

    def test_grown_r_is_minimal(self, self_set):
        for candidate in sample_candidates(50, 30, seed=8):
            r = grow_detector(candidate, self_set)
            if r is None:
                continue
            assert not any(r_contiguous_match(candidate, a.bits, r) for a in self_set.antigens)
            if r > 1:
                assert any(r_contiguous_match(candidate, a.bits, r - 1) for a in self_set.antigens)

    def test_mean_grown_r(self):
        assert mean_grown_r([BitString.from_str("1111"), BitString.from_str("0011")], self.small_self()) == 2.0

    def test_all_candidates_rejected(self):
        with pytest.raises(ValueError):
            mean_grown_r([BitString.from_str("0000")], self.small_self())


class TestShrinking:

    def small_self(self):
        return SelfSet(node=1, antigens=[antigen("0000")], length=4)

    @pytest.mark.parametrize("candidate,expected", [("1111", 1), ("0101", 2), ("0011", None), ("0001", None)])
    def test_shrunk_r(self, candidate, expected):
        """r0 is 2 for four bits; candidates still matching self at r0 are rejected"""
        assert shrink_detector(BitString.from_str(candidate), self.small_self()) == expected

    def test_shrunk_r_agrees_with_grown_r_below_r0(self, self_set):
        for candidate in sample_candidates(50, 30, seed=8):
            shrunk = shrink_detector(candidate, self_set)
            grown = grow_detector(candidate, self_set)
            if shrunk is None:
                assert grown is None or grown > initial_r(50)
            else:
                assert shrunk == grown

    def test_length_mismatch(self, self_set):
        with pytest.raises(ContractViolation):
            shrink_detector(BitString.from_str("0101"), self_set)

    def test_mean_shrunk_r(self):
        assert mean_shrunk_r([BitString.from_str("1111"), BitString.from_str("0101"), BitString.from_str("0011")],
                             self.small_self()) == 1.5


@pytest.fixture(scope="module")
def relay_self_set():
    """560 learning windows of a busy relay whose genes wander over a few bins each"""
    rng = np.random.default_rng(560)
    spread = [range(2, 8), range(5, 10), range(0, 8), range(6, 10), range(0, 4)]
    antigens = []
    for window in range(560):
        fields = [BitString.one_hot(int(rng.choice(list(bins))), 10) for bins in spread]
        bits = fields[0]
        for field in fields[1:]:
            bits = bits.concat(field)
        antigens.append(Antigen(bits=bits, node=0, window=window % 28, run=window // 28))
    return SelfSet(node=0, antigens=antigens)


class TestSelfTuning:

    def test_grown_r_brackets_tuned_r(self, relay_self_set):
        assert 7 <= mean_grown_r(sample_candidates(50, 500, seed=10), relay_self_set) <= 13

    def test_shrunk_r_brackets_tuned_r(self, relay_self_set):
        assert 7 <= mean_shrunk_r(sample_candidates(50, 500, seed=10), relay_self_set) <= 13
