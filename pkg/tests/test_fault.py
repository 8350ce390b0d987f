from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultfit.fault import (
    BitFlip,
    FaultEvent,
    FaultTrace,
    Gaussian,
    LedgerError,
    inject,
    inject_random,
    parse_fault_model,
    poisson_rate,
    revert,
    sample_fault_count,
    sample_fault_site,
    sample_layer_site,
)
from faultfit.fixedpoint import QFormat
from faultfit.nn import DenseLayer, DenseNetwork, ParamCoord

Q16 = QFormat.parse("Q16.12")


def small_net(seed=0, widths=(4, 3, 2)):
    return DenseNetwork.build(list(widths), np.random.default_rng(seed))


class TestParse:
    def test_round_trip(self):
        assert parse_fault_model("bitflip:Q16.12") == BitFlip(Q16)
        assert parse_fault_model("gaussian:0.01") == Gaussian(0.01)
        for text in ("bitflip:Q16.12", "gaussian:0.01"):
            assert str(parse_fault_model(text)) == text

    @pytest.mark.parametrize("text", ["bitflip", "bitflip:16.12", "gaussian:-1",
                                      "gaussian:0", "gaussian:x", "stuck:0"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_fault_model(text)


class TestFaultCount:
    def test_zero_rate(self):
        rng = np.random.default_rng(0)
        assert all(sample_fault_count(0.0, 427_000, 100, rng) == 0 for _ in range(100))

    def test_paper_operating_point(self):
        # 1e-7 faults per parameter per sample, 350k parameters, 100 images
        assert poisson_rate(1e-7, 350_000, 100) == pytest.approx(3.5)

    def test_poisson_moments(self):
        rng = np.random.default_rng(1)
        n = 100_000
        draws = np.array([sample_fault_count(1e-7, 350_000, 100, rng) for _ in range(n)])
        lam = 3.5
        assert 3.45 <= draws.mean() <= 3.55
        assert abs(draws.mean() - lam) <= 3 * np.sqrt(lam / n)
        # standard error of the sample variance for a Poisson variable
        assert abs(draws.var(ddof=1) - lam) <= 3 * np.sqrt((lam + 2 * lam ** 2) / n)

    @pytest.mark.parametrize("args", [(-1e-7, 10, 10), (1e-7, -1, 10), (float("inf"), 1, 1),
                                      (float("nan"), 1, 1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            sample_fault_count(*args, np.random.default_rng(0))


class TestFaultSite:
    def test_single_parameter(self):
        # zero inputs leave the bias as the only parameter
        net = DenseNetwork([DenseLayer(np.zeros((1, 0)), np.zeros(1))])
        rng = np.random.default_rng(0)
        assert net.parameter_count == 1
        assert {sample_fault_site(net, rng) for _ in range(200)} == {ParamCoord(0, "bias", 0)}

    def test_uniform_over_ten_parameters(self):
        net = DenseNetwork([DenseLayer(np.zeros((2, 4)), np.zeros(2))])
        assert net.parameter_count == 10
        rng = np.random.default_rng(2)
        n = 100_000
        counts = Counter(sample_fault_site(net, rng) for _ in range(n))
        assert len(counts) == 10
        freq = np.array(list(counts.values())) / n
        assert np.all((freq >= 0.09) & (freq <= 0.11))
        chi2 = float(np.sum((freq * n - n / 10) ** 2 / (n / 10)))
        assert chi2 < 27.88  # chi-square 0.999 quantile, 9 degrees of freedom

    def test_sites_are_valid(self):
        net = small_net()
        rng = np.random.default_rng(3)
        for _ in range(500):
            net.get_param(sample_fault_site(net, rng))

    def test_layer_site_stays_in_layer(self):
        net = small_net()
        rng = np.random.default_rng(4)
        assert {sample_layer_site(net, 1, rng).layer for _ in range(100)} == {1}


class TestInject:
    def test_bitflip_unit_bit(self):
        net = DenseNetwork([DenseLayer([[1.0]], [0.0])])
        c = ParamCoord(0, "weight", 0, 0)
        rng = np.random.default_rng(0)
        # draw until bit 12 comes up, then check the mutation
        while True:
            ev = inject(net, BitFlip(Q16), c, rng)
            if ev.detail == 12:
                break
            revert(net, [ev])
        assert ev.original == 1.0 and ev.mutated == 0.0 == net.get_param(c)
        revert(net, [ev])
        assert net.get_param(c) == 1.0

    def test_gaussian_is_small(self):
        net = small_net()
        rng = np.random.default_rng(5)
        c = ParamCoord(0, "weight", 1, 2)
        deltas = []
        for _ in range(20_000):
            ev = inject(net, Gaussian(0.01), c, rng)
            deltas.append(ev.mutated - ev.original)
            revert(net, [ev])
        deltas = np.abs(deltas)
        assert np.mean(deltas < 0.05) >= 0.9999

    def test_gaussian_mean_zero(self):
        net = small_net()
        rng = np.random.default_rng(6)
        n = 50_000
        d = np.array([inject(net, Gaussian(0.01), ParamCoord(0, "bias", 0), rng).detail
                      for _ in range(n)])
        assert abs(d.mean()) <= 3 * 0.01 / np.sqrt(n)
        assert d.std() == pytest.approx(0.01, rel=0.02)

    def test_bit_positions_uniform(self):
        net = small_net()
        rng = np.random.default_rng(7)
        n = 100_000
        c = ParamCoord(1, "weight", 0, 0)
        bits = Counter()
        for _ in range(n):
            ev = inject(net, BitFlip(Q16), c, rng)
            bits[int(ev.detail)] += 1
            revert(net, [ev])
        assert sorted(bits) == list(range(16))
        p = 1 / 16
        se = np.sqrt(p * (1 - p) / n)
        assert all(abs(bits[k] / n - p) <= 3 * se for k in range(16))

    def test_invalid_coord(self):
        with pytest.raises(IndexError):
            inject(small_net(), Gaussian(0.1), ParamCoord(5, "bias", 0), np.random.default_rng())


class TestRevert:
    def test_empty(self):
        net = small_net()
        before = net.parameter_vector()
        revert(net, [])
        np.testing.assert_array_equal(net.parameter_vector(), before)

    def test_same_coordinate_twice(self):
        net = small_net()
        rng = np.random.default_rng(8)
        c = ParamCoord(0, "weight", 0, 0)
        original = net.get_param(c)
        events = [inject(net, BitFlip(Q16), c, rng), inject(net, Gaussian(0.5), c, rng)]
        revert(net, events)
        assert net.get_param(c) == original

    def test_hundred_faults(self):
        net = small_net(widths=(8, 6, 8))
        rng = np.random.default_rng(9)
        before = net.parameter_vector()
        events = inject_random(net, BitFlip(Q16), 100, rng)
        assert not np.array_equal(net.parameter_vector(), before)
        revert(net, events)
        assert net.parameter_vector().tobytes() == before.tobytes()

    def test_detects_corrupted_ledger(self):
        net = small_net()
        c = ParamCoord(0, "bias", 1)
        ev = inject(net, Gaussian(0.1), c, np.random.default_rng(0))
        net.set_param(c, 42.0)
        with pytest.raises(LedgerError):
            revert(net, [ev])

    def test_wrong_order_detected(self):
        net = small_net()
        c = ParamCoord(0, "bias", 1)
        rng = np.random.default_rng(1)
        events = [inject(net, Gaussian(0.1), c, rng), inject(net, Gaussian(0.1), c, rng)]
        with pytest.raises(LedgerError):
            revert(net, events[::-1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 40), st.booleans())
    def test_round_trip_property(self, seed, count, bitflip):
        net = small_net(seed % 7, widths=(5, 4, 3))
        rng = np.random.default_rng(seed)
        model = BitFlip(Q16) if bitflip else Gaussian(0.01)
        before = net.parameter_vector().tobytes()
        revert(net, inject_random(net, model, count, rng))
        assert net.parameter_vector().tobytes() == before


def test_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    events = [FaultEvent(ParamCoord(1, "weight", 2, 3), 0.5, 0.25, 11.0),
              FaultEvent(ParamCoord(0, "bias", 4), -1.0, -0.99, 0.01)]
    with FaultTrace(path) as trace:
        trace.record(7, events)
    lines = path.read_text().splitlines()
    assert lines[0] == "batch,layer,kind,row,col,detail,original,mutated"
    assert lines[1] == "7,1,weight,2,3,11.0,0.5,0.25"
    assert lines[2].startswith("7,0,bias,4,0,")
