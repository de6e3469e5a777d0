"""Tests for BPSK superposition, SIC and the BER sweep."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.errors import InvalidAllocation
from src.errors import InvalidConfig
from src.errors import LengthMismatch
from src.noma_phy import BER_COLUMNS
from src.noma_phy import ChannelRealization
from src.noma_phy import SweepSettings
from src.noma_phy import allocate_power
from src.noma_phy import allocate_power_levels
from src.noma_phy import analytic_ber_strong_genie
from src.noma_phy import analytic_ber_strong_sic
from src.noma_phy import analytic_ber_weak
from src.noma_phy import apply_channel
from src.noma_phy import ber_monte_carlo
from src.noma_phy import ber_table
from src.noma_phy import bits_to_bytes
from src.noma_phy import bytes_to_bits
from src.noma_phy import constellation
from src.noma_phy import decode_weak_direct
from src.noma_phy import demodulate
from src.noma_phy import max_deviation_in_standard_errors
from src.noma_phy import modulate
from src.noma_phy import q_function
from src.noma_phy import sic_decode_layers
from src.noma_phy import sic_decode_strong
from src.noma_phy import sigma_to_snr
from src.noma_phy import snr_to_sigma
from src.noma_phy import standard_error
from src.noma_phy import superpose
from src.noma_phy import superpose_layers


def _transmit(weak_bits, strong_bits, alloc, ch, rng=None):
    """Superpose, then return what each receiver decodes for its own layer."""
    rng = rng or np.random.default_rng(0)
    signal = superpose(modulate(weak_bits), modulate(strong_bits), alloc)
    _, strong_hat = sic_decode_strong(apply_channel(signal, ch, ch.h_strong, rng), alloc, ch)
    weak_hat = decode_weak_direct(apply_channel(signal, ch, ch.h_weak, rng), alloc, ch)
    return strong_hat, weak_hat


class TestPowerAllocation:
    """Tests for allocate_power / allocate_power_levels."""

    def test_two_user_split(self, alloc):
        assert alloc.p_weak == pytest.approx(0.8)
        assert alloc.p_strong == pytest.approx(0.2)
        assert alloc.p_weak + alloc.p_strong == alloc.total
        assert alloc.num_users == 2

    @pytest.mark.parametrize("weak_fraction", [0.5, 0.4, 0.0, 1.0, -0.1])
    def test_weak_user_needs_the_larger_share(self, weak_fraction):
        with pytest.raises(InvalidAllocation):
            allocate_power(1.0, weak_fraction)

    def test_total_must_be_positive(self):
        with pytest.raises(InvalidAllocation):
            allocate_power(0.0, 0.8)

    def test_three_user_levels(self):
        alloc = allocate_power_levels(2.0, [0.75, 0.2, 0.05])
        assert alloc.levels == pytest.approx((1.5, 0.4, 0.1))
        assert sum(alloc.levels) == pytest.approx(2.0)

    def test_three_user_order_violation(self):
        """√0.5 does not exceed √0.3 + √0.2, so the weakest layer is ambiguous."""
        with pytest.raises(InvalidAllocation, match="layer 0"):
            allocate_power_levels(1.0, [0.5, 0.3, 0.2])

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(InvalidAllocation, match="sum to 1"):
            allocate_power_levels(1.0, [0.7, 0.2])


class TestModulation:
    """Tests for BPSK mapping and bit packing."""

    def test_bit_mapping(self):
        assert modulate(np.array([0, 1])).tolist() == [1.0, -1.0]

    def test_zero_decodes_as_bit_zero(self):
        assert demodulate(np.array([0.0, -0.0, 1e-12, -1e-12])).tolist() == [0, 0, 0, 1]

    def test_bit_order_is_msb_first(self):
        assert bytes_to_bits(b"\x80").tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
        assert bits_to_bytes(np.array([1, 0, 1])) == b"\xa0"

    @given(data=st.binary(max_size=256))
    def test_bits_restore_bytes(self, data):
        assert bits_to_bytes(bytes_to_bits(data)) == data


class TestSuperposition:
    """Tests for superpose / constellation."""

    def test_constellation(self, alloc):
        a, b = math.sqrt(0.8), math.sqrt(0.2)
        assert constellation(alloc) == pytest.approx([-a - b, -a + b, a - b, a + b])

    @given(bits=st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=64))
    def test_symbols_lie_on_constellation(self, bits):
        alloc = allocate_power(1.0, 0.8)
        weak, strong = (np.array(column) for column in zip(*bits))
        symbols = superpose(modulate(weak), modulate(strong), alloc).symbols
        points = constellation(alloc)
        assert np.all(np.min(np.abs(symbols[:, None] - points[None, :]), axis=1) < 1e-12)

    @given(
        streams=st.integers(1, 32).flatmap(
            lambda n: st.lists(
                st.lists(st.floats(-2, 2, allow_nan=False), min_size=n, max_size=n), min_size=4, max_size=4
            )
        )
    )
    def test_superposition_is_linear(self, streams):
        alloc = allocate_power(1.0, 0.8)
        a, b, c, d = (np.array(stream) for stream in streams)
        summed = superpose(a, b, alloc).symbols + superpose(c, d, alloc).symbols
        assert np.allclose(summed, superpose(a + c, b + d, alloc).symbols, atol=1e-12)

    def test_mean_power_equals_total(self, alloc):
        """Every constellation point is equally likely, so E|x|² = P."""
        assert np.mean(constellation(alloc) ** 2) == pytest.approx(alloc.total)

    def test_length_mismatch(self, alloc):
        with pytest.raises(LengthMismatch):
            superpose(modulate(np.zeros(4)), modulate(np.zeros(5)), alloc)

    def test_layer_count_mismatch(self, alloc):
        with pytest.raises(LengthMismatch):
            superpose_layers([modulate(np.zeros(4))] * 3, alloc)


class TestNoiselessReception:
    """Noiseless SIC and direct detection recover every bit."""

    def test_every_bit_pattern_up_to_twelve_bits(self, alloc, noiseless_channel):
        """All patterns of 1..12 bits, paired with their reversal on the other layer."""
        for length in range(1, 13):
            for pattern in itertools.product((0, 1), repeat=length):
                weak = np.array(pattern, dtype=np.uint8)
                strong = weak[::-1]
                strong_hat, weak_hat = _transmit(weak, strong, alloc, noiseless_channel)
                assert np.array_equal(strong_hat, strong), pattern
                assert np.array_equal(weak_hat, weak), pattern

    def test_all_four_symbol_pairs(self, alloc, noiseless_channel):
        weak = np.array([0, 0, 1, 1], dtype=np.uint8)
        strong = np.array([0, 1, 0, 1], dtype=np.uint8)
        strong_hat, weak_hat = _transmit(weak, strong, alloc, noiseless_channel)
        assert strong_hat.tolist() == strong.tolist()
        assert weak_hat.tolist() == weak.tolist()

    def test_three_layers(self):
        alloc = allocate_power_levels(1.0, [0.75, 0.2, 0.05])
        ch = ChannelRealization(gains=(0.4, 0.7, 1.0), noise_sigma=0.0)
        rng = np.random.default_rng(3)
        layers = [rng.integers(0, 2, size=64, dtype=np.uint8) for _ in range(3)]
        signal = superpose_layers([modulate(bits) for bits in layers], alloc)
        for depth, gain in enumerate(ch.gains):
            decoded = sic_decode_layers(apply_channel(signal, ch, gain, rng), alloc, gain, depth)
            assert np.array_equal(decoded[-1], layers[depth])

    def test_noiseless_channel_is_exact(self, alloc, noiseless_channel):
        signal = superpose(modulate(np.array([0, 1])), modulate(np.array([1, 1])), alloc)
        received = apply_channel(signal, noiseless_channel, 0.6, np.random.default_rng(0))
        assert received.tolist() == (0.6 * signal.symbols).tolist()

    def test_gain_must_be_positive(self, alloc, noiseless_channel):
        signal = superpose(modulate(np.zeros(2)), modulate(np.zeros(2)), alloc)
        with pytest.raises(InvalidConfig):
            apply_channel(signal, noiseless_channel, 0.0, np.random.default_rng(0))

    def test_genie_needs_true_symbols(self, alloc, noiseless_channel):
        with pytest.raises(InvalidConfig):
            sic_decode_strong(np.zeros(4), alloc, noiseless_channel, genie=True)

    def test_depth_out_of_range(self, alloc):
        with pytest.raises(InvalidConfig):
            sic_decode_layers(np.zeros(4), alloc, 1.0, depth=2)


class TestChannelRealization:
    """Tests for ChannelRealization.validate()."""

    def test_pair_orders_weakest_first(self):
        ch = ChannelRealization.pair(h_strong=1.0, h_weak=0.6, noise_sigma=0.1)
        assert ch.gains == (0.6, 1.0)
        assert (ch.h_weak, ch.h_strong) == (0.6, 1.0)

    @pytest.mark.parametrize(
        "gains,sigma", [((1.0, 0.6), 0.0), ((0.6, 0.6), 0.0), ((0.0, 1.0), 0.0), ((0.6, 1.0), -0.1)]
    )
    def test_invalid(self, gains, sigma):
        with pytest.raises(InvalidConfig):
            ChannelRealization(gains=gains, noise_sigma=sigma).validate()


class TestAnalyticBER:
    """Tests for the closed-form curves."""

    def test_q_function_values(self):
        assert q_function(0.0) == pytest.approx(0.5)
        assert q_function(1.0) == pytest.approx(0.158655253931457)
        assert q_function(3.0) == pytest.approx(0.00134989803163009)

    def test_snr_conversion(self):
        assert snr_to_sigma(10.0, 1.0) == pytest.approx(math.sqrt(0.1))
        assert sigma_to_snr(math.sqrt(0.1), 1.0) == pytest.approx(10.0)
        assert sigma_to_snr(0.0, 1.0) == math.inf

    def test_noiseless_curves_are_zero(self, alloc, noiseless_channel):
        assert analytic_ber_strong_genie(alloc, noiseless_channel) == 0.0
        assert analytic_ber_strong_sic(alloc, noiseless_channel) == 0.0
        assert analytic_ber_weak(alloc, noiseless_channel) == 0.0

    def test_strong_genie_is_q_of_amplitude(self, alloc):
        ch = ChannelRealization.pair(1.0, 0.6, 0.5)
        assert analytic_ber_strong_genie(alloc, ch) == pytest.approx(q_function(math.sqrt(0.2) / 0.5))

    def test_weak_user_formula(self, alloc):
        ch = ChannelRealization.pair(1.0, 0.6, 0.5)
        a, b = 0.6 * math.sqrt(0.8) / 0.5, 0.6 * math.sqrt(0.2) / 0.5
        expected = 0.5 * q_function(a - b) + 0.5 * q_function(a + b)
        assert analytic_ber_weak(alloc, ch) == pytest.approx(expected)

    @pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0, 15.0, 20.0])
    def test_hard_sic_never_beats_genie(self, alloc, snr_db):
        ch = ChannelRealization.pair(1.0, 0.6, snr_to_sigma(snr_db, alloc.total))
        assert analytic_ber_strong_sic(alloc, ch) >= analytic_ber_strong_genie(alloc, ch)

    def test_curves_fall_with_snr(self, alloc):
        rates = [
            analytic_ber_weak(alloc, ChannelRealization.pair(1.0, 0.6, snr_to_sigma(snr, 1.0)))
            for snr in (0.0, 10.0, 20.0)
        ]
        assert rates[0] > rates[1] > rates[2]

    def test_standard_error(self):
        assert standard_error(0.5, 100) == pytest.approx(0.05)
        assert standard_error(0.1, 0) == 0.0


class TestMonteCarlo:
    """Tests for ber_monte_carlo and its stop rule."""

    def test_noiseless_point_is_error_free(self, alloc, noiseless_channel):
        settings = SweepSettings(noise_sigmas=[0.0], trials=2, block_bits=5000)
        [report] = ber_monte_carlo(settings, alloc, noiseless_channel, seed=1)
        assert report.bits == 10_000
        assert report.bit_errors_strong == report.bit_errors_weak == report.bit_errors_strong_genie == 0
        assert report.snr_db == math.inf

    def test_seed_reproduces_counts(self, alloc, noiseless_channel):
        settings = SweepSettings(snr_db=[5.0], trials=2, block_bits=2000, min_errors=10)
        first = ber_monte_carlo(settings, alloc, noiseless_channel, seed=9)
        second = ber_monte_carlo(settings, alloc, noiseless_channel, seed=9)
        assert [r.to_full_dict() for r in first] == [r.to_full_dict() for r in second]

    def test_worker_count_does_not_change_results(self, alloc, noiseless_channel):
        settings = SweepSettings(snr_db=[5.0], trials=4, block_bits=2000, min_errors=10)
        serial = ber_monte_carlo(settings, alloc, noiseless_channel, seed=9)
        parallel = ber_monte_carlo(
            SweepSettings(snr_db=[5.0], trials=4, block_bits=2000, min_errors=10, n_jobs=2),
            alloc,
            noiseless_channel,
            seed=9,
        )
        assert [r.to_full_dict() for r in serial] == [r.to_full_dict() for r in parallel]

    def test_max_bits_stops_low_error_points(self, alloc, noiseless_channel):
        settings = SweepSettings(snr_db=[30.0], trials=1, block_bits=1000, min_errors=100, max_bits=3000)
        [report] = ber_monte_carlo(settings, alloc, noiseless_channel, seed=2)
        assert report.bits == 3000

    def test_empty_sweep_rejected(self, alloc, noiseless_channel):
        with pytest.raises(InvalidConfig):
            ber_monte_carlo(SweepSettings(snr_db=[]), alloc, noiseless_channel, seed=1)

    def test_simulation_tracks_analytic_curves(self, alloc, noiseless_channel):
        """Within three standard errors at 0, 5 and 10 dB for both users."""
        settings = SweepSettings(
            snr_db=[0.0, 5.0, 10.0], trials=4, block_bits=20_000, min_errors=100, max_bits=2_000_000
        )
        reports = ber_monte_carlo(settings, alloc, noiseless_channel, seed=20240601)
        for report in reports:
            genie_se = standard_error(report.analytic_strong, report.bits)
            weak_se = standard_error(report.analytic_weak, report.bits)
            assert abs(report.ber_strong_genie - report.analytic_strong) <= 3 * genie_se
            assert abs(report.ber_weak - report.analytic_weak) <= 3 * weak_se
            sic_se = standard_error(report.analytic_strong_sic, report.bits)
            assert abs(report.ber_strong_sic - report.analytic_strong_sic) <= 4 * sic_se
        assert max_deviation_in_standard_errors(reports) <= 4

    def test_table_columns(self, alloc, noiseless_channel):
        settings = SweepSettings(
            snr_db=[0.0, 20.0], trials=1, block_bits=1000, min_errors=1, max_bits=20_000
        )
        table = ber_table(ber_monte_carlo(settings, alloc, noiseless_channel, seed=4))
        assert list(table.columns) == BER_COLUMNS
        assert table["snr_db"].tolist() == pytest.approx([0.0, 20.0])

    def test_genie_never_loses_to_hard_sic(self, alloc, noiseless_channel):
        """Both receivers see the same samples, so genie errors stay within one SE of hard SIC."""
        settings = SweepSettings(
            snr_db=[0.0, 5.0, 10.0], trials=2, block_bits=20_000, min_errors=100, max_bits=200_000
        )
        for report in ber_monte_carlo(settings, alloc, noiseless_channel, seed=31):
            se = standard_error(report.ber_strong_sic, report.bits)
            assert report.ber_strong_genie <= report.ber_strong_sic + se

    def test_ber_grows_with_noise(self, alloc, noiseless_channel):
        settings = SweepSettings(
            noise_sigmas=[0.25, 0.4, 0.6], trials=2, block_bits=20_000, min_errors=100, max_bits=200_000
        )
        reports = ber_monte_carlo(settings, alloc, noiseless_channel, seed=32)
        for column in ("ber_strong_sic", "ber_strong_genie", "ber_weak"):
            for quieter, louder in itertools.pairwise(reports):
                prev, nxt = getattr(quieter, column), getattr(louder, column)
                assert nxt >= prev - 3 * standard_error(prev, quieter.bits), column
