"""Power-domain NOMA baseband: BPSK, superposition, AWGN, SIC and Monte-Carlo BER.

Users are ordered weakest-first everywhere: layer 0 carries the weakest user (largest power
share, smallest channel gain) and the last layer the strongest user.
"""

import logging
import math
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import Sequence

import numpy as np
import pandas as pd
from joblib import Parallel
from joblib import delayed
from scipy.special import erfc
from tqdm import tqdm

from src.datamodels import BERReport
from src.errors import InvalidAllocation
from src.errors import InvalidConfig
from src.errors import LengthMismatch

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-12
BER_COLUMNS = ["snr_db", "trials", "ber_strong", "ber_weak", "analytic_strong", "analytic_weak"]


@dataclass(frozen=True)
class PowerAllocation:
    total: float
    levels: tuple[float, ...]  # weakest user first

    @property
    def p_weak(self) -> float:
        return self.levels[0]

    @property
    def p_strong(self) -> float:
        return self.levels[-1]

    @property
    def num_users(self) -> int:
        return len(self.levels)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.levels, dtype=float))

    def validate(self) -> None:
        if len(self.levels) < 2:
            raise InvalidAllocation("superposition needs at least two users")
        if any(level <= 0 for level in self.levels):
            raise InvalidAllocation("every user needs a positive power share")
        if abs(sum(self.levels) - self.total) > SUM_TOLERANCE * max(self.total, 1.0):
            raise InvalidAllocation(f"levels sum to {sum(self.levels)}, expected total {self.total}")
        # each layer must outweigh all lower-power layers combined, else noiseless SIC is ambiguous
        amplitudes = self.amplitudes
        for k in range(len(amplitudes) - 1):
            if amplitudes[k] <= amplitudes[k + 1 :].sum():
                raise InvalidAllocation(
                    f"layer {k} amplitude {amplitudes[k]:.6f} does not exceed the remaining layers'"
                )


@dataclass(frozen=True)
class ChannelRealization:
    gains: tuple[float, ...]  # weakest user first, strictly increasing
    noise_sigma: float

    @classmethod
    def pair(cls, h_strong: float, h_weak: float, noise_sigma: float) -> "ChannelRealization":
        return cls(gains=(h_weak, h_strong), noise_sigma=noise_sigma)

    @property
    def h_weak(self) -> float:
        return self.gains[0]

    @property
    def h_strong(self) -> float:
        return self.gains[-1]

    def validate(self) -> None:
        if any(g <= 0 for g in self.gains):
            raise InvalidConfig("channel gains must be positive")
        if any(a >= b for a, b in zip(self.gains, self.gains[1:])):
            raise InvalidConfig("channel gains must be strictly increasing from weak to strong user")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be non-negative")


@dataclass(frozen=True)
class SuperposedSignal:
    symbols: np.ndarray

    @property
    def length(self) -> int:
        return int(self.symbols.size)


def allocate_power(total: float, weak_fraction: float) -> PowerAllocation:
    if not total > 0:
        raise InvalidAllocation(f"total power must be positive, got {total}")
    if not 0 < weak_fraction < 1:
        raise InvalidAllocation(f"weak_fraction must lie in (0, 1), got {weak_fraction}")
    if weak_fraction <= 0.5:
        raise InvalidAllocation(f"the weaker user needs the larger share, got weak_fraction {weak_fraction}")
    p_weak = weak_fraction * total
    return PowerAllocation(total=total, levels=(p_weak, total - p_weak))


def allocate_power_levels(total: float, fractions: Sequence[float]) -> PowerAllocation:
    """n-user allocation; ``fractions`` are ordered weakest user first and must sum to 1."""
    if not total > 0:
        raise InvalidAllocation(f"total power must be positive, got {total}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidAllocation(f"power fractions must sum to 1, got {sum(fractions)}")
    levels = [f * total for f in fractions[:-1]]
    levels.append(total - sum(levels))
    allocation = PowerAllocation(total=total, levels=tuple(levels))
    allocation.validate()
    return allocation


def modulate(bits: np.ndarray) -> np.ndarray:
    """BPSK: bit 0 → +1.0, bit 1 → -1.0."""
    return 1.0 - 2.0 * np.asarray(bits, dtype=float)


def demodulate(received: np.ndarray) -> np.ndarray:
    # 0.0 decodes as bit 0
    return (np.asarray(received) < 0).astype(np.uint8)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def superpose_layers(layers: Sequence[np.ndarray], alloc: PowerAllocation) -> SuperposedSignal:
    if len(layers) != alloc.num_users:
        raise LengthMismatch(f"{len(layers)} symbol streams for {alloc.num_users} power levels")
    lengths = {len(layer) for layer in layers}
    if len(lengths) > 1:
        raise LengthMismatch(f"symbol streams differ in length: {sorted(lengths)}")
    symbols = np.zeros(lengths.pop() if lengths else 0, dtype=float)
    for amplitude, layer in zip(alloc.amplitudes, layers):
        symbols = symbols + amplitude * np.asarray(layer, dtype=float)
    return SuperposedSignal(symbols=symbols)


def superpose(sym_weak: np.ndarray, sym_strong: np.ndarray, alloc: PowerAllocation) -> SuperposedSignal:
    return superpose_layers([sym_weak, sym_strong], alloc)


def constellation(alloc: PowerAllocation) -> np.ndarray:
    """Sorted noiseless symbol values of the superposed signal."""
    values = np.zeros(1)
    for amplitude in alloc.amplitudes:
        values = np.concatenate([values + amplitude, values - amplitude])
    return np.sort(values)


def apply_channel(
    sig: SuperposedSignal, ch: ChannelRealization, gain: float, rng: np.random.Generator
) -> np.ndarray:
    if not gain > 0:
        raise InvalidConfig(f"channel gain must be positive, got {gain}")
    received = gain * sig.symbols
    if ch.noise_sigma == 0:
        return received
    return received + rng.normal(0.0, ch.noise_sigma, size=sig.length)


def sic_decode_layers(
    y: np.ndarray,
    alloc: PowerAllocation,
    gain: float,
    depth: int,
    genie_layers: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Decode layers 0..depth, cancelling each decoded layer before the next.

    With ``genie_layers`` the true symbols of the cancelled layers are subtracted instead of
    the re-modulated decisions.
    """
    if not 0 <= depth < alloc.num_users:
        raise InvalidConfig(f"depth {depth} outside 0..{alloc.num_users - 1}")
    residual = np.asarray(y, dtype=float).copy()
    decoded = []
    for k, amplitude in enumerate(alloc.amplitudes[: depth + 1]):
        bits = demodulate(residual)
        decoded.append(bits)
        if k == depth:
            break
        cancelled = modulate(bits) if genie_layers is None else np.asarray(genie_layers[k], dtype=float)
        residual -= gain * amplitude * cancelled
    return decoded


def sic_decode_strong(
    y: np.ndarray,
    alloc: PowerAllocation,
    ch: ChannelRealization,
    genie: bool = False,
    weak_symbols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-user SIC at UE1: detect the weak user's bit, cancel it, detect the own bit."""
    if genie and weak_symbols is None:
        raise InvalidConfig("genie-aided SIC needs the true weak-user symbols")
    genie_layers = [weak_symbols] if genie else None
    weak_bits, strong_bits = sic_decode_layers(y, alloc, ch.h_strong, depth=1, genie_layers=genie_layers)
    return weak_bits, strong_bits


def decode_weak_direct(y: np.ndarray, alloc: PowerAllocation, ch: ChannelRealization) -> np.ndarray:
    """UE2 treats the strong user's layer as noise."""
    return demodulate(y)


def q_function(x: float) -> float:
    return float(0.5 * erfc(x / math.sqrt(2.0)))


def snr_to_sigma(snr_db: float, total: float) -> float:
    """Per-dimension noise std for transmit SNR = total power / σ²."""
    return math.sqrt(total / 10 ** (snr_db / 10))


def sigma_to_snr(noise_sigma: float, total: float) -> float:
    return math.inf if noise_sigma == 0 else 10 * math.log10(total / noise_sigma**2)


def analytic_ber_strong_genie(alloc: PowerAllocation, ch: ChannelRealization) -> float:
    if ch.noise_sigma == 0:
        return 0.0
    return q_function(ch.h_strong * math.sqrt(alloc.p_strong) / ch.noise_sigma)


def analytic_ber_strong_sic(alloc: PowerAllocation, ch: ChannelRealization) -> float:
    """Hard-decision SIC including propagation of stage-1 errors."""
    if ch.noise_sigma == 0:
        return 0.0
    a = ch.h_strong * math.sqrt(alloc.p_weak) / ch.noise_sigma
    b = ch.h_strong * math.sqrt(alloc.p_strong) / ch.noise_sigma
    q = q_function
    return q(b) + 0.5 * (q(a - b) - q(a + b) + q(2 * a + b) - q(2 * a - b))


def analytic_ber_weak(alloc: PowerAllocation, ch: ChannelRealization) -> float:
    if ch.noise_sigma == 0:
        return 0.0
    a = ch.h_weak * math.sqrt(alloc.p_weak) / ch.noise_sigma
    b = ch.h_weak * math.sqrt(alloc.p_strong) / ch.noise_sigma
    return 0.5 * q_function(a - b) + 0.5 * q_function(a + b)


@dataclass(frozen=True)
class SweepSettings:
    snr_db: list[float] = field(default_factory=list)
    noise_sigmas: list[float] | None = None  # overrides snr_db when given
    trials: int = 4  # trials per wave; the stop rule is checked after every wave
    block_bits: int = 100_000
    min_errors: int = 100
    max_bits: int = 20_000_000
    genie_sic: bool = False
    n_jobs: int = 1
    progress: bool = False

    def sigmas(self, total: float) -> list[float]:
        if self.noise_sigmas is not None:
            return list(self.noise_sigmas)
        return [snr_to_sigma(snr, total) for snr in self.snr_db]


def trial_rng(seed: int, point_index: int, trial_index: int) -> np.random.Generator:
    """Counter-based stream for one trial, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, point_index, trial_index])))


def _run_trial(
    seed: int,
    point_index: int,
    trial_index: int,
    alloc: PowerAllocation,
    ch: ChannelRealization,
    block_bits: int,
) -> tuple[int, int, int]:
    rng = trial_rng(seed, point_index, trial_index)
    weak_bits = rng.integers(0, 2, size=block_bits, dtype=np.uint8)
    strong_bits = rng.integers(0, 2, size=block_bits, dtype=np.uint8)
    weak_symbols = modulate(weak_bits)
    signal = superpose(weak_symbols, modulate(strong_bits), alloc)

    y_strong = apply_channel(signal, ch, ch.h_strong, rng)
    y_weak = apply_channel(signal, ch, ch.h_weak, rng)

    _, strong_hat = sic_decode_strong(y_strong, alloc, ch)
    _, strong_hat_genie = sic_decode_strong(y_strong, alloc, ch, genie=True, weak_symbols=weak_symbols)
    weak_hat = decode_weak_direct(y_weak, alloc, ch)
    return (
        int(np.count_nonzero(strong_hat != strong_bits)),
        int(np.count_nonzero(strong_hat_genie != strong_bits)),
        int(np.count_nonzero(weak_hat != weak_bits)),
    )


def ber_monte_carlo(
    settings: SweepSettings, alloc: PowerAllocation, ch: ChannelRealization, seed: int
) -> list[BERReport]:
    """Measure both users' BER at every sweep point until min_errors or max_bits is reached."""
    sigmas = settings.sigmas(alloc.total)
    if not sigmas:
        raise InvalidConfig("BER sweep needs at least one SNR point")
    if settings.trials < 1 or settings.block_bits < 1:
        raise InvalidConfig("trials and block_bits must be at least 1")
    alloc.validate()
    ch.validate()

    reports = []
    runner = Parallel(n_jobs=settings.n_jobs)
    for point_index, sigma in enumerate(tqdm(sigmas, desc="BER sweep", disable=not settings.progress)):
        point_channel = replace(ch, noise_sigma=sigma)
        counts = np.zeros(3, dtype=np.int64)
        trials = 0
        while True:
            wave = runner(
                delayed(_run_trial)(seed, point_index, trials + t, alloc, point_channel, settings.block_bits)
                for t in range(settings.trials)
            )
            counts += np.asarray(wave, dtype=np.int64).sum(axis=0)
            trials += settings.trials
            bits = trials * settings.block_bits
            # a noiseless point has no errors to wait for
            if sigma == 0 or counts.min() >= settings.min_errors or bits >= settings.max_bits:
                break

        report = BERReport(
            snr_db=sigma_to_snr(sigma, alloc.total),
            noise_sigma=sigma,
            trials=trials,
            bits=bits,
            bit_errors_strong=int(counts[0]),
            bit_errors_strong_genie=int(counts[1]),
            bit_errors_weak=int(counts[2]),
            analytic_strong=analytic_ber_strong_genie(alloc, point_channel),
            analytic_strong_sic=analytic_ber_strong_sic(alloc, point_channel),
            analytic_weak=analytic_ber_weak(alloc, point_channel),
            genie_sic=settings.genie_sic,
        )
        row = report.to_dict()
        logger.info(
            f"📡 SNR {report.snr_db:.1f} dB: strong {report.ber_strong:.3e} "
            f"(analytic {row['analytic_strong']:.3e}), weak {report.ber_weak:.3e} "
            f"(analytic {report.analytic_weak:.3e}) over {bits:,} bits"
        )
        reports.append(report)
    return reports


def standard_error(rate: float, bits: int) -> float:
    return math.sqrt(rate * (1 - rate) / bits) if bits else 0.0


def max_deviation_in_standard_errors(reports: Sequence[BERReport]) -> float:
    """Largest |simulated - analytic| over all columns, in units of the analytic standard error."""
    worst = 0.0
    for report in reports:
        row = report.to_dict()
        pairs = ((row["ber_strong"], row["analytic_strong"]), (row["ber_weak"], row["analytic_weak"]))
        for simulated, analytic in pairs:
            se = standard_error(analytic, report.bits)
            if se > 0:
                worst = max(worst, abs(simulated - analytic) / se)
            elif simulated != analytic:
                worst = math.inf
    return worst


def ber_table(reports: Sequence[BERReport]) -> pd.DataFrame:
    return pd.DataFrame([report.to_dict() for report in reports], columns=BER_COLUMNS)
