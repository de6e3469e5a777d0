"""Scenario files, end-to-end runs, BER sweeps and the feature-comparison report."""

import hashlib
import json
import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd

from src import config
from src.attacks import BASELINE_SCHEME
from src.attacks import IDENTITY_LEAK
from src.attacks import AttackScenario
from src.attacks import AttackSuiteReport
from src.attacks import default_profiles
from src.attacks import run_attack_suite
from src.attacks import trial_seed
from src.crypto import BASELINE_KEY_INPUTS
from src.crypto import KEY_DERIVATION_INPUTS
from src.datamodels import DeviceIdentity
from src.datamodels import FeatureRow
from src.errors import InvalidAllocation
from src.errors import InvalidConfig
from src.errors import MalformedIdentity
from src.errors import MissingResults
from src.errors import ParseError
from src.errors import ValidationError
from src.handover import AdversaryKind
from src.handover import Scheme
from src.handover import UESpec
from src.handover import run_session
from src.noma_phy import ChannelRealization
from src.noma_phy import PowerAllocation
from src.noma_phy import SweepSettings
from src.noma_phy import allocate_power
from src.noma_phy import allocate_power_levels
from src.noma_phy import ber_monte_carlo
from src.noma_phy import ber_table
from src.noma_phy import max_deviation_in_standard_errors

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.jsonl"
OUTCOMES_FILE = "outcomes.json"
ATTACKS_FILE = "attacks.json"
BER_FILE = "ber"
BER_DETAIL_FILE = "ber_detail.csv"
REPORT_FILE = "feature_report"

U64_MAX = 2**64 - 1
OUTPUT_FORMATS = ("json", "csv")

_TOP_LEVEL_KEYS = {
    "seed",
    "scheme",
    "genie_sic",
    "power_total",
    "weak_fraction",
    "power_fractions",
    "h_strong",
    "h_weak",
    "noise_sigma",
    "snr_db",
    "trials",
    "block_bits",
    "min_errors",
    "max_bits",
    "n_jobs",
    "attack_trials",
    "ues",
}
_UE_KEYS = {
    "ue_id",
    "imei",
    "mac",
    "timestamp_ms",
    "lat_udeg",
    "lon_udeg",
    "gain",
    "payload",
    "payload_random_bytes",
}
_TOML_LOCATION = re.compile(r"at line (\d+), column (\d+)")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    ues: tuple[UESpec, ...]
    alloc: PowerAllocation
    scheme: Scheme = Scheme.SECURE
    genie_sic: bool = False
    h_strong: float = config.H_STRONG
    h_weak: float = config.H_WEAK
    noise_sigma: float = config.NOISE_SIGMA
    snr_db: tuple[float, ...] = tuple(config.SNR_DB)
    sweep_noise_sigmas: tuple[float, ...] | None = None  # set when the file fixes σ instead of an SNR list
    trials: int = config.TRIALS
    block_bits: int = config.BLOCK_BITS
    min_errors: int = config.MIN_ERRORS
    max_bits: int = config.MAX_BITS
    n_jobs: int = config.N_JOBS
    attack_trials: int = config.ATTACK_TRIALS

    @property
    def num_ues(self) -> int:
        return len(self.ues)

    def sweep_settings(self, progress: bool = False) -> SweepSettings:
        return SweepSettings(
            snr_db=list(self.snr_db),
            noise_sigmas=list(self.sweep_noise_sigmas) if self.sweep_noise_sigmas is not None else None,
            trials=self.trials,
            block_bits=self.block_bits,
            min_errors=self.min_errors,
            max_bits=self.max_bits,
            genie_sic=self.genie_sic,
            n_jobs=self.n_jobs,
            progress=progress,
        )

    def sweep_channel(self) -> ChannelRealization:
        return ChannelRealization.pair(self.h_strong, self.h_weak, self.noise_sigma)

    def attack_scenario(self) -> AttackScenario:
        return AttackScenario(
            ues=self.ues,
            alloc=self.alloc,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
            scheme=self.scheme,
            trials=self.attack_trials,
        )


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValidationError(f"{where}{unknown[0]}", "unknown key")


def _real(data: dict, key: str, default: float, where: str = "") -> float:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}{key}", f"expected a number, got {value!r}")
    return float(value)


def _count(data: dict, key: str, default: int, where: str = "", minimum: int = 1) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}{key}", f"expected an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(f"{where}{key}", f"must be at least {minimum}")
    return value


def _n_jobs(data: dict) -> int:
    value = _count(data, "n_jobs", config.N_JOBS, minimum=-1)
    if value == 0:
        raise ValidationError("n_jobs", "must be a worker count of at least 1, or -1 for every core")
    return value


def _payload(entry: dict, where: str, seed: int, index: int) -> bytes:
    if "payload" in entry and "payload_random_bytes" in entry:
        raise ValidationError(f"{where}payload", "give either payload or payload_random_bytes, not both")
    if "payload_random_bytes" in entry:
        size = _count(entry, "payload_random_bytes", 0, where, minimum=0)
        return np.random.default_rng([seed, 3, index]).bytes(size)
    text = entry.get("payload", f"data for {entry['ue_id']}")
    if not isinstance(text, str):
        raise ValidationError(f"{where}payload", "expected UTF-8 text")
    return text.encode("utf-8")


def _identity(entry: dict, where: str) -> DeviceIdentity:
    for key in ("imei", "mac", "timestamp_ms", "lat_udeg", "lon_udeg"):
        if key not in entry:
            raise ValidationError(f"{where}{key}", "missing")
    try:
        identity = DeviceIdentity.from_dict(entry)
        identity.validate()
    except (MalformedIdentity, TypeError, ValueError) as e:
        raise ValidationError(f"{where}identity", str(e)) from e
    return identity


def _ues(data: dict, seed: int, h_strong: float, h_weak: float) -> tuple[UESpec, ...]:
    entries = data.get("ues")
    if not isinstance(entries, list) or len(entries) < 2:
        raise ValidationError("ues", "at least two [[ues]] tables are required for superposition")
    explicit_gains = ["gain" in entry for entry in entries if isinstance(entry, dict)]
    if any(explicit_gains) and not all(explicit_gains):
        raise ValidationError("ues", "give a gain for every UE or for none")
    if not any(explicit_gains) and len(entries) > 2:
        raise ValidationError("ues", "more than two UEs need an explicit gain each")

    # without explicit gains the first UE is the strong (near) user
    default_gains = [h_strong, h_weak]
    ues, seen = [], set()
    for index, entry in enumerate(entries):
        where = f"ues[{index}]."
        if not isinstance(entry, dict):
            raise ValidationError(f"ues[{index}]", "expected a table")
        _reject_unknown(entry, _UE_KEYS, where)
        ue_id = entry.get("ue_id")
        if not isinstance(ue_id, str) or not ue_id:
            raise ValidationError(f"{where}ue_id", "expected a non-empty string")
        if ue_id in seen:
            raise ValidationError(f"{where}ue_id", f"duplicate ue_id {ue_id!r}")
        seen.add(ue_id)
        gain = _real(entry, "gain", default_gains[index] if index < 2 else 0.0, where)
        if not gain > 0:
            raise ValidationError(f"{where}gain", "channel gain must be positive")
        ues.append(UESpec(ue_id, _identity(entry, where), _payload(entry, where, seed, index), gain))

    if len({ue.identity for ue in ues}) != len(ues):
        raise ValidationError("ues", "two UEs share an identity and would derive the same key")
    if len({ue.gain for ue in ues}) != len(ues):
        raise ValidationError("ues", "channel gains must be distinct")
    return tuple(ues)


def _allocation(data: dict, num_ues: int) -> PowerAllocation:
    total = _real(data, "power_total", config.POWER_TOTAL)
    try:
        if "power_fractions" in data:
            fractions = data["power_fractions"]
            if not isinstance(fractions, list) or len(fractions) != num_ues:
                raise ValidationError("power_fractions", f"expected {num_ues} fractions, weakest user first")
            levels = [_real({"f": f}, "f", 0.0, "power_fractions.") for f in fractions]
            return allocate_power_levels(total, levels)
        if num_ues > 2:
            raise ValidationError("power_fractions", "required for more than two UEs")
        return allocate_power(total, _real(data, "weak_fraction", config.WEAK_FRACTION))
    except InvalidAllocation as e:
        key = "power_fractions" if "power_fractions" in data else "weak_fraction"
        raise ValidationError(key, f"power-allocation invariant violated: {e}") from e


def parse_config(text: str, seed_override: int | None = None) -> ScenarioConfig:
    """Parse and fully validate a scenario; nothing runs on invalid input."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LOCATION.search(str(e))
        line, column = (int(match[1]), int(match[2])) if match else (None, None)
        raise ParseError(f"invalid scenario file: {e}", line, column) from e

    _reject_unknown(data, _TOP_LEVEL_KEYS, "")
    seed = seed_override if seed_override is not None else data.get("seed")
    if seed is None:
        raise ValidationError("seed", "a seed is required; runs never draw implicit entropy")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= U64_MAX:
        raise ValidationError("seed", "expected an unsigned 64-bit integer")

    try:
        scheme = Scheme(data.get("scheme", Scheme.SECURE.value))
    except ValueError as e:
        raise ValidationError("scheme", "expected 'secure' or 'legacy'") from e
    genie_sic = data.get("genie_sic", False)
    if not isinstance(genie_sic, bool):
        raise ValidationError("genie_sic", "expected true or false")

    h_strong = _real(data, "h_strong", config.H_STRONG)
    h_weak = _real(data, "h_weak", config.H_WEAK)
    if not h_strong > h_weak > 0:
        raise ValidationError("h_strong", "channel gains must satisfy h_strong > h_weak > 0")
    noise_sigma = _real(data, "noise_sigma", config.NOISE_SIGMA)
    if noise_sigma < 0:
        raise ValidationError("noise_sigma", "must be non-negative")

    snr_db = data.get("snr_db", config.SNR_DB)
    if not isinstance(snr_db, list) or not snr_db:
        raise ValidationError("snr_db", "expected a non-empty list of SNR points in dB")
    snr_points = tuple(_real({"snr": v}, "snr", 0.0, "snr_db.") for v in snr_db)
    sweep_sigmas = (noise_sigma,) if "noise_sigma" in data and "snr_db" not in data else None

    ues = _ues(data, seed, h_strong, h_weak)
    return ScenarioConfig(
        seed=seed,
        ues=ues,
        alloc=_allocation(data, len(ues)),
        scheme=scheme,
        genie_sic=genie_sic,
        h_strong=h_strong,
        h_weak=h_weak,
        noise_sigma=noise_sigma,
        snr_db=snr_points,
        sweep_noise_sigmas=sweep_sigmas,
        trials=_count(data, "trials", config.TRIALS),
        block_bits=_count(data, "block_bits", config.BLOCK_BITS),
        min_errors=_count(data, "min_errors", config.MIN_ERRORS, minimum=0),
        max_bits=_count(data, "max_bits", config.MAX_BITS),
        n_jobs=_n_jobs(data),
        attack_trials=_count(data, "attack_trials", config.ATTACK_TRIALS),
    )


def load_config(path: Path, seed_override: int | None = None) -> ScenarioConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    cfg = parse_config(text, seed_override)
    logger.info(f"✅ Loaded scenario {path} ({cfg.num_ues} UEs, {cfg.scheme.value}, seed={cfg.seed})")
    return cfg


def write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class ScenarioRun:
    scheme: str
    seed: int
    noise_sigma: float
    sessions: int
    outcomes: list[dict]
    delivery_failures: dict[str, int]
    all_recovered: bool
    exit_code: int
    trace_file: str = TRACE_FILE
    observations: dict[str, str] = field(default_factory=dict)

    @property
    def delivery_failure_rate(self) -> dict[str, float]:
        return {ue_id: failures / self.sessions for ue_id, failures in self.delivery_failures.items()}

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "sessions": self.sessions,
            "outcomes": self.outcomes,
            "delivery_failures": self.delivery_failures,
            "delivery_failure_rate": self.delivery_failure_rate,
            "all_recovered": self.all_recovered,
            "exit_code": self.exit_code,
            "trace_file": self.trace_file,
            "observations": self.observations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioRun":
        return cls(
            scheme=data["scheme"],
            seed=int(data["seed"]),
            noise_sigma=float(data["noise_sigma"]),
            sessions=int(data["sessions"]),
            outcomes=list(data["outcomes"]),
            delivery_failures={k: int(v) for k, v in data["delivery_failures"].items()},
            all_recovered=bool(data["all_recovered"]),
            exit_code=int(data["exit_code"]),
            trace_file=data.get("trace_file", TRACE_FILE),
            observations=dict(data.get("observations", {})),
        )


def run_scenario(cfg: ScenarioConfig, out_dir: Path) -> ScenarioRun:
    """One traced session; with noise, ``cfg.trials`` sessions for the delivery-failure rate."""
    payloads = {ue.ue_id: ue.payload for ue in cfg.ues}
    sessions = cfg.trials if cfg.noise_sigma > 0 else 1
    failures = dict.fromkeys(payloads, 0)
    first = None
    for index in range(sessions):
        seed = cfg.seed if index == 0 else trial_seed(cfg.seed, 3, index)
        trace = run_session(cfg.ues, cfg.alloc, cfg.noise_sigma, seed, scheme=cfg.scheme).trace
        for ue_id, outcome in trace.outcomes.items():
            failures[ue_id] += not (outcome.ok and outcome.recovered == payloads[ue_id])
        if first is None:
            first = trace

    first.write(out_dir / TRACE_FILE)
    all_recovered = failures == dict.fromkeys(payloads, 0)
    noiseless_secure = cfg.scheme is Scheme.SECURE and cfg.noise_sigma == 0
    run = ScenarioRun(
        scheme=cfg.scheme.value,
        seed=cfg.seed,
        noise_sigma=cfg.noise_sigma,
        sessions=sessions,
        outcomes=[first.outcomes[ue_id].to_dict() for ue_id in sorted(first.outcomes)],
        delivery_failures=failures,
        all_recovered=all_recovered,
        exit_code=1 if noiseless_secure and not all_recovered else 0,
        observations=dict(first.observations),
    )
    write_json(out_dir / OUTCOMES_FILE, run.to_dict())
    if sessions > 1:
        logger.info(f"📲 Delivery failures over {sessions} sessions: {failures}")
    return run


@dataclass
class BerSweepResult:
    table_path: Path
    detail_path: Path
    max_deviation: float
    table: pd.DataFrame


def ber_sweep(cfg: ScenarioConfig, out_dir: Path, fmt: str = "csv", progress: bool = False) -> BerSweepResult:
    """Monte-Carlo BER at every sweep point, written as a table next to its analytic columns."""
    if cfg.alloc.num_users != 2:
        raise InvalidConfig("the BER sweep models the two-user downlink")
    reports = ber_monte_carlo(cfg.sweep_settings(progress), cfg.alloc, cfg.sweep_channel(), cfg.seed)
    table = ber_table(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        table_path = out_dir / f"{BER_FILE}.json"
        table_path.write_text(table.to_json(orient="records", indent=2) + "\n")
    else:
        table_path = out_dir / f"{BER_FILE}.csv"
        table.to_csv(table_path, index=False)
    detail_path = out_dir / BER_DETAIL_FILE
    pd.DataFrame([report.to_full_dict() for report in reports]).to_csv(detail_path, index=False)

    deviation = max_deviation_in_standard_errors(reports)
    logger.info(f"📡 Max deviation from analytic BER: {deviation:.2f} standard errors")
    return BerSweepResult(table_path, detail_path, deviation, table)


def run_attacks(cfg: ScenarioConfig, out_dir: Path) -> AttackSuiteReport:
    report = run_attack_suite(default_profiles(), cfg.attack_scenario())
    write_json(out_dir / ATTACKS_FILE, report.to_dict())
    return report


@dataclass
class FeatureReport:
    scheme: str
    seed: int
    rows: list[FeatureRow]
    artifacts: dict[str, str]  # file name -> SHA-256 at emission

    @property
    def all_pass(self) -> bool:
        return all(row.verdict == "pass" for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "rows": [row.to_dict() for row in self.rows],
            "artifacts": dict(sorted(self.artifacts.items())),
        }


def _verdict(passed: bool) -> str:
    return "pass" if passed else "fail"


def _require(suite: AttackSuiteReport, kind: str, scheme: str | None = None):
    verdict = suite.verdict(kind, scheme)
    if verdict is None:
        raise MissingResults(f"attack suite has no {kind} result for {scheme or suite.scheme}")
    return verdict


def build_feature_report(
    suite: AttackSuiteReport | None, run: ScenarioRun | None, artifacts: dict[str, str]
) -> FeatureReport:
    """One row per compared feature, each backed by executed test ids."""
    if suite is None:
        raise MissingResults("the attack suite has not run")
    if run is None:
        raise MissingResults("no scenario run recorded")

    run_id = f"scenario:{run.scheme}:{run.seed}"
    run_files = [OUTCOMES_FILE, run.trace_file]
    privacy = _require(suite, IDENTITY_LEAK)
    eavesdropper = _require(suite, AdversaryKind.EAVESDROPPER.value)
    reader = _require(suite, AdversaryKind.CROSS_USER_READER.value)
    spoofing = _require(suite, AdversaryKind.SPOOFING_CLONE.value)
    baseline_spoofing = suite.verdict(AdversaryKind.SPOOFING_CLONE.value, BASELINE_SCHEME)
    secure = run.scheme == Scheme.SECURE.value
    key_inputs = ", ".join(KEY_DERIVATION_INPUTS) if secure else "none"

    spoofing_ids = [spoofing.test_id] + ([baseline_spoofing.test_id] if baseline_spoofing else [])
    baseline_spoofing_text = (
        "partial: cloned IMEI+MAC reproduces the key"
        if baseline_spoofing is not None and baseline_spoofing.outcome == "succeeded"
        else "not measured"
    )
    rows = [
        FeatureRow(
            feature="User privacy",
            proposed=f"yes: {privacy.blocked}/{privacy.trials} identities absent from the registry",
            baseline="no",
            verdict=_verdict(privacy.outcome == "blocked"),
            test_ids=[privacy.test_id],
            artifacts=[ATTACKS_FILE],
        ),
        FeatureRow(
            feature="Encryption",
            proposed=(
                "two-phase: ECIES to the UE public key, AES-GCM under PR_B"
                if secure
                else "none: plaintext superposition"
            ),
            baseline="two-phase symmetric",
            verdict=_verdict(secure and eavesdropper.outcome == "blocked" and run.all_recovered),
            test_ids=[eavesdropper.test_id, run_id],
            artifacts=[ATTACKS_FILE, *run_files],
        ),
        FeatureRow(
            feature="Key generation",
            proposed=key_inputs,
            baseline=", ".join(BASELINE_KEY_INPUTS),
            verdict=_verdict(secure and spoofing.outcome == "blocked"),
            test_ids=[spoofing.test_id],
            artifacts=[ATTACKS_FILE],
        ),
        FeatureRow(
            feature="Protection against spoofing attack",
            proposed="for all" if spoofing.outcome == "blocked" else "none",
            baseline=baseline_spoofing_text,
            verdict=_verdict(spoofing.outcome == "blocked"),
            test_ids=spoofing_ids,
            artifacts=[ATTACKS_FILE],
        ),
        FeatureRow(
            feature="Protection against data hijacking",
            proposed=f"{reader.blocked}/{reader.trials} cross-user reads blocked",
            baseline="yes",
            verdict=_verdict(reader.outcome == "blocked"),
            test_ids=[reader.test_id],
            artifacts=[ATTACKS_FILE],
        ),
    ]
    for row in rows:
        if not row.test_ids:
            raise MissingResults(f"row {row.feature!r} has no executed test")
    return FeatureReport(scheme=run.scheme, seed=run.seed, rows=rows, artifacts=artifacts)


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingResults(f"{what} not found at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def emit_feature_report(out_dir: Path, fmt: str = "json") -> FeatureReport:
    """Build the report from the attack and scenario outputs already written to ``out_dir``."""
    suite = AttackSuiteReport.from_dict(_read_json(out_dir / ATTACKS_FILE, "attack-suite results"))
    run = ScenarioRun.from_dict(_read_json(out_dir / OUTCOMES_FILE, "scenario outcomes"))
    if not (out_dir / run.trace_file).exists():
        raise MissingResults(f"trace {run.trace_file} referenced by {OUTCOMES_FILE} is missing")

    artifact_names = [ATTACKS_FILE, OUTCOMES_FILE, run.trace_file]
    artifacts = {name: file_sha256(out_dir / name) for name in artifact_names}
    report = build_feature_report(suite, run, artifacts)

    write_json(out_dir / f"{REPORT_FILE}.json", report.to_dict())
    if fmt == "csv":
        rows = pd.DataFrame([row.to_dict() for row in report.rows])
        rows.to_csv(out_dir / f"{REPORT_FILE}.csv", index=False)
    passed = sum(row.verdict == "pass" for row in report.rows)
    logger.info(f"{'✅' if report.all_pass else '❌'} Feature report: {passed}/{len(report.rows)} rows pass")
    return report


def verify_feature_report(path: Path) -> list[str]:
    """Problems found re-hashing the report's artifacts; empty when the report still holds."""
    report = json.loads(path.read_text(encoding="utf-8"))
    problems = []
    for name, digest in report["artifacts"].items():
        artifact = path.parent / name
        if not artifact.exists():
            problems.append(f"{name}: missing")
        elif file_sha256(artifact) != digest:
            problems.append(f"{name}: changed since the report was emitted")
    return problems
