"""Adversary suite: eavesdropper, cross-user reader and identity clone against a configured session."""

import logging
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from itertools import permutations
from typing import Sequence

import numpy as np

from src import crypto
from src.crypto import KeyRole
from src.crypto import Layer2Ciphertext
from src.crypto import PrivateKey
from src.datamodels import LAT_LIMIT_UDEG
from src.datamodels import LON_LIMIT_UDEG
from src.datamodels import AttackVerdict
from src.datamodels import DeviceIdentity
from src.datamodels import RegistrationRecord
from src.errors import AuthFailure
from src.errors import DuplicateKey
from src.errors import Layer1AuthFailure
from src.errors import Layer2AuthFailure
from src.errors import MalformedCiphertext
from src.handover import AdversaryKind
from src.handover import AdversaryProfile
from src.handover import Scheme
from src.handover import SessionResult
from src.handover import UESpec
from src.handover import order_weakest_first
from src.handover import receive_layer_bits
from src.handover import run_session
from src.handover import ue_receive
from src.ledger import IdentityLedger
from src.ledger import register_public_key
from src.noma_phy import ChannelRealization
from src.noma_phy import PowerAllocation

logger = logging.getLogger(__name__)

BASELINE_SCHEME = "imei_mac"
IDENTITY_LEAK = "identity_leak"
MAX_TIMESTAMP_SHIFT_MS = 86_400_000
MAX_LOCATION_SHIFT_UDEG = 1_000_000


@dataclass
class AttackSuiteReport:
    scheme: str
    seed: int
    verdicts: list[AttackVerdict] = field(default_factory=list)

    def verdict(self, kind: str, scheme: str | None = None) -> AttackVerdict | None:
        for verdict in self.verdicts:
            if verdict.kind == kind and verdict.scheme == (scheme or self.scheme):
                return verdict
        return None

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "seed": self.seed, "verdicts": [v.to_dict() for v in self.verdicts]}

    @classmethod
    def from_dict(cls, data: dict) -> "AttackSuiteReport":
        return cls(
            scheme=data["scheme"],
            seed=int(data["seed"]),
            verdicts=[AttackVerdict.from_dict(v) for v in data["verdicts"]],
        )


@dataclass(frozen=True)
class AttackScenario:
    """The configured session the adversaries attack."""

    ues: tuple[UESpec, ...]
    alloc: PowerAllocation
    noise_sigma: float
    seed: int
    scheme: Scheme = Scheme.SECURE
    trials: int = 100

    def channel(self) -> ChannelRealization:
        ordered = order_weakest_first(self.ues)
        return ChannelRealization(gains=tuple(ue.gain for ue in ordered), noise_sigma=self.noise_sigma)


def trial_seed(seed: int, stream: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, stream, trial]).generate_state(1, dtype=np.uint64)[0])


def _trial_session(
    scenario: AttackScenario, stream: int, trial: int
) -> tuple[SessionResult, np.random.Generator]:
    session_seed = trial_seed(scenario.seed, stream, trial)
    result = run_session(
        scenario.ues, scenario.alloc, scenario.noise_sigma, session_seed, scheme=scenario.scheme
    )
    return result, np.random.default_rng([session_seed, 1])


def _eavesdropper(scenario: AttackScenario) -> AttackVerdict:
    """Capture the frame at the strongest position and try to open every segment without PR_B."""
    payloads = {ue.ue_id: ue.payload for ue in scenario.ues}
    ch = scenario.channel()
    listener = order_weakest_first(scenario.ues)[-1].ue_id
    blocked = 0
    for trial in range(scenario.trials):
        session, rng = _trial_session(scenario, 0, trial)
        captured = {ue_id: receive_layer_bits(session.frame, listener, ch, rng, ue_id) for ue_id in payloads}
        if scenario.scheme is Scheme.LEGACY:
            blocked += captured != payloads
            continue
        guess = PrivateKey(scalar=crypto.random_scalar(rng.bytes), role=KeyRole.BASE_STATION)
        opened = 0
        for segment in captured.values():
            try:
                crypto.decrypt_layer2(guess, Layer2Ciphertext.from_bytes(segment))
                opened += 1
            except (AuthFailure, MalformedCiphertext):
                pass
        blocked += opened == 0

    notes = (
        ["plaintext of every UE read directly off the superposed frame"]
        if scenario.scheme is Scheme.LEGACY
        else ["layer-2 decryption under a random base-station key"]
    )
    kind = AdversaryKind.EAVESDROPPER.value
    return AttackVerdict(kind, scenario.scheme.value, scenario.trials, blocked, notes)


def _cross_user_reader(scenario: AttackScenario) -> AttackVerdict:
    """A registered UE decodes another UE's segment and tries to open it with its own credentials."""
    payloads = {ue.ue_id: ue.payload for ue in scenario.ues}
    ch = scenario.channel()
    pairs = list(permutations(sorted(payloads), 2))
    attempts = blocked = undelivered = 0
    for trial in range(scenario.trials):
        session, rng = _trial_session(scenario, 1, trial)
        for reader, victim in pairs:
            attempts += 1
            if scenario.scheme is Scheme.LEGACY:
                blocked += receive_layer_bits(session.frame, reader, ch, rng, victim) != payloads[victim]
                continue
            try:
                ue_receive(session.frame, session.kboxes[reader], ch, rng, target_id=victim)
            except Layer1AuthFailure:
                blocked += 1
            except Layer2AuthFailure:
                # channel bit errors broke the layer-2 tag before layer 1 was reached
                blocked += 1
                undelivered += 1

    notes = [f"{len(pairs)} reader/victim directions per trial"]
    if undelivered:
        notes.append(f"{undelivered} attempts failed at layer 2 before layer 1 was reached")
    kind = AdversaryKind.CROSS_USER_READER.value
    return AttackVerdict(kind, scenario.scheme.value, attempts, blocked, notes)


def perturb_identity(victim: DeviceIdentity, rng: np.random.Generator) -> DeviceIdentity:
    """Victim IMEI and MAC with the clone's own timestamp (±1 ms..±1 day) and location (±1 µdeg..±1°)."""

    def shift(limit: int) -> int:
        magnitude = int(round(10 ** rng.uniform(0.0, np.log10(limit))))
        return magnitude if rng.integers(0, 2) else -magnitude

    def within(value: int, delta: int, low: int, high: int) -> int:
        return value + delta if low <= value + delta <= high else value - delta

    return replace(
        victim,
        timestamp_ms=within(victim.timestamp_ms, shift(MAX_TIMESTAMP_SHIFT_MS), 0, 2**64 - 1),
        lat_udeg=within(victim.lat_udeg, shift(MAX_LOCATION_SHIFT_UDEG), -LAT_LIMIT_UDEG, LAT_LIMIT_UDEG),
        lon_udeg=within(victim.lon_udeg, shift(MAX_LOCATION_SHIFT_UDEG), -LON_LIMIT_UDEG, LON_LIMIT_UDEG),
    )


def _spoofing_clone(scenario: AttackScenario, ledger: IdentityLedger) -> list[AttackVerdict]:
    """Clone the weak UE's IMEI+MAC; compare the identity-derived key and the IMEI+MAC baseline key."""
    victim = order_weakest_first(scenario.ues)[0]
    victim_key = crypto.derive_private_key(victim.identity)
    victim_public = crypto.derive_public_key(victim_key).to_bytes()
    victim_baseline = crypto.derive_baseline_key(victim.identity)
    rng = np.random.default_rng([scenario.seed, 2])

    blocked = baseline_blocked = 0
    for trial in range(scenario.trials):
        clone = perturb_identity(victim.identity, rng)
        distinct_key = crypto.derive_private_key(clone) != victim_key
        try:
            record = RegistrationRecord(f"clone-{trial}", victim_public, clone.timestamp_ms)
            register_public_key(ledger, record)
            rejected = False
        except DuplicateKey:
            rejected = True
        blocked += distinct_key and rejected
        baseline_blocked += crypto.derive_baseline_key(clone) != victim_baseline

    full_clone = DeviceIdentity.from_dict(victim.identity.to_dict())
    full_clone_matches = crypto.derive_private_key(full_clone) == victim_key
    notes = [f"victim {victim.ue_id}; clone keys differ and the ledger rejected the victim's key"]
    if full_clone_matches:
        notes.append("a clone holding the full identity (timestamp and location) derives the victim's key")
    kind = AdversaryKind.SPOOFING_CLONE.value
    secure = AttackVerdict(kind, Scheme.SECURE.value, scenario.trials, blocked, notes)
    baseline = AttackVerdict(
        kind,
        BASELINE_SCHEME,
        scenario.trials,
        baseline_blocked,
        ["IMEI+MAC key is reproduced from the cloned IMEI and MAC alone"],
    )
    return [secure, baseline]


def identity_leak_check(
    ledger: IdentityLedger | None, identities: Sequence[DeviceIdentity], scheme: str
) -> AttackVerdict:
    """No serialized block may carry a registrant's raw IMEI or MAC."""
    if ledger is None:
        return AttackVerdict(IDENTITY_LEAK, scheme, 0, 0, ["no identity registry in this scheme"])
    serialized = [block.to_bytes() for block in ledger.blocks]
    clean = sum(
        not any(identity.imei.encode("ascii") in data or identity.mac in data for data in serialized)
        for identity in identities
    )
    notes = ["ledger holds ue_id, public key and registration time"]
    return AttackVerdict(IDENTITY_LEAK, scheme, len(identities), clean, notes)


def run_attack_suite(profiles: Sequence[AdversaryProfile], scenario: AttackScenario) -> AttackSuiteReport:
    """Run every requested adversary; verdicts are data, never exceptions."""
    report = AttackSuiteReport(scheme=scenario.scheme.value, seed=scenario.seed)
    reference = run_session(
        scenario.ues, scenario.alloc, scenario.noise_sigma, scenario.seed, scheme=scenario.scheme
    )

    for profile in profiles:
        if profile.kind is AdversaryKind.EAVESDROPPER:
            report.verdicts.append(_eavesdropper(scenario))
        elif profile.kind is AdversaryKind.CROSS_USER_READER:
            report.verdicts.append(_cross_user_reader(scenario))
        elif profile.kind is AdversaryKind.SPOOFING_CLONE:
            if reference.ledger is None:
                notes = ["no key material to clone"]
                report.verdicts.append(AttackVerdict(profile.kind.value, scenario.scheme.value, 0, 0, notes))
            else:
                report.verdicts.extend(_spoofing_clone(scenario, reference.ledger))

    report.verdicts.append(
        identity_leak_check(reference.ledger, [ue.identity for ue in scenario.ues], scenario.scheme.value)
    )
    for verdict in report.verdicts:
        marker = "✅" if verdict.outcome == "blocked" else "❌"
        logger.info(f"{marker} {verdict.test_id}: {verdict.blocked}/{verdict.trials} blocked")
    return report


def default_profiles() -> list[AdversaryProfile]:
    return [AdversaryProfile.default(kind) for kind in AdversaryKind]
