import re
from dataclasses import dataclass
from dataclasses import field

from src.errors import MalformedIdentity
from src.errors import MalformedRecord

IMEI_LENGTH = 15
MAC_LENGTH = 6
COMPRESSED_POINT_LENGTH = 33
HASH_LENGTH = 32

LAT_LIMIT_UDEG = 90_000_000
LON_LIMIT_UDEG = 180_000_000
_U64_MAX = 2**64 - 1
_I64_MIN = -(2**63)
_I64_MAX = 2**63 - 1

_MAC_PATTERN = re.compile(r"^[0-9a-fA-F]{2}(:[0-9a-fA-F]{2}){5}$")


def parse_mac(text: str) -> bytes:
    """Parse a colon-separated MAC address such as ``00:11:22:33:44:55``."""
    if not _MAC_PATTERN.match(text):
        raise MalformedIdentity(f"MAC address must be six colon-separated hex octets, got {text!r}")
    return bytes.fromhex(text.replace(":", ""))


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


@dataclass(frozen=True)
class DeviceIdentity:
    imei: str
    mac: bytes
    timestamp_ms: int  # milliseconds since Unix epoch
    lat_udeg: int  # micro-degrees
    lon_udeg: int

    def validate(self) -> None:
        if not isinstance(self.imei, str) or len(self.imei) != IMEI_LENGTH:
            raise MalformedIdentity(f"IMEI must have exactly {IMEI_LENGTH} digits, got {self.imei!r}")
        if not (self.imei.isascii() and self.imei.isdigit()):
            raise MalformedIdentity(f"IMEI must be ASCII digits only, got {self.imei!r}")
        if not isinstance(self.mac, bytes) or len(self.mac) != MAC_LENGTH:
            raise MalformedIdentity(f"MAC must be {MAC_LENGTH} bytes")
        if not 0 <= self.timestamp_ms <= _U64_MAX:
            raise MalformedIdentity(f"timestamp_ms out of unsigned 64-bit range: {self.timestamp_ms}")
        if not -LAT_LIMIT_UDEG <= self.lat_udeg <= LAT_LIMIT_UDEG:
            raise MalformedIdentity(f"latitude out of range: {self.lat_udeg} µdeg")
        if not -LON_LIMIT_UDEG <= self.lon_udeg <= LON_LIMIT_UDEG:
            raise MalformedIdentity(f"longitude out of range: {self.lon_udeg} µdeg")

    def to_dict(self) -> dict:
        return {
            "imei": self.imei,
            "mac": format_mac(self.mac),
            "timestamp_ms": self.timestamp_ms,
            "lat_udeg": self.lat_udeg,
            "lon_udeg": self.lon_udeg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceIdentity":
        mac = data["mac"]
        return cls(
            imei=str(data["imei"]),
            mac=parse_mac(mac) if isinstance(mac, str) else bytes(mac),
            timestamp_ms=int(data["timestamp_ms"]),
            lat_udeg=int(data["lat_udeg"]),
            lon_udeg=int(data["lon_udeg"]),
        )


@dataclass(frozen=True)
class RegistrationRecord:
    ue_id: str
    public_key: bytes  # compressed EC point, empty only for the genesis sentinel
    registered_at_ms: int

    def canonical_bytes(self) -> bytes:
        """ue_id length (2 bytes) ‖ ue_id UTF-8 ‖ public_key ‖ registered_at_ms (8 bytes), all big-endian."""
        encoded_id = self.ue_id.encode("utf-8")
        if len(encoded_id) > 0xFFFF:
            raise MalformedRecord("ue_id longer than 65535 bytes")
        return (
            len(encoded_id).to_bytes(2, "big")
            + encoded_id
            + self.public_key
            + self.registered_at_ms.to_bytes(8, "big")
        )

    @property
    def is_sentinel(self) -> bool:
        return self.ue_id == "" and self.public_key == b""

    def to_dict(self) -> dict:
        return {
            "ue_id": self.ue_id,
            "public_key": self.public_key.hex(),
            "registered_at_ms": self.registered_at_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegistrationRecord":
        return cls(
            ue_id=data["ue_id"],
            public_key=bytes.fromhex(data["public_key"]),
            registered_at_ms=int(data["registered_at_ms"]),
        )


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    payload: RegistrationRecord
    block_hash: bytes

    def to_bytes(self) -> bytes:
        """Binary form: index (8) ‖ prev_hash (32) ‖ canonical payload ‖ block_hash (32)."""
        return (
            self.index.to_bytes(8, "big") + self.prev_hash + self.payload.canonical_bytes() + self.block_hash
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        fixed = 8 + HASH_LENGTH + 2
        if len(data) < fixed + 8 + HASH_LENGTH:
            raise MalformedRecord(f"block too short: {len(data)} bytes")
        index = int.from_bytes(data[:8], "big")
        prev_hash = data[8 : 8 + HASH_LENGTH]
        id_length = int.from_bytes(data[8 + HASH_LENGTH : fixed], "big")
        key_length = len(data) - fixed - id_length - 8 - HASH_LENGTH
        if key_length not in (0, COMPRESSED_POINT_LENGTH):
            raise MalformedRecord(f"payload layout inconsistent (public key length {key_length})")
        try:
            ue_id = data[fixed : fixed + id_length].decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedRecord(f"ue_id is not valid UTF-8: {e}") from e
        cursor = fixed + id_length
        public_key = data[cursor : cursor + key_length]
        cursor += key_length
        registered_at_ms = int.from_bytes(data[cursor : cursor + 8], "big")
        block_hash = data[cursor + 8 :]
        return cls(
            index=index,
            prev_hash=prev_hash,
            payload=RegistrationRecord(ue_id=ue_id, public_key=public_key, registered_at_ms=registered_at_ms),
            block_hash=block_hash,
        )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "prev_hash": self.prev_hash.hex(),
            "payload": self.payload.to_dict(),
            "block_hash": self.block_hash.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Block":
        try:
            return cls(
                index=int(data["index"]),
                prev_hash=bytes.fromhex(data["prev_hash"]),
                payload=RegistrationRecord.from_dict(data["payload"]),
                block_hash=bytes.fromhex(data["block_hash"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(f"Invalid block record: {e}") from e


@dataclass
class BERReport:
    snr_db: float
    noise_sigma: float
    trials: int
    bits: int
    bit_errors_strong: int
    bit_errors_strong_genie: int
    bit_errors_weak: int
    analytic_strong: float  # genie-aided: Q(h_s·√p_s/σ)
    analytic_strong_sic: float  # hard SIC with error propagation
    analytic_weak: float
    genie_sic: bool = False

    @property
    def ber_strong(self) -> float:
        """Strong-user BER of the receiver selected by ``genie_sic``."""
        errors = self.bit_errors_strong_genie if self.genie_sic else self.bit_errors_strong
        return errors / self.bits if self.bits else 0.0

    @property
    def ber_strong_sic(self) -> float:
        return self.bit_errors_strong / self.bits if self.bits else 0.0

    @property
    def ber_strong_genie(self) -> float:
        return self.bit_errors_strong_genie / self.bits if self.bits else 0.0

    @property
    def ber_weak(self) -> float:
        return self.bit_errors_weak / self.bits if self.bits else 0.0

    def to_dict(self) -> dict:
        return {
            "snr_db": self.snr_db,
            "trials": self.trials,
            "ber_strong": self.ber_strong,
            "ber_weak": self.ber_weak,
            "analytic_strong": self.analytic_strong if self.genie_sic else self.analytic_strong_sic,
            "analytic_weak": self.analytic_weak,
        }

    def to_full_dict(self) -> dict:
        return {
            **self.to_dict(),
            "noise_sigma": self.noise_sigma,
            "bits": self.bits,
            "bit_errors_strong": self.bit_errors_strong,
            "bit_errors_strong_genie": self.bit_errors_strong_genie,
            "bit_errors_weak": self.bit_errors_weak,
            "ber_strong_sic": self.ber_strong_sic,
            "ber_strong_genie": self.ber_strong_genie,
            "analytic_strong_genie": self.analytic_strong,
            "analytic_strong_sic": self.analytic_strong_sic,
            "genie_sic": self.genie_sic,
        }


@dataclass
class AttackVerdict:
    kind: str  # eavesdropper | cross_user_reader | spoofing_clone
    scheme: str  # secure | legacy
    trials: int
    blocked: int
    notes: list[str] = field(default_factory=list)

    @property
    def outcome(self) -> str:
        return "blocked" if self.trials > 0 and self.blocked == self.trials else "succeeded"

    @property
    def test_id(self) -> str:
        return f"attack:{self.kind}:{self.scheme}"

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "kind": self.kind,
            "scheme": self.scheme,
            "trials": self.trials,
            "blocked": self.blocked,
            "outcome": self.outcome,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackVerdict":
        return cls(
            kind=data["kind"],
            scheme=data["scheme"],
            trials=int(data["trials"]),
            blocked=int(data["blocked"]),
            notes=list(data.get("notes", [])),
        )


@dataclass
class FeatureRow:
    feature: str
    proposed: str  # what the executed scheme showed
    baseline: str  # what the IMEI+MAC / legacy comparison offers
    verdict: str  # pass | fail
    test_ids: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "proposed": self.proposed,
            "baseline": self.baseline,
            "verdict": self.verdict,
            "test_ids": ";".join(self.test_ids),
            "artifacts": ";".join(self.artifacts),
        }
