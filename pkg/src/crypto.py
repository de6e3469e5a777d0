"""Identity-derived secp256k1 keys and the two encryption layers of the handover scheme.

Layer 1 encrypts a payload to a UE public key (ephemeral ECDH + SHA-256 + AES-256-GCM).
Layer 2 encrypts the serialized layer-1 ciphertext under a symmetric key derived from
the base-station private key PR_B, which registered UEs hold in their KBox.
"""

import hashlib
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from dataclasses import field
from enum import Enum
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from src.datamodels import COMPRESSED_POINT_LENGTH
from src.datamodels import DeviceIdentity
from src.errors import AuthFailure
from src.errors import InvalidScalar
from src.errors import MalformedCiphertext
from src.errors import WrongKeyRole

logger = logging.getLogger(__name__)

Entropy = Callable[[int], bytes]

NONCE_LENGTH = 12
TAG_LENGTH = 16
IDENTITY_LENGTH = 45
LAYER2_LABEL = b"layer2"
KEY_DERIVATION_INPUTS = ("imei", "mac", "timestamp", "spatial")
BASELINE_KEY_INPUTS = ("imei", "mac")


@dataclass(frozen=True)
class CurveParams:
    name: str
    p: int
    a: int
    b: int
    gx: int
    gy: int
    n: int
    h: int

    @property
    def generator(self) -> tuple[int, int]:
        return self.gx, self.gy

    def contains(self, x: int, y: int) -> bool:
        """True if (x, y) satisfies y² ≡ x³ + a·x + b (mod p)."""
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    def ec_curve(self) -> ec.EllipticCurve:
        return _CURVES[self.name]()


_CURVES = {"secp256k1": ec.SECP256K1}

SECP256K1 = CurveParams(
    name="secp256k1",
    p=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F,
    a=0,
    b=7,
    gx=0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    gy=0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
    n=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
    h=1,
)


class KeyRole(str, Enum):
    UE = "ue"
    BASE_STATION = "base-station"


@dataclass(frozen=True)
class PrivateKey:
    scalar: int
    role: KeyRole = KeyRole.UE

    def to_hex(self) -> str:
        return f"{self.scalar:064x}"


@dataclass(frozen=True)
class PublicKey:
    x: int
    y: int

    def to_bytes(self) -> bytes:
        """SEC1 compressed encoding, 33 bytes."""
        return bytes([0x02 | (self.y & 1)]) + self.x.to_bytes(32, "big")

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, data: bytes, curve: CurveParams = SECP256K1) -> "PublicKey":
        if len(data) != COMPRESSED_POINT_LENGTH or data[0] not in (0x02, 0x03):
            raise MalformedCiphertext(f"expected a {COMPRESSED_POINT_LENGTH}-byte compressed point")
        try:
            key = ec.EllipticCurvePublicKey.from_encoded_point(curve.ec_curve(), data)
        except ValueError as e:
            raise MalformedCiphertext(f"not a point on {curve.name}: {e}") from e
        numbers = key.public_numbers()
        return cls(x=numbers.x, y=numbers.y)

    def to_cryptography(self, curve: CurveParams = SECP256K1) -> ec.EllipticCurvePublicKey:
        return ec.EllipticCurvePublicNumbers(self.x, self.y, curve.ec_curve()).public_key()


@dataclass(frozen=True)
class Layer1Ciphertext:
    ephemeral_pk: bytes
    nonce: bytes
    body: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        return self.ephemeral_pk + self.nonce + self.body + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "Layer1Ciphertext":
        header = COMPRESSED_POINT_LENGTH + NONCE_LENGTH
        if len(data) < header + TAG_LENGTH:
            raise MalformedCiphertext(f"layer-1 ciphertext too short: {len(data)} bytes")
        return cls(
            ephemeral_pk=data[:COMPRESSED_POINT_LENGTH],
            nonce=data[COMPRESSED_POINT_LENGTH:header],
            body=data[header:-TAG_LENGTH],
            auth_tag=data[-TAG_LENGTH:],
        )


@dataclass(frozen=True)
class Layer2Ciphertext:
    nonce: bytes
    body: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "Layer2Ciphertext":
        if len(data) < NONCE_LENGTH + TAG_LENGTH:
            raise MalformedCiphertext(f"layer-2 ciphertext too short: {len(data)} bytes")
        return cls(
            nonce=data[:NONCE_LENGTH],
            body=data[NONCE_LENGTH:-TAG_LENGTH],
            auth_tag=data[-TAG_LENGTH:],
        )


@dataclass(frozen=True)
class KBox:
    """Credential store on a UE: its own key pair and, once registered, PR_B."""

    ue_id: str
    own_private: PrivateKey
    own_public: PublicKey
    bs_private: PrivateKey | None = field(default=None, repr=False)

    def __post_init__(self):
        if derive_public_key(self.own_private) != self.own_public:
            raise InvalidScalar(f"KBox for {self.ue_id}: public key does not match private scalar")

    @property
    def is_registered(self) -> bool:
        return self.bs_private is not None


def serialize_identity(identity: DeviceIdentity) -> bytes:
    """imei (15) ‖ mac (6) ‖ timestamp_ms (8) ‖ lat_udeg (8) ‖ lon_udeg (8), big-endian, 45 bytes."""
    identity.validate()
    return (
        identity.imei.encode("ascii")
        + identity.mac
        + identity.timestamp_ms.to_bytes(8, "big")
        + identity.lat_udeg.to_bytes(8, "big", signed=True)
        + identity.lon_udeg.to_bytes(8, "big", signed=True)
    )


def derive_private_key(identity: DeviceIdentity, curve: CurveParams = SECP256K1) -> PrivateKey:
    digest = hashlib.sha256(serialize_identity(identity)).digest()
    scalar = int.from_bytes(digest, "big") % (curve.n - 1) + 1
    return PrivateKey(scalar=scalar, role=KeyRole.UE)


def _check_scalar(private_key: PrivateKey, curve: CurveParams) -> None:
    if not 1 <= private_key.scalar <= curve.n - 1:
        raise InvalidScalar(f"scalar must lie in [1, n-1] for {curve.name}")


def _to_cryptography(private_key: PrivateKey, curve: CurveParams) -> ec.EllipticCurvePrivateKey:
    _check_scalar(private_key, curve)
    return ec.derive_private_key(private_key.scalar, curve.ec_curve())


def derive_public_key(private_key: PrivateKey, curve: CurveParams = SECP256K1) -> PublicKey:
    numbers = _to_cryptography(private_key, curve).public_key().public_numbers()
    return PublicKey(x=numbers.x, y=numbers.y)


def random_scalar(entropy: Entropy = os.urandom, curve: CurveParams = SECP256K1) -> int:
    # 40 bytes keep the modulo bias below 2^-64
    return int.from_bytes(entropy(40), "big") % (curve.n - 1) + 1


def generate_base_station_key(entropy: Entropy = os.urandom, curve: CurveParams = SECP256K1) -> PrivateKey:
    return PrivateKey(scalar=random_scalar(entropy, curve), role=KeyRole.BASE_STATION)


def _seal(key: bytes, nonce: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
    sealed = AESGCM(key).encrypt(nonce, plaintext, None)
    return sealed[:-TAG_LENGTH], sealed[-TAG_LENGTH:]


def _open(key: bytes, nonce: bytes, body: bytes, auth_tag: bytes) -> bytes:
    if len(nonce) != NONCE_LENGTH or len(auth_tag) != TAG_LENGTH:
        raise MalformedCiphertext("nonce must be 12 bytes and tag 16 bytes")
    try:
        return AESGCM(key).decrypt(nonce, body + auth_tag, None)
    except InvalidTag as e:
        raise AuthFailure("authentication tag mismatch") from e


def _shared_key(private_key: ec.EllipticCurvePrivateKey, peer: PublicKey, curve: CurveParams) -> bytes:
    # ECDH yields the x-coordinate of the shared point as 32 big-endian bytes
    shared_x = private_key.exchange(ec.ECDH(), peer.to_cryptography(curve))
    return hashlib.sha256(shared_x).digest()


def encrypt_layer1(
    public_key: PublicKey,
    plaintext: bytes,
    entropy: Entropy = os.urandom,
    curve: CurveParams = SECP256K1,
) -> Layer1Ciphertext:
    ephemeral = ec.derive_private_key(random_scalar(entropy, curve), curve.ec_curve())
    ephemeral_pk = ephemeral.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )
    nonce = entropy(NONCE_LENGTH)
    body, auth_tag = _seal(_shared_key(ephemeral, public_key, curve), nonce, plaintext)
    return Layer1Ciphertext(ephemeral_pk=ephemeral_pk, nonce=nonce, body=body, auth_tag=auth_tag)


def decrypt_layer1(
    private_key: PrivateKey, ciphertext: Layer1Ciphertext, curve: CurveParams = SECP256K1
) -> bytes:
    ephemeral = PublicKey.from_bytes(ciphertext.ephemeral_pk, curve)
    key = _shared_key(_to_cryptography(private_key, curve), ephemeral, curve)
    return _open(key, ciphertext.nonce, ciphertext.body, ciphertext.auth_tag)


def layer2_key(bs_key: PrivateKey, curve: CurveParams = SECP256K1) -> bytes:
    _check_scalar(bs_key, curve)
    return hashlib.sha256(LAYER2_LABEL + bs_key.scalar.to_bytes(32, "big")).digest()


def encrypt_layer2(bs_key: PrivateKey, wrapped: bytes, entropy: Entropy = os.urandom) -> Layer2Ciphertext:
    if bs_key.role is not KeyRole.BASE_STATION:
        raise WrongKeyRole("layer-2 encryption requires the base-station key PR_B")
    nonce = entropy(NONCE_LENGTH)
    body, auth_tag = _seal(layer2_key(bs_key), nonce, wrapped)
    return Layer2Ciphertext(nonce=nonce, body=body, auth_tag=auth_tag)


def decrypt_layer2(
    bs_key: PrivateKey, ciphertext: Layer2Ciphertext, expected_length: int | None = None
) -> bytes:
    """Open a layer-2 segment.

    ``expected_length`` is the wire length announced out-of-band (the frame control header); a segment
    of any other length is malformed. Without it, a truncated body that still frames as
    nonce ‖ body ‖ tag fails authentication instead.
    """
    actual = NONCE_LENGTH + len(ciphertext.body) + TAG_LENGTH
    if expected_length is not None and actual != expected_length:
        raise MalformedCiphertext(f"layer-2 segment is {actual} bytes, header announced {expected_length}")
    return _open(layer2_key(bs_key), ciphertext.nonce, ciphertext.body, ciphertext.auth_tag)


def derive_baseline_key(identity: DeviceIdentity) -> bytes:
    """Symmetric key of the IMEI+MAC comparison scheme: SHA-256(imei ‖ mac)."""
    identity.validate()
    return hashlib.sha256(identity.imei.encode("ascii") + identity.mac).digest()


def save_key_file(path: Path, private_key: PrivateKey, curve: CurveParams = SECP256K1) -> PublicKey:
    public_key = derive_public_key(private_key, curve)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        f'curve = "{curve.name}"\n'
        f'role = "{private_key.role.value}"\n'
        f'private = "{private_key.to_hex()}"\n'
        f'public = "{public_key.to_hex()}"\n'
    )
    logger.info(f"🔐 Wrote {private_key.role.value} key file {path}")
    return public_key


def load_key_file(path: Path, curve: CurveParams = SECP256K1) -> tuple[PrivateKey, PublicKey]:
    try:
        with path.open("rb") as f:
            record = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise InvalidScalar(f"key file {path} is not valid TOML: {e}") from e
    if record.get("curve") != curve.name:
        raise InvalidScalar(f"key file {path} is for curve {record.get('curve')!r}, expected {curve.name}")
    private_hex, public_hex = record.get("private", ""), record.get("public", "")
    if not (isinstance(private_hex, str) and isinstance(public_hex, str)):
        raise InvalidScalar(f"key file {path} must store private and public as hex strings")
    if len(private_hex) != 64 or len(public_hex) != 66:
        raise InvalidScalar(f"key file {path} must hold a 64-hex scalar and a 66-hex compressed point")
    try:
        scalar, encoded = int(private_hex, 16), bytes.fromhex(public_hex)
    except (TypeError, ValueError) as e:
        raise InvalidScalar(f"key file {path} holds non-hex key material") from e
    try:
        role = KeyRole(record.get("role", KeyRole.UE.value))
    except ValueError as e:
        raise InvalidScalar(f"key file {path} has unknown role {record.get('role')!r}") from e
    private_key = PrivateKey(scalar=scalar, role=role)
    public_key = PublicKey.from_bytes(encoded, curve)
    if derive_public_key(private_key, curve) != public_key:
        raise InvalidScalar(f"key file {path}: public key does not match private scalar")
    return private_key, public_key
