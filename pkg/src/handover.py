"""Entity state machines for the secure and legacy NOMA data handover.

UEs, the bNodeB, the packet gateway and BIMS exchange ProtocolMessages through a
single-threaded EventLoop; every delivered message is appended to a SessionTrace.
"""

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass
from dataclasses import field
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Mapping
from typing import Sequence

import numpy as np

from src import crypto
from src.crypto import Entropy
from src.crypto import KBox
from src.crypto import Layer1Ciphertext
from src.crypto import Layer2Ciphertext
from src.crypto import PrivateKey
from src.crypto import PublicKey
from src.datamodels import DeviceIdentity
from src.datamodels import RegistrationRecord
from src.errors import AuthFailure
from src.errors import InvalidAllocation
from src.errors import Layer1AuthFailure
from src.errors import Layer2AuthFailure
from src.errors import LedgerError
from src.errors import MalformedCiphertext
from src.errors import NomaHandoverError
from src.errors import NotFound
from src.errors import ProtocolError
from src.ledger import IdentityLedger
from src.ledger import ledger_init
from src.ledger import lookup_public_key
from src.ledger import register_public_key
from src.noma_phy import ChannelRealization
from src.noma_phy import PowerAllocation
from src.noma_phy import SuperposedSignal
from src.noma_phy import apply_channel
from src.noma_phy import bits_to_bytes
from src.noma_phy import bytes_to_bits
from src.noma_phy import decode_weak_direct
from src.noma_phy import modulate
from src.noma_phy import sic_decode_layers
from src.noma_phy import superpose_layers

logger = logging.getLogger(__name__)

BNODEB_ID = "bNodeB"
PGW_ID = "PGW"
BIMS_ID = "BIMS"
BROADCAST = "*"


class MessageKind(str, Enum):
    REGISTRATION_REQUEST = "RegistrationRequest"
    REGISTRATION_ACK = "RegistrationAck"
    DATA_REQUEST = "DataRequest"
    DATA_FORWARD = "DataForward"
    PK_REQUEST = "PKRequest"
    PK_RESPONSE = "PKResponse"
    ENCRYPTED_DELIVERY = "EncryptedDelivery"
    BROADCAST_FRAME = "BroadcastFrame"


class Scheme(str, Enum):
    SECURE = "secure"
    LEGACY = "legacy"


class ReceiverRole(str, Enum):
    STRONG = "strong"
    WEAK = "weak"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: str
    receiver: str
    body: dict  # JSON-safe summary written to the trace
    attachment: Any = field(default=None, compare=False, repr=False)  # in-memory object carried along

    def to_dict(self, seq: int) -> dict:
        return {
            "seq": seq,
            "kind": self.kind.value,
            "sender": self.sender,
            "receiver": self.receiver,
            "body": self.body,
        }


@dataclass(frozen=True)
class UserSlot:
    ue_id: str
    layer: int  # 0 = weakest user, largest power share
    payload_bit_length: int


@dataclass(frozen=True)
class FrameControl:
    """Out-of-band header: per-user slots, power split and symbol count."""

    slots: tuple[UserSlot, ...]
    allocation: PowerAllocation
    symbol_count: int

    def slot_of(self, ue_id: str) -> UserSlot:
        for slot in self.slots:
            if slot.ue_id == ue_id:
                return slot
        raise ProtocolError(f"{ue_id} has no slot in this frame")

    def role_of(self, ue_id: str) -> ReceiverRole:
        return ReceiverRole.WEAK if self.slot_of(ue_id).layer == 0 else ReceiverRole.STRONG

    def padding_of(self, ue_id: str) -> int:
        return self.symbol_count - self.slot_of(ue_id).payload_bit_length

    def to_dict(self) -> dict:
        return {
            "slots": [
                {
                    "ue_id": slot.ue_id,
                    "layer": slot.layer,
                    "payload_bit_length": slot.payload_bit_length,
                    "padding_bits": self.symbol_count - slot.payload_bit_length,
                }
                for slot in self.slots
            ],
            "power_total": self.allocation.total,
            "power_levels": list(self.allocation.levels),
            "symbol_count": self.symbol_count,
        }


@dataclass(frozen=True)
class BroadcastFrame:
    control: FrameControl
    data: SuperposedSignal

    def to_dict(self) -> dict:
        return {
            **self.control.to_dict(),
            "symbols_sha256": hashlib.sha256(self.data.symbols.tobytes()).hexdigest(),
        }


@dataclass
class UEOutcome:
    ue_id: str
    role: str
    recovered: bytes | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.recovered is not None and self.error is None

    def to_dict(self) -> dict:
        return {
            "ue_id": self.ue_id,
            "role": self.role,
            "status": "recovered" if self.ok else "failed",
            "payload_length": len(self.recovered) if self.recovered is not None else None,
            "payload_sha256": (
                hashlib.sha256(self.recovered).hexdigest() if self.recovered is not None else None
            ),
            "error": self.error,
        }


@dataclass
class SessionTrace:
    scheme: str
    seed: int
    messages: list[dict] = field(default_factory=list)
    outcomes: dict[str, UEOutcome] = field(default_factory=dict)
    observations: dict[str, str] = field(default_factory=dict)

    def record(self, message: ProtocolMessage) -> None:
        self.messages.append(message.to_dict(len(self.messages)))

    def kinds(self) -> list[str]:
        return [m["kind"] for m in self.messages]

    def to_jsonl(self) -> str:
        lines = [{"seq": -1, "kind": "Session", "scheme": self.scheme, "seed": self.seed}]
        lines.extend(self.messages)
        seq = len(self.messages)
        for ue_id in sorted(self.outcomes):
            lines.append({"seq": seq, "kind": "Outcome", **self.outcomes[ue_id].to_dict()})
            seq += 1
        for key in sorted(self.observations):
            lines.append({"seq": seq, "kind": "Observation", "key": key, "value": self.observations[key]})
            seq += 1
        return "\n".join(json.dumps(line, separators=(",", ":"), ensure_ascii=False) for line in lines) + "\n"

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


class AdversaryKind(str, Enum):
    EAVESDROPPER = "eavesdropper"
    CROSS_USER_READER = "cross_user_reader"
    SPOOFING_CLONE = "spoofing_clone"


_PERMITTED_KNOWLEDGE = {
    AdversaryKind.EAVESDROPPER: frozenset({"broadcast_frame", "frame_control"}),
    AdversaryKind.CROSS_USER_READER: frozenset({"broadcast_frame", "frame_control", "own_kbox", "pr_b"}),
    AdversaryKind.SPOOFING_CLONE: frozenset({"victim_imei", "victim_mac", "own_timestamp", "own_location"}),
}


@dataclass(frozen=True)
class AdversaryProfile:
    kind: AdversaryKind
    knowledge: frozenset[str]

    def __post_init__(self):
        extra = self.knowledge - _PERMITTED_KNOWLEDGE[self.kind]
        if extra:
            raise ProtocolError(f"{self.kind.value} may not hold {sorted(extra)}")

    @classmethod
    def default(cls, kind: AdversaryKind) -> "AdversaryProfile":
        return cls(kind=kind, knowledge=_PERMITTED_KNOWLEDGE[kind])


@dataclass(frozen=True)
class UESpec:
    ue_id: str
    identity: DeviceIdentity
    payload: bytes
    gain: float


def order_weakest_first(ues: Sequence[UESpec]) -> list[UESpec]:
    ordered = sorted(ues, key=lambda ue: ue.gain)
    if len({ue.gain for ue in ordered}) != len(ordered):
        raise ProtocolError("UE channel gains must be distinct to order the SIC layers")
    return ordered


def register_ue(
    ue_id: str,
    ue_identity: DeviceIdentity,
    ledger: IdentityLedger,
    bs_key: PrivateKey,
    registered_at_ms: int | None = None,
) -> KBox:
    """Derive the UE key pair, record the public key in BIMS, and hand out PR_B on acceptance."""
    own_private = crypto.derive_private_key(ue_identity)
    own_public = crypto.derive_public_key(own_private)
    record = RegistrationRecord(
        ue_id=ue_id,
        public_key=own_public.to_bytes(),
        registered_at_ms=ue_identity.timestamp_ms if registered_at_ms is None else registered_at_ms,
    )
    register_public_key(ledger, record)
    return KBox(ue_id=ue_id, own_private=own_private, own_public=own_public, bs_private=bs_key)


def encrypt_for_recipients(
    public_keys: Mapping[str, PublicKey], payloads: Mapping[str, bytes], entropy: Entropy
) -> dict[str, Layer1Ciphertext]:
    return {
        ue_id: crypto.encrypt_layer1(public_key, payloads[ue_id], entropy)
        for ue_id, public_key in public_keys.items()
    }


def pgw_prepare_payloads(
    requests: Sequence[str], ledger: IdentityLedger, payloads: Mapping[str, bytes], entropy: Entropy
) -> dict[str, Layer1Ciphertext]:
    """x_i = E_PK(M_i) for every requester; nothing is encrypted unless all are registered."""
    public_keys = {ue_id: lookup_public_key(ledger, ue_id) for ue_id in requests}
    return encrypt_for_recipients(public_keys, payloads, entropy)


def build_frame(segments: Sequence[tuple[str, bytes]], alloc: PowerAllocation) -> BroadcastFrame:
    """Modulate each user's bytes onto its power layer; ``segments`` are ordered weakest first."""
    if len(segments) < 2:
        raise ProtocolError("superposition requires at least two users")
    if len(segments) != alloc.num_users:
        raise InvalidAllocation(f"{alloc.num_users} power levels for {len(segments)} users")
    alloc.validate()
    streams = [bytes_to_bits(data) for _, data in segments]
    symbol_count = max(len(bits) for bits in streams)
    layers = [modulate(np.pad(bits, (0, symbol_count - len(bits)))) for bits in streams]
    slots = tuple(
        UserSlot(ue_id=ue_id, layer=layer, payload_bit_length=len(bits))
        for layer, ((ue_id, _), bits) in enumerate(zip(segments, streams))
    )
    control = FrameControl(slots=slots, allocation=alloc, symbol_count=symbol_count)
    return BroadcastFrame(control=control, data=superpose_layers(layers, alloc))


def bnodeb_broadcast(
    x_per_ue: Sequence[tuple[str, Layer1Ciphertext]],
    bs_key: PrivateKey,
    alloc: PowerAllocation,
    entropy: Entropy,
) -> BroadcastFrame:
    """c_i = E_PRB(x_i) per user, then pad, modulate and superpose weakest-first."""
    if len(x_per_ue) < 2:
        raise ProtocolError("superposition requires at least two users")
    segments = [
        (ue_id, crypto.encrypt_layer2(bs_key, x.to_bytes(), entropy).to_bytes()) for ue_id, x in x_per_ue
    ]
    return build_frame(segments, alloc)


def receive_layer_bits(
    frame: BroadcastFrame, receiver_id: str, ch: ChannelRealization, rng: np.random.Generator, target_id: str
) -> bytes:
    """Channel + detection at ``receiver_id``; returns the unpadded bytes of ``target_id``'s slot."""
    control = frame.control
    own, target = control.slot_of(receiver_id), control.slot_of(target_id)
    gain = ch.gains[own.layer]
    y = apply_channel(frame.data, ch, gain, rng)
    if target.layer == 0:
        bits = decode_weak_direct(y, control.allocation, ch)
    else:
        # layers above the target are decoded, cancelled and discarded
        bits = sic_decode_layers(y, control.allocation, gain, depth=target.layer)[-1]
    return bits_to_bytes(bits[: target.payload_bit_length])


def ue_receive(
    frame: BroadcastFrame,
    kbox: KBox,
    ch: ChannelRealization,
    rng: np.random.Generator,
    target_id: str | None = None,
) -> bytes:
    """Demodulate/SIC, then D_PR(M*)^B with PR_B, then D_PR(M_i) with the UE's own key."""
    target = target_id or kbox.ue_id
    segment = receive_layer_bits(frame, kbox.ue_id, ch, rng, target)
    expected_length = frame.control.slot_of(target).payload_bit_length // 8
    if kbox.bs_private is None:
        raise Layer2AuthFailure(f"{kbox.ue_id} holds no PR_B")
    try:
        ciphertext = Layer2Ciphertext.from_bytes(segment)
        wrapped = crypto.decrypt_layer2(kbox.bs_private, ciphertext, expected_length)
    except (AuthFailure, MalformedCiphertext) as e:
        raise Layer2AuthFailure(f"layer-2 decryption failed at {kbox.ue_id}: {e}") from e
    try:
        return crypto.decrypt_layer1(kbox.own_private, Layer1Ciphertext.from_bytes(wrapped))
    except (AuthFailure, MalformedCiphertext) as e:
        raise Layer1AuthFailure(f"layer-1 decryption failed at {kbox.ue_id}: {e}") from e


def legacy_receive(
    frame: BroadcastFrame, receiver_id: str, ch: ChannelRealization, rng: np.random.Generator
) -> dict[str, bytes]:
    """Plaintext reception: the receiver's own payload plus every layer it decodes on the way."""
    control = frame.control
    own = control.slot_of(receiver_id)
    gain = ch.gains[own.layer]
    y = apply_channel(frame.data, ch, gain, rng)
    decoded = sic_decode_layers(y, control.allocation, gain, depth=own.layer)
    return {
        slot.ue_id: bits_to_bytes(decoded[slot.layer][: slot.payload_bit_length])
        for slot in control.slots
        if slot.layer <= own.layer
    }


class Entity:
    entity_id: str

    def handle(self, message: ProtocolMessage, outbox: list[ProtocolMessage]) -> None:
        raise NotImplementedError


class UserEquipment(Entity):
    def __init__(
        self,
        spec: UESpec,
        role: ReceiverRole,
        channel: ChannelRealization,
        rng: np.random.Generator,
        scheme: Scheme,
    ):
        self.entity_id = spec.ue_id
        self.spec = spec
        self.role = role
        self.channel = channel
        self.rng = rng
        self.scheme = scheme
        self.own_private = crypto.derive_private_key(spec.identity) if scheme is Scheme.SECURE else None
        self.kbox: KBox | None = None
        self.outcome: UEOutcome | None = None
        self.observed: dict[str, bytes] = {}

    def registration_request(self) -> ProtocolMessage:
        public_key = crypto.derive_public_key(self.own_private)
        return ProtocolMessage(
            MessageKind.REGISTRATION_REQUEST,
            self.entity_id,
            BIMS_ID,
            {"ue_id": self.entity_id, "public_key": public_key.to_hex()},
            attachment=RegistrationRecord(
                self.entity_id, public_key.to_bytes(), self.spec.identity.timestamp_ms
            ),
        )

    def data_request(self) -> ProtocolMessage:
        return ProtocolMessage(MessageKind.DATA_REQUEST, self.entity_id, BNODEB_ID, {"ue_id": self.entity_id})

    def handle(self, message: ProtocolMessage, outbox: list[ProtocolMessage]) -> None:
        if message.kind is MessageKind.REGISTRATION_ACK:
            if message.body.get("accepted"):
                self.kbox = KBox(
                    ue_id=self.entity_id,
                    own_private=self.own_private,
                    own_public=crypto.derive_public_key(self.own_private),
                    bs_private=message.attachment,
                )
            else:
                self.outcome = UEOutcome(self.entity_id, self.role.value, error=message.body.get("error"))
        elif message.kind is MessageKind.BROADCAST_FRAME:
            self._receive(message.attachment)

    def _receive(self, frame: BroadcastFrame) -> None:
        role = self.role.value
        try:
            if self.scheme is Scheme.SECURE:
                if self.kbox is None:
                    raise Layer2AuthFailure(f"{self.entity_id} never completed registration")
                recovered = ue_receive(frame, self.kbox, self.channel, self.rng)
            else:
                decoded = legacy_receive(frame, self.entity_id, self.channel, self.rng)
                recovered = decoded.pop(self.entity_id)
                self.observed = decoded
            self.outcome = UEOutcome(self.entity_id, role, recovered=recovered)
            logger.debug(f"📲 {self.entity_id} recovered {len(recovered)} bytes")
        except NomaHandoverError as e:
            self.outcome = UEOutcome(self.entity_id, role, error=f"{type(e).__name__}: {e}")
            logger.info(f"❌ {self.entity_id} failed: {type(e).__name__}")


class BNodeB(Entity):
    def __init__(
        self,
        user_order: Sequence[str],
        alloc: PowerAllocation,
        bs_key: PrivateKey | None,
        entropy: Entropy,
        scheme: Scheme,
    ):
        self.entity_id = BNODEB_ID
        self.user_order = list(user_order)
        self.alloc = alloc
        self.bs_key = bs_key
        self.entropy = entropy
        self.scheme = scheme
        self.frame: BroadcastFrame | None = None

    def handle(self, message: ProtocolMessage, outbox: list[ProtocolMessage]) -> None:
        if message.kind is MessageKind.REGISTRATION_ACK and message.sender == BIMS_ID:
            ue_id = message.body["ue_id"]
            # PR_B travels over the trusted registration channel only
            outbox.append(
                ProtocolMessage(
                    MessageKind.REGISTRATION_ACK,
                    self.entity_id,
                    ue_id,
                    {
                        "ue_id": ue_id,
                        "accepted": True,
                        "block_index": message.body["block_index"],
                        "pr_b": "delivered",
                    },
                    attachment=self.bs_key,
                )
            )
        elif message.kind is MessageKind.DATA_REQUEST:
            body = {"ue_id": message.body["ue_id"]}
            outbox.append(ProtocolMessage(MessageKind.DATA_FORWARD, self.entity_id, PGW_ID, body))
        elif message.kind in (MessageKind.ENCRYPTED_DELIVERY, MessageKind.DATA_FORWARD):
            self._broadcast(message.attachment, outbox)

    def _broadcast(self, per_ue: Mapping[str, Any], outbox: list[ProtocolMessage]) -> None:
        if self.scheme is Scheme.SECURE:
            ordered = [(ue_id, per_ue[ue_id]) for ue_id in self.user_order]
            self.frame = bnodeb_broadcast(ordered, self.bs_key, self.alloc, self.entropy)
        else:
            self.frame = build_frame([(ue_id, per_ue[ue_id]) for ue_id in self.user_order], self.alloc)
        body = self.frame.to_dict()
        frame_message = ProtocolMessage(
            MessageKind.BROADCAST_FRAME, self.entity_id, BROADCAST, body, attachment=self.frame
        )
        outbox.append(frame_message)


class PacketGateway(Entity):
    def __init__(self, payloads: Mapping[str, bytes], entropy: Entropy, scheme: Scheme):
        self.entity_id = PGW_ID
        self.payloads = dict(payloads)
        self.entropy = entropy
        self.scheme = scheme
        self.requests: list[str] = []
        self.refusal: str | None = None

    def handle(self, message: ProtocolMessage, outbox: list[ProtocolMessage]) -> None:
        if message.kind is MessageKind.DATA_FORWARD:
            self.requests.append(message.body["ue_id"])
            if len(self.requests) < len(self.payloads):
                return
            if self.scheme is Scheme.SECURE:
                body = {"ue_ids": list(self.requests)}
                outbox.append(ProtocolMessage(MessageKind.PK_REQUEST, self.entity_id, BIMS_ID, body))
            else:
                lengths = {ue_id: len(data) for ue_id, data in self.payloads.items()}
                body = {"encrypted": False, "lengths": lengths}
                forward = ProtocolMessage(
                    MessageKind.DATA_FORWARD, self.entity_id, BNODEB_ID, body, attachment=dict(self.payloads)
                )
                outbox.append(forward)
        elif message.kind is MessageKind.PK_RESPONSE:
            if "error" in message.body:
                self.refusal = message.body["error"]
                logger.info(f"⏭️ PGW refused the request: {self.refusal}")
                return
            ciphertexts = encrypt_for_recipients(message.attachment, self.payloads, self.entropy)
            body = {
                ue_id: {"length": len(x.to_bytes()), "sha256": hashlib.sha256(x.to_bytes()).hexdigest()}
                for ue_id, x in ciphertexts.items()
            }
            outbox.append(
                ProtocolMessage(
                    MessageKind.ENCRYPTED_DELIVERY, self.entity_id, BNODEB_ID, body, attachment=ciphertexts
                )
            )


class IdentityServer(Entity):
    def __init__(self, ledger: IdentityLedger):
        self.entity_id = BIMS_ID
        self.ledger = ledger

    def handle(self, message: ProtocolMessage, outbox: list[ProtocolMessage]) -> None:
        if message.kind is MessageKind.REGISTRATION_REQUEST:
            record = message.attachment
            try:
                block = register_public_key(self.ledger, record)
            except LedgerError as e:
                outbox.append(
                    ProtocolMessage(
                        MessageKind.REGISTRATION_ACK,
                        self.entity_id,
                        record.ue_id,
                        {"ue_id": record.ue_id, "accepted": False, "error": f"{type(e).__name__}: {e}"},
                    )
                )
                return
            outbox.append(
                ProtocolMessage(
                    MessageKind.REGISTRATION_ACK,
                    self.entity_id,
                    BNODEB_ID,
                    {"ue_id": record.ue_id, "accepted": True, "block_index": block.index},
                )
            )
        elif message.kind is MessageKind.PK_REQUEST:
            try:
                keys = {ue_id: lookup_public_key(self.ledger, ue_id) for ue_id in message.body["ue_ids"]}
            except NotFound as e:
                refusal = ProtocolMessage(MessageKind.PK_RESPONSE, self.entity_id, PGW_ID, {"error": str(e)})
                outbox.append(refusal)
                return
            body = {"public_keys": {ue_id: key.to_hex() for ue_id, key in keys.items()}}
            response = ProtocolMessage(MessageKind.PK_RESPONSE, self.entity_id, PGW_ID, body, attachment=keys)
            outbox.append(response)


class EventLoop:
    """Deliver queued messages in FIFO order; broadcast messages fan out to every UE."""

    def __init__(self, entities: Sequence[Entity], trace: SessionTrace, ue_ids: Sequence[str]):
        self.entities = {entity.entity_id: entity for entity in entities}
        self.trace = trace
        self.ue_ids = list(ue_ids)
        self.queue: deque[ProtocolMessage] = deque()

    def post(self, message: ProtocolMessage) -> None:
        self.queue.append(message)

    def run(self, max_steps: int = 10_000) -> int:
        steps = 0
        while self.queue:
            if steps >= max_steps:
                raise ProtocolError(f"event loop exceeded {max_steps} deliveries")
            message = self.queue.popleft()
            self.trace.record(message)
            receivers = self.ue_ids if message.receiver == BROADCAST else [message.receiver]
            for receiver in receivers:
                outbox: list[ProtocolMessage] = []
                self.entities[receiver].handle(message, outbox)
                self.queue.extend(outbox)
            steps += 1
        return steps


@dataclass
class SessionResult:
    trace: SessionTrace
    ledger: IdentityLedger | None
    kboxes: dict[str, KBox]
    bs_key: PrivateKey | None
    frame: BroadcastFrame | None


@dataclass(frozen=True)
class SessionStreams:
    """Independent random streams of one session, all derived from the seed."""

    crypto: np.random.Generator
    channels: dict[str, np.random.Generator]

    @classmethod
    def from_seed(cls, seed: int, ue_ids: Sequence[str]) -> "SessionStreams":
        crypto_seq, *channel_seqs = np.random.SeedSequence(seed).spawn(1 + len(ue_ids))
        return cls(
            crypto=np.random.default_rng(crypto_seq),
            channels={ue_id: np.random.default_rng(seq) for ue_id, seq in zip(ue_ids, channel_seqs)},
        )


def _channel_for(ordered: Sequence[UESpec], noise_sigma: float) -> ChannelRealization:
    channel = ChannelRealization(gains=tuple(ue.gain for ue in ordered), noise_sigma=noise_sigma)
    channel.validate()
    return channel


def run_session(
    ues: Sequence[UESpec],
    alloc: PowerAllocation,
    noise_sigma: float,
    seed: int,
    scheme: Scheme = Scheme.SECURE,
    ledger: IdentityLedger | None = None,
) -> SessionResult:
    """Run registration (secure only), request, encryption, broadcast and reception end-to-end."""
    ordered = order_weakest_first(ues)
    ue_ids = [ue.ue_id for ue in ordered]
    channel = _channel_for(ordered, noise_sigma)
    streams = SessionStreams.from_seed(seed, ue_ids)
    entropy = streams.crypto.bytes
    trace = SessionTrace(scheme=scheme.value, seed=seed)

    bs_key = crypto.generate_base_station_key(entropy) if scheme is Scheme.SECURE else None
    user_equipment = [
        UserEquipment(
            ue,
            ReceiverRole.WEAK if layer == 0 else ReceiverRole.STRONG,
            channel,
            streams.channels[ue.ue_id],
            scheme,
        )
        for layer, ue in enumerate(ordered)
    ]
    bnodeb = BNodeB(ue_ids, alloc, bs_key, entropy, scheme)
    pgw = PacketGateway({ue.ue_id: ue.payload for ue in ordered}, entropy, scheme)
    entities: list[Entity] = [*user_equipment, bnodeb, pgw]
    if scheme is Scheme.SECURE:
        ledger = ledger if ledger is not None else ledger_init()
        entities.append(IdentityServer(ledger))

    loop = EventLoop(entities, trace, ue_ids)
    if scheme is Scheme.SECURE:
        for ue in user_equipment:
            loop.post(ue.registration_request())
        loop.run()
    for ue in user_equipment:
        loop.post(ue.data_request())
    loop.run()

    for ue in user_equipment:
        trace.outcomes[ue.entity_id] = ue.outcome or UEOutcome(
            ue.entity_id, ue.role.value, error=pgw.refusal or "no frame received"
        )
        for other_id, observed in ue.observed.items():
            _record_observation(trace, ue.entity_id, other_id, observed, is_weakest=other_id == ue_ids[0])

    recovered = sum(outcome.ok for outcome in trace.outcomes.values())
    logger.info(f"✅ {scheme.value} session seed={seed}: {recovered}/{len(ordered)} UEs recovered")
    return SessionResult(
        trace=trace,
        ledger=ledger,
        kboxes={ue.entity_id: ue.kbox for ue in user_equipment if ue.kbox is not None},
        bs_key=bs_key,
        frame=bnodeb.frame,
    )


def _record_observation(
    trace: SessionTrace, observer: str, other: str, data: bytes, is_weakest: bool
) -> None:
    names = [f"{observer.lower()}_observed_{other.lower()}_payload"]
    if is_weakest:
        names.append(f"{observer.lower()}_observed_weak_payload")
    for name in names:
        trace.observations[name] = data.decode("utf-8", errors="backslashreplace")
        trace.observations[f"{name}_hex"] = data.hex()


def run_legacy_scheme(
    ues: Sequence[UESpec], alloc: PowerAllocation, noise_sigma: float, seed: int
) -> SessionTrace:
    """Unencrypted delivery: the strong UE sees the weak UE's plaintext while cancelling it."""
    return run_session(ues, alloc, noise_sigma, seed, scheme=Scheme.LEGACY).trace
