"""Blockchain-based identity management server (BIMS): a hash-chained public-key registry."""

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

from src.crypto import PublicKey
from src.datamodels import HASH_LENGTH
from src.datamodels import Block
from src.datamodels import RegistrationRecord
from src.errors import DuplicateId
from src.errors import DuplicateKey
from src.errors import MalformedCiphertext
from src.errors import MalformedRecord
from src.errors import NotFound

logger = logging.getLogger(__name__)

LEDGER_PATH = Path("data/ledger.jsonl")
GENESIS_PREV_HASH = bytes(HASH_LENGTH)
GENESIS_PAYLOAD = RegistrationRecord(ue_id="", public_key=b"", registered_at_ms=0)


@dataclass
class IdentityLedger:
    blocks: list[Block] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    offending_index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid

    def to_dict(self) -> dict:
        return {"valid": self.valid, "offending_index": self.offending_index, "reason": self.reason}


def compute_block_hash(index: int, prev_hash: bytes, payload: RegistrationRecord) -> bytes:
    """SHA-256(index ‖ prev_hash ‖ registered_at_ms ‖ SHA-256(canonical payload))."""
    payload_digest = hashlib.sha256(payload.canonical_bytes()).digest()
    return hashlib.sha256(
        index.to_bytes(8, "big") + prev_hash + payload.registered_at_ms.to_bytes(8, "big") + payload_digest
    ).digest()


def _make_block(index: int, prev_hash: bytes, payload: RegistrationRecord) -> Block:
    return Block(
        index=index,
        prev_hash=prev_hash,
        payload=payload,
        block_hash=compute_block_hash(index, prev_hash, payload),
    )


def ledger_init() -> IdentityLedger:
    return IdentityLedger(blocks=[_make_block(0, GENESIS_PREV_HASH, GENESIS_PAYLOAD)])


def _check_record(record: RegistrationRecord) -> None:
    if not record.ue_id:
        raise MalformedRecord("ue_id must be a non-empty string")
    try:
        PublicKey.from_bytes(record.public_key)
    except MalformedCiphertext as e:
        raise MalformedRecord(f"public key of {record.ue_id} is not a valid curve point: {e}") from e


def register_public_key(ledger: IdentityLedger, record: RegistrationRecord) -> Block:
    _check_record(record)
    for block in ledger.blocks[1:]:
        if block.payload.public_key == record.public_key:
            raise DuplicateKey(f"public key already registered to {block.payload.ue_id}")
        if block.payload.ue_id == record.ue_id:
            raise DuplicateId(f"ue_id {record.ue_id} already registered")

    block = _make_block(ledger.tip.index + 1, ledger.tip.block_hash, record)
    ledger.blocks.append(block)
    logger.info(f"⛓️ Registered {record.ue_id} at block {block.index} ({block.block_hash.hex()[:12]})")
    return block


def lookup_public_key(ledger: IdentityLedger, ue_id: str) -> PublicKey:
    for block in ledger.blocks[1:]:
        if block.payload.ue_id == ue_id:
            return PublicKey.from_bytes(block.payload.public_key)
    raise NotFound(f"{ue_id} is not registered")


def verify_chain(ledger: IdentityLedger) -> ChainVerdict:
    """Recompute every hash and link; report the first offending block index."""
    if not ledger.blocks:
        return ChainVerdict(False, 0, "ledger has no genesis block")

    genesis = ledger.blocks[0]
    if genesis.index != 0 or genesis.prev_hash != GENESIS_PREV_HASH or genesis.payload != GENESIS_PAYLOAD:
        return ChainVerdict(False, 0, "genesis block is not canonical")
    if genesis.block_hash != compute_block_hash(0, GENESIS_PREV_HASH, GENESIS_PAYLOAD):
        return ChainVerdict(False, 0, "genesis hash mismatch")

    seen_keys: set[bytes] = set()
    seen_ids: set[str] = set()
    for position in range(1, len(ledger.blocks)):
        block, previous = ledger.blocks[position], ledger.blocks[position - 1]
        if block.index != previous.index + 1:
            return ChainVerdict(False, position, "index does not follow predecessor")
        if block.prev_hash != previous.block_hash:
            return ChainVerdict(False, position, "prev_hash does not link to predecessor")
        if block.block_hash != compute_block_hash(block.index, block.prev_hash, block.payload):
            return ChainVerdict(False, position, "block hash mismatch")
        try:
            _check_record(block.payload)
        except MalformedRecord as e:
            return ChainVerdict(False, position, str(e))
        if block.payload.public_key in seen_keys:
            return ChainVerdict(False, position, "duplicate public key")
        if block.payload.ue_id in seen_ids:
            return ChainVerdict(False, position, "duplicate ue_id")
        seen_keys.add(block.payload.public_key)
        seen_ids.add(block.payload.ue_id)

    return ChainVerdict(True)


def save_ledger(ledger: IdentityLedger, path: Path) -> None:
    """Write one JSON object per block; field order is fixed so the file is byte-stable."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(block.to_dict(), separators=(",", ":")) for block in ledger.blocks]
    path.write_text("\n".join(lines) + "\n")


def load_ledger(path: Path) -> IdentityLedger:
    blocks = []
    for line_number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            blocks.append(Block.from_dict(json.loads(line)))
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"{path}:{line_number}: not a JSON object: {e}") from e
    return IdentityLedger(blocks=blocks)


@contextmanager
def ledger_transaction(path: Path | None = None):
    """Load the ledger (or start a fresh one), yield it, and save only on successful exit.

    Yields:
        IdentityLedger: the ledger to read from or append to
    """
    path = path or LEDGER_PATH
    ledger = load_ledger(path) if path.exists() else ledger_init()
    verdict = verify_chain(ledger)
    if not verdict:
        raise MalformedRecord(
            f"{path} fails verification at block {verdict.offending_index}: {verdict.reason}"
        )
    yield ledger
    save_ledger(ledger, path)
