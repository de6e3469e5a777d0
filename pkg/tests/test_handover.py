"""Tests for the handover protocol: registration, encryption, broadcast and reception."""

import json
from dataclasses import replace

import numpy as np
import pytest

from src import crypto
from src.datamodels import DeviceIdentity
from src.datamodels import parse_mac
from src.errors import AuthFailure
from src.errors import DuplicateKey
from src.errors import InvalidAllocation
from src.errors import Layer1AuthFailure
from src.errors import Layer2AuthFailure
from src.errors import NotFound
from src.errors import ProtocolError
from src.handover import AdversaryKind
from src.handover import AdversaryProfile
from src.handover import MessageKind
from src.handover import ReceiverRole
from src.handover import Scheme
from src.handover import UESpec
from src.handover import bnodeb_broadcast
from src.handover import build_frame
from src.handover import legacy_receive
from src.handover import order_weakest_first
from src.handover import pgw_prepare_payloads
from src.handover import register_ue
from src.handover import run_legacy_scheme
from src.handover import run_session
from src.handover import ue_receive
from src.ledger import ledger_init
from src.ledger import verify_chain
from src.noma_phy import ChannelRealization
from src.noma_phy import allocate_power_levels
from src.noma_phy import constellation


@pytest.fixture
def bs_key():
    return crypto.generate_base_station_key(np.random.default_rng(1).bytes)


@pytest.fixture
def registered(near_identity, far_identity, bs_key):
    """A ledger with UE1 and UE2 registered, plus their KBoxes."""
    ledger = ledger_init()
    kboxes = {
        "UE2": register_ue("UE2", far_identity, ledger, bs_key),
        "UE1": register_ue("UE1", near_identity, ledger, bs_key),
    }
    return ledger, kboxes


@pytest.fixture
def frame(registered, bs_key, alloc):
    """Noiseless frame carrying 'secret' to UE2 (weak) and a longer payload to UE1."""
    ledger, _ = registered
    rng = np.random.default_rng(2)
    payloads = {"UE2": b"secret", "UE1": b"alpha: near-user payload"}
    x = pgw_prepare_payloads(["UE2", "UE1"], ledger, payloads, rng.bytes)
    return bnodeb_broadcast([("UE2", x["UE2"]), ("UE1", x["UE1"])], bs_key, alloc, rng.bytes)


class TestRegistration:
    """Tests for register_ue()."""

    def test_kbox_holds_identity_key_and_pr_b(self, registered, near_identity, bs_key):
        ledger, kboxes = registered
        kbox = kboxes["UE1"]
        assert kbox.own_private == crypto.derive_private_key(near_identity)
        assert kbox.bs_private == bs_key
        assert kbox.is_registered
        assert len(ledger) == 3
        assert verify_chain(ledger)

    def test_registration_time_defaults_to_identity_timestamp(self, registered, far_identity):
        ledger, _ = registered
        assert ledger.blocks[1].payload.registered_at_ms == far_identity.timestamp_ms

    def test_same_identity_cannot_register_twice(self, registered, near_identity, bs_key):
        """The second registration of the same key is rejected and the ledger is unchanged."""
        ledger, _ = registered
        with pytest.raises(DuplicateKey):
            register_ue("UE9", near_identity, ledger, bs_key)
        assert len(ledger) == 3


class TestPacketGateway:
    """Tests for pgw_prepare_payloads()."""

    def test_each_payload_opens_only_for_its_owner(self, registered):
        ledger, kboxes = registered
        payloads = {"UE1": b"one", "UE2": b"two"}
        x = pgw_prepare_payloads(["UE1", "UE2"], ledger, payloads, np.random.default_rng(3).bytes)
        assert crypto.decrypt_layer1(kboxes["UE1"].own_private, x["UE1"]) == b"one"
        assert crypto.decrypt_layer1(kboxes["UE2"].own_private, x["UE2"]) == b"two"
        with pytest.raises(AuthFailure):
            crypto.decrypt_layer1(kboxes["UE1"].own_private, x["UE2"])

    def test_unregistered_requester(self, registered):
        ledger, _ = registered
        payloads = {"UE1": b"one", "UE3": b"three"}
        with pytest.raises(NotFound):
            pgw_prepare_payloads(["UE1", "UE3"], ledger, payloads, np.random.default_rng(3).bytes)


class TestBroadcast:
    """Tests for bnodeb_broadcast / build_frame."""

    def test_symbols_lie_on_constellation(self, frame, alloc):
        points = constellation(alloc)
        distance = np.min(np.abs(frame.data.symbols[:, None] - points[None, :]), axis=1)
        assert np.all(distance < 1e-12)

    def test_shorter_segment_is_padded(self, frame):
        """Both layers span the longer ciphertext; the header records each true length."""
        control = frame.control
        overhead = 12 + 16 + 33 + 12 + 16
        assert control.slot_of("UE2").payload_bit_length == 8 * (len(b"secret") + overhead)
        assert control.symbol_count == control.slot_of("UE1").payload_bit_length
        assert control.padding_of("UE2") == 8 * (len(b"alpha: near-user payload") - len(b"secret"))
        assert frame.data.length == control.symbol_count

    def test_layers_follow_weakest_first_order(self, frame):
        assert frame.control.role_of("UE2") is ReceiverRole.WEAK
        assert frame.control.role_of("UE1") is ReceiverRole.STRONG

    def test_unknown_receiver(self, frame):
        with pytest.raises(ProtocolError):
            frame.control.slot_of("UE3")

    def test_single_user_rejected(self, registered, bs_key, alloc):
        ledger, _ = registered
        x = pgw_prepare_payloads(["UE1"], ledger, {"UE1": b"one"}, np.random.default_rng(4).bytes)
        with pytest.raises(ProtocolError, match="two users"):
            bnodeb_broadcast([("UE1", x["UE1"])], bs_key, alloc, np.random.default_rng(4).bytes)

    def test_user_count_must_match_allocation(self, alloc):
        with pytest.raises(InvalidAllocation):
            build_frame([("A", b"a"), ("B", b"b"), ("C", b"c")], alloc)


class TestReception:
    """Tests for ue_receive / legacy_receive over a noiseless channel."""

    def test_both_users_recover(self, frame, registered, noiseless_channel):
        _, kboxes = registered
        rng = np.random.default_rng(5)
        assert ue_receive(frame, kboxes["UE1"], noiseless_channel, rng) == b"alpha: near-user payload"
        assert ue_receive(frame, kboxes["UE2"], noiseless_channel, rng) == b"secret"

    def test_strong_user_cannot_open_weak_users_segment(self, frame, registered, noiseless_channel):
        """UE1 decodes UE2's layer during SIC; layer 2 opens, layer 1 does not."""
        _, kboxes = registered
        with pytest.raises(Layer1AuthFailure):
            ue_receive(frame, kboxes["UE1"], noiseless_channel, np.random.default_rng(5), target_id="UE2")

    def test_weak_user_cannot_open_strong_users_segment(self, frame, registered, noiseless_channel):
        _, kboxes = registered
        with pytest.raises(Layer1AuthFailure):
            ue_receive(frame, kboxes["UE2"], noiseless_channel, np.random.default_rng(5), target_id="UE1")

    def test_missing_pr_b(self, frame, registered, noiseless_channel):
        _, kboxes = registered
        unregistered = replace(kboxes["UE1"], bs_private=None)
        with pytest.raises(Layer2AuthFailure):
            ue_receive(frame, unregistered, noiseless_channel, np.random.default_rng(5))

    def test_wrong_pr_b(self, frame, registered, noiseless_channel):
        _, kboxes = registered
        other = crypto.generate_base_station_key(np.random.default_rng(77).bytes)
        kbox = replace(kboxes["UE1"], bs_private=other)
        with pytest.raises(Layer2AuthFailure):
            ue_receive(frame, kbox, noiseless_channel, np.random.default_rng(5))

    def test_legacy_strong_user_sees_weak_plaintext(self, alloc, noiseless_channel):
        frame = build_frame([("UE2", b"secret"), ("UE1", b"mine")], alloc)
        rng = np.random.default_rng(6)
        assert legacy_receive(frame, "UE1", noiseless_channel, rng) == {"UE1": b"mine", "UE2": b"secret"}
        assert legacy_receive(frame, "UE2", noiseless_channel, rng) == {"UE2": b"secret"}


class TestSecureSession:
    """Tests for run_session() with the secure scheme."""

    def test_every_ue_recovers_its_payload(self, ue_specs, alloc):
        result = run_session(ue_specs, alloc, 0.0, seed=1)
        outcomes = result.trace.outcomes
        assert outcomes["UE1"].recovered == b"alpha: near-user payload"
        assert outcomes["UE2"].recovered == b"secret"
        assert outcomes["UE1"].role == "strong"
        assert outcomes["UE2"].role == "weak"
        assert all(outcome.ok for outcome in outcomes.values())

    def test_message_order(self, ue_specs, alloc):
        kinds = run_session(ue_specs, alloc, 0.0, seed=1).trace.kinds()
        assert set(kinds) == {kind.value for kind in MessageKind}
        assert kinds[:2] == ["RegistrationRequest", "RegistrationRequest"]
        assert kinds[-1] == "BroadcastFrame"
        assert kinds.index("PKRequest") < kinds.index("PKResponse") < kinds.index("EncryptedDelivery")
        assert kinds.count("BroadcastFrame") == 1

    def test_ledger_holds_both_keys(self, ue_specs, alloc):
        result = run_session(ue_specs, alloc, 0.0, seed=1)
        assert len(result.ledger) == 3
        assert {block.payload.ue_id for block in result.ledger.blocks[1:]} == {"UE1", "UE2"}
        assert verify_chain(result.ledger)

    def test_trace_never_carries_secrets(self, ue_specs, alloc):
        result = run_session(ue_specs, alloc, 0.0, seed=1)
        text = result.trace.to_jsonl()
        assert result.bs_key.to_hex() not in text
        assert "secret" not in text
        for kbox in result.kboxes.values():
            assert kbox.own_private.to_hex() not in text

    def test_trace_lines_are_json(self, ue_specs, alloc, tmp_path):
        path = run_session(ue_specs, alloc, 0.0, seed=1).trace.write(tmp_path / "trace.jsonl")
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines[0] == {"seq": -1, "kind": "Session", "scheme": "secure", "seed": 1}
        assert [line["seq"] for line in lines[1:]] == list(range(len(lines) - 1))
        assert lines[-1]["kind"] == "Outcome"

    def test_same_seed_same_trace(self, ue_specs, alloc):
        first = run_session(ue_specs, alloc, 0.0, seed=11).trace.to_jsonl()
        second = run_session(ue_specs, alloc, 0.0, seed=11).trace.to_jsonl()
        assert first == second

    def test_different_seed_different_trace(self, ue_specs, alloc):
        first = run_session(ue_specs, alloc, 0.0, seed=11).trace.to_jsonl()
        second = run_session(ue_specs, alloc, 0.0, seed=12).trace.to_jsonl()
        assert first != second

    def test_random_payloads_always_recovered(self, near_identity, far_identity, alloc):
        """100 sessions with payloads of 0..4096 bytes each."""
        rng = np.random.default_rng(20240601)
        for session in range(100):
            sizes = (0, 4096) if session == 0 else rng.integers(0, 4097, size=2)
            payloads = [rng.bytes(int(size)) for size in sizes]
            ues = [
                UESpec("UE1", near_identity, payloads[0], 1.0),
                UESpec("UE2", far_identity, payloads[1], 0.6),
            ]
            outcomes = run_session(ues, alloc, 0.0, seed=session).trace.outcomes
            assert outcomes["UE1"].recovered == payloads[0], session
            assert outcomes["UE2"].recovered == payloads[1], session

    def test_three_users(self, ue_specs):
        third = DeviceIdentity("001010000000037", parse_mac("02:00:5e:10:00:03"), 1_717_200_009_876, 0, 0)
        ues = [
            replace(ue_specs[0], gain=1.0),
            replace(ue_specs[1], gain=0.7),
            UESpec("UE3", third, b"far", 0.4),
        ]
        alloc = allocate_power_levels(1.0, [0.75, 0.2, 0.05])
        outcomes = run_session(ues, alloc, 0.0, seed=3).trace.outcomes
        assert {ue_id: outcome.recovered for ue_id, outcome in outcomes.items()} == {
            "UE1": b"alpha: near-user payload",
            "UE2": b"secret",
            "UE3": b"far",
        }
        assert outcomes["UE3"].role == "weak"

    def test_noise_failures_are_outcomes(self, ue_specs, alloc):
        """Channel errors surface as layer-2 failures, not exceptions."""
        outcomes = run_session(ue_specs, alloc, 1.0, seed=1).trace.outcomes
        for outcome in outcomes.values():
            assert not outcome.ok
            assert outcome.error.startswith("Layer2AuthFailure")

    def test_cloned_identity_is_refused(self, ue_specs, alloc):
        """A second UE presenting the same identity is rejected and the gateway serves no one."""
        clone = replace(ue_specs[0], identity=ue_specs[1].identity)
        result = run_session([clone, ue_specs[1]], alloc, 0.0, seed=1)
        outcomes = result.trace.outcomes
        assert "DuplicateKey" in outcomes["UE1"].error
        assert "not registered" in outcomes["UE2"].error
        assert "BroadcastFrame" not in result.trace.kinds()
        assert len(result.ledger) == 2


class TestLegacySession:
    """Tests for run_legacy_scheme()."""

    def test_strong_user_observes_weak_payload(self, ue_specs, alloc):
        trace = run_legacy_scheme(ue_specs, alloc, 0.0, seed=1)
        assert trace.observations["ue1_observed_weak_payload"] == "secret"
        assert trace.observations["ue1_observed_ue2_payload"] == "secret"
        assert trace.observations["ue1_observed_weak_payload_hex"] == b"secret".hex()
        assert not any(key.startswith("ue2_observed") for key in trace.observations)

    def test_no_registration_or_encryption(self, ue_specs, alloc):
        kinds = run_legacy_scheme(ue_specs, alloc, 0.0, seed=1).kinds()
        assert "RegistrationRequest" not in kinds
        assert "PKRequest" not in kinds
        assert kinds[-1] == "BroadcastFrame"

    def test_both_users_still_recover(self, ue_specs, alloc):
        outcomes = run_legacy_scheme(ue_specs, alloc, 0.0, seed=1).outcomes
        assert outcomes["UE1"].recovered == b"alpha: near-user payload"
        assert outcomes["UE2"].recovered == b"secret"

    def test_deterministic(self, ue_specs, alloc):
        assert (
            run_legacy_scheme(ue_specs, alloc, 0.0, seed=5).to_jsonl()
            == run_legacy_scheme(ue_specs, alloc, 0.0, seed=5).to_jsonl()
        )


class TestSessionInputs:
    """Tests for input checks shared by every session."""

    def test_equal_gains_rejected(self, ue_specs):
        with pytest.raises(ProtocolError):
            order_weakest_first([ue_specs[0], replace(ue_specs[1], gain=1.0)])

    def test_ordering(self, ue_specs):
        assert [ue.ue_id for ue in order_weakest_first(ue_specs)] == ["UE2", "UE1"]

    def test_scheme_values(self):
        assert Scheme("legacy") is Scheme.LEGACY


class TestAdversaryProfile:
    """Tests for adversary knowledge limits."""

    def test_defaults_are_permitted(self):
        for kind in AdversaryKind:
            assert AdversaryProfile.default(kind).kind is kind

    def test_eavesdropper_may_not_hold_pr_b(self):
        with pytest.raises(ProtocolError, match="pr_b"):
            AdversaryProfile(AdversaryKind.EAVESDROPPER, frozenset({"broadcast_frame", "pr_b"}))

    def test_clone_may_not_hold_victim_timestamp(self):
        with pytest.raises(ProtocolError):
            AdversaryProfile(AdversaryKind.SPOOFING_CLONE, frozenset({"victim_imei", "victim_timestamp"}))


def test_channel_realization_from_specs(ue_specs):
    ordered = order_weakest_first(ue_specs)
    ch = ChannelRealization(gains=tuple(ue.gain for ue in ordered), noise_sigma=0.0)
    ch.validate()
    assert ch.h_weak == 0.6
