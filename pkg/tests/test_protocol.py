"""Handshake ladder behavior for both variants.

Covers the honest path, the device gate, tamper/replay/splice handling,
and state-machine safety under arbitrary redelivery of captured wires.
"""

import itertools

import pytest

from conftest import Fleet, drive_handshake
from ikedev import codec, crypto
from ikedev.codec import CertBody, DevBody, IdBody, KeBody, NonceBody, PayloadType, SaBody
from ikedev.errors import DeviceAbsent, IkeDevError
from ikedev.protocol import (
    CERT_ENCODING_SEALED,
    ReplayGuard,
    Role,
    SessionState,
    Variant,
)
from ikedev.usbkey import KeySelector, device_encrypt, device_session_encrypt


# --- honest ladder -----------------------------------------------------------

@pytest.mark.parametrize("variant", [Variant.BASELINE, Variant.IMPROVED])
def test_honest_handshake_establishes_with_matching_secrets(fleet, variant):
    ini, rsp = fleet.pair(variant)
    drive_handshake(ini, rsp)
    assert ini.state is SessionState.ESTABLISHED
    assert rsp.state is SessionState.ESTABLISHED
    for field in ("skeyid", "skeyid_d", "skeyid_a", "skeyid_e"):
        assert getattr(ini.skeyid, field) == getattr(rsp.skeyid, field)
    assert ini.counters.dh_ops == 2 and rsp.counters.dh_ops == 1
    assert ini.counters.sig_verifies == 1 and rsp.counters.sig_verifies == 1


def test_baseline_wire_shapes(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE)
    wires = drive_handshake(ini, rsp)
    msgs = [codec.decode_message(w) for w in wires]
    assert [p.type for p in msgs[0].payloads] == [
        PayloadType.SA, PayloadType.KE, PayloadType.NONCE, PayloadType.ID]
    assert [p.type for p in msgs[1].payloads] == [
        PayloadType.SA, PayloadType.KE, PayloadType.NONCE, PayloadType.ID,
        PayloadType.CERT, PayloadType.SIG]
    assert [p.type for p in msgs[2].payloads] == [
        PayloadType.CERT, PayloadType.SIG]
    assert all(m.encrypted_chain is None for m in msgs)
    assert msgs[0].payloads[0].body.proposal == codec.DEFAULT_SA_PROPOSAL


def test_improved_wire_shapes(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    wires = drive_handshake(ini, rsp)
    msgs = [codec.decode_message(w) for w in wires]
    # messages 1 and 2 lead with the device payload and carry a sealed chain
    assert [p.type for p in msgs[0].payloads] == [PayloadType.DEV]
    assert [p.type for p in msgs[1].payloads] == [
        PayloadType.DEV, PayloadType.CERT, PayloadType.SIG]
    assert msgs[0].header.encrypted and msgs[0].encrypted_chain
    assert msgs[1].header.encrypted and msgs[1].encrypted_chain
    # message 3 is flagged encrypted but everything rides in sealed bodies
    assert [p.type for p in msgs[2].payloads] == [
        PayloadType.CERT, PayloadType.SIG]
    assert msgs[2].header.encrypted and msgs[2].encrypted_chain is None
    assert msgs[1].payloads[1].body.encoding == CERT_ENCODING_SEALED


def test_improved_wires_leak_no_identity_material(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    wires = drive_handshake(ini, rsp)
    cert_i = fleet.tokens["alice"].certificate.encoded
    cert_r = fleet.tokens["bob"].certificate.encoded
    for wire in wires:
        assert fleet.serials["alice"] not in wire
        assert fleet.serials["bob"] not in wire
        assert cert_i not in wire and cert_r not in wire
        assert b"alice" not in wire and b"bob" not in wire


def test_baseline_wires_expose_identity_material(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE)
    wires = drive_handshake(ini, rsp)
    assert b"alice" in wires[0]
    assert fleet.file_identities["bob"].certificate.encoded in wires[1]


def test_events_record_ladder_steps(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    drive_handshake(ini, rsp)
    assert [e.emitted for e in ini.events] == ["msg1", "msg3"]
    assert [e.emitted for e in rsp.events] == ["msg2", None]
    assert all(e.failure is None for e in ini.events + rsp.events)


def test_gate_disabled_honest_run_still_establishes(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED, disable_dos_gate=True)
    drive_handshake(ini, rsp)
    assert rsp.state is SessionState.ESTABLISHED
    assert rsp.counters.dh_ops == 1


# --- missing device ----------------------------------------------------------

def test_improved_initiator_without_device_stops_before_any_bytes(fleet):
    ini = fleet.session("alice", Role.INITIATOR, Variant.IMPROVED, token=False)
    with pytest.raises(DeviceAbsent):
        ini.initiator_start()
    assert ini.state is SessionState.FAILED
    assert ini.failure == "no device"
    assert ini.counters.dh_ops == 0


def test_improved_responder_without_device_stops(fleet):
    ini, _ = fleet.pair(Variant.IMPROVED)
    rsp = fleet.session("bob", Role.RESPONDER, Variant.IMPROVED, token=False)
    msg1 = ini.initiator_start()
    with pytest.raises(DeviceAbsent):
        rsp.responder_on_msg1(msg1)
    assert rsp.failure == "no device"
    assert rsp.counters.dh_ops == 0


def test_baseline_needs_no_device(fleet):
    ini = fleet.session("alice", Role.INITIATOR, Variant.BASELINE, token=False)
    rsp = fleet.session("bob", Role.RESPONDER, Variant.BASELINE, token=False,
                        replay_guard=ReplayGuard())
    drive_handshake(ini, rsp)
    assert ini.state is SessionState.ESTABLISHED
    assert ini.signature_backend == "file" and rsp.signature_backend == "file"


def test_improved_signatures_come_from_the_device(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    drive_handshake(ini, rsp)
    assert ini.signature_backend == "device"
    assert rsp.signature_backend == "device"


# --- the device gate ---------------------------------------------------------

def _forged_improved_msg1(rng) -> codec.IsakmpMessage:
    """Attacker without key1: structurally perfect, sealed under junk keys."""
    dev = DevBody(nonce=rng.randbytes(16), ciphertext=rng.randbytes(23))
    return codec.build_message(
        rng.randbytes(8), b"\x00" * 8, [dev],
        flags=codec.FLAG_ENCRYPTION, encrypted_chain=rng.randbytes(64))


def test_gate_rejects_forged_msg1_before_any_dh(fleet):
    rng = crypto.derive_rng(99, "adversary")
    _, rsp = fleet.pair(Variant.IMPROVED)
    for _ in range(10):
        assert rsp.responder_on_msg1(_forged_improved_msg1(rng)) is None
    assert rsp.counters.dh_ops == 0
    assert rsp.counters.messages_rejected_pre_dh == 10
    assert rsp.counters.decrypt_failures == 10
    assert rsp.state is SessionState.IDLE  # drops, not failures


def test_gate_rejects_msg1_without_dev_payload(fleet):
    _, rsp = fleet.pair(Variant.IMPROVED)
    bare = codec.build_message(b"A" * 8, b"\x00" * 8,
                               [SaBody(codec.DEFAULT_SA_PROPOSAL)])
    assert rsp.responder_on_msg1(bare) is None
    assert rsp.counters.dh_ops == 0
    assert rsp.events[-1].failure == "no-dev"


def test_gate_rejects_wrong_length_serial(fleet):
    rng = crypto.derive_rng(5, "x")
    _, rsp = fleet.pair(Variant.IMPROVED)
    token = fleet.tokens["alice"]
    # a genuine key1 seal, but of a 9-byte record
    sealed = device_encrypt(token, KeySelector.KEY1, b"AB1234567")
    msg = codec.build_message(
        rng.randbytes(8), b"\x00" * 8, [DevBody.from_sealed(sealed)],
        flags=codec.FLAG_ENCRYPTION, encrypted_chain=rng.randbytes(64))
    assert rsp.responder_on_msg1(msg) is None
    assert rsp.events[-1].failure == "bad-dev"
    assert rsp.counters.dh_ops == 0


def test_gate_detects_replayed_dev_nonce(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    wire = codec.encode_message(ini.initiator_start())
    assert rsp.responder_on_msg1(codec.decode_message(wire)) is not None

    # same principal, fresh session, SHARED replay guard
    again = fleet.session("bob", Role.RESPONDER, Variant.IMPROVED,
                          replay_guard=rsp.replay_guard, label="1")
    assert again.responder_on_msg1(codec.decode_message(wire)) is None
    assert again.events[-1].failure == "replay"
    assert again.counters.dh_ops == 0
    assert again.counters.messages_rejected_pre_dh == 1


def test_replay_guard_lru_eviction():
    guard = ReplayGuard(capacity=2)
    assert not guard.seen_before(b"a")
    assert not guard.seen_before(b"b")
    assert guard.seen_before(b"a")      # still resident, refreshed
    assert not guard.seen_before(b"c")  # evicts b
    assert not guard.seen_before(b"b")  # b was evicted: admitted again
    assert len(guard) == 2


def test_baseline_responder_pays_dh_for_any_well_formed_msg1(fleet):
    rng = crypto.derive_rng(1, "adv")
    _, rsp = fleet.pair(Variant.BASELINE)
    _, gx = crypto.dh_keypair(crypto.DESK_GROUP, rng)
    forged = codec.build_message(
        rng.randbytes(8), b"\x00" * 8,
        [SaBody(codec.DEFAULT_SA_PROPOSAL), KeBody(gx),
         NonceBody(rng.randbytes(16)), IdBody(2, b"mallory")])
    # the responder cannot tell and answers, burning a DH episode
    assert rsp.responder_on_msg1(forged) is not None
    assert rsp.counters.dh_ops == 1
    assert rsp.counters.messages_rejected_pre_dh == 0


# --- weak key-exchange values --------------------------------------------------

def test_baseline_rejects_degenerate_public_value(fleet):
    rng = crypto.derive_rng(2, "adv")
    _, rsp = fleet.pair(Variant.BASELINE)
    msg = codec.build_message(
        rng.randbytes(8), b"\x00" * 8,
        [SaBody(codec.DEFAULT_SA_PROPOSAL),
         KeBody(crypto.DESK_GROUP.encode(1)),
         NonceBody(rng.randbytes(16)), IdBody(2, b"mallory")])
    assert rsp.responder_on_msg1(msg) is None
    assert rsp.events[-1].failure == "weak-ke"


def test_improved_rejects_degenerate_public_value_after_gate(fleet):
    rng = crypto.derive_rng(3, "adv")
    _, rsp = fleet.pair(Variant.IMPROVED)
    token = fleet.tokens["alice"]
    bodies = [SaBody(codec.DEFAULT_SA_PROPOSAL),
              KeBody(crypto.DESK_GROUP.encode(1)),
              NonceBody(rng.randbytes(16)), IdBody(2, b"alice")]
    dev = DevBody.from_sealed(
        device_encrypt(token, KeySelector.KEY1, token.serial))
    blob = device_session_encrypt(
        token, token.serial,
        codec.serialize_payload_chain(codec.link_payloads(bodies)))
    msg = codec.build_message(rng.randbytes(8), b"\x00" * 8, [dev],
                              flags=codec.FLAG_ENCRYPTION, encrypted_chain=blob)
    assert rsp.responder_on_msg1(msg) is None
    assert rsp.events[-1].failure == "weak-ke"
    # the sender held a genuine device, so the gate was passed and DH paid
    assert rsp.counters.dh_ops == 1
    assert rsp.counters.messages_rejected_pre_dh == 0


# --- in-flight tampering ---------------------------------------------------------

def _flip_payload_byte(wire: bytes, ptype: PayloadType, delta: int = 0x01) -> bytes:
    for r in codec.payload_byte_ranges(wire):
        if r.type is ptype:
            i = r.body_start
            return wire[:i] + bytes([wire[i] ^ delta]) + wire[i + 1:]
    raise AssertionError(f"no {ptype} payload present")


def _flip_blob_byte(wire: bytes, delta: int = 0x01) -> bytes:
    start, _ = codec.encrypted_chain_range(wire)
    return wire[:start] + bytes([wire[start] ^ delta]) + wire[start + 1:]


def test_baseline_msg2_sa_tamper_caught_at_signature_check(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE)
    mutate = lambda i, w: _flip_payload_byte(w, PayloadType.SA) if i == 1 else w
    drive_handshake(ini, rsp, mutate=mutate)
    assert ini.state is SessionState.FAILED
    assert ini.failure == "sig-verify"
    assert ini.counters.sig_verifies == 1  # detection costs a verify


def test_baseline_msg1_ke_tamper_desynchronizes_keys(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE)
    mutate = lambda i, w: _flip_payload_byte(w, PayloadType.KE) if i == 0 else w
    drive_handshake(ini, rsp, mutate=mutate)
    # the responder answers obliviously; the initiator's check catches it
    assert rsp.state is SessionState.SENT2
    assert ini.failure == "sig-verify"


def test_baseline_msg1_sa_tamper_caught_by_responder_on_msg3(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE)
    mutate = lambda i, w: _flip_payload_byte(w, PayloadType.SA) if i == 0 else w
    drive_handshake(ini, rsp, mutate=mutate)
    assert rsp.state is SessionState.FAILED
    assert rsp.failure == "sig-verify"
    assert ini.state is SessionState.ESTABLISHED  # one-sided: msg3 never acked


def test_improved_blob_tamper_fails_closed_without_signature_work(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    mutate = lambda i, w: _flip_blob_byte(w) if i == 1 else w
    drive_handshake(ini, rsp, mutate=mutate)
    assert ini.state is SessionState.FAILED
    assert ini.failure == "chain"
    assert ini.counters.sig_verifies == 0
    assert ini.counters.decrypt_failures == 1


def test_improved_msg1_blob_tamper_rejected_after_gate(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)
    mutate = lambda i, w: _flip_blob_byte(w) if i == 0 else w
    drive_handshake(ini, rsp, mutate=mutate)
    assert rsp.state is SessionState.IDLE
    assert rsp.events[-1].failure == "bad-chain"
    assert rsp.counters.sig_verifies == 0
    assert rsp.counters.dh_ops == 0


def test_improved_dev_tamper_rejected_at_the_gate(fleet):
    ini, rsp = fleet.pair(Variant.IMPROVED)

    def mutate(i, wire):
        if i != 0:
            return wire
        r = codec.payload_byte_ranges(wire)[0]
        assert r.type is PayloadType.DEV
        j = r.body_start + 1  # first sealed byte, past format_version
        return wire[:j] + bytes([wire[j] ^ 0x01]) + wire[j + 1:]

    drive_handshake(ini, rsp, mutate=mutate)
    assert rsp.events[-1].failure == "bad-dev"
    assert rsp.counters.dh_ops == 0
    assert rsp.counters.messages_rejected_pre_dh == 1


# --- certificate splicing ---------------------------------------------------------

def _resign_chain(msg, new_bodies):
    return codec.build_message(
        msg.header.initiator_cookie, msg.header.responder_cookie, new_bodies,
        flags=msg.header.flags, message_id=msg.header.message_id,
        encrypted_chain=msg.encrypted_chain)


def test_baseline_cert_splice_caught_by_subject_check(fleet):
    carol_cert = fleet.file_identities["carol"].certificate.encoded
    ini, rsp = fleet.pair(Variant.BASELINE)

    def mutate(i, wire):
        if i != 1:
            return wire
        msg = codec.decode_message(wire)
        bodies = [p.body if p.type is not PayloadType.CERT
                  else CertBody(p.body.encoding, carol_cert)
                  for p in msg.payloads]
        return codec.encode_message(_resign_chain(msg, bodies))

    drive_handshake(ini, rsp, mutate=mutate)
    assert ini.failure == "cert"
    assert ini.counters.sig_verifies == 0


def test_improved_cert_splice_fails_at_unsealing(fleet):
    rng = crypto.derive_rng(77, "splice")
    carol = fleet.tokens["carol"]
    sealed_foreign = crypto.seal(
        crypto.AES256GCM, crypto.kdf_serial(carol.serial), rng,
        carol.certificate.encoded)
    ini, rsp = fleet.pair(Variant.IMPROVED)

    def mutate(i, wire):
        if i != 1:
            return wire
        msg = codec.decode_message(wire)
        bodies = [p.body if p.type is not PayloadType.CERT
                  else CertBody(CERT_ENCODING_SEALED, sealed_foreign)
                  for p in msg.payloads]
        return codec.encode_message(_resign_chain(msg, bodies))

    drive_handshake(ini, rsp, mutate=mutate)
    assert ini.failure == "cert"
    assert ini.counters.sig_verifies == 0
    assert ini.counters.decrypt_failures == 1


# --- replay of later messages -------------------------------------------------------

@pytest.mark.parametrize("variant", [Variant.BASELINE, Variant.IMPROVED])
def test_stale_msg3_rejected_by_fresh_responder(fleet, variant):
    ini1, rsp1 = fleet.pair(variant, label="first")
    wires = drive_handshake(ini1, rsp1)
    stale_msg3 = codec.decode_message(wires[2])

    ini2, rsp2 = fleet.pair(variant, label="second")
    msg2 = rsp2.responder_on_msg1(ini2.initiator_start())
    assert msg2 is not None
    assert rsp2.responder_on_msg3(stale_msg3) is False
    assert rsp2.failure == "sig-verify"


# --- state-machine safety -------------------------------------------------------------

def _deliver(party, wire):
    msg = codec.decode_message(wire)
    try:
        if party.role is Role.RESPONDER:
            if party.state is SessionState.IDLE:
                party.responder_on_msg1(msg)
            else:
                party.responder_on_msg3(msg)
        elif party.state is SessionState.SENT1:
            party.initiator_on_msg2(msg)
    except IkeDevError:
        pass


@pytest.mark.parametrize("variant", [Variant.BASELINE, Variant.IMPROVED])
def test_no_replayed_wire_sequence_reaches_establishment(fleet, variant):
    honest_i, honest_r = fleet.pair(variant, label="captured")
    wires = drive_handshake(honest_i, honest_r)
    assert len(wires) == 3

    count = 0
    for length in (1, 2, 3):
        for seq in itertools.product(range(3), repeat=length):
            label = f"victim-{variant.value}-{count}"
            count += 1
            ini = fleet.session("alice", Role.INITIATOR, variant, label=label)
            rsp = fleet.session("bob", Role.RESPONDER, variant, label=label,
                                replay_guard=ReplayGuard())
            ini.initiator_start()
            for idx in seq:
                _deliver(ini, wires[idx])
                _deliver(rsp, wires[idx])
            assert ini.state is not SessionState.ESTABLISHED, seq
            assert rsp.state is not SessionState.ESTABLISHED, seq


def test_out_of_order_calls_fail_cleanly(fleet):
    ini, rsp = fleet.pair(Variant.BASELINE, label="ooo")
    msg1 = ini.initiator_start()
    assert ini.initiator_start() is None          # double start
    assert ini.failure == "out-of-order"

    ini2, rsp2 = fleet.pair(Variant.BASELINE, label="ooo2")
    assert ini2.initiator_on_msg2(msg1) is None   # msg2 before start
    assert ini2.failure == "out-of-order"
    assert rsp2.responder_on_msg3(msg1) is False  # msg3 before msg1
    assert rsp2.failure == "out-of-order"


def test_role_confusion_is_rejected(fleet):
    rsp = fleet.session("bob", Role.RESPONDER, Variant.BASELINE, label="rc")
    assert rsp.initiator_start() is None
    assert rsp.failure == "out-of-order"
