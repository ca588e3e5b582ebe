import itertools
import threading
from collections import Counter

import pytest

from voiprelay.audio_io import MediaPacket
from voiprelay.errors import CallNotEstablished, Timeout
from voiprelay.netem import Channel, ImpairmentProfile, impair, shape
from voiprelay.transport import (LEGAL_TRANSITIONS, CallPhase, CallSignal, CallState, Endpoint,
                                 EndpointAddress, IllegalTransition, LocalResolver, MemoryNetwork,
                                 SignalKind, UdpNetwork, decode_media, establish_call, hangup,
                                 resolve_address, send_media)


def pkt(seq, payload=640):
    return MediaPacket(seq, seq * 320, 0, bytes(payload))


@pytest.fixture(params=["memory", pytest.param("udp", marks=pytest.mark.udp)])
def network(request):
    return MemoryNetwork() if request.param == "memory" else UdpNetwork()


@pytest.fixture
def resolver(network):
    return LocalResolver(network)


@pytest.fixture
def pair(network, resolver):
    rx = Endpoint("receiver", network, resolver, auto_answer=True)
    tx = Endpoint("sender", network, resolver)
    yield tx, rx
    tx.close()
    rx.close()


def drain(endpoint, expect=None, timeout=2.0):
    got = []
    while True:
        item = endpoint.media.recv(timeout if expect is not None and len(got) < expect else 0.05)
        if item is None:
            return got
        got.append(decode_media(item[0]))


def test_resolver():
    net = MemoryNetwork()
    r = LocalResolver(net)
    a = resolve_address("A", r)
    assert a.host == "127.0.0.1" and a.signaling_port == 5061
    b = resolve_address("B", r)
    assert a.media_port != b.media_port
    assert all(3000 <= x.media_port <= 9000 for x in (a, b))
    assert resolve_address("A", r) == a
    ports = [resolve_address(f"n{i}", r) for i in range(100)]
    used = [p.signaling_port for p in ports] + [p.media_port for p in ports]
    assert len(set(used)) == len(used)


def test_address_range():
    assert EndpointAddress("127.0.0.1").signaling_port == 5061
    with pytest.raises(ValueError):
        EndpointAddress("127.0.0.1", 5061, 2999)
    with pytest.raises(ValueError):
        EndpointAddress("127.0.0.1", 5061, 9001)


def test_signal_wire_round_trip():
    a, b = EndpointAddress("127.0.0.1", 5061, 3000), EndpointAddress("10.0.0.2", 5062, 3002)
    for kind in SignalKind:
        s = CallSignal(kind, "ab" * 16, a, b, 1234.5)
        assert CallSignal.decode(s.encode()) == s


def test_establish_call(pair):
    tx, rx = pair
    call = establish_call(tx, rx.address, timeout_ms=2000)
    incoming = rx.accept(timeout=2)
    assert call.state is CallPhase.ESTABLISHED
    assert incoming.state is CallPhase.ESTABLISHED
    assert incoming.call_id == call.call_id
    assert incoming.media_ports == (call.remote.media_port, call.local.media_port)


def test_callee_absent_times_out(network):
    tx = Endpoint("lonely", network, LocalResolver(network))
    try:
        with pytest.raises(Timeout):
            tx.call(EndpointAddress("127.0.0.1", 6999, 8998), timeout_ms=100)
    finally:
        tx.close()


def test_no_answer_without_auto_answer():
    net = MemoryNetwork()
    seen = []
    net.drop_filter = lambda data, src, dst: seen.append(CallSignal.decode(data).kind) or False
    r = LocalResolver(net)
    with Endpoint("callee", net, r, auto_answer=False) as callee, Endpoint("caller", net, r) as caller:
        with pytest.raises(Timeout):
            caller.call(callee.address, timeout_ms=100)
    assert SignalKind.ANSWER_200 not in seen


def test_answer_only_follows_invite():
    net = MemoryNetwork()
    log = []

    net.drop_filter = lambda data, src, dst: log.append(CallSignal.decode(data))
    r = LocalResolver(net)
    with Endpoint("callee", net, r, auto_answer=True) as callee, Endpoint("caller", net, r) as caller:
        for _ in range(3):
            hangup(caller, caller.call(callee.address, 1000))
    invites = {s.call_id for s in log if s.kind is SignalKind.INVITE}
    answers = [s.call_id for s in log if s.kind is SignalKind.ANSWER_200]
    assert len(answers) == 3 and set(answers) == invites


def test_concurrent_calls_to_one_callee(pair, network, resolver):
    tx, rx = pair
    other = Endpoint("sender2", network, resolver)
    try:
        results = []
        threads = [threading.Thread(target=lambda ep=ep: results.append(ep.call(rx.address, 2000)))
                   for ep in (tx, other)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(results) == 2 and results[0].call_id != results[1].call_id
        assert all(c.established for c in results)
        incoming = {rx.accept(2).call_id, rx.accept(2).call_id}
        assert incoming == {c.call_id for c in results}
    finally:
        other.close()


def test_media_lossless(pair):
    tx, rx = pair
    call = tx.call(rx.address, 2000)
    stream = [(pkt(k), 20.0 * k) for k in range(800)]
    out = send_media(tx, call, stream, Channel(ImpairmentProfile.unlimited()))
    got = drain(rx, expect=800)
    assert len(out) == 800 and len(got) == 800
    assert sorted(p.seq for p, _ in got) == list(range(800))


def test_media_loss_matches_netem_drop_set():
    net = MemoryNetwork()
    r = LocalResolver(net)
    with Endpoint("rx", net, r, auto_answer=True) as rx, Endpoint("tx", net, r) as tx:
        call = tx.call(rx.address, 2000)
        stream = [(pkt(k, 160), 20.0 * k) for k in range(10_000)]
        prof = ImpairmentProfile(10**6, loss_prob=0.1, seed=42)
        send_media(tx, call, stream, Channel(prof))
        got = drain(rx)
        drops = {d.packet.seq for d in impair(shape(stream, prof), prof) if d.dropped}
        assert len(got) == 10_000 - len(drops)
        assert {p.seq for p, _ in got} == set(range(10_000)) - drops


def test_hangup_and_send_after_bye(pair):
    tx, rx = pair
    call = tx.call(rx.address, 2000)
    incoming = rx.accept(2)
    assert hangup(tx, call).state is CallPhase.TERMINATED
    assert incoming.wait_terminated(2)
    assert hangup(tx, call).state is CallPhase.TERMINATED  # no-op
    with pytest.raises(CallNotEstablished):
        send_media(tx, call, [(pkt(0), 0.0)], Channel(ImpairmentProfile.unlimited()))


def test_media_rejected_before_establishment():
    net = MemoryNetwork()
    r = LocalResolver(net)
    with Endpoint("tx", net, r) as tx:
        call = CallState("00" * 16, tx.address, EndpointAddress("127.0.0.1", 5099, 3100))
        with pytest.raises(CallNotEstablished):
            tx.send_media(call, [])
        call.transition(CallPhase.INVITING)
        with pytest.raises(CallNotEstablished):
            send_media(tx, call, [(pkt(0), 0.0)], Channel(ImpairmentProfile.unlimited()))


def test_bye_lost_leaves_callee_established():
    net = MemoryNetwork()
    net.drop_filter = lambda data, src, dst: CallSignal.decode(data).kind is SignalKind.BYE
    r = LocalResolver(net)
    with Endpoint("rx", net, r, auto_answer=True) as rx, Endpoint("tx", net, r) as tx:
        call = tx.call(rx.address, 2000)
        incoming = rx.accept(2)
        hangup(tx, call)
        assert call.state is CallPhase.TERMINATED
        assert not incoming.wait_terminated(0.2)
        assert incoming.established  # the session deadline has to end it


def test_state_machine_exhaustive():
    phases = list(CallPhase)
    for a, b in itertools.product(phases, phases):
        c = CallState("ff" * 16, EndpointAddress("h"), EndpointAddress("h"), state=a)
        if (a, b) in LEGAL_TRANSITIONS:
            c.transition(b)
            assert c.state is b
        else:
            with pytest.raises(IllegalTransition):
                c.transition(b)
            assert c.state is a
    # every reachable path from Idle follows the listed edges only
    reachable, frontier = {CallPhase.IDLE}, [CallPhase.IDLE]
    while frontier:
        s = frontier.pop()
        for a, b in LEGAL_TRANSITIONS:
            if a is s and b not in reachable:
                reachable.add(b)
                frontier.append(b)
    assert reachable == set(phases)
    assert not any(a is CallPhase.TERMINATED for a, _ in LEGAL_TRANSITIONS)


def test_media_multiset_equal_across_backends():
    prof = ImpairmentProfile(150, 20.0, 15.0, 0.2, seed=9)
    results = []
    for net in (MemoryNetwork(), UdpNetwork()):
        r = LocalResolver(net)
        with Endpoint("rx", net, r, auto_answer=True) as rx, Endpoint("tx", net, r) as tx:
            call = tx.call(rx.address, 2000)
            stream = [(pkt(k), 20.0 * k) for k in range(150)]
            sent = send_media(tx, call, stream, Channel(prof))
            got = drain(rx, expect=sum(not d.dropped for d in sent))
            results.append(Counter((p.seq, p.payload, t) for p, t in got))
    assert results[0] == results[1] and sum(results[0].values()) > 0
