"""Peer-to-peer call signaling and datagram media between two endpoints.

Signaling is a three-message subset of SIP: ``INVITE``, ``200`` (always
sent immediately: callees auto-answer) and ``BYE``.  Both signaling and
media ride on datagrams, either through an in-process :class:`MemoryNetwork`
or real loopback sockets (:class:`UdpNetwork`).  The two are interchangeable.

Signaling wire format (network byte order)::

    u16 length of the rest | u8 kind | 16 bytes call id | f64 sent-at ms |
    from address | to address

with each address encoded as ``u8 host length | host | u16 signaling port |
u16 media port``.  Media datagrams are ``f64 arrival ms`` followed by the
packet bytes; the arrival stamp is the channel's virtual delivery time.
"""

import enum
import queue
import socket
import struct
import threading
import uuid
from dataclasses import dataclass, field

from .audio_io import MediaPacket
from .errors import CallNotEstablished, ResolutionFailure, Timeout, TransportError

LOOPBACK = "127.0.0.1"
SIGNALING_PORT = 5061
MEDIA_PORT_MIN = 3000
MEDIA_PORT_MAX = 9000

_POLL_S = 0.02


@dataclass(frozen=True)
class EndpointAddress:
    host: str
    signaling_port: int = SIGNALING_PORT
    media_port: int = MEDIA_PORT_MIN

    def __post_init__(self):
        if not MEDIA_PORT_MIN <= self.media_port <= MEDIA_PORT_MAX:
            raise ValueError(f"media port {self.media_port} outside "
                             f"[{MEDIA_PORT_MIN}, {MEDIA_PORT_MAX}]")

    @property
    def signaling(self):
        return (self.host, self.signaling_port)

    @property
    def media(self):
        return (self.host, self.media_port)

    def sip_uri(self):
        return f"sip:{self.host}:{self.signaling_port}"


class SignalKind(enum.IntEnum):
    INVITE = 1
    ANSWER_200 = 2
    BYE = 3


@dataclass(frozen=True)
class CallSignal:
    kind: SignalKind
    call_id: str  # 32 hex digits
    from_addr: EndpointAddress
    to_addr: EndpointAddress
    sent_at_ms: float = 0.0

    def encode(self):
        body = (struct.pack("!B", self.kind) + bytes.fromhex(self.call_id)
                + struct.pack("!d", self.sent_at_ms)
                + _encode_addr(self.from_addr) + _encode_addr(self.to_addr))
        return struct.pack("!H", len(body)) + body

    @classmethod
    def decode(cls, data):
        (n,) = struct.unpack_from("!H", data)
        if n != len(data) - 2:
            raise TransportError(f"signal length {n} does not match datagram of {len(data)} bytes")
        off = 2
        kind = SignalKind(data[off])
        call_id = data[off + 1:off + 17].hex()
        (sent_at,) = struct.unpack_from("!d", data, off + 17)
        from_addr, off = _decode_addr(data, off + 25)
        to_addr, off = _decode_addr(data, off)
        return cls(kind, call_id, from_addr, to_addr, sent_at)


def _encode_addr(a):
    host = a.host.encode()
    return struct.pack("!B", len(host)) + host + struct.pack("!HH", a.signaling_port, a.media_port)


def _decode_addr(data, off):
    n = data[off]
    host = data[off + 1:off + 1 + n].decode()
    sig, media = struct.unpack_from("!HH", data, off + 1 + n)
    return EndpointAddress(host, sig, media), off + 5 + n


_ENVELOPE = struct.Struct("!d")


def encode_media(packet, arrive_ms):
    return _ENVELOPE.pack(arrive_ms) + packet.to_bytes()


def decode_media(data):
    (arrive,) = _ENVELOPE.unpack_from(data)
    return MediaPacket.from_bytes(data[_ENVELOPE.size:]), arrive


# datagram backends ---------------------------------------------------------

class MemoryNetwork:
    """In-process datagram fabric.  Sends to unbound addresses vanish, as with UDP.

    ``drop_filter(data, src, dst) -> bool`` lets tests lose specific datagrams.
    """

    def __init__(self):
        self._ports = {}
        self._lock = threading.Lock()
        self.drop_filter = None

    def bind(self, host, port):
        with self._lock:
            if (host, port) in self._ports:
                raise OSError(f"address {host}:{port} already in use")
            sock = _MemorySocket(self, (host, port))
            self._ports[(host, port)] = sock
        return sock

    def is_free(self, host, port):
        with self._lock:
            return (host, port) not in self._ports

    def _deliver(self, data, src, dst):
        if self.drop_filter is not None and self.drop_filter(data, src, dst):
            return
        with self._lock:
            sock = self._ports.get(dst)
        if sock is not None:
            sock._inbox.put((bytes(data), src))

    def _release(self, addr):
        with self._lock:
            self._ports.pop(addr, None)


class _MemorySocket:
    def __init__(self, net, addr):
        self._net = net
        self.address = addr
        self._inbox = queue.SimpleQueue()
        self.closed = False

    def sendto(self, data, addr):
        if self.closed:
            raise OSError("socket closed")
        self._net._deliver(data, self.address, tuple(addr))

    def recv(self, timeout=None):
        """Next ``(data, source)`` or ``None`` after ``timeout`` seconds (0 polls)."""
        try:
            if timeout == 0:
                return self._inbox.get_nowait()
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        if not self.closed:
            self.closed = True
            self._net._release(self.address)


class UdpNetwork:
    """Real datagram sockets on the loopback interface."""

    RCVBUF = 4 * 1024 * 1024

    def __init__(self):
        self.drop_filter = None

    def bind(self, host, port):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.RCVBUF)
            s.bind((host, port))
        except OSError:
            s.close()
            raise
        return _UdpSocket(s, self)

    def is_free(self, host, port):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            s.bind((host, port))
            return True
        except OSError:
            return False
        finally:
            s.close()


class _UdpSocket:
    def __init__(self, sock, net):
        self._sock = sock
        self._net = net
        self.address = sock.getsockname()
        self.closed = False

    def sendto(self, data, addr):
        if self._net.drop_filter is not None and self._net.drop_filter(data, self.address, tuple(addr)):
            return
        self._sock.sendto(data, tuple(addr))

    def recv(self, timeout=None):
        try:
            if timeout == 0:
                self._sock.setblocking(False)
            else:
                self._sock.settimeout(timeout)
            data, src = self._sock.recvfrom(65535)
            return data, src
        except (BlockingIOError, socket.timeout):
            return None
        except OSError:
            if self.closed:
                return None
            raise

    def close(self):
        if not self.closed:
            self.closed = True
            self._sock.close()


# address resolution ----------------------------------------------------------

class LocalResolver:
    """Maps endpoint names to loopback addresses.

    This is where a STUN client would sit.  On one host every endpoint
    needs its own ports, so endpoint *k* gets signaling port ``5061 + k``
    and media port ``3000 + 2k`` (skipping ports that are already taken).
    """

    def __init__(self, network, host=LOOPBACK):
        self.network = network
        self.host = host
        self._names = {}
        self._next = 0
        self._lock = threading.Lock()

    def resolve(self, name):
        with self._lock:
            if name in self._names:
                return self._names[name]
            while True:
                k = self._next
                self._next += 1
                media = MEDIA_PORT_MIN + 2 * k
                if media > MEDIA_PORT_MAX or SIGNALING_PORT + k > 65535:
                    raise ResolutionFailure("local port range exhausted")
                sig = SIGNALING_PORT + k
                if MEDIA_PORT_MIN <= sig <= MEDIA_PORT_MAX and sig % 2 == 0:
                    continue  # would collide with some endpoint's media port
                if self.network.is_free(self.host, sig) and self.network.is_free(self.host, media):
                    break
            addr = EndpointAddress(self.host, sig, media)
            self._names[name] = addr
            return addr


def resolve_address(endpoint_name, resolver):
    return resolver.resolve(endpoint_name)


# calls -----------------------------------------------------------------------

class CallPhase(enum.Enum):
    IDLE = "Idle"
    INVITING = "Inviting"
    ESTABLISHED = "Established"
    TERMINATED = "Terminated"


LEGAL_TRANSITIONS = frozenset({
    (CallPhase.IDLE, CallPhase.INVITING),
    (CallPhase.INVITING, CallPhase.ESTABLISHED),
    (CallPhase.INVITING, CallPhase.TERMINATED),
    (CallPhase.IDLE, CallPhase.ESTABLISHED),  # callee auto-answer
    (CallPhase.ESTABLISHED, CallPhase.TERMINATED),
})


class IllegalTransition(TransportError):
    pass


@dataclass
class CallState:
    call_id: str
    local: EndpointAddress
    remote: EndpointAddress
    state: CallPhase = CallPhase.IDLE
    started_at_ms: float = 0.0
    ended_at_ms: float | None = None  # hang-up time, when the peer reported it
    _ended: threading.Event = field(default_factory=threading.Event, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def stream_id(self):
        return int(self.call_id[:8], 16)

    @property
    def media_ports(self):
        return self.local.media_port, self.remote.media_port

    def transition(self, new):
        with self._lock:
            if (self.state, new) not in LEGAL_TRANSITIONS:
                raise IllegalTransition(f"{self.state.value} -> {new.value}")
            self.state = new
            if new is CallPhase.TERMINATED:
                self._ended.set()

    def terminate(self):
        """Move to Terminated if not already there; returns False if it was."""
        with self._lock:
            if self.state is CallPhase.TERMINATED:
                return False
            if self.state is CallPhase.IDLE:
                raise IllegalTransition("Idle -> Terminated")
            self.state = CallPhase.TERMINATED
            self._ended.set()
            return True

    def wait_terminated(self, timeout=None):
        return self._ended.wait(timeout)

    @property
    def established(self):
        return self.state is CallPhase.ESTABLISHED


class Endpoint:
    """One peer: a signaling socket served by its own thread, plus a media socket.

    With ``auto_answer`` every incoming INVITE is answered with 200 at once.
    Media reception is left to whoever owns the endpoint (see ``session``).
    """

    def __init__(self, name, network, resolver, auto_answer=False):
        self.name = name
        self.address = resolver.resolve(name)
        self.auto_answer = auto_answer
        self.signaling = network.bind(self.address.host, self.address.signaling_port)
        try:
            self.media = network.bind(self.address.host, self.address.media_port)
        except OSError:
            self.signaling.close()
            raise
        self.calls = {}
        self._incoming = queue.SimpleQueue()
        self._pending = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, name=f"sig-{name}", daemon=True)
        self._thread.start()

    def _serve(self):
        while not self._stop.is_set():
            item = self.signaling.recv(_POLL_S)
            if item is None:
                continue
            try:
                sig = CallSignal.decode(item[0])
            except (TransportError, ValueError, struct.error, IndexError):
                continue
            self._handle(sig)

    def _handle(self, sig):
        if sig.kind is SignalKind.INVITE:
            if not self.auto_answer:
                return
            call = CallState(sig.call_id, self.address, sig.from_addr, started_at_ms=sig.sent_at_ms)
            call.transition(CallPhase.ESTABLISHED)
            with self._lock:
                self.calls[sig.call_id] = call
            reply = CallSignal(SignalKind.ANSWER_200, sig.call_id, self.address, sig.from_addr,
                               sig.sent_at_ms)
            self.signaling.sendto(reply.encode(), sig.from_addr.signaling)
            self._incoming.put(call)
        elif sig.kind is SignalKind.ANSWER_200:
            with self._lock:
                waiter = self._pending.get(sig.call_id)
            if waiter is not None:
                waiter.set()
        elif sig.kind is SignalKind.BYE:
            with self._lock:
                call = self.calls.get(sig.call_id)
            if call is not None:
                if sig.sent_at_ms == sig.sent_at_ms:  # NaN: hang-up time unknown
                    call.ended_at_ms = sig.sent_at_ms
                call.terminate()

    def accept(self, timeout=None):
        """Next auto-answered call, or ``None`` after ``timeout`` seconds."""
        try:
            return self._incoming.get(timeout=timeout)
        except queue.Empty:
            return None

    def call(self, callee, timeout_ms=2000, now_ms=0.0):
        call = CallState(uuid.uuid4().hex, self.address, callee, started_at_ms=now_ms)
        answered = threading.Event()
        with self._lock:
            self._pending[call.call_id] = answered
            self.calls[call.call_id] = call
        call.transition(CallPhase.INVITING)
        invite = CallSignal(SignalKind.INVITE, call.call_id, self.address, callee, now_ms)
        self.signaling.sendto(invite.encode(), callee.signaling)
        ok = answered.wait(timeout_ms / 1000.0)
        with self._lock:
            self._pending.pop(call.call_id, None)
        if not ok:
            call.transition(CallPhase.TERMINATED)
            raise Timeout(timeout_ms)
        call.transition(CallPhase.ESTABLISHED)
        return call

    def hangup(self, call, send_bye=True, now_ms=None):
        """Terminate ``call``; BYE is best effort.  Repeated calls are no-ops.

        ``now_ms`` is the hang-up time on the caller's clock; it travels in
        the BYE so the peer can end its recording at the same instant.
        """
        if not call.terminate():
            return call
        call.ended_at_ms = now_ms
        if send_bye:
            bye = CallSignal(SignalKind.BYE, call.call_id, self.address, call.remote,
                             float("nan") if now_ms is None else now_ms)
            try:
                self.signaling.sendto(bye.encode(), call.remote.signaling)
            except OSError:
                pass
        return call

    def send_media(self, call, deliveries):
        """Put already-scheduled deliveries on the wire toward the peer.

        Dropped deliveries are not sent.  Returns the number of datagrams sent.
        """
        if not call.established:
            raise CallNotEstablished(f"call {call.call_id} is {call.state.value}")
        sent = 0
        for d in deliveries:
            if d.arrive_time_ms is not None:
                self.media.sendto(encode_media(d.packet, d.arrive_time_ms), call.remote.media)
                sent += 1
        return sent

    def close(self):
        self._stop.set()
        self._thread.join()
        self.signaling.close()
        self.media.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def establish_call(caller, callee, timeout_ms=2000, now_ms=0.0):
    """Dial ``callee`` (an address) from endpoint ``caller``."""
    return caller.call(callee, timeout_ms, now_ms)


def send_media(endpoint, call, stream, channel):
    """Schedule ``(packet, depart_ms)`` pairs through ``channel`` and transmit.

    Returns every :class:`~voiprelay.netem.ScheduledDelivery`, dropped ones
    included.  Nothing is retransmitted.
    """
    if not call.established:
        raise CallNotEstablished(f"call {call.call_id} is {call.state.value}")
    deliveries = [channel.submit(p, t) for p, t in stream]
    endpoint.send_media(call, deliveries)
    return deliveries


def hangup(endpoint, call, send_bye=True, now_ms=None):
    return endpoint.hangup(call, send_bye, now_ms)
