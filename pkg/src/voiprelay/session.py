"""The two roles of a relay: a sender that plays a file into a call and a
receiver that answers and records it.

The sender never suppresses silence (no VAD) and loops the clip when the
call outlasts it.  The receiver writes frames by sequence number, not by
arrival order, and zero-fills whatever did not arrive by the deadline.
"""

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import (AudioClip, DEFAULT_FRAME_MS, canonicalize, depacketize, frame_count,
                       packetize, read_wav, samples_per_frame, write_wav)
from .errors import AudioError, CallNotEstablished, FileUnreadable
from .transport import EndpointAddress, decode_media

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SenderSpec:
    play_file: Path
    target: EndpointAddress | None = None
    vad_enabled: bool = False

    def __post_init__(self):
        if self.vad_enabled:
            raise ValueError("voice activity detection is not supported; frames are never suppressed")


@dataclass(frozen=True)
class ReceiverSpec:
    record_file: Path
    auto_answer: bool = True

    def __post_init__(self):
        if not self.auto_answer:
            raise ValueError("only auto-answer receivers are supported")


@dataclass
class SendStats:
    packets_sent: int
    bytes_sent: int
    duration_ms: float
    played: AudioClip
    deliveries: list = field(repr=False, default_factory=list)


def load_play_clip(path):
    try:
        return canonicalize(read_wav(path))
    except (AudioError, OSError) as e:
        raise FileUnreadable(f"cannot play {path}: {e}") from e


def loop_to_frames(clip, n_frames, frame_ms=DEFAULT_FRAME_MS):
    """Tile ``clip`` so it fills exactly ``n_frames`` frames."""
    need = n_frames * samples_per_frame(frame_ms)
    src = clip.samples
    if src.size == 0:
        out = np.zeros(need, dtype=np.int16)
    else:
        out = np.resize(src, need)
    return AudioClip(out, clip.sample_rate, 1)


def run_sender(spec, call, endpoint, channel, clock, deadline_s, frame_ms=DEFAULT_FRAME_MS,
               clip=None, transform=None):
    """Stream the play file into ``call`` for ``deadline_s`` seconds of clock time.

    Frame ``k`` departs at ``start + k * frame_ms``; the call is loaded for
    the whole deadline even if the file is shorter.  ``transform`` is an
    optional ``AudioClip -> AudioClip`` hook applied before transmission.
    """
    if not call.established:
        raise CallNotEstablished(f"call {call.call_id} is {call.state.value}")
    if clip is None:
        clip = load_play_clip(spec.play_file)
    if transform is not None:
        clip = canonicalize(transform(clip))
    duration_ms = deadline_s * 1000.0
    n = frame_count(duration_ms, frame_ms)
    played = loop_to_frames(clip, n, frame_ms)
    packets = packetize(played, frame_ms, stream_id=call.stream_id)
    start = clock.now_ms()
    deliveries = []
    sent_bytes = 0
    for k, pkt in enumerate(packets):
        depart = start + k * frame_ms
        clock.sleep_until(depart)
        if not call.established:
            break  # hung up early
        d = channel.submit(pkt, depart)
        endpoint.send_media(call, [d])
        deliveries.append(d)
        sent_bytes += len(pkt.payload)
    clock.sleep_until(start + duration_ms)
    return SendStats(len(deliveries), sent_bytes, clock.now_ms() - start, played, deliveries)


@dataclass
class ReceivedPacket:
    packet: object
    arrive_time_ms: float


@dataclass
class RecordingResult:
    path: Path
    call_id: str | None
    expected_frames: int
    received: list = field(repr=False, default_factory=list)
    late: int = 0
    timed_out: bool = False
    ended_by: str = ""

    @property
    def frames_received(self):
        return len({r.packet.seq for r in self.received})


class Receiver:
    """Auto-answer, auto-record task bound to one endpoint.

    The first call to arrive is recorded.  Recording ends on BYE, on the
    call deadline (``started_at + expected_duration_s`` on ``clock``), or
    when :meth:`kill` is called, whichever comes first.
    """

    def __init__(self, spec, endpoint, clock, expected_duration_s, frame_ms=DEFAULT_FRAME_MS,
                 wait_for_call_s=None):
        self.spec = spec
        self.endpoint = endpoint
        self.clock = clock
        self.expected_duration_s = expected_duration_s
        self.frame_ms = frame_ms
        self.wait_for_call_s = expected_duration_s if wait_for_call_s is None else wait_for_call_s
        self._kill = threading.Event()
        self._result = None
        self._error = None
        self._thread = threading.Thread(target=self._run, name=f"rx-{endpoint.name}", daemon=True)

    def start(self):
        self._listen_start = self.clock.now_ms()
        self._thread.start()
        return self

    def kill(self):
        self._kill.set()

    def join(self, timeout=None):
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError("receiver did not finish")
        if self._error is not None:
            raise self._error
        return self._result

    def _run(self):
        try:
            self._result = self._record()
        except BaseException as e:  # surfaced by join()
            self._error = e

    def _record(self):
        ep = self.endpoint
        call = None
        pending = []
        ended_by = "deadline"
        no_call_deadline = self._listen_start + self.wait_for_call_s * 1000.0
        while True:
            if call is None:
                call = ep.accept(timeout=0)
            item = ep.media.recv(0.005)
            if item is not None:
                pending.append(decode_media(item[0]))
            if self._kill.is_set():
                ended_by = "kill"
                break
            if call is not None:
                if not call.established:
                    ended_by = "bye"
                    break
                if self.clock.now_ms() >= call.started_at_ms + self.expected_duration_s * 1000.0:
                    break
            elif self.clock.now_ms() >= no_call_deadline:
                break
        if call is None:
            call = ep.accept(timeout=0)
        while (item := ep.media.recv(0)) is not None:
            pending.append(decode_media(item[0]))

        n_frames = frame_count(self.expected_duration_s * 1000.0, self.frame_ms)
        if call is None:
            write_wav(AudioClip([], 16000, 1), self.spec.record_file)
            return RecordingResult(Path(self.spec.record_file), None, n_frames, timed_out=True,
                                   ended_by=ended_by)
        call.terminate()
        deadline = call.started_at_ms + self.expected_duration_s * 1000.0
        if ended_by == "bye" and call.ended_at_ms is not None and call.ended_at_ms < deadline:
            # the caller hung up early: the recording covers the call only
            deadline = call.ended_at_ms
            n_frames = frame_count(max(0.0, deadline - call.started_at_ms), self.frame_ms)
        received, late = [], 0
        for pkt, arrive in pending:
            if pkt.stream_id != call.stream_id:
                continue
            if arrive > deadline:
                late += 1
                continue
            received.append(ReceivedPacket(pkt, arrive))
        received.sort(key=lambda r: r.arrive_time_ms)
        clip = depacketize([r.packet for r in received], n_frames, self.frame_ms)
        write_wav(clip, self.spec.record_file)
        log.debug("recorded %d/%d frames from call %s (%d late)",
                  len(received), n_frames, call.call_id, late)
        return RecordingResult(Path(self.spec.record_file), call.call_id, n_frames, received, late,
                               ended_by=ended_by)


def run_receiver(spec, endpoint, expected_duration_s, clock, frame_ms=DEFAULT_FRAME_MS):
    """Blocking form of :class:`Receiver`."""
    return Receiver(spec, endpoint, clock, expected_duration_s, frame_ms).start().join()


def post_process(raw_path, out_path=None):
    """Convert a raw recording to canonical WAV (the ffmpeg step)."""
    raw_path = Path(raw_path)
    if out_path is None:
        out_path = raw_path.with_name(raw_path.stem + "_ffmpeg.wav")
    write_wav(canonicalize(read_wav(raw_path)), out_path)
    return Path(out_path)
