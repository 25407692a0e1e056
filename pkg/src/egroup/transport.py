"""Reliable, ordered, framed point-to-point messaging over TCP.

Each process owns one Endpoint: a listening socket plus one live channel per
peer. A background thread per channel receives frames and either buffers them
for ``recv`` or, when an envelope belongs to a superseded epoch, rejects it
and sends a notice back to the sender so the rejection is observable.

The public operations are safe to call from one application control flow per
process; channel handles may move between threads but must not be used from
two threads at once.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections import deque
from typing import Callable, Optional

from . import wire
from .errors import (
    ConnectError,
    DeliveryError,
    FencingError,
    ProtocolError,
    SetupError,
    ShutdownError,
)
from .wire import Envelope

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
CONNECT_TIMEOUT = 10.0


def parse_address(address: str) -> tuple:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


def format_address(host: str, port: int) -> str:
    return f"{host}:{port}"


class FencingState:
    """Process-local epoch bookkeeping shared by the endpoint and the groups.

    ``current`` is the highest epoch of any group this process has formed;
    envelopes below it (or belonging to a retired epoch) are fenced off.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._current = -1
        self._retired = set()

    @property
    def current(self) -> int:
        with self._lock:
            return self._current

    def advance_to(self, epoch: int) -> None:
        with self._lock:
            if epoch > self._current:
                self._current = epoch

    def retire(self, epoch: int) -> None:
        with self._lock:
            self._retired.add(epoch)

    def is_retired(self, epoch: int) -> bool:
        with self._lock:
            return epoch in self._retired

    def is_stale(self, epoch: int) -> bool:
        with self._lock:
            return epoch < self._current or epoch in self._retired


class Channel:
    """One live connection to a peer, created by connect() or by the acceptor."""

    def __init__(self, sock: socket.socket, peer_id: str, peer_epoch: int,
                 initiator_id: str, endpoint: "Endpoint"):
        self.sock = sock
        self.peer_id = peer_id
        self.peer_epoch = peer_epoch
        self.initiator_id = initiator_id
        self._endpoint = endpoint
        self._wlock = threading.Lock()
        self._closed = threading.Event()
        self._notice_cond = threading.Condition()
        self._notices = deque()

    @property
    def initiated_here(self) -> bool:
        return self.initiator_id == self._endpoint.identity

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, envelope: Envelope) -> None:
        """Enqueue one envelope for in-order delivery to the peer."""
        if self._closed.is_set():
            raise DeliveryError(f"channel to {self.peer_id} is closed")
        data = wire.pack(envelope)
        try:
            with self._wlock:
                self.sock.sendall(data)
        except OSError as exc:
            self.close()
            raise DeliveryError(f"send to {self.peer_id} failed: {exc}") from exc

    def wait_reject(self, timeout: Optional[float] = None) -> Optional[dict]:
        """Pop the oldest rejection notice from the peer, waiting if needed."""
        with self._notice_cond:
            if not self._notices:
                self._notice_cond.wait(timeout)
            if self._notices:
                return self._notices.popleft()
        return None

    def _push_notice(self, notice: dict) -> None:
        with self._notice_cond:
            self._notices.append(notice)
            self._notice_cond.notify_all()

    def close(self, notify_peer: bool = False) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        if notify_peer:
            try:
                with self._wlock:
                    self.sock.sendall(wire.pack(Envelope(
                        epoch=0, tag=wire.TAG_CONTROL,
                        src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
                        payload=wire.control_payload("close"),
                    )))
            except OSError:
                pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        with self._notice_cond:
            self._notice_cond.notify_all()
        self._endpoint._forget_channel(self)

    def __repr__(self):
        state = "closed" if self.closed else "open"
        return f"<Channel to {self.peer_id} ({state})>"


class Endpoint:
    """Listening socket, channel table, and the shared receive buffer."""

    def __init__(self, address: str, identity: str, fencing: FencingState):
        self.identity = identity
        self.fencing = fencing
        host, port = parse_address(address)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            raise SetupError(f"cannot bind {address}: {exc}") from exc
        self._listener.listen(128)
        self.listen_address = format_address(host, self._listener.getsockname()[1])

        self._lock = threading.RLock()
        # All live channels keyed by peer incarnation id, whether this side
        # accepted or initiated them; at most one per peer.
        self.accepted_channels = {}
        self._chan_cond = threading.Condition(self._lock)
        self._buf_cond = threading.Condition()
        self._buffer = deque()
        self._closed = False
        self.stale_rejected_count = 0
        self.delivered_count = 0

        self._acceptor = threading.Thread(
            target=self._accept_loop, name=f"accept-{identity}", daemon=True)
        self._acceptor.start()

    # -- connection management -------------------------------------------------

    def connect(self, address: str, self_id: Optional[str] = None,
                expect_id: Optional[str] = None) -> Channel:
        """Open (or reuse) a channel to the endpoint listening at ``address``.

        The handshake exchanges incarnation ids and current epochs; if the
        peer already holds a live channel for this pair, the duplicate is
        collapsed deterministically and the surviving channel is returned.
        """
        self_id = self_id if self_id is not None else self.identity
        epoch = self.fencing.current
        try:
            sock = socket.create_connection(parse_address(address), CONNECT_TIMEOUT)
        except OSError as exc:
            raise ConnectError(f"cannot reach {address}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(HANDSHAKE_TIMEOUT)
        try:
            sock.sendall(wire.pack(Envelope(
                epoch=max(epoch, 0), tag=wire.TAG_CONTROL,
                src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
                payload=wire.control_payload(
                    "hello", incarnation_id=self_id, epoch=epoch),
            )))
            reply = wire.read_envelope(sock)
        except (OSError, ProtocolError) as exc:
            sock.close()
            raise ConnectError(f"handshake with {address} failed: {exc}") from exc
        msg = wire.parse_control(reply.payload)
        kind = msg.get("kind")
        if kind == "hello_reject":
            sock.close()
            reason = msg.get("reason")
            if reason == "duplicate":
                survivor = self.await_channel(msg.get("incarnation_id"), HANDSHAKE_TIMEOUT)
                if survivor is not None:
                    return survivor
                raise ConnectError(f"duplicate connect to {address} and no surviving channel")
            raise FencingError(
                f"peer at {address} rejected handshake: epoch {epoch} is stale "
                f"(peer is at {msg.get('epoch')})",
                envelope_epoch=epoch, receiver_epoch=msg.get("epoch"))
        if kind != "hello_ok":
            sock.close()
            raise ConnectError(f"unexpected handshake reply {kind!r} from {address}")
        peer_id = msg["incarnation_id"]
        if expect_id is not None and peer_id != expect_id:
            sock.close()
            raise ConnectError(
                f"endpoint at {address} is {peer_id}, expected {expect_id}")
        sock.settimeout(None)
        channel = Channel(sock, peer_id, msg.get("epoch", 0), self_id, self)
        return self._adopt(channel)

    def channel_to(self, peer_id: str) -> Optional[Channel]:
        with self._lock:
            return self.accepted_channels.get(peer_id)

    def await_channel(self, peer_id: str, timeout: float) -> Optional[Channel]:
        """Wait for a live channel to ``peer_id`` to appear (peer-initiated)."""
        with self._chan_cond:
            self._chan_cond.wait_for(
                lambda: self._closed or peer_id in self.accepted_channels,
                timeout)
            if self._closed:
                raise ShutdownError("endpoint closed while waiting for a channel")
            return self.accepted_channels.get(peer_id)

    def _adopt(self, channel: Channel) -> Channel:
        """Insert a freshly handshaken channel, collapsing duplicates.

        When two channels exist for one pair, the one initiated by the member
        with the lexicographically smaller incarnation id survives.
        """
        with self._lock:
            if self._closed:
                channel.close()
                raise ShutdownError("endpoint is closed")
            existing = self.accepted_channels.get(channel.peer_id)
            if existing is not None and not existing.closed:
                if existing.initiator_id == channel.initiator_id:
                    winner, loser = channel, existing  # reconnect: newest wins
                elif existing.initiator_id < channel.initiator_id:
                    winner, loser = existing, channel
                else:
                    winner, loser = channel, existing
            else:
                winner, loser = channel, None
            self.accepted_channels[channel.peer_id] = winner
            self._chan_cond.notify_all()
        if loser is not None and loser is not winner:
            loser.close()
        if winner is channel:
            threading.Thread(
                target=self._reader_loop, args=(channel,),
                name=f"reader-{self.identity}-{channel.peer_id}", daemon=True,
            ).start()
        return winner

    def _forget_channel(self, channel: Channel) -> None:
        with self._lock:
            if self.accepted_channels.get(channel.peer_id) is channel:
                del self.accepted_channels[channel.peer_id]

    # -- background reception --------------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            if self._closed:
                sock.close()
                return
            threading.Thread(
                target=self._handshake_incoming, args=(sock,),
                name=f"handshake-{self.identity}", daemon=True).start()

    def _handshake_incoming(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(HANDSHAKE_TIMEOUT)
        try:
            hello = wire.read_envelope(sock)
            msg = wire.parse_control(hello.payload)
            if msg.get("kind") != "hello":
                raise ProtocolError(f"expected hello, got {msg.get('kind')!r}")
            peer_id = msg["incarnation_id"]
            peer_epoch = int(msg["epoch"])
        except (OSError, ProtocolError, KeyError, ValueError) as exc:
            log.debug("handshake from %s failed: %s", self.identity, exc)
            sock.close()
            return

        def reject(reason, **fields):
            try:
                sock.sendall(wire.pack(Envelope(
                    epoch=0, tag=wire.TAG_CONTROL,
                    src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
                    payload=wire.control_payload(
                        "hello_reject", reason=reason,
                        incarnation_id=self.identity, **fields),
                )))
            except OSError:
                pass
            sock.close()

        if peer_epoch >= 0 and self.fencing.is_stale(peer_epoch):
            self._bump_stale()
            reject("stale_epoch", epoch=self.fencing.current)
            return
        with self._lock:
            existing = self.accepted_channels.get(peer_id)
            refuse = (existing is not None and not existing.closed
                      and existing.initiator_id < peer_id)
        if refuse:
            reject("duplicate")
            return
        try:
            sock.sendall(wire.pack(Envelope(
                epoch=0, tag=wire.TAG_CONTROL,
                src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
                payload=wire.control_payload(
                    "hello_ok", incarnation_id=self.identity,
                    epoch=self.fencing.current),
            )))
        except OSError:
            sock.close()
            return
        sock.settimeout(None)
        channel = Channel(sock, peer_id, peer_epoch, peer_id, self)
        try:
            self._adopt(channel)
        except ShutdownError:
            pass

    def _reader_loop(self, channel: Channel):
        while not channel.closed:
            try:
                envelope = wire.read_envelope(channel.sock)
            except (ConnectionError, OSError):
                break
            except ProtocolError as exc:
                log.warning("dropping malformed frame from %s: %s",
                            channel.peer_id, exc)
                break
            if envelope.tag == wire.TAG_CONTROL:
                self._handle_control(channel, envelope)
                continue
            if self.fencing.is_stale(envelope.epoch):
                self._reject_envelope(channel, envelope)
                continue
            with self._buf_cond:
                self._buffer.append((envelope, channel))
                self._buf_cond.notify_all()
        channel.close()

    def _handle_control(self, channel: Channel, envelope: Envelope):
        try:
            msg = wire.parse_control(envelope.payload)
        except ProtocolError:
            return
        kind = msg.get("kind")
        if kind == "reject_notice":
            channel._push_notice(msg)
        elif kind == "close":
            channel.close()

    def _reject_envelope(self, channel: Channel, envelope: Envelope):
        """Fence off a stale envelope: never buffer it, tell the sender."""
        self._bump_stale()
        notice = Envelope(
            epoch=0, tag=wire.TAG_CONTROL,
            src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
            payload=wire.control_payload(
                "reject_notice",
                envelope_epoch=envelope.epoch,
                receiver_epoch=self.fencing.current,
                tag=envelope.tag,
            ),
        )
        try:
            channel.send(notice)
        except DeliveryError:
            pass

    def _bump_stale(self):
        with self._lock:
            self.stale_rejected_count += 1

    # -- receive side ----------------------------------------------------------

    def recv(self, match: Optional[Callable[[Envelope], bool]] = None,
             timeout: Optional[float] = None) -> Envelope:
        """Return the oldest buffered envelope satisfying ``match``, blocking
        until one arrives. Non-matching envelopes from live epochs stay
        buffered."""
        envelope, _ = self.recv_with_channel(match, timeout)
        return envelope

    def recv_with_channel(self, match=None, timeout=None):
        """Like recv() but also returns the channel the envelope arrived on."""
        pred = match if match is not None else (lambda e: True)
        with self._buf_cond:
            while True:
                if self._closed:
                    raise ShutdownError("endpoint closed while waiting for a message")
                for i, (envelope, channel) in enumerate(self._buffer):
                    if pred(envelope):
                        del self._buffer[i]
                        self.delivered_count += 1
                        return envelope, channel
                if not self._buf_cond.wait(timeout):
                    raise TimeoutError("no matching envelope arrived in time")

    def purge_stale(self):
        """Drop (and reject) buffered envelopes made stale by an epoch advance."""
        dropped = []
        with self._buf_cond:
            keep = deque()
            for envelope, channel in self._buffer:
                if self.fencing.is_stale(envelope.epoch):
                    dropped.append((envelope, channel))
                else:
                    keep.append((envelope, channel))
            self._buffer = keep
        for envelope, channel in dropped:
            self._reject_envelope(channel, envelope)

    # -- lifecycle -------------------------------------------------------------

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
            channels = list(self.accepted_channels.values())
            self._chan_cond.notify_all()
        # shutdown wakes a thread blocked in accept(); close alone leaves it
        # holding the kernel file and the port stays in LISTEN
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        for channel in channels:
            channel.close()
        with self._buf_cond:
            self._buf_cond.notify_all()

    def __repr__(self):
        return f"<Endpoint {self.identity} at {self.listen_address}>"


def listen(address: str, identity: str, fencing: Optional[FencingState] = None) -> Endpoint:
    """Bind a listening endpoint; the resolved address (with the actual port)
    is available as ``endpoint.listen_address``."""
    return Endpoint(address, identity, fencing if fencing is not None else FencingState())


def match_fields(epoch: Optional[int] = None, tag: Optional[int] = None,
                 src_rank: Optional[int] = None) -> Callable[[Envelope], bool]:
    """Build a (epoch, tag, src_rank) predicate; None fields match anything."""

    def pred(e: Envelope) -> bool:
        return ((epoch is None or e.epoch == epoch)
                and (tag is None or e.tag == tag)
                and (src_rank is None or e.src_rank == src_rank))

    return pred
