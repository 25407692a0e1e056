"""Per-process runtime state: identity, endpoint, epochs, and group plumbing.

A Node owns exactly one Endpoint and one FencingState for the lifetime of the
process, no matter how many groups the process moves through. Channels to
peers are opened on first use and reused across epochs.
"""

from __future__ import annotations

import dataclasses
import os
import socket
import threading
from typing import Optional

from . import wire
from .errors import DeliveryError, FencingError, RetiredGroupError
from .groups import Group, MemberDescriptor, new_incarnation_id
from .transport import Endpoint, FencingState, match_fields
from .wire import Envelope

DEFAULT_BIND = "127.0.0.1:0"


class Node:
    """The process-local anchor that groups, collectives, and spawns share."""

    def __init__(self, host_label: Optional[str] = None, bind: str = DEFAULT_BIND):
        if host_label is None:
            host_label = os.environ.get("EG_HOST_LABEL") or socket.gethostname()
        self.host_label = host_label
        self.incarnation_id = new_incarnation_id(host_label)
        self.fencing = FencingState()
        self.endpoint = Endpoint(bind, self.incarnation_id, self.fencing)
        self._tag_lock = threading.Lock()
        self._tag_counters = {}

    @property
    def listen_address(self) -> str:
        return self.endpoint.listen_address

    def descriptor(self) -> MemberDescriptor:
        return MemberDescriptor(
            host_label=self.host_label,
            listen_address=self.listen_address,
            incarnation_id=self.incarnation_id,
        )

    # -- groups ----------------------------------------------------------------

    def register_group(self, group: Group) -> Group:
        """Bind a group to this node and advance the epoch fence past it."""
        if group.roster[group.my_rank].incarnation_id != self.incarnation_id:
            raise ValueError("my_rank does not point at this node's descriptor")
        bound = dataclasses.replace(group, node=self)
        self.fencing.advance_to(group.epoch)
        self.endpoint.purge_stale()
        return bound

    def make_group(self, epoch: int, roster, my_rank: int) -> Group:
        return self.register_group(Group(epoch=epoch, roster=tuple(roster),
                                         my_rank=my_rank))

    # -- messaging -------------------------------------------------------------

    def channel_to(self, member: MemberDescriptor):
        """Reuse or open the single live channel to ``member``."""
        channel = self.endpoint.channel_to(member.incarnation_id)
        if channel is not None and not channel.closed:
            return channel
        return self.endpoint.connect(member.listen_address,
                                     expect_id=member.incarnation_id)

    def send_to(self, member: MemberDescriptor, envelope: Envelope) -> None:
        """Send outside any group context (bootstrap, merge control)."""
        try:
            self.channel_to(member).send(envelope)
        except DeliveryError:
            # The channel may have been collapsed by a concurrent duplicate
            # connect; one fresh attempt covers that.
            self.channel_to(member).send(envelope)

    def send(self, group: Group, dst_rank: int, tag: int, payload: bytes) -> None:
        """Send one envelope within ``group``, refusing stale or retired epochs
        before anything reaches the wire."""
        self.check_group_live(group)
        self.send_to(group.member(dst_rank),
                     Envelope(epoch=group.epoch, tag=tag,
                              src_rank=group.my_rank, dst_rank=dst_rank,
                              payload=payload))

    def recv_on(self, group: Group, tag: int, src_rank: Optional[int] = None,
                timeout: Optional[float] = None) -> Envelope:
        self.check_group_live(group)
        return self.endpoint.recv(
            match_fields(epoch=group.epoch, tag=tag, src_rank=src_rank),
            timeout=timeout)

    def check_group_live(self, group: Group) -> None:
        if self.fencing.is_retired(group.epoch):
            raise RetiredGroupError(
                f"group at epoch {group.epoch} was retired on this process")
        if self.fencing.is_stale(group.epoch):
            raise FencingError(
                f"group epoch {group.epoch} is behind this process's current "
                f"epoch {self.fencing.current}",
                envelope_epoch=group.epoch,
                receiver_epoch=self.fencing.current)

    def next_collective_tag(self, epoch: int) -> int:
        """Per-epoch tag sequence; every member draws the same values in the
        same order because collectives run in lockstep."""
        with self._tag_lock:
            value = self._tag_counters.get(epoch, wire.TAG_COLL_BASE)
            self._tag_counters[epoch] = value + 1
            return value

    # -- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        self.endpoint.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"<Node {self.incarnation_id} on {self.host_label}>"
