"""Group identity: member descriptors, epoch-versioned rosters, inter-group links.

A Group is an immutable value (epoch, ordered roster, caller's rank). Scaling
operations never mutate a group; they return new Group values with a higher
epoch, and the process-local runtime decides which epochs are still live.
"""

from __future__ import annotations

import enum
import hashlib
import os
import uuid
from dataclasses import dataclass, field
from typing import Optional, TYPE_CHECKING

from .errors import ProtocolError, RetiredGroupError

if TYPE_CHECKING:
    from .node import Node

# Fixed width of host-label blocks exchanged while deciding whether a host can
# be shut down. Labels longer than this are rejected up front.
HOST_LABEL_WIDTH = 64
# Block content contributed by members that are leaving; a real host label
# equal to this is rejected at configuration time so the sentinel stays
# unambiguous.
SENTINEL_BLOCK = b"N" * HOST_LABEL_WIDTH


def new_incarnation_id(host_label: str = "") -> str:
    """Mint a process-unique identity string; sorts arbitrarily but stably."""
    prefix = f"{host_label}.{os.getpid()}." if host_label else f"{os.getpid()}."
    return prefix + uuid.uuid4().hex[:12]


@dataclass(frozen=True)
class MemberDescriptor:
    """Identity of one worker process."""

    host_label: str
    listen_address: str
    incarnation_id: str

    def __post_init__(self):
        if not self.host_label:
            raise ValueError("host_label must be non-empty")
        if len(self.host_label.encode()) > HOST_LABEL_WIDTH:
            raise ValueError(
                f"host_label exceeds {HOST_LABEL_WIDTH} bytes: {self.host_label!r}"
            )
        if self.host_label.encode() == SENTINEL_BLOCK:
            raise ValueError("host_label collides with the removal sentinel")
        if not self.incarnation_id:
            raise ValueError("incarnation_id must be non-empty")

    def to_json(self) -> dict:
        return {
            "host_label": self.host_label,
            "listen_address": self.listen_address,
            "incarnation_id": self.incarnation_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MemberDescriptor":
        try:
            return cls(
                host_label=obj["host_label"],
                listen_address=obj["listen_address"],
                incarnation_id=obj["incarnation_id"],
            )
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed member descriptor: {obj!r}") from exc


def check_roster(roster: tuple) -> None:
    ids = [m.incarnation_id for m in roster]
    if len(set(ids)) != len(ids):
        raise ValueError("roster contains duplicate incarnation ids")


@dataclass(frozen=True)
class Group:
    """An epoch-versioned, totally ordered roster with the caller's rank.

    ``node`` binds the value to the process-local runtime so communication
    operations can run; synthetic unbound groups (node=None) still support
    rank/size and are handy in tests.
    """

    epoch: int
    roster: tuple
    my_rank: int
    node: Optional["Node"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.epoch < 0:
            raise ValueError(f"epoch must be non-negative, got {self.epoch}")
        if not (0 <= self.my_rank < len(self.roster)):
            raise ValueError(
                f"my_rank {self.my_rank} out of range for roster of {len(self.roster)}"
            )
        check_roster(self.roster)

    @property
    def retired(self) -> bool:
        return self.node is not None and self.node.fencing.is_retired(self.epoch)

    def _check_live(self):
        if self.retired:
            raise RetiredGroupError(f"group at epoch {self.epoch} is retired")

    def rank(self) -> int:
        self._check_live()
        return self.my_rank

    def size(self) -> int:
        self._check_live()
        return len(self.roster)

    def retire(self) -> None:
        """Mark this group retired; idempotent. All later operations fail."""
        if self.node is None:
            raise ProtocolError("cannot retire a group that is not bound to a node")
        self.node.fencing.retire(self.epoch)

    def member(self, rank: int) -> MemberDescriptor:
        if not (0 <= rank < len(self.roster)):
            raise ValueError(f"rank {rank} out of range for group of {len(self.roster)}")
        return self.roster[rank]

    def descriptor(self) -> MemberDescriptor:
        return self.roster[self.my_rank]


class Side(enum.Enum):
    PARENT = "parent_side"
    CHILD = "child_side"


@dataclass
class InterGroup:
    """A parent/child linkage produced by spawn, before merging.

    Single use: merging consumes it.
    """

    local_group: Group
    remote_roster: tuple
    side: Side
    # Rank (in the parent-side local group) of the member that performed the
    # spawn; it coordinates the merge and children registered through it.
    parent_root_rank: int = 0
    consumed: bool = field(default=False, compare=False)

    def __post_init__(self):
        local_ids = {m.incarnation_id for m in self.local_group.roster}
        remote_ids = {m.incarnation_id for m in self.remote_roster}
        if local_ids & remote_ids:
            raise ValueError("local and remote rosters overlap")


@dataclass(frozen=True)
class RetirementToken:
    """Handed to a removing member in place of a successor group.

    ``epoch`` is the epoch at which the member's participation ended; the
    holder must stop group communication and exit.
    """

    epoch: int


def roster_digest(roster) -> str:
    """SHA-256 over ``incarnation_id|host_label|listen_address\\n`` in rank order."""
    h = hashlib.sha256()
    for m in roster:
        h.update(
            f"{m.incarnation_id}|{m.host_label}|{m.listen_address}\n".encode()
        )
    return h.hexdigest()
