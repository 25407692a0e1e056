"""Runtime process creation: launch children, register them with the spawning
root, and link both sides as an InterGroup ready to merge.

Host placement is emulated: children are local processes that receive their
logical host label through the bootstrap environment, so multi-host layouts
can be exercised on one machine. The launcher is pluggable; tests use an
in-process thread launcher, the benchmark uses real subprocesses.
"""

from __future__ import annotations

import hashlib
import os
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .collectives import _err, _ok, _unwrap, allgather, broadcast, wire_tag_is
from .errors import NotSpawnedError, ProtocolError, SpawnError
from .groups import Group, InterGroup, MemberDescriptor, Side
from .node import Node
from .wire import Envelope

ENV_PARENT_ADDR = "EG_PARENT_ADDR"
ENV_PARENT_EPOCH = "EG_PARENT_EPOCH"
ENV_CHILD_INDEX = "EG_CHILD_INDEX"
ENV_HOST_LABEL = "EG_HOST_LABEL"
ENV_CHILD_COUNT = "EG_CHILD_COUNT"
# Initial-member rendezvous (driver bootstrap), same reserved prefix.
ENV_RENDEZVOUS_ADDR = "EG_RENDEZVOUS_ADDR"
ENV_MEMBER_INDEX = "EG_MEMBER_INDEX"
ENV_WORLD_SIZE = "EG_WORLD_SIZE"
ENV_PREFIX = "EG_"

DEFAULT_REGISTRATION_TIMEOUT = 30.0


@dataclass(frozen=True)
class SpawnSpec:
    """What to launch: program, arguments, how many copies, where."""

    program: str
    args: tuple = ()
    count: int = 1
    host_labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        if self.host_labels is not None:
            object.__setattr__(self, "host_labels", tuple(self.host_labels))
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if self.host_labels is not None and len(self.host_labels) != self.count:
            raise ValueError(
                f"host_labels has {len(self.host_labels)} entries for "
                f"count {self.count}")

    def digest(self, root: int) -> bytes:
        body = wire.json_payload({
            "program": self.program,
            "args": list(self.args),
            "count": self.count,
            "host_labels": list(self.host_labels) if self.host_labels else None,
            "root": root,
        })
        return hashlib.sha256(body).digest()

    def label_for(self, index: int, fallback: str) -> str:
        if self.host_labels is not None:
            return self.host_labels[index]
        return fallback


@dataclass(frozen=True)
class BootstrapTicket:
    """How a spawned child finds its parent, carried in the environment."""

    parent_address: str
    parent_epoch: int
    child_index: int
    host_label: str
    child_count: int

    def __post_init__(self):
        if not (0 <= self.child_index < self.child_count):
            raise ValueError(
                f"child_index {self.child_index} out of range for "
                f"count {self.child_count}")
        if self.parent_epoch < 0:
            raise ValueError("parent_epoch must be non-negative")

    def to_env(self) -> dict:
        return {
            ENV_PARENT_ADDR: self.parent_address,
            ENV_PARENT_EPOCH: str(self.parent_epoch),
            ENV_CHILD_INDEX: str(self.child_index),
            ENV_HOST_LABEL: self.host_label,
            ENV_CHILD_COUNT: str(self.child_count),
        }

    @classmethod
    def from_env(cls, environ=None) -> "BootstrapTicket":
        environ = os.environ if environ is None else environ
        if ENV_PARENT_ADDR not in environ:
            raise NotSpawnedError(
                "this process was not created by spawn (no bootstrap "
                "ticket in the environment)")
        try:
            return cls(
                parent_address=environ[ENV_PARENT_ADDR],
                parent_epoch=int(environ[ENV_PARENT_EPOCH]),
                child_index=int(environ[ENV_CHILD_INDEX]),
                host_label=environ[ENV_HOST_LABEL],
                child_count=int(environ[ENV_CHILD_COUNT]),
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed bootstrap ticket: {exc}") from exc


class Launcher:
    """Starts one child per call; subclasses decide how and where."""

    def launch(self, spec: SpawnSpec, index: int, ticket_env: dict):
        raise NotImplementedError

    def stop(self, handle) -> None:
        raise NotImplementedError


class LocalProcessLauncher(Launcher):
    """Run children as local subprocesses with the ticket in their environment."""

    def __init__(self, extra_env: Optional[dict] = None, stdout=None, stderr=None):
        self.extra_env = dict(extra_env) if extra_env else {}
        self.stdout = stdout
        self.stderr = stderr

    def launch(self, spec: SpawnSpec, index: int, ticket_env: dict):
        env = {k: v for k, v in os.environ.items()
               if not k.startswith(ENV_PREFIX)}
        env.update(self.extra_env)
        env.update(ticket_env)
        argv = [spec.program] + list(spec.args)
        try:
            proc = subprocess.Popen(argv, env=env,
                                    stdout=self.stdout, stderr=self.stderr)
        except OSError as exc:
            raise SpawnError(f"cannot launch {spec.program}: {exc}") from exc
        # Reap in the background so abandoned children never linger as zombies.
        threading.Thread(target=proc.wait, daemon=True,
                         name=f"reap-{proc.pid}").start()
        return proc

    def stop(self, handle) -> None:
        if handle.poll() is not None:
            return
        handle.terminate()
        try:
            handle.wait(2.0)
        except subprocess.TimeoutExpired:
            handle.kill()


class ThreadLauncher(Launcher):
    """Run children as threads of this process; used by tests.

    ``target`` is called with the ticket environment dict and plays the role
    of the child program's main().
    """

    def __init__(self, target):
        self.target = target

    def launch(self, spec: SpawnSpec, index: int, ticket_env: dict):
        thread = threading.Thread(target=self.target, args=(dict(ticket_env),),
                                  daemon=True, name=f"child-{index}")
        thread.start()
        return thread

    def stop(self, handle) -> None:
        pass  # threads cannot be cancelled; targets are expected to finish


def spawn(group: Group, root: int, spec: SpawnSpec,
          launcher: Optional[Launcher] = None,
          registration_timeout: float = DEFAULT_REGISTRATION_TIMEOUT,
          ) -> InterGroup:
    """Collectively create ``spec.count`` children from ``root``.

    Either every child registers and all members return an InterGroup whose
    remote roster lists the children in child_index order, or the whole
    operation fails with a spawn error; never a partial inter-group.
    """
    node = group.node
    if node is None:
        raise ValueError("group is not bound to a node")
    if not (0 <= root < len(group.roster)):
        raise ValueError(f"root {root} out of range for group of {len(group.roster)}")

    digests = allgather(group, spec.digest(root))
    width = hashlib.sha256().digest_size
    if any(digests[i:i + width] != digests[:width]
           for i in range(0, len(digests), width)):
        raise ProtocolError("spawn arguments differ across members")

    if group.my_rank != root:
        outcome = wire.parse_json_payload(_unwrap(broadcast(group, root, b"")))
        remote = tuple(MemberDescriptor.from_json(m) for m in outcome["children"])
        return InterGroup(local_group=group, remote_roster=remote,
                          side=Side.PARENT, parent_root_rank=root)

    launcher = launcher if launcher is not None else LocalProcessLauncher()
    try:
        remote = _launch_and_register(node, group, spec, launcher,
                                      registration_timeout)
    except Exception as exc:
        broadcast(group, root, _err(exc))
        raise
    broadcast(group, root, _ok(wire.json_payload(
        {"children": [m.to_json() for m in remote]})))
    return InterGroup(local_group=group, remote_roster=remote,
                      side=Side.PARENT, parent_root_rank=root)


def _launch_and_register(node, group, spec, launcher, registration_timeout):
    handles = []
    registered = {}
    try:
        for index in range(spec.count):
            ticket = BootstrapTicket(
                parent_address=node.listen_address,
                parent_epoch=group.epoch,
                child_index=index,
                host_label=spec.label_for(index, node.host_label),
                child_count=spec.count,
            )
            handles.append(launcher.launch(spec, index, ticket.to_env()))

        deadline = time.monotonic() + registration_timeout
        while len(registered) < spec.count:
            try:
                env = node.endpoint.recv(
                    wire_tag_is(wire.TAG_SPAWN_REGISTER),
                    timeout=max(0.05, deadline - time.monotonic()))
            except TimeoutError:
                missing = sorted(set(range(spec.count)) - set(registered))
                raise SpawnError(
                    f"children failed to register within "
                    f"{registration_timeout:.0f}s: missing child_index "
                    f"values {missing}") from None
            msg = wire.parse_json_payload(env.payload)
            index = msg.get("child_index")
            if not isinstance(index, int) or not (0 <= index < spec.count):
                raise ProtocolError(f"registration with bad child_index {index!r}")
            registered[index] = MemberDescriptor.from_json(msg["descriptor"])
    except Exception as exc:
        _abort_children(node, group, launcher, handles, registered, exc)
        raise

    remote = tuple(registered[i] for i in range(spec.count))
    reply = _ok(wire.json_payload({
        "parents": [m.to_json() for m in group.roster],
        "children": [m.to_json() for m in remote],
        "parent_root_rank": group.my_rank,
    }))
    for member in remote:
        node.send_to(member, Envelope(
            epoch=group.epoch, tag=wire.TAG_SPAWN_REPLY,
            src_rank=group.my_rank, dst_rank=wire.NO_RANK, payload=reply))
    return remote


def _abort_children(node, group, launcher, handles, registered, exc):
    payload = _err(SpawnError(f"spawn aborted: {exc}"))
    for member in registered.values():
        try:
            node.send_to(member, Envelope(
                epoch=group.epoch, tag=wire.TAG_SPAWN_REPLY,
                src_rank=group.my_rank, dst_rank=wire.NO_RANK,
                payload=payload))
        except Exception:
            pass
    for handle in handles:
        try:
            launcher.stop(handle)
        except Exception:
            pass


def attach_parent(node: Optional[Node] = None,
                  ticket: Optional[BootstrapTicket] = None,
                  timeout: float = DEFAULT_REGISTRATION_TIMEOUT) -> InterGroup:
    """Called by a spawned child: register with the parent root, receive both
    rosters, and return the child-side InterGroup."""
    if ticket is None:
        ticket = BootstrapTicket.from_env()
    if node is None:
        node = Node(host_label=ticket.host_label)

    # Adopt the parent's epoch before dialing so fencing on both ends agrees.
    node.fencing.advance_to(ticket.parent_epoch)
    channel = node.endpoint.connect(ticket.parent_address)
    channel.send(Envelope(
        epoch=ticket.parent_epoch, tag=wire.TAG_SPAWN_REGISTER,
        src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
        payload=wire.json_payload({
            "child_index": ticket.child_index,
            "descriptor": node.descriptor().to_json(),
        })))
    reply = node.endpoint.recv(wire_tag_is(wire.TAG_SPAWN_REPLY), timeout=timeout)
    outcome = wire.parse_json_payload(_unwrap(reply.payload))

    siblings = tuple(MemberDescriptor.from_json(m) for m in outcome["children"])
    parents = tuple(MemberDescriptor.from_json(m) for m in outcome["parents"])
    local = node.make_group(ticket.parent_epoch, siblings, ticket.child_index)
    return InterGroup(local_group=local, remote_roster=parents,
                      side=Side.CHILD,
                      parent_root_rank=outcome["parent_root_rank"])
