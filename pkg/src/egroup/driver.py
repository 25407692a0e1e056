"""Fleet orchestration for the benchmark harness and integration tests.

The driver is not a group member: it launches the initial workers, hands
them the epoch-0 roster through a rendezvous exchange, then scripts them with
commands over the reserved low tag range. Spawned children introduce
themselves to the driver after merging, so the driver's view of the fleet
follows every scale event.
"""

from __future__ import annotations

import os
import subprocess
import sys
import time
from dataclasses import dataclass
from typing import Optional

from . import wire
from .collectives import wire_tag_is
from .errors import EGroupError, ProtocolError, SpawnError, error_from_name
from .groups import MemberDescriptor
from .node import Node
from .spawner import (
    ENV_HOST_LABEL,
    ENV_MEMBER_INDEX,
    ENV_PREFIX,
    ENV_RENDEZVOUS_ADDR,
    ENV_WORLD_SIZE,
)
from .wire import Envelope

DEFAULT_COMMAND_TIMEOUT = 120.0
DEFAULT_STARTUP_TIMEOUT = 60.0


def default_worker_command() -> list:
    """Command line that starts the worker program in this interpreter."""
    return [sys.executable, "-m", "egroup.worker"]


def host_label_for_slot(slot: int, slots_per_host: int) -> str:
    """Pack slots onto emulated hosts: slots 0..S-1 on node0, and so on."""
    if slots_per_host < 1:
        raise ValueError(f"slots_per_host must be positive, got {slots_per_host}")
    return f"node{slot // slots_per_host}"


@dataclass
class WorkerHandle:
    """Driver-side view of one live worker."""

    member: MemberDescriptor
    channel: object
    rank: int
    epoch: int
    proc: Optional[subprocess.Popen] = None

    @property
    def incarnation_id(self) -> str:
        return self.member.incarnation_id


class CommandFailure(EGroupError):
    """A worker answered a command with an error."""

    def __init__(self, rank: int, error: EGroupError):
        super().__init__(f"worker rank {rank} failed: {error}")
        self.rank = rank
        self.error = error


class Driver:
    """Launches and scripts a worker fleet; one instance per fleet."""

    def __init__(self, worker_command=None, slots_per_host: int = 32,
                 startup_timeout: float = DEFAULT_STARTUP_TIMEOUT,
                 command_timeout: float = DEFAULT_COMMAND_TIMEOUT,
                 stderr=None):
        self.worker_command = list(worker_command or default_worker_command())
        self.slots_per_host = slots_per_host
        self.startup_timeout = startup_timeout
        self.command_timeout = command_timeout
        self.stderr = stderr
        self.node = Node(host_label="driver")
        self.workers = []
        self.epoch = 0
        self._seq = 0
        self._procs = []

    @property
    def address(self) -> str:
        return self.node.listen_address

    @property
    def size(self) -> int:
        return len(self.workers)

    # -- fleet bootstrap -------------------------------------------------------

    def start_fleet(self, initial: int) -> None:
        """Launch the initial workers and distribute the epoch-0 roster."""
        if self.workers:
            raise ProtocolError("fleet already started")
        if initial < 1:
            raise ValueError(f"initial must be positive, got {initial}")
        base_env = {k: v for k, v in os.environ.items()
                    if not k.startswith(ENV_PREFIX)}
        for index in range(initial):
            env = dict(base_env)
            env[ENV_RENDEZVOUS_ADDR] = self.address
            env[ENV_MEMBER_INDEX] = str(index)
            env[ENV_WORLD_SIZE] = str(initial)
            env[ENV_HOST_LABEL] = host_label_for_slot(index, self.slots_per_host)
            proc = subprocess.Popen(self.worker_command, env=env,
                                    stdout=subprocess.DEVNULL,
                                    stderr=self.stderr)
            self._procs.append(proc)

        deadline = time.monotonic() + self.startup_timeout
        pending = {}
        while len(pending) < initial:
            env, channel = self.node.endpoint.recv_with_channel(
                wire_tag_is(wire.TAG_DRIVER_REGISTER),
                timeout=max(0.05, deadline - time.monotonic()))
            msg = wire.parse_json_payload(env.payload)
            index = msg["index"]
            if not (0 <= index < initial) or index in pending:
                raise ProtocolError(f"bad rendezvous registration index {index}")
            pending[index] = (MemberDescriptor.from_json(msg["descriptor"]),
                              channel)

        roster = [pending[i][0] for i in range(initial)]
        roster_payload = wire.json_payload({
            "epoch": 0, "roster": [m.to_json() for m in roster]})
        for index in range(initial):
            member, channel = pending[index]
            channel.send(Envelope(
                epoch=0, tag=wire.TAG_DRIVER_ROSTER,
                src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
                payload=roster_payload))
            self.workers.append(WorkerHandle(
                member=member, channel=channel, rank=index, epoch=0,
                proc=self._procs[index]))
        self.epoch = 0

    # -- command plumbing ------------------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _send_command(self, handle: WorkerHandle, seq: int, op: str, **params):
        payload = dict(params)
        payload["op"] = op
        payload["seq"] = seq
        handle.channel.send(Envelope(
            epoch=max(handle.epoch, 0), tag=wire.TAG_DRIVER_CMD,
            src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
            payload=wire.json_payload(payload)))

    def _collect_replies(self, seq: int, count: int,
                         timeout: Optional[float] = None) -> dict:
        """Gather ``count`` replies for ``seq``, keyed by incarnation id."""
        timeout = timeout if timeout is not None else self.command_timeout
        deadline = time.monotonic() + timeout
        replies = {}
        while len(replies) < count:
            env = self.node.endpoint.recv(
                wire_tag_is(wire.TAG_DRIVER_REPLY),
                timeout=max(0.05, deadline - time.monotonic()))
            msg = wire.parse_json_payload(env.payload)
            if msg.get("seq") != seq:
                raise ProtocolError(
                    f"reply for command {msg.get('seq')} while waiting "
                    f"on {seq}")
            replies[msg["id"]] = msg
        return replies

    def _raise_failures(self, replies: dict) -> None:
        for handle in self.workers:
            msg = replies.get(handle.incarnation_id)
            if msg is not None and not msg.get("ok", False):
                raise CommandFailure(
                    rank=handle.rank,
                    error=error_from_name(msg.get("error", ""),
                                          msg.get("message", "")))

    def command_all(self, op: str, per_worker_params=None,
                    timeout: Optional[float] = None, **params) -> dict:
        """Send one command to every worker and wait for every reply."""
        seq = self._next_seq()
        for handle in self.workers:
            extra = (per_worker_params or {}).get(handle.incarnation_id, {})
            self._send_command(handle, seq, op, **params, **extra)
        replies = self._collect_replies(seq, len(self.workers), timeout)
        self._raise_failures(replies)
        return replies

    # -- scripted fleet operations ---------------------------------------------

    def barrier(self) -> None:
        self.command_all("barrier")

    def ping(self) -> dict:
        return self.command_all("ping")

    def digests(self) -> set:
        replies = self.command_all("digest")
        return {msg["digest"] for msg in replies.values()}

    def allgather_ids(self) -> dict:
        """Returns {incarnation_id: {"ids": [...], "elapsed_s": s}}."""
        return self.command_all("allgather_ids")

    def scale_out(self, delta: int, child_program=None, child_args=None,
                  registration_timeout: float = 30.0,
                  timeout: Optional[float] = None) -> dict:
        """Grow the fleet by ``delta`` spawned children; returns the rank-0
        worker's timing reply."""
        if delta < 1:
            raise ValueError(f"delta must be positive, got {delta}")
        if child_program is None:
            child_program = self.worker_command[0]
            child_args = list(self.worker_command[1:]) + [
                "--driver", self.address]
        elif child_args is None:
            child_args = ["--driver", self.address]
        labels = [host_label_for_slot(self.size + j, self.slots_per_host)
                  for j in range(delta)]

        seq = self._next_seq()
        for handle in self.workers:
            self._send_command(
                handle, seq, "scale_out", num_add=delta,
                child_program=child_program, child_args=list(child_args),
                host_labels=labels, registration_timeout=registration_timeout)

        deadline = time.monotonic() + (timeout or self.command_timeout)
        replies = {}
        hellos = []
        while len(replies) < len(self.workers) or len(hellos) < delta:
            env, channel = self.node.endpoint.recv_with_channel(
                lambda e: e.tag in (wire.TAG_DRIVER_REPLY, wire.TAG_DRIVER_HELLO),
                timeout=max(0.05, deadline - time.monotonic()))
            msg = wire.parse_json_payload(env.payload)
            if env.tag == wire.TAG_DRIVER_HELLO:
                hellos.append((msg, channel))
            else:
                if msg.get("seq") != seq:
                    raise ProtocolError(f"unexpected reply {msg.get('seq')}")
                replies[msg["id"]] = msg
        self._raise_failures(replies)

        new_epoch = self.epoch + 1
        for handle in self.workers:
            msg = replies[handle.incarnation_id]
            if msg["rank"] != handle.rank:
                raise ProtocolError(
                    f"rank changed across scale_out: {handle.rank} -> "
                    f"{msg['rank']}")
            handle.epoch = msg["epoch"]
        for msg, channel in hellos:
            self.workers.append(WorkerHandle(
                member=MemberDescriptor.from_json(msg["descriptor"]),
                channel=channel, rank=msg["rank"], epoch=msg["epoch"]))
        self.workers.sort(key=lambda h: h.rank)
        ranks = [h.rank for h in self.workers]
        if ranks != list(range(len(self.workers))):
            raise ProtocolError(f"fleet ranks not dense after scale_out: {ranks}")
        self.epoch = new_epoch
        root_id = self.workers[0].incarnation_id
        return replies[root_id]

    def scale_in(self, delta: int, timeout: Optional[float] = None) -> dict:
        """Remove the ``delta`` highest-ranked workers; returns the remaining
        rank-0 worker's timing reply."""
        if not (1 <= delta < self.size):
            raise ValueError(
                f"delta must be in [1, {self.size - 1}], got {delta}")
        cutoff = self.size - delta
        per_worker = {h.incarnation_id: {"is_removing": h.rank >= cutoff}
                      for h in self.workers}
        replies = self.command_all("scale_in", per_worker_params=per_worker,
                                   timeout=timeout)

        removed = [h for h in self.workers if h.rank >= cutoff]
        remaining = [h for h in self.workers if h.rank < cutoff]
        for handle in remaining:
            msg = replies[handle.incarnation_id]
            if msg.get("retired"):
                raise ProtocolError(
                    f"worker rank {handle.rank} retired unexpectedly")
            handle.rank = msg["rank"]
            handle.epoch = msg["epoch"]
        for handle in removed:
            if not replies[handle.incarnation_id].get("retired"):
                raise ProtocolError(
                    f"worker rank {handle.rank} did not retire")
        self.workers = sorted(remaining, key=lambda h: h.rank)
        self.epoch += 1
        return replies[self.workers[0].incarnation_id]

    def wait_for_exit(self, handles=None, timeout: float = 10.0) -> dict:
        """Wait for worker processes to exit; returns {pid: returncode}."""
        procs = [h.proc for h in (handles or [])] if handles else self._procs
        results = {}
        deadline = time.monotonic() + timeout
        for proc in procs:
            if proc is None:
                continue
            try:
                results[proc.pid] = proc.wait(
                    max(0.05, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                results[proc.pid] = None
        return results

    # -- lifecycle -------------------------------------------------------------

    def stop_all(self) -> None:
        if self.workers:
            self.command_all("stop")
            self.workers = []

    def close(self) -> None:
        try:
            self.stop_all()
        except EGroupError:
            pass
        except TimeoutError:
            pass
        finally:
            for proc in self._procs:
                if proc.poll() is None:
                    proc.terminate()
            for proc in self._procs:
                if proc.poll() is None:
                    try:
                        proc.wait(2.0)
                    except subprocess.TimeoutExpired:
                        proc.kill()
            self.node.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
