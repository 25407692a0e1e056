"""The reusable worker program.

A worker bootstraps one of two ways: a bootstrap ticket in the environment
means it was spawned into a running fleet and must merge with its parent;
otherwise rendezvous variables point it at the driver, which collects the
initial members and hands out the epoch-0 roster. Either way the worker then
serves driver commands (barrier, allgather probes, scale events) until it is
told to stop or a scale_in retires it.

Exit status: 0 after a stop command or retirement, 2 on a malformed
environment, 1 on unexpected failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import traceback

from . import wire
from .collectives import allgather, barrier, wire_tag_is
from .errors import EGroupError
from .groups import MemberDescriptor, RetirementToken, roster_digest
from .node import Node
from .scaling import init_new_process, scale_in, scale_out
from .spawner import (
    ENV_MEMBER_INDEX,
    ENV_PARENT_ADDR,
    ENV_RENDEZVOUS_ADDR,
    ENV_WORLD_SIZE,
)
from .wire import Envelope

# Wide enough for any incarnation id; allgather blocks must share one width.
ID_BLOCK_WIDTH = 128

DEFAULT_DRAIN_TIMEOUT = 5.0


class MalformedEnvironment(Exception):
    pass


def _require(environ, name):
    value = environ.get(name)
    if value is None or value == "":
        raise MalformedEnvironment(f"missing environment variable {name}")
    return value


def _require_int(environ, name):
    raw = _require(environ, name)
    try:
        return int(raw)
    except ValueError:
        raise MalformedEnvironment(
            f"environment variable {name} must be an integer, got {raw!r}"
        ) from None


def _bootstrap_initial(environ, driver_addr):
    """Register with the driver's rendezvous and wait for the epoch-0 roster."""
    index = _require_int(environ, ENV_MEMBER_INDEX)
    world = _require_int(environ, ENV_WORLD_SIZE)
    if not (0 <= index < world):
        raise MalformedEnvironment(
            f"{ENV_MEMBER_INDEX}={index} out of range for "
            f"{ENV_WORLD_SIZE}={world}")
    node = Node()
    channel = node.endpoint.connect(driver_addr)
    channel.send(Envelope(
        epoch=0, tag=wire.TAG_DRIVER_REGISTER,
        src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
        payload=wire.json_payload({
            "index": index,
            "descriptor": node.descriptor().to_json(),
        })))
    roster_env = node.endpoint.recv(wire_tag_is(wire.TAG_DRIVER_ROSTER),
                                    timeout=60.0)
    msg = wire.parse_json_payload(roster_env.payload)
    roster = tuple(MemberDescriptor.from_json(m) for m in msg["roster"])
    group = node.make_group(msg["epoch"], roster, index)
    return node, group, channel


def _bootstrap_spawned(driver_addr):
    """Merge into the running fleet, then introduce myself to the driver."""
    group = init_new_process()
    node = group.node
    channel = node.endpoint.connect(driver_addr)
    channel.send(Envelope(
        epoch=group.epoch, tag=wire.TAG_DRIVER_HELLO,
        src_rank=group.my_rank, dst_rank=wire.NO_RANK,
        payload=wire.json_payload({
            "descriptor": node.descriptor().to_json(),
            "epoch": group.epoch,
            "rank": group.my_rank,
        })))
    return node, group, channel


def _reply(node, channel, seq, body):
    payload = dict(body)
    payload["seq"] = seq
    payload["id"] = node.incarnation_id
    channel.send(Envelope(
        epoch=max(node.fencing.current, 0), tag=wire.TAG_DRIVER_REPLY,
        src_rank=wire.NO_RANK, dst_rank=wire.NO_RANK,
        payload=wire.json_payload(payload)))


def _drain_rejections(node, drain_timeout):
    """Stay reachable briefly after retirement so straggling senders get
    stale rejections instead of connection failures."""
    deadline = time.monotonic() + drain_timeout
    last = node.endpoint.stale_rejected_count
    quiet_since = time.monotonic()
    while time.monotonic() < deadline:
        time.sleep(0.05)
        count = node.endpoint.stale_rejected_count
        if count != last:
            last = count
            quiet_since = time.monotonic()
        elif time.monotonic() - quiet_since >= 0.2:
            return


def _serve(node, group, channel, drain_timeout):
    """Execute driver commands until stop or retirement. Returns exit status."""
    while True:
        cmd_env = node.endpoint.recv(wire_tag_is(wire.TAG_DRIVER_CMD))
        cmd = wire.parse_json_payload(cmd_env.payload)
        op = cmd.get("op")
        seq = cmd.get("seq")
        try:
            if op == "stop":
                _reply(node, channel, seq, {"ok": True, "stopped": True})
                return 0

            if op == "barrier":
                barrier(group)
                _reply(node, channel, seq, {"ok": True})

            elif op == "ping":
                _reply(node, channel, seq, {
                    "ok": True, "rank": group.my_rank,
                    "size": len(group.roster), "epoch": group.epoch,
                })

            elif op == "digest":
                _reply(node, channel, seq, {
                    "ok": True,
                    "digest": roster_digest(group.roster),
                    "rank": group.my_rank,
                    "size": len(group.roster),
                })

            elif op == "allgather_ids":
                start = time.perf_counter()
                block = node.incarnation_id.encode().ljust(ID_BLOCK_WIDTH, b"\x00")
                gathered = allgather(group, block)
                elapsed = time.perf_counter() - start
                ids = [gathered[i:i + ID_BLOCK_WIDTH].rstrip(b"\x00").decode()
                       for i in range(0, len(gathered), ID_BLOCK_WIDTH)]
                _reply(node, channel, seq, {
                    "ok": True, "ids": ids, "elapsed_s": elapsed,
                })

            elif op == "scale_out":
                phases = {}
                start = time.perf_counter()
                group = scale_out(
                    group, cmd["num_add"], cmd["child_program"],
                    cmd.get("host_labels"),
                    child_args=cmd.get("child_args", ()),
                    registration_timeout=cmd.get("registration_timeout", 30.0),
                    phases=phases)
                total = time.perf_counter() - start
                _reply(node, channel, seq, {
                    "ok": True, "total_s": total,
                    "spawn_s": phases.get("spawn_s", 0.0),
                    "epoch": group.epoch, "rank": group.my_rank,
                    "size": len(group.roster),
                })

            elif op == "scale_in":
                start = time.perf_counter()
                outcome = scale_in(group, bool(cmd["is_removing"]))
                total = time.perf_counter() - start
                if isinstance(outcome.new_group, RetirementToken):
                    _reply(node, channel, seq, {
                        "ok": True, "retired": True,
                        "can_terminate": outcome.can_terminate_host,
                        "total_s": total,
                        "epoch": outcome.new_group.epoch,
                    })
                    _drain_rejections(node, drain_timeout)
                    return 0
                group = outcome.new_group
                _reply(node, channel, seq, {
                    "ok": True, "retired": False,
                    "can_terminate": outcome.can_terminate_host,
                    "total_s": total,
                    "epoch": group.epoch, "rank": group.my_rank,
                    "size": len(group.roster),
                })

            else:
                _reply(node, channel, seq, {
                    "ok": False, "error": "ProtocolError",
                    "message": f"unknown command {op!r}",
                })
        except EGroupError as exc:
            _reply(node, channel, seq, {
                "ok": False, "error": type(exc).__name__, "message": str(exc),
            })


def worker_main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    parser = argparse.ArgumentParser(prog="egroup-worker")
    parser.add_argument("--driver", default=None,
                        help="driver address (host:port); defaults to "
                             f"{ENV_RENDEZVOUS_ADDR}")
    parser.add_argument("--drain-timeout", type=float,
                        default=DEFAULT_DRAIN_TIMEOUT,
                        help="maximum seconds to linger after retirement")
    args = parser.parse_args(argv)

    try:
        driver_addr = args.driver or environ.get(ENV_RENDEZVOUS_ADDR)
        if not driver_addr:
            raise MalformedEnvironment(
                f"no driver address: pass --driver or set {ENV_RENDEZVOUS_ADDR}")
        if ENV_PARENT_ADDR in environ:
            node, group, channel = _bootstrap_spawned(driver_addr)
        else:
            node, group, channel = _bootstrap_initial(environ, driver_addr)
    except MalformedEnvironment as exc:
        print(f"egroup-worker: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"egroup-worker: {exc}", file=sys.stderr)
        return 2

    try:
        status = _serve(node, group, channel, args.drain_timeout)
    except Exception:
        traceback.print_exc()
        status = 1
    finally:
        node.close()
    return status


def main():
    sys.exit(worker_main())


if __name__ == "__main__":
    main()
