"""Elastic process groups over TCP: grow a running worker set with immediate
all-to-all communication, shrink it with communication fencing, and decide
when a host may be shut down. Includes the benchmark harness exercising both
paths at desk scale."""

from .errors import (
    ConnectError,
    DeliveryError,
    EGroupError,
    FencingError,
    NotSpawnedError,
    ProtocolError,
    RetiredGroupError,
    SetupError,
    ShutdownError,
    SpawnError,
)
from .groups import (
    Group,
    InterGroup,
    MemberDescriptor,
    RetirementToken,
    Side,
    roster_digest,
)
from .wire import Envelope
from .node import Node
from .collectives import SplitKey, allgather, barrier, broadcast, merge, split
from .spawner import (
    BootstrapTicket,
    Launcher,
    LocalProcessLauncher,
    SpawnSpec,
    ThreadLauncher,
    attach_parent,
    spawn,
)
from .scaling import (
    HostOccupancy,
    ScaleInOutcome,
    host_can_terminate,
    init_new_process,
    scale_in,
    scale_out,
)
from .bench import (
    BenchConfig,
    BenchRecord,
    emit_csv,
    parse_csv,
    run_scale_in_bench,
    run_scale_out_bench,
)

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "BootstrapTicket",
    "ConnectError",
    "DeliveryError",
    "EGroupError",
    "Envelope",
    "FencingError",
    "Group",
    "HostOccupancy",
    "InterGroup",
    "Launcher",
    "LocalProcessLauncher",
    "MemberDescriptor",
    "Node",
    "NotSpawnedError",
    "ProtocolError",
    "RetiredGroupError",
    "RetirementToken",
    "ScaleInOutcome",
    "SetupError",
    "ShutdownError",
    "Side",
    "SpawnError",
    "SpawnSpec",
    "SplitKey",
    "ThreadLauncher",
    "allgather",
    "attach_parent",
    "barrier",
    "broadcast",
    "emit_csv",
    "host_can_terminate",
    "init_new_process",
    "merge",
    "parse_csv",
    "roster_digest",
    "run_scale_in_bench",
    "run_scale_out_bench",
    "scale_in",
    "scale_out",
    "spawn",
    "split",
]
