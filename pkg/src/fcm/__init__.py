"""File-based SPMD messaging, node-aware collectives, distributed arrays.

Typical program::

    import fcm

    ctx = fcm.init()
    grid = fcm.make_map((ctx.size,), dists=(fcm.block(overlap=1),))
    field = fcm.rand((1000,), seed=7, dist_map=grid, ctx=ctx)
    fcm.halo_sync(ctx, field)
    whole = fcm.agg(ctx, field)

Run it with ``fcm-run --triples 1x4 --root /tmp/mb -- python program.py``.
"""

from .bench import BenchmarkError
from .collectives import (
    bcast_node_serial,
    bcast_serial,
    bcast_tree,
    binomial_schedule,
    gather_tree,
)
from .comm import CommContext, MissingEnvironment, NodeMapError, NodeTopology, init
from .pgas import (
    DimDist,
    DistArray,
    DistMap,
    MapError,
    agg,
    block,
    block_cyclic,
    cyclic,
    dist_constant,
    halo_sync,
    local_part,
    make_map,
    map_dump,
    ones,
    owned_extent,
    owner_of,
    rand,
    redistribute,
    serial_map,
    zeros,
)
from .transport import (
    DuplicateMessageError,
    FrameError,
    ReceiveTimeout,
    RemoteCopyError,
    TransportConfig,
    TransportError,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkError",
    "CommContext",
    "DimDist",
    "DistArray",
    "DistMap",
    "DuplicateMessageError",
    "FrameError",
    "MapError",
    "MissingEnvironment",
    "NodeMapError",
    "NodeTopology",
    "ReceiveTimeout",
    "RemoteCopyError",
    "TransportConfig",
    "TransportError",
    "agg",
    "bcast_node_serial",
    "bcast_serial",
    "bcast_tree",
    "binomial_schedule",
    "block",
    "block_cyclic",
    "cyclic",
    "dist_constant",
    "gather_tree",
    "halo_sync",
    "init",
    "local_part",
    "make_map",
    "map_dump",
    "ones",
    "owned_extent",
    "owner_of",
    "rand",
    "redistribute",
    "serial_map",
    "zeros",
    "__version__",
]
