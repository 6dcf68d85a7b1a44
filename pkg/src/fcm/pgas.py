"""Distributed arrays with block, cyclic, and block-cyclic maps.

A map assigns every element of a global array of up to four dimensions to
exactly one rank.  The grid factors the ranks into a processor grid, each
dimension carries its own distribution, and ``plist`` pins grid positions
to concrete ranks::

    make_map(grid=(2, 2), dists=(block(), cyclic()), plist=(0, 1, 2, 3))

Per-dimension rules, for n elements over g grid coordinates:

block
    coordinate j owns [floor(j*n/g), floor((j+1)*n/g)); sizes differ by
    at most one and the cut points are the same floor rule used for
    host file rank placement
cyclic
    coordinate j owns every index i with i mod g == j
block-cyclic, block size b
    coordinate j owns indices with floor(i/b) mod g == j

Everything a rank owns is the cartesian product of per-dimension range
lists, so any question about data motion reduces to intersecting range
lists dimension by dimension and walking the resulting boxes in a fixed
row-major order.  Redistribution, halo exchange, and aggregation all ride
on that one mechanism, and because both sides derive the same boxes from
the maps alone, no control messages are needed: every transfer is a
single one-sided message per (sender, receiver) pair.

Block dimensions may declare an overlap: each local block then stores up
to that many extra cells on either side, clamped at the array edges, and
``halo_sync`` refreshes those cells from the ranks that own them.
"""

from __future__ import annotations

import itertools
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import collectives

ROW_MAJOR = "row-major"
COLUMN_MAJOR = "column-major"

MAX_DIMS = 4

BLOCK = "block"
CYCLIC = "cyclic"
BLOCK_CYCLIC = "block-cyclic"

Range = tuple[int, int]

_ELEMENT_DTYPES = {
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class MapError(ValueError):
    """Raised for invalid maps or map/array mismatches."""


@dataclass(frozen=True)
class DimDist:
    """Distribution rule for one dimension."""

    kind: str
    block_size: int = 1
    overlap: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (BLOCK, CYCLIC, BLOCK_CYCLIC):
            raise MapError(f"unknown distribution kind {self.kind!r}")
        if self.block_size < 1:
            raise MapError(f"block size must be at least 1, got {self.block_size}")
        if self.overlap < 0:
            raise MapError(f"overlap must be non-negative, got {self.overlap}")
        if self.overlap and self.kind != BLOCK:
            raise MapError(f"overlap is only supported on block dimensions, not {self.kind}")


def block(overlap: int = 0) -> DimDist:
    return DimDist(BLOCK, overlap=overlap)


def cyclic() -> DimDist:
    return DimDist(CYCLIC)


def block_cyclic(block_size: int) -> DimDist:
    return DimDist(BLOCK_CYCLIC, block_size=block_size)


@dataclass(frozen=True)
class DistMap:
    """Processor grid, per-dimension distributions, rank list, grid order."""

    grid: tuple[int, ...]
    dists: tuple[DimDist, ...]
    plist: tuple[int, ...]
    order: str = ROW_MAJOR

    @property
    def ndim(self) -> int:
        return len(self.grid)

    @property
    def nranks(self) -> int:
        return len(self.plist)

    def has_overlap(self) -> bool:
        return any(d.overlap for d in self.dists)


def make_map(grid, dists=None, plist=None, order: str = ROW_MAJOR) -> DistMap:
    """Validate and build a map; dists default to block, plist to 0..P-1."""
    grid = tuple(int(g) for g in grid)
    if not 1 <= len(grid) <= MAX_DIMS:
        raise MapError(f"maps support 1 to {MAX_DIMS} dimensions, got {len(grid)}")
    if any(g < 1 for g in grid):
        raise MapError(f"grid extents must be positive, got {grid}")
    if dists is None:
        dists = tuple(block() for _ in grid)
    else:
        dists = tuple(dists)
    if len(dists) != len(grid):
        raise MapError(f"{len(grid)}-d grid needs {len(grid)} distributions, got {len(dists)}")
    for d in dists:
        if not isinstance(d, DimDist):
            raise MapError(f"distributions must be DimDist, got {type(d).__name__}")
    positions = 1
    for g in grid:
        positions *= g
    if plist is None:
        plist = tuple(range(positions))
    else:
        plist = tuple(int(p) for p in plist)
    if len(plist) != positions:
        raise MapError(f"grid {grid} has {positions} positions but plist lists {len(plist)} ranks")
    if len(set(plist)) != len(plist):
        raise MapError("plist must not repeat ranks")
    if any(p < 0 for p in plist):
        raise MapError("plist ranks must be non-negative")
    if order not in (ROW_MAJOR, COLUMN_MAJOR):
        raise MapError(f"order must be {ROW_MAJOR!r} or {COLUMN_MAJOR!r}, got {order!r}")
    return DistMap(grid=grid, dists=dists, plist=plist, order=order)


def serial_map(rank: int = 0, ndim: int = 1) -> DistMap:
    """Degenerate map placing the whole array on one rank."""
    return make_map((1,) * ndim, plist=(rank,))


def grid_coord(dist_map: DistMap, position: int) -> tuple[int, ...]:
    """Grid coordinates of a plist position under the map's order."""
    if not 0 <= position < dist_map.nranks:
        raise MapError(f"position {position} outside plist of length {dist_map.nranks}")
    order = "C" if dist_map.order == ROW_MAJOR else "F"
    return tuple(int(c) for c in np.unravel_index(position, dist_map.grid, order=order))


def _coord_position(dist_map: DistMap, coords) -> int:
    order = "C" if dist_map.order == ROW_MAJOR else "F"
    return int(np.ravel_multi_index(coords, dist_map.grid, order=order))


def _check_dims(dist_map: DistMap, global_dims) -> tuple[int, ...]:
    dims = tuple(int(n) for n in global_dims)
    if len(dims) != dist_map.ndim:
        raise MapError(f"{dist_map.ndim}-d map cannot describe a {len(dims)}-d array")
    if any(n < 1 for n in dims):
        raise MapError(f"array dimensions must be positive, got {dims}")
    return dims


def _block_cuts(n: int, g: int) -> list[int]:
    return [j * n // g for j in range(g + 1)]


def _dim_coord_of(dist: DimDist, n: int, g: int, index: int) -> int:
    """Grid coordinate owning global index ``index`` along one dimension."""
    if dist.kind == BLOCK:
        cuts = _block_cuts(n, g)
        # Rightmost cut <= index; empty coordinates make cuts repeat, and
        # ownership goes to the last coordinate whose span starts there.
        return bisect_right(cuts, index) - 1
    if dist.kind == CYCLIC:
        return index % g
    return (index // dist.block_size) % g


def _dim_coords_of(dist: DimDist, n: int, g: int, idx: np.ndarray) -> np.ndarray:
    """Vectorised version of :func:`_dim_coord_of` for index arrays."""
    if dist.kind == BLOCK:
        cuts = np.asarray(_block_cuts(n, g))
        return np.searchsorted(cuts, idx, side="right") - 1
    if dist.kind == CYCLIC:
        return idx % g
    return (idx // dist.block_size) % g


def _dim_ranges(dist: DimDist, n: int, g: int, coord: int) -> list[Range]:
    """Owned index ranges of one grid coordinate, ascending, no overlaps."""
    if g == 1:
        return [(0, n)]
    if dist.kind == BLOCK:
        cuts = _block_cuts(n, g)
        lo, hi = cuts[coord], cuts[coord + 1]
        return [(lo, hi)] if lo < hi else []
    if dist.kind == CYCLIC:
        return [(i, i + 1) for i in range(coord, n, g)]
    b = dist.block_size
    out = []
    for start in range(coord * b, n, g * b):
        stop = min(start + b, n)
        if start < stop:
            out.append((start, stop))
    return out


def owner_of(dist_map: DistMap, global_dims, index) -> int:
    """Rank owning one global index tuple."""
    dims = _check_dims(dist_map, global_dims)
    index = tuple(int(i) for i in index)
    if len(index) != len(dims):
        raise MapError(f"index {index} does not match {len(dims)}-d array")
    coords = []
    for k, i in enumerate(index):
        if not 0 <= i < dims[k]:
            raise MapError(f"index {i} outside dimension {k} of extent {dims[k]}")
        coords.append(_dim_coord_of(dist_map.dists[k], dims[k], dist_map.grid[k], i))
    return dist_map.plist[_coord_position(dist_map, coords)]


def owned_extent(dist_map: DistMap, global_dims, rank: int) -> tuple[tuple[Range, ...], ...]:
    """Per-dimension owned ranges of one rank, each list ascending."""
    dims = _check_dims(dist_map, global_dims)
    try:
        position = dist_map.plist.index(rank)
    except ValueError:
        raise MapError(f"rank {rank} is not in the map's plist") from None
    coords = grid_coord(dist_map, position)
    return tuple(
        tuple(_dim_ranges(dist_map.dists[k], dims[k], dist_map.grid[k], coords[k]))
        for k in range(len(dims))
    )


def map_dump(dist_map: DistMap, global_dims) -> str:
    """Human-readable owned extents, one plist rank per line."""
    dims = _check_dims(dist_map, global_dims)
    lines = []
    for rank in sorted(dist_map.plist):
        parts = []
        for ranges in owned_extent(dist_map, dims, rank):
            if ranges:
                parts.append(",".join(f"[{lo},{hi})" for lo, hi in ranges))
            else:
                parts.append("[)")
        lines.append(f"rank {rank}: " + " ".join(parts))
    return "\n".join(lines)


# --- region algebra -------------------------------------------------------
#
# A region is one list of ranges per dimension and denotes their cartesian
# product.  Regions intersect dimension by dimension; enumerating the
# product of the per-dimension pieces yields disjoint boxes in a fixed
# order, which both ends of a transfer reproduce independently.


def _intersect_ranges(a, b) -> list[Range]:
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo < hi:
            out.append((lo, hi))
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return out


def _region_boxes(region) -> list[tuple[Range, ...]]:
    if any(not ranges for ranges in region):
        return []
    return list(itertools.product(*region))


def _intersect_regions(a, b) -> list[tuple[Range, ...]]:
    return _region_boxes([_intersect_ranges(ra, rb) for ra, rb in zip(a, b)])


def _box_shape(box) -> tuple[int, ...]:
    return tuple(hi - lo for lo, hi in box)


def _box_size(box) -> int:
    size = 1
    for lo, hi in box:
        size *= hi - lo
    return size


class _Layout:
    """Local storage geometry of one rank under one map.

    Derivable from the map and dimensions alone, so any rank can compute
    any other rank's layout without communication.  Per dimension it
    records the owned ranges, the clamped halo widths (block dimensions
    only), and where each stored global range begins in local memory.
    """

    def __init__(self, dist_map: DistMap, global_dims, rank: int):
        dims = _check_dims(dist_map, global_dims)
        self.dist_map = dist_map
        self.global_dims = dims
        self.rank = rank
        self.owned = owned_extent(dist_map, dims, rank)
        self.halo_lo = []
        self.halo_hi = []
        self.storage = []
        for k, ranges in enumerate(self.owned):
            dist = dist_map.dists[k]
            if dist.kind == BLOCK and dist.overlap and ranges:
                lo, hi = ranges[0]
                wlo = min(dist.overlap, lo)
                whi = min(dist.overlap, dims[k] - hi)
                self.halo_lo.append(wlo)
                self.halo_hi.append(whi)
                self.storage.append(((lo - wlo, hi + whi),))
            else:
                self.halo_lo.append(0)
                self.halo_hi.append(0)
                self.storage.append(tuple(ranges))
        self._starts = []
        self.local_shape = []
        for ranges in self.storage:
            starts = []
            offset = 0
            for lo, hi in ranges:
                starts.append(offset)
                offset += hi - lo
            self._starts.append(starts)
            self.local_shape.append(offset)
        self.local_shape = tuple(self.local_shape)

    @property
    def owned_counts(self) -> tuple[int, ...]:
        return tuple(sum(hi - lo for lo, hi in ranges) for ranges in self.owned)

    def local_slices(self, box) -> tuple[slice, ...]:
        """Local index slices covering one stored global box."""
        out = []
        for k, (lo, hi) in enumerate(box):
            ranges = self.storage[k]
            pos = bisect_right([r[0] for r in ranges], lo) - 1
            rlo, rhi = ranges[pos]
            if not (rlo <= lo and hi <= rhi):
                raise MapError(f"box range [{lo},{hi}) not stored on rank {self.rank}")
            start = self._starts[k][pos] + (lo - rlo)
            out.append(slice(start, start + (hi - lo)))
        return tuple(out)

    def owned_trim(self) -> tuple[slice, ...]:
        """Slices that cut the halo margins off the local block."""
        return tuple(
            slice(wlo, wlo + count)
            for wlo, count in zip(self.halo_lo, self.owned_counts)
        )

    def halo_regions(self) -> list[list[list[Range]]]:
        """Disjoint regions that exactly cover storage minus owned.

        For each dimension k with margins, take owned ranges below k, the
        margin along k, and full storage above k.  Together the slabs
        cover every halo cell exactly once, corners included.
        """
        regions = []
        for k in range(len(self.owned)):
            if not (self.halo_lo[k] or self.halo_hi[k]):
                continue
            lo, hi = self.owned[k][0]
            before = [list(self.owned[j]) for j in range(k)]
            after = [list(self.storage[j]) for j in range(k + 1, len(self.owned))]
            if self.halo_lo[k]:
                regions.append(before + [[(lo - self.halo_lo[k], lo)]] + after)
            if self.halo_hi[k]:
                regions.append(before + [[(hi, hi + self.halo_hi[k])]] + after)
        return regions


class DistArray:
    """One rank's piece of a distributed array.

    ``local`` holds the stored block including halo margins; ranks outside
    the map's plist hold None.  Indexing helpers work in global
    coordinates and translate through the layout.
    """

    def __init__(self, global_dims, element_type, dist_map: DistMap, rank: int):
        self.dist_map = dist_map
        self.rank = rank
        self.element_type = str(element_type)
        if self.element_type not in _ELEMENT_DTYPES:
            raise MapError(f"unsupported element type {element_type!r}")
        self.dtype = _ELEMENT_DTYPES[self.element_type]
        self.global_dims = _check_dims(dist_map, global_dims)
        if rank in dist_map.plist:
            self.layout = _Layout(dist_map, self.global_dims, rank)
            self.local = np.zeros(self.layout.local_shape, dtype=self.dtype)
        else:
            self.layout = None
            self.local = None

    @property
    def ndim(self) -> int:
        return len(self.global_dims)

    def is_member(self) -> bool:
        return self.layout is not None

    def extract(self, box) -> np.ndarray:
        """Contiguous copy of one stored global box."""
        return np.ascontiguousarray(self.local[self.layout.local_slices(box)])

    def place(self, box, values: np.ndarray) -> None:
        self.local[self.layout.local_slices(box)] = values

    def owned_view(self) -> np.ndarray:
        """Writable view of the owned cells, halo margins excluded."""
        return self.local[self.layout.owned_trim()]


def local_part(darr: DistArray):
    """(owned view, per-dimension owned ranges) for this rank, or (None, ())."""
    if not darr.is_member():
        return None, ()
    return darr.owned_view(), darr.layout.owned


def _mix64(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _keyed_values(seed: int, flat: np.ndarray, element_type: str) -> np.ndarray:
    """Deterministic value for each global flat index, independent of layout.

    Hashing (seed, index) pairs instead of drawing a stream means any
    rank can generate exactly its own cells, and a distributed fill
    matches the serial one element for element.
    """
    base = np.uint64((seed * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019) % (1 << 64))
    with np.errstate(over="ignore"):
        h = _mix64(flat.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15) + base)
    if element_type == "float64":
        return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    if element_type == "int64":
        return (h >> np.uint64(1)).astype(np.int64)
    return (h & np.uint64(0xFF)).astype(np.uint8)


def _box_flat_indices(box, global_dims) -> np.ndarray:
    """Global row-major flat index for every cell of a box, box-shaped."""
    ndim = len(global_dims)
    strides = [1] * ndim
    for k in range(ndim - 2, -1, -1):
        strides[k] = strides[k + 1] * global_dims[k + 1]
    flat = np.zeros(_box_shape(box), dtype=np.uint64)
    for k, (lo, hi) in enumerate(box):
        axis = np.arange(lo, hi, dtype=np.uint64) * np.uint64(strides[k])
        shape = [1] * ndim
        shape[k] = hi - lo
        flat = flat + axis.reshape(shape)
    return flat


FILLS = ("zero", "one", "seeded-random")


def _fill_box(element_type: str, fill: str, box, global_dims, seed: int) -> np.ndarray:
    dtype = _ELEMENT_DTYPES[element_type]
    if fill == "zero":
        return np.zeros(_box_shape(box), dtype=dtype)
    if fill == "one":
        return np.ones(_box_shape(box), dtype=dtype)
    if fill == "seeded-random":
        return _keyed_values(seed, _box_flat_indices(box, global_dims), element_type)
    raise ValueError(f"unknown fill {fill!r}; expected one of {FILLS}")


def dist_constant(global_dims, element_type: str, fill: str, dist_map: DistMap | None = None,
                  *, ctx=None, seed: int = 0):
    """Construct a filled array, serial or distributed.

    Without a map this returns a plain numpy array.  With a map it
    returns this rank's :class:`DistArray`, whose stored block including
    halo margins is filled; the seeded-random fill keys every value on
    the global index, so the distributed content equals the serial
    construction no matter how the array is cut up.
    """
    element_type = str(element_type)
    if element_type not in _ELEMENT_DTYPES:
        raise MapError(f"unsupported element type {element_type!r}")
    if dist_map is None:
        dims = tuple(int(n) for n in global_dims)
        whole = ((0, n) for n in dims)
        return _fill_box(element_type, fill, tuple(whole), dims, seed)
    if ctx is None:
        raise ValueError("distributed construction needs a communication context")
    darr = DistArray(global_dims, element_type, dist_map, ctx.rank)
    if darr.is_member() and fill != "zero":
        for box in _region_boxes([list(r) for r in darr.layout.storage]):
            darr.place(box, _fill_box(element_type, fill, box, darr.global_dims, seed))
    return darr


def zeros(global_dims, element_type="float64", dist_map=None, *, ctx=None):
    return dist_constant(global_dims, element_type, "zero", dist_map, ctx=ctx)


def ones(global_dims, element_type="float64", dist_map=None, *, ctx=None):
    return dist_constant(global_dims, element_type, "one", dist_map, ctx=ctx)


def rand(global_dims, seed: int = 0, element_type="float64", dist_map=None, *, ctx=None):
    return dist_constant(global_dims, element_type, "seeded-random", dist_map, ctx=ctx, seed=seed)


def _pack_boxes(darr: DistArray, boxes) -> bytes:
    return b"".join(darr.extract(box).tobytes() for box in boxes)


def _unpack_boxes(darr: DistArray, boxes, blob: bytes) -> None:
    offset = 0
    for box in boxes:
        count = _box_size(box)
        chunk = np.frombuffer(blob, dtype=darr.dtype, count=count, offset=offset)
        darr.place(box, chunk.reshape(_box_shape(box)))
        offset += count * darr.dtype.itemsize
    if offset != len(blob):
        raise MapError(f"transfer carried {len(blob)} bytes but boxes describe {offset}")


def redistribute(ctx, darr: DistArray, new_map: DistMap) -> DistArray:
    """Move an array onto a new map; every rank calls, content is preserved.

    Each old owner intersects its owned region with every new owner's
    region and sends one message per non-empty pair; receivers compute
    the same boxes and unpack in the same order.  Identical maps produce
    no messages because all cross intersections are empty.  Arrays with
    overlap get a halo refresh at the end.
    """
    old_map = darr.dist_map
    dims = _check_dims(new_map, darr.global_dims)
    senders = sorted(old_map.plist)
    receivers = sorted(new_map.plist)
    tag_base = ctx.next_internal_tags(len(senders) * len(receivers))
    out = DistArray(dims, darr.element_type, new_map, ctx.rank)
    me = ctx.rank
    if me in old_map.plist:
        mine = darr.layout.owned
        for j, receiver in enumerate(receivers):
            boxes = _intersect_regions(mine, owned_extent(new_map, dims, receiver))
            if receiver == me:
                for box in boxes:
                    out.place(box, darr.extract(box))
            elif boxes:
                tag = tag_base + senders.index(me) * len(receivers) + j
                ctx._send_raw(receiver, tag, _pack_boxes(darr, boxes))
    if me in new_map.plist:
        mine = out.layout.owned
        for i, sender in enumerate(senders):
            if sender == me:
                continue
            boxes = _intersect_regions(owned_extent(old_map, dims, sender), mine)
            if boxes:
                tag = tag_base + i * len(receivers) + receivers.index(me)
                _unpack_boxes(out, boxes, ctx._recv_raw(sender, tag))
    if new_map.has_overlap():
        halo_sync(ctx, out)
    return out


def halo_sync(ctx, darr: DistArray) -> None:
    """Refresh every halo cell from its owning rank; every rank calls.

    Senders intersect their owned region with each peer's halo regions;
    receivers intersect each peer's owned region with their own halo.
    Both sides enumerate identical boxes, so one message per directed
    pair carries everything, whatever the overlap and block sizes.
    """
    dist_map = darr.dist_map
    if not dist_map.has_overlap():
        return
    ranks = sorted(dist_map.plist)
    n = len(ranks)
    tag_base = ctx.next_internal_tags(n * n)
    me = ctx.rank
    if me not in dist_map.plist:
        return
    dims = darr.global_dims
    layouts = {rank: _Layout(dist_map, dims, rank) for rank in ranks}
    mine = layouts[me]
    i_me = ranks.index(me)
    for j, receiver in enumerate(ranks):
        if receiver == me:
            continue
        boxes = []
        for region in layouts[receiver].halo_regions():
            boxes.extend(_intersect_regions([list(r) for r in mine.owned], region))
        if boxes:
            ctx._send_raw(receiver, tag_base + i_me * n + j, _pack_boxes(darr, boxes))
    for i, sender in enumerate(ranks):
        if sender == me:
            continue
        boxes = []
        for region in mine.halo_regions():
            boxes.extend(_intersect_regions([list(r) for r in layouts[sender].owned], region))
        if boxes:
            _unpack_boxes(darr, boxes, ctx._recv_raw(sender, tag_base + i * n + i_me))


def agg(ctx, darr: DistArray) -> np.ndarray | None:
    """Assemble the whole array on the lowest plist rank; every rank calls.

    Each member packs its owned boxes and the pieces ride the gather
    tree; the leader unpacks every contribution straight into a dense
    array.  Returns the dense array at the leader, None elsewhere.
    """
    dist_map = darr.dist_map
    members = sorted(dist_map.plist)
    frame = None
    if ctx.rank in dist_map.plist:
        boxes = _region_boxes([list(r) for r in darr.layout.owned])
        frame = _pack_boxes(darr, boxes)
    entries = collectives.gather_frames(ctx, members, frame)
    if entries is None:
        return None
    dense = np.zeros(darr.global_dims, dtype=darr.dtype)
    for rank, blob in entries:
        offset = 0
        for box in _region_boxes([list(r) for r in owned_extent(dist_map, darr.global_dims, rank)]):
            count = _box_size(box)
            chunk = np.frombuffer(blob, dtype=darr.dtype, count=count, offset=offset)
            dense[tuple(slice(lo, hi) for lo, hi in box)] = chunk.reshape(_box_shape(box))
            offset += count * darr.dtype.itemsize
        if offset != len(blob):
            raise MapError(f"rank {rank} sent {len(blob)} bytes but owns {offset}")
    return dense
