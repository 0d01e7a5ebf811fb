"""Lattice geometry and the seeded simple-random-walk generator.

Conventions used everywhere else in the package:

* Points of Z^d are numpy integer arrays of shape (..., d).
* The cube Q(x, r) is the half-open box: y is a member iff for every
  coordinate j, -r/2 <= y_j - x_j < r/2 as real numbers.  With integer r
  this makes |Q(x, r)| = r**d and lets {Q(x, r) : x in r Z^d} partition
  the lattice.
* A walk step is stored as one byte: code = 2*axis + sign_bit, where
  sign_bit 0 means +e_axis and 1 means -e_axis.  Two bits cannot encode
  2d >= 6 directions, so one byte per step is the packed representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ResourceError

DIM_MIN = 3
DIM_MAX = 8
MAX_STEPS_DEFAULT = 2**31  # keeps int64 coordinates far from overflow
_MASK64 = (1 << 64) - 1

PATH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by (seed, stream_id).

    Distinct stream ids give statistically independent Philox streams, so
    the stream id doubles as the Monte Carlo replicate index.  Creating a
    generator always restarts the stream from its origin, which is what
    makes replay deterministic.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def shifted(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + offset)


def stream_batch(seed: int, start: int, count: int) -> list[RngStream]:
    """Streams for replicates start .. start+count-1 of a master seed."""
    return [RngStream(seed, start + i) for i in range(count)]


def step_deltas(d: int) -> np.ndarray:
    """(2d, d) table mapping step codes to unit moves."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for axis in range(d):
        out[2 * axis, axis] = 1
        out[2 * axis + 1, axis] = -1
    return out


@dataclass
class WalkPath:
    """A replayable simple-random-walk trajectory started at the origin.

    Only the step codes are stored; positions are recomputed on demand and
    cached.  The object is immutable by convention and safe to share.
    """

    d: int
    steps: np.ndarray  # uint8 codes, shape (n,)
    seed: int = 0
    stream_id: int = 0
    _positions: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.steps.shape[0])

    def positions(self) -> np.ndarray:
        """(n+1, d) int64 positions with S_0 = 0."""
        if self._positions is None:
            self._positions = steps_to_positions(self.d, self.steps)
        return self._positions


def steps_to_positions(d: int, steps: np.ndarray,
                       dtype=np.int64) -> np.ndarray:
    n = steps.shape[0]
    pos = np.zeros((n + 1, d), dtype=dtype)
    if n == 0:
        return pos
    axes = steps >> 1
    signs = 1 - 2 * (steps & 1).astype(np.int8)
    for axis in range(d):
        mask = axes == axis
        moves = np.zeros(n, dtype=dtype)
        moves[mask] = signs[mask]
        np.cumsum(moves, out=pos[1:, axis])
    return pos


def simulate_walk(d: int, n: int, rng: RngStream,
                  max_steps: int = MAX_STEPS_DEFAULT) -> WalkPath:
    """Sample an n-step simple random walk on Z^d, d >= 3.

    Steps are i.i.d. uniform over the 2d unit vectors.  Replaying the same
    (seed, stream_id) reproduces the identical path bit for bit.
    """
    if d < DIM_MIN:
        raise ContractError(f"dimension d={d} below {DIM_MIN}; "
                            "the lab only treats transient dimensions")
    if d > DIM_MAX:
        raise ContractError(f"dimension d={d} above supported maximum {DIM_MAX}")
    if n < 0:
        raise ContractError("negative step count")
    if n > max_steps:
        raise ResourceError(f"n={n} exceeds step budget {max_steps}")
    gen = rng.generator()
    steps = gen.integers(0, 2 * d, size=n, dtype=np.uint8)
    return WalkPath(d=d, steps=steps, seed=rng.seed, stream_id=rng.stream_id)


def simulate_steps_batch(d: int, n: int, seed: int, stream_start: int,
                         count: int) -> np.ndarray:
    """(count, n) uint8 step codes, one independent stream per row.

    Row i uses stream_id = stream_start + i, so results do not depend on
    how a caller chunks its batches.
    """
    out = np.empty((count, n), dtype=np.uint8)
    for i in range(count):
        gen = RngStream(seed, stream_start + i).generator()
        out[i] = gen.integers(0, 2 * d, size=n, dtype=np.uint8)
    return out


def batch_positions(d: int, steps: np.ndarray, dtype=np.int32) -> np.ndarray:
    """Positions for a (count, n) batch of step codes -> (count, n+1, d)."""
    count, n = steps.shape
    pos = np.zeros((count, n + 1, d), dtype=dtype)
    axes = steps >> 1
    signs = (1 - 2 * (steps & 1)).astype(np.int8)
    for axis in range(d):
        moves = np.where(axes == axis, signs, 0).astype(dtype)
        np.cumsum(moves, axis=1, out=pos[:, 1:, axis])
    return pos


# ---------------------------------------------------------------------------
# half-open cubes


@dataclass(frozen=True)
class Cube:
    center: tuple
    side: int

    def __post_init__(self):
        if self.side < 1:
            raise ContractError("cube side must be a positive integer")


def cube_contains(cube: Cube, y) -> bool:
    """Membership in the half-open cube: -r/2 <= y_j - x_j < r/2."""
    delta = np.asarray(y, dtype=np.int64) - np.asarray(cube.center,
                                                       dtype=np.int64)
    r = cube.side
    return bool(np.all(2 * delta >= -r) and np.all(2 * delta < r))


def cube_contains_points(center, side: int, pts: np.ndarray) -> np.ndarray:
    """Vectorized membership for an array of points, shape (..., d)."""
    delta = np.asarray(pts, dtype=np.int64) - np.asarray(center,
                                                         dtype=np.int64)
    return np.logical_and(2 * delta >= -side, 2 * delta < side).all(axis=-1)


def cube_sites(center, side: int, d: int | None = None) -> np.ndarray:
    """All lattice sites of Q(center, side), shape (side**d, d)."""
    center = np.asarray(center, dtype=np.int64)
    if d is None:
        d = center.shape[0]
    lo = center - side // 2
    axes = [np.arange(lo[j], lo[j] + side, dtype=np.int64) for j in range(d)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


def cube_index(y, r: int) -> np.ndarray:
    """The unique x in r Z^d with y in Q(x, r); vectorized over (..., d).

    Solves -r/2 <= y - r*m < r/2 coordinatewise, i.e. m = floor((2y+r)/(2r)).
    """
    if r < 1:
        raise ContractError("grid side must be >= 1")
    y = np.asarray(y, dtype=np.int64)
    return r * ((2 * y + r) // (2 * r))


def grid_coords(y, r: int) -> np.ndarray:
    """cube_index(y, r) / r as integer grid coordinates."""
    y = np.asarray(y, dtype=np.int64)
    return (2 * y + r) // (2 * r)


def chebyshev_distance(x, y) -> int:
    delta = np.asarray(x, dtype=np.int64) - np.asarray(y, dtype=np.int64)
    if delta.size == 0:
        return 0
    return int(np.abs(delta).max())


# ---------------------------------------------------------------------------
# coordinate packing (spatial hashing backbone)


@dataclass(frozen=True)
class KeyPacker:
    """Packs integer points of a known bounding box into int64 keys.

    Packing is monotone per coordinate, so equal keys <=> equal points.
    """

    offsets: tuple
    bits: tuple

    def pack(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.int64)
        keys = np.zeros(pts.shape[:-1], dtype=np.int64)
        shift = 0
        for j in range(pts.shape[-1]):
            span = pts[..., j] - self.offsets[j]
            keys |= span << shift
            shift += self.bits[j]
        return keys


def make_packer(*point_arrays: np.ndarray, margin: int = 0) -> KeyPacker:
    """Packer whose box covers every input array (plus a margin per axis)."""
    arrays = [np.asarray(a, dtype=np.int64).reshape(-1, np.asarray(a).shape[-1])
              for a in point_arrays if np.asarray(a).size]
    if not arrays:
        raise ContractError("make_packer needs at least one nonempty array")
    d = arrays[0].shape[1]
    lo = np.min([a.min(axis=0) for a in arrays], axis=0) - margin
    hi = np.max([a.max(axis=0) for a in arrays], axis=0) + margin
    spans = (hi - lo + 1).astype(np.int64)
    bits = tuple(int(max(1, np.ceil(np.log2(s + 1)))) for s in spans)
    if sum(bits) > 62:
        raise ResourceError(f"coordinate box too large to pack: bits={bits}")
    return KeyPacker(offsets=tuple(int(v) for v in lo), bits=bits)


def first_visit_mask(keys: np.ndarray) -> np.ndarray:
    """Boolean mask of the first occurrence of each key, in order."""
    n = keys.shape[0]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    is_first = np.empty(n, dtype=bool)
    is_first[:1] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=is_first[1:])
    mask = np.zeros(n, dtype=bool)
    mask[order[is_first]] = True
    return mask


def distinct_count(keys: np.ndarray) -> int:
    if keys.size == 0:
        return 0
    sorted_keys = np.sort(keys)
    return int(1 + np.count_nonzero(sorted_keys[1:] != sorted_keys[:-1]))


# ---------------------------------------------------------------------------
# path container format


def write_path(path: WalkPath, fname) -> None:
    """Binary container: one JSON header line, then raw step codes."""
    header = {
        "d": path.d,
        "n": path.n,
        "seed": path.seed,
        "stream_id": path.stream_id,
        "format_version": PATH_FORMAT_VERSION,
    }
    with open(fname, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(path.steps.tobytes())


def read_path(fname) -> WalkPath:
    with open(fname, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format_version") != PATH_FORMAT_VERSION:
            raise ContractError(f"unsupported path format: {header}")
        raw = fh.read(header["n"])
    steps = np.frombuffer(raw, dtype=np.uint8, count=header["n"]).copy()
    return WalkPath(d=header["d"], steps=steps, seed=header["seed"],
                    stream_id=header["stream_id"])


def dump_path_ndjson(path: WalkPath, fname) -> None:
    """Debug dump: one JSON position per line."""
    pos = path.positions()
    with open(fname, "w", encoding="ascii") as fh:
        for row in pos:
            fh.write(json.dumps([int(v) for v in row]))
            fh.write("\n")
