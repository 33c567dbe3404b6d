"""Point-set spatial indexing: farthest point sampling, ball query with
shadow-point padding, the strided downsampling hierarchy, and point-cloud
file formats.

Scans are brute-force O(N*M) distance computations chunked over centers;
at the supported scale (N <= 4096) a spatial tree buys nothing.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import as_points

# Binary point-cloud format: magic, little-endian u32 count, N x 3 f64.
CLOUD_MAGIC = b"EPNC"

_CHUNK = 256  # centers per distance-matrix block


@dataclass
class NeighborhoodTable:
    """Ball-query result for M centers against a source cloud of N points.

    neighbor_indices is (M, k_max) into the source cloud, each row sorted by
    ascending distance (ties by index). Rows with fewer than k_max in-radius
    points are padded with the shadow sentinel N (one past the last valid
    index); shadow slots carry zero features downstream and contribute
    nothing to sums. counts[m] is the number of valid entries in row m.
    """

    centers: np.ndarray  # (M, 3) center coordinates
    neighbor_indices: np.ndarray  # (M, k_max) int64
    counts: np.ndarray  # (M,) int64
    radius: float
    n_source: int
    center_indices: np.ndarray | None = None  # (M,) into source, when applicable

    @property
    def sentinel(self) -> int:
        return self.n_source

    @property
    def shadow_mask(self) -> np.ndarray:
        """(M, k_max) boolean mask, True at shadow slots."""
        return self.neighbor_indices == self.n_source


def farthest_point_sample(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection; returns m indices in selection order.

    Starts from seed_index; each step picks the point farthest from the
    selected set, ties broken by smallest index.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"sample size {m} not in [1, {n}]")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed index {seed_index} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))  # argmax returns the smallest index on ties
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def ball_query(
    points,
    centers,
    radius: float,
    k_max: int,
    center_indices: np.ndarray | None = None,
) -> NeighborhoodTable:
    """For each center, the k_max nearest source points within `radius`.

    Neighbors are sorted by ascending distance, ties by index; underfull
    rows are padded with the shadow sentinel. Empty neighborhoods are legal.
    """
    pts = as_points(points, "points")
    ctr = as_points(centers, "centers")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = pts.shape[0]
    m = ctr.shape[0]
    r2 = radius * radius
    nbr = np.full((m, k_max), n, dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    for lo in range(0, m, _CHUNK):
        hi = min(lo + _CHUNK, m)
        d2 = np.sum((ctr[lo:hi, None, :] - pts[None, :, :]) ** 2, axis=2)
        for row in range(hi - lo):
            idx = np.nonzero(d2[row] <= r2)[0]
            order = np.lexsort((idx, d2[row, idx]))
            take = idx[order][:k_max]
            counts[lo + row] = take.size
            nbr[lo + row, : take.size] = take
    return NeighborhoodTable(
        centers=ctr,
        neighbor_indices=nbr,
        counts=counts,
        radius=float(radius),
        n_source=n,
        center_indices=None if center_indices is None else np.asarray(center_indices, dtype=np.int64),
    )


@dataclass
class HierarchyLevel:
    """One downsampling level: center indices into the previous level's
    cloud, the sampled coordinates, and the neighborhood table querying the
    previous level."""

    sampled_indices: np.ndarray
    points: np.ndarray
    table: NeighborhoodTable


def build_hierarchy(
    points,
    levels: int,
    stride: int,
    radii,
    k_max,
    seed_index: int = 0,
) -> list[HierarchyLevel]:
    """Strided FPS hierarchy: level L centers are an FPS subset of level L-1
    with ceil(M/stride) points; neighborhoods query the level L-1 cloud."""
    pts = as_points(points)
    radii = list(radii)
    k_max = list(k_max)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(radii) != levels or len(k_max) != levels:
        raise ValueError("radii and k_max must have one entry per level")
    out: list[HierarchyLevel] = []
    prev = pts
    for lvl in range(levels):
        m = -(-prev.shape[0] // stride)  # ceil division
        if m < 1:
            raise ValueError(f"hierarchy level {lvl} would be empty")
        idx = farthest_point_sample(prev, m, seed_index=seed_index)
        centers = prev[idx]
        table = ball_query(prev, centers, radii[lvl], k_max[lvl], center_indices=idx)
        out.append(HierarchyLevel(sampled_indices=idx, points=centers, table=table))
        prev = centers
    return out


def load_cloud_text(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read `x y z [label]` lines; `#` starts a comment; blank lines skipped.

    Returns (points, labels) where labels is None if no line carried one.
    """
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 'x y z [label]', got {raw.rstrip()!r}")
            rows.append([float(p) for p in parts[:3]])
            labels.append(int(parts[3]) if len(parts) == 4 else None)
    if not rows:
        raise ValueError(f"{path}: no points")
    pts = as_points(np.array(rows, dtype=np.float64), str(path))
    has_labels = [l is not None for l in labels]
    if any(has_labels):
        if not all(has_labels):
            raise ValueError(f"{path}: mixed labeled and unlabeled rows")
        return pts, np.array(labels, dtype=np.int64)
    return pts, None


def save_cloud_text(path, points, labels=None) -> None:
    pts = as_points(points)
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(pts):
            x, y, z = (repr(float(v)) for v in row)  # shortest exact roundtrip
            if labels is None:
                fh.write(f"{x} {y} {z}\n")
            else:
                fh.write(f"{x} {y} {z} {int(labels[i])}\n")


def load_cloud_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {CLOUD_MAGIC!r}")
    (count,) = struct.unpack("<I", data[4:8])
    expected = 8 + count * 3 * 8
    if len(data) != expected:
        raise ValueError(f"{path}: truncated cloud (got {len(data)} bytes, expected {expected})")
    pts = np.frombuffer(data, dtype="<f8", offset=8).reshape(count, 3)
    return as_points(pts.astype(np.float64), str(path))


def save_cloud_binary(path, points) -> None:
    pts = as_points(points)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.astype("<f8").tobytes(order="C"))
