"""Synthetic datasets, two-view augmentation, masking, and dataset files.

Two kinds of data are produced at desk scale: labeled Gaussian blobs
(vector features) and multi-channel rasters tiled with rectangular
"fields", from which square patches are cut and labeled by their center
pixel. Augmentation draws two independent views per sample; every
generator is deterministic in its seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UnsupportedVersionError

DATASET_MAGIC = b"LLPD"
DATASET_VERSION = 1
_KIND_VECTOR = 0
_KIND_RASTER = 1

DEFAULT_PATCH_SIZE = 21


@dataclass
class VectorDataset:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) int32
    class_count: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> np.ndarray:
        return self.features[i]

    def matrix(self, indices) -> np.ndarray:
        return self.features[np.asarray(indices)]


@dataclass
class PatchRaster:
    """Multi-channel image with a per-pixel class grid (-1 = unlabeled)
    and a polygon-level train/test flag grid."""

    values: np.ndarray  # (C, H, W) float32
    labels: np.ndarray  # (H, W) int32
    class_count: int
    patch_size: int = DEFAULT_PATCH_SIZE
    test_mask: np.ndarray | None = None  # (H, W) bool, True = held-out field

    def __post_init__(self):
        if self.patch_size % 2 != 1:
            raise ValueError("patch_size must be odd")
        _, H, W = self.values.shape
        if H < self.patch_size or W < self.patch_size:
            raise ValueError("raster smaller than one patch")
        if self.test_mask is None:
            self.test_mask = np.zeros((H, W), dtype=bool)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class PatchDataset:
    """Flattened-patch view over a raster for a fixed set of center pixels."""

    raster: PatchRaster
    centers: np.ndarray  # (m, 2) int rows of (row, col)
    labels: np.ndarray  # (m,) int32
    class_count: int

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        p = self.raster.patch_size
        return self.raster.channels * p * p

    def sample(self, i: int) -> np.ndarray:
        r, c = self.centers[i]
        h = self.raster.patch_size // 2
        return self.raster.values[:, r - h : r + h + 1, c - h : c + h + 1]

    def matrix(self, indices) -> np.ndarray:
        rows = [self.sample(i).ravel() for i in np.asarray(indices)]
        return np.stack(rows)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which transforms the two-view draw may apply.

    Patch samples use the geometric pool (right-angle rotation, mirroring,
    random-area crop resized back with nearest neighbor); vector samples
    use additive Gaussian noise and per-feature dropout.
    """

    rotate90: bool = False
    mirror: bool = False
    resized_crop: bool = False
    crop_scale: tuple[float, float] = (0.7, 1.0)
    noise_sigma: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError("crop_scale must lie within (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0 <= self.dropout_rate < 1):
            raise ValueError("dropout_rate must lie in [0, 1)")


def derive_seed(*parts: int) -> int:
    """Stable per-sample seed from integer coordinates (seed, epoch, index, ...)
    so parallel pipelines reproduce serial results exactly."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total` with counts/total closest to the
    proportions (largest-remainder rounding, ties to the lower index)."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    remainder = raw - counts
    deficit = int(total - counts.sum())
    order = np.argsort(-remainder, kind="stable")
    counts[order[:deficit]] += 1
    return counts


def _validated_proportions(proportions, class_count: int) -> np.ndarray:
    w = np.asarray(proportions, dtype=np.float64)
    if w.size != class_count or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("proportions must be a distribution over the classes")
    return w


def _separated_points(rng, count: int, dim: int, min_dist: float) -> np.ndarray:
    """Random points with pairwise distance >= min_dist (1000 attempts each).

    The per-coordinate scale is chosen so typical pairwise distances sit
    just above min_dist: point norms stay comparable to the separation
    instead of dwarfing it.
    """
    scale = 1.5 * max(min_dist, 1e-6) / np.sqrt(dim)
    points = np.empty((count, dim))
    for k in range(count):
        for _ in range(1000):
            cand = rng.normal(0.0, scale, size=dim)
            if k == 0 or np.linalg.norm(points[:k] - cand, axis=1).min() >= min_dist:
                points[k] = cand
                break
        else:
            raise ValueError(
                f"could not place point {k} at separation {min_dist} after 1000 attempts"
            )
    return points


def gen_blobs(
    class_count: int,
    dim: int,
    proportions,
    centers_separation: float,
    sigma: float,
    n: int,
    seed: int,
) -> VectorDataset:
    """Isotropic Gaussian blobs with class sizes fixed by largest-remainder
    rounding of proportions * n."""
    w = _validated_proportions(proportions, class_count)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = largest_remainder_counts(w, n)
    rng = np.random.default_rng(seed)
    centers = _separated_points(rng, class_count, dim, centers_separation)

    features = np.empty((n, dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int32)
    pos = 0
    for k in range(class_count):
        c = int(counts[k])
        features[pos : pos + c] = centers[k] + sigma * rng.standard_normal((c, dim))
        labels[pos : pos + c] = k
        pos += c
    perm = rng.permutation(n)
    return VectorDataset(
        features=features[perm].astype(np.float32),
        labels=labels[perm],
        class_count=class_count,
    )


def split_vector_dataset(ds: VectorDataset, n_train: int) -> tuple[VectorDataset, VectorDataset]:
    """Split an already-shuffled vector dataset into train/test heads."""
    if not (0 < n_train < len(ds)):
        raise ValueError(f"n_train must be in (0, {len(ds)})")
    head = VectorDataset(ds.features[:n_train].copy(), ds.labels[:n_train].copy(), ds.class_count)
    tail = VectorDataset(ds.features[n_train:].copy(), ds.labels[n_train:].copy(), ds.class_count)
    return head, tail


def _split_fields(rng, rect: tuple[int, int, int, int], pieces: int) -> list[tuple[int, int, int, int]]:
    """Guillotine-split one rectangle into `pieces` rectangles."""
    fields = [rect]
    while len(fields) < pieces:
        areas = [(r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in fields]
        order = np.argsort(areas)[::-1]
        for i in order:
            r0, r1, c0, c1 = fields[i]
            h, w = r1 - r0, c1 - c0
            if max(h, w) < 2:
                continue
            frac = rng.uniform(0.35, 0.65)
            if h >= w:
                cut = r0 + min(max(int(round(h * frac)), 1), h - 1)
                a, b = (r0, cut, c0, c1), (cut, r1, c0, c1)
            else:
                cut = c0 + min(max(int(round(w * frac)), 1), w - 1)
                a, b = (r0, r1, c0, cut), (r0, r1, cut, c1)
            fields[i : i + 1] = [a, b]
            break
        else:
            raise ValueError("field geometry cannot be split further")
    return fields


def gen_patch_world(
    height: int,
    width: int,
    class_count: int,
    field_count: int,
    proportions,
    signature_gap: float,
    texture_sigma: float,
    seed: int,
    channels: int = 3,
    patch_size: int = DEFAULT_PATCH_SIZE,
    test_fraction: float = 0.5,
    field_jitter: float = 0.0,
) -> PatchRaster:
    """Rectangular-field mosaic with per-class channel signatures.

    Class areas are packed into horizontal bands as rectangular fields whose
    total must land within 2 percentage points of the requested proportions;
    roughly `test_fraction` of every class's fields (by area) is flagged as
    held-out. Class signatures are random channel vectors with pairwise
    distance >= signature_gap; texture_sigma adds i.i.d. Gaussian noise per
    pixel and channel, and field_jitter adds a per-field channel offset so
    fields of one class vary in appearance (same-class fields then only
    group together under some supervision signal, as in real crop mosaics).
    """
    w = _validated_proportions(proportions, class_count)
    if height < patch_size or width < patch_size:
        raise ValueError("world smaller than one patch")
    if texture_sigma < 0:
        raise ValueError("texture_sigma must be >= 0")
    if not (0 <= test_fraction < 1):
        raise ValueError("test_fraction must lie in [0, 1)")
    # with a held-out split every class needs a train field and a test field
    min_fields = 2 if test_fraction > 0 else 1
    if field_count < min_fields * class_count:
        raise ValueError(f"need at least {min_fields} field(s) per class")

    rng = np.random.default_rng(seed)

    # Pack class areas band by band (band height ~1.5 patches) so every
    # class, however small, gets reasonably wide rectangular pieces instead
    # of sliver strips narrower than a patch window. Largest classes are
    # packed first so they absorb the grid edges, keeping small classes away
    # from the patch border.
    n_bands = max(1, round(height / (1.5 * patch_size)))
    band_heights = largest_remainder_counts(np.full(n_bands, 1.0 / n_bands), height)
    targets = largest_remainder_counts(w, height * width).astype(np.float64)
    by_size = list(np.argsort(-w, kind="stable"))
    pieces: dict[int, list[tuple[int, int, int, int]]] = {k: [] for k in range(class_count)}
    pieces_flat: list[tuple[int, int, int, int]] = []
    piece_owner: list[int] = []
    # largest class first (it owns the top edge), then ascending sizes, so
    # the large classes bracket the grid and small ones stay interior
    queue = by_size[:1] + by_size[1:][::-1]
    row0 = 0
    for band_h in band_heights:
        band_h = int(band_h)
        col0 = 0
        while col0 < width:
            while queue and targets[queue[0]] <= 0:
                queue.pop(0)
            if not queue:
                # all targets consumed: the last placed class pads out the band
                k_last = piece_owner[-1]
                prev = pieces[k_last][-1]
                if prev[0] == row0 and prev[3] == col0:
                    grown = (row0, row0 + band_h, prev[2], width)
                    pieces[k_last][-1] = grown
                    pieces_flat[-1] = grown
                else:
                    piece = (row0, row0 + band_h, col0, width)
                    pieces[k_last].append(piece)
                    pieces_flat.append(piece)
                    piece_owner.append(k_last)
                break
            k = queue[0]
            want = int(round(targets[k] / band_h))
            if want == 0 and pieces[k]:
                # sub-half-column remainder: absorb into later classes
                targets[k] = 0.0
                continue
            want = max(2, want) if not pieces[k] else want
            if not queue[1:]:
                want = width - col0  # last class absorbs the remainder
            cols = min(want, width - col0)
            if width - col0 - cols < 4:
                cols = width - col0  # no band-edge slivers narrower than 4 columns
            piece = (row0, row0 + band_h, col0, col0 + cols)
            pieces[k].append(piece)
            pieces_flat.append(piece)
            piece_owner.append(k)
            targets[k] -= cols * band_h
            col0 += cols
        row0 += band_h

    realized = np.array(
        [sum((r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in pieces[k]) for k in range(class_count)]
    ) / (height * width)
    if np.any(np.abs(realized - w) > 0.02):
        raise ValueError(
            f"field layout reaches proportions {np.round(realized, 4)} "
            f"which miss the target by more than 2%"
        )

    extra = largest_remainder_counts(w, max(0, field_count - min_fields * class_count))
    fields_per_class = min_fields + extra

    labels = np.full((height, width), -1, dtype=np.int32)
    test_mask = np.zeros((height, width), dtype=bool)
    jitter_map = np.zeros((channels, height, width))
    for k in range(class_count):
        fields = list(pieces[k])
        while len(fields) < fields_per_class[k]:
            largest = max(range(len(fields)), key=lambda i: (
                (fields[i][1] - fields[i][0]) * (fields[i][3] - fields[i][2])
            ))
            rect = fields.pop(largest)
            fields.extend(_split_fields(rng, rect, 2))
        for r0, r1, c0, c1 in fields:
            labels[r0:r1, c0:c1] = k
            if field_jitter > 0:
                offset = rng.normal(0.0, field_jitter, size=channels)
                jitter_map[:, r0:r1, c0:c1] = offset[:, None, None]
        # Field-level split, largest fields first, each going to whichever
        # side is furthest below its area target; both splits always get a
        # substantial field.
        fields.sort(key=lambda f: -(f[1] - f[0]) * (f[3] - f[2]))
        class_area = sum((r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in fields)
        train_area = test_area = 0
        for r0, r1, c0, c1 in fields:
            train_deficit = (1.0 - test_fraction) * class_area - train_area
            test_deficit = test_fraction * class_area - test_area
            if test_deficit > train_deficit:
                test_mask[r0:r1, c0:c1] = True
                test_area += (r1 - r0) * (c1 - c0)
            else:
                train_area += (r1 - r0) * (c1 - c0)

    if np.any(labels < 0):
        raise ValueError("internal tiling error: some pixels received no field")
    signatures = _separated_points(rng, class_count, channels, signature_gap)
    values = signatures[labels].transpose(2, 0, 1).astype(np.float64) + jitter_map
    if texture_sigma > 0:
        values = values + texture_sigma * rng.standard_normal(values.shape)
    return PatchRaster(
        values=values.astype(np.float32),
        labels=labels,
        class_count=class_count,
        patch_size=patch_size,
        test_mask=test_mask,
    )


def extract_patch(raster: PatchRaster, row: int, col: int) -> tuple[np.ndarray, int]:
    """Flattened channel-major patch window centered at (row, col), plus the
    center pixel's label. The full window must lie inside the raster."""
    h = raster.patch_size // 2
    if not (h <= row < raster.height - h and h <= col < raster.width - h):
        raise ValueError(
            f"patch window at ({row}, {col}) leaves the {raster.height}x{raster.width} raster"
        )
    window = raster.values[:, row - h : row + h + 1, col - h : col + h + 1]
    return window.ravel().copy(), int(raster.labels[row, col])


def patch_dataset(
    raster: PatchRaster,
    region: str = "all",
    keep_mask: np.ndarray | None = None,
) -> PatchDataset:
    """Valid patch centers of a raster as a dataset.

    region selects by the polygon split at the center pixel: "train"
    (non-held-out), "test" (held-out), or "all". Unlabeled centers are
    dropped; `keep_mask` (H x W bool) additionally restricts centers, e.g.
    to pixels surviving a variance mask.
    """
    if region not in ("all", "train", "test"):
        raise ValueError(f"unknown region {region!r}")
    h = raster.patch_size // 2
    valid = np.zeros((raster.height, raster.width), dtype=bool)
    valid[h : raster.height - h, h : raster.width - h] = True
    valid &= raster.labels >= 0
    if region == "train":
        valid &= ~raster.test_mask
    elif region == "test":
        valid &= raster.test_mask
    if keep_mask is not None:
        valid &= keep_mask
    rows, cols = np.nonzero(valid)
    centers = np.stack([rows, cols], axis=1)
    return PatchDataset(
        raster=raster,
        centers=centers,
        labels=raster.labels[rows, cols].astype(np.int32),
        class_count=raster.class_count,
    )


def rotate_patch(x: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(x, quarter_turns, axes=(1, 2)).copy()


def mirror_patch(x: np.ndarray) -> np.ndarray:
    return x[:, :, ::-1].copy()


def crop_resize_patch(x: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Crop a side x side window and nearest-neighbor resize back."""
    p = x.shape[1]
    crop = x[:, top : top + side, left : left + side]
    idx = (np.arange(p) * side) // p
    return crop[:, idx[:, None], idx[None, :]].copy()


def _augment(x: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    if x.ndim == 1:
        out = x.astype(np.float32, copy=True)
        if policy.noise_sigma > 0:
            out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape).astype(np.float32)
        if policy.dropout_rate > 0:
            out[rng.random(out.shape) < policy.dropout_rate] = 0.0
        return out
    if x.ndim == 3:
        out = x
        if policy.rotate90:
            k = int(rng.integers(4))
            if k:
                out = rotate_patch(out, k)
        if policy.mirror:
            if int(rng.integers(2)):
                out = mirror_patch(out)
        if policy.resized_crop:
            p = out.shape[1]
            scale = rng.uniform(*policy.crop_scale)
            side = min(p, max(1, int(round(p * np.sqrt(scale)))))
            top = int(rng.integers(p - side + 1))
            left = int(rng.integers(p - side + 1))
            if side < p:
                out = crop_resize_patch(out, top, left, side)
        return out.copy() if out is x else out
    raise ValueError("sample must be a 1-D vector or a (C, p, p) patch")


def two_views(sample: np.ndarray, policy: AugmentationPolicy, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmented views of one sample, deterministic in
    (sample, seed). Views keep the input's shape; the label never changes."""
    rng = np.random.default_rng(seed)
    return _augment(sample, policy, rng), _augment(sample, policy, rng)


def variance_mask(index_stack: np.ndarray, percentile_threshold: float = 25.0) -> tuple[np.ndarray, float]:
    """Keep pixels whose temporal standard deviation exceeds the given
    percentile of the std distribution.

    Returns (keep_mask, masked_fraction) where masked_fraction is the share
    of pixels removed. Raising the percentile never adds pixels.
    """
    stack = np.asarray(index_stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ValueError("index stack must be (T, H, W) with T >= 2")
    stds = stack.std(axis=0)
    threshold = np.percentile(stds, percentile_threshold)
    keep = stds > threshold
    return keep, float(1.0 - keep.mean())


def _read_exact(fh, nbytes: int) -> bytes:
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise FormatError(f"truncated file: wanted {nbytes} bytes, got {len(data)}")
    return data


def save_dataset(path, dataset) -> None:
    """Write a dataset file (magic LLPD, version, kind, dims, f32 payload,
    i32 labels; rasters append the u8 test grid). Round trips are bitwise
    lossless."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        if isinstance(dataset, VectorDataset):
            n, d = dataset.features.shape
            fh.write(struct.pack("<B", _KIND_VECTOR))
            fh.write(struct.pack("<III", n, d, dataset.class_count))
            fh.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
        elif isinstance(dataset, PatchRaster):
            fh.write(struct.pack("<B", _KIND_RASTER))
            fh.write(
                struct.pack(
                    "<IIIII",
                    dataset.channels,
                    dataset.height,
                    dataset.width,
                    dataset.patch_size,
                    dataset.class_count,
                )
            )
            fh.write(np.ascontiguousarray(dataset.values, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(dataset.test_mask, dtype=np.uint8).tobytes())
        else:
            raise TypeError(f"cannot save object of type {type(dataset).__name__}")


def load_dataset(path):
    """Read a dataset file written by save_dataset."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != DATASET_VERSION:
            raise UnsupportedVersionError(f"dataset version {version} not supported")
        (kind,) = struct.unpack("<B", _read_exact(fh, 1))
        if kind == _KIND_VECTOR:
            n, d, class_count = struct.unpack("<III", _read_exact(fh, 12))
            features = np.frombuffer(_read_exact(fh, 4 * n * d), dtype="<f4").reshape(n, d)
            labels = np.frombuffer(_read_exact(fh, 4 * n), dtype="<i4")
            return VectorDataset(
                features=features.copy(), labels=labels.copy(), class_count=class_count
            )
        if kind == _KIND_RASTER:
            C, H, W, patch_size, class_count = struct.unpack("<IIIII", _read_exact(fh, 20))
            values = np.frombuffer(_read_exact(fh, 4 * C * H * W), dtype="<f4").reshape(C, H, W)
            labels = np.frombuffer(_read_exact(fh, 4 * H * W), dtype="<i4").reshape(H, W)
            test_mask = np.frombuffer(_read_exact(fh, H * W), dtype=np.uint8).reshape(H, W)
            return PatchRaster(
                values=values.copy(),
                labels=labels.copy(),
                class_count=class_count,
                patch_size=patch_size,
                test_mask=test_mask.astype(bool),
            )
        raise FormatError(f"unknown dataset kind {kind}")
