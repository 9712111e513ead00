"""Skeleton motion sequences, normalization, synthetic data and dataset files.

A motion sequence is stored as coordinates of shape ``(f, J, 3)``
(frame, joint, xyz).  The denoiser sees the same data as a 3-channel
``J x f`` image, see :func:`to_image`.

Synthetic motion families
-------------------------
:func:`synth_generate` is a stand-in for real capture data.  For class ``k``,
joint ``j``, channel ``ch`` and frame ``tau`` (with ``u = tau / f``)::

    coords[tau, j, ch] = rest[j, ch]
                         + amp(j, ch) * env_k(u) * sin(2 pi (k + 1) u + phase_k(j, ch) + delta)
                         + jitter * n

    rest[j]        = rest[parent(j)] + (0.3 cos th_j, 0.3 sin th_j, 0.4),  th_j = 2 pi j / J,
                     rest[0] = 0
    amp(j, ch)     = 0.5 + 0.5 * (j + 1) / J   (halved on the z channel)
    env_k(u)       = 1 + 0.5 * sin(pi (k + 1) u)
    phase_k(j, ch) = pi (k + 1) (j + 2 ch) / J + pi k / 2

where ``delta ~ U(-phase_spread, phase_spread)`` is one random phase offset per
sequence and ``n ~ N(0, 1)`` is independent per coordinate.  With
``jitter = phase_spread = 0`` the output is exactly this closed form.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"MDIF"
VERSION = 1
DEFAULT_JOINTS = 8
DEFAULT_FRAMES = 32
DEFAULT_SYNTH_CLASSES = 4
DEFAULT_JITTER = 0.05
DEFAULT_PHASE_SPREAD = 0.3


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    joint_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        J = self.joint_count
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if J < 2:
            raise ValueError(f"skeleton needs at least 2 joints, got {J}")
        if len(edges) != J - 1:
            raise ValueError(f"a tree on {J} joints has {J - 1} edges, got {len(edges)}")
        for a, b in edges:
            if not (0 <= a < J and 0 <= b < J):
                raise ValueError(f"edge ({a}, {b}) references a joint outside [0, {J})")
        if self.joint_names and len(self.joint_names) != J:
            raise ValueError("joint_names length must equal joint_count")
        parents = self.parents()
        if parents is None:
            raise ValueError("edges do not form a tree rooted at joint 0")

    def parents(self) -> list[int] | None:
        """Parent index per joint (root gets -1), or None if not a rooted tree."""
        J = self.joint_count
        adj: list[list[int]] = [[] for _ in range(J)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        parent = [-2] * J
        parent[0] = -1
        stack = [0]
        while stack:
            node = stack.pop()
            for nb in adj[node]:
                if nb == parent[node]:
                    continue
                if parent[nb] != -2:
                    return None
                parent[nb] = node
                stack.append(nb)
        if any(p == -2 for p in parent):
            return None
        return parent

    @classmethod
    def chain(cls, joint_count: int) -> "SkeletonSpec":
        return cls(joint_count, tuple((j, j + 1) for j in range(joint_count - 1)))


DEFAULT_SKELETON = SkeletonSpec(
    joint_count=8,
    edges=((0, 7), (7, 1), (1, 2), (1, 3), (1, 4), (0, 5), (0, 6)),
    joint_names=("pelvis", "neck", "head", "left_hand", "right_hand", "left_foot", "right_foot", "spine"),
)


@dataclass(frozen=True, eq=False)
class MotionSequence:
    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError(f"coords must have shape (f, J, 3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coords contain non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.coords.shape == other.coords.shape and np.array_equal(self.coords, other.coords)


@dataclass(frozen=True)
class ActionLabel:
    class_id: int
    num_classes: int

    def __post_init__(self):
        if not 0 <= self.class_id < self.num_classes:
            raise ValueError(f"label {self.class_id} out of range [0,{self.num_classes})")


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    applied: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("norm stats need 3 channels")
        if any(not s > 0 for s in self.std):
            raise ValueError(f"norm std entries must be positive, got {self.std}")

    def as_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "applied": self.applied}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Sequences stacked into one ``(n, f, J, 3)`` array plus integer labels."""

    spec: SkeletonSpec
    coords: np.ndarray
    labels: np.ndarray
    num_classes: int
    norm_stats: NormStats = field(default_factory=NormStats)

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        lab = np.array(self.labels, dtype=np.int64).ravel()
        if c.ndim != 4 or c.shape[3] != 3:
            raise ValueError(f"coords must have shape (n, f, J, 3), got {c.shape}")
        if c.shape[2] != self.spec.joint_count:
            raise ValueError(
                f"joint count mismatch: coords have J={c.shape[2]}, skeleton has J={self.spec.joint_count}"
            )
        if lab.shape[0] != c.shape[0]:
            raise ValueError("one label per sequence required")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0,{self.num_classes})")
        if not np.all(np.isfinite(c)):
            raise ValueError("coords contain non-finite values")
        c.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def frames(self) -> int:
        return self.coords.shape[1]

    @property
    def joints(self) -> int:
        return self.coords.shape[2]

    @property
    def sequences(self) -> list[tuple[MotionSequence, ActionLabel]]:
        return [
            (MotionSequence(c), ActionLabel(int(l), self.num_classes))
            for c, l in zip(self.coords, self.labels)
        ]

    @classmethod
    def from_sequences(cls, spec, pairs, num_classes, norm_stats=None) -> "LabeledDataset":
        pairs = list(pairs)
        if not pairs:
            raise ValueError("need at least one sequence")
        shapes = {s.coords.shape for s, _ in pairs}
        if len(shapes) != 1:
            raise ValueError(f"sequences must share (f, J), got {sorted(shapes)}")
        coords = np.stack([s.coords for s, _ in pairs])
        labels = [l.class_id if isinstance(l, ActionLabel) else int(l) for _, l in pairs]
        return cls(spec, coords, labels, num_classes, norm_stats or NormStats())

    def images(self) -> np.ndarray:
        """All sequences in image layout, shape ``(n, 3, J, f)``."""
        return np.ascontiguousarray(self.coords.transpose(0, 3, 2, 1))

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.num_classes == other.num_classes
            and self.norm_stats == other.norm_stats
            and self.coords.shape == other.coords.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.labels, other.labels)
        )


def to_image(seq: MotionSequence | np.ndarray) -> np.ndarray:
    """``(f, J, 3)`` coordinates to a ``(3, J, f)`` image: ``out[c, j, t] = coords[t, j, c]``."""
    coords = seq.coords if isinstance(seq, MotionSequence) else np.asarray(seq)
    return np.ascontiguousarray(coords.transpose(2, 1, 0))


def from_image(img: np.ndarray) -> MotionSequence:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must have shape (3, J, f), got {img.shape}")
    return MotionSequence(img.transpose(2, 1, 0))


def images_to_coords(images: np.ndarray) -> np.ndarray:
    """Batched inverse of :meth:`LabeledDataset.images`."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 2, 1))


def compute_norm_stats(dataset: LabeledDataset) -> NormStats:
    if len(dataset) == 0:
        raise ValueError("cannot normalize an empty dataset")
    flat = dataset.coords.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for ch, name in enumerate("xyz"):
        if not std[ch] > 0:
            raise ValueError(f"zero variance channel {name} (index {ch}): cannot normalize")
    return NormStats(tuple(mean), tuple(std), applied=True)


def apply_norm(dataset: LabeledDataset, stats: NormStats) -> LabeledDataset:
    """Z-score ``dataset`` with given (possibly foreign) stats."""
    if dataset.norm_stats.applied:
        raise ValueError("dataset is already normalized")
    mean = np.array(stats.mean)
    std = np.array(stats.std)
    coords = (dataset.coords - mean) / std
    return replace(dataset, coords=coords, norm_stats=replace(stats, applied=True))


def normalize(dataset: LabeledDataset) -> tuple[LabeledDataset, NormStats]:
    """Per-channel z-scoring over every frame, joint and sequence.

    Data that is already zero-mean and unit-std per channel is returned
    unchanged, with stats ``(0, 0, 0), (1, 1, 1)``.
    """
    if dataset.norm_stats.applied:
        raise ValueError("dataset is already normalized")
    stats = compute_norm_stats(dataset)
    mean = np.array(stats.mean)
    std = np.array(stats.std)
    if np.allclose(mean, 0.0, rtol=0, atol=1e-12) and np.allclose(std, 1.0, rtol=0, atol=1e-12):
        stats = NormStats(applied=True)
        return replace(dataset, norm_stats=stats), stats
    return apply_norm(dataset, stats), stats


def denormalize_array(coords: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(coords) * np.array(stats.std) + np.array(stats.mean)


def denormalize(dataset: LabeledDataset) -> LabeledDataset:
    stats = dataset.norm_stats
    if not stats.applied:
        raise ValueError("dataset is not normalized")
    return replace(
        dataset,
        coords=denormalize_array(dataset.coords, stats),
        norm_stats=replace(stats, applied=False),
    )


def rest_pose(spec: SkeletonSpec) -> np.ndarray:
    parents = spec.parents()
    J = spec.joint_count
    rest = np.zeros((J, 3))
    order = _topological_order(parents)
    for j in order[1:]:
        th = 2.0 * math.pi * j / J
        rest[j] = rest[parents[j]] + np.array([0.3 * math.cos(th), 0.3 * math.sin(th), 0.4])
    return rest


def _topological_order(parents: list[int]) -> list[int]:
    children: dict[int, list[int]] = {}
    for j, p in enumerate(parents):
        children.setdefault(p, []).append(j)
    order, stack = [], [0]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(reversed(children.get(node, [])))
    return order


def synth_trajectory(class_id: int, spec: SkeletonSpec, f: int, phase_offset: float = 0.0) -> np.ndarray:
    """Noise-free closed-form trajectory of class ``class_id``, shape ``(f, J, 3)``."""
    J = spec.joint_count
    k = class_id
    u = np.arange(f)[:, None, None] / f
    j = np.arange(J)[None, :, None]
    ch = np.arange(3)[None, None, :]
    amp = (0.5 + 0.5 * (j + 1) / J) * np.where(ch == 2, 0.5, 1.0)
    env = 1.0 + 0.5 * np.sin(math.pi * (k + 1) * u)
    phase = math.pi * (k + 1) * (j + 2 * ch) / J + math.pi * k / 2.0
    wave = np.sin(2.0 * math.pi * (k + 1) * u + phase + phase_offset)
    return rest_pose(spec)[None, :, :] + amp * env * wave


def synth_generate(
    class_id: int,
    spec: SkeletonSpec = DEFAULT_SKELETON,
    f: int = DEFAULT_FRAMES,
    rng: np.random.Generator | int | None = None,
    num_classes: int = DEFAULT_SYNTH_CLASSES,
    jitter: float = DEFAULT_JITTER,
    phase_spread: float = DEFAULT_PHASE_SPREAD,
) -> MotionSequence:
    """Draw one synthetic sequence of class ``class_id``."""
    if not 0 <= class_id < num_classes:
        raise ValueError(f"class_id {class_id} out of range [0,{num_classes})")
    if f < 1:
        raise ValueError(f"frame count must be positive, got {f}")
    rng = np.random.default_rng(rng)
    delta = rng.uniform(-phase_spread, phase_spread) if phase_spread > 0 else 0.0
    coords = synth_trajectory(class_id, spec, f, delta)
    if jitter > 0:
        coords = coords + jitter * rng.standard_normal(coords.shape)
    return MotionSequence(coords)


def synth_dataset(
    per_class: int = 50,
    num_classes: int = DEFAULT_SYNTH_CLASSES,
    spec: SkeletonSpec = DEFAULT_SKELETON,
    f: int = DEFAULT_FRAMES,
    rng: np.random.Generator | int | None = None,
    jitter: float = DEFAULT_JITTER,
    phase_spread: float = DEFAULT_PHASE_SPREAD,
) -> LabeledDataset:
    """``per_class`` sequences of every class, ordered class by class."""
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(rng)
    pairs = []
    for k in range(num_classes):
        for _ in range(per_class):
            seq = synth_generate(k, spec, f, rng, num_classes, jitter, phase_spread)
            pairs.append((seq, k))
    return LabeledDataset.from_sequences(spec, pairs, num_classes)


# -- file container ----------------------------------------------------------


def dataset_to_bytes(dataset: LabeledDataset) -> bytes:
    spec = dataset.spec
    n, f, J, _ = dataset.coords.shape
    parts = [MAGIC, struct.pack("<B", VERSION)]
    parts.append(struct.pack("<4I", J, f, dataset.num_classes, n))
    parts.append(struct.pack("<I", len(spec.edges)))
    for a, b in spec.edges:
        parts.append(struct.pack("<2I", a, b))
    ns = dataset.norm_stats
    parts.append(struct.pack("<6f", *ns.mean, *ns.std))
    parts.append(struct.pack("<B", 1 if ns.applied else 0))
    coords32 = dataset.coords.astype("<f4")
    for i in range(n):
        parts.append(struct.pack("<H", int(dataset.labels[i])))
        parts.append(coords32[i].tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(
                f"unexpected end of file at byte {self.pos} (needed {n} more bytes)"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} (this reader handles {VERSION})")
    J, f, C, n = r.unpack("<4I")
    (edge_count,) = r.unpack("<I")
    if edge_count != J - 1:
        raise DatasetFormatError(f"shape inconsistency: {edge_count} edges for J={J}")
    edges = tuple(r.unpack("<2I") for _ in range(edge_count))
    stats = r.unpack("<6f")
    (applied,) = r.unpack("<B")
    if applied not in (0, 1):
        raise DatasetFormatError(f"invalid applied flag {applied}")
    rec = f * J * 3
    coords = np.empty((n, f, J, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        (labels[i],) = r.unpack("<H")
        coords[i] = np.frombuffer(r.take(4 * rec), dtype="<f4").reshape(f, J, 3)
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after last record")
    try:
        spec = SkeletonSpec(J, edges)
        norm = NormStats(stats[:3], stats[3:], bool(applied))
        return LabeledDataset(spec, coords.astype(np.float64), labels, C, norm)
    except ValueError as exc:
        raise DatasetFormatError(f"shape inconsistency: {exc}") from exc


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write ``dataset`` to ``path``.  Coordinates are stored as float32."""
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def as_float32(dataset: LabeledDataset) -> LabeledDataset:
    """Round coordinates and stats through float32, the on-disk precision."""
    ns = dataset.norm_stats
    stats32 = NormStats(
        tuple(np.float32(ns.mean).astype(np.float64)),
        tuple(np.float32(ns.std).astype(np.float64)),
        ns.applied,
    )
    return replace(dataset, coords=dataset.coords.astype(np.float32).astype(np.float64), norm_stats=stats32)
