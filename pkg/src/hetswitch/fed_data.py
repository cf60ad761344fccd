"""Federated dataset construction.

A base dataset is split IID into equal client shards; heterogeneity comes
only from the device profile each shard is rendered through.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .isp import DeviceProfile, apply_profile, hsv_to_rgb
from .rng import stream


class FormatError(ValueError):
    pass


@dataclass
class BaseDataset:
    train_x: np.ndarray  # (n, H, W, 3) in [0, 1]
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    def __post_init__(self):
        for split in ("train", "test"):
            x, y = getattr(self, f"{split}_x"), getattr(self, f"{split}_y")
            if len(x) != len(y):
                raise ValueError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"{split}: labels outside [0, {self.n_classes})")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


# --- synthetic base set ---------------------------------------------------

def _grid(h: int, w: int):
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    return yy, xx


def _stripes(t, freq, phase):
    return 0.5 + 0.5 * np.sin(np.pi * freq * t + phase)


def _family_mask(family: int, yy, xx, rng) -> np.ndarray:
    """Soft foreground mask in [0, 1] for one sample of ``family``."""
    freq = rng.uniform(1.5, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(-0.3, 0.3, size=2)
    r = np.hypot(yy - cy, xx - cx)
    size = rng.uniform(0.35, 0.6)
    if family == 0:  # horizontal stripes
        m = _stripes(yy, freq, phase)
    elif family == 1:  # vertical stripes
        m = _stripes(xx, freq, phase)
    elif family == 2:  # diagonal stripes
        m = _stripes((xx + yy) / np.sqrt(2), freq, phase)
    elif family == 3:  # disc
        m = 1 / (1 + np.exp((r - size) * 12))
    elif family == 4:  # ring
        m = np.exp(-((r - size) ** 2) / 0.02)
    elif family == 5:  # checkerboard
        m = _stripes(yy, freq, phase) * _stripes(xx, freq, phase) * 2
    elif family == 6:  # square
        m = 1 / (1 + np.exp((np.maximum(abs(yy - cy), abs(xx - cx)) - size) * 12))
    elif family == 7:  # cross
        m = np.maximum(np.exp(-((yy - cy) ** 2) / 0.02), np.exp(-((xx - cx) ** 2) / 0.02))
    elif family == 8:  # linear ramp
        ang = rng.uniform(0, 2 * np.pi)
        m = 0.5 + 0.5 * (np.cos(ang) * xx + np.sin(ang) * yy)
    else:  # concentric ripples
        m = _stripes(r, freq * 1.5, phase)
    return np.clip(m, 0.0, 1.0)


N_FAMILIES = 10


def gen_base_synthetic(
    n_train: int,
    n_test: int,
    n_classes: int,
    height: int = 16,
    width: int = 16,
    seed: int = 0,
    noise: float = 0.15,
    hue_jitter: float = 60.0,
    distractor: float = 0.5,
) -> BaseDataset:
    """Procedural stand-in for a natural-image dataset.

    Each class is a shape/texture family drawn in a foreground colour whose hue
    is centred on a class-specific angle, over a dull random background. A
    faint pattern from a random other family (opacity up to ``distractor``)
    and Gaussian pixel noise are overlaid, and the pattern's own opacity is
    jittered. Shape and colour both carry label information, so colour/tone
    distortions from device profiles hurt but do not destroy it.
    """
    if n_classes > N_FAMILIES:
        raise ValueError(f"only {N_FAMILIES} pattern families are available, asked for {n_classes} classes")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_train // n_classes < 2 or n_test // n_classes < 2:
        raise ValueError("need at least 2 samples per class in each split")
    rng = stream(seed, "data")
    yy, xx = _grid(height, width)
    n = n_train + n_test
    labels = np.arange(n) % n_classes
    rng.shuffle(labels[:n_train])
    rng.shuffle(labels[n_train:])
    imgs = np.empty((n, height, width, 3))
    for i, c in enumerate(labels):
        m = _family_mask(int(c), yy, xx, rng)[..., None] * rng.uniform(0.4, 1.0)
        other = int((c + rng.integers(1, N_FAMILIES)) % N_FAMILIES)
        d = _family_mask(other, yy, xx, rng)[..., None] * rng.uniform(0.0, distractor)
        hue = (360.0 * c / n_classes + rng.normal(0, hue_jitter)) % 360.0
        fg = hsv_to_rgb(np.array([hue, rng.uniform(0.4, 1.0), rng.uniform(0.5, 1.0)]))
        bg = hsv_to_rgb(np.array([rng.uniform(0, 360), rng.uniform(0.0, 0.4), rng.uniform(0.1, 0.5)]))
        dc = hsv_to_rgb(np.array([rng.uniform(0, 360), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.9)]))
        img = bg * (1 - m) + fg * m
        img = img * (1 - d) + dc * d + rng.normal(0, noise, size=(height, width, 3))
        imgs[i] = np.clip(img, 0.0, 1.0)
    return BaseDataset(imgs[:n_train], labels[:n_train].astype(np.int64),
                       imgs[n_train:], labels[n_train:].astype(np.int64), n_classes)


# --- CIFAR binary ---------------------------------------------------------

def read_cifar_records(path: str | Path, variant: str = "cifar100") -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR binary file: per record, label byte(s) then 3072 planar
    RGB bytes (32×32, row-major). CIFAR-100 records carry coarse then fine
    label; the fine label is returned."""
    if variant not in ("cifar100", "cifar10"):
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    n_label = 2 if variant == "cifar100" else 1
    rec = n_label + 3072
    raw = Path(path).read_bytes()
    if len(raw) % rec:
        off = (len(raw) // rec) * rec
        raise FormatError(
            f"{path}: truncated {variant} record at byte offset {off} "
            f"({len(raw) - off} of {rec} bytes present)"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, n_label - 1].astype(np.int64)
    imgs = arr[:, n_label:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return imgs, labels


def load_cifar_binary(path, test_path=None, variant: str = "cifar100") -> BaseDataset:
    x, y = read_cifar_records(path, variant)
    if test_path is not None:
        tx, ty = read_cifar_records(test_path, variant)
    else:
        tx, ty = x[:0], y[:0]
    return BaseDataset(x, y, tx, ty, 100 if variant == "cifar100" else 10)


# --- binary container -----------------------------------------------------

_DS_MAGIC = b"HSDS"
_DS_FIELDS = ("train_x", "train_y", "test_x", "test_y")


def dump_dataset(ds: BaseDataset, path: str | Path) -> None:
    """Length-prefixed container: magic, uint32 class count, then per array
    (uint32 ndim, uint64 dims..., uint64 nbytes, little-endian payload).
    Images are float64, labels int64."""
    with open(path, "wb") as f:
        f.write(_DS_MAGIC + struct.pack("<I", ds.n_classes))
        for name in _DS_FIELDS:
            a = getattr(ds, name)
            a = np.ascontiguousarray(a, dtype="<f8" if name.endswith("_x") else "<i8")
            f.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
            payload = a.tobytes()
            f.write(struct.pack("<Q", len(payload)) + payload)


def load_dataset(path: str | Path) -> BaseDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _DS_MAGIC:
        raise FormatError(f"{path}: not a dataset container (bad magic)")
    (n_classes,) = struct.unpack_from("<I", raw, 4)
    off, arrays = 8, {}
    for name in _DS_FIELDS:
        try:
            (ndim,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
            off += 4 + 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
        except struct.error as e:
            raise FormatError(f"{path}: truncated header for {name} at byte offset {off}") from e
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {name} at byte offset {off}")
        dt = "<f8" if name.endswith("_x") else "<i8"
        arrays[name] = np.frombuffer(raw, dtype=dt, count=nbytes // 8, offset=off).reshape(shape).copy()
        off += nbytes
    return BaseDataset(n_classes=n_classes, **arrays)


# --- shards and profile assignment ----------------------------------------

@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    profile_id: int | None = None

    def __len__(self) -> int:
        return len(self.indices)


def partition(base: BaseDataset, n_clients: int, seed: int = 0, min_size: int = 1) -> list[ClientShard]:
    """IID split of the train indices into ``n_clients`` near-equal shards."""
    n = len(base.train_y)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n < n_clients:
        raise ValueError(f"{n} training samples cannot be split across {n_clients} clients")
    if n // n_clients < min_size:
        raise ValueError(f"shards of {n // n_clients} samples are smaller than the minibatch size {min_size}")
    perm = stream(seed, "partition").permutation(n)
    return [ClientShard(i, np.sort(chunk)) for i, chunk in enumerate(np.array_split(perm, n_clients))]


@dataclass(frozen=True)
class ShareTable:
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(k), float(v)) for k, v in self.entries))
        shares = [v for _, v in self.entries]
        if not shares or min(shares) < 0:
            raise ValueError("shares must be non-negative and non-empty")
        if abs(sum(shares) - 1.0) > 1e-9:
            raise ValueError(f"shares sum to {sum(shares)!r}, expected 1")
        if len({k for k, _ in self.entries}) != len(self.entries):
            raise ValueError("duplicate profile name in share table")

    @classmethod
    def uniform(cls, names: Sequence[str]) -> "ShareTable":
        return cls(tuple((n, 1.0 / len(names)) for n in names))

    def names(self) -> list[str]:
        return [k for k, _ in self.entries]


# device market shares of the nine phones in the characterisation study
MARKET_SHARE = ShareTable((
    ("S6", 0.38), ("S9", 0.27), ("S22", 0.12), ("G4", 0.08), ("G7", 0.05),
    ("Nexus5X", 0.04), ("Pixel2", 0.03), ("VELVET", 0.02), ("Pixel5", 0.01),
))


def largest_remainder(table: ShareTable, total: int) -> dict[str, int]:
    """Hamilton apportionment; ties on the remainder go to the lexicographically
    smaller name."""
    quotas = {k: v * total for k, v in table.entries}
    # tolerate representation error such as 0.38 * 100 = 37.99999...
    counts = {k: int(math.floor(q + 1e-9)) for k, q in quotas.items()}
    left = total - sum(counts.values())
    order = sorted(quotas, key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[:left]:
        counts[k] += 1
    return counts


def assign_profiles(
    shards: list[ClientShard],
    profiles: Sequence[DeviceProfile],
    table: ShareTable,
    seed: int = 0,
) -> list[ClientShard]:
    index = {p.name: i for i, p in enumerate(profiles)}
    missing = [k for k in table.names() if k not in index]
    if missing:
        raise KeyError(f"share table names unknown profile(s): {missing}")
    counts = largest_remainder(table, len(shards))
    order = stream(seed, "assign").permutation(len(shards))
    out = list(shards)
    pos = 0
    for name in table.names():
        for j in order[pos:pos + counts[name]]:
            out[j] = replace(shards[j], profile_id=index[name])
        pos += counts[name]
    return out


# --- rendering ------------------------------------------------------------

class RenderCache:
    """Per-(split, sample, profile) cache of rendered images.

    Rendering is deterministic, so concurrent fills of the same slot write the
    same bytes; the lock only protects the bookkeeping.
    """

    def __init__(self, base: BaseDataset):
        self.base = base
        self._store: dict = {}
        self._lock = threading.Lock()

    def get(self, split: str, profile: DeviceProfile, indices: np.ndarray) -> np.ndarray:
        src = getattr(self.base, f"{split}_x")
        key = (split, profile)
        with self._lock:
            if key not in self._store:
                self._store[key] = (np.empty_like(src), np.zeros(len(src), dtype=bool))
            buf, done = self._store[key]
            todo = np.asarray(indices)[~done[indices]]
            if len(todo):
                todo = np.unique(todo)
                buf[todo] = apply_profile(src[todo], profile)
                done[todo] = True
            return buf[indices]


@dataclass(frozen=True)
class ClientData:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def render_shard(shard: ClientShard, base: BaseDataset, profiles: Sequence[DeviceProfile],
                 cache: RenderCache | None = None) -> ClientData:
    if shard.profile_id is None:
        raise ValueError(f"client {shard.client_id} has no profile assigned")
    cache = cache or RenderCache(base)
    prof = profiles[shard.profile_id]
    return ClientData(cache.get("train", prof, shard.indices), base.train_y[shard.indices])


def build_eval_sets(base: BaseDataset, profiles: Sequence[DeviceProfile],
                    cache: RenderCache | None = None) -> dict[str, ClientData]:
    if len(base.test_y) == 0:
        raise ValueError("base dataset has no test split")
    cache = cache or RenderCache(base)
    idx = np.arange(len(base.test_y))
    return {p.name: ClientData(cache.get("test", p, idx), base.test_y) for p in profiles}
