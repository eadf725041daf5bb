"""Procedural k-distinguishable image corpora and their on-disk format.

Images are ``image_size`` squares holding a grey plate divided into a
``slots`` x ``slots`` grid; each slot carries a ``glyph_size`` glyph.  Glyph *shape*
is coarse (legible after heavy downsampling), glyph *variant* is a zero-mean
checker texture laid over the whole glyph square, so every coarse block keeps
its mean and the variant only survives at local-crop resolution.

Fine mode groups classes in confusable pairs that share one shape template.
Within a group, the class of an instance is

    parity(variants on the k key slots)  XOR  mark

where ``mark`` is a coarse global cue (a small block on one non-key slot,
present or absent).  Variants and mark are drawn uniformly per instance
subject to that constraint, so any k-1 slot views are uniformly distributed
regardless of class, while the global view plus all k key slots determine
it.  ``relational`` picks which groups fold the mark in: ``"all"`` does so
for every group, ``"mixed"`` only for even-numbered groups, and the default
``"none"`` for no group (the mark is then pure nuisance and the key-slot
parity alone decides the class).  Coarse mode gives every class its own
template (distinct shape multisets) and carries no key slots.
"""

from __future__ import annotations

import itertools
import json
import logging
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = "relproxy-dataset"

PLATE_LEVEL = 0.35
SOLID_LEVEL = 0.55
TEXTURE_AMP = 0.20
BRIGHTNESS_RANGE = (0.8, 1.2)

_SPLITS = ("train", "test")


class DatasetError(Exception):
    """Base class for dataset generation and I/O failures."""


class InvalidMetaError(DatasetError, ValueError):
    pass


class FormatVersionError(DatasetError):
    pass


class TruncatedDataError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetMeta:
    c: int = 8
    k: int = 4
    mode: str = "fine"
    seed: int = 0
    slots: int = 3
    glyph_size: int = 16
    image_size: int = 80
    vocab: int = 12
    group_size: int = 2
    n_train: int = 256
    n_test: int = 64
    noise: float = 0.05
    jitter: int = 4
    relational: str = "none"              # all | mixed | none

    @property
    def n_slots(self) -> int:
        return self.slots * self.slots

    @property
    def cell(self) -> int:
        return (self.image_size - 2 * self.margin_min) // self.slots

    @property
    def margin_min(self) -> int:
        # the plate keeps at least jitter + 2 px of background on every side
        return self.jitter + 2

    @property
    def plate_size(self) -> int:
        return self.cell * self.slots

    @property
    def margin(self) -> int:
        return (self.image_size - self.plate_size) // 2

    def validate(self) -> None:
        if self.mode not in ("fine", "coarse"):
            raise InvalidMetaError(f"mode must be 'fine' or 'coarse', got {self.mode!r}")
        if self.relational not in ("all", "mixed", "none"):
            raise InvalidMetaError(f"relational must be all, mixed or none, got {self.relational!r}")
        if self.c < 2:
            raise InvalidMetaError("c must be at least 2")
        if self.k < 1 or self.k > self.n_slots:
            raise InvalidMetaError(f"k={self.k} must lie in [1, slot count={self.n_slots}]")
        if self.mode == "fine":
            if self.group_size != 2:
                raise InvalidMetaError("fine mode supports confusable pairs only (group_size=2)")
            if self.c % self.group_size:
                raise InvalidMetaError(f"c={self.c} cannot be partitioned into groups of {self.group_size}")
        if self.cell < self.glyph_size:
            raise InvalidMetaError("image too small for the slot grid and glyph size")
        if self.glyph_size < 4 or self.glyph_size % 4:
            raise InvalidMetaError("glyph_size must be a positive multiple of 4")
        if self.vocab < 5:
            raise InvalidMetaError("vocab must hold at least 5 glyphs")
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidMetaError("both splits need at least one instance per class")
        if not 0 <= self.noise < 0.5:
            raise InvalidMetaError("noise must lie in [0, 0.5)")
        if not 0 <= self.jitter <= self.glyph_size // 2:
            raise InvalidMetaError("jitter must lie in [0, glyph radius]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidMetaError(f"unknown meta keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    group_id: int
    glyph_multiset: tuple[int, ...]
    arrangement: tuple[int, ...]          # slot -> glyph id, -1 for the mark slot
    parity: int                           # target of parity(key variants) ^ mark
    key_slots: tuple[int, ...]
    mark_slot: int | None
    uses_mark: bool = False               # mark enters the class rule


@dataclass(frozen=True)
class Nuisance:
    dy: int
    dx: int
    noise_seed: int
    brightness: float
    mark: int
    variants: int                         # bitmask over slots


@dataclass
class Instance:
    image: np.ndarray                     # float32 (H, W)
    label: int
    nuisance: Nuisance


@dataclass
class Dataset:
    meta: DatasetMeta
    train: list[Instance] = field(default_factory=list)
    test: list[Instance] = field(default_factory=list)

    def split(self, name: str) -> list[Instance]:
        if name not in _SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def images(self, name: str) -> np.ndarray:
        return np.stack([inst.image for inst in self.split(name)]).astype(np.float64)

    def labels(self, name: str) -> np.ndarray:
        return np.array([inst.label for inst in self.split(name)], dtype=np.int64)

    def classes(self) -> list[ClassSpec]:
        return class_specs(self.meta)

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for spec in self.classes():
            out.setdefault(spec.group_id, []).append(spec.class_id)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.meta != other.meta:
            return False
        for name in _SPLITS:
            a, b = self.split(name), other.split(name)
            if len(a) != len(b):
                return False
            for x, y in zip(a, b):
                if x.label != y.label or x.nuisance != y.nuisance:
                    return False
                if x.image.dtype != y.image.dtype or not np.array_equal(x.image, y.image):
                    return False
        return True


# ---------------------------------------------------------------- glyphs

def glyph_tile(seed: int, glyph_id: int, size: int = 8) -> np.ndarray:
    """Binary shape mask built from a random 4x4 block pattern."""
    rng = np.random.default_rng([seed, 0x61, glyph_id])
    while True:
        blocks = rng.random((4, 4)) < 0.5
        if 6 <= blocks.sum() <= 11:
            break
    rep = size // 4
    return np.kron(blocks, np.ones((rep, rep))).astype(np.float64)


def glyph_tiles(meta: DatasetMeta) -> np.ndarray:
    """All ``vocab`` tiles, re-drawing any id that collides with an earlier one."""
    tiles: list[np.ndarray] = []
    for gid in range(meta.vocab):
        salt = 0
        while True:
            t = glyph_tile(meta.seed + 7919 * salt, gid, meta.glyph_size)
            if all(np.abs(t - u).sum() >= 8 for u in tiles):
                break
            salt += 1
        tiles.append(t)
    return np.stack(tiles)


# ---------------------------------------------------------------- templates

def slot_order(slots: int) -> list[int]:
    """Corners first (TL, TR, BL, BR), then the centre, then the rest row-major."""
    last = slots - 1
    corners = [0, last, last * slots, slots * slots - 1]
    order = list(dict.fromkeys(corners))
    if slots % 2 == 1 and slots > 1:
        order.append((slots // 2) * slots + slots // 2)
    order += [s for s in range(slots * slots) if s not in order]
    return order


def class_specs(meta: DatasetMeta) -> list[ClassSpec]:
    meta.validate()
    rng = np.random.default_rng([meta.seed, 0x7E])
    order = slot_order(meta.slots)
    n = meta.n_slots
    specs: list[ClassSpec] = []
    if meta.mode == "fine":
        key = tuple(sorted(order[: meta.k]))
        mark = order[-1] if meta.k < n else None
        seen: set[tuple[int, ...]] = set()
        for g in range(meta.c // meta.group_size):
            while True:
                arr = [int(x) for x in rng.integers(0, meta.vocab, size=n)]
                corner_ids = [arr[s] for s in key]
                if len(set(corner_ids)) != len(corner_ids) and len(key) <= meta.vocab:
                    arr_key = rng.choice(meta.vocab, size=len(key), replace=False)
                    for s, gid in zip(key, arr_key):
                        arr[s] = int(gid)
                if mark is not None:
                    arr[mark] = -1
                ms = tuple(sorted(a for a in arr if a >= 0))
                if ms not in seen:
                    seen.add(ms)
                    break
            uses_mark = mark is not None and (
                meta.relational == "all" or (meta.relational == "mixed" and g % 2 == 0))
            for j in range(meta.group_size):
                specs.append(ClassSpec(len(specs), g, ms, tuple(arr), j, key, mark, uses_mark))
    else:
        key = tuple(sorted(order[: min(4, n)]))
        seen = set()
        for cls in range(meta.c):
            while True:
                arr = tuple(int(x) for x in rng.integers(0, meta.vocab, size=n))
                ms = tuple(sorted(arr))
                if ms not in seen:
                    seen.add(ms)
                    break
            specs.append(ClassSpec(cls, cls, ms, arr, 0, key, None))
    return specs


def admissible_configs(spec: ClassSpec, mode: str) -> list[tuple[int, int]]:
    """All (mark, variant bitmask) pairs an instance of ``spec`` can take."""
    out = []
    marks = (0, 1) if spec.mark_slot is not None else (0,)
    for mark in marks:
        for bits in itertools.product((0, 1), repeat=len(spec.key_slots)):
            if mode == "fine" and (sum(bits) + mark * spec.uses_mark) % 2 != spec.parity:
                continue
            mask = 0
            for s, b in zip(spec.key_slots, bits):
                mask |= b << s
            out.append((mark, mask))
    return out


# ---------------------------------------------------------------- rendering

def _checker(side: int, sq: int) -> np.ndarray:
    ii, jj = np.indices((side, side)) // sq
    return np.where((ii + jj) % 2 == 0, TEXTURE_AMP, -TEXTURE_AMP)


def slot_tile(meta: DatasetMeta, tiles: np.ndarray, glyph: int, variant: int, mark: int) -> np.ndarray:
    """Noiseless content of one slot cell (cell x cell).

    A textured glyph slot carries a zero-mean checker of glyph/8-px squares
    over the whole glyph square: every block keeps its mean, so the texture vanishes
    once the plate is shrunk to encoder resolution.
    """
    cell = np.full((meta.cell, meta.cell), PLATE_LEVEL)
    off = (meta.cell - meta.glyph_size) // 2
    p = meta.glyph_size
    if glyph >= 0:
        cell[off:off + p, off:off + p] = np.where(tiles[glyph] > 0, SOLID_LEVEL, PLATE_LEVEL)
        if variant:
            cell[off:off + p, off:off + p] += _checker(p, max(1, p // 8))
    elif mark:
        q = p // 2
        o = (meta.cell - q) // 2
        cell[o:o + q, o:o + q] = SOLID_LEVEL
    return cell


def render(meta: DatasetMeta, tiles: np.ndarray, spec: ClassSpec, nuisance: Nuisance,
           clean: bool = False) -> np.ndarray:
    """Rasterise one instance; ``clean`` skips brightness and noise."""
    img = np.zeros((meta.image_size, meta.image_size))
    top = meta.margin + nuisance.dy
    left = meta.margin + nuisance.dx
    for s, glyph in enumerate(spec.arrangement):
        r, c = divmod(s, meta.slots)
        variant = (nuisance.variants >> s) & 1
        y, x = top + r * meta.cell, left + c * meta.cell
        img[y:y + meta.cell, x:x + meta.cell] = slot_tile(meta, tiles, glyph, variant, nuisance.mark)
    if not clean:
        img *= nuisance.brightness
        noise_rng = np.random.default_rng(nuisance.noise_seed)
        img += noise_rng.normal(0.0, meta.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_instance(meta: DatasetMeta, tiles: np.ndarray, spec: ClassSpec, split: int, idx: int) -> Instance:
    rng = np.random.default_rng([meta.seed, 0x1A, split, spec.class_id, idx])
    configs = admissible_configs(spec, meta.mode)
    mark, variants = configs[int(rng.integers(len(configs)))]
    if meta.mode == "coarse":
        variants = int(rng.integers(0, 2 ** meta.n_slots)) & sum(1 << s for s in spec.key_slots)
    dy, dx = (int(v) for v in rng.integers(-meta.jitter, meta.jitter + 1, size=2))
    lo, hi = BRIGHTNESS_RANGE
    brightness = float(np.float32(rng.uniform(lo, hi)))
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    nuisance = Nuisance(dy, dx, noise_seed, brightness, int(mark), int(variants))
    image = render(meta, tiles, spec, nuisance).astype(np.float32)
    return Instance(image, spec.class_id, nuisance)


def generate(meta: DatasetMeta | None = None, **overrides) -> Dataset:
    """Build a dataset deterministically from ``meta`` (plus keyword overrides)."""
    meta = meta or DatasetMeta()
    if overrides:
        meta = DatasetMeta(**{**meta.to_dict(), **overrides})
    meta.validate()
    specs = class_specs(meta)
    if meta.mode == "fine":
        _check_sub_k_ambiguity(meta, specs)
    tiles = glyph_tiles(meta)
    data = Dataset(meta)
    for split, (name, count) in enumerate((("train", meta.n_train), ("test", meta.n_test))):
        out = data.split(name)
        for i in range(count):
            for spec in specs:
                out.append(_draw_instance(meta, tiles, spec, split, i))
    return data


# ---------------------------------------------------------------- audit

def _observation(spec: ClassSpec, mark: int, variants: int, subset) -> tuple:
    views = []
    for s in subset:
        glyph = spec.arrangement[s]
        if glyph < 0:
            views.append(("mark", mark))
        else:
            views.append((glyph, (variants >> s) & 1))
    return tuple(sorted(views, key=repr))


def _global_view(spec: ClassSpec, mark: int) -> tuple:
    # coarse layer only: shapes and the mark, never the fine variants
    return spec.arrangement, mark


def _group_specs(specs: list[ClassSpec]) -> dict[int, list[ClassSpec]]:
    groups: dict[int, list[ClassSpec]] = {}
    for spec in specs:
        groups.setdefault(spec.group_id, []).append(spec)
    return groups


def _check_sub_k_ambiguity(meta: DatasetMeta, specs: list[ClassSpec]) -> None:
    """Every subset of fewer than k slots sees the same view distribution in a group."""
    for gid, members in _group_specs(specs).items():
        for m in range(meta.k):
            for subset in itertools.combinations(range(meta.n_slots), m):
                dists = []
                for spec in members:
                    counts = Counter(_observation(spec, mk, v, subset)
                                     for mk, v in admissible_configs(spec, meta.mode))
                    total = sum(counts.values())
                    dists.append({o: n / total for o, n in counts.items()})
                if any(d != dists[0] for d in dists[1:]):
                    raise DatasetError(f"group {gid}: slots {subset} separate classes below k")


@dataclass(frozen=True)
class GroupAudit:
    group_id: int
    classes: tuple[int, ...]
    m: int
    ambiguous: bool
    determining_subsets: tuple[tuple[int, ...], ...]

    @property
    def verdict(self) -> str:
        return "ambiguous" if self.ambiguous else "determining"


def bag_ambiguity_audit(dataset: Dataset | DatasetMeta, m: int) -> list[GroupAudit]:
    """Check, per confusable group, whether some bag of ``m`` slot views fixes the class.

    A slot subset *determines* the class when no two admissible configurations
    of different classes agree on both the global (coarse) view and the
    multiset of noiseless slot views.  A group is ambiguous at ``m`` when no
    subset of that size determines it.
    """
    meta = dataset.meta if isinstance(dataset, Dataset) else dataset
    if meta.mode != "fine":
        raise InvalidMetaError("bag_ambiguity_audit needs a fine-mode dataset")
    if m < 0 or m > meta.n_slots:
        raise InvalidMetaError(f"m={m} must lie in [0, {meta.n_slots}]")
    report = []
    for gid, members in sorted(_group_specs(class_specs(meta)).items()):
        winners = []
        for subset in itertools.combinations(range(meta.n_slots), m):
            owner: dict[tuple, int] = {}
            clash = False
            for spec in members:
                for mk, v in admissible_configs(spec, meta.mode):
                    obs = (_global_view(spec, mk), _observation(spec, mk, v, subset))
                    if owner.setdefault(obs, spec.class_id) != spec.class_id:
                        clash = True
                        break
                if clash:
                    break
            if not clash:
                winners.append(subset)
        report.append(GroupAudit(gid, tuple(s.class_id for s in members), m,
                                 not winners, tuple(winners)))
    return report


# ---------------------------------------------------------------- persistence

def save(dataset: Dataset, path) -> Path:
    """Write ``meta.json`` and ``data.bin`` into directory ``path``.

    data.bin holds three little-endian sections: int32 labels, float32
    images (row-major, train then test) and int32 nuisance records
    ``[dy, dx, noise_seed, mark, variants]`` followed by float32 brightness.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    insts = dataset.train + dataset.test
    labels = np.array([i.label for i in insts], dtype="<i4")
    images = np.stack([i.image for i in insts]).astype("<f4")
    nuis = np.array([[i.nuisance.dy, i.nuisance.dx, i.nuisance.noise_seed,
                      i.nuisance.mark, i.nuisance.variants] for i in insts], dtype="<i4")
    bright = np.array([i.nuisance.brightness for i in insts], dtype="<f4")
    sections = {}
    chunks = []
    offset = 0
    for name, arr in (("labels", labels), ("images", images), ("nuisance", nuis), ("brightness", bright)):
        blob = arr.tobytes()
        sections[name] = {"offset": offset, "nbytes": len(blob), "dtype": arr.dtype.str,
                          "shape": list(arr.shape)}
        chunks.append(blob)
        offset += len(blob)
    blob = b"".join(chunks)
    meta = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "meta": dataset.meta.to_dict(),
        "splits": {"train": len(dataset.train), "test": len(dataset.test)},
        "sections": sections,
        "crc32": zlib.crc32(blob),
    }
    (path / "data.bin").write_bytes(blob)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        blob = (path / "data.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from None
    if doc.get("magic") != MAGIC or doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported dataset format {doc.get('magic')!r} v{doc.get('format_version')!r}")
    sections = doc["sections"]
    need = max(s["offset"] + s["nbytes"] for s in sections.values())
    if len(blob) < need:
        raise TruncatedDataError(f"data.bin holds {len(blob)} bytes, expected {need}")
    if zlib.crc32(blob[:need]) != doc["crc32"]:
        raise ChecksumError("data.bin checksum mismatch")

    def section(name):
        s = sections[name]
        raw = blob[s["offset"]:s["offset"] + s["nbytes"]]
        return np.frombuffer(raw, dtype=np.dtype(s["dtype"])).reshape(s["shape"])

    meta = DatasetMeta.from_dict(doc["meta"])
    labels = section("labels")
    images = section("images").astype(np.float32)
    nuis = section("nuisance")
    bright = section("brightness")
    insts = [
        Instance(images[i].copy(), int(labels[i]),
                 Nuisance(int(nuis[i, 0]), int(nuis[i, 1]), int(nuis[i, 2]),
                          float(bright[i]), int(nuis[i, 3]), int(nuis[i, 4])))
        for i in range(len(labels))
    ]
    n_train = doc["splits"]["train"]
    return Dataset(meta, insts[:n_train], insts[n_train:])
