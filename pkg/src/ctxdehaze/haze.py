"""Synthetic haze via the atmospheric scattering model, plus dataset manifests."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import InvalidInput, check_image, load_image, save_image
from .rng import derive_seed

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
RAW_DEPTH_SUFFIX = ".depth"


class ConfigError(ValueError):
    pass


@dataclass
class HazeRecipe:
    atmospheric_light: float
    beta: float
    depth: np.ndarray | None = None
    transmission: np.ndarray | None = None

    def __post_init__(self):
        if (self.depth is None) == (self.transmission is None):
            raise InvalidInput("exactly one of depth or transmission must be given")
        if self.transmission is not None:
            t = np.asarray(self.transmission)
            if np.any(t <= 0) or np.any(t > 1):
                raise InvalidInput("transmission values must lie in (0, 1]")
        if not 0.0 <= self.atmospheric_light <= 1.0:
            raise InvalidInput(f"A={self.atmospheric_light} outside [0, 1]")

    def transmission_map(self):
        if self.transmission is not None:
            return np.asarray(self.transmission, dtype=np.float64)
        return transmission_from_depth(self.depth, self.beta)


def transmission_from_depth(depth, beta):
    d = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise InvalidInput(f"scattering coefficient must be >= 0, got {beta}")
    if np.any(d < 0):
        raise InvalidInput("depth must be non-negative")
    return np.exp(-beta * d)


def apply_haze(clear, transmission, atmospheric_light):
    """I = J*t + A*(1-t), broadcast over channels.

    ``atmospheric_light`` may be a scalar or a per-channel sequence.
    """
    J = check_image(clear, "clear")
    t = np.asarray(transmission, dtype=np.float64)
    if t.ndim == 3 and t.shape[2] == 1:
        t = t[:, :, 0]
    if t.shape != J.shape[:2]:
        raise InvalidInput(f"transmission {t.shape} does not match image {J.shape[:2]}")
    A = np.asarray(atmospheric_light, dtype=np.float64)
    if np.any(A < 0) or np.any(A > 1):
        raise InvalidInput(f"atmospheric light {atmospheric_light} outside [0, 1]")
    t = t[:, :, None]
    return np.clip(J * t + A * (1.0 - t), 0.0, 1.0)


def remove_haze(hazy, transmission, atmospheric_light):
    """Exact inversion of ``apply_haze`` given the true t and A."""
    t = np.asarray(transmission, dtype=np.float64)[:, :, None]
    A = np.asarray(atmospheric_light, dtype=np.float64)
    return (np.asarray(hazy) - A * (1.0 - t)) / t


def normalize_depth(depth):
    d = np.asarray(depth, dtype=np.float64)
    m = float(d.max())
    return d / m if m > 0 else d


# -- procedural scenes --------------------------------------------------------

SCENE_KINDS = ("ramp", "steps", "radial")


def make_procedural_scene(kind, size, variant=0, d_max=1.0):
    """Deterministic clear image and smooth depth field for offline tests.

    ``variant`` shifts palette and pattern phase so several distinct scenes of
    one kind can be produced.
    """
    if kind not in SCENE_KINDS:
        raise InvalidInput(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if size < 32:
        raise InvalidInput(f"scene size must be >= 32, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    phase = 0.37 * variant

    if kind == "ramp":
        depth = xx.copy()
    elif kind == "steps":
        n = 4
        # smoothstep between bands keeps the field continuous
        u = yy * n
        k = np.floor(np.minimum(u, n - 1e-9))
        f = u - k
        depth = (k + f * f * (3 - 2 * f)) / n
    else:
        r = np.hypot(xx - 0.5, yy - 0.5)
        depth = r / r.max()

    checker = ((np.floor(xx * (6 + variant % 3)) + np.floor(yy * (5 + variant % 4))) % 2) * 0.25
    base = np.stack(
        [
            0.5 + 0.35 * np.sin(2 * math.pi * (xx + phase)),
            0.5 + 0.35 * np.sin(2 * math.pi * (yy * 1.3 + 2 * phase) + 1.0),
            0.5 + 0.35 * np.cos(2 * math.pi * (xx + yy + 3 * phase)),
        ],
        axis=-1,
    )
    img = np.clip(0.15 + 0.6 * base + checker[:, :, None] - 0.125, 0.0, 1.0)
    return img, depth * d_max


def write_procedural_sources(directory, count, size=96):
    """Write ``count`` procedural (clear, depth) source pairs; returns their ids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        kind = SCENE_KINDS[i % len(SCENE_KINDS)]
        img, depth = make_procedural_scene(kind, size, variant=i)
        sid = f"scene{i:03d}_{kind}"
        save_image(directory / f"{sid}.png", img)
        save_depth_png(directory / f"{sid}_depth.png", depth)
        ids.append(sid)
    return ids


# -- depth files --------------------------------------------------------------

def save_depth_png(path, depth):
    """16-bit PNG holding depth normalized to [0, 1]."""
    d = normalize_depth(depth)
    q = np.round(d * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_depth(path):
    path = Path(path)
    if path.suffix == RAW_DEPTH_SUFFIX:
        return load_raw_array(path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    scale = 65535.0 if arr.dtype != np.uint8 else 255.0
    return arr.astype(np.float64) / scale


def save_raw_array(path, arr):
    """Raw real array: three little-endian uint32 (H, W, element size) then data."""
    arr = np.asarray(arr, dtype="<f8")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, 8))
        fh.write(arr.tobytes())


def load_raw_array(path):
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise InvalidInput(f"{path}: truncated raw array header")
    h, w, es = struct.unpack("<III", data[:12])
    dtypes = {4: "<f4", 8: "<f8"}
    if es not in dtypes or len(data) != 12 + h * w * es:
        raise InvalidInput(f"{path}: bad raw array header or length")
    return np.frombuffer(data[12:], dtype=dtypes[es]).reshape(h, w).astype(np.float64)


# -- dataset building ---------------------------------------------------------

@dataclass
class SynthesisConfig:
    source_dir: str
    out_dir: str
    train_count: int = 10000
    test_count: int = 200
    crop_size: int = 256
    a_range: tuple = (0.6, 1.0)
    beta_train: tuple = (0.8, 1.6)
    beta_test: tuple = (1.0, 1.6)
    test_fraction: float = 0.1
    channelwise_a: bool = False
    seed: int = 0

    def validate(self):
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train and test counts must be >= 1")
        lo, hi = self.a_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"A range {self.a_range} must satisfy 0 <= min <= max <= 1")
        for name in ("beta_train", "beta_test"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi):
                raise ConfigError(f"{name} {getattr(self, name)} must satisfy 0 <= min <= max")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.crop_size < 8:
            raise ConfigError("crop_size must be >= 8")


# Full-scale protocol: NYU2-derived indoor and OTS-derived outdoor sets.
FULL_SCALE_COUNTS = {"indoor": (10000, 200), "outdoor": (5000, 200)}


def full_scale_config(subset, source_dir, out_dir, seed=0):
    train, test = FULL_SCALE_COUNTS[subset]
    return SynthesisConfig(source_dir, out_dir, train_count=train, test_count=test, seed=seed)


@dataclass
class ManifestRecord:
    split: str
    clear_path: str
    hazy_path: str
    a: float
    beta: float
    seed: int
    source_id: str = ""


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (source_id, message)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def source_ids(self, name):
        return {r.source_id for r in self.records if r.split == name}

    def check(self, root=".", size=None):
        """Raise if the split-disjointness or file invariants are violated."""
        overlap = self.source_ids("train") & self.source_ids("test")
        if overlap:
            raise InvalidInput(f"train/test share sources: {sorted(overlap)}")
        root = Path(root)
        for r in self.records:
            for p in (r.clear_path, r.hazy_path):
                full = root / p
                if not full.exists():
                    raise InvalidInput(f"missing manifest file {full}")
                if size is not None:
                    with Image.open(full) as im:
                        if im.size != (size, size):
                            raise InvalidInput(f"{full} is {im.size}, expected {size}x{size}")


MANIFEST_HEADER = "# split\tclear\thazy\tA\tbeta\tseed\tsource"


def write_manifest(manifest, path):
    lines = [MANIFEST_HEADER]
    for r in manifest.records:
        lines.append(
            f"{r.split}\t{r.clear_path}\t{r.hazy_path}\t{r.a!r}\t{r.beta!r}\t{r.seed}\t{r.source_id}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    man = DatasetManifest()
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 6:
            raise InvalidInput(f"{path}: malformed manifest line {line!r}")
        split, clear, hazy, a, beta, seed = parts[:6]
        source = parts[6] if len(parts) > 6 else ""
        man.records.append(ManifestRecord(split, clear, hazy, float(a), float(beta), int(seed), source))
    return man


def discover_sources(source_dir):
    """Map source id -> (image path, depth-or-transmission path, kind)."""
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise ConfigError(f"source directory {source_dir} does not exist")
    found = {}
    for p in sorted(source_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        stem = p.stem
        if stem.endswith("_depth") or stem.endswith("_trans"):
            continue
        aux = None
        for suffix, kind in (("_depth", "depth"), ("_trans", "transmission")):
            for ext in (".png", RAW_DEPTH_SUFFIX):
                cand = source_dir / f"{stem}{suffix}{ext}"
                if cand.exists():
                    aux = (cand, kind)
                    break
            if aux:
                break
        found[stem] = (p, aux[0] if aux else None, aux[1] if aux else None)
    return found


def partition_sources(ids, test_fraction):
    ids = sorted(ids)
    n_test = max(1, int(math.ceil(len(ids) * test_fraction)))
    if len(ids) - n_test < 1:
        raise ConfigError(f"need at least 2 sources to form disjoint splits, got {len(ids)}")
    return ids[:-n_test], ids[-n_test:]


def _load_source(entry, crop):
    img_path, aux_path, kind = entry
    clear = load_image(img_path)
    if aux_path is None:
        raise InvalidInput("no depth or transmission map")
    aux = load_depth(aux_path)
    if aux.shape != clear.shape[:2]:
        raise InvalidInput(f"map {aux.shape} does not match image {clear.shape[:2]}")
    if clear.shape[0] < crop or clear.shape[1] < crop:
        raise InvalidInput(f"image {clear.shape[:2]} smaller than crop {crop}")
    if kind == "depth":
        aux = normalize_depth(aux)
    else:
        aux = np.clip(aux, 1.0 / 65535.0, 1.0)
    return clear, aux, kind


def synthesize_record(entry, split, beta_range, cfg, rec_seed):
    """Build one (clear, hazy, A, beta) sample; pure given its inputs."""
    clear, aux, kind = _load_source(entry, cfg.crop_size)
    rng = np.random.default_rng(rec_seed)
    h, w = clear.shape[:2]
    top = int(rng.integers(0, h - cfg.crop_size + 1))
    left = int(rng.integers(0, w - cfg.crop_size + 1))
    if cfg.channelwise_a:
        a = rng.uniform(*cfg.a_range, size=3)
    else:
        a = float(rng.uniform(*cfg.a_range))
    beta = float(rng.uniform(*beta_range))
    sl = (slice(top, top + cfg.crop_size), slice(left, left + cfg.crop_size))
    J = clear[sl]
    if kind == "depth":
        recipe = HazeRecipe(float(np.mean(a)), beta, depth=aux[sl])
    else:
        recipe = HazeRecipe(float(np.mean(a)), beta, transmission=aux[sl])
    I = apply_haze(J, recipe.transmission_map(), a)
    return J, I, float(np.mean(a)), beta


def build_dataset(cfg, write=True):
    """Synthesize the train/test pairs and write them with a manifest.

    Sources are partitioned by sorted id so the two splits never share an
    origin image.  Returns the manifest; paths in it are relative to
    ``cfg.out_dir``.
    """
    cfg.validate()
    sources = discover_sources(cfg.source_dir)
    if not sources:
        raise ConfigError(f"no source images in {cfg.source_dir}")
    train_ids, test_ids = partition_sources(sources, cfg.test_fraction)
    out = Path(cfg.out_dir)
    manifest = DatasetManifest()

    plan = []
    for split, ids, count, beta_range in (
        ("train", train_ids, cfg.train_count, cfg.beta_train),
        ("test", test_ids, cfg.test_count, cfg.beta_test),
    ):
        order_rng = np.random.default_rng(derive_seed(cfg.seed, "synthesis", split, "order"))
        pool = []
        while len(pool) < count:
            pool.extend(order_rng.permutation(len(ids)).tolist())
        for k in range(count):
            sid = ids[pool[k]]
            plan.append((split, k, sid, beta_range, derive_seed(cfg.seed, "synthesis", split, k)))

    bad = set()
    for split, k, sid, beta_range, rec_seed in plan:
        if sid in bad:
            continue
        try:
            J, I, a, beta = synthesize_record(sources[sid], split, beta_range, cfg, rec_seed)
        except InvalidInput as exc:
            bad.add(sid)
            manifest.failures.append((sid, str(exc)))
            log.warning("skipping source %s: %s", sid, exc)
            continue
        clear_rel = f"{split}/{k:05d}_clear.png"
        hazy_rel = f"{split}/{k:05d}_hazy.png"
        if write:
            save_image(out / clear_rel, J)
            save_image(out / hazy_rel, I)
        manifest.records.append(ManifestRecord(split, clear_rel, hazy_rel, a, beta, rec_seed, sid))

    if not manifest.split("train") or not manifest.split("test"):
        raise ConfigError(
            f"insufficient usable sources: {len(manifest.failures)} failed ({manifest.failures[:3]})"
        )
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(manifest, out / "manifest.tsv")
        if manifest.failures:
            (out / "failures.txt").write_text(
                "".join(f"{sid}\t{msg}\n" for sid, msg in manifest.failures)
            )
    return manifest
