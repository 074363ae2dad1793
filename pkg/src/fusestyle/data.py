"""Synthetic multi-domain image benchmark.

Every sample is a 3x32x32 byte image whose label is fixed by blob geometry
(class 0: one large blob, class 1: several small blobs). A domain only
changes appearance: a 3x3 colour mix, per-channel brightness offset, additive
noise and a background sinusoid texture. Rendering avoids libm
transcendentals and BLAS reductions so shard bytes do not depend on the
platform.

Directory layout::

    manifest.txt                  canonical JSON, sorted keys
    shard_<domain>_<split>.bin    records: label u8, id length u8, id bytes,
                                  3072 pixel bytes (channel, row, column)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptionError, ValidationError
from .tensor import Tensor

FORMAT_VERSION = 1
IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
TEST_FRACTION = 0.2
SPLITS = ("train", "test")

_BACKGROUND = (0.70, 0.50, 0.62)
_NUCLEUS = (0.30, 0.15, 0.45)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    color_matrix: Tuple[Tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    brightness_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_amplitude: float = 0.0
    texture_frequency: float = 8.0
    texture_amplitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "color_matrix", tuple(tuple(float(v) for v in row) for row in self.color_matrix))
        object.__setattr__(self, "brightness_offset", tuple(float(v) for v in self.brightness_offset))
        if not self.domain_id or len(self.domain_id.encode("utf-8")) > 255:
            raise ValidationError("domain_id must be 1..255 bytes")
        m = np.array(self.color_matrix)
        if m.shape != (3, 3):
            raise ValidationError("color_matrix must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-3:
            raise ValidationError(f"color_matrix of {self.domain_id} is not invertible")
        if len(self.brightness_offset) != 3:
            raise ValidationError("brightness_offset needs one value per channel")
        if self.noise_amplitude < 0 or self.texture_amplitude < 0:
            raise ValidationError("noise and texture amplitudes must be >= 0")
        if not self.texture_frequency > 0:
            raise ValidationError("texture_frequency must be positive")

    @property
    def is_identity(self) -> bool:
        return (
            np.array_equal(np.array(self.color_matrix), np.eye(3))
            and not any(self.brightness_offset)
            and self.noise_amplitude == 0
            and self.texture_amplitude == 0
        )

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "color_matrix": [list(r) for r in self.color_matrix],
            "brightness_offset": list(self.brightness_offset),
            "noise_amplitude": self.noise_amplitude,
            "texture_frequency": self.texture_frequency,
            "texture_amplitude": self.texture_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


_PRESETS = [
    DomainSpec("D0", noise_amplitude=0.02, texture_frequency=8.0, texture_amplitude=0.03),
    DomainSpec(
        "D1",
        color_matrix=((0.55, 0.10, 0.05), (0.05, 0.60, 0.10), (0.10, 0.15, 0.95)),
        brightness_offset=(0.05, 0.10, 0.10),
        noise_amplitude=0.05,
        texture_frequency=5.0,
        texture_amplitude=0.06,
    ),
    DomainSpec(
        "D2",
        color_matrix=((1.25, 0.0, 0.0), (0.10, 1.20, 0.0), (0.0, 0.0, 0.85)),
        brightness_offset=(-0.12, -0.08, 0.05),
        noise_amplitude=0.08,
        texture_frequency=12.0,
        texture_amplitude=0.04,
    ),
]


def default_domains(n: int = 3, seed: int = 0) -> List[DomainSpec]:
    """The three preset domains, followed by seeded random ones if ``n > 3``."""
    if n < 1:
        raise ValidationError("need at least one domain")
    specs = list(_PRESETS[:n])
    rng = np.random.default_rng(seed)
    while len(specs) < n:
        m = np.eye(3) * rng.uniform(0.6, 1.3, size=3) + rng.uniform(-0.1, 0.15, size=(3, 3)) * (1 - np.eye(3))
        specs.append(
            DomainSpec(
                f"D{len(specs)}",
                color_matrix=tuple(tuple(round(float(v), 3) for v in row) for row in m),
                brightness_offset=tuple(round(float(v), 3) for v in rng.uniform(-0.12, 0.12, size=3)),
                noise_amplitude=round(float(rng.uniform(0.0, 0.08)), 3),
                texture_frequency=round(float(rng.uniform(4.0, 14.0)), 2),
                texture_amplitude=round(float(rng.uniform(0.0, 0.06)), 3),
            )
        )
    return specs


# -- rendering --------------------------------------------------------------


def _sin(t: np.ndarray) -> np.ndarray:
    """Sine from +, *, floor only (Taylor series after range reduction)."""
    two_pi = 2.0 * np.pi
    t = t - two_pi * np.floor((t + np.pi) / two_pi)
    half = 0.5 * np.pi
    t = np.where(t > half, np.pi - t, t)
    t = np.where(t < -half, -np.pi - t, t)
    t2 = t * t
    acc = np.ones_like(t)
    # nested Taylor terms through t**13
    for denom in (156.0, 110.0, 72.0, 42.0, 20.0, 6.0):
        acc = 1.0 - t2 / denom * acc
    return t * acc


def sample_seed_for(global_seed: int, domain_index: int, label: int, k: int) -> int:
    return int(np.random.SeedSequence([global_seed, domain_index, label, k]).generate_state(1)[0])


_YY, _XX = np.mgrid[0:32, 0:32].astype(np.float64) + 0.5


def _render(rng: np.random.Generator, label: int) -> Tuple[np.ndarray, np.ndarray]:
    """Un-styled float image in [0, 1] and its nucleus mask."""
    if label == 0:
        blobs = [(rng.uniform(11.0, 21.0), rng.uniform(11.0, 21.0), rng.uniform(6.0, 8.5))]
    else:
        count = int(rng.integers(3, 7))
        blobs = [(rng.uniform(5.0, 27.0), rng.uniform(5.0, 27.0), rng.uniform(2.0, 3.2)) for _ in range(count)]
    mask = np.zeros((32, 32))
    for cy, cx, r in blobs:
        q = ((_YY - cy) * (_YY - cy) + (_XX - cx) * (_XX - cx)) / (r * r)
        q3 = q * q * q
        mask = np.maximum(mask, 1.0 / (1.0 + q3))
    jitter = rng.uniform(-0.05, 0.05, size=3)
    image = np.empty(IMAGE_SHAPE)
    for c in range(3):
        image[c] = (_BACKGROUND[c] + jitter[c]) * (1.0 - mask) + _NUCLEUS[c] * mask
    return image, mask


def _stylize(image: np.ndarray, mask: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    m = spec.color_matrix
    out = np.empty_like(image)
    for c in range(3):
        out[c] = m[c][0] * image[0] + m[c][1] * image[1] + m[c][2] * image[2] + spec.brightness_offset[c]
    angle_cos = rng.uniform(-1.0, 1.0)
    angle_sin = math.sqrt(1.0 - angle_cos * angle_cos)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = _sin((_XX * angle_cos + _YY * angle_sin) * (2.0 * np.pi / spec.texture_frequency) + phase)
    texture = spec.texture_amplitude * wave * (1.0 - mask)
    u = rng.random((3, 3, 32, 32))
    # Irwin-Hall(3), centred: unit-ish noise from raw uniforms only
    noise = (u[0] + u[1] + u[2] - 1.5) * 2.0
    return out + texture + spec.noise_amplitude * noise


def quantize(image: np.ndarray) -> np.ndarray:
    clipped = np.minimum(np.maximum(image, 0.0), 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def render_sample(spec: DomainSpec, label: int, sample_seed: int, styled: bool = True) -> np.ndarray:
    """Regenerate one sample's bytes from its seed."""
    rng = np.random.default_rng(sample_seed)
    image, mask = _render(rng, label)
    if styled:
        image = _stylize(image, mask, spec, rng)
    return quantize(image)


# -- manifest and shards ------------------------------------------------------


def split_counts(n_per_class: int) -> Dict[str, int]:
    """Per-class records in each split: test gets floor(0.2 n), train the rest."""
    n_test = int(n_per_class * TEST_FRACTION)
    return {"train": n_per_class - n_test, "test": n_test}


def shard_name(domain_id: str, split: str) -> str:
    return f"shard_{domain_id}_{split}.bin"


@dataclass
class DatasetManifest:
    domains: List[DomainSpec]
    n_per_class: int
    seed: int
    counts: Dict[str, Dict[str, Dict[str, int]]]
    checksums: Dict[str, str]
    format_version: int = FORMAT_VERSION

    @property
    def domain_ids(self) -> List[str]:
        return [d.domain_id for d in self.domains]

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "domains": [d.to_dict() for d in self.domains],
            "n_per_class": self.n_per_class,
            "seed": self.seed,
            "counts": self.counts,
            "checksums": self.checksums,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise CorruptionError(f"unsupported dataset format {d.get('format_version')!r}")
        return cls(
            domains=[DomainSpec.from_dict(s) for s in d["domains"]],
            n_per_class=d["n_per_class"],
            seed=d["seed"],
            counts=d["counts"],
            checksums=d["checksums"],
        )

    def combined_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.checksums):
            h.update(f"{name}:{self.checksums[name]}\n".encode())
        return h.hexdigest()


def _encode_record(label: int, domain_id: str, pixels: np.ndarray) -> bytes:
    did = domain_id.encode("utf-8")
    return bytes([label, len(did)]) + did + pixels.tobytes()


def record_size(domain_id: str) -> int:
    return 2 + len(domain_id.encode("utf-8")) + PIXELS


def generate_dataset(specs: Sequence[DomainSpec], n_per_class_per_domain: int, seed: int, out_path) -> DatasetManifest:
    if n_per_class_per_domain < 1:
        raise ValidationError("need at least one sample per class per domain")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate domain ids in {ids}")
    if not specs:
        raise ValidationError("need at least one domain")
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    per_split = split_counts(n_per_class_per_domain)
    counts: Dict[str, Dict[str, Dict[str, int]]] = {}
    checksums: Dict[str, str] = {}
    for d_index, spec in enumerate(specs):
        chunks = {split: bytearray() for split in SPLITS}
        for k in range(n_per_class_per_domain):
            split = "train" if k < per_split["train"] else "test"
            for label in (0, 1):
                pixels = render_sample(spec, label, sample_seed_for(seed, d_index, label, k))
                chunks[split] += _encode_record(label, spec.domain_id, pixels)
        counts[spec.domain_id] = {s: {"0": per_split[s], "1": per_split[s]} for s in SPLITS}
        for split, blob in chunks.items():
            name = shard_name(spec.domain_id, split)
            _atomic_write(out / name, bytes(blob))
            checksums[name] = hashlib.sha256(blob).hexdigest()
    manifest = DatasetManifest(list(specs), n_per_class_per_domain, seed, counts, checksums)
    _atomic_write(out / "manifest.txt", manifest.to_text().encode("utf-8"))
    return manifest


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    manifest_path = Path(path) / "manifest.txt"
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {manifest_path}: {exc}") from exc
    try:
        return DatasetManifest.from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"malformed manifest {manifest_path}: {exc}") from exc


# -- loading ------------------------------------------------------------------


class Batch(NamedTuple):
    images: Tensor
    labels: np.ndarray
    domains: np.ndarray
    sample_ids: List[str]


@dataclass
class RecordSet:
    images: np.ndarray  # uint8 [N, 3, 32, 32]
    labels: np.ndarray
    domains: np.ndarray
    sample_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def concat(cls, parts: Sequence["RecordSet"]) -> "RecordSet":
        if not parts:
            return cls(np.zeros((0,) + IMAGE_SHAPE, np.uint8), np.zeros(0, np.int64), np.zeros(0, dtype=object), [])
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
            [i for p in parts for i in p.sample_ids],
        )

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
        """Batches in file order, or a permutation drawn from ``shuffle_seed``."""
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield Batch(
                Tensor(self.images[idx].astype(np.float64) / 255.0),
                self.labels[idx].copy(),
                self.domains[idx].copy(),
                [self.sample_ids[i] for i in idx],
            )


def read_shard(path, name: str, expected_sha: Optional[str] = None) -> RecordSet:
    raw = (Path(path) / name).read_bytes()
    if expected_sha is not None and hashlib.sha256(raw).hexdigest() != expected_sha:
        raise CorruptionError(f"checksum mismatch for {name}")
    split = name[:-4].rsplit("_", 1)[1]
    images, labels, domains, ids = [], [], [], []
    pos = 0
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise CorruptionError(f"truncated record header in {name}")
        label, n = raw[pos], raw[pos + 1]
        did = raw[pos + 2:pos + 2 + n].decode("utf-8")
        start = pos + 2 + n
        block = raw[start:start + PIXELS]
        if len(block) != PIXELS or label not in (0, 1):
            raise CorruptionError(f"malformed record {len(labels)} in {name}")
        images.append(np.frombuffer(block, dtype=np.uint8).reshape(IMAGE_SHAPE))
        labels.append(label)
        domains.append(did)
        ids.append(f"{did}:{split}:{len(ids)}")
        pos = start + PIXELS
    if not images:
        return RecordSet.concat([])
    return RecordSet(np.stack(images), np.array(labels, dtype=np.int64), np.array(domains, dtype=object), ids)


class Corpus:
    """A verified, fully loaded dataset directory."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = read_manifest(self.path)
        self._shards: Dict[str, RecordSet] = {}

    def shard(self, domain_id: str, split: str) -> RecordSet:
        name = shard_name(domain_id, split)
        if name not in self._shards:
            if name not in self.manifest.checksums:
                raise ValidationError(f"no shard {name} in manifest")
            records = read_shard(self.path, name, self.manifest.checksums[name])
            expected = sum(self.manifest.counts[domain_id][split].values())
            if len(records) != expected:
                raise CorruptionError(f"{name} holds {len(records)} records, manifest says {expected}")
            self._shards[name] = records
        return self._shards[name]

    def select(self, domains: Optional[Sequence[str]] = None, split: str = "train") -> RecordSet:
        domains = self.manifest.domain_ids if domains is None else list(domains)
        unknown = set(domains) - set(self.manifest.domain_ids)
        if unknown:
            raise ValidationError(f"unknown domains {sorted(unknown)}")
        return RecordSet.concat([self.shard(d, split) for d in domains])


def load_batches(path, domain_filter=None, batch_size: int = 32, shuffle_seed: Optional[int] = None, split: str = "train"):
    """Stream batches of [0, 1] float images from a dataset directory."""
    corpus = Corpus(path)
    return corpus.select(domain_filter, split).batches(batch_size, shuffle_seed)


@dataclass(frozen=True)
class LeaveOneOut:
    held_out: str
    train_domains: Tuple[str, ...]
    train_shards: Tuple[str, ...]
    test_shards: Dict[str, str]

    def train_records(self, corpus: Corpus) -> RecordSet:
        return corpus.select(self.train_domains, "train")

    def test_records(self, corpus: Corpus) -> Dict[str, RecordSet]:
        return {d: corpus.shard(d, "test") for d in self.test_shards}


def leave_one_out_splits(manifest: DatasetManifest, held_out_domain: str, min_train_domains: int = 2) -> LeaveOneOut:
    ids = manifest.domain_ids
    if held_out_domain not in ids:
        raise ValidationError(f"unknown held-out domain {held_out_domain!r}; have {ids}")
    train = tuple(d for d in ids if d != held_out_domain)
    if len(train) < min_train_domains:
        raise ValidationError(
            f"leave-one-domain-out needs >= {min_train_domains} training domains, got {len(train)}"
        )
    return LeaveOneOut(
        held_out_domain,
        train,
        tuple(shard_name(d, "train") for d in train),
        {d: shard_name(d, "test") for d in ids},
    )
