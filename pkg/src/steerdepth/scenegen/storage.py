"""On-disk sample directories and dataset manifests.

A sample directory holds ``left.pgm``/``right.pgm`` previews, raw
little-endian row-major ``left.f32``, ``right.f32``, ``disp0.f32``,
``disp1.f32`` (NaN where absent), ``alpha.f32``, ``mask.u8`` and
``meta.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .scene import SceneConfig, StereoSample, generate_scene

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_F32_FIELDS = ("left", "right", "disp0", "disp1", "alpha")


class SampleFormatError(ValueError):
    pass


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255, from an image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise SampleFormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise SampleFormatError(f"{path}: unsupported maxval {maxval}")
    pix = parts[4]
    if len(pix) != w * h:
        raise SampleFormatError(f"{path}: expected {w * h} pixels, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)


def write_sample(sample: StereoSample, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _F32_FIELDS:
        np.ascontiguousarray(getattr(sample, name), dtype="<f4").tofile(d / f"{name}.f32")
    np.ascontiguousarray(sample.mask, dtype=np.uint8).tofile(d / "mask.u8")
    write_pgm(d / "left.pgm", sample.left)
    write_pgm(d / "right.pgm", sample.right)
    meta = dict(sample.meta)
    meta["format_version"] = FORMAT_VERSION
    meta["shape"] = list(sample.shape)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def _read_raw(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise SampleFormatError(f"{path}: missing")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise SampleFormatError(
            f"{path}: expected {count * itemsize} bytes, found {len(raw)} (truncated or wrong shape)"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def read_sample(directory: str | Path) -> StereoSample:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise SampleFormatError(f"{d}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise SampleFormatError(f"{d}/meta.json: {exc}") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise SampleFormatError(f"{d}: format version {version}, expected {FORMAT_VERSION}")
    h, w = meta["shape"]
    arrays = {
        name: _read_raw(d / f"{name}.f32", "<f4", h * w).reshape(h, w).astype(np.float32)
        for name in _F32_FIELDS
    }
    mask = _read_raw(d / "mask.u8", "u1", h * w).reshape(h, w).astype(bool)
    meta = {k: v for k, v in meta.items() if k not in ("format_version", "shape")}
    return StereoSample(mask=mask, meta=meta, **arrays)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    seeds: list[int]
    config: dict[str, Any] = field(default_factory=dict)
    mask_pixels: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.seeds)

    def sample_dir(self, i: int) -> Path:
        return self.root / f"{i:05d}"

    def to_json(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "split": self.split,
            "count": self.count,
            "config": self.config,
            "samples": [
                {"dir": self.sample_dir(i).name, "seed": s, "mask_pixels": m}
                for i, (s, m) in enumerate(zip(self.seeds, self.mask_pixels))
            ],
        }

    def save(self) -> None:
        (self.root / MANIFEST_NAME).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise SampleFormatError(f"{root}: no {MANIFEST_NAME}")
        doc = json.loads(path.read_text())
        if doc.get("format_version") != FORMAT_VERSION:
            raise SampleFormatError(f"{path}: unsupported format version {doc.get('format_version')}")
        samples = doc["samples"]
        if len(samples) != doc["count"]:
            raise SampleFormatError(f"{path}: count {doc['count']} != {len(samples)} entries")
        return cls(
            root=root,
            split=doc["split"],
            seeds=[int(s["seed"]) for s in samples],
            config=doc.get("config", {}),
            mask_pixels=[int(s["mask_pixels"]) for s in samples],
        )


def derive_seeds(seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(int(seed))
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < n:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    return seeds


def generate_dataset(config: SceneConfig, root: str | Path, n: int, seed: int, split: str = "train") -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=root, split=split, seeds=derive_seeds(seed, n), config=config.to_dict())
    for i, s in enumerate(manifest.seeds):
        sample = generate_scene(config, s)
        write_sample(sample, manifest.sample_dir(i))
        manifest.mask_pixels.append(int(sample.mask.sum()))
    manifest.save()
    return manifest


def load_dataset(root: str | Path) -> tuple[DatasetManifest, list[StereoSample]]:
    manifest = DatasetManifest.load(root)
    return manifest, [read_sample(manifest.sample_dir(i)) for i in range(manifest.count)]
