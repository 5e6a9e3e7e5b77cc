"""Synthetic hazy scenes with exact reflectance/shading ground truth.

A scene is composed as ``J = R * S`` (reflectance times gray shading) and
hazed with the scattering model ``I = J t + A (1 - t)``, ``t = exp(-beta d)``.
Everything is a pure function of ``(seed, H, W)``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .ops import bilinear_matrix

MANIFEST_HEADER = "hylog-manifest v1"
MANIFEST_NAME = "manifest.txt"
SYNTH_META_NAME = "synth.json"
DEPTH_MAX = 3.0
BETA_RANGE = (0.4, 2.0)
AIRLIGHT_RANGE = (0.7, 1.0)
FIELDS = ("hazy", "clear", "reflectance", "shading", "depth")


@dataclass
class Sample:
    hazy: np.ndarray
    clear: np.ndarray
    reflectance: np.ndarray
    shading: np.ndarray
    depth: np.ndarray
    airlight: np.ndarray = field(default_factory=lambda: np.ones(3))
    beta: float = 0.0
    seed: Optional[int] = None

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in FIELDS}


def transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-beta * depth)


def apply_haze(clear: np.ndarray, depth: np.ndarray, airlight, beta: float) -> np.ndarray:
    """``I = J t + A (1 - t)`` with ``t = exp(-beta * depth)``, clamped to [0, 1]."""
    if beta < 0:
        raise ValueError(f"scattering coefficient must be >= 0, got {beta}")
    depth = np.asarray(depth, dtype=np.float64)
    if (depth < 0).any():
        raise ValueError("depth must be nonnegative")
    t = transmission(depth, beta)[..., None]
    a = np.asarray(airlight, dtype=np.float64)
    return np.clip(clear * t + a * (1.0 - t), 0.0, 1.0)


def dehaze(hazy: np.ndarray, t: np.ndarray, airlight) -> np.ndarray:
    """Invert the scattering model: ``J = (I - A) / t + A``."""
    a = np.asarray(airlight, dtype=np.float64)
    return (hazy - a) / t[..., None] + a


def _smooth_field(rng: np.random.Generator, h: int, w: int, coarse: int) -> np.ndarray:
    """Low-frequency noise in [0, 1]: a random coarse grid upsampled bilinearly."""
    g = rng.random((coarse, coarse))
    fh = max(1, -(-h // coarse))
    fw = max(1, -(-w // coarse))
    up = bilinear_matrix(coarse, fh) @ g @ bilinear_matrix(coarse, fw).T
    up = up[:h, :w]
    lo, hi = up.min(), up.max()
    return (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)


def _reflectance(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.15, 1.0, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0.05, 1.0, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 10, h / 3), rng.uniform(w / 10, w / 3)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = color
    return img


def synth_scene(seed: int, h: int, w: int, beta: Optional[float] = None) -> Sample:
    """Procedural scene: piecewise-constant colour field, smooth gray shading in
    [0.2, 1], depth ramp plus smooth noise scaled to [0, 3]."""
    rng = np.random.default_rng(seed)
    refl = _reflectance(rng, h, w)
    shade = 0.2 + 0.8 * _smooth_field(rng, h, w, 4)
    shading = np.repeat(shade[..., None], 3, axis=2)

    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = np.cos(angle) * yy / max(h - 1, 1) + np.sin(angle) * xx / max(w - 1, 1)
    depth = ramp + 0.3 * _smooth_field(rng, h, w, 6)
    depth = depth - depth.min()
    peak = depth.max()
    depth = DEPTH_MAX * depth / peak if peak > 0 else depth

    base = rng.uniform(AIRLIGHT_RANGE[0] + 0.025, AIRLIGHT_RANGE[1] - 0.025)
    airlight = base + rng.uniform(-0.025, 0.025, size=3)
    b = rng.uniform(*BETA_RANGE)
    if beta is not None:
        b = beta

    clear = np.clip(refl * shading, 0.0, 1.0)
    hazy = apply_haze(clear, depth, airlight, b)
    return Sample(hazy, clear, refl, shading, depth, airlight, float(b), seed)


# -- augmentation ----------------------------------------------------------------

def _map_sample(s: Sample, fn) -> Sample:
    return replace(s, **{k: np.ascontiguousarray(fn(v)) for k, v in s.arrays().items()})


def flip(s: Sample, axis: int) -> Sample:
    """Mirror every aligned field; ``axis`` 0 flips rows, 1 flips columns."""
    return _map_sample(s, lambda a: np.flip(a, axis=axis))


def rotate90(s: Sample, k: int = 1) -> Sample:
    return _map_sample(s, lambda a: np.rot90(a, k, axes=(0, 1)))


def crop(s: Sample, top: int, left: int, size: Tuple[int, int]) -> Sample:
    ch, cw = size
    h, w = s.depth.shape
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    return _map_sample(s, lambda a: a[top : top + ch, left : left + cw])


def augment(s: Sample, seed: int, crop_size: Optional[Tuple[int, int]] = None) -> Sample:
    """Random crop, flip and quarter-turn rotation, identical for all fields."""
    rng = np.random.default_rng(seed)
    h, w = s.depth.shape
    if crop_size is not None:
        ch, cw = crop_size
        if ch > h or cw > w:
            raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
        s = crop(s, int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), (ch, cw))
    if rng.random() < 0.5:
        s = flip(s, 1)
    if rng.random() < 0.5:
        s = flip(s, 0)
    k = int(rng.integers(0, 4))
    if k % 2 and s.depth.shape[0] != s.depth.shape[1]:
        # quarter turns would change a non-square geometry
        k = (k + 1) % 4
    return rotate90(s, k) if k else s


# -- PPM image files -----------------------------------------------------------

def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM images must be H x W x 3, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("PPM image values must lie in [0, 1]")
    h, w, _ = img.shape
    body = np.round(img * 255.0).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


def save_image(path, image: np.ndarray) -> None:
    _atomic_write(Path(path), encode_ppm(image))


def decode_ppm(raw: bytes) -> np.ndarray:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"unsupported PPM magic {tokens[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed PPM header {tokens!r}") from None
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"invalid PPM size {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- datasets --------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    stems: List[str]
    splits: List[str]
    seed: Optional[int] = None

    def __post_init__(self):
        if len(set(self.stems)) != len(self.stems):
            raise FormatError("duplicate stems in manifest")

    def split(self, name: str) -> List[str]:
        return [s for s, tag in zip(self.stems, self.splits) if tag == name]


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def write_manifest(m: DatasetManifest) -> None:
    lines = [MANIFEST_HEADER] + [f"{s}\t{t}" for s, t in zip(m.stems, m.splits)]
    _atomic_write(Path(m.root) / MANIFEST_NAME, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing '{MANIFEST_HEADER}' header")
    stems, splits = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected '<stem>\\t<split>'")
        stems.append(parts[0])
        splits.append(parts[1])
    seed = None
    meta = root / SYNTH_META_NAME
    if meta.exists():
        seed = json.loads(meta.read_text())["seed"]
    m = DatasetManifest(root, stems, splits, seed)
    for stem in stems:
        for f in FIELDS:
            if not (root / f"{stem}_{f}.ppm").exists():
                raise FileNotFoundError(f"missing {stem}_{f}.ppm in {root}")
    return m


def save_sample(root: Path, stem: str, s: Sample) -> None:
    for f in FIELDS:
        arr = getattr(s, f)
        if f == "depth":
            arr = np.clip(arr / DEPTH_MAX, 0.0, 1.0)
        save_image(Path(root) / f"{stem}_{f}.ppm", arr)


def load_sample(root: Path, stem: str) -> Sample:
    arrs = {f: load_image(Path(root) / f"{stem}_{f}.ppm") for f in FIELDS}
    arrs["depth"] = arrs["depth"][..., 0] * DEPTH_MAX
    return Sample(**arrs)


def generate_dataset(root, count: int, size: Tuple[int, int], seed: int, test_count: Optional[int] = None) -> DatasetManifest:
    """Write ``count`` training and ``test_count`` test scenes plus the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if test_count is None:
        test_count = count // 8
    h, w = size
    stems, splits = [], []
    for i in range(count + test_count):
        stem = f"{i:05d}"
        save_sample(root, stem, synth_scene(sample_seed(seed, i), h, w))
        stems.append(stem)
        splits.append("train" if i < count else "test")
    m = DatasetManifest(root, stems, splits, seed)
    meta = {"seed": seed, "count": count, "test_count": test_count, "height": h, "width": w}
    _atomic_write(root / SYNTH_META_NAME, (json.dumps(meta, sort_keys=True) + "\n").encode())
    write_manifest(m)
    return m


def load_split(m: DatasetManifest, split: str) -> List[Sample]:
    return [load_sample(m.root, s) for s in m.split(split)]


def stack_batch(samples: Sequence[Sample], dtype=np.float32) -> Dict[str, np.ndarray]:
    return {f: np.stack([getattr(s, f) for s in samples]).astype(dtype) for f in ("hazy", "clear", "reflectance", "shading")}
