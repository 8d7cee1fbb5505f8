"""Synthetic segmentation data, patch masks and PPM/PGM file I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngState

LOCATIONS = ("lower_right", "lower_left", "top_left", "top_right", "center", "random")
SHAPE_KINDS = ("rect", "disc", "stripe")


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    img_h: int = 32
    img_w: int = 32
    classes: int = 8
    min_shapes: int = 2
    max_shapes: int = 5
    noise: float = 0.02
    grid: int = 4    # shape geometry snapped to this many pixels
    tint: float = 0.4  # per-image, per-channel colour offset range (+-)


def palette(classes: int) -> np.ndarray:
    """Fixed class colours: corners of a centred RGB cube first, then a finer lattice."""
    levels = [0.3, 0.7]
    cols: list[tuple] = []
    while len(cols) < classes:
        for r in levels:
            for g in levels:
                for b in levels:
                    if (r, g, b) not in cols:
                        cols.append((r, g, b))
        levels = sorted(set(levels) | {(a + b) / 2 for a, b in zip(levels, levels[1:])})
    return np.array(cols[:classes])  # class 0 (background) is the darkest


def _draw_shape(label: np.ndarray, cls: int, kind: str, gen: np.random.Generator, grid: int):
    gh, gw = label.shape[0] // grid, label.shape[1] // grid
    cells = np.zeros((gh, gw), dtype=bool)
    if kind == "rect":
        h = gen.integers(2, max(3, gh // 2 + 1))
        w = gen.integers(2, max(3, gw // 2 + 1))
        top = gen.integers(0, gh - h + 1)
        left = gen.integers(0, gw - w + 1)
        cells[top:top + h, left:left + w] = True
    elif kind == "disc":
        r = gen.uniform(1.2, max(1.3, min(gh, gw) / 3))
        cy = gen.uniform(r - 0.5, gh - r + 0.5)
        cx = gen.uniform(r - 0.5, gw - r + 0.5)
        yy, xx = np.mgrid[0:gh, 0:gw]
        cells = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    else:  # stripe: full-span band
        thick = gen.integers(1, max(2, min(gh, gw) // 4 + 1))
        if gen.random() < 0.5:
            start = gen.integers(0, gh - thick + 1)
            cells[start:start + thick, :] = True
        else:
            start = gen.integers(0, gw - thick + 1)
            cells[:, start:start + thick] = True
    label[np.kron(cells, np.ones((grid, grid), dtype=bool))] = cls


def generate_sample(spec: DatasetSpec, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    gen = rng.generator()
    pal = palette(spec.classes)
    n_max = min(spec.max_shapes, spec.classes - 1)
    n_min = min(spec.min_shapes, n_max)
    for _ in range(100):
        label = np.zeros((spec.img_h, spec.img_w), dtype=np.int64)
        n = int(gen.integers(n_min, n_max + 1))
        classes = gen.choice(np.arange(1, spec.classes), size=n, replace=False)
        for cls in classes:
            _draw_shape(label, int(cls), SHAPE_KINDS[gen.integers(len(SHAPE_KINDS))], gen, spec.grid)
        if len(np.unique(label)) >= 2:
            break
    else:  # pragma: no cover - needs pathological geometry
        raise RuntimeError("could not draw an image with two classes")
    # a global colour offset makes a token's class ambiguous on its own; it has
    # to be read relative to the rest of the image (mostly the background)
    offset = gen.uniform(-spec.tint, spec.tint, 3) if spec.tint > 0 else np.zeros(3)
    img = pal[label] + offset + gen.normal(0.0, spec.noise, label.shape + (3,))
    return np.clip(img, 0.0, 1.0), label


def generate_dataset(spec: DatasetSpec, seed: int | RngState) -> list[tuple[np.ndarray, np.ndarray]]:
    if spec.classes < 3:
        raise ValueError("need at least 3 classes")
    if spec.img_h % spec.grid or spec.img_w % spec.grid:
        raise ValueError("image size must be a multiple of the shape grid")
    if spec.img_h // spec.grid < 4 or spec.img_w // spec.grid < 4:
        raise ValueError("geometry too small for the requested shapes")
    if spec.count < 0:
        raise ValueError("count must be non-negative")
    rng = seed if isinstance(seed, RngState) else RngState(int(seed))
    return [generate_sample(spec, rng.child("image", i)) for i in range(spec.count)]


# ---------------------------------------------------------------- patch masks

@dataclass(frozen=True)
class PatchMask:
    mask: np.ndarray  # (H, W) bool
    location: str
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def make_patch_mask(h: int, w: int, size, location: str = "lower_right",
                    rng: RngState | None = None) -> PatchMask:
    mh, mw = (size, size) if np.isscalar(size) else tuple(size)
    mh, mw = int(mh), int(mw)
    if location not in LOCATIONS:
        raise ValueError(f"unknown patch location {location!r}")
    if mh < 1 or mw < 1:
        raise ValueError("patch must be non-empty")
    if mh > h or mw > w:
        raise ValueError(f"patch {mh}x{mw} does not fit a {h}x{w} image")
    if location == "lower_right":
        top, left = h - mh, w - mw
    elif location == "lower_left":
        top, left = h - mh, 0
    elif location == "top_left":
        top, left = 0, 0
    elif location == "top_right":
        top, left = 0, w - mw
    elif location == "center":
        top, left = (h - mh) // 2, (w - mw) // 2
    else:
        if rng is None:
            raise ValueError("random patch location needs an RngState")
        gen = rng.generator()
        top = int(gen.integers(0, h - mh + 1))
        left = int(gen.integers(0, w - mw + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + mh, left:left + mw] = True
    return PatchMask(mask, location, top, left, mh, mw)


# ---------------------------------------------------------------- PPM / PGM

class ImageFormatError(ValueError):
    pass


def _write_pnm(path, magic: bytes, payload: np.ndarray, width: int, height: int):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (width, height))
        fh.write(payload.astype(np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} header")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed header")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit maxval 255 is supported")
    n = width * height * channels
    body = raw[pos:pos + n]
    if len(body) < n:
        raise ImageFormatError(f"{path}: truncated payload ({len(body)} of {n} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6; values in [0, 1] stored as round(255 v)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0)
    _write_pnm(path, b"P6", q, image.shape[1], image.shape[0])


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).astype(np.float64) / 255.0


def write_pgm(path, values: np.ndarray) -> None:
    """Binary P5 with integer values stored verbatim (0..255)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise ValueError("PGM values must lie in 0..255")
    _write_pnm(path, b"P5", values, values.shape[1], values.shape[0])


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1).astype(np.int64)


# ---------------------------------------------------------------- on-disk datasets

MANIFEST = "manifest.tsv"


def write_dataset(out_dir, samples) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(samples):
        ip = Path("images") / f"{i:05d}.ppm"
        lp = Path("labels") / f"{i:05d}.pgm"
        write_ppm(out / ip, img)
        write_pgm(out / lp, lab)
        lines.append(f"{i}\t{ip.as_posix()}\t{lp.as_posix()}\n")
    manifest = out / MANIFEST
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def read_dataset(manifest) -> list[tuple[np.ndarray, np.ndarray]]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST
    root = manifest.parent
    samples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        _, ip, lp = line.split("\t")
        samples.append((read_ppm(root / ip), read_pgm(root / lp)))
    return samples


def dataset_exists(path) -> bool:
    p = Path(path)
    return (p / MANIFEST).is_file() if p.is_dir() else p.is_file() and os.path.basename(p) == MANIFEST
