"""Scene-detection corpus I/O.

Corpora are laid out one folder per category (``root/<Category Name>/*.ppm``
or ``*.png``). Folder names match the registry case-insensitively with
``&`` and ``and`` treated alike. Images are decoded to float32 pixels in
[0, 255] and resized to the 576x384 landscape resolution on load.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from maiq.errors import CorruptImage, EmptyCorpus, IoFailure, UnknownCategoryFolder, UnsupportedFormat

IMAGE_H = 384
IMAGE_W = 576
IMAGE_EXTENSIONS = (".ppm", ".png")

CATEGORIES = (
    "Portrait", "Group Portrait", "Kids", "Dog", "Cat", "Macro",
    "Gourmet", "Beach", "Mountains", "Waterfall", "Snow", "Landscape",
    "Underwater", "Architecture", "Sunrise & Sunset", "Blue Sky", "Overcast", "Greenery",
    "Autumn Plants", "Flowers", "Night Shot", "Stage", "Fireworks", "Candlelight",
    "Neon Lights", "Indoor", "Backlight", "Document", "QR Code", "Monitor Screen",
)


def normalize_name(name: str) -> str:
    name = name.strip().lower().replace("&", " and ")
    return " ".join(name.split())


class CategoryRegistry:
    def __init__(self, names: Sequence[str] = CATEGORIES):
        names = [n.strip() for n in names]
        keys = [normalize_name(n) for n in names]
        if len(names) != 30 or len(set(keys)) != len(keys):
            raise ValueError(f"registry needs 30 unique category names, got {len(names)}")
        self.names = list(names)
        self._index = {k: i for i, k in enumerate(keys)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, folder_name: str) -> int:
        try:
            return self._index[normalize_name(folder_name)]
        except KeyError:
            raise UnknownCategoryFolder(f"folder {folder_name!r} matches no category") from None

    @classmethod
    def from_file(cls, path) -> "CategoryRegistry":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])


@dataclass(frozen=True)
class LabeledImage:
    pixels: object  # Tensor, REAL32 (1, h, w, 3)
    label: int
    path: Path


@dataclass
class Dataset:
    """Read-only handle over a scanned corpus; images decode lazily."""

    root: Path
    registry: CategoryRegistry
    items: List[tuple]  # (path, label)
    counts: List[int] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __iter__(self) -> Iterator[LabeledImage]:
        for path, label in self.items:
            yield LabeledImage(decode_image(path), label, path)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lbl for _, lbl in self.items], dtype=np.int64)


def scan_corpus(root, registry: Optional[CategoryRegistry] = None) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise EmptyCorpus(f"{root} is not a directory")
    if registry is None:
        override = root / "labels.txt"
        registry = CategoryRegistry.from_file(override) if override.is_file() else CategoryRegistry()
    items = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        label = registry.index(folder.name)
        for f in folder.iterdir():
            if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS:
                items.append((f, label))
    if not items:
        raise EmptyCorpus(f"no images under {root}")
    items.sort(key=lambda it: it[0].relative_to(root).as_posix())
    counts = np.bincount([lbl for _, lbl in items], minlength=len(registry)).tolist()
    return Dataset(root, registry, items, counts)


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_ppm(raw: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(raw)
    if m is None:
        raise CorruptImage("malformed P6 header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit P6 is supported (maxval {maxval})")
    body = raw[m.end():]
    n = w * h * 3
    if len(body) < n or w == 0 or h == 0:
        raise CorruptImage(f"P6 body has {len(body)} bytes, expected {n}")
    return np.frombuffer(body[:n], dtype=np.uint8).reshape(h, w, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels)
    if px.ndim == 4:
        px = px[0]
    px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def _decode_png(raw: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(raw)) as im:
            if im.mode != "RGB":
                raise UnsupportedFormat(f"PNG mode {im.mode}; 8-bit RGB required")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise CorruptImage(str(exc)) from exc


def decode_image(path):
    """Decode a P6 or 8-bit RGB PNG into a (1, 384, 576, 3) real tensor."""
    from maiq.kernels import resize_bilinear
    from maiq.tensor import Tensor

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw.startswith(b"P6"):
        px = decode_ppm(raw)
    elif raw.startswith(b"\x89PNG\r\n\x1a\n"):
        px = _decode_png(raw)
    else:
        raise UnsupportedFormat(f"{path}: not a P6 or PNG file")
    t = Tensor.real(px[None].astype(np.float32))
    if px.shape[:2] != (IMAGE_H, IMAGE_W):
        t = Tensor.real(resize_bilinear(t, IMAGE_H, IMAGE_W).data)
    return t


# ---------------------------------------------------------------------------
# synthetic corpus

_LEVELS = (32, 96, 160, 224)


def default_palette() -> np.ndarray:
    """30 distinct RGB class colors on a 4-level grid (min pairwise distance 64)."""
    return np.array(
        [(_LEVELS[i % 4], _LEVELS[(i // 4) % 4], _LEVELS[(i // 16) % 4]) for i in range(30)],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    per_class: int = 5
    noise: int = 8
    seed: int = 0
    colors: tuple = tuple(map(tuple, default_palette().tolist()))


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def generate_synthetic(spec: SyntheticSpec, root, registry: Optional[CategoryRegistry] = None) -> List[Path]:
    """Write ``per_class`` noisy constant-color 576x384 P6 images per class."""
    registry = registry or CategoryRegistry()
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    written = []
    try:
        for k, name in enumerate(registry):
            folder = root / name
            folder.mkdir(parents=True, exist_ok=True)
            base = np.asarray(spec.colors[k], dtype=np.int64)
            for i in range(spec.per_class):
                img = np.broadcast_to(base, (IMAGE_H, IMAGE_W, 3))
                if spec.noise:
                    img = img + rng.integers(-spec.noise, spec.noise + 1, size=(IMAGE_H, IMAGE_W, 3))
                path = folder / f"{_slug(name)}_{i:04d}.ppm"
                path.write_bytes(encode_ppm(np.clip(img, 0, 255)))
                written.append(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written
