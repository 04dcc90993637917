"""Image/mask loading, label derivation, augmentation, splitting and synthetic data."""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_SUFFIX = "_segmentation"
MASK_THRESHOLD = 128

_CROSS = np.ones((3, 3), dtype=bool)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, h, w) in [0, 1]
    label: np.ndarray  # (classes, h, w) one-hot

    @property
    def lesion(self) -> np.ndarray:
        return self.label[0] < 0.5


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(not 0 < r < 1 for r in self.ratios):
            raise ValueError(f"each split ratio must lie in (0, 1), got {self.ratios}")
        if abs(sum(self.ratios) - 1) > 1e-6:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


@dataclass(frozen=True)
class AugmentSpec:
    flip_h: float = 0.5
    flip_v: float = 0.5
    rotate_deg: float = 20.0
    shear: float = 0.1
    zoom: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not (0 <= self.flip_h <= 1 and 0 <= self.flip_v <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")
        if self.rotate_deg < 0 or self.shear < 0:
            raise ValueError("rotation and shear ranges must be non-negative")
        lo, hi = self.zoom
        if not 0 < lo <= hi:
            raise ValueError(f"invalid zoom range {self.zoom}")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, 0.0, (1.0, 1.0))


# ---------------------------------------------------------------------------
# labels


def one_hot(index_map: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    return (np.arange(classes)[:, None, None] == index_map[None]).astype(dtype)


def derive_boundary(label: np.ndarray) -> np.ndarray:
    """(2, h, w) lesion label -> (3, h, w) with channels (background, interior, boundary).

    The boundary is the lesion minus its 3x3 erosion, so interior and boundary
    together cover exactly the lesion.
    """
    if label.ndim != 3 or label.shape[0] != 2:
        raise ValueError(f"expected a (2, h, w) label, got {label.shape}")
    mask = label[1] > 0.5
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=1)
    index = np.where(mask, np.where(interior, 1, 2), 0)
    return one_hot(index, 3, label.dtype)


def mask_to_label(mask: np.ndarray, classes: int = 2) -> np.ndarray:
    label = one_hot(mask.astype(np.int64), 2)
    return derive_boundary(label) if classes == 3 else label


# ---------------------------------------------------------------------------
# files


def _as_hw(target_size):
    if isinstance(target_size, int):
        return target_size, target_size
    return tuple(target_size)


def load_image(path, target_size) -> np.ndarray:
    h, w = _as_hw(target_size)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (w, h):
                im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / np.float32(255.0)


def load_mask(path, target_size) -> np.ndarray:
    h, w = _as_hw(target_size)
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (w, h):
                im = im.resize((w, h), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return arr >= MASK_THRESHOLD


def load_pair(image_path, mask_path, target_size, classes: int = 2, sample_id=None) -> Sample:
    image = load_image(image_path, target_size)
    mask = load_mask(mask_path, target_size)
    sid = sample_id or Path(image_path).stem
    return Sample(sid, image, mask_to_label(mask, classes))


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def discover_pairs(data, suffix: str = MASK_SUFFIX, require_masks: bool = True):
    """List ``(id, image_path, mask_path)`` from a directory or a manifest file.

    Directories may hold ``images/`` and ``masks/`` subdirectories or keep both
    side by side; a mask is ``<image stem><suffix>.png``. A manifest has one
    ``image_path,mask_path`` pair per line, relative to the manifest.
    """
    data = Path(data)
    if not data.exists():
        raise FileNotFoundError(f"no such dataset: {data}")
    pairs = []
    if data.is_file():
        base = data.parent
        for lineno, line in enumerate(data.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (1, 2) or (require_masks and len(parts) != 2):
                raise ValueError(f"{data}:{lineno}: expected 'image_path,mask_path'")
            img = base / parts[0]
            mask = base / parts[1] if len(parts) == 2 else None
            pairs.append((img.stem, img, mask))
        return pairs

    img_dir = data / "images" if (data / "images").is_dir() else data
    mask_dir = data / "masks" if (data / "masks").is_dir() else img_dir
    for img in sorted(img_dir.iterdir()):
        if img.suffix.lower() not in IMAGE_EXTS or img.stem.endswith(suffix):
            continue
        mask = mask_dir / f"{img.stem}{suffix}.png"
        if not mask.exists():
            if require_masks:
                raise FileNotFoundError(f"missing mask for {img}: expected {mask}")
            mask = None
        pairs.append((img.stem, img, mask))
    return pairs


def load_dataset(data, target_size, classes=2, suffix=MASK_SUFFIX, workers=1) -> List[Sample]:
    pairs = discover_pairs(data, suffix)

    def _load(p):
        sid, img, mask = p
        return load_pair(img, mask, target_size, classes, sample_id=sid)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(_load, pairs))
    return [_load(p) for p in pairs]


def write_dataset(samples: Sequence[Sample], out_dir, suffix: str = MASK_SUFFIX) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(s.image, out / "images" / f"{s.id}.png")
        save_mask(s.lesion, out / "masks" / f"{s.id}{suffix}.png")
    return out


# ---------------------------------------------------------------------------
# splitting


def split_dataset(n: int, spec: SplitSpec = SplitSpec()):
    """Shuffle ``range(n)`` by seed and cut it into (train, val, test) index lists."""
    if n < 3:
        raise ValueError(f"need at least 3 items to split, got {n}")
    r_train, _, r_test = spec.ratios
    n_test = math.floor(n * r_test + 1e-9)
    n_train = math.floor(n * r_train + 1e-9)
    order = np.random.default_rng(spec.seed).permutation(n).tolist()
    train = order[:n_train]
    val = order[n_train : n - n_test]
    test = order[n - n_test :]
    return train, val, test


# ---------------------------------------------------------------------------
# augmentation


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-sample generator, independent of worker count and visiting order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def augment(s: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """Apply one random flip/rotate/shear/zoom to image and label alike."""
    u_h, u_v = rng.random(2)
    angle = math.radians(rng.uniform(-spec.rotate_deg, spec.rotate_deg))
    shear = rng.uniform(-spec.shear, spec.shear)
    zoom = rng.uniform(*spec.zoom)

    image = s.image
    index = s.label.argmax(axis=0)
    if u_h < spec.flip_h:
        image, index = image[:, :, ::-1], index[:, ::-1]
    if u_v < spec.flip_v:
        image, index = image[:, ::-1, :], index[::-1, :]

    if angle != 0 or shear != 0 or zoom != 1:
        cos, sin = math.cos(angle), math.sin(angle)
        rot = np.array([[cos, -sin], [sin, cos]])
        shr = np.array([[1.0, shear], [0.0, 1.0]])
        mat = rot @ shr / zoom
        h, w = index.shape
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = center - mat @ center
        image = np.stack(
            [ndimage.affine_transform(ch, mat, offset, order=1, mode="reflect") for ch in image]
        )
        image = np.clip(image, 0, 1)
        index = ndimage.affine_transform(index, mat, offset, order=0, mode="reflect")

    image = np.ascontiguousarray(image, dtype=s.image.dtype)
    label = one_hot(np.ascontiguousarray(index), s.label.shape[0], s.label.dtype)
    return Sample(s.id, image, label)


# ---------------------------------------------------------------------------
# synthetic lesions


def _ellipse_mask(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    while True:
        frac = rng.uniform(0.04, 0.4)
        aspect = rng.uniform(0.55, 1.0)
        a = math.sqrt(frac * size * size / (math.pi * aspect))
        b = a * aspect
        cy, cx = rng.uniform(0.3, 0.7, size=2) * (size - 1)
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        cover = mask.mean()
        if 0.02 <= cover <= 0.6:
            return mask


def _stroke(image, size, rng):
    p0, p1, p2 = rng.uniform(-0.1, 1.1, size=(3, 2)) * size
    t = np.linspace(0, 1, 4 * size)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    r = np.rint(pts).astype(int)
    keep = (r >= 0).all(axis=1) & (r < size).all(axis=1)
    r = r[keep]
    shade = rng.uniform(0.08, 0.25)
    image[:, r[:, 0], r[:, 1]] = shade


def synth_sample(index: int, size: int, seed: int, classes: int = 2) -> Sample:
    rng = np.random.default_rng([seed, index])
    mask = _ellipse_mask(size, rng)

    skin = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.75), rng.uniform(0.45, 0.65)])
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 16.0)
    texture /= texture.std() + 1e-12
    bg = skin[:, None, None] * (1 + 0.05 * texture[None])

    darkness = rng.uniform(0.35, 0.6)
    lesion_tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
    lesion_tex /= lesion_tex.std() + 1e-12
    lesion = skin[:, None, None] * darkness * (1 + 0.08 * lesion_tex[None])

    alpha = ndimage.gaussian_filter(mask.astype(np.float64), 0.5)
    image = bg * (1 - alpha) + lesion * alpha
    image += rng.normal(0, 0.02, size=image.shape)

    if rng.random() < 0.5:
        for _ in range(rng.integers(1, 4)):
            _stroke(image, size, rng)

    image = np.clip(image, 0, 1).astype(np.float32)
    return Sample(f"synth_{index:05d}", image, mask_to_label(mask, classes))


def synth_generate(count: int, size: int = 64, seed: int = 0, classes: int = 2) -> List[Sample]:
    """Reproducible noisy-ellipse lesions with optional hair-like strokes."""
    return [synth_sample(i, size, seed, classes) for i in range(count)]
