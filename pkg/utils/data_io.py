"""Dataset plumbing: tensor files, checkpoint containers, PPM images, manifests,
synthetic identity data and the training-time augmentation pipeline."""
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import derive_seed
from .error_handler import ConfigurationError, FormatError
from .tensor_core import Tensor, bilinear_resize, from_numpy, inference_mode

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b'CCAT'
CHECKPOINT_MAGIC = b'CCAC'
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
CODE_FOR_DTYPE = {np.dtype('float32'): 0, np.dtype('float64'): 1}
SPLITS = ('train', 'query', 'gallery')
MANIFEST_NAME = 'manifest.tsv'

ArrayLike = Union[Tensor, np.ndarray]


def _as_array(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------

def encode_tensor(value: ArrayLike, dtype: Optional[str] = None, narrow: bool = False) -> bytes:
    """Serialize one tensor record.

    Args:
        value: tensor or array to write
        dtype: 'float32' or 'float64'; defaults to the array's own dtype
        narrow: must be True to write a 64-bit array as 32-bit

    Returns:
        bytes: header followed by the little-endian row-major payload
    """
    array = _as_array(value)
    source = np.dtype(array.dtype)
    target = np.dtype(dtype) if dtype else source
    if target not in CODE_FOR_DTYPE:
        raise ConfigurationError(f"Tensor files hold float32 or float64 data, got {target}")
    if source == np.float64 and target == np.float32:
        if not narrow:
            raise ConfigurationError("Writing a 64-bit tensor as 32-bit needs an explicit narrowing flag")
        logger.warning(f"Narrowing a {array.shape} tensor from 64 to 32 bits on write")
    code = CODE_FOR_DTYPE[target]
    header = TENSOR_MAGIC + struct.pack('<HBB', FORMAT_VERSION, code, array.ndim)
    header += struct.pack(f'<{array.ndim}I', *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode the record starting at `offset`; returns the array and the offset after it"""
    view = memoryview(buffer)
    if len(view) - offset < 8:
        raise FormatError(f"Truncated tensor header: need 8 bytes, have {len(view) - offset}", offset)
    if bytes(view[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"Bad tensor magic {bytes(view[offset:offset + 4])!r}, expected {TENSOR_MAGIC!r}", offset)
    version, code, rank = struct.unpack_from('<HBB', view, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported tensor file version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"Unknown dtype code {code}", offset + 6)
    pos = offset + 8
    if len(view) - pos < 4 * rank:
        raise FormatError(f"Truncated extents: rank {rank} needs {4 * rank} bytes, have {len(view) - pos}", pos)
    shape = struct.unpack_from(f'<{rank}I', view, pos)
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    available = len(view) - pos
    if available < expected:
        raise FormatError(f"Truncated payload: expected {expected} bytes, got {available}", pos)
    array = np.frombuffer(view[pos:pos + expected], dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder('='), copy=True), pos + expected


def write_tensor(path: str, value: ArrayLike, dtype: Optional[str] = None, narrow: bool = False) -> None:
    with open(path, 'wb') as handle:
        handle.write(encode_tensor(value, dtype=dtype, narrow=narrow))


def read_tensor(path: str) -> Tensor:
    with open(path, 'rb') as handle:
        raw = handle.read()
    array, end = decode_tensor(raw)
    if end != len(raw):
        raise FormatError(f"{len(raw) - end} trailing bytes after tensor payload in {path}", end)
    return from_numpy(array)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def encode_checkpoint(header: str, entries: Dict[str, ArrayLike]) -> bytes:
    header_bytes = header.encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<HI', FORMAT_VERSION, len(header_bytes)), header_bytes,
             struct.pack('<I', len(entries))]
    for name, value in entries.items():
        name_bytes = name.encode('utf-8')
        parts.append(struct.pack('<H', len(name_bytes)))
        parts.append(name_bytes)
        parts.append(encode_tensor(value))
    return b''.join(parts)


def decode_checkpoint(raw: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    if len(raw) < 10:
        raise FormatError(f"Truncated checkpoint header: {len(raw)} bytes", 0)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version, header_len = struct.unpack_from('<HI', raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", 4)
    pos = 10
    if len(raw) < pos + header_len + 4:
        raise FormatError(f"Truncated checkpoint config header: expected {header_len} bytes", pos)
    try:
        header = raw[pos:pos + header_len].decode('utf-8')
    except UnicodeDecodeError:
        raise FormatError("Checkpoint config header is not valid UTF-8", pos) from None
    pos += header_len
    (count,) = struct.unpack_from('<I', raw, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        if len(raw) < pos + 2:
            raise FormatError("Truncated checkpoint entry name", pos)
        (name_len,) = struct.unpack_from('<H', raw, pos)
        pos += 2
        try:
            name = raw[pos:pos + name_len].decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError("Checkpoint entry name is not valid UTF-8", pos) from None
        pos += name_len
        entries[name], pos = decode_tensor(raw, pos)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after checkpoint entries", pos)
    return header, entries


def write_checkpoint(path: str, header: str, entries: Dict[str, ArrayLike]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(encode_checkpoint(header, entries))


def read_checkpoint(path: str) -> Tuple[str, Dict[str, np.ndarray]]:
    with open(path, 'rb') as handle:
        return decode_checkpoint(handle.read())


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def _ppm_header(raw: bytes) -> Tuple[int, int, int, int]:
    """Validate a P6 header; returns width, height, maxval and the payload offset"""
    if raw[:2] != b'P6':
        raise FormatError(f"Not a binary PPM: magic {raw[:2]!r}, expected b'P6'", 0)
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("Malformed PPM header", pos)
        tokens.append((int(raw[start:pos]), start))
    (width, _), (height, _), (maxval, maxval_at) = tokens
    if maxval != 255:
        raise FormatError(f"Unsupported PPM maxval {maxval}, only 255 is supported", maxval_at)
    if width < 1 or height < 1:
        raise FormatError(f"PPM extents must be positive, got {width}x{height}", 2)
    # exactly one whitespace byte separates the header from the payload
    return width, height, maxval, pos + 1


def import_ppm(path: str) -> Tensor:
    """Load a P6 image as an H x W x 3 tensor scaled to [0, 1]"""
    with open(path, 'rb') as handle:
        raw = handle.read()
    width, height, _, payload_at = _ppm_header(raw)
    expected = width * height * 3
    if len(raw) - payload_at < expected:
        raise FormatError(f"Truncated PPM payload: expected {expected} bytes, got {len(raw) - payload_at}", payload_at)
    try:
        with Image.open(io.BytesIO(raw)) as image:
            pixels = np.asarray(image.convert('RGB'), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"Could not decode PPM {path}: {e}", payload_at) from e
    return Tensor(pixels / 255.0)


def export_ppm(path: str, image: ArrayLike) -> None:
    array = _as_array(image)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ConfigurationError(f"PPM export needs an H x W x 3 image, got shape {array.shape}")
    pixels = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    path: str
    person_id: int
    camera_id: int
    split: str
    junk: bool = False


def parse_manifest(text: str, source: str = '<manifest>') -> List[SampleRecord]:
    """Parse path<TAB>person_id<TAB>camera_id<TAB>split<TAB>junk lines"""
    records = []
    offset = 0
    for number, line in enumerate(text.splitlines(keepends=True), start=1):
        line_at = offset
        offset += len(line.encode('utf-8'))
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        parts = line.rstrip('\r\n').split('\t')
        if len(parts) != 5:
            raise FormatError(f"{source}:{number}: expected 5 tab-separated fields, got {len(parts)}", line_at)
        path, pid, cam, split, junk = parts
        try:
            pid, cam, junk_flag = int(pid), int(cam), int(junk)
        except ValueError:
            raise FormatError(f"{source}:{number}: person_id, camera_id and junk must be integers", line_at) from None
        if split not in SPLITS:
            raise FormatError(f"{source}:{number}: unknown split '{split}'", line_at)
        if pid < -1 or cam < 0 or junk_flag not in (0, 1):
            raise FormatError(f"{source}:{number}: invalid ids or junk flag", line_at)
        if pid == -1 and not junk_flag:
            raise FormatError(f"{source}:{number}: person_id -1 is reserved for junk items", line_at)
        records.append(SampleRecord(path, pid, cam, split, bool(junk_flag)))
    return records


def format_manifest(records: Sequence[SampleRecord]) -> str:
    return ''.join(
        f"{r.path}\t{r.person_id}\t{r.camera_id}\t{r.split}\t{int(r.junk)}\n" for r in records)


def read_manifest(path: str) -> 'Dataset':
    with open(path, 'r', encoding='utf-8') as handle:
        records = parse_manifest(handle.read(), source=path)
    return Dataset(root=os.path.dirname(os.path.abspath(path)), records=records)


def write_manifest(path: str, records: Sequence[SampleRecord]) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(format_manifest(records))


def load_sample(record: SampleRecord, root: str = '.') -> Tensor:
    path = record.path if os.path.isabs(record.path) else os.path.join(root, record.path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Sample not found: {path}")
    if path.lower().endswith('.ppm'):
        return import_ppm(path)
    return Tensor(read_tensor(path).data)


@dataclass
class Dataset:
    """A manifest plus the directory its paths are relative to; images load lazily and are cached"""
    root: str
    records: List[SampleRecord]
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def indices(self, split: str) -> List[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_sample(self.records[index], self.root).data
        return self._cache[index]

    def train_labels(self) -> Tuple[List[int], Dict[int, int]]:
        """Train indices and the dense label of each train identity"""
        train = self.indices('train')
        label_of = {pid: k for k, pid in enumerate(sorted({self.records[i].person_id for i in train}))}
        return train, label_of


# ---------------------------------------------------------------------------
# Synthetic identities
# ---------------------------------------------------------------------------

class SyntheticGenerator:
    """Renders identities as k_p horizontal colour bands seen through per-camera colour shifts"""

    def __init__(self, num_ids: int, per_id: int, cams: int, size: Tuple[int, int] = (64, 32),
                 noise: float = 0.05, seed: int = 0, k_p: int = 4, train_fraction: float = 0.5,
                 distractors: int = 0, image_format: str = 'tensor'):
        if num_ids < 2 or cams < 2:
            raise ConfigurationError(f"Synthetic data needs at least 2 identities and 2 cameras, got {num_ids} and {cams}")
        if per_id < 1 or noise < 0 or not 0 < train_fraction < 1:
            raise ConfigurationError("per_id must be >= 1, noise >= 0 and train_fraction in (0, 1)")
        if image_format not in ('tensor', 'ppm'):
            raise ConfigurationError(f"image_format must be 'tensor' or 'ppm', got {image_format}")
        self.num_ids = num_ids
        self.per_id = per_id
        self.cams = cams
        self.size = size
        self.noise = noise
        self.k_p = k_p
        self.train_fraction = train_fraction
        self.distractors = distractors
        self.image_format = image_format
        self.rng = np.random.default_rng(derive_seed(seed, 'synth'))
        self.logger = logging.getLogger(__name__)

    def render(self, prototypes: np.ndarray, shift: np.ndarray) -> np.ndarray:
        height, width = self.size
        image = np.empty((height, width, 3), dtype=np.float32)
        for band, rows in enumerate(np.array_split(np.arange(height), self.k_p)):
            image[rows] = prototypes[band] + shift
        if self.noise > 0:
            image += self.rng.normal(0.0, self.noise, size=image.shape).astype(np.float32)
        return np.clip(image, 0.0, 1.0)

    def generate(self, out_dir: str) -> str:
        """
        Write images and a manifest under `out_dir`

        Args:
            out_dir: target directory, created if missing

        Returns:
            str: path of the written manifest
        """
        image_dir = os.path.join(out_dir, 'images')
        os.makedirs(image_dir, exist_ok=True)
        suffix = '.ppm' if self.image_format == 'ppm' else '.ccat'

        prototypes = self.rng.uniform(0.1, 0.9, size=(self.num_ids, self.k_p, 3)).astype(np.float32)
        shifts = self.rng.uniform(-0.1, 0.1, size=(self.cams, 3)).astype(np.float32)
        n_train = min(self.num_ids - 1, max(1, int(round(self.num_ids * self.train_fraction))))

        records = []
        for pid in range(self.num_ids):
            for cam in range(self.cams):
                if pid < n_train:
                    split = 'train'
                else:
                    split = 'query' if cam == 0 else 'gallery'
                for k in range(self.per_id):
                    name = f"{pid:04d}_c{cam}_{k:03d}{suffix}"
                    self._write(os.path.join(image_dir, name), self.render(prototypes[pid], shifts[cam]))
                    records.append(SampleRecord(f"images/{name}", pid, cam, split, False))

        for k in range(self.distractors):
            cam = int(self.rng.integers(0, self.cams))
            clutter = self.rng.uniform(0.0, 1.0, size=(self.k_p, 3)).astype(np.float32)
            name = f"junk_{k:04d}{suffix}"
            self._write(os.path.join(image_dir, name), self.render(clutter, shifts[cam]))
            records.append(SampleRecord(f"images/{name}", -1, cam, 'gallery', True))

        manifest_path = os.path.join(out_dir, MANIFEST_NAME)
        write_manifest(manifest_path, records)
        self.logger.info(
            f"Generated {len(records)} samples ({n_train} train ids, {self.num_ids - n_train} test ids, "
            f"{self.distractors} distractors) in {out_dir}")
        return manifest_path

    def _write(self, path: str, image: np.ndarray) -> None:
        if self.image_format == 'ppm':
            export_ppm(path, image)
        else:
            write_tensor(path, image)


def synth_generate(out_dir: str, num_ids: int, per_id: int, cams: int, size: Tuple[int, int] = (64, 32),
                   noise: float = 0.05, seed: int = 0, **options) -> str:
    return SyntheticGenerator(num_ids, per_id, cams, size=size, noise=noise, seed=seed, **options).generate(out_dir)


SEPARABILITY_NOISE_THRESHOLD = 0.1


def separability(dataset: Dataset, projection_dim: int = 32, seed: int = 0) -> Tuple[float, float]:
    """Mean intra-id and inter-id distance of images under a fixed random projection"""
    indices = [i for i, r in enumerate(dataset.records) if not r.junk]
    flat = np.stack([dataset.image(i).reshape(-1) for i in indices]).astype(np.float64)
    rng = np.random.default_rng(seed)
    projection = rng.normal(0.0, 1.0 / np.sqrt(projection_dim), size=(flat.shape[1], projection_dim))
    embedded = flat @ projection
    diff = embedded[:, None, :] - embedded[None, :, :]
    distances = np.sqrt((diff ** 2).sum(axis=2))
    pids = np.array([dataset.records[i].person_id for i in indices])
    same = pids[:, None] == pids[None, :]
    off_diagonal = ~np.eye(len(indices), dtype=bool)
    intra = distances[same & off_diagonal]
    inter = distances[~same]
    return float(intra.mean()), float(inter.mean())


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    resize_to: Tuple[int, int]
    crop_to: Tuple[int, int]
    hflip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area_lo: float = 0.02
    erase_area_hi: float = 0.4
    erase_aspect_lo: float = 0.3
    erase_enabled: bool = False

    @classmethod
    def from_run_config(cls, cfg, erase_enabled: bool = False) -> 'AugmentConfig':
        return cls(resize_to=cfg.resize_to, crop_to=cfg.crop_to, hflip_prob=cfg.hflip_prob,
                   erase_prob=cfg.erase_prob, erase_area_lo=cfg.erase_area_lo,
                   erase_area_hi=cfg.erase_area_hi, erase_aspect_lo=cfg.erase_aspect_lo,
                   erase_enabled=erase_enabled)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    with inference_mode():
        return bilinear_resize(from_numpy(image), height, width).data


def random_erasing(image: np.ndarray, rng: np.random.Generator, probability: float = 0.5,
                   area_lo: float = 0.02, area_hi: float = 0.4,
                   aspect_lo: float = 0.3) -> Tuple[np.ndarray, Optional[Tuple[int, int, int, int]]]:
    """Replace a random rectangle with uniform noise.

    Returns the image and the erased (top, left, height, width), or None when nothing was erased.
    """
    im_h, im_w, channels = image.shape
    if rng.uniform(0, 1) >= probability:
        return image, None
    area = im_h * im_w
    for _ in range(100):
        target_area = rng.uniform(area_lo, area_hi) * area
        aspect_ratio = rng.uniform(aspect_lo, 1 / aspect_lo)
        h = int(round(np.sqrt(target_area * aspect_ratio)))
        w = int(round(np.sqrt(target_area / aspect_ratio)))
        if 0 < h < im_h and 0 < w < im_w:
            top = int(rng.integers(0, im_h - h + 1))
            left = int(rng.integers(0, im_w - w + 1))
            erased = image.copy()
            erased[top:top + h, left:left + w, :] = rng.uniform(0, 1, size=(h, w, channels))
            return erased, (top, left, h, w)
    return image, None


def augment(image: ArrayLike, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Resize, random crop, random horizontal flip and (when enabled) random erasing"""
    array = _as_array(image)
    resize_h, resize_w = cfg.resize_to
    crop_h, crop_w = cfg.crop_to
    if crop_h > resize_h or crop_w > resize_w:
        raise ConfigurationError(f"crop {cfg.crop_to} does not fit inside resize {cfg.resize_to}")
    array = resize_image(array, resize_h, resize_w)
    top = int(rng.integers(0, resize_h - crop_h + 1))
    left = int(rng.integers(0, resize_w - crop_w + 1))
    array = array[top:top + crop_h, left:left + crop_w]
    if rng.uniform(0, 1) < cfg.hflip_prob:
        array = cv2.flip(np.ascontiguousarray(array), 1)
    if cfg.erase_enabled:
        array, _ = random_erasing(array, rng, cfg.erase_prob, cfg.erase_area_lo,
                                  cfg.erase_area_hi, cfg.erase_aspect_lo)
    return Tensor(array)


def eval_transform(image: ArrayLike, cfg: AugmentConfig) -> Tensor:
    """Test-time path: resize straight to the crop size, nothing random"""
    crop_h, crop_w = cfg.crop_to
    return Tensor(resize_image(_as_array(image), crop_h, crop_w))


def hflip(image: ArrayLike) -> Tensor:
    return Tensor(cv2.flip(np.ascontiguousarray(_as_array(image)), 1))
