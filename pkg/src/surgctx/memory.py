"""Space-time memory readout: key/value bank, negative-L2 affinity, softmax, readout.

Feature maps are ``(channels, positions)`` float arrays, positions being the
flattened ``H' x W'`` grid produced by an encoder. The trained CNN encoders are
not part of this package; :class:`ToyEncoder` is a deterministic stand-in and
any object with the same four attributes can be plugged in.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

INSERT_EVERY = 5
TRAIN_SENTINEL = -1


class UninitializedBankError(RuntimeError):
    pass


class FrameOrderError(ValueError):
    pass


def _fmap(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] == 0:
        raise ValueError(f"{name} must be (channels, positions) with positions > 0, got {a.shape}")
    return a


def affinity(k_query, k_memory) -> np.ndarray:
    """Negative squared L2 distance between every memory and query position.

    Returns ``S`` with shape ``(memory_positions, query_positions)``, computed as
    ``2 kM.kQ - |kM|^2 - |kQ|^2`` and clipped at 0 from above.
    """
    kq = _fmap(k_query, "query key")
    km = _fmap(k_memory, "memory key")
    if kq.shape[0] != km.shape[0]:
        raise ValueError(f"key channel mismatch: query {kq.shape[0]} vs memory {km.shape[0]}")
    s = 2.0 * (km.T @ kq)
    s -= np.einsum("cm,cm->m", km, km)[:, None]
    s -= np.einsum("cq,cq->q", kq, kq)[None, :]
    np.minimum(s, 0.0, out=s)
    return s


def normalize_affinity(s) -> np.ndarray:
    """Softmax over the memory axis (axis 0), one distribution per query position."""
    s = np.asarray(s)
    w = s - s.max(axis=0, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=0, keepdims=True)
    return w


def readout(v_memory, w) -> np.ndarray:
    """Weighted value retrieval ``vM @ W`` -> ``(value_channels, query_positions)``."""
    vm = _fmap(v_memory, "memory value")
    w = np.asarray(w)
    if w.ndim != 2 or vm.shape[1] != w.shape[0]:
        raise ValueError(f"memory positions {vm.shape[1]} do not match affinity rows {w.shape}")
    return vm @ w


# -- encoders -----------------------------------------------------------------

class Encoder(Protocol):
    stride: int

    def key_encoder(self, frame) -> np.ndarray: ...

    def value_encoder(self, frame, mask) -> np.ndarray: ...

    def decoder(self, value, frame=None) -> np.ndarray: ...


def to_gray(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64, copy=False)
    if img.ndim == 3:
        img = img[..., :3].mean(axis=2)
    return img


def _image_of(frame):
    return getattr(frame, "image", frame)


class ToyEncoder:
    """Training-free encoder used to exercise the memory path end to end.

    Key channels are pooled grayscale intensity and x/y cell coordinates in
    cell units, each multiplied by a sharpness weight so the softmax does not
    flatten out. Each worker follows a single object, so position is weighted
    lightly: with the defaults an intensity step of 0.1 costs as much as eight
    cells of displacement. The value appends two channels to the key, pooled
    mask occupancy and pooled masked intensity.

    Decoding without a frame upsamples the occupancy by nearest neighbour and
    thresholds it at 0.5. With the query frame at hand (``refine``), cells
    whose occupancy exceeds ``support`` times the peak, grown by one cell, form
    the support. Inside it, pixels within ``tolerance`` of the object's
    read-out intensity are kept, which preserves structures thinner than a
    cell.
    """

    def __init__(self, height: int, width: int, stride: int = 16,
                 intensity_weight: float = 20.0, position_weight: float = 0.25,
                 dtype=np.float64, refine: bool = True, support: float = 0.1, tolerance: float = 0.06,
                 floor: float = 1e-4):
        if height % stride or width % stride:
            raise ValueError(f"frame size {width}x{height} is not divisible by stride {stride}")
        self.height, self.width, self.stride = height, width, stride
        self.grid = (height // stride, width // stride)
        self.intensity_weight = intensity_weight
        self.position_weight = position_weight
        self.dtype = dtype
        self.refine = refine
        self.support = support
        self.floor = floor
        self.tolerance = tolerance
        gh, gw = self.grid
        yy, xx = np.meshgrid(np.arange(gh, dtype=float), np.arange(gw, dtype=float), indexing="ij")
        self._coords = (position_weight * np.stack([xx.ravel(), yy.ravel()])).astype(dtype)

    def _pool(self, a: np.ndarray) -> np.ndarray:
        gh, gw = self.grid
        s = self.stride
        return a.reshape(gh, s, gw, s).mean(axis=(1, 3)).ravel()

    def _up(self, a: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(a, self.stride, axis=0), self.stride, axis=1)

    def _check(self, a: np.ndarray, what: str) -> None:
        if a.shape[:2] != (self.height, self.width):
            raise ValueError(f"{what} shape {a.shape[:2]} != encoder size {(self.height, self.width)}")

    def key_encoder(self, frame) -> np.ndarray:
        g = to_gray(_image_of(frame))
        self._check(g, "frame")
        intensity = (self.intensity_weight * self._pool(g)).astype(self.dtype)
        return np.vstack([intensity[None, :], self._coords])

    def _mask_channels(self, frame, mask, dtype) -> np.ndarray:
        m = np.asarray(mask, dtype=np.float64)
        self._check(m, "mask")
        g = to_gray(_image_of(frame))
        self._check(g, "frame")
        return np.vstack([self._pool(m), self._pool(m * g)]).astype(dtype)

    def value_encoder(self, frame, mask) -> np.ndarray:
        return np.vstack([self.key_encoder(frame), self._mask_channels(frame, mask, self.dtype)])

    def decoder(self, value, frame=None) -> np.ndarray:
        gh, gw = self.grid
        value = np.asarray(value)
        occ = value[-2].reshape(gh, gw)
        if frame is None or not self.refine:
            return self._up(occ) > 0.5
        peak = float(occ.max())
        if peak < self.floor:
            return np.zeros((self.height, self.width), dtype=bool)
        cells = occ > self.support * peak
        if not cells.any():
            return np.zeros((self.height, self.width), dtype=bool)
        level = float(value[-1].reshape(gh, gw)[cells].sum() / occ[cells].sum())
        grown = ndimage.binary_dilation(cells, structure=np.ones((3, 3), bool))
        g = to_gray(_image_of(frame))
        self._check(g, "frame")
        return self._up(grown) & (np.abs(g - level) < self.tolerance)


@dataclass(frozen=True)
class Frame:
    """An image optionally carrying a precomputed key feature map."""

    image: np.ndarray
    key: np.ndarray | None = None


class ExternalKeyEncoder(ToyEncoder):
    """Uses keys supplied with each :class:`Frame` (e.g. read from ``.fmap`` files).

    Values and decoding fall back to the toy scheme on top of the external key.
    """

    def key_encoder(self, frame) -> np.ndarray:
        key = getattr(frame, "key", None)
        if key is None:
            raise ValueError("ExternalKeyEncoder needs frames with a precomputed key")
        return _fmap(key, "external key")

    def value_encoder(self, frame, mask) -> np.ndarray:
        key = self.key_encoder(frame)
        return np.vstack([key, self._mask_channels(frame, mask, key.dtype)])


# -- memory bank ----------------------------------------------------------------

class InitMode(str, enum.Enum):
    TRAIN_FF = "train-ff"
    DEEPLAB_FF = "deeplab-ff"
    GT_FF = "gt-ff"


@dataclass
class InitPair:
    """First image/mask pair seeding a bank."""

    mode: InitMode
    image: object
    mask: np.ndarray
    frame_index: int | None = None

    def __post_init__(self):
        self.mode = InitMode(self.mode)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError(f"{self.mode.value}: the initial mask is empty")
        if self.mask.shape != to_gray(_image_of(self.image)).shape[:2]:
            raise ValueError("initial mask and image sizes differ")


@dataclass
class MemoryBank:
    """Key/value stores of past frames; the first ``pinned`` entries never leave."""

    capacity: int | None = None
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    frame_indices: list = field(default_factory=list)
    pinned: int = 0
    _cat_keys: np.ndarray | None = field(default=None, repr=False)
    _cat_values: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def empty(self) -> bool:
        return not self.keys

    def add(self, key, value, frame_index: int, pin: bool = False) -> None:
        key, value = _fmap(key, "key"), _fmap(value, "value")
        if self.keys:
            if key.shape[0] != self.keys[0].shape[0] or value.shape[0] != self.values[0].shape[0]:
                raise ValueError("feature channel counts differ from existing bank entries")
            if frame_index <= self.frame_indices[-1]:
                raise FrameOrderError(f"frame {frame_index} does not follow {self.frame_indices[-1]}")
        if key.shape[1] != value.shape[1]:
            raise ValueError("key and value position counts differ")
        self.keys.append(key)
        self.values.append(value)
        self.frame_indices.append(int(frame_index))
        if pin:
            self.pinned = len(self.keys)
        if self.capacity is not None:
            while len(self.keys) > self.capacity and len(self.keys) > self.pinned:
                del self.keys[self.pinned], self.values[self.pinned], self.frame_indices[self.pinned]
        self._cat_keys = self._cat_values = None

    def memory(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated ``(keys, values)`` along the position axis."""
        if self.empty:
            raise UninitializedBankError("memory bank has not been initialised")
        if self._cat_keys is None:
            self._cat_keys = np.concatenate(self.keys, axis=1)
            self._cat_values = np.concatenate(self.values, axis=1)
        return self._cat_keys, self._cat_values


def init_bank(init: InitPair, enc: Encoder, capacity: int | None = None) -> MemoryBank:
    """Seed a bank with one pinned entry built from the first image/mask pair.

    Train-FF and DeepLab-FF pairs are not frames of the video being segmented
    and get index -1; a GT-FF pair keeps its frame index (default 0).
    """
    if init.mode is InitMode.GT_FF:
        index = 0 if init.frame_index is None else int(init.frame_index)
    else:
        index = TRAIN_SENTINEL
    if capacity is not None and capacity < 1:
        raise ValueError("capacity must be at least 1")
    bank = MemoryBank(capacity=capacity)
    bank.add(enc.key_encoder(init.image), enc.value_encoder(init.image, init.mask), index, pin=True)
    return bank


def segment_frame(bank: MemoryBank, frame, enc: Encoder) -> tuple[np.ndarray, np.ndarray]:
    """Segment one frame against the bank; returns ``(mask, query_key)``."""
    km, vm = bank.memory()
    kq = enc.key_encoder(frame)
    vq = readout(vm, normalize_affinity(affinity(kq, km)))
    return enc.decoder(vq, frame), kq


def should_insert(frame_index: int, base_index: int = 0, every: int = INSERT_EVERY,
                  global_index: bool = True) -> bool:
    i = frame_index if global_index else frame_index - base_index
    return i % every == 0


def maybe_insert(bank: MemoryBank, frame_index: int, key, value, every: int = INSERT_EVERY,
                 base_index: int = 0, global_index: bool = True) -> bool:
    """Store the entry when the frame is on the insertion schedule. Returns whether it was stored."""
    if bank.frame_indices and frame_index <= bank.frame_indices[-1]:
        raise FrameOrderError(f"frame {frame_index} does not follow {bank.frame_indices[-1]}")
    if not should_insert(frame_index, base_index, every, global_index):
        return False
    bank.add(key, value, frame_index)
    return True


def segment_batch(bank: MemoryBank, frames: Sequence, base_index: int, enc: Encoder,
                  every: int = INSERT_EVERY, global_index: bool = True) -> list[np.ndarray]:
    """Segment a window of consecutive frames starting at global index ``base_index``."""
    if len(frames) == 0:
        raise ValueError("empty batch")
    masks = []
    for offset, frame in enumerate(frames):
        index = base_index + offset
        if bank.frame_indices and index <= bank.frame_indices[-1]:
            raise FrameOrderError(f"frame {index} does not follow {bank.frame_indices[-1]}")
        mask, key = segment_frame(bank, frame, enc)
        if should_insert(index, base_index, every, global_index):
            bank.add(key, enc.value_encoder(frame, mask), index)
        masks.append(mask)
    return masks


# -- feature map interchange ------------------------------------------------------

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_feature_map(path, fmap) -> None:
    """Little-endian float32 payload behind a 16-byte header (magic, version, channels, positions)."""
    a = _fmap(fmap, "feature map")
    if not np.all(np.isfinite(a)):
        raise ValueError("feature map has non-finite entries")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_feature_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, channels, positions = _HEADER.unpack_from(data)
    if magic != FMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * channels * positions
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(channels, positions)
    return arr.astype(np.float64)
