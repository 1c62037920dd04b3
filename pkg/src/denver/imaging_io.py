"""Frame, mask and flow I/O plus the image primitives shared by every stage.

Conventions
-----------
* Frames are single channel, float, intensities in [0, 1].
* Flows are ``(..., H, W, 2)`` arrays of ``(u, v)`` pixel displacements,
  ``u`` along columns (x) and ``v`` along rows (y).
* Warping is backward sampling, ``out(x) = image(x + flow(x))``, with
  clamp-to-edge borders.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from skimage.morphology import skeletonize as _sk_skeletonize

from denver.errors import FormatError, InputError, NumericError

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg", ".pgm"}
FLO_MAGIC = 202021.25
ARRAY_MAGIC = b"DNVRARR1"

_DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
_CODE_FOR_KIND = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class VideoClip:
    """Ordered stack of grayscale frames, ``frames[t]`` is ``H x W``."""

    frames: np.ndarray
    frame_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3:
            raise InputError(f"frames must be T x H x W, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise InputError("a clip needs at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise InputError("frames contain non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise InputError("frame intensities must lie in [0, 1]")
        self.frames = frames
        if not self.frame_ids:
            self.frame_ids = [f"{t:05d}" for t in range(frames.shape[0])]
        if len(self.frame_ids) != frames.shape[0]:
            raise InputError("frame_ids length does not match the frame count")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class MaskSequence:
    masks: np.ndarray
    kind: str = "binary"

    def __post_init__(self):
        if self.kind not in ("soft", "binary"):
            raise InputError(f"unknown mask kind {self.kind!r}")
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise InputError(f"masks must be T x H x W, got shape {masks.shape}")
        if self.kind == "binary":
            if not np.all((masks == 0) | (masks == 1)):
                raise InputError("binary masks may only contain 0 and 1")
            masks = masks.astype(np.uint8)
        else:
            masks = masks.astype(np.float32)
            if masks.size and (masks.min() < 0.0 or masks.max() > 1.0):
                raise InputError("soft masks must lie in [0, 1]")
        self.masks = masks

    def __len__(self):
        return self.masks.shape[0]

    def check_matches(self, clip: VideoClip):
        if self.masks.shape != clip.frames.shape:
            raise InputError(
                f"mask shape {self.masks.shape} does not match clip {clip.frames.shape}"
            )


@dataclass
class FlowSequence:
    flows: np.ndarray
    pairing: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        flows = np.asarray(self.flows, dtype=np.float32)
        if flows.ndim != 4 or flows.shape[-1] != 2:
            raise InputError(f"flows must be N x H x W x 2, got shape {flows.shape}")
        if not np.all(np.isfinite(flows)):
            raise InputError("flows contain non-finite values")
        self.flows = flows
        if not self.pairing:
            self.pairing = [(t, t + 1) for t in range(flows.shape[0])]
        if len(self.pairing) != flows.shape[0]:
            raise InputError("pairing length does not match the number of flows")

    def __len__(self):
        return self.flows.shape[0]


# ---------------------------------------------------------------------------
# Image sequences


def _to_unit_gray(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        # drop alpha, average colour channels
        arr = arr[..., :3].astype(np.float64).mean(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == np.uint8 or arr.dtype == np.bool_:
        scale = 255.0 if arr.dtype == np.uint8 else 1.0
    elif np.issubdtype(arr.dtype, np.integer):
        scale = float(np.iinfo(arr.dtype).max)
    else:
        return np.clip(arr.astype(np.float32), 0.0, 1.0)
    return (arr.astype(np.float64) / scale).astype(np.float32)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_clip(directory) -> VideoClip:
    """Load every image in ``directory`` (lexicographic order) as a clip."""
    paths = list_images(directory)
    if len(paths) < 2:
        raise InputError(f"{directory} holds {len(paths)} frame(s), need at least 2")
    frames = []
    for p in paths:
        with Image.open(p) as img:
            frames.append(_to_unit_gray(np.asarray(img)))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise InputError(f"mixed frame resolutions in {directory}: {sorted(shapes)}")
    return VideoClip(np.stack(frames), [p.stem for p in paths])


def save_frames(frames: np.ndarray, directory, prefix: str = "frame") -> list[Path]:
    """Write ``T x H x W`` intensities in [0, 1] as 8-bit PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for t, frame in enumerate(np.asarray(frames)):
        p = directory / f"{prefix}_{t:05d}.png"
        img = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(p)
        out.append(p)
    return out


def save_binary_masks(masks: np.ndarray, directory, prefix: str = "mask") -> list[Path]:
    """Binary masks persist as 8-bit images with values {0, 255}."""
    masks = np.asarray(masks)
    return save_frames((masks > 0).astype(np.float32), directory, prefix)


def load_binary_masks(directory) -> MaskSequence:
    paths = list_images(directory)
    if not paths:
        raise InputError(f"no mask images in {directory}")
    masks = []
    for p in paths:
        with Image.open(p) as img:
            arr = np.asarray(img)
        if arr.ndim == 3:
            arr = arr[..., 0]
        masks.append((arr > 127).astype(np.uint8))
    return MaskSequence(np.stack(masks), "binary")


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(flow, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise InputError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: header truncated")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {magic}")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    expected = 8 * w * h
    if len(data) - 12 != expected:
        raise FormatError(f"{path}: payload holds {len(data) - 12} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# ---------------------------------------------------------------------------
# Named float-array container
#
# magic "DNVRARR1" | u32 count | count x entry
# entry: u16 name_len | name utf-8 | u8 dtype code | u8 ndim | ndim x u64 dim | raw LE data


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries = dict(arrays)
    if meta is not None:
        entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
            if dt not in _CODE_FOR_KIND:
                if np.issubdtype(arr.dtype, np.floating):
                    dt = np.dtype("<f4")
                elif arr.dtype == np.bool_:
                    dt = np.dtype("u1")
                else:
                    raise InputError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _CODE_FOR_KIND[dt], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_arrays(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` from a container written by :func:`save_arrays`."""
    data = Path(path).read_bytes()
    if data[:8] != ARRAY_MAGIC:
        raise FormatError(f"{path}: not an array container")
    try:
        pos = 8
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dt = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: entry {name!r} truncated")
            arrays[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                         offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"{path}: corrupt container ({exc})") from exc
    meta = {}
    if "__meta__" in arrays:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


def save_soft_masks(masks: MaskSequence, path) -> None:
    save_arrays(path, {"masks": masks.masks.astype(np.float32)}, {"kind": masks.kind})


def load_soft_masks(path) -> MaskSequence:
    arrays, meta = load_arrays(path)
    return MaskSequence(arrays["masks"], meta.get("kind", "soft"))


# ---------------------------------------------------------------------------
# Warping


def warp_torch(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp with clamp-to-edge borders.

    image: ``(B, C, H, W)``; flow: ``(B, H, W, 2)``. Differentiable in both.
    """
    if torch.isnan(flow).any():
        raise NumericError("NaN in flow")
    b, c, h, w = image.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = (xs + flow[..., 0]).clamp(0, w - 1)
    y = (ys + flow[..., 1]).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0)).long()
    y0 = y.detach().floor().clamp(max=max(h - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (x - x0.to(x.dtype)).unsqueeze(1)
    wy = (y - y0.to(y.dtype)).unsqueeze(1)

    flat = image.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def warp_field(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp a channels-last ``(B, H, W, C)`` field by ``(B, H, W, 2)`` flow."""
    return warp_torch(field.permute(0, 3, 1, 2), flow).permute(0, 2, 3, 1)


def warp_bilinear(image, flow):
    """Sample ``image`` at ``x + flow(x)``.

    Accepts ``H x W`` or ``H x W x C`` images with an ``H x W x 2`` flow, as
    numpy arrays or torch tensors; returns the same kind it was given.
    """
    is_torch = isinstance(image, torch.Tensor)
    img = image if is_torch else torch.from_numpy(np.asarray(image, dtype=np.float64))
    fl = flow if isinstance(flow, torch.Tensor) else torch.from_numpy(np.asarray(flow, dtype=np.float64))
    fl = fl.to(img.dtype)
    if img.shape[:2] != fl.shape[:2] or fl.shape[-1] != 2:
        raise InputError(f"image {tuple(img.shape)} and flow {tuple(fl.shape)} disagree")
    if img.ndim == 2:
        out = warp_torch(img[None, None], fl[None])[0, 0]
    elif img.ndim == 3:
        out = warp_field(img[None], fl[None])[0]
    else:
        raise InputError(f"unsupported image rank {img.ndim}")
    if is_torch:
        return out
    return out.numpy().astype(np.result_type(np.asarray(image).dtype, np.float32))


# ---------------------------------------------------------------------------
# Morphology


def distance_transform(mask) -> np.ndarray:
    """Euclidean distance of every foreground pixel to the nearest background pixel.

    A mask with no background pixel at all is measured against the ring just
    outside the image.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.float64)
    if m.all():
        return ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    return ndimage.distance_transform_edt(m)


def skeletonize(mask) -> np.ndarray:
    """Thinning-based 1-px medial curve; the result is a subset of ``mask``."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=bool)
    return _sk_skeletonize(m) & m


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def connected_components(mask) -> tuple[np.ndarray, np.ndarray]:
    """8-connected labelling. Returns ``(labels, areas)``; ``areas[k-1]`` is the area of label ``k``."""
    m = np.asarray(mask).astype(bool)
    labels, k = ndimage.label(m, structure=EIGHT_CONNECTED)
    areas = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return labels, areas
