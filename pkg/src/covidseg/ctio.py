"""CT volume I/O and slice preprocessing.

Volumes travel as (Z, H, W) arrays: int16 Hounsfield units for CT data,
uint8 class ids for labels (0 outside-body air, 1 other body tissue,
2 normal lung, 3 infection). File format is an uncompressed single-file
little-endian NIfTI-1 subset (magic "n+1", 348-byte header, data at
offset 352). Intensities are normalized from the [-2050, 950] HU window
to [-1, 1]; slices are rescaled in-plane with half-pixel-center bilinear
interpolation and stacked into 3-channel images of consecutive slices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CtVolume",
    "LabelVolume",
    "SliceTriple",
    "NiftiFormatError",
    "read_nifti",
    "write_nifti",
    "normalize_hu",
    "resize_slice",
    "resize_volume",
    "resize_labels_nearest",
    "make_triples",
    "labels_to_onehot",
    "reconstruct_volume",
    "read_manifest",
    "write_manifest",
]

HU_WINDOW_LOW = -2050.0
HU_WINDOW_HIGH = 950.0

_HEADER_SIZE = 348
_VOX_OFFSET = 352
_DT_UINT8 = 2
_DT_INT16 = 4
_DT_FLOAT32 = 16


class NiftiFormatError(ValueError):
    """File violates the supported NIfTI-1 subset."""


@dataclass
class CtVolume:
    """CT voxel grid in Hounsfield units with millimeter geometry.

    data is int16 for everything this pipeline produces; float32 is
    accepted so float-typed files round-trip losslessly.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.int16, np.float32):
            raise ValueError(
                f"CtVolume data must be int16 or float32, got "
                f"{self.data.dtype}")
        _check_volume_geometry(self.data.shape, self.spacing)
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < -32768 or hi > 32767:
            raise ValueError(
                f"HU values [{lo}, {hi}] outside int16 storage range")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelVolume:
    """Per-voxel class ids aligned with a CtVolume."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint8:
            raise ValueError(
                f"LabelVolume data must be uint8, got {self.data.dtype}")
        _check_volume_geometry(self.data.shape, self.spacing)
        top = int(self.data.max()) if self.data.size else 0
        if top > 3:
            raise ValueError(
                f"label classes must lie in 0..3, found {top}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SliceTriple:
    """Three consecutive normalized slices forming one network input;
    the prediction applies to the center slice."""

    image: np.ndarray  # (3, S, S), values in [-1, 1]
    center_index: int


def _check_volume_geometry(shape, spacing) -> None:
    if len(shape) != 3:
        raise ValueError(f"volume must be 3-D (Z, H, W), got shape {shape}")
    z, h, w = shape
    if z < 1 or h < 8 or w < 8:
        raise ValueError(
            f"volume shape {shape} below minimum (Z >= 1, H, W >= 8)")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing components must be positive, got {spacing}")


# ---------------------------------------------------------------------------
# NIfTI-1 subset


def _pack_header(shape, spacing, origin, datatype, bitpix) -> bytes:
    z, h, w = shape
    sz, sy, sx = spacing
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, w, h, z, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<h", header, 254, 1)  # sform_code
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, origin[2])
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, origin[1])
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, origin[0])
    header[344:348] = b"n+1\x00"
    return bytes(header)


def write_nifti(volume: CtVolume | LabelVolume, path) -> None:
    """Write a volume as uncompressed little-endian NIfTI-1 (.nii)."""
    if isinstance(volume, LabelVolume):
        payload = volume.data.astype("u1", copy=False)
        datatype, bitpix = _DT_UINT8, 8
    elif isinstance(volume, CtVolume):
        if volume.data.dtype == np.float32:
            payload = volume.data.astype("<f4", copy=False)
            datatype, bitpix = _DT_FLOAT32, 32
        else:
            payload = volume.data.astype("<i2", copy=False)
            datatype, bitpix = _DT_INT16, 16
    else:
        raise TypeError(f"cannot write {type(volume).__name__} as NIfTI")
    header = _pack_header(volume.data.shape, volume.spacing, volume.origin,
                          datatype, bitpix)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (_VOX_OFFSET - _HEADER_SIZE))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_nifti(path) -> CtVolume | LabelVolume:
    """Read the supported NIfTI-1 subset.

    uint8 payloads come back as LabelVolume, int16 and float32 as
    CtVolume; scl_slope/scl_inter are applied on read (slope 0 means 1).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raise NiftiFormatError(
            f"{path}: gzip-compressed NIfTI is not supported; decompress "
            f"to a plain .nii first")
    if len(raw) < _HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    magic = raw[344:348]
    if magic[:3] != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected 'n+1'")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: header size field {sizeof_hdr} is not {_HEADER_SIZE}; "
            f"only little-endian files are supported")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiFormatError(
            f"{path}: expected 3-D volume, header declares dim[0]={dim[0]}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in (_DT_UINT8, _DT_INT16, _DT_FLOAT32):
        raise NiftiFormatError(
            f"{path}: unsupported datatype code {datatype}; supported: "
            f"2 (uint8), 4 (int16), 16 (float32)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)
    if slope == 0.0:
        slope = 1.0
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    if sform_code > 0:
        srow_x = struct.unpack_from("<4f", raw, 280)
        srow_y = struct.unpack_from("<4f", raw, 296)
        srow_z = struct.unpack_from("<4f", raw, 312)
        origin = (srow_z[3], srow_y[3], srow_x[3])
    else:
        qoffset = struct.unpack_from("<3f", raw, 268)
        origin = (qoffset[2], qoffset[1], qoffset[0])

    w, h, z = dim[1], dim[2], dim[3]
    spacing = (pixdim[3], pixdim[2], pixdim[1])
    np_dtype = {_DT_UINT8: np.dtype("u1"), _DT_INT16: np.dtype("<i2"),
                _DT_FLOAT32: np.dtype("<f4")}[datatype]
    count = z * h * w
    start = int(vox_offset)
    data = np.frombuffer(raw, dtype=np_dtype, count=count,
                         offset=start).reshape(z, h, w)

    if datatype == _DT_UINT8:
        if slope != 1.0 or inter != 0.0:
            raise NiftiFormatError(
                f"{path}: label volume carries intensity scaling "
                f"(slope={slope}, inter={inter})")
        return LabelVolume(data.copy(), spacing, origin)
    if datatype == _DT_INT16:
        if slope == 1.0 and float(inter).is_integer():
            hu = data.astype(np.int32) + int(inter)
        else:
            hu = np.rint(data.astype(np.float64) * slope + inter).astype(
                np.int32)
        if hu.min() < -32768 or hu.max() > 32767:
            raise NiftiFormatError(
                f"{path}: scaled HU values leave the int16 range")
        return CtVolume(hu.astype(np.int16), spacing, origin)
    scaled = data.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        scaled = (scaled * np.float32(slope)) + np.float32(inter)
    return CtVolume(scaled, spacing, origin)


# ---------------------------------------------------------------------------
# intensity and geometry preprocessing


def normalize_hu(hu):
    """Map the [-2050, 950] HU window linearly onto [-1, 1], clamping
    outside values; monotone non-decreasing."""
    arr = np.asarray(hu, dtype=np.float64)
    mid = (HU_WINDOW_HIGH + HU_WINDOW_LOW) / 2.0
    half = (HU_WINDOW_HIGH - HU_WINDOW_LOW) / 2.0
    out = np.clip((arr - mid) / half, -1.0, 1.0)
    if np.isscalar(hu) or np.ndim(hu) == 0:
        return float(out)
    return out


def _bilinear_axes(src: int, dst: int):
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    lo = np.clip(i0, 0, src - 1)
    hi = np.clip(i0 + 1, 0, src - 1)
    return lo, hi, frac


def resize_slice(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear square resize with half-pixel-center mapping
    (src = (dst + 0.5) * (H / S) - 0.5), edge-clamped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D slice, got shape {image.shape}")
    h, w = image.shape
    if h != w:
        raise ValueError(f"only square slices are supported, got {h}x{w}")
    if h < 2:
        raise ValueError(f"slice extent {h} below minimum of 2")
    if target < 8:
        raise ValueError(f"target size {target} below minimum of 8")
    return _resize_stack(image[None], target)[0]


def _resize_stack(stack: np.ndarray, target: int) -> np.ndarray:
    src = stack.shape[1]
    ylo, yhi, fy = _bilinear_axes(src, target)
    xlo, xhi, fx = _bilinear_axes(stack.shape[2], target)
    fy = fy[:, None]
    top = stack[:, ylo][:, :, xlo] * (1.0 - fx) + stack[:, ylo][:, :, xhi] * fx
    bot = stack[:, yhi][:, :, xlo] * (1.0 - fx) + stack[:, yhi][:, :, xhi] * fx
    return top * (1.0 - fy) + bot * fy


def resize_volume(volume: np.ndarray, target: int) -> np.ndarray:
    """Bilinear in-plane resize of a (Z, H, W) stack to (Z, target, target)."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3-D stack, got shape {volume.shape}")
    if volume.shape[1] != volume.shape[2]:
        raise ValueError(
            f"only square slices are supported, got "
            f"{volume.shape[1]}x{volume.shape[2]}")
    if target < 8:
        raise ValueError(f"target size {target} below minimum of 8")
    return _resize_stack(volume, target)


def _nearest_axis(src: int, dst: int) -> np.ndarray:
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    return np.clip(np.floor(coords + 0.5).astype(np.int64), 0, src - 1)


def resize_labels_nearest(labels: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize for categorical maps; accepts (H, W) or
    (Z, H, W)."""
    labels = np.asarray(labels)
    squeeze = labels.ndim == 2
    if squeeze:
        labels = labels[None]
    iy = _nearest_axis(labels.shape[1], target)
    ix = _nearest_axis(labels.shape[2], target)
    out = labels[:, iy][:, :, ix]
    return out[0] if squeeze else out


def make_triples(volume: np.ndarray) -> list[SliceTriple]:
    """Stack each slice with its neighbours into a 3-channel image,
    replicating the edge slices; exactly one triple per slice."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError(f"expected (Z, S, S) stack, got {volume.shape}")
    z = volume.shape[0]
    triples = []
    for k in range(z):
        image = np.stack([volume[max(k - 1, 0)], volume[k],
                          volume[min(k + 1, z - 1)]])
        triples.append(SliceTriple(image=image, center_index=k))
    return triples


def labels_to_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One channel per class with exactly one 1 per pixel."""
    labels = np.asarray(labels)
    if labels.max(initial=0) >= num_classes:
        bad = np.argwhere(labels >= num_classes)[0]
        value = labels[tuple(bad)]
        raise ValueError(
            f"label {int(value)} at position {tuple(int(i) for i in bad)} "
            f"outside 0..{num_classes - 1}")
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float64)
    for c in range(num_classes):
        out[c][labels == c] = 1.0
    return out


def reconstruct_volume(per_slice_probs: list[np.ndarray],
                       original: CtVolume) -> LabelVolume:
    """Assemble slice-wise class probabilities into a label volume aligned
    with the original CT grid.

    Per-slice argmax over the class axis (ties take the lowest class id),
    then nearest-neighbour upscale back to the original in-plane size.
    """
    z, h, w = original.shape
    if len(per_slice_probs) != z:
        raise ValueError(
            f"got {len(per_slice_probs)} slice predictions for a volume of "
            f"{z} slices")
    labels = np.stack([np.argmax(np.asarray(p), axis=0).astype(np.uint8)
                       for p in per_slice_probs])
    if labels.shape[1:] != (h, w):
        iy = _nearest_axis(labels.shape[1], h)
        ix = _nearest_axis(labels.shape[2], w)
        labels = labels[:, iy][:, :, ix]
    return LabelVolume(np.ascontiguousarray(labels), original.spacing,
                       original.origin)


# ---------------------------------------------------------------------------
# dataset manifest


def write_manifest(cases: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"cases": cases}, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> list[dict]:
    """Load case entries {id, ct_path, label_path}; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cases = payload["cases"] if isinstance(payload, dict) else payload
    resolved = []
    for case in cases:
        entry = dict(case)
        for key in ("ct_path", "label_path"):
            if key in entry and entry[key] is not None:
                p = Path(entry[key])
                entry[key] = str(p if p.is_absolute() else path.parent / p)
        resolved.append(entry)
    return resolved
