"""Minimal single-file NIfTI-1 (.nii) reader/writer and voxel flattening.

Only uncompressed ``n+1`` files with float32, float64, int16 or uint16
payloads are read. Files are written as float32 with the affine stored in
the sform.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .acquisition import AcquisitionScheme
from .simulator import VoxelDataset

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
DTYPES = {16: "f4", 64: "f8", 4: "i2", 512: "u2"}
BITPIX = {16: 32, 64: 64, 4: 16, 512: 16}


class NiftiError(ValueError):
    pass


@dataclass
class Volume:
    """3-D ``(H, W, D)`` or 4-D ``(H, W, D, T)`` image with a voxel-to-world affine."""

    data: np.ndarray
    affine: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim not in (3, 4) or min(self.data.shape) < 1:
            raise NiftiError(f"volume must be 3-D or 4-D with positive dims, got {self.data.shape}")
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def spatial_shape(self) -> tuple:
        return tuple(self.data.shape[:3])

    @property
    def T(self) -> int:
        return self.data.shape[3] if self.data.ndim == 4 else 1


Volume4D = Volume
Volume3D = Volume


def _quaternion_affine(b, c, d, qfac, pixdim, offsets) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    zooms = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = R * zooms
    aff[:3, 3] = offsets
    return aff


def read_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 image."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiError("header/image pair (.hdr/.img) files are not supported")
    if magic != b"n+1\x00":
        raise NiftiError(f"bad magic {magic!r}")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    dim = unpack("8h", 40)
    datatype = unpack("h", 70)[0]
    pixdim = unpack("8f", 76)
    vox_offset = int(unpack("f", 108)[0])
    slope, inter = unpack("2f", 112)
    qform_code, sform_code = unpack("2h", 252)
    quat = unpack("6f", 256)
    srows = unpack("12f", 280)

    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"dim[0] = {ndim}; only 3-D and 4-D images are supported")
    shape = tuple(int(v) for v in dim[1:ndim + 1])
    if ndim == 4 and shape[3] == 1:
        shape = shape[:3] + (1,)
    if min(shape) < 1:
        raise NiftiError(f"non-positive dimension in {shape}")
    if datatype not in DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    dtype = np.dtype(endian + DTYPES[datatype])
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if vox_offset < HEADER_SIZE or len(raw) < vox_offset + nbytes:
        raise NiftiError("truncated image payload")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if dtype.kind == "f" and (slope == 0 or (slope == 1 and inter == 0)):
        data = data.astype(dtype.newbyteorder("="))
    else:
        scale = slope if slope != 0 else 1.0
        data = data.astype(np.float64) * scale + (inter if slope != 0 else 0.0)

    zooms = tuple(abs(float(p)) for p in pixdim[1:4])
    if sform_code > 0:
        aff = np.eye(4)
        aff[:3, :] = np.array(srows, dtype=np.float64).reshape(3, 4)
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        aff = _quaternion_affine(*quat[:3], qfac, zooms, quat[3:])
    else:
        aff = np.diag(list(zooms) + [1.0])
    return Volume(data, aff, zooms)


def write_nifti(volume: Volume, path, endian: str = "<") -> Path:
    """Write ``volume`` as a float32 single-file NIfTI-1 image."""
    if endian not in ("<", ">"):
        raise ValueError("endian must be '<' or '>'")
    data = np.asarray(volume.data)
    shape = data.shape
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    zooms = list(volume.voxel_size)
    pixdim = [1.0] + zooms + [1.0] * 4

    hdr = bytearray(VOX_OFFSET)

    def pack(fmt, offset, *values):
        struct.pack_into(endian + fmt, hdr, offset, *values)

    pack("i", 0, HEADER_SIZE)
    pack("8h", 40, *dim)
    pack("h", 70, 16)
    pack("h", 72, 32)
    pack("8f", 76, *pixdim)
    pack("f", 108, float(VOX_OFFSET))
    pack("2f", 112, 1.0, 0.0)
    pack("B", 123, 2 | 8)                      # mm, seconds
    pack("2h", 252, 0, 1)
    pack("12f", 280, *np.asarray(volume.affine[:3, :], dtype=np.float64).ravel())
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(data, dtype=np.dtype(endian + "f4")).tobytes(order="F")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(hdr) + payload)
    return path


# --------------------------------------------------------------------------
# Masks and flattening
# --------------------------------------------------------------------------

@dataclass
class VoxelMask:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ValueError("mask must be 3-D")

    @property
    def indices(self) -> np.ndarray:
        """``(N, 3)`` voxel coordinates in row order."""
        return np.argwhere(self.mask)

    @property
    def n_voxels(self) -> int:
        return int(self.mask.sum())

    def flatten(self, data: np.ndarray) -> np.ndarray:
        """``(H, W, D[, T])`` array -> ``(N[, T])`` rows for masked voxels."""
        return data[self.mask]

    def unflatten(self, rows, fill: float = 0.0) -> np.ndarray:
        rows = np.asarray(rows)
        out = np.full(self.mask.shape + rows.shape[1:], fill, dtype=np.float64)
        out[self.mask] = rows
        return out


def read_mask(path) -> VoxelMask:
    vol = read_nifti(path)
    data = vol.data if vol.data.ndim == 3 else vol.data[..., 0]
    return VoxelMask(data != 0)


def b0_mean(volume: Volume, scheme: AcquisitionScheme) -> np.ndarray:
    return volume.data[..., scheme.b0_mask].astype(np.float64).mean(axis=-1)


def threshold_mask(volume: Volume, scheme: AcquisitionScheme, fraction: float = 0.05) -> VoxelMask:
    """Voxels whose mean b=0 signal exceeds ``fraction`` of the maximum."""
    m = b0_mean(volume, scheme)
    return VoxelMask(m > fraction * m.max())


def normalize_and_flatten(volume: Volume, scheme: AcquisitionScheme,
                          mask: Optional[VoxelMask] = None) -> VoxelDataset:
    """Divide each voxel by its mean b=0 signal and flatten the masked voxels.

    Voxels whose b=0 mean is not positive are removed from the mask; the
    count is stored in ``dataset.meta['dropped_voxels']``.
    """
    if volume.data.ndim != 4 or volume.T != scheme.T:
        raise ValueError(f"volume has {volume.T} measurements, scheme has {scheme.T}")
    if mask is None:
        mask = threshold_mask(volume, scheme)
    if mask.mask.shape != volume.spatial_shape:
        raise ValueError(f"mask shape {mask.mask.shape} does not match volume {volume.spatial_shape}")
    ref = b0_mean(volume, scheme)
    keep = mask.mask & (ref > 0)
    dropped = int(mask.n_voxels - keep.sum())
    if dropped:
        logger.warning("dropped %d masked voxels with non-positive b=0 signal", dropped)
    if not keep.any():
        raise ValueError("mask is empty after removing voxels without b=0 signal")
    final = VoxelMask(keep)
    signals = final.flatten(volume.data).astype(np.float64) / ref[keep][:, None]
    signals = np.clip(signals, 1e-6, 10.0)
    return VoxelDataset(signals, scheme, indices=final.indices,
                        spatial_shape=volume.spatial_shape, affine=volume.affine,
                        meta={"dropped_voxels": dropped, "voxel_size": list(volume.voxel_size)})


def write_parameter_maps(params: np.ndarray, names, dataset: VoxelDataset, directory,
                         prefix: str = "") -> list[Path]:
    """One float32 NIfTI per parameter; voxels outside the fitted set are zero."""
    if dataset.indices is None or dataset.spatial_shape is None:
        raise ValueError("dataset carries no spatial indices")
    mask = np.zeros(dataset.spatial_shape, dtype=bool)
    idx = tuple(dataset.indices.T)
    mask[idx] = True
    affine = dataset.affine if dataset.affine is not None else np.eye(4)
    zooms = tuple(dataset.meta.get("voxel_size", np.linalg.norm(affine[:3, :3], axis=0)))
    out = []
    for j, name in enumerate(names):
        vol = np.zeros(dataset.spatial_shape)
        vol[idx] = params[:, j]
        out.append(write_nifti(Volume(vol, affine, zooms), Path(directory) / f"{prefix}{name}.nii"))
    return out
