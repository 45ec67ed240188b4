"""Volume I/O, preprocessing, window extraction and synthetic phantoms.

Volumes are scalar fields on an anisotropic grid: in-plane spacing is
uniform while the out-of-plane slice thickness varies per case, which is the
data pathology the segmentation model is built to survive.  Voxels are
stored slice-major as ``(Z, Y, X)``; label volumes carry {0 background,
1 organ, 2 lesion}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SVOL_MAGIC = "SVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class DataError(Exception):
    """Malformed file or inconsistent dataset content."""


@dataclass
class Volume:
    """3D scalar field with physical spacing in mm per axis (sx, sy, sz)."""

    voxels: np.ndarray  # (Z, Y, X)
    spacing: tuple

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.voxels.dtype == np.uint8 and self.voxels.max(initial=0) > 2:
            raise DataError("label volumes must only contain values 0..2")

    @property
    def dims(self):
        z, y, x = self.voxels.shape
        return (x, y, z)


def write_svol(volume: Volume, path):
    """One-line text header plus raw little-endian voxels in x-fastest order."""
    if volume.voxels.dtype == np.uint8:
        dtype_tag, data = "u8", volume.voxels
    else:
        dtype_tag, data = "f32", np.ascontiguousarray(volume.voxels, dtype="<f4")
    x, y, z = volume.dims
    sx, sy, sz = volume.spacing
    header = f"{SVOL_MAGIC} dims={x},{y},{z} spacing={sx!r},{sy!r},{sz!r} dtype={dtype_tag}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_svol(path) -> Volume:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        payload = fh.read()
    fields = header.split()
    if not fields or fields[0] != SVOL_MAGIC:
        raise DataError(f"{path}: bad magic, expected {SVOL_MAGIC}")
    kv = dict(f.split("=", 1) for f in fields[1:])
    try:
        x, y, z = (int(v) for v in kv["dims"].split(","))
        spacing = tuple(float(v) for v in kv["spacing"].split(","))
        dtype_tag = kv["dtype"]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed header {header!r}") from exc
    if dtype_tag not in _DTYPES:
        raise DataError(f"{path}: unknown dtype {dtype_tag!r}")
    dtype = _DTYPES[dtype_tag]
    expected = x * y * z * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(z, y, x).copy()
    return Volume(voxels=voxels, spacing=spacing)


# -- preprocessing ------------------------------------------------------------------


def hu_window(volume: Volume, lo=-200.0, hi=250.0) -> Volume:
    """Clamp intensities to [lo, hi] and rescale linearly onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    v = np.clip(volume.voxels.astype(np.float32), lo, hi)
    out = (v - np.float32(lo)) / np.float32(hi - lo)
    return Volume(voxels=out, spacing=volume.spacing)


def resample_z(volume: Volume, target_thickness_mm: float) -> Volume:
    """Resample along z onto a node-centered grid with the target thickness.

    Slice k sits at physical z = k * sz; endpoints are preserved.  Intensity
    volumes interpolate linearly, label volumes by nearest neighbor (ties
    round toward the higher index).
    """
    if target_thickness_mm <= 0:
        raise ValueError("target thickness must be positive")
    sz = volume.spacing[2]
    if target_thickness_mm == sz:
        return Volume(voxels=volume.voxels.copy(), spacing=volume.spacing)
    nz = volume.voxels.shape[0]
    n_new = int(np.floor((nz - 1) * sz / target_thickness_mm + 1e-9)) + 1
    pos = np.clip(np.arange(n_new) * (target_thickness_mm / sz), 0.0, nz - 1.0)
    spacing = (volume.spacing[0], volume.spacing[1], float(target_thickness_mm))
    if volume.voxels.dtype == np.uint8:
        idx = np.clip(np.floor(pos + 0.5).astype(np.intp), 0, nz - 1)
        return Volume(voxels=volume.voxels[idx].copy(), spacing=spacing)
    k0 = np.minimum(np.floor(pos).astype(np.intp), max(nz - 2, 0))
    k1 = np.minimum(k0 + 1, nz - 1)
    w = (pos - k0)[:, None, None]
    vox = volume.voxels.astype(np.float64)
    out = (vox[k0] * (1.0 - w) + vox[k1] * w).astype(np.float32)
    return Volume(voxels=out, spacing=spacing)


def preprocess(intensity: Volume, lo=-200.0, hi=250.0, resample_to_mm=None) -> Volume:
    """Window to [0, 1]; optionally resample z when thicker than the target."""
    out = hu_window(intensity, lo, hi)
    if resample_to_mm is not None and out.spacing[2] > resample_to_mm:
        out = resample_z(out, resample_to_mm)
    return out


# -- training windows -----------------------------------------------------------------


@dataclass
class TrainingSample:
    """One model input: ``c_in`` intensity slices and the central ``c_out`` label slices."""

    stack: np.ndarray  # (c_in, Y, X) float32
    labels: np.ndarray  # (c_out, Y, X) uint8
    z0: int  # volume z index of the first predicted slice

    def one_hot(self, classes=3, dtype=np.float32):
        eye = np.eye(classes, dtype=dtype)
        return np.moveaxis(eye[self.labels], -1, 1)


def extract_windows(intensity, labels, c_in, stride=1, pad=True):
    """Consecutive ``c_in``-slice stacks walked along z with the given stride.

    With ``pad=True`` (full-volume inference) one edge-replicated slice is
    added per end so every original slice receives at least one prediction.
    """
    ivox = intensity.voxels if isinstance(intensity, Volume) else np.asarray(intensity)
    lvox = labels.voxels if isinstance(labels, Volume) else np.asarray(labels)
    if ivox.shape != lvox.shape:
        raise DataError(f"intensity {ivox.shape} and labels {lvox.shape} disagree")
    if c_in < 3 or c_in % 2 == 0:
        raise ValueError(f"c_in must be an odd integer >= 3, got {c_in}")
    c_out = c_in - 2
    margin = (c_in - c_out) // 2
    if pad:
        ivox = np.pad(ivox, ((margin, margin), (0, 0), (0, 0)), mode="edge")
        lvox = np.pad(lvox, ((margin, margin), (0, 0), (0, 0)), mode="edge")
    else:
        margin = 0
    nz = ivox.shape[0]
    if nz < c_in:
        raise DataError(f"volume has {nz} slices after padding, need at least {c_in}")
    samples = []
    for start in range(0, nz - c_in + 1, stride):
        samples.append(
            TrainingSample(
                stack=np.ascontiguousarray(ivox[start : start + c_in], dtype=np.float32),
                labels=np.ascontiguousarray(lvox[start + 1 : start + 1 + c_out]),
                z0=start + 1 - margin,
            )
        )
    return samples


def coverage_counts(nz, c_in, stride=1):
    """Per-slice prediction multiplicity for padded stride-``stride`` windowing."""
    c_out = c_in - 2
    counts = np.zeros(nz, dtype=int)
    nz_padded = nz + 2
    for start in range(0, nz_padded - c_in + 1, stride):
        for k in range(c_out):
            z = start + k
            if 0 <= z < nz:
                counts[z] += 1
    return counts.tolist()


# -- resizing + augmentation ------------------------------------------------------------


def _axis_coeffs(n_out, n_in, factor):
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    return pos, i0, i1, w1


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-center bilinear resize of the trailing two axes."""
    h, w = img.shape[-2:]
    _, ri0, ri1, rw1 = _axis_coeffs(out_h, h, out_h / h)
    _, ci0, ci1, cw1 = _axis_coeffs(out_w, w, out_w / w)
    x = img.astype(np.float64)
    rows = x[..., ri0, :] * (1.0 - rw1)[:, None] + x[..., ri1, :] * rw1[:, None]
    out = rows[..., ci0] * (1.0 - cw1) + rows[..., ci1] * cw1
    return out.astype(np.float32)


def resize_nearest(img, out_h, out_w):
    """Nearest-neighbor resize of the trailing two axes (ties round up)."""
    h, w = img.shape[-2:]
    rpos, _, _, _ = _axis_coeffs(out_h, h, out_h / h)
    cpos, _, _, _ = _axis_coeffs(out_w, w, out_w / w)
    ri = np.clip(np.floor(rpos + 0.5).astype(np.intp), 0, h - 1)
    ci = np.clip(np.floor(cpos + 0.5).astype(np.intp), 0, w - 1)
    return img[..., ri, :][..., ci]


def augment(sample: TrainingSample, rng, crop=64, scale_range=(0.8, 1.2)) -> TrainingSample:
    """Random in-plane scale then random in-plane crop; z untouched."""
    h, w = sample.stack.shape[-2:]
    u = rng.uniform(*scale_range)
    sh, sw = int(round(h * u)), int(round(w * u))
    if sh < crop or sw < crop:
        raise ValueError(f"crop {crop} exceeds scaled extents {sh}x{sw}")
    stack = resize_bilinear(sample.stack, sh, sw)
    labels = resize_nearest(sample.labels, sh, sw)
    oy = int(rng.integers(0, sh - crop + 1))
    ox = int(rng.integers(0, sw - crop + 1))
    return TrainingSample(
        stack=stack[:, oy : oy + crop, ox : ox + crop],
        labels=np.ascontiguousarray(labels[:, oy : oy + crop, ox : ox + crop]),
        z0=sample.z0,
    )


# -- synthetic phantoms -------------------------------------------------------------------


@dataclass
class PhantomConfig:
    """Anisotropic synthetic-volume generator settings.

    Volumes are built on a fine 1 mm z-grid, then decimated by averaging
    groups of ``t`` slices (labels by majority vote) with ``t`` drawn from
    ``thickness_choices`` -- a stand-in for thick-slice CT acquisition.
    """

    dims: tuple = (80, 80, 40)  # (X, Y, Z_fine)
    in_plane_spacing: float = 1.0
    thickness_choices: tuple = (1, 2, 4)
    organ_axes_frac: tuple = ((0.30, 0.40), (0.30, 0.40), (0.34, 0.46))
    center_jitter_frac: float = 0.05
    tumor_count: tuple = (2, 4)
    tumor_radius_mm: tuple = (3.5, 7.5)
    tumor_margin_mm: float = 2.0
    intensity_means: tuple = (-60.0, 120.0, 30.0)  # background, organ, lesion
    noise_sigma: float = 18.0
    seed: int = 0

    def validate(self):
        if not self.thickness_choices:
            raise ValueError("thickness_choices must be non-empty")
        if any(self.dims[2] % int(t) for t in self.thickness_choices):
            raise ValueError("fine z extent must be divisible by every thickness choice")
        if self.tumor_radius_mm[0] > self.tumor_radius_mm[1]:
            raise ValueError("bad tumor radius range")


@dataclass
class Phantom:
    """Generated case: intensity + labels on the acquired (decimated) grid."""

    intensity: Volume
    label: Volume
    thickness_mm: float
    organ_center_mm: np.ndarray
    organ_axes_mm: np.ndarray
    tumors: list = field(default_factory=list)  # (center_mm, radius_mm) pairs


def _majority_labels(labels_fine, t, classes=3):
    z, y, x = labels_fine.shape
    groups = labels_fine.reshape(z // t, t, y, x)
    counts = np.stack([(groups == c).sum(axis=1) for c in range(classes)])
    # argmax ties resolve toward the lower label
    return counts.argmax(axis=0).astype(np.uint8)


def gen_phantom(config: PhantomConfig) -> Phantom:
    """One random anisotropic case: ellipsoid organ with interior lesions.

    Fully determined by ``config.seed``; lesion spheres are rejected until
    they fit inside the organ with the configured margin.
    """
    config.validate()
    geom_rng = np.random.default_rng([config.seed, 0])
    noise_rng = np.random.default_rng([config.seed, 1])
    thick_rng = np.random.default_rng([config.seed, 2])

    nx, ny, nz = config.dims
    s = config.in_plane_spacing
    ext = np.array([nx * s, ny * s, nz * 1.0])
    xs = (np.arange(nx) + 0.5) * s
    ys = (np.arange(ny) + 0.5) * s
    zs = np.arange(nz) + 0.5

    center = ext / 2 + geom_rng.uniform(-1, 1, size=3) * config.center_jitter_frac * ext
    axes = np.array([geom_rng.uniform(lo, hi) * e for (lo, hi), e in zip(config.organ_axes_frac, ext)])

    dx = ((xs - center[0]) / axes[0]) ** 2
    dy = ((ys - center[1]) / axes[1]) ** 2
    dz = ((zs - center[2]) / axes[2]) ** 2
    organ = (dz[:, None, None] + dy[None, :, None] + dx[None, None, :]) <= 1.0

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    labels[organ] = 1

    n_tumors = int(geom_rng.integers(config.tumor_count[0], config.tumor_count[1] + 1))
    min_axis = axes.min()
    tumors = []
    if (config.tumor_radius_mm[0] + config.tumor_margin_mm) / min_axis >= 1.0:
        raise ValueError(
            f"tumor radius {config.tumor_radius_mm[0]:.1f} mm cannot fit inside organ axes {axes}"
        )
    for _ in range(n_tumors):
        for attempt in range(2000):
            radius = geom_rng.uniform(*config.tumor_radius_mm)
            reach = (radius + config.tumor_margin_mm) / min_axis
            p = center + geom_rng.uniform(-1, 1, size=3) * axes
            ell = np.sqrt((((p - center) / axes) ** 2).sum())
            if reach < 1.0 and ell + reach <= 1.0:
                break
        else:
            raise ValueError("could not place a tumor inside the organ after 2000 attempts")
        rx = ((xs - p[0]) / radius) ** 2
        ry = ((ys - p[1]) / radius) ** 2
        rz = ((zs - p[2]) / radius) ** 2
        sphere = (rz[:, None, None] + ry[None, :, None] + rx[None, None, :]) <= 1.0
        labels[sphere] = 2
        tumors.append((p, radius))

    means = np.array(config.intensity_means, dtype=np.float64)
    intensity = means[labels] + noise_rng.normal(0.0, config.noise_sigma, size=labels.shape)

    t = int(thick_rng.choice(np.asarray(config.thickness_choices)))
    if t > 1:
        intensity = intensity.reshape(nz // t, t, ny, nx).mean(axis=1)
        labels = _majority_labels(labels, t)
    return Phantom(
        intensity=Volume(voxels=intensity.astype(np.float32), spacing=(s, s, float(t))),
        label=Volume(voxels=labels, spacing=(s, s, float(t))),
        thickness_mm=float(t),
        organ_center_mm=center,
        organ_axes_mm=axes,
        tumors=tumors,
    )
