"""Synthetic observer-camera frames of a quadrotor target via a pinhole model.

The camera looks along the observer's +x body axis; image u grows to the
body-frame right (-y), image v grows downward (-z).  The focal length (72 px
at 160 px width) is fixed by solving the reported apparent sizes of the 10 cm
target at 0.4 m and 1.5 m.  Rendering rasterizes a symmetric quad silhouette
(body ellipse plus four rotor discs) with 8x8 supersampling so blob-based
inversion recovers subpixel extents from gray mass.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pose import Pose, relative_pose


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float = 72.0
    cx: float = 80.0
    cy: float = 80.0
    width: int = 160
    height: int = 160

    def __post_init__(self) -> None:
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside frame")


@dataclass(frozen=True)
class TargetModel:
    width_m: float = 0.10
    height_m: float = 0.044


# Silhouette in normalized box coordinates (tx right, ty down, both [0, 1]):
# a body ellipse with a rotor disc near each corner; symmetric about both
# axes so the silhouette centroid coincides with the projected center.
_BODY = (0.5, 0.5, 0.32, 0.28)
_ROTOR_R = 0.17
_ROTORS = ((0.17, 0.2), (0.83, 0.2), (0.17, 0.8), (0.83, 0.8))

RENDER_CONTRAST = 100
FLAT_BACKGROUND = 170
_SUPERSAMPLE = 8


def _silhouette_mask(tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    cx, cy, ax, ay = _BODY
    inside = ((tx - cx) / ax) ** 2 + ((ty - cy) / ay) ** 2 <= 1.0
    for rx, ry in _ROTORS:
        inside |= (tx - rx) ** 2 + (ty - ry) ** 2 <= _ROTOR_R**2
    return inside


@functools.lru_cache(maxsize=1)
def silhouette_fill_factor() -> float:
    """Fraction of the bounding box covered by the silhouette."""
    n = 1536
    grid = (np.arange(n) + 0.5) / n
    tx, ty = np.meshgrid(grid, grid)
    return float(_silhouette_mask(tx, ty).mean())


@dataclass(frozen=True)
class Projection:
    center_u: float
    center_v: float
    width_px: float
    height_px: float


def project(
    observer: Pose,
    target: Pose,
    cam: CameraIntrinsics = CameraIntrinsics(),
    model: TargetModel = TargetModel(),
) -> Projection | None:
    """Pinhole projection of the target's physical extent; None if out of view."""
    rel = relative_pose(observer, target)
    if rel.x <= 0.02:
        return None
    u = cam.cx - cam.focal_px * rel.y / rel.x
    v = cam.cy - cam.focal_px * rel.z / rel.x
    w = cam.focal_px * model.width_m / rel.x
    h = cam.focal_px * model.height_m / rel.x
    if u + w / 2 < 0 or u - w / 2 >= cam.width or v + h / 2 < 0 or v - h / 2 >= cam.height:
        return None
    return Projection(u, v, w, h)


def _background(kind: str, cam: CameraIntrinsics, seed: int) -> np.ndarray:
    if kind == "flat":
        return np.full((cam.height, cam.width), float(FLAT_BACKGROUND))
    if kind == "gradient":
        col = np.linspace(130.0, 210.0, cam.height)
        return np.repeat(col[:, None], cam.width, axis=1)
    if kind == "textured":
        rng = np.random.Generator(np.random.PCG64(seed))
        coarse = rng.uniform(120.0, 220.0, size=(8, 8))
        zoom = (cam.height / 8, cam.width / 8)
        return ndimage.zoom(coarse, zoom, order=1, mode="nearest")
    raise ValueError(f"unknown background kind {kind!r}")


def render(
    observer: Pose,
    target: Pose,
    cam: CameraIntrinsics = CameraIntrinsics(),
    background: str = "flat",
    seed: int = 0,
    model: TargetModel = TargetModel(),
) -> np.ndarray:
    """160x160 uint8 frame with the target silhouette darker than background."""
    frame = _background(background, cam, seed)
    proj = project(observer, target, cam, model)
    if proj is not None:
        u0 = proj.center_u - proj.width_px / 2
        v0 = proj.center_v - proj.height_px / 2
        j0 = max(int(math.floor(u0)), 0)
        j1 = min(int(math.ceil(u0 + proj.width_px)) + 1, cam.width)
        i0 = max(int(math.floor(v0)), 0)
        i1 = min(int(math.ceil(v0 + proj.height_px)) + 1, cam.height)
        if j1 > j0 and i1 > i0:
            s = _SUPERSAMPLE
            sub = (np.arange((j1 - j0) * s) + 0.5) / s + j0
            subv = (np.arange((i1 - i0) * s) + 0.5) / s + i0
            tx = (sub - u0) / proj.width_px
            ty = (subv - v0) / proj.height_px
            txg, tyg = np.meshgrid(tx, ty)
            valid = (txg >= 0) & (txg <= 1) & (tyg >= 0) & (tyg <= 1)
            inside = _silhouette_mask(txg, tyg) & valid
            cover = inside.reshape(i1 - i0, s, j1 - j0, s).mean(axis=(1, 3))
            frame[i0:i1, j0:j1] -= RENDER_CONTRAST * cover
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Blob detection and pinhole inversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlobEstimate:
    center_u: float
    center_v: float
    width_px: float
    height_px: float
    extent_w: int
    extent_h: int
    area_eff: float


def detect_blob(
    frame: np.ndarray,
    contrast: float = RENDER_CONTRAST,
    model: TargetModel = TargetModel(),
) -> BlobEstimate | None:
    """Locate the darkest compact blob and measure its subpixel extent from
    gray mass, assuming the render photometry (known nominal contrast).

    Detection runs on a high-passed image (local mean minus pixel) so smooth
    shading such as vignetting or background gradients cannot masquerade as
    the target; photometry then re-estimates the local background from a ring
    around the blob to stay unbiased.
    """
    img = frame.astype(np.float64)
    smooth = ndimage.uniform_filter(img, size=31, mode="nearest")
    depth0 = smooth - img
    mask = depth0 > 0.25 * contrast
    labels, count = ndimage.label(mask)
    if count == 0:
        return None
    masses = ndimage.sum_labels(np.maximum(depth0, 0.0), labels, index=np.arange(1, count + 1))
    best = int(np.argmax(masses)) + 1
    rows, cols = np.nonzero(labels == best)
    extent_w = int(cols.max() - cols.min() + 1)
    extent_h = int(rows.max() - rows.min() + 1)

    h, w = frame.shape
    if rows.min() == 0 or rows.max() == h - 1 or cols.min() == 0 or cols.max() == w - 1:
        return None  # clipped at the frame edge: extent not measurable
    if extent_w < 2 or extent_h < 1:
        return None
    r0 = max(rows.min() - 2, 0)
    r1 = min(rows.max() + 3, h)
    c0 = max(cols.min() - 2, 0)
    c1 = min(cols.max() + 3, w)
    ring_r0 = max(rows.min() - 8, 0)
    ring_r1 = min(rows.max() + 9, h)
    ring_c0 = max(cols.min() - 8, 0)
    ring_c1 = min(cols.max() + 9, w)
    ring = np.ones((ring_r1 - ring_r0, ring_c1 - ring_c0), dtype=bool)
    ring[r0 - ring_r0 : r1 - ring_r0, c0 - ring_c0 : c1 - ring_c0] = False
    ring_px = img[ring_r0:ring_r1, ring_c0:ring_c1][ring]
    bg = float(np.median(ring_px)) if ring_px.size else float(np.median(img))

    window = bg - img[r0:r1, c0:c1]  # signed: zero-mean noise cancels in the sum
    area_eff = float(window.sum()) / contrast
    if area_eff < 1.5:  # far smaller than the target can appear: not a drone
        return None
    weights = np.maximum(window, 0.0)
    jj, ii = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    center_u = float((weights * jj).sum() / weights.sum())
    center_v = float((weights * ii).sum() / weights.sum())
    aspect = model.height_m / model.width_m
    width_px = math.sqrt(area_eff / (silhouette_fill_factor() * aspect))
    return BlobEstimate(
        center_u, center_v, width_px, aspect * width_px, extent_w, extent_h, area_eff
    )


def estimate_pose_from_blob(
    frame: np.ndarray,
    cam: CameraIntrinsics = CameraIntrinsics(),
    model: TargetModel = TargetModel(),
    contrast: float = RENDER_CONTRAST,
) -> Pose | None:
    """Invert the pinhole model from a detected blob; phi is unobservable
    from the silhouette and reported as 0."""
    blob = detect_blob(frame, contrast, model)
    if blob is None:
        return None
    x = cam.focal_px * model.width_m / blob.width_px
    y = -(blob.center_u - cam.cx) * x / cam.focal_px
    z = -(blob.center_v - cam.cy) * x / cam.focal_px
    return Pose(x, y, z, 0.0)


# ---------------------------------------------------------------------------
# Augmentation pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for the randomized photometric pipeline; each stage fires with
    the configured probability, in a fixed order (exposure, gamma, dynamic
    range, blur, vignette, noise)."""

    exposure_range: tuple[float, float] = (0.6, 1.6)
    gamma_range: tuple[float, float] = (0.6, 1.6)
    dynamic_range: tuple[float, float] = (0.5, 1.0)
    blur_kernels: tuple[int, ...] = (1, 3, 5)
    vignette_range: tuple[float, float] = (0.0, 0.4)
    noise_sigma_range: tuple[float, float] = (0.0, 8.0)
    probability: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(probability=0.0)

    def replace(self, **kw) -> "AugmentationConfig":
        return replace(self, **kw)


def augment(frame: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the photometric pipeline; deterministic given the rng state."""
    if frame.dtype != np.uint8:
        raise TypeError("augment expects an 8-bit grayscale frame")
    x = frame.astype(np.float64)
    if rng.random() < cfg.probability:
        x = x * rng.uniform(*cfg.exposure_range)
    if rng.random() < cfg.probability:
        gamma = rng.uniform(*cfg.gamma_range)
        x = 255.0 * np.power(np.clip(x, 0.0, 255.0) / 255.0, gamma)
    if rng.random() < cfg.probability:
        x = 128.0 + (x - 128.0) * rng.uniform(*cfg.dynamic_range)
    if rng.random() < cfg.probability:
        k = int(rng.choice(cfg.blur_kernels))
        if k > 1:
            x = ndimage.uniform_filter(x, size=k, mode="nearest")
    if rng.random() < cfg.probability:
        strength = rng.uniform(*cfg.vignette_range)
        h, w = x.shape
        iy, ix = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
        r2 = (iy**2 + ix**2) / (((h - 1) / 2) ** 2 + ((w - 1) / 2) ** 2)
        x = x * (1.0 - strength * r2)
    if rng.random() < cfg.probability:
        sigma = rng.uniform(*cfg.noise_sigma_range)
        x = x + rng.normal(0.0, sigma, size=x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = (
    ["frame"]
    + [f"obs_{k}" for k in ("x", "y", "z", "phi")]
    + [f"tgt_{k}" for k in ("x", "y", "z", "phi")]
    + [f"rel_{k}" for k in ("x", "y", "z", "phi")]
)


@dataclass(frozen=True)
class ManifestRow:
    frame: str
    observer: Pose
    target: Pose
    relative: Pose


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(MANIFEST_COLUMNS)
    for r in rows:
        writer.writerow(
            [r.frame]
            + [repr(v) for v in r.observer.as_tuple()]
            + [repr(v) for v in r.target.as_tuple()]
            + [repr(v) for v in r.relative.as_tuple()]
        )
    Path(path).write_text(buf.getvalue(), newline="")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows: list[ManifestRow] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected manifest header")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}: line {lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from e
            rows.append(
                ManifestRow(
                    frame=rec[0],
                    observer=Pose(*vals[0:4]),
                    target=Pose(*vals[4:8]),
                    relative=Pose(*vals[8:12]),
                )
            )
    return rows


def generate_dataset(
    pose_pairs: list[tuple[Pose, Pose]],
    out_dir: str | Path,
    cam: CameraIntrinsics = CameraIntrinsics(),
    background: str = "flat",
    seed: int = 0,
    augmentation: AugmentationConfig | None = None,
) -> Path:
    """Render frames for (observer, target) pose pairs, write PGMs plus a
    manifest CSV, and return the manifest path."""
    from .qnn.imageio import write_pgm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    rows: list[ManifestRow] = []
    for k, (obs, tgt) in enumerate(pose_pairs):
        frame = render(obs, tgt, cam, background=background, seed=seed + k)
        if augmentation is not None:
            frame = augment(frame, augmentation, rng)
        name = f"frame_{k:05d}.pgm"
        write_pgm(out / name, frame)
        rows.append(ManifestRow(name, obs, tgt, relative_pose(obs, tgt)))
    manifest = out / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest
