"""Datasets: synthetic cardiac-like phantom pairs, medical volume ingestion,
on-disk caching and train/test splits."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DomainError, ShapeError
from .grid import Volume, warp

__all__ = [
    "PhantomSpec",
    "PhantomPair",
    "integrate_velocity",
    "generate_phantom_pair",
    "preprocess_volume",
    "split_dataset",
    "save_volume",
    "load_volume",
    "write_dataset",
    "read_manifest",
    "load_pairs",
    "PHANTOM_CLASSES",
]

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "diffreg-manifest/1"
# label ids: 1 left blood pool, 2 myocardium ring, 3 right chamber
PHANTOM_CLASSES = (1, 2, 3)


@dataclass(frozen=True)
class PhantomSpec:
    """Shape parameters for :func:`generate_phantom_pair`.

    ``amplitude`` is the largest velocity magnitude in voxels; ``smoothness``
    is the Gaussian width of the velocity noise as a fraction of the smallest
    extent; ``contraction`` is the share of the velocity given to a radial
    squeeze around the left chamber.
    """

    extent: tuple[int, ...] = (32, 32)
    amplitude: float = 2.0
    smoothness: float = 0.15
    contraction: float = 0.5
    texture: float = 0.08
    squaring_steps: int = 7
    multiple_of: int = 4

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(int(n) for n in self.extent))
        if len(self.extent) not in (2, 3):
            raise ConfigError(f"need 2 or 3 axes, got {self.extent}", "phantom.extent")
        if any(n < 8 for n in self.extent):
            raise ConfigError(f"every axis needs at least 8 voxels, got {self.extent}", "phantom.extent")
        if self.multiple_of < 1 or any(n % self.multiple_of for n in self.extent):
            raise ConfigError(f"extent {self.extent} not divisible by {self.multiple_of}", "phantom.extent")
        if self.amplitude < 0:
            raise ConfigError(f"must be >= 0, got {self.amplitude}", "phantom.amplitude")
        if not 0 <= self.contraction <= 1:
            raise ConfigError(f"must lie in [0, 1], got {self.contraction}", "phantom.contraction")
        if self.squaring_steps < 0:
            raise ConfigError(f"must be >= 0, got {self.squaring_steps}", "phantom.squaring_steps")


@dataclass(frozen=True)
class PhantomPair:
    fixed: Volume
    moving: Volume
    fixed_labels: Volume
    moving_labels: Volume
    # moving = warp(fixed, ground_truth_field); inverse_field registers moving onto fixed
    ground_truth_field: torch.Tensor
    inverse_field: torch.Tensor = field(repr=False, default=None)


def integrate_velocity(velocity: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring.

    ``velocity`` is ``(B, D, *S)`` in voxels. The field is divided by
    ``2**steps`` and composed with itself ``steps`` times.
    """
    disp = velocity / (2 ** steps)
    for _ in range(steps):
        disp = disp + warp(disp, disp)
    return disp


def _normalized_axes(extent):
    return np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in extent], indexing="ij")


def _base_image(rng: np.random.Generator, spec: PhantomSpec):
    """Label map and intensity image of nested chamber shapes."""
    extent = spec.extent
    ndim = len(extent)
    axes = _normalized_axes(extent)
    # in-plane axes are the last two; a 3D phantom stacks slightly tapering sections
    centre = np.zeros(ndim)
    centre[-2:] = rng.uniform(-0.08, 0.08, size=2)
    r_pool = rng.uniform(0.26, 0.32)
    wall = rng.uniform(0.14, 0.18)
    elong = rng.uniform(0.9, 1.1)
    radii = np.ones(ndim)
    radii[-2:] = (elong, 1.0 / elong)
    if ndim == 3:
        radii[0] = 2.5

    def ellipse_dist(c, scale):
        return np.sqrt(sum(((a - ci) / (r * scale)) ** 2 for a, ci, r in zip(axes, c, radii)))

    d_lv = ellipse_dist(centre, 1.0)
    labels = np.zeros(extent, dtype=np.int64)
    body = ellipse_dist(centre, 0.85) <= 1.0
    rv_centre = centre.copy()
    angle = rng.uniform(0.75, 1.25) * math.pi
    offset = r_pool + wall + 0.1
    rv_centre[-2] += offset * math.sin(angle)
    rv_centre[-1] += offset * math.cos(angle)
    rv = ellipse_dist(rv_centre, rng.uniform(0.26, 0.32)) <= 1.0
    myo = d_lv <= (r_pool + wall)
    pool = d_lv <= r_pool
    labels[rv & ~myo] = 3
    labels[myo] = 2
    labels[pool] = 1

    image = np.full(extent, -1.0)
    image[body] = -0.4
    texture = ndimage.gaussian_filter(rng.standard_normal(extent), sigma=max(1.0, min(extent) * 0.08))
    texture /= np.abs(texture).max() + 1e-12
    image[body] += spec.texture * texture[body]
    image[labels == 3] = 0.55
    image[labels == 2] = 0.0
    image[labels == 1] = 0.8
    image = ndimage.gaussian_filter(image, sigma=0.6)
    return labels, np.clip(image, -1.0, 1.0), centre


def _velocity(rng: np.random.Generator, spec: PhantomSpec, centre) -> np.ndarray:
    extent = spec.extent
    ndim = len(extent)
    sigma = max(1.0, spec.smoothness * min(extent))
    noise = np.stack([ndimage.gaussian_filter(rng.standard_normal(extent), sigma=sigma, mode="reflect")
                      for _ in range(ndim)])
    noise /= np.sqrt((noise ** 2).sum(axis=0)).max() + 1e-12
    axes = _normalized_axes(extent)
    rel = np.stack([a - c for a, c in zip(axes, centre)])
    if ndim == 3:
        rel[0] = 0.0
    bump = np.exp(-(rel ** 2).sum(axis=0) / (2 * 0.35 ** 2))
    radial = rel * bump * rng.uniform(0.7, 1.0)
    radial /= np.sqrt((radial ** 2).sum(axis=0)).max() + 1e-12
    v = (1 - spec.contraction) * noise + spec.contraction * radial
    v /= np.sqrt((v ** 2).sum(axis=0)).max() + 1e-12
    return spec.amplitude * v


def generate_phantom_pair(seed: int, spec: PhantomSpec | None = None) -> PhantomPair:
    """Build a fixed/moving phantom pair related by a known diffeomorphism.

    Deterministic in ``seed``.
    """
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(seed)
    labels, image, centre = _base_image(rng, spec)
    v = torch.from_numpy(_velocity(rng, spec, centre)).unsqueeze(0)
    if spec.amplitude == 0:
        v = torch.zeros_like(v)
    disp = integrate_velocity(v, spec.squaring_steps)
    inverse = integrate_velocity(-v, spec.squaring_steps)

    img = torch.from_numpy(image)[None, None]
    lab = torch.from_numpy(labels).double()[None, None]
    moving = warp(img, disp)
    moving_lab = warp(lab, disp, mode="nearest")
    spacing = (1.0,) * len(spec.extent)
    return PhantomPair(
        fixed=Volume(img[0].float(), spacing),
        moving=Volume(moving[0].float(), spacing),
        fixed_labels=Volume(lab[0].float(), spacing, is_label=True),
        moving_labels=Volume(moving_lab[0].float(), spacing, is_label=True),
        ground_truth_field=disp[0].float(),
        inverse_field=inverse[0].float(),
    )


def endpoint_error(phi: torch.Tensor, pair: PhantomPair) -> float:
    """Mean Euclidean distance between a predicted field and the true inverse."""
    diff = phi.detach().reshape(pair.inverse_field.shape) - pair.inverse_field
    return float(diff.pow(2).sum(0).sqrt().mean())


def _resample_axis_positions(n: int, spacing: float, target: float) -> np.ndarray:
    m = int(math.floor((n - 1) * spacing / target + 1e-9)) + 1
    return np.arange(m) * (target / spacing)


def _crop_or_pad(arr: np.ndarray, extent, fill: float) -> np.ndarray:
    out = np.full(tuple(extent), fill, dtype=arr.dtype)
    src, dst = [], []
    for n, m in zip(arr.shape, extent):
        if n >= m:
            start = (n - m) // 2
            src.append(slice(start, start + m))
            dst.append(slice(0, m))
        else:
            start = (m - n) // 2
            src.append(slice(0, n))
            dst.append(slice(start, start + n))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def preprocess_volume(raw: Volume, target_spacing: Sequence[float], target_extent: Sequence[int]) -> Volume:
    """Resample to ``target_spacing``, centre crop/pad to ``target_extent``
    and min-max normalise intensities to [-1, 1].

    Label volumes are resampled by nearest neighbour and not normalised.
    Constant images map to -1.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    target_extent = tuple(int(n) for n in target_extent)
    if any(not s > 0 for s in target_spacing):
        raise DomainError(f"target spacing must be positive, got {target_spacing}")
    if len(target_spacing) != raw.ndim or len(target_extent) != raw.ndim:
        raise ShapeError(f"targets must have {raw.ndim} entries")
    order = 0 if raw.is_label else 1
    channels = []
    for chan in raw.data.detach().cpu().double().numpy():
        if tuple(raw.spacing) != target_spacing:
            pos = [_resample_axis_positions(n, s, t) for n, s, t in zip(chan.shape, raw.spacing, target_spacing)]
            coords = np.stack(np.meshgrid(*pos, indexing="ij"))
            chan = ndimage.map_coordinates(chan, coords, order=order, mode="nearest")
        chan = _crop_or_pad(chan, target_extent, fill=0.0 if raw.is_label else float(chan.min()))
        if not raw.is_label:
            lo, hi = chan.min(), chan.max()
            if hi - lo > 0:
                chan = np.clip(2.0 * (chan - lo) / (hi - lo) - 1.0, -1.0, 1.0)
            else:
                chan = np.full_like(chan, -1.0)
        channels.append(chan)
    data = torch.from_numpy(np.stack(channels)).float()
    return Volume(data, target_spacing, is_label=raw.is_label)


def split_dataset(pairs: Sequence, train_fraction: float = 0.9, seed: int = 0):
    """Seeded shuffle then split into ``(train, test)`` lists."""
    if len(pairs) == 0:
        raise DomainError("cannot split an empty dataset")
    if not 0 < train_fraction <= 1:
        raise DomainError(f"train fraction must lie in (0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = min(len(pairs), max(1, int(round(train_fraction * len(pairs)))))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    if not test:
        log.warning("split of %d pair(s) leaves the test set empty", len(pairs))
    return train, test


# --- on-disk format -------------------------------------------------------

def save_volume(vol: Volume, path) -> Path:
    """Write ``<path>.raw`` (little-endian float32) and a ``<path>.json`` sidecar."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    raw.write_bytes(vol.data.detach().cpu().numpy().astype("<f4").tobytes())
    meta = {"extent": list(vol.data.shape), "spacing": list(vol.spacing), "dtype": "<f4", "is_label": vol.is_label}
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")
    return raw


def load_volume(path, frame: int | None = None) -> Volume:
    """Read a cached ``.raw`` volume or a NIfTI file (``.nii``/``.nii.gz``).

    For 4D NIfTI data ``frame`` selects the time point.
    """
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _load_nifti(path, frame)
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
        buf = path.with_suffix(".raw").read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read volume {path}: {exc}") from None
    arr = np.frombuffer(buf, dtype=meta.get("dtype", "<f4")).reshape(meta["extent"])
    return Volume(torch.from_numpy(arr.astype(np.float32)), tuple(meta["spacing"]), bool(meta.get("is_label", False)))


def _load_nifti(path: Path, frame: int | None) -> Volume:
    try:
        import nibabel as nib
    except ImportError:
        raise ConfigError("reading NIfTI needs the optional 'nibabel' package", "data") from None
    img = nib.load(str(path))
    arr = np.asarray(img.dataobj, dtype=np.float64)
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    if arr.ndim == 4:
        if frame is None:
            raise ShapeError(f"{path} is 4D; pass a frame index")
        arr = arr[..., frame]
    elif arr.ndim != 3:
        raise ShapeError(f"{path}: expected a 3D or 4D volume, got {arr.ndim}D")
    is_label = bool(np.all(arr == np.round(arr))) and len(np.unique(arr)) <= 16
    return Volume(torch.from_numpy(arr).float()[None], spacing, is_label=is_label)


def write_dataset(out_dir, n_pairs: int, spec: PhantomSpec, seed: int = 0) -> dict:
    """Generate ``n_pairs`` phantoms under ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_pairs)
    entries = []
    for i, s in enumerate(seeds):
        pair = generate_phantom_pair(int(s), spec)
        pid = f"pair{i:04d}"
        entry = {"id": pid, "seed": int(s)}
        for key in ("fixed", "moving", "fixed_labels", "moving_labels"):
            save_volume(getattr(pair, key), out_dir / f"{pid}_{key}")
            entry[key] = f"{pid}_{key}.raw"
        for key, value in (("field", pair.ground_truth_field), ("inverse_field", pair.inverse_field)):
            save_volume(Volume(value, pair.fixed.spacing), out_dir / f"{pid}_{key}")
            entry[key] = f"{pid}_{key}.raw"
        entries.append(entry)
    spec_dict = asdict(spec)
    spec_dict["extent"] = list(spec.extent)
    manifest = {"format": MANIFEST_FORMAT, "seed": seed, "phantom": spec_dict, "classes": list(PHANTOM_CLASSES),
                "pairs": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"unsupported manifest format {manifest.get('format')!r}", "manifest.format")
    manifest["root"] = str(path.parent)
    return manifest


def load_pairs(manifest: dict) -> list[dict]:
    """Materialise manifest entries as dicts of ``(1, C, *S)`` tensors.

    Entries with file paths are read from disk; entries holding only a seed
    are regenerated with the manifest's phantom parameters.
    """
    root = Path(manifest.get("root", "."))
    spec = None
    if "phantom" in manifest:
        spec = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["phantom"].items()})
    pairs = []
    for entry in manifest["pairs"]:
        if "fixed" in entry:
            vols = {k: load_volume(root / entry[k]) for k in ("fixed", "moving")}
            for k in ("fixed_labels", "moving_labels"):
                if k in entry:
                    vols[k] = load_volume(root / entry[k])
        else:
            p = generate_phantom_pair(int(entry["seed"]), spec)
            vols = {k: getattr(p, k) for k in ("fixed", "moving", "fixed_labels", "moving_labels")}
        pairs.append({"id": entry["id"], **{k: v.batched() for k, v in vols.items()}})
    return pairs


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
