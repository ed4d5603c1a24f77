"""Synthetic fluorescence-microscopy scenes with dot annotations and
sum-preserving ground-truth density maps.

Cells are rendered as 2-D Gaussian blobs at annotated centers; artifacts
(blobs, streaks, intensity gradients) are rendered without annotations.
Ground truth is generated directly at the model's output resolution: one
Gaussian kernel per dot, each renormalized over the finite grid so the map
sums exactly to the cell count.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import load_tensor, save_tensor

DOWNSAMPLE_DEFAULT = 8
SIGMA_DEFAULT = 1.0

MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = "protodensity-dataset-v1"


@dataclass
class SceneConfig:
    """Knobs for one synthetic imaging condition. Intensities live in (0, 1]."""

    image_size: tuple[int, int] = (128, 128)          # (H, W)
    cell_count_range: tuple[int, int] = (5, 80)
    cell_radius_range: tuple[float, float] = (2.0, 5.0)
    cell_intensity_range: tuple[float, float] = (0.4, 1.0)
    artifact_count_range: tuple[int, int] = (2, 6)
    artifact_kinds: tuple[str, ...] = ("blob", "streak", "gradient")
    noise_std: float = 0.03
    min_separation: float = 0.0                        # 0 disables the overlap guard
    seed: int = 0


_KNOWN_ARTIFACTS = ("blob", "streak", "gradient")


def validate_config(config: SceneConfig, downsample: int = DOWNSAMPLE_DEFAULT) -> None:
    h, w = config.image_size
    if h % downsample or w % downsample:
        raise ValueError(f"image_size {config.image_size} must be divisible by {downsample}")
    for name in ("cell_count_range", "cell_radius_range", "cell_intensity_range",
                 "artifact_count_range"):
        lo, hi = getattr(config, name)
        if lo > hi:
            raise ValueError(f"{name}: min {lo} exceeds max {hi}")
    lo, hi = config.cell_intensity_range
    if not (0.0 < lo <= 1.0 and 0.0 < hi <= 1.0):
        raise ValueError(f"cell_intensity_range {config.cell_intensity_range} must lie in (0, 1]")
    for kind in config.artifact_kinds:
        if kind not in _KNOWN_ARTIFACTS:
            raise ValueError(f"unknown artifact kind {kind!r}, expected one of {_KNOWN_ARTIFACTS}")
    if config.noise_std < 0:
        raise ValueError("noise_std must be nonnegative")


@dataclass
class DotAnnotation:
    """Cell centers in input-pixel coordinates, x along width, y along height."""

    points: list[tuple[float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Sample:
    """One image with its dot annotation and output-resolution ground truth."""

    image: np.ndarray            # (1, H, W) float64 in [0, 1]
    annotation: DotAnnotation
    density_gt: np.ndarray       # (H/s, W/s) float64, sums to len(annotation)
    sample_id: int = 0


# -- scene rendering ----------------------------------------------------------


def _add_gaussian(img: np.ndarray, cx: float, cy: float, sigma: float, amp: float) -> None:
    h, w = img.shape
    r = max(1, int(np.ceil(3.0 * sigma)))
    x0, x1 = max(0, int(cx) - r), min(w - 1, int(cx) + r)
    y0, y1 = max(0, int(cy) - r), min(h - 1, int(cy) + r)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    img[y0:y1 + 1, x0:x1 + 1] += amp * np.exp(-d2 / (2.0 * sigma * sigma))


def _add_streak(img: np.ndarray, rng: np.random.Generator) -> None:
    h, w = img.shape
    ax, ay = rng.uniform(0, w), rng.uniform(0, h)
    angle = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.2, 0.7) * min(h, w)
    width = rng.uniform(1.0, 3.0)
    amp = rng.uniform(0.08, 0.4)
    bx, by = ax + length * np.cos(angle), ay + length * np.sin(angle)
    pad = int(np.ceil(3 * width))
    x0 = max(0, int(min(ax, bx)) - pad)
    x1 = min(w - 1, int(max(ax, bx)) + pad)
    y0 = max(0, int(min(ay, by)) - pad)
    y1 = min(h - 1, int(max(ay, by)) + pad)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg2, 0.0, 1.0)
    d2 = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2
    img[y0:y1 + 1, x0:x1 + 1] += amp * np.exp(-d2 / (2.0 * width * width))


def _add_gradient(img: np.ndarray, rng: np.random.Generator) -> None:
    h, w = img.shape
    angle = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.02, 0.15)
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    ramp = np.cos(angle) * xs / max(w - 1, 1) + np.sin(angle) * ys / max(h - 1, 1)
    lo, hi = ramp.min(), ramp.max()
    if hi > lo:
        ramp = (ramp - lo) / (hi - lo)
    img += amp * ramp


def _place_cells(rng: np.random.Generator, config: SceneConfig, n: int) -> list[tuple[float, float]]:
    h, w = config.image_size
    points: list[tuple[float, float]] = []
    for _ in range(n):
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        if config.min_separation > 0:
            for _ in range(200):
                if all((x - px) ** 2 + (y - py) ** 2 >= config.min_separation ** 2
                       for px, py in points):
                    break
                x, y = rng.uniform(0, w), rng.uniform(0, h)
        points.append((x, y))
    return points


def render_scene(config: SceneConfig, index: int) -> tuple[np.ndarray, DotAnnotation]:
    """Render scene ``index``: a deterministic function of (config.seed, index).

    Returns the (1, H, W) image clipped to [0, 1] and the cell annotation.
    Artifacts contribute pixels but never annotation points.
    """
    validate_config(config)
    h, w = config.image_size
    rng = np.random.default_rng([config.seed, index])
    img = np.zeros((h, w), dtype=np.float64)

    lo, hi = config.cell_count_range
    n_cells = int(rng.integers(lo, hi + 1))
    points = _place_cells(rng, config, n_cells)
    for x, y in points:
        radius = rng.uniform(*config.cell_radius_range)
        amp = rng.uniform(*config.cell_intensity_range)
        _add_gaussian(img, x, y, sigma=radius / 2.0, amp=amp)

    lo, hi = config.artifact_count_range
    n_art = int(rng.integers(lo, hi + 1)) if config.artifact_kinds else 0
    for _ in range(n_art):
        kind = config.artifact_kinds[int(rng.integers(0, len(config.artifact_kinds)))]
        if kind == "blob":
            r_lo, r_hi = config.cell_radius_range
            _add_gaussian(img, rng.uniform(0, w), rng.uniform(0, h),
                          sigma=rng.uniform(2.0 * r_hi, 4.0 * r_hi),
                          amp=rng.uniform(0.08, 0.35))
        elif kind == "streak":
            _add_streak(img, rng)
        else:
            _add_gradient(img, rng)

    if config.noise_std > 0:
        img += rng.normal(0.0, config.noise_std, size=(h, w))

    np.clip(img, 0.0, 1.0, out=img)
    return img[None, :, :], DotAnnotation(points)


# -- ground-truth density maps ------------------------------------------------


def make_density_map(annotation: DotAnnotation, input_size: tuple[int, int],
                     downsample: int = DOWNSAMPLE_DEFAULT,
                     sigma: float = SIGMA_DEFAULT) -> np.ndarray:
    """Accumulate one grid-renormalized Gaussian kernel per annotated point.

    Each kernel is centered at the point's coordinates divided by the
    downsample factor and scaled to sum exactly 1 over the output grid, so
    the map total equals the point count regardless of boundary truncation.
    """
    h, w = input_size
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if h % downsample or w % downsample:
        raise ValueError(f"input size {input_size} not divisible by downsample {downsample}")
    hf, wf = h // downsample, w // downsample
    out = np.zeros((hf, wf), dtype=np.float64)
    cols = np.arange(wf, dtype=np.float64)[None, :]
    rows = np.arange(hf, dtype=np.float64)[:, None]
    for x, y in annotation.points:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"annotation point ({x}, {y}) outside image bounds {w}x{h}")
        cx, cy = x / downsample, y / downsample
        kernel = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2.0 * sigma * sigma))
        total = kernel.sum()
        if total == 0.0:
            # kernel underflowed everywhere; assign all mass to the nearest cell
            r = min(hf - 1, max(0, int(round(cy))))
            c = min(wf - 1, max(0, int(round(cx))))
            out[r, c] += 1.0
        else:
            out += kernel / total
    return out


# -- sample and dataset I/O ---------------------------------------------------


def _sample_paths(sample_id: int) -> tuple[str, str, str]:
    stem = f"sample_{sample_id:05d}"
    return (f"{stem}_image.pdt", f"{stem}_points.csv", f"{stem}_density.pdt")


def save_sample(samples_dir: str, sample: Sample) -> None:
    img_p, pts_p, den_p = _sample_paths(sample.sample_id)
    save_tensor(os.path.join(samples_dir, img_p), sample.image)
    save_tensor(os.path.join(samples_dir, den_p), sample.density_gt)
    with open(os.path.join(samples_dir, pts_p), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y"])
        for x, y in sample.annotation.points:
            writer.writerow([repr(float(x)), repr(float(y))])


def load_sample(samples_dir: str, sample_id: int) -> Sample:
    img_p, pts_p, den_p = _sample_paths(sample_id)
    image = np.asarray(load_tensor(os.path.join(samples_dir, img_p)), dtype=np.float64)
    density = np.asarray(load_tensor(os.path.join(samples_dir, den_p)), dtype=np.float64)
    points = []
    with open(os.path.join(samples_dir, pts_p), newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["x", "y"]:
            raise ValueError(f"{pts_p}: expected header x,y, got {header}")
        for row in reader:
            points.append((float(row[0]), float(row[1])))
    return Sample(image, DotAnnotation(points), density, sample_id)


def _config_lines(config: SceneConfig) -> list[str]:
    return [
        f"config.image_size = {config.image_size[0]},{config.image_size[1]}",
        f"config.cell_count_range = {config.cell_count_range[0]},{config.cell_count_range[1]}",
        f"config.cell_radius_range = {config.cell_radius_range[0]!r},{config.cell_radius_range[1]!r}",
        f"config.cell_intensity_range = {config.cell_intensity_range[0]!r},{config.cell_intensity_range[1]!r}",
        f"config.artifact_count_range = {config.artifact_count_range[0]},{config.artifact_count_range[1]}",
        f"config.artifact_kinds = {','.join(config.artifact_kinds)}",
        f"config.noise_std = {config.noise_std!r}",
        f"config.min_separation = {config.min_separation!r}",
        f"config.seed = {config.seed}",
    ]


def generate_dataset(config: SceneConfig, n_train: int, n_test: int, out_dir: str,
                     downsample: int = DOWNSAMPLE_DEFAULT,
                     sigma: float = SIGMA_DEFAULT) -> str:
    """Write a full dataset (images, annotations, density maps, manifest) to
    ``out_dir`` and return the manifest path. Sample ids 0..n_train-1 are the
    training split, the rest are test; the split is recorded in the manifest.
    """
    validate_config(config, downsample)
    samples_dir = os.path.join(out_dir, "samples")
    try:
        os.makedirs(samples_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    rows = []
    for i in range(n_train + n_test):
        image, annotation = render_scene(config, i)
        density = make_density_map(annotation, config.image_size, downsample, sigma)
        sample = Sample(image, annotation, density, sample_id=i)
        save_sample(samples_dir, sample)
        img_p, pts_p, den_p = _sample_paths(i)
        split = "train" if i < n_train else "test"
        rows.append((i, split, len(annotation), f"samples/{img_p}",
                     f"samples/{pts_p}", f"samples/{den_p}"))

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    lines = [
        f"format = {MANIFEST_FORMAT}",
        f"n_train = {n_train}",
        f"n_test = {n_test}",
        f"downsample = {downsample}",
        f"sigma = {sigma!r}",
        *_config_lines(config),
        "[samples]",
        "id,split,count,image,annotation,density",
    ]
    lines += [",".join(str(v) for v in row) for row in rows]
    with open(manifest_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest_path


def _parse_pair(raw: str, cast):
    a, b = raw.split(",")
    return (cast(a), cast(b))


def parse_manifest(manifest_path: str):
    """Parse a dataset manifest into (config, downsample, sigma, n_train,
    n_test, sample rows). Rows are (id, split, count, image, annotation,
    density) with paths relative to the manifest directory."""
    kv: dict[str, str] = {}
    rows = []
    in_table = False
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[samples]":
                in_table = True
                continue
            if not in_table:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
            else:
                if line.startswith("id,"):
                    continue
                sid, split, count, img_p, pts_p, den_p = line.split(",")
                rows.append((int(sid), split, int(count), img_p, pts_p, den_p))
    if kv.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path}: unknown manifest format {kv.get('format')!r}")
    config = SceneConfig(
        image_size=_parse_pair(kv["config.image_size"], int),
        cell_count_range=_parse_pair(kv["config.cell_count_range"], int),
        cell_radius_range=_parse_pair(kv["config.cell_radius_range"], float),
        cell_intensity_range=_parse_pair(kv["config.cell_intensity_range"], float),
        artifact_count_range=_parse_pair(kv["config.artifact_count_range"], int),
        artifact_kinds=tuple(k for k in kv["config.artifact_kinds"].split(",") if k),
        noise_std=float(kv["config.noise_std"]),
        min_separation=float(kv["config.min_separation"]),
        seed=int(kv["config.seed"]),
    )
    return (config, int(kv["downsample"]), float(kv["sigma"]),
            int(kv["n_train"]), int(kv["n_test"]), rows)


@dataclass
class Dataset:
    """An in-memory dataset plus the manifest it came from."""

    config: SceneConfig
    downsample: int
    sigma: float
    train: list[Sample]
    test: list[Sample]
    manifest_path: str
    manifest_hash: str

    @property
    def all_samples(self) -> list[Sample]:
        return self.train + self.test


def manifest_hash(manifest_path: str) -> str:
    with open(manifest_path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def load_dataset(dataset_dir: str) -> Dataset:
    """Load every sample listed in ``dataset_dir``'s manifest."""
    manifest_path = os.path.join(dataset_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    config, downsample, sigma, n_train, n_test, rows = parse_manifest(manifest_path)
    train: list[Sample] = []
    test: list[Sample] = []
    samples_dir = os.path.join(dataset_dir, "samples")
    for sid, split, count, _img, _pts, _den in rows:
        sample = load_sample(samples_dir, sid)
        if len(sample.annotation) != count:
            raise ValueError(f"sample {sid}: manifest count {count} != "
                             f"{len(sample.annotation)} annotation points")
        (train if split == "train" else test).append(sample)
    if len(train) != n_train or len(test) != n_test:
        raise ValueError(f"{manifest_path}: split sizes differ from recorded n_train/n_test")
    return Dataset(config, downsample, sigma, train, test,
                   manifest_path, manifest_hash(manifest_path))


# -- PGM preview export -------------------------------------------------------


def write_pgm(path: str, array: np.ndarray) -> None:
    """Export a 2-D array as binary 8-bit PGM with linear min-max scaling;
    the scale used is recorded in a ``<path>.scale.txt`` sidecar."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D array, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.round((arr - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    data = scaled.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(data.tobytes())
    with open(f"{path}.scale.txt", "w") as f:
        f.write(f"min = {lo!r}\nmax = {hi!r}\n")


def default_scene_config(seed: int = 0) -> SceneConfig:
    """The stock synthetic imaging condition used by the experiment harnesses."""
    return replace(SceneConfig(), seed=seed)
