"""Synthetic two-view training data.

Scenes are single textured planes: each pair consists of a multi-octave
value-noise texture seen by camera A, a second view B rendered through the
exact plane-induced homography, the matching fundamental matrix, and the
ground-truth coarse match set. Everything is a deterministic function of
(seed, params), so dataset files hash reproducibly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import geometry as geo
from .errors import (
    ChecksumMismatch,
    ConfigError,
    DegeneratePose,
    EmptyDataset,
    MissingFile,
    NoImages,
    ShapeError,
    UnreadableImage,
)
from .storage import read_array, read_pgm, sha256_file, write_array, write_pgm
from .validation import COARSE_STRIDE, pad_to_multiple

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif", ".tiff")


@dataclass
class SceneParams:
    """Knobs of the procedural scene generator."""

    dims: tuple = (128, 128)  # (height, width)
    texture_octaves: int = 4
    max_rotation_deg: float = 25.0
    translation_range: tuple = (0.08, 0.3)  # fraction of plane depth
    noise_sigma: float = 0.02
    brightness_jitter: float = 0.2
    contrast_range: tuple = (0.8, 1.25)
    min_overlap: float = 0.5
    plane_depth: float = 2.0

    def __post_init__(self):
        h, w = self.dims
        if h % COARSE_STRIDE or w % COARSE_STRIDE:
            raise ShapeError(f"dims {self.dims} must be divisible by {COARSE_STRIDE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("dims", "translation_range", "contrast_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene param keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("dims", "translation_range", "contrast_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ScenePair:
    """One synthetic sample with exact geometric ground truth."""

    image_a: np.ndarray
    image_b: np.ndarray
    homography: geo.Homography
    fundamental: geo.FundamentalMatrix
    gt_coarse: np.ndarray  # (M, 2) int64 flat coarse index pairs
    pose_rel: geo.CameraPose
    seed: int


def value_noise(rng: np.random.Generator, shape: tuple[int, int], octaves: int) -> np.ndarray:
    """Multi-octave bilinear value noise in [0, 1]."""
    h, w = shape
    out = np.zeros((h, w))
    amplitude, total = 1.0, 0.0
    for octave in range(octaves):
        cells = 4 * (2**octave)
        lattice = rng.random((cells + 1, cells + 1))
        ys = (np.arange(h) + 0.5) / h * cells
        xs = (np.arange(w) + 0.5) / w * cells
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        tl = lattice[np.ix_(y0, x0)]
        tr = lattice[np.ix_(y0, x0 + 1)]
        bl = lattice[np.ix_(y0 + 1, x0)]
        br = lattice[np.ix_(y0 + 1, x0 + 1)]
        layer = (1 - fy) * ((1 - fx) * tl + fx * tr) + fy * ((1 - fx) * bl + fx * br)
        out += amplitude * layer
        total += amplitude
        amplitude *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-9)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample img at continuous (x, y) with edge clamping."""
    h, w = img.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(x.astype(int), w - 2)
    y0 = np.minimum(y.astype(int), h - 2)
    fx = x - x0
    fy = y - y0
    tl = img[y0, x0]
    tr = img[y0, x0 + 1]
    bl = img[y0 + 1, x0]
    br = img[y0 + 1, x0 + 1]
    return (1 - fy) * ((1 - fx) * tl + fx * tr) + fy * ((1 - fx) * bl + fx * br)


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    k = geo.skew(axis / np.linalg.norm(axis))
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def _default_intrinsics(dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    f = 1.2 * max(h, w)
    return np.array([[f, 0.0, w / 2 - 0.5], [0.0, f, h / 2 - 0.5], [0.0, 0.0, 1.0]])


def _overlap_fraction(h: geo.Homography, dims: tuple[int, int]) -> float:
    """Fraction of an A-side probe grid that lands inside image B.

    Probe points are pixel centers; "inside" means within the image
    extent [-0.5, size - 0.5] so an identity warp scores exactly 1."""
    hh, ww = dims
    gx, gy = np.meshgrid(np.linspace(0, ww - 1, 12), np.linspace(0, hh - 1, 12))
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    try:
        warped = geo.warp_points(h, pts)
    except geo.DegenerateWarp:
        return 0.0
    inside = (
        (warped[:, 0] >= -0.5)
        & (warped[:, 0] <= ww - 0.5)
        & (warped[:, 1] >= -0.5)
        & (warped[:, 1] <= hh - 0.5)
    )
    return float(inside.mean())


def sample_pose(rng: np.random.Generator, params: SceneParams) -> geo.CameraPose:
    """Draw a relative pose biased toward view-preserving motion.

    Rotation axes lean toward the optical axis (in-plane roll) and
    translations toward the image plane; out-of-plane components are
    damped so moderate pose ranges keep the plane in both views, which
    makes the overlap rejection below cheap."""
    axis = rng.normal(size=3) * np.array([0.35, 0.35, 1.0])
    angle = np.deg2rad(rng.uniform(0.0, params.max_rotation_deg))
    rot = _rotation_matrix(axis, angle)
    direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.35])
    direction /= np.linalg.norm(direction)
    lo, hi = params.translation_range
    t = direction * rng.uniform(lo, hi) * params.plane_depth
    return geo.CameraPose(rot, t, _default_intrinsics(params.dims))


def generate_scene_pair(seed: int, params: SceneParams | None = None) -> ScenePair:
    """Render one deterministic two-view sample.

    Pose draws giving a degenerate warp or too little overlap are retried
    up to 10 times before DegeneratePose is raised."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    h, w = params.dims
    margin = max(h, w) // 2
    canvas = value_noise(rng, (h + 2 * margin, w + 2 * margin), params.texture_octaves)
    image_a = canvas[margin : margin + h, margin : margin + w].copy()

    plane_normal = np.array([0.0, 0.0, 1.0])
    pose = homography = None
    for _ in range(10):
        candidate = sample_pose(rng, params)
        try:
            cand_h = geo.plane_induced_homography(candidate, plane_normal, params.plane_depth)
        except geo.DegenerateWarp:
            continue
        if _overlap_fraction(cand_h, params.dims) >= params.min_overlap:
            pose, homography = candidate, cand_h
            break
    if pose is None:
        raise DegeneratePose(f"no usable pose after 10 draws (seed {seed})")

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix_b = np.stack([gx.ravel(), gy.ravel()], axis=1)
    src = geo.warp_points(homography.inverse(), pix_b)
    image_b = bilinear_sample(canvas, src[:, 0] + margin, src[:, 1] + margin).reshape(h, w)

    contrast = rng.uniform(*params.contrast_range)
    brightness = rng.uniform(-params.brightness_jitter, params.brightness_jitter)
    image_b = contrast * (image_b - 0.5) + 0.5 + brightness
    image_b = image_b + rng.normal(0.0, params.noise_sigma, size=image_b.shape)
    image_b = np.clip(image_b, 0.0, 1.0)

    grid = (h // COARSE_STRIDE, w // COARSE_STRIDE)
    gt = np.asarray(
        geo.gt_coarse_matches(homography, grid, grid, COARSE_STRIDE), dtype=np.int64
    ).reshape(-1, 2)
    return ScenePair(
        image_a=image_a,
        image_b=image_b,
        homography=homography,
        fundamental=geo.fundamental_from_pose(pose),
        gt_coarse=gt,
        pose_rel=pose,
        seed=seed,
    )


def pair_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


@dataclass
class DatasetManifest:
    version: int
    kind: str  # "synthetic" | "ingest"
    root: Path
    pairs: list[dict]
    generation: dict = field(default_factory=dict)

    def ids(self) -> list[str]:
        return [p["id"] for p in self.pairs]

    def split_ids(self, split: str) -> list[str]:
        if split == "all":
            return self.ids()
        return [p["id"] for p in self.pairs if p.get("split") == split]

    def entry(self, pair_id: str) -> dict:
        for p in self.pairs:
            if p["id"] == pair_id:
                return p
        raise MissingFile(f"pair id {pair_id!r} not in manifest")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "kind": self.kind,
            "generation": self.generation,
            "pairs": self.pairs,
        }

    def save(self, path: Path | str | None = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise MissingFile(str(path))
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {d.get('version')}")
        return cls(
            version=d["version"],
            kind=d["kind"],
            root=path.parent,
            pairs=d["pairs"],
            generation=d.get("generation", {}),
        )


def build_dataset(
    n_pairs: int, out_dir: Path | str, params: SceneParams | None = None, seed: int = 0
) -> DatasetManifest:
    """Generate, persist, and index ``n_pairs`` scenes (90/10 train/val)."""
    if n_pairs <= 0:
        raise EmptyDataset("n_pairs must be positive")
    params = params or SceneParams()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx in range(n_pairs):
        pid = f"pair_{idx:04d}"
        scene = generate_scene_pair(pair_seed(seed, idx), params)
        img_a_path = root / f"{pid}_a.pgm"
        img_b_path = root / f"{pid}_b.pgm"
        write_pgm(img_a_path, scene.image_a)
        write_pgm(img_b_path, scene.image_b)
        arrays = {
            "homography": write_array(root / f"{pid}_h.bin", scene.homography.h),
            "fundamental": write_array(root / f"{pid}_f.bin", scene.fundamental.f),
            "gt_coarse": write_array(root / f"{pid}_gt.bin", scene.gt_coarse),
            "rotation": write_array(root / f"{pid}_r.bin", scene.pose_rel.rotation),
            "translation": write_array(root / f"{pid}_t.bin", scene.pose_rel.translation),
            "intrinsics": write_array(root / f"{pid}_k.bin", scene.pose_rel.intrinsics),
        }
        entries.append(
            {
                "id": pid,
                "seed": scene.seed,
                "split": "val" if idx % 10 == 9 else "train",
                "image_a": img_a_path.name,
                "image_b": img_b_path.name,
                "images_sha256": {
                    "a": sha256_file(img_a_path),
                    "b": sha256_file(img_b_path),
                },
                "dims": list(params.dims),
                "arrays": arrays,
            }
        )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        kind="synthetic",
        root=root,
        pairs=entries,
        generation={"seed": seed, "n_pairs": n_pairs, "params": params.to_dict()},
    )
    manifest.save()
    return manifest


def load_pair(manifest: DatasetManifest, pair_id: str) -> ScenePair:
    """Reload one synthetic pair, verifying checksums."""
    if manifest.kind != "synthetic":
        raise ConfigError("load_pair requires a synthetic manifest")
    entry = manifest.entry(pair_id)
    root = manifest.root
    for side in ("a", "b"):
        path = root / entry[f"image_{side}"]
        if not path.exists():
            raise MissingFile(str(path))
        if sha256_file(path) != entry["images_sha256"][side]:
            raise ChecksumMismatch(str(path))
    arrays = {name: read_array(root, rec) for name, rec in entry["arrays"].items()}
    pose = geo.CameraPose(arrays["rotation"], arrays["translation"], arrays["intrinsics"])
    return ScenePair(
        image_a=read_pgm(root / entry["image_a"]),
        image_b=read_pgm(root / entry["image_b"]),
        homography=geo.Homography(arrays["homography"]),
        fundamental=geo.FundamentalMatrix(arrays["fundamental"]),
        gt_coarse=arrays["gt_coarse"].astype(np.int64).reshape(-1, 2),
        pose_rel=pose,
        seed=int(entry["seed"]),
    )


def read_image_file(path: Path | str) -> np.ndarray:
    """Decode any supported image file to grayscale float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
            return np.asarray(gray, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def ingest_image_folder(directory: Path | str, pairing: str = "sequential") -> DatasetManifest:
    """Index a folder of photographs as match-ready pairs (no ground truth).

    Images are grayscale-converted and edge-padded to dims divisible by 8
    at load time; the manifest records the original dims so output match
    coordinates can be reported in the unpadded frame."""
    if pairing not in ("sequential", "all-pairs"):
        raise ConfigError(f"pairing must be 'sequential' or 'all-pairs', got {pairing!r}")
    root = Path(directory)
    files = sorted(
        p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )
    if not files:
        raise NoImages(f"no readable images under {root}")
    dims = []
    for f in files:
        img = read_image_file(f)
        padded, original = pad_to_multiple(img)
        dims.append({"original": list(original), "padded": list(padded.shape)})
    if pairing == "sequential":
        index_pairs = [(i, i + 1) for i in range(len(files) - 1)]
    else:
        index_pairs = [(i, j) for i in range(len(files)) for j in range(i + 1, len(files))]
    entries = []
    for n, (i, j) in enumerate(index_pairs):
        entries.append(
            {
                "id": f"pair_{n:04d}",
                "image_a": files[i].name,
                "image_b": files[j].name,
                "dims_a": dims[i],
                "dims_b": dims[j],
            }
        )
    return DatasetManifest(
        version=MANIFEST_VERSION, kind="ingest", root=root, pairs=entries
    )


def load_ingest_images(manifest: DatasetManifest, pair_id: str) -> tuple[np.ndarray, np.ndarray, dict]:
    """Load and pad one ingest pair; returns (padded_a, padded_b, entry)."""
    entry = manifest.entry(pair_id)
    img_a, _ = pad_to_multiple(read_image_file(manifest.root / entry["image_a"]))
    img_b, _ = pad_to_multiple(read_image_file(manifest.root / entry["image_b"]))
    return img_a, img_b, entry
