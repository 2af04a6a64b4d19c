"""Synthetic stereo pairs, PFM disparity I/O, crops and manifests.

Synthetic scenes are stacks of fronto-parallel layers with integer
disparities; most carry value-noise texture, some are flat. Textures
are sampled from one lattice per layer that extends past the right
edge, so the right image is the exact integer shift of the left
wherever the layer is visible in both views; the valid mask excludes
off-frame and occluded correspondences.
"""

import os
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image


@dataclass
class StereoSample:
    """One rectified pair with dense left-view ground truth."""

    left: np.ndarray  # [3,H,W] float32 in [0,1]
    right: np.ndarray  # [3,H,W] float32 in [0,1]
    gt: np.ndarray  # [H,W] float32, full-resolution disparity
    valid: np.ndarray  # [H,W] bool
    name: str = "sample"

    def __post_init__(self):
        if self.left.shape != self.right.shape or self.left.ndim != 3:
            raise ValueError("left/right must be matching [3,H,W] arrays")
        if self.gt.shape != self.left.shape[1:] or self.valid.shape != self.gt.shape:
            raise ValueError("gt/valid resolution must match the images")

    def to_tensors(self):
        return (
            torch.from_numpy(self.left.copy()),
            torch.from_numpy(self.right.copy()),
            torch.from_numpy(self.gt.copy()),
            torch.from_numpy(self.valid.copy()),
        )


@dataclass(frozen=True)
class SynthConfig:
    """Layered-scene generator settings; disparities are integers."""

    seed: int = 0
    height: int = 64
    width: int = 128
    max_disp: int = 24
    num_shapes: int = 5
    octaves: int = 3

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("scene must be at least 32x32")
        if self.max_disp < 0:
            raise ValueError("max_disp must be non-negative")
        if self.max_disp >= self.width / 4:
            raise ValueError("max_disp must stay below width / 4")
        if self.num_shapes < 0 or self.octaves < 1:
            raise ValueError("bad shape or octave count")


def _value_noise(rng: np.random.Generator, h: int, w: int, octaves: int) -> np.ndarray:
    """Multi-octave bilinear value noise in [0, 1], shape [h, w]."""
    acc = np.zeros((h, w), dtype=np.float64)
    amp, total = 1.0, 0.0
    for octave in range(octaves):
        cell = max(2, 2 ** (octaves - octave + 1))
        gh, gw = h // cell + 2, w // cell + 2
        grid = rng.random((gh, gw))
        ys = np.arange(h) / cell
        xs = np.arange(w) / cell
        y0 = ys.astype(np.int64)
        x0 = xs.astype(np.int64)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        v00 = grid[np.ix_(y0, x0)]
        v01 = grid[np.ix_(y0, x0 + 1)]
        v10 = grid[np.ix_(y0 + 1, x0)]
        v11 = grid[np.ix_(y0 + 1, x0 + 1)]
        val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
        acc += amp * val
        total += amp
        amp *= 0.5
    return acc / total


def _layer_texture(
    rng: np.random.Generator, h: int, w: int, octaves: int, flat: bool = False
) -> np.ndarray:
    """Colorized noise texture, [3, h, w] float32 in [0, 1].

    A flat layer is a single solid color: textureless interiors are
    only matchable from their boundaries, which is the case iterative
    refinement exists for.
    """
    if flat:
        color = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
        return np.broadcast_to(color[:, None, None], (3, h, w)).copy()
    noise = _value_noise(rng, h, w, octaves)
    tex = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        base = rng.uniform(0.05, 0.45)
        span = rng.uniform(0.3, 0.95 - base)
        tex[c] = (base + span * noise).astype(np.float32)
    return tex


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.integers(0, 2)
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == 0:
        bw = int(rng.integers(w // 6, w // 2))
        bh = int(rng.integers(h // 6, h // 2))
        x0 = int(rng.integers(0, w - bw))
        y0 = int(rng.integers(0, h - bh))
        return (ys >= y0) & (ys < y0 + bh) & (xs >= x0) & (xs < x0 + bw)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    cy = rng.uniform(0.15 * h, 0.85 * h)
    ax = rng.uniform(w / 12, w / 5)
    ay = rng.uniform(h / 12, h / 5)
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def generate_pair(cfg: SynthConfig) -> StereoSample:
    """Render one layered scene; identical cfg gives bitwise equal output."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    pad_w = w + cfg.max_disp + 1

    bg_disp = int(rng.integers(0, cfg.max_disp // 4 + 1))
    layers = [(bg_disp, np.ones((h, w), dtype=bool), _layer_texture(rng, h, pad_w, cfg.octaves))]
    for _ in range(cfg.num_shapes):
        # shapes sit in front of the background, never behind it; about
        # a third are textureless so the matcher meets ambiguity
        disp = int(rng.integers(bg_disp, cfg.max_disp + 1))
        mask = _shape_mask(rng, h, w)
        flat = bool(rng.random() < 0.35)
        tex = _layer_texture(rng, h, pad_w, cfg.octaves, flat=flat)
        layers.append((disp, mask, tex))

    # painter's order: far (small disparity) first, near last; stable on ties
    order = sorted(range(len(layers)), key=lambda i: layers[i][0])

    left = np.zeros((3, h, w), dtype=np.float32)
    right = np.zeros((3, h, w), dtype=np.float32)
    left_id = np.full((h, w), -1, dtype=np.int32)
    right_id = np.full((h, w), -1, dtype=np.int32)
    gt = np.zeros((h, w), dtype=np.float32)

    for idx in order:
        disp, mask, tex = layers[idx]
        left[:, mask] = tex[:, :, :w][:, mask]
        left_id[mask] = idx
        gt[mask] = disp
        # right-view footprint: same scene columns shifted left by disp;
        # the background extends past the left frame via its wide lattice
        rmask = np.zeros_like(mask)
        if idx == 0:
            rmask[:] = True
        elif disp == 0:
            rmask[:] = mask
        else:
            rmask[:, : w - disp] = mask[:, disp:]
        shifted = tex[:, :, disp : disp + w]
        right[:, rmask] = shifted[:, rmask]
        right_id[rmask] = idx

    xs = np.arange(w)[None, :]
    src = xs - gt.astype(np.int64)
    in_frame = src >= 0
    src_safe = np.clip(src, 0, w - 1)
    same_layer = np.take_along_axis(right_id, src_safe, axis=1) == left_id
    valid = in_frame & same_layer
    return StereoSample(left=left, right=right, gt=gt, valid=valid, name=f"synth{cfg.seed}")


def random_crop(sample: StereoSample, crop_h: int, crop_w: int, seed: int) -> StereoSample:
    """Seeded window crop of all fields; the window is chosen uniformly."""
    h, w = sample.gt.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    sl = np.s_[y0 : y0 + crop_h, x0 : x0 + crop_w]
    return StereoSample(
        left=sample.left[:, sl[0], sl[1]].copy(),
        right=sample.right[:, sl[0], sl[1]].copy(),
        gt=sample.gt[sl].copy(),
        valid=sample.valid[sl].copy(),
        name=f"{sample.name}_crop{y0}_{x0}",
    )


def _fold_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class SyntheticDataset:
    """Deterministic stream of generated pairs.

    Sample i of epoch e depends only on (base config, seed, e, i), so
    iteration order is reproducible and resumable without state.
    """

    def __init__(self, base: SynthConfig, count: int, seed: int = 0):
        if count < 1:
            raise ValueError("count must be positive")
        self.base = base
        self.count = count
        self.seed = seed

    def __len__(self) -> int:
        return self.count

    def sample(self, index: int, epoch: int = 0) -> StereoSample:
        if not 0 <= index < self.count:
            raise IndexError(index)
        cfg = replace(self.base, seed=_fold_seed(self.seed, epoch, index))
        return generate_pair(cfg)

    def __getitem__(self, index: int) -> StereoSample:
        return self.sample(index)


def write_pfm(path: str, field: np.ndarray) -> None:
    """Single-channel PFM, scale -1 (little endian), rows bottom-up."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 2:
        raise ValueError("disparity field must be 2d")
    h, w = field.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(field).astype("<f4").tobytes())


def read_pfm(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read a single-channel PFM disparity map.

    The scale line's sign selects the layout: negative means little
    endian with bottom-up scanlines, positive means big endian with
    top-down scanlines. Returns (data, valid) where valid is False at
    non-finite entries; non-finite values stay in the data.
    """
    with open(path, "rb") as f:
        raw = f.read()
    header, rest = raw.split(b"\n", 1)
    if header.strip() == b"PF":
        raise ValueError("color PFM not supported; disparity maps are single channel")
    if header.strip() != b"Pf":
        raise ValueError(f"malformed PFM header {header!r}")
    dims, rest = rest.split(b"\n", 1)
    m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
    if not m:
        raise ValueError(f"malformed PFM dimensions line {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    scale_line, rest = rest.split(b"\n", 1)
    try:
        scale = float(scale_line)
    except ValueError as e:
        raise ValueError(f"malformed PFM scale line {scale_line!r}") from e
    if scale == 0:
        raise ValueError("PFM scale must be non-zero")
    if len(rest) < w * h * 4:
        raise ValueError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(rest[: w * h * 4], dtype=dtype).reshape(h, w)
    if scale < 0:
        data = np.flipud(data)
    data = np.ascontiguousarray(data, dtype=np.float32)
    return data, np.isfinite(data)


def save_image(path: str, image: np.ndarray) -> None:
    """Store a [3,H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected a [3,H,W] image")
    out = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(out, mode="RGB").save(path)


def load_image(path: str) -> np.ndarray:
    """Load an RGB image as [3,H,W] float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_manifest(path: str, rows: Sequence[Tuple[str, str, str]]) -> None:
    """Tab-separated index: left image, right image, disparity PFM."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("# left\tright\tdisparity\n")
        for left, right, disp in rows:
            f.write(f"{left}\t{right}\t{disp}\n")


def read_manifest(path: str) -> List[Tuple[str, str, str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


class ManifestDataset:
    """Pairs listed in a manifest; paths resolve relative to it."""

    def __init__(self, manifest_path: str):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.rows = read_manifest(manifest_path)
        if not self.rows:
            raise ValueError(f"empty manifest {manifest_path}")

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, index: int) -> StereoSample:
        lp, rp, dp = (os.path.join(self.root, p) for p in self.rows[index])
        gt, valid = read_pfm(dp)
        gt = np.where(np.isfinite(gt), gt, 0.0).astype(np.float32)
        return StereoSample(
            left=load_image(lp),
            right=load_image(rp),
            gt=gt,
            valid=valid,
            name=os.path.basename(lp),
        )
