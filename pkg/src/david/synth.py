"""Challenging-DVD style dataset synthesis from high-frame-rate clips.

Sharp ground truth is every ``step``-th source frame; the blurry frame for a
ground-truth position is the plain mean of ``w`` source frames centred on it,
computed on gamma-encoded [0, 1] values.  One window ``w`` is drawn per clip,
so every clip lands in exactly one C-DVD-w subset.
"""

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

DEFAULT_WINDOWS = (3, 7, 11, 15)
GT_STEP = 8
SPLITS = ("train", "val", "test")


class ClipError(ValueError):
    """A clip could not be decoded or is malformed."""


class WindowError(ValueError):
    """An averaging window does not fit inside the clip."""


# -- image IO --------------------------------------------------------------------

def quantize(img):
    """Float [0, 1] -> uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_png(path, img):
    """Write an ``H x W x 3`` (or ``H x W``) float image as 8-bit PNG.

    Written without timestamps or other metadata so identical inputs give
    identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = img if np.asarray(img).dtype == np.uint8 else quantize(img)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def load_png(path):
    """Read a PNG as ``H x W x 3`` float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ClipError(f"cannot decode {path}: {exc}") from exc
    return dequantize(arr)


def load_png_uint8(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except (OSError, ValueError) as exc:
        raise ClipError(f"cannot decode {path}: {exc}") from exc


# -- domain types -----------------------------------------------------------------

@dataclass
class RawClip:
    frames: list
    clip_id: str
    fps: int = 240

    def __post_init__(self):
        self.frames = [np.asarray(f, dtype=np.float64) for f in self.frames]
        if self.frames:
            shape = self.frames[0].shape
            for i, f in enumerate(self.frames):
                if f.shape != shape:
                    raise ClipError(f"clip {self.clip_id}: frame {i} is {f.shape}, frame 0 is {shape}")
                if f.min() < 0.0 or f.max() > 1.0:
                    raise ClipError(f"clip {self.clip_id}: frame {i} has values outside [0, 1]")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self):
        return self.frames[0].shape[:2]


@dataclass
class BlurSample:
    blurry: np.ndarray
    sharp: np.ndarray
    window: int
    center_index: int
    clip_id: str
    split: str = "train"

    def __post_init__(self):
        if self.blurry.shape != self.sharp.shape:
            raise ValueError(f"blurry {self.blurry.shape} and sharp {self.sharp.shape} differ in shape")


@dataclass
class DatasetManifest:
    """Sample records plus the synthesis settings that produced them.

    Serialized as JSON lines: a header line (``{"manifest": {...}}``) followed
    by one record per sample.  Paths are relative to the manifest file.
    """

    records: list
    seed: int = 0
    windows: tuple = DEFAULT_WINDOWS
    step: int = GT_STEP
    root: Path = field(default=None, compare=False)
    skipped: int = 0

    @property
    def subsets(self):
        out = {}
        for r in self.records:
            out.setdefault(subset_name(r["window"]), []).append(r)
        return dict(sorted(out.items(), key=lambda kv: int(kv[0].rsplit("-", 1)[1])))

    def clip_splits(self):
        splits = {}
        for r in self.records:
            splits.setdefault(r["clip_id"], set()).add(r["split"])
        return splits

    def check_splits(self):
        bad = sorted(c for c, s in self.clip_splits().items() if len(s) > 1)
        if bad:
            raise ValueError(f"clips straddle splits: {bad}")

    def check_files(self):
        for r in self.records:
            for key in ("blurry_path", "sharp_path"):
                load_png_uint8(self.resolve(r[key]))

    def resolve(self, rel):
        return Path(self.root or ".") / rel

    def filter(self, split=None, windows=None):
        recs = [r for r in self.records
                if (split is None or r["split"] == split) and (windows is None or r["window"] in windows)]
        return DatasetManifest(recs, self.seed, self.windows, self.step, self.root, self.skipped)

    def to_text(self):
        head = {"manifest": {"seed": self.seed, "windows": list(self.windows), "step": self.step,
                             "skipped": self.skipped}}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        self.root = path.parent
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        records, meta = [], {}
        for ln in lines:
            obj = json.loads(ln)
            if "manifest" in obj:
                meta = obj["manifest"]
            else:
                missing = {"clip_id", "center_index", "window", "blurry_path", "sharp_path", "split"} - obj.keys()
                if missing:
                    raise ValueError(f"{path}: record lacks {sorted(missing)}")
                records.append(obj)
        return cls(records, meta.get("seed", 0), tuple(meta.get("windows", DEFAULT_WINDOWS)),
                   meta.get("step", GT_STEP), path.parent, meta.get("skipped", 0))


def subset_name(window):
    return f"C-DVD-{int(window)}"


# -- operations ------------------------------------------------------------------

def subsample_ground_truth(clip, step=GT_STEP):
    """Indices and frames at 0, step, 2*step, ..."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if len(clip) == 0:
        raise ClipError(f"clip {clip.clip_id} is empty")
    idx = list(range(0, len(clip), step))
    return idx, [clip.frames[i] for i in idx]


def window_fits(n_frames, center, window):
    half = (window - 1) // 2
    return center - half >= 0 and center + half < n_frames


def synthesize_blur(clip, center, window):
    """Pixel-wise mean of the ``window`` frames centred on ``center``."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if not window_fits(len(clip), center, window):
        raise WindowError(f"clip {clip.clip_id}: window {window} at frame {center} exceeds {len(clip)} frames")
    half = (window - 1) // 2
    window_frames = np.stack(clip.frames[center - half:center + half + 1])
    # averaging offsets from the first frame keeps a static window bit-exact
    ref = window_frames[0]
    return ref + np.mean(window_frames - ref, axis=0)


def clip_rng(seed, clip_id):
    """Per-clip generator; independent of clip order so synthesis can run per clip."""
    return np.random.default_rng([int(seed), zlib.crc32(str(clip_id).encode())])


def assign_splits(clip_ids, seed, val_fraction=0.1, test_fraction=0.0, fixed=None):
    """Seeded clip-level split. ``fixed`` maps clip_id -> split and wins."""
    fixed = dict(fixed or {})
    free = sorted(c for c in clip_ids if c not in fixed)
    order = np.random.default_rng([int(seed), 0x5EED]).permutation(len(free))
    n_val = int(round(val_fraction * len(free)))
    n_test = int(round(test_fraction * len(free)))
    out = dict(fixed)
    for rank, i in enumerate(order):
        out[free[i]] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    for c, s in out.items():
        if s not in SPLITS:
            raise ValueError(f"unknown split {s!r} for clip {c}")
    return out


def generate_cdvd(clips, out_dir, windows=DEFAULT_WINDOWS, seed=0, step=GT_STEP, val_fraction=0.1,
                  test_fraction=0.0, fixed_splits=None, interpolate=None, manifest_name="manifest.jsonl"):
    """Synthesize blurry/sharp pairs for every clip and write the manifest.

    ``interpolate`` is an optional hook applied to each clip before averaging
    (frame-rate upsampling); by default clips are used as is.  Windows that do
    not fit at a ground-truth position are skipped and counted.
    """
    windows = tuple(sorted(int(w) for w in windows))
    if not windows:
        raise ValueError("windows must be non-empty")
    if any(w < 1 or w % 2 == 0 for w in windows):
        raise ValueError(f"windows must be odd, got {windows}")
    out_dir = Path(out_dir)
    clips = sorted(clips, key=lambda c: str(c.clip_id))
    ids = [str(c.clip_id) for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique")
    splits = assign_splits(ids, seed, val_fraction, test_fraction, fixed_splits)
    records, skipped = [], 0
    for clip in clips:
        if interpolate is not None:
            clip = interpolate(clip)
        w = int(clip_rng(seed, clip.clip_id).choice(windows))
        recs, n_skip = _synthesize_clip(clip, w, step, out_dir, splits[str(clip.clip_id)])
        records += recs
        skipped += n_skip
    manifest = DatasetManifest(records, seed, windows, step, out_dir, skipped)
    manifest.write(out_dir / manifest_name)
    return manifest


def _synthesize_clip(clip, window, step, out_dir, split):
    idx, _ = subsample_ground_truth(clip, step)
    recs, skipped = [], 0
    for c in idx:
        try:
            blurry = synthesize_blur(clip, c, window)
        except WindowError as exc:
            log.info("skipping sample: %s", exc)
            skipped += 1
            continue
        rel_b = Path("blurry") / str(clip.clip_id) / f"{c:06d}.png"
        rel_s = Path("sharp") / str(clip.clip_id) / f"{c:06d}.png"
        save_png(out_dir / rel_b, blurry)
        save_png(out_dir / rel_s, clip.frames[c])
        recs.append({"clip_id": str(clip.clip_id), "center_index": c, "window": window,
                     "blurry_path": rel_b.as_posix(), "sharp_path": rel_s.as_posix(), "split": split})
    return recs, skipped


def load_clip_dir(path, fps=240):
    """A directory of zero-padded, numbered PNG frames -> RawClip."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ClipError(f"{path}: no PNG frames")
    return RawClip([load_png(f) for f in files], path.name, fps)


def load_clip_tree(root, strict=False):
    """Every subdirectory of ``root`` as a clip; bad clips are reported, not fatal unless ``strict``."""
    clips, rejected = [], []
    for sub in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        try:
            clips.append(load_clip_dir(sub))
        except ClipError as exc:
            if strict:
                raise
            log.warning("rejected clip %s: %s", sub.name, exc)
            rejected.append((sub.name, str(exc)))
    return clips, rejected


# -- synthetic clips --------------------------------------------------------------

PATTERNS = ("dots", "texture", "stripes", "dot")


def _periodic_texture(pattern, size, rng):
    if pattern == "dot":
        tex = np.zeros((size, size, 3))
        tex[size // 2, size // 2] = 1.0
        return tex
    if pattern == "dots":
        tex = np.full((size, size, 3), 0.1)
        n = max(4, size * size // 96)
        ys, xs = rng.integers(0, size, n), rng.integers(0, size, n)
        colors = rng.uniform(0.4, 1.0, (n, 3))
        tex[ys, xs] = colors
        return np.clip(ndimage.gaussian_filter(tex, (1.0, 1.0, 0), mode="wrap") * 4.0, 0, 1)
    if pattern == "texture":
        noise = rng.normal(size=(size, size, 3))
        f = np.fft.fftfreq(size)
        radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
        spectrum = np.fft.fft2(noise, axes=(0, 1)) * (1.0 / (radius + 0.02)[..., None])
        tex = np.real(np.fft.ifft2(spectrum, axes=(0, 1)))
        tex = (tex - tex.mean()) / (tex.std() * 5) + 0.5
        return np.clip(tex, 0, 1)
    if pattern == "stripes":
        k = rng.integers(2, 6)
        phase = rng.uniform(0, 2 * np.pi, 3)
        x = np.arange(size) * 2 * np.pi * k / size
        tex = 0.5 + 0.4 * np.sin(x[None, :, None] + phase)
        return np.broadcast_to(tex, (size, size, 3)).copy()
    raise ValueError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")


def make_synthetic_clip(pattern="dots", velocity=(1.0, 0.0), length=64, size=32, rng=None, clip_id="synthetic",
                        quantized=True):
    """Render a periodic pattern translating at ``velocity`` (dx, dy) px/frame.

    Sampling is bilinear, so sub-pixel motion averages into genuine blur.
    Frames are snapped to the 8-bit grid unless ``quantized`` is false, as a
    camera-captured clip would be.
    """
    if np.ndim(size) == 0:
        size = (int(size), int(size))
    h, w = size
    if min(h, w) < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(rng)
    period = 2 * max(h, w)
    tex = _periodic_texture(pattern, period, rng)
    vx, vy = (float(velocity), 0.0) if np.ndim(velocity) == 0 else map(float, velocity)
    x0, y0 = (rng.uniform(0, period, 2) if pattern != "dot" else (period / 2 - w / 2, period / 2 - h / 2))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    for t in range(int(length)):
        coords = [yy + y0 + vy * t, xx + x0 + vx * t]
        chans = [ndimage.map_coordinates(tex[..., c], coords, order=1, mode="grid-wrap") for c in range(3)]
        img = np.clip(np.stack(chans, axis=-1), 0.0, 1.0)
        frames.append(dequantize(quantize(img)) if quantized else img)
    return RawClip(frames, clip_id)


def make_synthetic_corpus(n_clips, pattern="dots", length=None, size=32, speed=(0.25, 2.0), seed=0,
                          step=GT_STEP, gt_frames=10, max_window=max(DEFAULT_WINDOWS)):
    """``n_clips`` clips with random direction and speed (mixed motion).

    ``pattern="mixed"`` cycles through the textured patterns.  The default
    length leaves room for ``gt_frames`` ground-truth positions plus the
    widest window margin.
    """
    if length is None:
        length = step * (gt_frames - 1) + max_window
    clips = []
    for k in range(n_clips):
        rng = np.random.default_rng([int(seed), k])
        s = rng.uniform(*speed)
        theta = rng.uniform(0, 2 * np.pi)
        pat = ("dots", "texture", "stripes")[k % 3] if pattern == "mixed" else pattern
        clips.append(make_synthetic_clip(pat, (s * np.cos(theta), s * np.sin(theta)), length, size, rng,
                                         clip_id=f"clip{k:04d}"))
    return clips


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDecision:
    top: int
    left: int
    crop: tuple
    hflip: bool
    vflip: bool


def draw_augmentation(height, width, crop, rng, flips=True):
    ch, cw = (crop, crop) if np.ndim(crop) == 0 else crop
    if ch > height or cw > width:
        raise ValueError(f"crop {ch}x{cw} exceeds image {height}x{width}")
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    h = bool(rng.integers(2)) if flips else False
    v = bool(rng.integers(2)) if flips else False
    return AugmentDecision(top, left, (int(ch), int(cw)), h, v)


def apply_augmentation(arr, d, spatial_axes=(-2, -1)):
    """Apply one crop/flip decision to an array with the given (row, col) axes."""
    ya, xa = spatial_axes
    arr = np.asarray(arr)
    index = [slice(None)] * arr.ndim
    index[ya] = slice(d.top, d.top + d.crop[0])
    index[xa] = slice(d.left, d.left + d.crop[1])
    out = arr[tuple(index)]
    if d.hflip:
        out = np.flip(out, axis=xa)
    if d.vflip:
        out = np.flip(out, axis=ya)
    return out


def augment(sample, crop, rng, flips=True):
    """Same random crop and flips on the blurry and sharp images (``H x W x C``)."""
    h, w = sample.blurry.shape[:2]
    d = draw_augmentation(h, w, crop, rng, flips)
    return BlurSample(apply_augmentation(sample.blurry, d, (0, 1)).copy(),
                      apply_augmentation(sample.sharp, d, (0, 1)).copy(),
                      sample.window, sample.center_index, sample.clip_id, sample.split)


def gradient_energy(img):
    img = np.asarray(img, dtype=np.float64)
    return float(np.mean(np.diff(img, axis=0) ** 2) + np.mean(np.diff(img, axis=1) ** 2))


def sample_from_record(manifest, record):
    return BlurSample(load_png(manifest.resolve(record["blurry_path"])),
                      load_png(manifest.resolve(record["sharp_path"])),
                      record["window"], record["center_index"], record["clip_id"], record["split"])


def summarize(manifest):
    counts = {name: len(recs) for name, recs in manifest.subsets.items()}
    splits = {}
    for r in manifest.records:
        splits[r["split"]] = splits.get(r["split"], 0) + 1
    return {"subsets": counts, "splits": dict(sorted(splits.items())), "skipped": manifest.skipped,
            "clips": len({r["clip_id"] for r in manifest.records})}


def list_frame_files(path):
    return sorted(Path(path) / f for f in os.listdir(path) if f.lower().endswith(".png"))
