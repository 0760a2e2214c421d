"""Frame-stack datasets built from a synthesis manifest.

A sample's network input is the ``width`` consecutive blurry frames (at
ground-truth positions) centred on its target.  Positions without enough
neighbours in the same clip are skipped and counted.
"""

from dataclasses import dataclass

import numpy as np

from .synth import DatasetManifest, apply_augmentation, draw_augmentation, load_png_uint8


@dataclass(frozen=True)
class SampleRef:
    clip_id: str
    center_index: int
    window: int
    position: int  # index into the clip's ordered ground-truth list


class StackDataset:
    """In-memory uint8 frames per clip plus sample references.

    ``blurry[clip]`` and ``sharp[clip]`` are ``(n_gt, 3, H, W)`` uint8.
    """

    def __init__(self, blurry, sharp, samples, width, step, skipped=0):
        if width < 1 or width % 2 == 0:
            raise ValueError(f"stack width must be odd and positive, got {width}")
        self.blurry = blurry
        self.sharp = sharp
        self.samples = list(samples)
        self.width = width
        self.step = step
        self.skipped = skipped

    def __len__(self):
        return len(self.samples)

    @classmethod
    def from_manifest(cls, manifest, width, split=None, windows=None):
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.read(manifest)
        chosen = manifest.filter(split=split, windows=windows).records
        by_clip = {}
        for r in chosen:
            by_clip.setdefault(r["clip_id"], []).append(r)
        blurry, sharp, samples = {}, {}, []
        skipped = 0
        half = (width - 1) // 2
        for clip_id in sorted(by_clip):
            recs = sorted(by_clip[clip_id], key=lambda r: r["center_index"])
            blurry[clip_id] = np.stack([load_png_uint8(manifest.resolve(r["blurry_path"])).transpose(2, 0, 1)
                                        for r in recs])
            sharp[clip_id] = np.stack([load_png_uint8(manifest.resolve(r["sharp_path"])).transpose(2, 0, 1)
                                       for r in recs])
            centers = [r["center_index"] for r in recs]
            for p, r in enumerate(recs):
                lo, hi = p - half, p + half
                ok = lo >= 0 and hi < len(recs) and all(
                    centers[q + 1] - centers[q] == manifest.step for q in range(lo, hi))
                if ok:
                    samples.append(SampleRef(clip_id, r["center_index"], r["window"], p))
                else:
                    skipped += 1
        return cls(blurry, sharp, samples, width, manifest.step, skipped)

    @classmethod
    def from_arrays(cls, stacks, targets, window=0):
        """Wrap explicit ``(n, T, 3, H, W)`` stacks and ``(n, 3, H, W)`` targets (floats in [0, 1] or uint8)."""
        stacks, targets = _to_uint8(stacks), _to_uint8(targets)
        n, t = stacks.shape[:2]
        blurry, sharp, samples = {}, {}, []
        for i in range(n):
            key = f"s{i:06d}"
            blurry[key] = stacks[i]
            # only the centre slot of the sharp array is ever read
            sharp[key] = _center_only(targets[i], t)
            samples.append(SampleRef(key, i, window, t // 2))
        return cls(blurry, sharp, samples, t, 1)

    def subset(self, indices):
        return StackDataset(self.blurry, self.sharp, [self.samples[i] for i in indices], self.width, self.step)

    def clip_ids(self):
        return sorted({s.clip_id for s in self.samples})

    @property
    def frame_size(self):
        first = next(iter(self.blurry.values()))
        return first.shape[-2:]

    def get_uint8(self, i):
        s = self.samples[i]
        half = (self.width - 1) // 2
        stack = self.blurry[s.clip_id][s.position - half:s.position + half + 1]
        return stack, self.sharp[s.clip_id][s.position]

    def batch(self, indices, crop=None, rng=None, flips=True, dtype=np.float32):
        """Stacks ``(B, T, 3, h, w)`` and targets ``(B, 3, h, w)`` in [0, 1].

        With ``crop`` set, each sample gets its own random crop and flips,
        shared between its stack and target.
        """
        xs, ys = [], []
        for i in indices:
            stack, target = self.get_uint8(i)
            if crop is not None:
                d = draw_augmentation(stack.shape[-2], stack.shape[-1], crop, rng, flips)
                stack, target = apply_augmentation(stack, d), apply_augmentation(target, d)
            xs.append(stack)
            ys.append(target)
        scale = dtype(1.0 / 255.0)
        return (np.stack(xs).astype(dtype) * scale, np.stack(ys).astype(dtype) * scale)

    def all_arrays(self, dtype=np.float32):
        return self.batch(range(len(self)), dtype=dtype)

    def center_blurry(self, i, dtype=np.float32):
        stack, _ = self.get_uint8(i)
        return stack[len(stack) // 2].astype(dtype) / 255.0


def _to_uint8(a):
    a = np.asarray(a)
    if a.dtype == np.uint8:
        return a
    return np.floor(np.clip(a, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def _center_only(target, t):
    out = np.zeros((t,) + target.shape, np.uint8)
    out[t // 2] = target
    return out
