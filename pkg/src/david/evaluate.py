"""PSNR evaluation, per-video tables, stacked-frame ablation and attention heatmaps."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import StackDataset
from .engine import no_grad
from .synth import DatasetManifest, quantize, save_png

PSNR_CAP = 100.0


def psnr(pred, target, cap=PSNR_CAP):
    """10*log10(1/MSE) on [0, 1] images, capped at ``cap`` dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"psnr: prediction {pred.shape} and target {target.shape} differ in shape")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def to_8bit(img):
    """Round-trip through the stored 8-bit format."""
    return quantize(img).astype(np.float64) / 255.0


@dataclass(frozen=True)
class EvalRecord:
    clip_id: str
    frame_index: int
    window: int
    psnr_db: float


class EvalTable:
    """Per-frame records aggregated the way the benchmark tables are.

    Each video's PSNR is the mean of its frames; the grand average is the
    mean of the per-video values (not a pooled mean over frames).
    """

    def __init__(self, records, name="model", skipped=0):
        self.records = sorted(records, key=lambda r: (r.clip_id, r.frame_index))
        self.name = name
        self.skipped = skipped

    def per_video(self):
        groups = {}
        for r in self.records:
            groups.setdefault(r.clip_id, []).append(r.psnr_db)
        return {c: math.fsum(v) / len(v) for c, v in sorted(groups.items())}

    def windows(self):
        return {r.clip_id: r.window for r in self.records}

    @property
    def average(self):
        rows = self.per_video()
        if not rows:
            raise ValueError("empty evaluation table")
        return math.fsum(rows.values()) / len(rows)

    @property
    def pooled_average(self):
        return math.fsum(r.psnr_db for r in self.records) / len(self.records)

    def merge(self, other):
        return EvalTable(self.records + other.records, self.name, self.skipped + other.skipped)

    def by_subset(self):
        out = {}
        for r in self.records:
            out.setdefault(r.window, []).append(r)
        return {w: EvalTable(v, self.name) for w, v in sorted(out.items())}

    def to_text(self):
        rows = self.per_video()
        windows = self.windows()
        counts = {}
        for r in self.records:
            counts[r.clip_id] = counts.get(r.clip_id, 0) + 1
        width = max([len("video"), len("Average")] + [len(c) for c in rows])
        lines = [f"{'video':<{width}}  window  frames  PSNR(dB)"]
        for c, v in rows.items():
            lines.append(f"{c:<{width}}  {windows[c]:>6}  {counts[c]:>6}  {v:8.2f}")
        lines.append(f"{'Average':<{width}}  {'':>6}  {len(self.records):>6}  {self.average:8.2f}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self):
        lines = [json.dumps({"clip_id": r.clip_id, "frame_index": r.frame_index, "window": r.window,
                             "psnr_db": r.psnr_db, "model": self.name}, sort_keys=True) for r in self.records]
        rows = self.per_video()
        lines += [json.dumps({"clip_id": c, "video_psnr_db": v, "model": self.name}, sort_keys=True)
                  for c, v in rows.items()]
        lines.append(json.dumps({"average_psnr_db": self.average, "model": self.name, "videos": len(rows),
                                 "skipped": self.skipped}, sort_keys=True))
        return "\n".join(lines) + "\n"


def comparison_table(tables):
    """Methods as rows, videos as columns, final column the per-video average."""
    videos = sorted({c for t in tables for c in t.per_video()})
    name_w = max(len("method"), *(len(t.name) for t in tables))
    col_w = max(8, *(len(v) for v in videos)) if videos else 8
    head = f"{'method':<{name_w}}  " + "  ".join(f"{v:>{col_w}}" for v in videos) + f"  {'Average':>{col_w}}"
    lines = [head]
    for t in tables:
        rows = t.per_video()
        cells = [f"{rows[v]:>{col_w}.2f}" if v in rows else f"{'-':>{col_w}}" for v in videos]
        lines.append(f"{t.name:<{name_w}}  " + "  ".join(cells) + f"  {t.average:>{col_w}.2f}")
    return "\n".join(lines) + "\n"


# -- models as predictors ---------------------------------------------------------

class GroundTruthOracle:
    """Returns the target itself; scores the cap everywhere."""

    stack_width = 1
    uses_target = True

    def predict_batch(self, stacks, targets):
        return targets


class PassThrough:
    """Returns the blurry centre frame."""

    stack_width = 1
    uses_target = False

    def predict_batch(self, stacks, targets=None):
        return stacks[:, stacks.shape[1] // 2]


def model_width(model):
    for attr in ("stack_width", "temporal_width"):
        if hasattr(model, attr):
            return int(getattr(model, attr))
    raise TypeError(f"cannot tell the temporal width of {type(model).__name__}")


def predict_batch(model, stacks, targets=None):
    if hasattr(model, "predict_batch"):
        return np.asarray(model.predict_batch(stacks, targets))
    with no_grad():
        return model.predict_stack(stacks).data


def evaluate_dataset(model, source, windows=None, split=None, width=None, batch_size=8, name="model"):
    """Score ``model`` on every usable sample of ``source``.

    ``source`` is a StackDataset or a manifest (path or object); ``width``
    sets the temporal context used to decide which edge samples to skip
    (default: the model's own width).  Predictions are clipped and quantized
    to 8 bit before scoring.
    """
    if isinstance(source, StackDataset):
        ds = source
    else:
        ds = StackDataset.from_manifest(source, width or model_width(model), split=split, windows=windows)
    if len(ds) == 0:
        raise ValueError("evaluation subset is empty")
    records = []
    for lo in range(0, len(ds), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(ds))))
        stacks, targets = ds.batch(idx)
        preds = predict_batch(model, stacks, targets)
        for k, i in enumerate(idx):
            s = ds.samples[i]
            records.append(EvalRecord(s.clip_id, s.center_index, s.window,
                                      psnr(to_8bit(preds[k]), targets[k].astype(np.float64))))
    return EvalTable(records, name, ds.skipped)


def ablate_stacked_frames(branches, source, widths=(1, 3, 5, 7, 9), windows=None, split=None):
    """PSNR per stacked-frame count; missing branches are reported as ``None``.

    All widths are scored on the samples valid for the widest present
    branch so the columns are comparable.
    """
    present = {w: b for w, b in branches.items() if b is not None and w in widths}
    if not present:
        raise ValueError("no trained branches to ablate")
    ctx = max(present)
    ds = source if isinstance(source, StackDataset) else StackDataset.from_manifest(source, ctx, split, windows)
    return {w: (evaluate_dataset(present[w], ds, name=f"{w} frames").average if w in present else None)
            for w in widths}


def format_ablation(rows, label="C-DVD"):
    """``rows`` maps a row label to ``{width: psnr or None}``."""
    widths = sorted({w for r in rows.values() for w in r})
    lw = max(len("dataset"), *(len(k) for k in rows))
    lines = [f"{'dataset':<{lw}}  " + "  ".join(f"{str(w) + ' fr':>8}" for w in widths)]
    for k, r in rows.items():
        cells = [f"{r[w]:>8.2f}" if r.get(w) is not None else f"{'absent':>8}" for w in widths]
        lines.append(f"{k:<{lw}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


# -- attention maps ---------------------------------------------------------------

HEATMAP_CMAP = "viridis"
HEATMAP_RANGE = (0.0, 1.0)


@dataclass
class AttentionDump:
    """Everything shown in one attention figure.

    ``external_maps`` is ``(M, 3, H, W)``, ``internal_maps`` ``(M, N, 3, H, W)``,
    images are ``(3, H, W)`` in [0, 1].
    """

    external_maps: np.ndarray
    internal_maps: np.ndarray
    deblurred: np.ndarray
    input_center: np.ndarray

    def __post_init__(self):
        m = self.external_maps.shape[0]
        if self.internal_maps.shape[0] != m:
            raise ValueError(f"{m} external maps but internal maps for {self.internal_maps.shape[0]} modules")
        if self.deblurred.shape != self.input_center.shape:
            raise ValueError("deblurred and input images differ in shape")


def attention_dump(model, stack):
    """Run a DavidModel on one ``(T, 3, H, W)`` stack and collect its maps."""
    with no_grad():
        final, ext_w, results = model.forward(stack)
    internal = np.stack([r[1].data for r in results])
    center = np.asarray(stack)[np.asarray(stack).shape[0] // 2]
    return AttentionDump(ext_w.data.copy(), internal, np.clip(final.data, 0, 1), center)


def _lut():
    from matplotlib import colormaps
    return (colormaps[HEATMAP_CMAP](np.linspace(0, 1, 256))[:, :3] * 255 + 0.5).astype(np.uint8)


def heatmap_rgb(weights):
    """Channel-mean a ``(3, H, W)`` (or ``(H, W)``) map and colour it on the fixed [0, 1] scale."""
    m = np.asarray(weights, dtype=np.float64)
    if m.ndim == 3:
        m = m.mean(axis=0)
    lo, hi = HEATMAP_RANGE
    idx = np.floor(np.clip((m - lo) / (hi - lo), 0, 1) * 255 + 0.5).astype(np.intp)
    return _lut()[idx]


def colorbar_rgb(height=256, width=24):
    ramp = np.linspace(1, 0, height)[:, None].repeat(width, axis=1)
    return heatmap_rgb(ramp)


def heatmap_filenames(m, n):
    """Panel-ordered names: input, output, M external maps, then M x N internal maps."""
    names = ["01_input_blur.png", "02_output.png"]
    panel = 3
    for j in range(m):
        names.append(f"{panel:02d}_ext_{j}_att_heat.png")
        panel += 1
    for j in range(m):
        for i in range(n):
            names.append(f"{panel:02d}_ext_{j}_int_{i}_att_heat.png")
            panel += 1
    return names


def export_attention_heatmaps(dump, out_dir, colorbar=False):
    """Write the figure panels as PNGs; returns the written paths.

    Every map uses the same fixed [0, 1] viridis scale, recorded in
    ``legend.json``; ``colorbar=True`` also writes the shared scale bar.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write heatmaps to {out_dir}: {exc}") from exc
    m, n = dump.internal_maps.shape[:2]
    names = heatmap_filenames(m, n)
    images = [np.transpose(dump.input_center, (1, 2, 0)), np.transpose(dump.deblurred, (1, 2, 0))]
    images += [heatmap_rgb(dump.external_maps[j]) for j in range(m)]
    images += [heatmap_rgb(dump.internal_maps[j, i]) for j in range(m) for i in range(n)]
    paths = [save_png(out_dir / name, img) for name, img in zip(names, images)]
    legend = {"colormap": HEATMAP_CMAP, "range": list(HEATMAP_RANGE), "reduction": "channel mean",
              "external_modules": int(m), "internal_branches": int(n), "files": names}
    (out_dir / "legend.json").write_text(json.dumps(legend, indent=1, sort_keys=True) + "\n")
    if colorbar:
        paths.append(save_png(out_dir / "colorbar.png", colorbar_rgb()))
    return paths


def manifest_source(path_or_manifest):
    if isinstance(path_or_manifest, DatasetManifest):
        return path_or_manifest
    return DatasetManifest.read(path_or_manifest)
