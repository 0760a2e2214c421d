"""Multi-phase training: L2 objective, Adam, staged freezing, early stopping, resume."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_parameters, save_checkpoint
from .config import PhaseConfig
from .engine import AdamState, adam_step, backward, mse
from .evaluate import evaluate_dataset, model_width

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def l2_loss(pred, target):
    """Mean squared error over every element."""
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ValueError(f"l2_loss: prediction {tuple(pred.shape)} and target {tuple(np.shape(target))} differ")
    return mse(pred, target)


def lr_schedule(epoch, base_lr, decay_factor=0.96, decay_period=100):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * decay_factor ** (epoch // decay_period)


def early_stop(history, patience=50):
    """True iff the best value (first occurrence) is more than ``patience`` epochs old."""
    if patience <= 0 or len(history) <= patience:
        return False
    best = int(np.argmax(history))
    return (len(history) - 1 - best) > patience


@dataclass(frozen=True)
class Stage:
    name: str
    start: int
    end: int
    lr: float
    frozen: frozenset


@dataclass(frozen=True)
class FreezeMask:
    frozen_parameter_names: frozenset

    def __contains__(self, name):
        return name in self.frozen_parameter_names


def phase_stages(cfg, model):
    """Epoch ranges, learning rates and frozen parameter sets of a phase."""
    names = set(model.parameters())
    if cfg.phase == 1:
        return [Stage("pretrain", 0, cfg.total_epochs, cfg.initial_lr, frozenset())]
    a = cfg.freeze_epochs
    if cfg.phase == 2:
        frozen = frozenset(n for n in names if n.startswith("branch"))
        return [Stage("attention", 0, a, cfg.initial_lr, frozen),
                Stage("finetune", a, cfg.total_epochs, cfg.fine_tune_lr, frozenset())]
    internal = frozenset(n for n in names if n.startswith("internal"))
    backbones = frozenset(n for n in internal if ".branch" in n)
    if cfg.phase3_stages == 2:
        return [Stage("external", 0, a, cfg.initial_lr, internal),
                Stage("finetune", a, cfg.total_epochs, cfg.fine_tune_lr, frozenset())]
    b = a + cfg.attention_epochs
    return [Stage("external", 0, a, cfg.initial_lr, internal),
            Stage("attention", a, b, cfg.fine_tune_lr, backbones),
            Stage("finetune", b, cfg.total_epochs, cfg.fine_tune_lr, frozenset())]


def stage_at(stages, epoch):
    for k, s in enumerate(stages):
        if s.start <= epoch < s.end:
            return k, s
    raise ValueError(f"epoch {epoch} is outside every stage")


def epoch_batches(n, batch_size, epoch, seed, steps=0):
    """Index batches for one epoch; the order depends only on (seed, epoch)."""
    rng = np.random.default_rng([int(seed), int(epoch)])
    if not steps:
        perm = rng.permutation(n)
        return [perm[i:i + batch_size] for i in range(0, n, batch_size)], rng
    need = steps * batch_size
    stream = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])
    return [stream[i * batch_size:(i + 1) * batch_size] for i in range(steps)], rng


@dataclass
class TrainResult:
    model: object
    history: list
    losses: list
    epoch_log: list
    best_epoch: int
    best_psnr: float
    checkpoint: Path = None
    stopped_early: bool = False
    interrupted: bool = False


class Trainer:
    """Runs the stages of one phase over a model.

    Per-epoch RNG streams, stored optimizer state and per-epoch checkpoints
    make an interrupted run resume onto the same trajectory.  Adam moments
    are reset at each stage boundary.
    """

    def __init__(self, model, train, val, cfg, run_dir=None, tag=None, stages=None, extra_meta=None):
        if len(train) == 0:
            raise ValueError("training dataset is empty")
        self.model = model
        self.train = train
        self.val = val if val is not None and len(val) else train
        self.cfg = cfg
        self.stages = stages or phase_stages(cfg, model)
        self.run_dir = Path(run_dir) if run_dir else None
        self.tag = tag or f"phase{cfg.phase}"
        self.extra_meta = dict(extra_meta or {})
        h, w = train.frame_size
        self.crop = min(cfg.crop, h - h % 16, w - w % 16)
        if self.crop < 16:
            raise ValueError(f"frames of {h}x{w} are too small to crop")
        self.params = model.parameters()

    def path(self, kind):
        return self.run_dir / f"{self.tag}_{kind}.ckpt" if self.run_dir else None

    def _meta(self, epoch, state):
        return {"phase": self.cfg.phase, "tag": self.tag, "epoch": epoch, "seed": self.cfg.seed,
                "config": self.cfg.to_dict(), **self.extra_meta, **state}

    def validate(self):
        return evaluate_dataset(self.model, self.val, batch_size=self.cfg.val_batch_size).average

    def step(self, stage, lr, batch_idx, rng, adam):
        cfg = self.cfg
        for p in self.params.values():
            p.grad = None
        x, y = self.train.batch(batch_idx, crop=self.crop, rng=rng, flips=cfg.flips,
                                dtype=np.dtype(cfg.dtype).type)
        chunk = cfg.micro_batch or len(batch_idx)
        total = 0.0
        for lo in range(0, len(batch_idx), chunk):
            xs, ys = x[lo:lo + chunk], y[lo:lo + chunk]
            loss = l2_loss(self.model.predict_stack(xs), ys)
            frac = len(xs) / len(batch_idx)
            total += float(loss.data) * frac
            if not math.isfinite(float(loss.data)):
                return float(loss.data)
            # mean-reduced L2: weighting chunk means by their share gives the batch mean
            backward(loss * frac if frac != 1.0 else loss)
        adam_step(self.params, adam, lr, frozen=stage.frozen)
        return total

    def _set_trainable(self, stage):
        for name, p in self.params.items():
            p.requires_grad = name not in stage.frozen

    def run(self, resume=False, stop_after=None):
        cfg = self.cfg
        state = {"val_history": [], "losses": [], "epoch_log": [], "best_epoch": -1, "best_psnr": -math.inf,
                 "adam_stage": -1}
        adam = AdamState()
        start = 0
        best_params = None
        if resume:
            latest = self.path("latest")
            if latest is None or not latest.exists():
                raise FileNotFoundError(f"nothing to resume: {latest} does not exist")
            ck = load_checkpoint(latest)
            load_parameters(self.model, ck.parameters)
            meta = ck.meta
            state = _restore_state({k: meta[k] for k in state})
            adam = ck.optimizer or AdamState()
            start = meta["epoch"] + 1
            best = self.path("best")
            if best.exists():
                best_params = load_checkpoint(best).parameters
        ran = 0
        stopped = interrupted = False
        for epoch in range(start, self.stages[-1].end):
            if stop_after is not None and ran >= stop_after:
                interrupted = True
                break
            k, stage = stage_at(self.stages, epoch)
            if state["adam_stage"] != k:
                adam = AdamState()
                state["adam_stage"] = k
            self._set_trainable(stage)
            lr = lr_schedule(epoch - stage.start, stage.lr, cfg.decay_factor, cfg.decay_period)
            batches, rng = epoch_batches(len(self.train), cfg.batch_size, epoch, cfg.seed, cfg.steps_per_epoch)
            epoch_losses = []
            for b in batches:
                loss = self.step(stage, lr, b, rng, adam)
                if not math.isfinite(loss):
                    ck = None
                    if self.run_dir:
                        state["losses"] = state["losses"] + epoch_losses + [loss]
                        ck = save_checkpoint(self.path("nan"), self.model,
                                             self._meta(epoch, _jsonable(state)), adam)
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}", ck)
                epoch_losses.append(loss)
            val = self.validate()
            state["losses"].extend(epoch_losses)
            state["val_history"].append(val)
            state["epoch_log"].append({"epoch": epoch, "stage": stage.name, "lr": lr,
                                       "train_loss": float(np.mean(epoch_losses)), "val_psnr": val})
            log.info("epoch %d stage %s lr %.3e train_loss %.6f val_psnr %.3f dB",
                     epoch, stage.name, lr, np.mean(epoch_losses), val)
            if val > state["best_psnr"]:
                state["best_psnr"], state["best_epoch"] = val, epoch
                best_params = {n: p.data.copy() for n, p in self.params.items()}
                if self.run_dir:
                    save_checkpoint(self.path("best"), self.model, self._meta(epoch, _jsonable(state)))
            if self.run_dir:
                save_checkpoint(self.path("latest"), self.model, self._meta(epoch, _jsonable(state)), adam)
            ran += 1
            if stage is self.stages[-1]:
                tail = [v for e, v in zip(_epochs(state), state["val_history"]) if e >= stage.start]
                if early_stop(tail, cfg.patience):
                    stopped = True
                    log.info("early stop at epoch %d (best %d)", epoch, state["best_epoch"])
                    break
        for p in self.params.values():
            p.requires_grad = True
            p.grad = None
        final = None
        if not interrupted:
            if best_params is not None:
                load_parameters(self.model, best_params)
            if self.run_dir:
                final = save_checkpoint(self.run_dir / f"{self.tag}.ckpt", self.model,
                                        self._meta(state["best_epoch"], _jsonable(state)))
        return TrainResult(self.model, state["val_history"], state["losses"], state["epoch_log"],
                           state["best_epoch"], state["best_psnr"], final, stopped, interrupted)


def _epochs(state):
    return [e["epoch"] for e in state["epoch_log"]]


def _jsonable(state):
    out = dict(state)
    if not math.isfinite(out["best_psnr"]):
        out["best_psnr"] = None
    return out


def _restore_state(meta):
    if meta.get("best_psnr") is None:
        meta["best_psnr"] = -math.inf
    return meta


# -- phases -----------------------------------------------------------------------

def _check_cfg(cfg, phase):
    if not isinstance(cfg, PhaseConfig):
        raise TypeError("cfg must be a PhaseConfig")
    if cfg.phase != phase:
        raise ValueError(f"config is for phase {cfg.phase}, expected {phase}")


def phase1_pretrain(branch, train, val, cfg, run_dir=None, tag=None, resume=False, stop_after=None):
    _check_cfg(cfg, 1)
    meta = {"frames": branch.temporal_width, "blur_level": cfg.blur_level}
    return Trainer(branch, train, val, cfg, run_dir, tag, extra_meta=meta).run(resume, stop_after)


def _load_into(target, source, label):
    """``source``: checkpoint path, Checkpoint, TrainResult, live model or name -> array dict."""
    if isinstance(source, TrainResult):
        source = source.model
    ck = load_checkpoint(source) if isinstance(source, (str, Path)) else source
    if callable(getattr(ck, "parameters", None)):
        params = {k: v.data for k, v in ck.parameters().items()}
    else:
        params = ck.parameters if isinstance(getattr(ck, "parameters", None), dict) else ck
    try:
        load_parameters(target, params)
    except CheckpointError as exc:
        raise CheckpointError(f"{label}: {exc}") from None


def phase2_train_internal(module, pretrained, train, val, cfg, run_dir=None, tag=None, resume=False,
                          stop_after=None):
    """``pretrained`` gives one backbone (checkpoint, path, result or model) per branch, or None."""
    _check_cfg(cfg, 2)
    if pretrained is not None and not resume:
        if len(pretrained) != len(module.branches):
            raise ValueError(f"{len(module.branches)} branches but {len(pretrained)} checkpoints")
        for i, (br, src) in enumerate(zip(module.branches, pretrained)):
            _load_into(br, src, f"branch{i}")
    meta = {"blur_level": module.blur_level_tag}
    return Trainer(module, train, val, cfg, run_dir, tag, extra_meta=meta).run(resume, stop_after)


def phase3_train_david(model, pretrained, train, val, cfg, run_dir=None, tag=None, resume=False,
                       stop_after=None):
    _check_cfg(cfg, 3)
    if pretrained is not None and not resume:
        if len(pretrained) != len(model.internal_modules):
            raise ValueError(f"{len(model.internal_modules)} internal modules but {len(pretrained)} checkpoints")
        for j, (mod, src) in enumerate(zip(model.internal_modules, pretrained)):
            _load_into(mod, src, f"internal{j}")
    meta = {"blur_levels": list(model.blur_levels)}
    return Trainer(model, train, val, cfg, run_dir, tag, extra_meta=meta).run(resume, stop_after)


def stack_width(model):
    return model_width(model)
