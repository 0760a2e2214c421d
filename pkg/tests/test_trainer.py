from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from david.architecture import BackboneBranch, DavidModel, InternalAttentionModule
from david.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from david.config import ConfigError, PhaseConfig, load_config, parse_overrides
from david.dataset import StackDataset
from david.engine import AdamState, Tensor, adam_step, no_grad
from david.trainer import (
    NonFiniteLossError,
    Trainer,
    early_stop,
    epoch_batches,
    l2_loss,
    lr_schedule,
    phase1_pretrain,
    phase2_train_internal,
    phase3_train_david,
    phase_stages,
)


def toy_data(n=4, t=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((n, 1, 3, size, size))
    stacks = np.clip(base + 0.05 * rng.normal(size=(n, t, 3, size, size)), 0, 1)
    return StackDataset.from_arrays(stacks, base[:, 0])


def cfg(phase=1, **kw):
    base = dict(phase=phase, initial_lr=1e-3, fine_tune_lr=5e-4, batch_size=2, crop=16, patience=0,
                steps_per_epoch=1, flips=False)
    if phase > 1:
        base.update(freeze_epochs=3, total_epochs=6)
    else:
        base.update(total_epochs=4)
    base.update(kw)
    return PhaseConfig(**base)


S = Fraction(1, 32)


# -- objective and schedule -------------------------------------------------------

def test_l2_examples():
    t = np.random.default_rng(0).random((2, 3, 4, 4))
    assert float(l2_loss(Tensor(t), t).data) == 0.0
    assert abs(float(l2_loss(Tensor(t + 0.1), t).data) - 0.01) < 1e-12
    p = np.random.default_rng(1).random((3, 5, 5))
    q = np.random.default_rng(2).random((3, 5, 5))
    total = 0.0
    for a, b in zip(p.ravel(), q.ravel()):
        total += (a - b) ** 2
    assert abs(float(l2_loss(Tensor(p), q).data) - total / p.size) < 1e-7
    with pytest.raises(ValueError):
        l2_loss(Tensor(p), q[:2])


def test_lr_schedule():
    assert all(lr_schedule(e, 1e-5) == 1e-5 for e in range(100))
    assert lr_schedule(100, 1e-5) == 0.96 * 1e-5
    assert abs(lr_schedule(250, 1.0) - 0.9216) < 1e-15
    for e in range(1001):
        assert lr_schedule(e, 3e-4) == 3e-4 * 0.96 ** (e // 100)
    with pytest.raises(ValueError):
        lr_schedule(-1, 1.0)


def test_early_stop():
    assert not early_stop(list(range(200)), 50)
    assert early_stop([1, 2, 5] + [5] * 51, 50)
    assert not early_stop([1, 2, 5] + [4] * 50, 50)
    assert not early_stop([3, 2, 1], 50)


# -- config -----------------------------------------------------------------------

def test_phase_defaults():
    assert PhaseConfig(phase=2).freeze_epochs == 100 and PhaseConfig(phase=2).total_epochs == 300
    assert PhaseConfig(phase=3).freeze_epochs == 200 and PhaseConfig(phase=3).total_epochs == 400
    assert PhaseConfig(phase=3, phase3_stages=3).total_epochs == 600
    c = PhaseConfig()
    assert (c.initial_lr, c.fine_tune_lr, c.batch_size, c.patience, c.decay_factor, c.decay_period) == \
        (1e-5, 2e-6, 16, 50, 0.96, 100)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        PhaseConfig(phase=2, initial_lr=1e-6, fine_tune_lr=2e-6)
    with pytest.raises(ConfigError):
        PhaseConfig(total_epochs=0)
    with pytest.raises(ConfigError):
        PhaseConfig(crop=20)
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_overrides(["learning_rate=1"])
    (tmp_path / "c.yaml").write_text("phase: 2\nbatch_size: 4\n")
    c = load_config(tmp_path / "c.yaml", ["batch_size=8", "channel_scale=1/8", "initial_lr=1e-3"])
    assert c.phase == 2 and c.batch_size == 8 and c.scale == Fraction(1, 8) and c.initial_lr == 1e-3
    (tmp_path / "bad.yaml").write_text("bogus: 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(tmp_path / "bad.yaml")


def test_stage_boundaries():
    mod = InternalAttentionModule(2, S, rng=0)
    stages = phase_stages(PhaseConfig(phase=2), mod)
    assert [(s.start, s.end, s.lr) for s in stages] == [(0, 100, 1e-5), (100, 300, 2e-6)]
    assert stages[0].frozen == mod.backbone_parameter_names() and not stages[1].frozen
    model = DavidModel((3, 7), 2, S, rng=0)
    two = phase_stages(PhaseConfig(phase=3), model)
    assert [(s.start, s.end) for s in two] == [(0, 200), (200, 400)]
    assert all(n.startswith("internal") for n in two[0].frozen)
    assert set(model.parameters()) - two[0].frozen == {n for n in model.parameters() if n.startswith("external")}
    three = phase_stages(PhaseConfig(phase=3, phase3_stages=3), model)
    assert [(s.start, s.end) for s in three] == [(0, 200), (200, 400), (400, 600)]
    assert all(".branch" in n for n in three[1].frozen)


# -- freezing and optimizer -------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), mask=st.lists(st.booleans(), min_size=5, max_size=5))
def test_freeze_mask_property(seed, mask):
    rng = np.random.default_rng(seed)
    names = [f"p{i}" for i in range(5)]
    params = {n: Tensor(rng.normal(size=(3, 2)).astype(np.float32), requires_grad=True) for n in names}
    frozen = {n for n, m in zip(names, mask) if m}
    state = AdamState()
    for _ in range(3):
        before = {n: p.data.copy() for n, p in params.items()}
        grads = {n: rng.normal(size=(3, 2)).astype(np.float32) for n in names}
        adam_step(params, state, 1e-2, grads=grads, frozen=frozen)
        for n in names:
            if n in frozen:
                assert params[n].data.tobytes() == before[n].tobytes()
            else:
                assert np.all(params[n].data != before[n])


def test_one_step_descent():
    ds = toy_data(1, 1)
    branch = BackboneBranch(1, Fraction(1, 16), rng=0)
    x, y = ds.batch([0])

    def loss():
        with no_grad():
            return float(l2_loss(branch.predict_stack(x), y).data)

    before = loss()
    tr = Trainer(branch, ds, ds, cfg(initial_lr=1e-4, batch_size=1))
    tr.step(tr.stages[0], 1e-4, np.array([0]), np.random.default_rng(0), AdamState())
    assert loss() < before


def accumulate_once(micro):
    branch = BackboneBranch(3, Fraction(1, 16), rng=2, dtype=np.float64)
    ds = toy_data(4, 3)
    tr = Trainer(branch, ds, ds, cfg(batch_size=4, micro_batch=micro, dtype="float64"))
    tr.step(tr.stages[0], 1e-3, np.arange(4), np.random.default_rng(0), AdamState())
    return {k: v.data.copy() for k, v in branch.parameters().items()}


def test_gradient_accumulation_matches_full_batch():
    full, micro = accumulate_once(0), accumulate_once(1)
    for k in full:
        np.testing.assert_allclose(full[k], micro[k], rtol=0, atol=1e-9)


def test_epoch_batches_deterministic():
    a, _ = epoch_batches(10, 4, 3, 7)
    b, _ = epoch_batches(10, 4, 3, 7)
    assert [list(x) for x in a] == [list(x) for x in b]
    assert sorted(np.concatenate(a)) == list(range(10))
    c, _ = epoch_batches(3, 2, 0, 0, steps=5)
    assert len(c) == 5 and all(len(x) == 2 for x in c)


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip_bytes_and_outputs(tmp_path):
    model = DavidModel((3, 7), 2, S, rng=5)
    state = AdamState(step_count=3)
    for n, p in model.parameters().items():
        state.moments_for(n, p.data)[0][...] = 0.5
    p1 = save_checkpoint(tmp_path / "a.ckpt", model, {"epoch": 3, "val_history": [1.5, 2.25]}, state)
    ck = load_checkpoint(p1)
    p2 = ck.save(tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert ck.optimizer.step_count == 3 and ck.meta["val_history"] == [1.5, 2.25]
    clone = ck.build_model()
    x = np.random.default_rng(0).random((3, 3, 16, 16), dtype=np.float32)
    with no_grad():
        assert model.forward(x)[0].data.tobytes() == clone.forward(x)[0].data.tobytes()
    assert sorted(clone.parameters()) == sorted(model.parameters())


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello world")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_phase2_rejects_mismatched_checkpoint(tmp_path):
    wrong = save_checkpoint(tmp_path / "b3.ckpt", BackboneBranch(3, S, rng=0))
    mod = InternalAttentionModule(2, S, rng=0)
    with pytest.raises(CheckpointError, match=r"branch0: parameter conv1\.weight"):
        phase2_train_internal(mod, [wrong, wrong], toy_data(2, 3), None, cfg(2))


# -- training runs ----------------------------------------------------------------

def test_phase2_freezes_backbones_until_boundary():
    mod = InternalAttentionModule(2, S, rng=1)
    ds = toy_data(2, 3)
    back0 = {n: p.data.copy() for n, p in mod.parameters().items() if n.startswith("branch")}
    att0 = {n: p.data.copy() for n, p in mod.parameters().items() if n.startswith("attention")}
    res = phase2_train_internal(mod, None, ds, ds, cfg(2), stop_after=3)
    assert res.interrupted
    params = mod.parameters()
    assert all(params[n].data.tobytes() == v.tobytes() for n, v in back0.items())
    assert any(params[n].data.tobytes() != v.tobytes() for n, v in att0.items())
    res = phase2_train_internal(mod, None, ds, ds, cfg(2))
    assert [e["stage"] for e in res.epoch_log] == ["attention"] * 3 + ["finetune"] * 3
    assert [e["lr"] for e in res.epoch_log][3] == 5e-4


def test_phase1_resume_matches_uninterrupted(tmp_path):
    ds = toy_data(4, 3)
    full = phase1_pretrain(BackboneBranch(3, Fraction(1, 16), rng=0), ds, ds, cfg(total_epochs=6),
                           run_dir=tmp_path / "full")
    part = phase1_pretrain(BackboneBranch(3, Fraction(1, 16), rng=0), ds, ds, cfg(total_epochs=6),
                           run_dir=tmp_path / "part", stop_after=2)
    assert part.interrupted and len(part.losses) == 2
    rest = phase1_pretrain(BackboneBranch(3, Fraction(1, 16), rng=99), ds, ds, cfg(total_epochs=6),
                           run_dir=tmp_path / "part", resume=True)
    assert rest.losses == full.losses and rest.history == full.history
    assert (tmp_path / "part/phase1.ckpt").read_bytes() == (tmp_path / "full/phase1.ckpt").read_bytes()


def test_seeded_determinism_20_steps():
    runs = []
    for _ in range(2):
        res = phase1_pretrain(BackboneBranch(3, Fraction(1, 16), rng=4), toy_data(4, 3), None,
                              cfg(total_epochs=20, crop=16))
        runs.append(res.losses)
    assert len(runs[0]) == 20 and runs[0] == runs[1]


class ScriptedTrainer(Trainer):
    def __init__(self, *a, script, **kw):
        super().__init__(*a, **kw)
        self.script = list(script)

    def validate(self):
        return self.script.pop(0)


def test_early_stopping_restores_best(tmp_path):
    branch = BackboneBranch(1, Fraction(1, 16), rng=0)
    ds = toy_data(2, 1)
    tr = ScriptedTrainer(branch, ds, ds, cfg(total_epochs=50, patience=2), run_dir=tmp_path,
                         script=[1.0, 5.0, 3.0, 3.0, 3.0, 9.0])
    res = tr.run()
    assert res.stopped_early and len(res.history) == 5 and res.best_epoch == 1
    best = load_checkpoint(tmp_path / "phase1_best.ckpt")
    assert all(np.array_equal(best.parameters[n], p.data) for n, p in branch.parameters().items())


def test_nan_loss_aborts_with_postmortem(tmp_path):
    branch = BackboneBranch(1, Fraction(1, 16), rng=0)
    branch.params["conv1.bias"].data[0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        phase1_pretrain(branch, toy_data(2, 1), None, cfg(), run_dir=tmp_path)
    assert info.value.checkpoint.exists()
    assert isinstance(load_checkpoint(info.value.checkpoint), Checkpoint)


def test_phase3_freezes_internal_modules():
    model = DavidModel((3, 7), 2, S, rng=2)
    inner = {n: p.data.copy() for n, p in model.parameters().items() if n.startswith("internal")}
    res = phase3_train_david(model, None, toy_data(2, 3), None, cfg(3), stop_after=3)
    params = model.parameters()
    assert all(params[n].data.tobytes() == v.tobytes() for n, v in inner.items())
    assert len(res.losses) == 3


def test_empty_dataset_rejected():
    empty = toy_data(2, 1).subset([])
    with pytest.raises(ValueError, match="empty"):
        phase1_pretrain(BackboneBranch(1, S, rng=0), empty, None, cfg())


def test_phase2_accepts_trained_models_as_pretrained():
    ds = toy_data(2, 3)
    b1 = phase1_pretrain(BackboneBranch(1, S, rng=5), ds, None, cfg(total_epochs=1))
    b3 = BackboneBranch(3, S, rng=6)
    mod = InternalAttentionModule(2, S, rng=1)
    phase2_train_internal(mod, [b1, b3], ds, ds, cfg(2), stop_after=1)
    assert mod.branches[0].params["conv1.weight"].data.tobytes() == b1.model.params["conv1.weight"].data.tobytes()
    assert mod.branches[1].params["conv20.bias"].data.tobytes() == b3.params["conv20.bias"].data.tobytes()
