from hypothesis import given, settings
from hypothesis import strategies as st
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
import torch

from spurig.autodiff import COMPLEX_DTYPE, ActivationCounter
from spurig.forward import ForwardOperator
from spurig.sampling import make_trajectory
from spurig.shared import MemoryBudgetError
from spurig.training import (
    ABLATION_VARIANTS,
    GLEAM_RATIO,
    MAX_ROTATION_DEG,
    MAX_SHIFT_VOXELS,
    PRETRAINING_RATES,
    SCALE_RANGE,
    TIER_INDEX,
    AffineTransform,
    TrainingPlan,
    TrainingSample,
    TrainingSet,
    ablation_runs,
    apply_transform,
    augment,
    finetune,
    gleam_train,
    gleam_weights,
    pretrain,
    pseudo_index,
    random_transform,
    run_ablation,
    tier_losses,
    train_stages,
)
from spurig.unrolled import DenoiserModel, UnrollConfig, unroll, zero_filled

SMALL = UnrollConfig(iterations=2, base=8)


def _plan(stage: str, epochs: int = 1, **overrides):
    options = {"ssim_weight": 0.0, "augment": False, **overrides}
    return TrainingPlan.for_stage(stage, epochs, **options)


@pytest.fixture()
def make_sample(make_truth):
    """Training samples on a 16^3 phantom with a radial exact-DFT acquisition."""

    def _create_sample(seed: int = 0) -> TrainingSample:
        phantom, coils, coeffs, basis = make_truth(grid=16, n_coils=2, k=2, n_tr=24, seed=seed)
        traj = make_trajectory(16, 24, 2, "radial-kooshball", readout_budget=16)
        op = ForwardOperator(traj, coils.maps, basis, mode="exact-dft")
        target = torch.as_tensor(coeffs, dtype=COMPLEX_DTYPE)
        with torch.no_grad():
            data = op.apply(target)
        generator = torch.Generator().manual_seed(seed)
        peak = target.abs().max()
        tiers = {"zero-filled": zero_filled(op, data)}
        for R, level in zip(PRETRAINING_RATES, (0.3, 0.2, 0.1, 0.02)):
            noise = torch.randn(target.shape, dtype=COMPLEX_DTYPE, generator=generator)
            tiers[f"llr-R{R}"] = target + level * noise * peak
        masks = {name: torch.as_tensor(m) for name, m in phantom.tissue_masks().items()}
        return TrainingSample(target, masks, tiers, op, data)

    yield _create_sample


def test_pseudo_indices():
    rng = np.random.default_rng(0)
    assert pseudo_index("zero-filled", 6, rng) == 1
    assert pseudo_index("llr-R12", 6, rng) == 2
    assert pseudo_index("llr-R3", 2, rng) == 2
    draws = {pseudo_index("llr-R1", 6, rng) for _ in range(200)}
    assert draws == {4, 5, 6}
    assert pseudo_index("llr-R1", 2, rng) == 2
    with pytest.raises(KeyError):
        pseudo_index("llr-R5", 6, rng)


def test_gleam_weights_grow_geometrically():
    weights = gleam_weights(6)
    assert weights[0] == pytest.approx(1.0)
    assert weights[-1] / weights[0] == pytest.approx(GLEAM_RATIO)
    ratios = weights[1:] / weights[:-1]
    assert np.allclose(ratios, ratios[0])
    assert gleam_weights(1).tolist() == [1.0]


def test_stage_plans():
    plan = TrainingPlan.for_stage("pretrain", 3)
    assert (plan.batch_size, plan.accumulation, plan.lr) == (8, 1, 5e-3)
    gleam = TrainingPlan.for_stage("gleam", 3, accumulation=2)
    assert (gleam.batch_size, gleam.accumulation) == (1, 2)
    with pytest.raises(ValueError, match="stage must be one of"):
        TrainingPlan.for_stage("warmup", 1)
    with pytest.raises(ValueError):
        TrainingPlan("gleam", -1)
    with pytest.raises(ValueError):
        TrainingPlan("gleam", 1, lr=0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_transform_bounds(seed):
    transform = random_transform(np.random.default_rng(seed))
    assert np.allclose(transform.rotation @ transform.rotation.T, np.eye(3))
    assert np.linalg.det(transform.rotation) == pytest.approx(1.0)
    angle = Rotation.from_matrix(transform.rotation).magnitude()
    assert angle <= math.radians(MAX_ROTATION_DEG) + 1e-9
    assert SCALE_RANGE[0] <= transform.scale <= SCALE_RANGE[1]
    assert np.all(np.abs(transform.shift) <= MAX_SHIFT_VOXELS)


def test_identity_transform_keeps_the_volume():
    volume = torch.randn((2, 8, 6, 10), dtype=torch.float64)
    identity = AffineTransform(np.eye(3), 1.0, np.zeros(3))
    assert torch.allclose(apply_transform(volume, identity), volume, atol=1e-10)


def test_shift_moves_along_the_first_axis():
    volume = torch.randn((1, 8, 8, 8), dtype=torch.float64)
    shifted = apply_transform(volume, AffineTransform(np.eye(3), 1.0, np.array([1.0, 0, 0])))
    assert torch.allclose(shifted[:, 1:], volume[:, :-1], atol=1e-8)


def test_augment_moves_input_target_and_masks_together():
    x = torch.randn((4, 8, 8, 8), dtype=torch.float64)
    mask = torch.zeros((8, 8, 8), dtype=torch.bool)
    mask[2:6, 2:6, 2:6] = True
    moved_x, moved_y, moved = augment(x, x.clone(), {"wm": mask}, np.random.default_rng(1))
    assert torch.equal(moved_x, moved_y)
    assert moved_x.shape == x.shape
    assert moved["wm"].dtype == torch.bool and moved["wm"].shape == mask.shape
    assert 0 < int(moved["wm"].sum()) < mask.numel()


@pytest.mark.filterwarnings("error:Converting a tensor with requires_grad:UserWarning")
def test_pretraining_reduces_tier_losses(make_sample):
    dataset = TrainingSet([make_sample(0), make_sample(1)])
    model = DenoiserModel(2, SMALL)
    plan = _plan("pretrain", epochs=5, lr=1e-3, batch_size=2 * len(TIER_INDEX))
    before = tier_losses(model, dataset.train, plan.weights)
    log = pretrain(model, dataset, plan)
    after = tier_losses(model, dataset.train, plan.weights)
    assert set(before) == set(TIER_INDEX)
    assert sum(after.values()) < sum(before.values())
    frame = log.to_frame()
    assert len(frame) == 5
    assert (frame["stage"] == "pretrain").all()
    assert np.isfinite(frame["total"]).all()


def test_pretraining_needs_known_tiers(make_sample):
    sample = make_sample(0)
    model = DenoiserModel(2, SMALL)
    bare = TrainingSample(sample.target, sample.masks, {}, sample.op, sample.data)
    with pytest.raises(ValueError, match="no training sample"):
        pretrain(model, TrainingSet([bare]), _plan("pretrain"))
    odd = TrainingSample(sample.target, sample.masks, {"llr-R5": sample.target})
    with pytest.raises(ValueError, match="unknown pretraining tiers"):
        pretrain(model, TrainingSet([odd]), _plan("pretrain"))
    partial = TrainingSample(
        sample.target, sample.masks, {"zero-filled": sample.tiers["zero-filled"]}, sample.op
    )
    with pytest.raises(ValueError, match="missing pretraining tiers") as info:
        pretrain(model, TrainingSet([partial]), _plan("pretrain"))
    assert "llr-R1" in str(info.value) and "zero-filled" not in str(info.value)
    with pytest.raises(ValueError, match="needs a 'pretrain' plan"):
        pretrain(model, TrainingSet([sample]), _plan("gleam"))


@pytest.mark.filterwarnings("error:Converting a tensor with requires_grad:UserWarning")
def test_gleam_logs_every_iteration(make_sample):
    dataset = TrainingSet([make_sample(0), make_sample(1)], validation=[make_sample(2)])
    model = DenoiserModel(2, SMALL)
    plan = _plan("gleam", ssim_weight=0.1, ssim_slices=3, ssim_scales=1, accumulation=1)
    frame = gleam_train(model, dataset, plan).to_frame()
    steps = frame[frame["validation"].isna()]
    assert steps["iteration"].tolist() == [1, 2, 1, 2]
    assert (steps[steps["iteration"] == 1]["ssim"] == 0).all()
    assert (steps[steps["iteration"] == 2]["ssim"] > 0).all()
    assert frame["validation"].notna().sum() == 1


def test_gleam_needs_an_acquisition(make_sample):
    sample = make_sample(0)
    bare = TrainingSample(sample.target, sample.masks, sample.tiers)
    with pytest.raises(ValueError, match="no acquisition"):
        gleam_train(DenoiserModel(2, SMALL), TrainingSet([bare]), _plan("gleam"))


def test_gleam_stores_a_fraction_of_the_full_graph(make_sample):
    sample = make_sample(0)
    model = DenoiserModel(2, UnrollConfig(iterations=6, base=8))
    with ActivationCounter() as counter:
        result = unroll(model, sample.op, sample.data, use_checkpoint=False)
    full_peak = counter.peak_bytes
    del result
    log = gleam_train(model, TrainingSet([sample]), _plan("gleam"))
    assert 0 < log.peak_saved_bytes < full_peak / 3


def test_finetune_respects_the_memory_budget(make_sample):
    dataset = TrainingSet([make_sample(0)])
    model = DenoiserModel(2, SMALL)
    with pytest.raises(MemoryBudgetError, match="exceeds the budget") as info:
        finetune(model, dataset, _plan("finetune", memory_budget=1))
    assert info.value.details["peak_bytes"] > 1
    log = finetune(model, dataset, _plan("finetune"))
    assert log.to_frame()["iteration"].tolist() == [2]
    assert log.peak_saved_bytes > 0


def test_train_stages_share_one_log(make_sample):
    dataset = TrainingSet([make_sample(0)])
    model = DenoiserModel(2, SMALL)
    plans = [_plan("pretrain"), _plan("gleam"), _plan("finetune"), _plan("gleam", epochs=0)]
    frame = train_stages(model, dataset, plans).to_frame()
    assert frame["stage"].tolist() == ["pretrain", "gleam", "gleam", "finetune"]


def test_ablation_runs_expand_variants():
    plans = {stage: _plan(stage, epochs=2) for stage in ("pretrain", "gleam", "finetune")}
    runs = ablation_runs(["full", "gleam-x3-no-pt", "full-uncond-no-ws"], SMALL, plans)
    names = [name for name, _, _ in runs]
    assert names == ["full", "gleam-x3-no-pt", "full-uncond-no-ws"]
    assert [p.stage for p in runs[0][2]] == ["pretrain", "gleam", "finetune"]
    assert [(p.stage, p.epochs) for p in runs[1][2]] == [("gleam", 6)]
    assert not runs[2][1].conditioned and not runs[2][1].weight_sharing
    sweep = ablation_runs(["unroll-count-sweep"], SMALL, plans)
    assert [cfg.iterations for _, cfg, _ in sweep] == list(range(1, 9))
    assert sweep[0][0] == "unroll-1"
    assert set(ABLATION_VARIANTS) >= {"full", "gleam-only", "full-uncond"}
    with pytest.raises(ValueError, match="unknown ablation variants"):
        ablation_runs(["no-dc"], SMALL, plans)


def test_run_ablation_reports_each_variant(make_sample):
    dataset = TrainingSet([make_sample(0)], validation=[make_sample(1)])
    plans = {stage: _plan(stage) for stage in ("pretrain", "gleam", "finetune")}
    frame = run_ablation(["gleam-no-pt"], dataset, SMALL, plans, k=2, step=0.5)
    assert frame["variant"].tolist() == ["gleam-no-pt"]
    row = frame.iloc[0]
    assert row["steps"] == 2
    assert row["parameters"] > row["conditioning_parameters"] > 0
    assert np.isfinite(row["psnr"]) and -1 <= row["ssim"] <= 1
