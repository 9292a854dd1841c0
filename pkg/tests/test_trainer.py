import copy
import gc
import json
import warnings

import numpy as np
import pytest
import torch

from incdet import distill as D
from incdet.detector import (DetectorConfig, DetectorModel, detection_loss, images_to_tensor, parameter_digest,
                             snapshot_teacher, targets_from_images)
from incdet.evaluation import forgetting_matrix
from incdet.sampling import sample_exemplars
from incdet.synthdata import make_scenario, preset_spec
from incdet.trainer import (METHODS, SequenceResult, StageError, TrainConfig, TrainingDiverged, joint_schedule,
                            joint_train, new_model, run_sequence, step_losses, train_first_task, train_incremental)

TINY = DetectorConfig(image_size=(64, 64), channels=(8, 8, 16, 16), head_hidden=32, post_nms_train=32,
                      post_nms_test=32, rpn_batch=32, roi_batch=16)


def resident_models():
    gc.collect()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return sum(isinstance(o, DetectorModel) for o in gc.get_objects())


def tiny_cfg(**kw):
    base = dict(epochs=2, lr_drop_epoch=1, batch_size=4, seed=0, detector=TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def two_tasks():
    return make_scenario(preset_spec("diff-both", seed=1, n_train=12, n_test=6, image_size=(64, 64),
                                     objects_per_image=(1, 3)))


@pytest.fixture(scope="module")
def three_tasks():
    return make_scenario(preset_spec("three-task", seed=1, n_train=8, n_test=4, image_size=(64, 64),
                                     objects_per_image=(1, 3)))


# -- config and result containers ---------------------------------------------


def test_config_validation_and_round_trip():
    cfg = tiny_cfg(method="afd", lam=0.5)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in (dict(epochs=0), dict(lam=-1.0), dict(method="magic"), dict(exemplar_budget=-1)):
        with pytest.raises(ValueError):
            tiny_cfg(**bad)
    with pytest.raises(ValueError, match="unknown TrainConfig fields"):
        TrainConfig.from_dict({"epochz": 3})
    assert TrainConfig().lr_at(9) == 0.01 and TrainConfig().lr_at(10) == pytest.approx(0.001)
    assert TrainConfig().lam == 1e-4


def test_result_round_trip_and_validation(tmp_path):
    res = SequenceResult(["A", "B"], [[70.0, 50.0], [None, 80.0]], method="finetune")
    assert SequenceResult.load(res.save(tmp_path / "r.json")) == res
    with pytest.raises(FileNotFoundError):
        SequenceResult.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValueError, match="corrupt"):
        SequenceResult.load(tmp_path / "bad.json")
    with pytest.raises(ValueError, match="'table'"):
        SequenceResult.from_dict({"tasks": ["A"], "table": [[170.0]]})
    with pytest.raises(ValueError, match="'tasks'"):
        SequenceResult.from_dict({"table": []})


def test_joint_schedule_is_balanced():
    rng = np.random.default_rng(0)
    steps = joint_schedule([10, 4], 4, rng)
    assert [t for t, _ in steps] == [0, 1] * 3
    covered = np.concatenate([idx for t, idx in steps if t == 0])
    assert sorted(covered.tolist()) == list(range(10))
    small = np.concatenate([idx for t, idx in steps if t == 1])
    assert set(small.tolist()) == set(range(4))


# -- objective ----------------------------------------------------------------


def test_step_losses_match_recomputed_components(two_tasks):
    a, b = two_tasks
    cfg = tiny_cfg(method="afd", lam=0.3)
    model, _ = train_first_task(new_model(cfg), a, cfg)
    teacher = snapshot_teacher(model)
    model.add_task("B", b.num_classes)
    model.train()
    batch = b.train[:3]
    ex = sample_exemplars(a, 2, strategy="random")
    lookup = a.by_id()
    ex_batch = [(lookup[i], t) for i, t in ex.items[:3]]
    out = step_losses(model, teacher, "B", batch, ex_batch, cfg, torch.Generator().manual_seed(7))

    g = torch.Generator().manual_seed(7)
    x = images_to_tensor(batch)
    det_cur = detection_loss(model, "B", x, targets_from_images(batch), generator=g).total
    ex_imgs = [im for im, _ in ex_batch]
    xe = images_to_tensor(ex_imgs)
    det_ex = detection_loss(model, "A", xe, targets_from_images(ex_imgs), generator=g).total
    gts = [t.boxes for t in targets_from_images(batch)]
    gts_e = [t.boxes for t in targets_from_images(ex_imgs)]
    # per-image mean over the concatenated batch = count-weighted mean of the two groups
    d_cur = D.afd(model, teacher, "B", "A", x, gts)
    d_ex = D.afd(model, teacher, "A", "A", xe, gts_e)
    dist = (len(batch) * d_cur + len(ex_imgs) * d_ex) / (len(batch) + len(ex_imgs))

    assert out["det_current"].item() == pytest.approx(det_cur.item(), abs=1e-6)
    assert out["det_exemplar"].item() == pytest.approx(det_ex.item(), abs=1e-6)
    assert out["distill"].item() == pytest.approx(dist.item(), abs=1e-6)
    expected = det_cur + det_ex + cfg.lam * dist
    assert out["total"].item() == pytest.approx(expected.item(), abs=1e-6)


@pytest.mark.parametrize("method", ["feature_distill", "attention_distill", "afd_bu", "afd_td"])
def test_step_losses_for_each_distillation_method(two_tasks, method):
    a, b = two_tasks
    cfg = tiny_cfg(method=method, lam=1.0, epochs=1)
    model, _ = train_first_task(new_model(cfg), a, cfg)
    teacher = snapshot_teacher(model)
    model.add_task("B", b.num_classes)
    out = step_losses(model, teacher, "B", b.train[:2], None, cfg)
    assert torch.isfinite(out["total"]) and out["distill"].item() >= 0
    assert out["total"].item() == pytest.approx((out["det_current"] + out["distill"]).item(), rel=1e-6)
    out["total"].backward()


# -- sequences ----------------------------------------------------------------


def test_sequence_is_deterministic(two_tasks, tmp_path):
    cfg = tiny_cfg(method="afd", lam=0.5, exemplar_budget=4)
    r1 = run_sequence(two_tasks, cfg, run_dir=tmp_path / "r1")
    r2 = run_sequence(two_tasks, cfg, run_dir=tmp_path / "r2")
    assert r1.table == r2.table
    assert r1.entries() == 3
    for name in ("after_A.pt", "after_B.pt"):
        assert (tmp_path / "r1" / "checkpoints" / name).is_file()
    assert (tmp_path / "r1" / "exemplars_A.json").is_file()
    logged = [json.loads(line) for line in (tmp_path / "r1" / "loss_log.jsonl").read_text().splitlines()]
    assert logged[-1]["task"] == "B" and logged[-1]["det_exemplar"] > 0 and logged[-1]["distill"] > 0
    assert json.loads((tmp_path / "r1" / "config.json").read_text())["method"] == "afd"


def test_lambda_zero_matches_finetune(two_tasks):
    digests = []
    for method, lam in (("finetune", 1e-4), ("afd", 0.0)):
        cfg = tiny_cfg(method=method, lam=lam, exemplar_budget=4)
        seen = []
        res = run_sequence(two_tasks, cfg, on_step=lambda r, m, t: seen.append(m), save_checkpoints=False)
        digests.append((res.table, parameter_digest(seen[-1])))
    assert digests[0] == digests[1]


def test_cached_first_model_gives_same_result(two_tasks):
    cfg = tiny_cfg(method="afd", lam=0.5)
    full = run_sequence(two_tasks, cfg)
    first, _ = train_first_task(new_model(cfg), two_tasks[0], cfg)
    reused = run_sequence(two_tasks, cfg, first_model=copy.deepcopy(first))
    assert reused.table == full.table


def test_teacher_unchanged_and_at_most_two_models(two_tasks):
    a, b = two_tasks
    cfg = tiny_cfg(method="afd", lam=1.0)
    model, _ = train_first_task(new_model(cfg), a, cfg)
    teacher = snapshot_teacher(model)
    before_teacher = parameter_digest(teacher)
    before_model = parameter_digest(model)
    counts = []

    model, summary = train_incremental(model, teacher, b, None, cfg, on_step=lambda *_: counts.append(resident_models()))
    assert parameter_digest(teacher) == before_teacher == summary["teacher_digest"]
    assert parameter_digest(model) != before_model
    assert max(counts) <= 2


def test_incremental_rejects_mismatched_teacher(two_tasks):
    a, b = two_tasks
    cfg = tiny_cfg()
    model, _ = train_first_task(new_model(cfg), a, cfg)
    other = DetectorModel(DetectorConfig(image_size=(64, 64), channels=(4, 4, 4, 4)))
    other.add_task("A", 4)
    with pytest.raises(ValueError, match="architecture"):
        train_incremental(model, snapshot_teacher(other), b, None, cfg)


def test_first_block_frozen_during_incremental(two_tasks):
    a, b = two_tasks
    cfg = tiny_cfg(epochs=1)
    model, _ = train_first_task(new_model(cfg), a, cfg)
    block0 = copy.deepcopy(model.backbone.blocks[0].state_dict())
    model, _ = train_incremental(model, None, b, None, cfg)
    for k, v in model.backbone.blocks[0].state_dict().items():
        assert torch.equal(v, block0[k])


def test_three_task_table_and_forgetting(three_tasks):
    counts = []
    res = run_sequence(three_tasks, tiny_cfg(epochs=1, exemplar_budget=3, method="afd"),
                       on_step=lambda *_: counts.append(resident_models()))
    assert res.entries() == 6
    assert max(counts) <= 2  # student plus the current teacher
    assert all(res.table[i][j] is None for i in range(3) for j in range(i))
    assert len(forgetting_matrix(res).row_sums) == 3


def test_joint_run_has_single_column(two_tasks, tmp_path):
    res = run_sequence(two_tasks, tiny_cfg(method="joint", epochs=1), run_dir=tmp_path)
    assert res.joint and all(len(row) == 1 for row in res.table)
    assert forgetting_matrix(res).empty
    assert SequenceResult.load(tmp_path / "result.json").joint


def test_joint_on_one_dataset_equals_first_task(two_tasks):
    cfg = tiny_cfg(epochs=1)
    joint, _ = joint_train([two_tasks[0]], cfg)
    single, _ = train_first_task(new_model(cfg), two_tasks[0], cfg)
    assert parameter_digest(joint) == parameter_digest(single)


def test_divergence_raises(two_tasks):
    cfg = tiny_cfg(lr=1e35, epochs=1, grad_clip=0.0)
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train_first_task(new_model(cfg), two_tasks[0], cfg)


def test_stage_failure_keeps_partial_results(two_tasks, tmp_path):
    cfg = tiny_cfg(epochs=1)
    bad_b = copy.copy(two_tasks[1])
    bad_b.train = [copy.copy(bad_b.train[0])]
    bad_b.train[0].boxes = [bx.__class__(bx.x1, bx.y1, bx.x2, bx.y2, label=99) for bx in bad_b.train[0].boxes]
    with pytest.raises(StageError) as err:
        run_sequence([two_tasks[0], bad_b], cfg, run_dir=tmp_path)
    assert err.value.stage == "train:B"
    partial = SequenceResult.load(tmp_path / "result.json")
    assert partial.table[0][0] is not None and partial.table[1][1] is None


def test_sequence_needs_two_tasks(two_tasks):
    with pytest.raises(ValueError):
        run_sequence(two_tasks[:1], tiny_cfg())
    assert "joint" in METHODS
