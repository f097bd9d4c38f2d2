import numpy as np
import pytest

from rowgraph import diffkernel as dk
from rowgraph import fieldgen as fg
from rowgraph import netkem as nk


def small_model(stages=2, shared=True, dtype=np.float32, seed=0):
    return nk.KemModel(nk.BackboneConfig(width_scale=0.0625),
                       nk.KemConfig(stages=stages, width_scale=0.0625, shared_trunk=shared),
                       seed=seed, dtype=dtype)


def test_feature_resolution_and_channels():
    m = nk.KemModel(nk.BackboneConfig(width_scale=0.25), nk.KemConfig(stages=2, width_scale=0.25), seed=0)
    with dk.no_grad():
        feats, stages = m(np.zeros((1, 3, 32, 32), dtype=np.float32))
    assert feats.shape == (1, 32, 16, 16)
    assert len(stages) == 2
    assert stages[1].plant.shape == (1, 1, 16, 16) and stages[1].vectors.shape == (1, 2, 16, 16)
    assert m.kem.stage_input_channels(1) == 32 + 4


def test_backbone_rejects_too_narrow():
    with pytest.raises(ValueError):
        nk.BackboneConfig(width_scale=0.05)


@pytest.mark.parametrize("shared", [True, False])
def test_branch_layouts_share_outputs(shared):
    m = small_model(shared=shared)
    with dk.no_grad():
        _, out = m(np.zeros((3, 16, 16), dtype=np.float32))
    assert out[0].line.shape == (1, 8, 8)
    names = {p.name for p in m.params()}
    assert len(names) == len(m.params())


def test_same_seed_same_weights():
    a, b = small_model(seed=4), small_model(seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params(), b.params()))
    c = small_model(seed=5)
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.params(), c.params()))


def test_kem_loss_rejects_stage_mismatch():
    m = small_model(stages=2)
    scene = fg.PlantationScene(16, 16, [fg.PlantationLine(0, [[4, 4], [12, 4]])])
    _, out = m(np.zeros((3, 16, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        nk.kem_loss(out, fg.ground_truth(scene, 1))


def test_two_optimizer_steps_per_epoch_on_eight_patches():
    patches = fg.generate_patches(fg.EASY.with_seed(2), 8, 32)
    data = [(p.image.astype(np.float32), fg.ground_truth(p.scene, 1)) for p in patches]
    m = small_model(stages=1)
    hist = nk.train_kem(m, data, [], nk.TrainConfig(epochs=1, grad_clip=20))
    assert hist.steps == 2


def test_training_reduces_loss_and_is_deterministic():
    patches = fg.generate_patches(fg.EASY.with_seed(3), 8, 32)
    data = [(p.image.astype(np.float32), fg.ground_truth(p.scene, 2)) for p in patches]
    runs = []
    for _ in range(2):
        m = small_model()
        h = nk.train_kem(m, data[:6], data[6:], nk.TrainConfig(epochs=4, grad_clip=20))
        runs.append((h, m.state()))
    h = runs[0][0]
    assert h.train_loss[-1] < h.train_loss[0]
    assert runs[0][0].train_loss == runs[1][0].train_loss
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])
    assert h.to_csv().splitlines()[0] == "epoch,train_loss,val_loss"


def test_divergence_is_reported():
    patches = fg.generate_patches(fg.EASY.with_seed(3), 4, 32)
    data = [(p.image.astype(np.float32), fg.ground_truth(p.scene, 1)) for p in patches]
    m = small_model(stages=1)
    with pytest.raises(nk.TrainingDiverged):
        with np.errstate(all="ignore"):
            nk.train_kem(m, data, [], nk.TrainConfig(epochs=30, sgd=dk.SgdConfig(learning_rate=10.0)))


def test_scene_edges_labels():
    s = fg.PlantationScene(32, 32, [fg.PlantationLine(0, [[1, 1], [5, 1]]), fg.PlantationLine(1, [[1, 9]])])
    pairs, labels = nk.scene_edges(s)
    assert pairs.tolist() == [[0, 1], [0, 2], [1, 2]]
    assert labels.tolist() == [1, 0, 0]


def test_sampling_caps_positives_and_balances_negatives():
    s = fg.generate_scene(fg.GenConfig(width=96, height=96, seed=1))
    pairs, labels = nk.sample_training_edges(s, np.random.default_rng(0), 3.0, 10)
    assert labels.sum() == 10
    assert (labels == 0).sum() == 30


def test_ecm_head_shapes_and_sample_count_check():
    head = nk.EcmHead(nk.EcmConfig(sample_points=8, width_scale=0.0625), 8, np.random.default_rng(0))
    out = head(dk.Tensor(np.zeros((5, 8, 8), dtype=np.float32)))
    assert out.shape == (5, 1)
    with pytest.raises(ValueError):
        head(dk.Tensor(np.zeros((5, 8, 4), dtype=np.float32)))


def test_ecm_training_leaves_kem_untouched():
    patches = fg.generate_patches(fg.EASY.with_seed(5), 6, 32)
    m = small_model(stages=1)
    before = m.state()
    head = nk.EcmHead(nk.EcmConfig(sample_points=4, width_scale=0.0625), m.backbone.channels,
                      np.random.default_rng(0))
    h = nk.train_ecm(m, head, [p.scene for p in patches[:4]], [p.image.astype(np.float32) for p in patches[:4]],
                     nk.EcmTrainConfig(epochs=2), [p.scene for p in patches[4:]],
                     [p.image.astype(np.float32) for p in patches[4:]])
    assert len(h.epochs) == 2 and np.isfinite(h.val_loss).all()
    after = m.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)
