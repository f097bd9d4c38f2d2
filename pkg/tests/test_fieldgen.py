import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rowgraph import fieldgen as fg


def one_row(n=5, y=20.0, spacing=8.0, x0=10.0, size=64):
    plants = [[x0 + k * spacing, y] for k in range(n)]
    return fg.PlantationScene(size, size, [fg.PlantationLine(0, plants)])


def test_sigma_schedule():
    assert fg.sigma_schedule(3) == [3.0, 2.0, 1.0]
    assert fg.sigma_schedule(2) == [3.0, 1.0]
    assert fg.sigma_schedule(1) == [3.0]
    with pytest.raises(ValueError):
        fg.sigma_schedule(0)


def test_plant_map_peaks_at_halved_centres():
    scene = one_row()
    m = fg.gt_plant_map(scene, 2.0)
    for x, y in scene.plants:
        assert m[int(y // 2), int(x // 2)] == 1.0
    assert m.max() == 1.0 and m.min() >= 0


def test_plant_map_is_max_not_sum():
    scene = fg.PlantationScene(32, 32, [fg.PlantationLine(0, [[10, 10], [12, 10]])])
    assert fg.gt_plant_map(scene, 3.0).max() == 1.0


def test_line_map_dominates_plant_map():
    scene = fg.generate_scene(fg.GenConfig(width=64, height=64, seed=3))
    for s in fg.sigma_schedule(3):
        assert np.all(fg.gt_line_map(scene, s) >= fg.gt_plant_map(scene, s) - 1e-12)


def test_displacement_field_unit_inside_band_only():
    scene = one_row(y=21.0)
    f = fg.gt_displacement_field(scene)
    norm = np.hypot(f[0], f[1])
    nz = norm > 0
    np.testing.assert_allclose(norm[nz], 1.0, atol=1e-12)
    np.testing.assert_allclose(f[0][nz], 1.0)  # row runs along +x
    ys = np.nonzero(nz)[0]
    assert ys.min() >= 10.5 - 2 and ys.max() <= 10.5 + 2


def test_lone_plant_has_no_vectors():
    scene = fg.PlantationScene(32, 32, [fg.PlantationLine(0, [[10, 10]])])
    assert not fg.gt_displacement_field(scene).any()
    assert fg.gt_line_map(scene, 1.0).max() == pytest.approx(1.0)


def test_line_covers_gap_span():
    scene = fg.PlantationScene(64, 64, [fg.PlantationLine(0, [[4, 20], [40, 20]])])
    assert fg.gt_line_map(scene, 1.0)[10, 11] == pytest.approx(1.0)


def test_generate_scene_is_deterministic():
    cfg = fg.GenConfig(width=96, height=96, seed=11, weed_density=3)
    a, b = fg.generate_scene(cfg), fg.generate_scene(cfg)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert np.array_equal(fg.render_rgb(a, cfg), fg.render_rgb(b, cfg))


def test_generated_plants_inside_image():
    cfg = fg.GenConfig(width=80, height=60, seed=5, curvature=3)
    s = fg.generate_scene(cfg)
    p = s.plants
    assert np.all((p >= 0) & (p[:, :1] <= 79) & (p[:, 1:] <= 59))


def test_full_gap_probability_rejected():
    with pytest.raises(ValueError):
        fg.generate_scene(fg.GenConfig(gap_probability=1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        fg.GenConfig(gap_probability=1.5)
    with pytest.raises(ValueError):
        fg.GenConfig(row_spacing_px=0)


def test_weeds_stay_off_plants():
    cfg = fg.GenConfig(seed=2, weed_density=20)
    s = fg.generate_scene(cfg)
    assert len(s.weeds)
    d = np.sqrt(((s.weeds[:, None] - s.plants[None]) ** 2).sum(-1))
    assert d.min() > 2 * cfg.plant_radius_px


def test_rendered_plants_are_greener_than_soil():
    cfg = fg.GenConfig(seed=1, noise_level=0.0)
    s = fg.generate_scene(cfg)
    img = fg.render_rgb(s, cfg)
    g = fg.greenness(img)
    on = [g[int(round(y)), int(round(x))] for x, y in s.plants]
    assert np.median(on) > np.median(g) + 0.1
    assert img.min() >= 0 and img.max() <= 1


def test_scene_json_round_trip(tmp_path):
    s = fg.generate_scene(fg.GenConfig(seed=4, weed_density=2))
    fg.save_scene(s, tmp_path / "s.json")
    back = fg.load_scene(tmp_path / "s.json")
    assert back.to_dict() == s.to_dict()


def test_split_counts_reference_case():
    assert fg.split_counts(564) == [338, 113, 113]
    assert fg.split_counts(10) == [6, 2, 2]
    assert fg.split_counts(96) == [58, 19, 19]


@given(st.integers(3, 2000))
def test_split_counts_sum(n):
    c = fg.split_counts(n)
    assert sum(c) == n
    assert all(abs(ci - r * n) < 1 for ci, r in zip(c, (0.6, 0.2, 0.2)))


def test_split_dataset_disjoint_and_seeded():
    tr, va, te = fg.split_dataset(range(50), seed=3)
    assert sorted(tr + va + te) == list(range(50))
    assert fg.split_dataset(range(50), seed=3) == (tr, va, te)
    with pytest.raises(ValueError):
        fg.split_dataset([1, 2])


def test_crop_shifts_coordinates():
    s = one_row(n=8, x0=4.0, size=64)
    c = fg.crop_scene(s, 32, 0, 32)
    assert c.width == 32
    assert np.all(c.plants[:, 0] >= 0) and np.all(c.plants[:, 0] < 32)
    assert len(c.plants) == np.sum((s.plants[:, 0] >= 32))


def test_generate_patches_count_and_shape():
    cfg = fg.EASY.with_seed(1)
    patches = fg.generate_patches(cfg, 20, 64)
    assert len(patches) == 20
    assert all(p.image.shape == (3, 64, 64) and p.scene.lines for p in patches)


def test_ground_truth_bundle_shapes():
    s = one_row(size=64)
    gt = fg.ground_truth(s, 2)
    assert len(gt.plant_maps) == 2 and gt.plant_maps[0].shape == (32, 32)
    assert gt.displacement_field.shape == (2, 32, 32)
    np.testing.assert_allclose(gt.line_maps[1], fg.gt_line_map(s, 1.0))
