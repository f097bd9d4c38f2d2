import numpy as np
import pytest

from rowgraph import pnm
from rowgraph.config import DEFAULT_CONFIG_TEXT, RunConfig, load_config, parse_config


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 7)).astype(np.uint8)
    pnm.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(pnm.read_pnm(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_pgm_scales_by_255(tmp_path):
    pnm.write_pgm(tmp_path / "m.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
    assert pnm.read_pnm(tmp_path / "m.pgm").tolist() == [[0, 128, 255, 255]]


def test_pnm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
    assert pnm.read_pnm(tmp_path / "c.pgm").tolist() == [[1, 2]]


def test_field_round_trip(tmp_path, rng):
    f = rng.normal(size=(2, 3, 4)).astype(np.float32)
    pnm.write_field(tmp_path / "f.rgvf", f)
    assert np.array_equal(pnm.read_field(tmp_path / "f.rgvf"), f)
    with pytest.raises(ValueError):
        pnm.write_field(tmp_path / "g.rgvf", np.zeros((3, 2, 2)))


def test_draw_dot_clips_at_border():
    img = np.zeros((3, 4, 4), dtype=np.uint8)
    pnm.draw_dot(img, 0, 0, (0, 0, 255))
    assert img[2, :2, :2].tolist() == [[255, 255], [255, 255]] and img[2, 2:].sum() == 0


def test_default_config_lists_reference_settings():
    cfg = load_config()
    assert cfg == RunConfig()
    assert (cfg.lr, cfg.momentum, cfg.batch) == (0.001, 0.9, 4)
    assert (cfg.epochs_kem, cfg.epochs_ecm, cfg.L, cfg.tau, cfg.delta) == (100, 50, 16, 0.15, 1.0)
    for key in ("stages", "lr", "momentum", "batch", "epochs_kem", "epochs_ecm", "L", "tau", "delta", "seed"):
        assert f"\n{key}=" in DEFAULT_CONFIG_TEXT


def test_config_round_trip_and_override():
    cfg = RunConfig().override(stages=1, tau=None, split=(0.5, 0.25, 0.25))
    assert parse_config(cfg.to_text()) == cfg
    assert cfg.tau == 0.15


def test_config_rejects_unknown_key():
    with pytest.raises(KeyError):
        parse_config("nope=1")
    with pytest.raises(ValueError):
        parse_config("stages")
