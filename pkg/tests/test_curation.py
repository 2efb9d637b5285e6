import dataclasses
import json
from collections import Counter

import numpy as np
import pytest

from layersplit import curation
from layersplit.curation import (
    CurationConfig,
    MaskPerturbConfig,
    build_dataset,
    generate_sample,
    load_dataset,
    make_triplet,
    occlusion_zone,
    perturb_mask,
    procedural_background,
    procedural_foreground,
)
from layersplit.errors import ConfigError, CurationError, InvalidInputError
from layersplit.imaging import Placement, alpha_over, iou, place_layer
from oracles import painter

NO_PERTURB = CurationConfig(mask_perturb=MaskPerturbConfig(enabled=False))


def test_config_paper_bounds():
    cfg = CurationConfig()
    assert cfg.n_objects_range == (1, 3)
    cfg.validate()
    with pytest.raises(ConfigError):
        CurationConfig(n_objects_range=(0, 2)).validate()
    with pytest.raises(ConfigError):
        CurationConfig(mask_perturb=MaskPerturbConfig(min_mask_iou=0.0)).validate()


def test_procedural_foreground_deterministic():
    a = procedural_foreground(np.random.default_rng(7), 32)
    b = procedural_foreground(np.random.default_rng(7), 32)
    assert np.array_equal(a, b)


def test_procedural_foreground_corners_soft_edges_ranges():
    for s in range(1000):
        fg = procedural_foreground(np.random.default_rng(s), 16)
        a = fg[..., 3]
        assert a[0, 0] == a[0, -1] == a[-1, 0] == a[-1, -1] == 0
        assert ((a > 0) & (a < 1)).any()
        assert fg.min() >= 0 and fg.max() <= 1


def test_procedural_background_is_rgb():
    bg = procedural_background(np.random.default_rng(0), 64)
    assert bg.shape == (64, 64, 3) and bg.min() >= 0 and bg.max() <= 1


def test_perturb_zero_is_identity():
    cfg = CurationConfig(mask_perturb=MaskPerturbConfig(dilate_px_range=(0, 0), erode_px_range=(0, 0),
                                                        boundary_noise_amplitude=0.0))
    exact = np.zeros((16, 16))
    exact[4:10, 3:12] = 1
    assert np.array_equal(perturb_mask(exact, np.random.default_rng(0), cfg), exact)


def test_perturb_erode_full_square():
    cfg = CurationConfig(mask_perturb=MaskPerturbConfig(dilate_px_range=(0, 0), erode_px_range=(1, 1),
                                                        boundary_noise_amplitude=0.0, min_mask_iou=0.5))
    out = perturb_mask(np.ones((16, 16)), np.random.default_rng(0), cfg)
    assert out[1:-1, 1:-1].all() and out.sum() == 196
    assert iou(out, np.ones((16, 16))) == 196 / 256


def test_perturb_corpus_respects_iou_and_is_imperfect():
    cfg = CurationConfig()
    exact = np.zeros((32, 32))
    exact[8:24, 6:20] = 1
    rng = np.random.default_rng(1)
    ious = []
    for _ in range(500):
        m = perturb_mask(exact, rng, cfg)
        assert m.any()
        ious.append(iou(m, exact))
    assert min(ious) >= cfg.mask_perturb.min_mask_iou
    assert min(ious) < 1


def test_perturb_unreachable_bound_is_config_error():
    cfg = CurationConfig(mask_perturb=MaskPerturbConfig(dilate_px_range=(6, 6), erode_px_range=(0, 0),
                                                        min_mask_iou=0.99))
    exact = np.zeros((32, 32))
    exact[14:18, 14:18] = 1
    with pytest.raises(ConfigError):
        perturb_mask(exact, np.random.default_rng(0), cfg)


def test_perturb_empty_rejected():
    with pytest.raises(InvalidInputError):
        perturb_mask(np.zeros((8, 8)), np.random.default_rng(0), CurationConfig())


def _opaque_square(size, value):
    sq = np.ones((size, size, 4))
    sq[..., :3] = value
    return sq


def test_single_target_layer_identity():
    rng = np.random.default_rng(3)
    bg = procedural_background(rng, 64)
    fg = procedural_foreground(rng, 32)
    tr = make_triplet(bg, [fg], rng, NO_PERTURB)
    assert np.allclose(alpha_over(tr.gt_foreground, tr.gt_background), tr.composite, atol=1e-12)
    assert np.array_equal(tr.gt_background, bg)


def test_fully_occluded_target_keeps_full_object():
    rng = np.random.default_rng(4)
    bg = procedural_background(rng, 64)
    target = procedural_foreground(rng, 16)
    occluder = _opaque_square(32, 0.9)
    pls = [Placement(1.0, 20, 20, 0), Placement(1.0, 12, 12, 1)]
    tr = make_triplet(bg, [target, occluder], rng, NO_PERTURB, placements=pls, targets=[0])
    placed = place_layer(target, pls[0], (64, 64))
    assert np.array_equal(tr.gt_foreground, placed)
    assert np.allclose(tr.composite[12:44, 12:44], 0.9)
    assert iou(tr.gt_foreground[..., 3] > 0.5, placed[..., 3] > 0.5) == 1.0


def test_gt_foreground_zero_outside_footprint():
    for i in range(20):
        tr = generate_sample(CurationConfig(seed=5), i)
        fgs = curation.sample_scene(curation.sample_rng(5, i), CurationConfig(seed=5))[1]
        union = np.zeros((64, 64), bool)
        for k in tr.meta["targets"]:
            union |= place_layer(fgs[k], Placement(**tr.meta["placements"][k]), (64, 64))[..., 3] > 0
        assert np.all(tr.gt_foreground[..., 3][~union] == 0)


def test_three_object_background_matches_painter():
    rng = np.random.default_rng(6)
    bg = procedural_background(rng, 32)
    fgs = [procedural_foreground(rng, 12) for _ in range(3)]
    spec = [(1.0, 2, 3, 1), (1.0, 10, 8, 2), (1.0, 16, 14, 0)]
    pls = [Placement(*p) for p in spec]
    tr = make_triplet(bg, fgs, rng, NO_PERTURB, placements=pls, targets=[1])
    ref_bg, _ = painter([(fgs[0], spec[0]), (fgs[2], spec[2])], bg)
    ref_comp, _ = painter(list(zip(fgs, spec)), bg)
    assert np.array_equal(tr.gt_background, ref_bg)
    assert np.array_equal(tr.composite, ref_comp)


def test_occlusion_pixels_show_target_not_occluder():
    rng = np.random.default_rng(8)
    bg = procedural_background(rng, 64)
    target = procedural_foreground(rng, 32)
    occ = _opaque_square(12, 0.0)
    pls = [Placement(1.0, 10, 10, 0), Placement(1.0, 20, 20, 1)]
    tr = make_triplet(bg, [target, occ], rng, NO_PERTURB, placements=pls, targets=[0])
    zone = occlusion_zone(tr, [target, occ])
    assert zone.any()
    placed = place_layer(target, pls[0], (64, 64))
    assert np.array_equal(tr.gt_foreground[zone], placed[zone])


def test_placement_exhaustion():
    cfg = CurationConfig(canvas_size=8, fg_size=8, scale_range=(0.01, 0.01))
    with pytest.raises(CurationError):
        make_triplet(np.zeros((8, 8, 3)), [np.ones((8, 8, 4))], np.random.default_rng(0), cfg)


def test_mask_iou_bound_in_generated_samples():
    cfg = CurationConfig(seed=2)
    for i in range(30):
        tr = generate_sample(cfg, i)
        assert tr.meta["mask_iou"] >= cfg.mask_perturb.min_mask_iou
        assert set(np.unique(tr.mask)) <= {0.0, 1.0}


def test_build_dataset_empty(tmp_path):
    manifest = build_dataset(CurationConfig(), 0, tmp_path / "d")
    assert manifest["count"] == 0 and manifest["samples"] == []
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["count"] == 0


def test_build_dataset_byte_identical(tmp_path):
    cfg = CurationConfig(seed=11)
    build_dataset(cfg, 4, tmp_path / "a")
    build_dataset(cfg, 4, tmp_path / "b", workers=2)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 4 * 5 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_object_count_histogram(tmp_path):
    manifest = build_dataset(CurationConfig(seed=0), 64, tmp_path / "d")
    counts = Counter(s["n_objects"] for s in manifest["samples"])
    assert set(counts) == {1, 2, 3}


def test_dataset_load_roundtrip(tmp_path):
    cfg = CurationConfig(seed=3)
    build_dataset(cfg, 2, tmp_path / "d")
    loaded = load_dataset(tmp_path / "d")
    direct = generate_sample(cfg, 1)
    assert np.abs(loaded[1].composite - direct.composite).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(loaded[1].mask, direct.mask)


def test_config_hash_changes_with_config():
    a = curation.config_hash(CurationConfig())
    b = curation.config_hash(dataclasses.replace(CurationConfig(), seed=1))
    assert a != b and len(a) == 64


def test_default_layout_keeps_targets_in_front():
    cfg = CurationConfig(seed=9, mask_perturb=MaskPerturbConfig(enabled=False))
    for i in range(40):
        tr = generate_sample(cfg, i)
        assert tr.meta["occlusion_pixels"] == 0
        assert np.abs(alpha_over(tr.gt_foreground, tr.gt_background) - tr.composite).max() < 1e-12


def test_occluded_target_layouts_on_request():
    cfg = CurationConfig(seed=9, occluded_target_prob=1.0, mask_perturb=MaskPerturbConfig(enabled=False))
    occluded = 0
    for i in range(100):
        tr = generate_sample(cfg, i)
        if tr.meta["occlusion_pixels"]:
            occluded += 1
            fgs = curation.sample_scene(curation.sample_rng(9, i), cfg)[1]
            zone = occlusion_zone(tr, fgs)
            diff = np.abs(alpha_over(tr.gt_foreground, tr.gt_background) - tr.composite).max(axis=-1)
            assert diff[~zone].max() < 1e-12
    assert occluded > 0
    with pytest.raises(ConfigError):
        CurationConfig(occluded_target_prob=1.5).validate()
