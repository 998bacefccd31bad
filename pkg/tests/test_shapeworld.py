import numpy as np
import pytest

from promptseg.maskops import BitMask
from promptseg.shapeworld import (
    DataConfig, DatasetSplit, Instance, MagicMismatchError, Scene, SceneConfig,
    ShapeWorldError, TruncationError, all_thing_categories, build_splits,
    dataset_fingerprint, expression_target, generate_scene, parse_category,
    read_one_scene, read_split, referring_pairs, render_expression, thing_name,
    write_split, _decode_scene, _encode_scene,
)

SMALL = DataConfig(train_scenes=12, val_scenes=6, test_scenes=6, min_heldout_test=0,
                   holdout_fraction=0.2)


def scene_is_partition(scene):
    total = np.zeros((scene.raster, scene.raster), dtype=np.int32)
    for inst in scene.instances:
        total += inst.mask.bits
    return (total == 1).all()


def test_category_names_roundtrip():
    for cat in all_thing_categories():
        assert parse_category(cat.name) == cat
    assert len(all_thing_categories()) == 48
    assert parse_category("grass").is_thing is False


def test_scene_generation_is_partition_and_deterministic():
    cfg = SceneConfig()
    for seed in range(20):
        scene, _ = generate_scene(seed, cfg)
        assert scene_is_partition(scene)
        things = [i for i in scene.instances if i.is_thing]
        assert 1 <= len(things) <= cfg.max_instances
    a, ra = generate_scene(7, cfg)
    b, rb = generate_scene(7, cfg)
    assert ra == rb
    assert a.image.tobytes() == b.image.tobytes()
    assert all(x.mask == y.mask and x.name == y.name for x, y in zip(a.instances, b.instances))


def test_single_fullframe_bar_partition():
    cfg = SceneConfig(min_instances=1, max_instances=1, size_lo=3.0, size_hi=3.0,
                      allowed_things=(thing_name("solid", "red", "bar"),))
    scene, _ = generate_scene(3, cfg)
    assert scene_is_partition(scene)
    # bar with size >> raster covers everything; stuff then has no pixels
    union = np.zeros((64, 64), dtype=bool)
    for inst in scene.instances:
        assert not (union & inst.mask.bits).any()
        union |= inst.mask.bits
    assert union.all()


def test_mask_cardinalities_sum_to_raster():
    cfg = SceneConfig(min_instances=3, max_instances=3)
    scene, _ = generate_scene(11, cfg)
    assert sum(i.mask.count() for i in scene.instances) == 64 * 64


def test_required_category_present():
    want = thing_name("dotted", "yellow", "triangle")
    cfg = SceneConfig(required=want)
    scene, _ = generate_scene(5, cfg)
    assert want in scene.present_names()


# --- splits ---

def test_build_splits_holdout_arithmetic():
    split = build_splits(123, SMALL)
    held = set(split.held_out_names)
    assert len(held) == round(0.2 * 48) == 10
    train_things = {n for n in split.train_categories if parse_category(n).is_thing}
    assert len(train_things) == 38
    assert not (held & train_things)


def test_build_splits_no_holdout():
    split = build_splits(9, DataConfig(train_scenes=4, val_scenes=2, test_scenes=2,
                                       holdout_fraction=0.0))
    assert split.held_out_names == []


def test_train_scenes_never_contain_held_out():
    split = build_splits(77, SMALL)
    held = set(split.held_out_names)
    for scene in split.train + split.val:
        assert not (set(scene.present_names()) & held)


def test_heldout_minimum_appearances_enforced():
    with pytest.raises(ShapeWorldError):
        build_splits(1, DataConfig(train_scenes=4, val_scenes=2, test_scenes=5,
                                   holdout_fraction=0.2, min_heldout_test=20))


def test_splits_deterministic():
    a = build_splits(55, SMALL)
    b = build_splits(55, SMALL)
    assert a.held_out_names == b.held_out_names
    for sa, sb in zip(a.train, b.train):
        assert sa.image.tobytes() == sb.image.tobytes()


# --- expressions ---

def lone(name, bits, extra=()):
    r = 8
    stuff = np.ones((r, r), dtype=bool)
    instances = []
    for n, m in [(name, bits)] + list(extra):
        stuff &= ~m
        instances.append(Instance(n, BitMask(m), True))
    instances.append(Instance("grass", BitMask(stuff), False))
    img = np.zeros((r, r, 3), dtype=np.float32)
    return Scene(img, instances, 0)


def box(y0, y1, x0, x1, r=8):
    m = np.zeros((r, r), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_expression_for_lone_instance():
    name = thing_name("solid", "red", "circle")
    scene = lone(name, box(1, 3, 1, 3))
    assert render_expression(scene, 0) == "the red solid circle"


def test_expression_spatial_relation():
    name = thing_name("solid", "red", "circle")
    scene = lone(name, box(3, 5, 0, 2), extra=[(name, box(3, 5, 5, 7))])
    left = render_expression(scene, 0)
    right = render_expression(scene, 1)
    assert left == "the red solid circle left of the red solid circle"
    assert right == "the red solid circle right of the red solid circle"
    assert expression_target(scene, left) == 0
    assert expression_target(scene, right) == 1


def test_expression_twins_skip():
    name = thing_name("solid", "red", "circle")
    # same column, same row band: no relation separates them
    scene = lone(name, box(2, 4, 2, 4), extra=[(name, box(2, 4, 2, 4))])
    assert render_expression(scene, 0) is None


def test_referring_pairs_unique_when_reevaluated():
    cfg = SceneConfig(min_instances=4, max_instances=6)
    for seed in range(10):
        scene, _ = generate_scene(seed, cfg)
        for text, idx in referring_pairs(scene):
            assert expression_target(scene, text) == idx


# --- io ---

def test_dataset_roundtrip(tmp_path):
    split = build_splits(42, SMALL)
    write_split(tmp_path, split, {"seed": 42})
    loaded, manifest = read_split(tmp_path)
    assert manifest["config_echo"] == {"seed": 42}
    assert loaded.held_out_names == split.held_out_names
    assert loaded.all_categories == split.all_categories
    for a, b in zip(split.train + split.val + split.test,
                    loaded.train + loaded.val + loaded.test):
        assert a.scene_id == b.scene_id
        assert a.image.tobytes() == b.image.tobytes()
        assert len(a.instances) == len(b.instances)
        for x, y in zip(a.instances, b.instances):
            assert (x.name, x.is_thing) == (y.name, y.is_thing)
            assert x.mask == y.mask


def test_scene_codec_rejects_corruption():
    scene, _ = generate_scene(1, SceneConfig())
    buf = _encode_scene(scene)
    assert _decode_scene(buf, 0).image.tobytes() == scene.image.tobytes()
    with pytest.raises(MagicMismatchError):
        _decode_scene(b"XXXX" + buf[4:], 0)
    with pytest.raises(TruncationError):
        _decode_scene(buf[:-3], 0)


def test_read_one_scene_and_fingerprint(tmp_path):
    split = build_splits(8, SMALL)
    write_split(tmp_path, split, {})
    s = read_one_scene(tmp_path, "val", split.val[2].scene_id)
    assert s.image.tobytes() == split.val[2].image.tobytes()
    fp1 = dataset_fingerprint(tmp_path)
    # touching any byte changes the fingerprint
    f = next((tmp_path / "train").glob("scene_*.shpw"))
    raw = bytearray(f.read_bytes())
    raw[10] ^= 0xFF
    f.write_bytes(bytes(raw))
    assert dataset_fingerprint(tmp_path) != fp1
