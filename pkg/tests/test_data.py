import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoikit import data
from hoikit.config import NoiseConfig
from hoikit.errors import ParseError


def test_same_seed_gives_identical_scene():
    a = data.generate_scene(42)
    b = data.generate_scene(42)
    assert a == b


def test_different_seeds_differ():
    assert data.generate_scene(1) != data.generate_scene(2)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_scene_invariants(seed):
    scene = data.generate_scene(seed)
    humans = [e for e in scene.entities if e.kind == "human"]
    objects = [e for e in scene.entities if e.kind == "object"]
    assert 1 <= len(humans) <= 3
    assert 1 <= len(objects) <= 4
    for e in scene.entities:
        x1, y1, x2, y2 = e.box
        assert 0.0 <= x1 < x2 <= 1.0
        assert 0.0 <= y1 < y2 <= 1.0
    assert len(scene.interactions) == len(objects)
    for it in scene.interactions:
        assert scene.entities[it.human].kind == "human"
        assert scene.entities[it.object].kind == "object"
        assert 0 <= it.verb < len(data.DEFAULT_VERBS)


def test_verb_matches_realized_geometry():
    for seed in range(50):
        scene = data.generate_scene(seed)
        for it in scene.interactions:
            h, o = scene.entities[it.human], scene.entities[it.object]
            hcx, hcy = (h.box[0] + h.box[2]) / 2, (h.box[1] + h.box[3]) / 2
            ocx, ocy = (o.box[0] + o.box[2]) / 2, (o.box[1] + o.box[3]) / 2
            assert it.verb == data.verb_from_offset(ocx - hcx, ocy - hcy,
                                                    len(data.DEFAULT_VERBS))


def test_long_tail_skew_rarest_verb_under_10():
    # Counting oracle over a generated corpus with a strong skew.
    vocab = data.VocabSpec(verb_skew=0.3, object_skew=0.55)
    scenes = data.build_corpus(7, 1000, vocab)
    counts = data.category_counts(scenes, vocab).sum(axis=1)
    assert counts.min() < 10
    assert counts.max() > 200


def test_default_skew_produces_rare_categories():
    scenes = data.build_corpus(0, 2000)
    counts = data.category_counts(scenes)
    rare = data.rare_categories(counts, threshold=10)
    assert 0 < len(rare) < counts.size


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_empty_scene_is_background():
    scene = data.Scene("empty", 0, (), ())
    img = data.render_scene(scene, 32, 32)
    for c in range(3):
        assert np.all(img[c] == data.BACKGROUND[c])


def test_render_pixel_count_matches_per_pixel_oracle():
    ent = data.Entity("object", 1, (0.21, 0.33, 0.58, 0.7))
    scene = data.Scene("one", 0, (ent,), ())
    H = W = 32
    img = data.render_scene(scene, H, W)
    color = data.OBJECT_PALETTE[1]
    mask = np.all(np.abs(img - np.array(color)[:, None, None]) < 1e-12, axis=0)
    expected = 0
    x1, y1, x2, y2 = ent.box
    for r in range(H):
        for c in range(W):
            if x1 <= (c + 0.5) / W < x2 and y1 <= (r + 0.5) / H < y2:
                expected += 1
    assert mask.sum() == expected
    area_px = (x2 - x1) * (y2 - y1) * H * W
    assert abs(mask.sum() - area_px) <= (x2 - x1) * H + (y2 - y1) * W + 2


def test_render_is_pure():
    scene = data.generate_scene(3)
    assert np.array_equal(data.render_scene(scene, 32, 32),
                          data.render_scene(scene, 32, 32))


def test_render_overdraw_order():
    a = data.Entity("object", 0, (0.2, 0.2, 0.6, 0.6))
    b = data.Entity("object", 1, (0.2, 0.2, 0.6, 0.6))
    img = data.render_scene(data.Scene("x", 0, (a, b), ()), 32, 32)
    center = img[:, 12, 12]
    assert np.allclose(center, data.OBJECT_PALETTE[1])


def test_render_rejects_tiny_canvas():
    with pytest.raises(Exception):
        data.render_scene(data.generate_scene(0), 8, 8)


def test_render_values_in_unit_range():
    img = data.render_scene(data.generate_scene(11), 32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0


# ---------------------------------------------------------------------------
# stand-in detector
# ---------------------------------------------------------------------------


def test_oracle_noise_off_gives_constant_confidence():
    scene = data.generate_scene(5)
    dets = data.oracle_detect(scene)
    n_objects = sum(1 for e in scene.entities if e.kind == "object")
    assert len(dets) == n_objects
    assert all(d.confidence == 0.9 for d in dets)


def test_oracle_drop_all_gives_empty():
    scene = data.generate_scene(5)
    assert data.oracle_detect(scene, NoiseConfig(drop_prob=1.0)) == []


def test_oracle_deterministic_per_seed():
    scene = data.generate_scene(9)
    noise = NoiseConfig(drop_prob=0.3, conf_base=0.7, conf_jitter=0.2)
    a = data.oracle_detect(scene, noise)
    b = data.oracle_detect(scene, noise)
    assert a == b


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def test_round_trip_100_scenes(tmp_path):
    scenes = data.build_corpus(13, 100)
    path = tmp_path / "corpus.tsv"
    data.write_dataset(path, scenes)
    assert data.read_dataset(path) == scenes


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.tsv"
    data.write_dataset(path, [])
    assert data.read_dataset(path) == []


def test_truncated_record_raises_with_line_number(tmp_path):
    path = tmp_path / "bad.tsv"
    scenes = data.build_corpus(1, 2)
    data.write_dataset(path, scenes)
    text = path.read_text().splitlines()
    text[2] = text[2].rsplit("\t", 1)[0]  # drop the interactions field
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(ParseError) as exc:
        data.read_dataset(path)
    assert exc.value.line_no == 3


def test_bad_header_raises(tmp_path):
    path = tmp_path / "hdr.tsv"
    path.write_text("not a header\n")
    with pytest.raises(ParseError):
        data.read_dataset(path)


def test_corpus_regenerates_bit_identically(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    data.write_dataset(a, data.build_corpus(99, 50))
    data.write_dataset(b, data.build_corpus(99, 50))
    assert a.read_bytes() == b.read_bytes()
