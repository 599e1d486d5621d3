import json

import numpy as np
import pytest

import storyplug as sp


def test_token_matrix_shape_and_diagonals():
    tm = sp.token_matrix("girl", length=6)
    assert tm.shape == (4, 6)
    ct = tm[0, 1]
    for q in range(4):
        assert tm[q, q + 1] == ct
        assert tm[q, q] == tm[0, 0]
        assert tm[q, q + 2] == tm[0, 2]
    assert sp.token_matrix("girl", "sd21").shape == (75, 77)


def test_plugin_roundtrip(tmp_path):
    p = sp.create_toy_plugin("girl", "alice", 1)
    assert p.rows.shape == (14, 32)
    assert p.rows.dtype == np.float32
    assert sp.plugin_from_bytes(p.to_bytes()) == p
    p.save(tmp_path / "alice.cgcp")
    q = sp.load_plugin(tmp_path / "alice.cgcp")
    assert q == p and q.digest() == p.digest()
    assert p.validate() == []


def test_bad_plugin_bytes_raise_with_code():
    with pytest.raises(sp.StoryplugError) as e:
        sp.plugin_from_bytes(b"nope" * 20)
    assert e.value.code == "BadMagic"


def test_generate_frame_is_deterministic():
    alice = sp.create_toy_plugin("girl", "alice", 1)
    kw = dict(seed=3, steps=6)
    a = sp.generate_frame("a girl in a park", [alice], {"alice": (0.0, 0.0, 0.5, 1.0)}, **kw)
    b = sp.generate_frame("a girl in a park", [alice], {"alice": (0.0, 0.0, 0.5, 1.0)}, **kw)
    assert a["image"].shape == (64, 64, 3)
    assert np.array_equal(a["image"], b["image"])
    assert a["request_hash"] == sp.request_hash(
        "a girl in a park", [alice], {"alice": (0.0, 0.0, 0.5, 1.0)}, **kw)
    assert len(json.loads(a["diagnostics"])["xi"]) == 6


def test_invalid_box_rejected():
    with pytest.raises(sp.StoryplugError) as e:
        sp.generate_frame("a girl", [], {"girl": (0.6, 0.0, 0.5, 1.0)}, seed=1, steps=2)
    assert e.value.code == "InvalidLayout"


def test_rasterize_layout_counts():
    m = sp.rasterize_layout({"c": (0.0, 0.0, 0.5, 0.5)}, "c", 8)
    assert (m > 0).sum() == 16


def test_render_story_and_metrics(tmp_path):
    plugins = tmp_path / "plugins"
    plugins.mkdir()
    sp.create_toy_plugin("girl", "alice", 1).save(plugins / "alice.cgcp")
    script = {
        "schema_version": 1,
        "title": "t",
        "frames": [
            {"id": "f1", "prompt": "a girl waves", "characters": ["alice"],
             "layout": {"boxes": {"alice": [0.2, 0.2, 0.8, 0.8]}}, "seed": 1, "steps": 4},
            {"id": "f2", "prompt": "a girl sits", "characters": ["alice"],
             "layout": {"boxes": {"alice": [0.0, 0.0, 0.5, 1.0]}}, "seed": 2, "steps": 4},
        ],
    }
    m1 = sp.render_story(script, plugins, tmp_path / "out1")
    m2 = sp.render_story(script, plugins, tmp_path / "out2")
    assert [f["id"] for f in m1["frames"]] == ["f1", "f2"]
    assert m1 == m2

    frame = sp.generate_frame("a girl waves", seed=1, steps=4)["image"]
    ta = sp.text_alignment([frame], "a girl waves")
    assert -1.0 <= ta <= 1.0
    assert sp.image_alignment([frame], [[frame]]) == pytest.approx(1.0, abs=1e-9)
