import json
import math
from dataclasses import replace

import numpy as np
import pytest

from bevcon_lab.geometry import Box3D, bev_iou, box3d_to_box2d
from bevcon_lab.scenegen import (
    PlacementError,
    SceneGenConfig,
    generate_dataset,
    generate_scene,
    load_manifest,
    load_scene,
    make_cameras,
    manifest_hash,
    render_view,
    save_scene,
    scene_seed_for,
)


class TestSceneGenConfig:
    def test_defaults(self):
        cfg = SceneGenConfig()
        assert (cfg.n_views, cfg.image_height, cfg.image_width) == (6, 128, 224)
        assert (cfg.bev.grid_h, cfg.bev.grid_w, cfg.bev.x_max) == (64, 64, 25.6)
        assert (cfg.n_min, cfg.n_max, cfg.n_classes) == (3, 8, 4)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            SceneGenConfig(n_min=1)
        with pytest.raises(ValueError):
            SceneGenConfig(n_min=4, n_max=3)

    def test_hash_stable_and_sensitive(self):
        assert SceneGenConfig().config_hash() == SceneGenConfig().config_hash()
        assert SceneGenConfig().config_hash() != SceneGenConfig(seed=1).config_hash()

    def test_bev_from_dict(self):
        cfg = SceneGenConfig(bev=dict(x_min=-10, x_max=10, y_min=-10, y_max=10, grid_h=16, grid_w=16))
        assert cfg.bev.cell_x == pytest.approx(1.25)


class TestCameras:
    def test_ring(self):
        cams = make_cameras(SceneGenConfig())
        headings = [math.atan2(c.rotation[1, 2], c.rotation[0, 2]) for c in cams]
        steps = np.diff(np.unwrap(headings))
        np.testing.assert_allclose(steps, math.radians(60), atol=1e-12)


class TestGenerateScene:
    def test_deterministic(self, small_gen_config):
        assert generate_scene(small_gen_config, 5) == generate_scene(small_gen_config, 5)

    def test_seed_changes_scene(self, small_gen_config):
        assert generate_scene(small_gen_config, 5) != generate_scene(small_gen_config, 6)

    def test_exact_count(self, small_gen_config):
        cfg = replace(small_gen_config, n_min=3, n_max=3)
        for seed in range(5):
            assert len(generate_scene(cfg, seed).boxes) == 3

    def test_layout_invariants(self, small_gen_config):
        for seed in range(10):
            scene = generate_scene(small_gen_config, seed)
            ids = [b.instance_id for b in scene.boxes]
            assert len(set(ids)) == len(ids)
            for i, a in enumerate(scene.boxes):
                assert small_gen_config.bev.contains(a.center[0], a.center[1])
                assert a.center[2] == pytest.approx(a.h / 2)
                for b in scene.boxes[i + 1 :]:
                    assert bev_iou(a, b) < 0.05

    def test_images(self, small_scene, small_gen_config):
        assert len(small_scene.images) == small_gen_config.n_views
        for img in small_scene.images:
            assert img.shape == (48, 80, 3) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_over_dense_config_fails(self):
        cfg = SceneGenConfig(n_min=60, n_max=60, min_range=6.0, max_range=7.0)
        with pytest.raises(PlacementError):
            generate_scene(cfg, 0)

    def test_footprints_inside_projected_boxes(self, small_gen_config):
        # every rendered pixel of an object lies in its 2D box dilated by 1 px
        for seed in range(6):
            scene = generate_scene(small_gen_config, seed)
            for k, cam in enumerate(scene.cameras):
                _, footprints = render_view(cam, scene.boxes)
                by_id = {b.instance_id: b for b in scene.boxes}
                for iid, mask in footprints.items():
                    b2 = box3d_to_box2d(cam, by_id[iid], k)
                    assert b2 is not None
                    v, u = np.nonzero(mask)
                    assert np.all(u + 0.5 >= b2.x1 - 1) and np.all(u + 0.5 <= b2.x2 + 1)
                    assert np.all(v + 0.5 >= b2.y1 - 1) and np.all(v + 0.5 <= b2.y2 + 1)

    def test_objects_visible_somewhere(self):
        # class colors reach the images, so objects are recoverable
        scene = generate_scene(SceneGenConfig(), 3)
        visible = set()
        for cam in scene.cameras:
            visible |= set(render_view(cam, scene.boxes)[1])
        assert len(visible) >= len(scene.boxes) - 1


class TestDatasetIO:
    def test_round_trip(self, small_scene, tmp_path):
        save_scene(small_scene, tmp_path)
        assert load_scene(tmp_path, small_scene.scene_id) == small_scene

    def test_empty_dataset(self, small_gen_config, tmp_path):
        m = generate_dataset(small_gen_config, 0, tmp_path)
        assert m["scenes"] == [] and load_manifest(tmp_path)["config_hash"] == small_gen_config.config_hash()

    def test_ten_scenes(self, small_gen_config, tmp_path):
        m = generate_dataset(small_gen_config, 10, tmp_path)
        assert [s["scene_id"] for s in m["scenes"]] == list(range(10))
        for s in m["scenes"]:
            scene = load_scene(tmp_path, s["scene_id"])
            assert scene == generate_scene(small_gen_config, s["seed"], s["scene_id"])

    def test_manifest_deterministic(self, small_gen_config, tmp_path):
        generate_dataset(small_gen_config, 3, tmp_path / "a")
        generate_dataset(small_gen_config, 3, tmp_path / "b")
        assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
        for k in range(3):
            for f in ("annotations.json", "view_0.png"):
                pa = tmp_path / "a" / f"scene_{k:05d}" / f
                pb = tmp_path / "b" / f"scene_{k:05d}" / f
                assert pa.read_bytes() == pb.read_bytes()

    def test_append_and_mismatch(self, small_gen_config, tmp_path):
        generate_dataset(small_gen_config, 2, tmp_path)
        m = generate_dataset(small_gen_config, 2, tmp_path)
        assert len(m["scenes"]) == 4
        assert m["scenes"][3]["seed"] == scene_seed_for(small_gen_config, 3)
        with pytest.raises(ValueError, match="hash"):
            generate_dataset(replace(small_gen_config, seed=99), 1, tmp_path)

    def test_seventeen_digit_floats(self, small_scene, tmp_path):
        d = save_scene(small_scene, tmp_path)
        text = (d / "annotations.json").read_text()
        rec = json.loads(text)
        assert rec["boxes"][0]["yaw"] == small_scene.boxes[0].yaw
        assert f"{small_scene.boxes[0].yaw:.17g}" in text
