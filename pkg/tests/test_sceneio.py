import numpy as np
import pytest

from neuralps import render, sceneio


# --- synthetic generators ------------------------------------------------------


def test_sphere_scene_shapes_and_mask():
    scene, stack = sceneio.make_sphere_scene(48, 48, lights=8, seed=0)
    assert stack.images.shape == (8, 48, 48, 3)
    assert stack.n_images == 8
    R = 0.35 * 48
    ys, xs = np.mgrid[0:48, 0:48]
    r = np.sqrt((xs - 23.5) ** 2 + (ys - 23.5) ** 2)
    # boundary pixels of the sphere disk stay outside the mask
    assert not scene.mask[(r > R - 1.5) & (r < R + 1.5)].any()
    norms = np.linalg.norm(scene.normals, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_sphere_lambertian_images_match_loop_oracle():
    scene, _ = sceneio.make_sphere_scene(24, 24, lights=4, seed=1)
    stack = scene.render_stack(quantize=0)
    i = 2
    l = scene.lights[i]
    img = np.zeros_like(stack.images[i])
    for y in range(24):
        for x in range(24):
            shading = max(float(np.dot(scene.normals[y, x], l)), 0.0)
            s = float(scene.shadow_maps[i, y, x])
            img[y, x] = scene.albedo[y, x] * shading * s
    np.testing.assert_allclose(stack.images[i], img, atol=1e-6)


def test_sphere_headon_light_fully_lit():
    scene, _ = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    s = sceneio.exact_shadow_map(scene.depth_fn, [0.0, 0.0, -1.0], 24, 24)
    assert s.all()


def test_sphere_no_visible_cast_shadows_in_mask():
    scene, _ = sceneio.make_sphere_scene(48, 48, lights=12, seed=2)
    for i, l in enumerate(scene.lights):
        shading = np.maximum((scene.normals * l).sum(-1), 0.0)
        visible_cast = (~scene.shadow_maps[i]) & (shading > 1e-3) & scene.mask
        assert visible_cast.sum() == 0


def test_sphere_rejects_bad_args():
    with pytest.raises(ValueError):
        sceneio.make_sphere_scene(8, 8, lights=8)
    with pytest.raises(ValueError):
        sceneio.make_sphere_scene(32, 32, lights=2)
    with pytest.raises(ValueError):
        sceneio.make_sphere_scene(32, 32, lights=8, material="mirror")


def test_step_scene_shadow_shrinks_to_zero():
    light = render.Light(np.array([np.sin(0.7), 0.0, -np.cos(0.7)]))
    areas = []
    for bh in (12.0, 6.0, 3.0, 0.75, 0.1):
        scene = sceneio.make_step_scene(48, 48, bh, lights=4)
        areas.append(int((~sceneio.exact_shadow_map(
            scene.depth_fn, light.direction, 48, 48)).sum()))
    assert areas == sorted(areas, reverse=True)
    assert areas[-1] <= 48  # sub-pixel block: at most a sliver at the edge


def test_step_scene_doubling_height_never_shrinks_shadow():
    light = np.array([-np.sin(0.8), 0.1, -np.cos(0.8)])
    light /= np.linalg.norm(light)
    prev = None
    for bh in (2.0, 4.0, 8.0, 16.0):
        scene = sceneio.make_step_scene(40, 40, bh, lights=4)
        area = int((~sceneio.exact_shadow_map(scene.depth_fn, light, 40, 40)).sum())
        if prev is not None:
            assert area >= prev
        prev = area


def test_step_scene_shadow_length_similar_triangles():
    H = W = 64
    bh = 9.0
    scene = sceneio.make_step_scene(H, W, bh, lights=4)
    theta = np.radians(50.0)
    light = np.array([-np.sin(theta), 0.0, -np.cos(theta)])
    s = sceneio.exact_shadow_map(scene.depth_fn, light, H, W)
    row = s[H // 2]
    edge = 0.38 * W
    shadowed = np.nonzero(~row)[0]
    assert shadowed.size > 0
    length = shadowed.max() - edge
    expected = bh * np.sin(theta) / np.cos(theta)
    assert abs(length - expected) <= 2.0


def test_step_scene_requires_positive_height():
    with pytest.raises(ValueError):
        sceneio.make_step_scene(32, 32, 0.0, lights=4)


def test_composite_scene_has_masked_cast_shadows():
    scene, stack = sceneio.make_composite_scene(48, 48, lights=8, seed=0)
    frac = [(~scene.shadow_maps[i] & scene.mask).mean() for i in range(8)]
    assert max(frac) > 0.02
    np.testing.assert_allclose(
        np.linalg.norm(scene.normals, axis=-1), 1.0, atol=1e-12)


# --- renderer consistency on ground-truth maps ----------------------------------


def test_renderer_reproduces_generator_given_shadows():
    scene, _ = sceneio.make_sphere_scene(32, 32, lights=6, material="specular",
                                         seed=3)
    stack = scene.render_stack(quantize=0)
    for i, l in enumerate(scene.lights):
        light = render.Light(l)
        img = render.render_image(scene.normals, scene.albedo,
                                  scene.specular_term(light), light,
                                  scene.shadow_maps[i])
        np.testing.assert_allclose(img, stack.images[i], atol=1e-6)


# --- dataset directory round trip ----------------------------------------------


def test_save_load_roundtrip_bit_exact(tmp_path):
    scene, stack = sceneio.make_sphere_scene(32, 32, lights=6, seed=4)
    sceneio.save_scene(scene, stack, tmp_path)
    loaded = sceneio.load_dataset(tmp_path)
    np.testing.assert_array_equal(loaded.images, stack.images)
    np.testing.assert_array_equal(loaded.lights, stack.lights)
    np.testing.assert_array_equal(loaded.mask, stack.mask)
    assert loaded.names == stack.names


def test_unit_intensities_leave_images_unchanged(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    sceneio.save_scene(scene, stack, tmp_path)
    raw = sceneio._read_png(tmp_path / stack.names[0])
    loaded = sceneio.load_dataset(tmp_path)
    np.testing.assert_array_equal(loaded.images[0], raw)


def test_count_mismatch_raises(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    sceneio.save_scene(scene, stack, tmp_path)
    dirs = np.loadtxt(tmp_path / "light_directions.txt")
    np.savetxt(tmp_path / "light_directions.txt", dirs[:3], fmt="%.17g")
    with pytest.raises(ValueError, match="4 images vs 3 light rows"):
        sceneio.load_dataset(tmp_path)


def test_nonunit_lights_normalized_with_warning(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    sceneio.save_scene(scene, stack, tmp_path)
    dirs = np.loadtxt(tmp_path / "light_directions.txt")
    np.savetxt(tmp_path / "light_directions.txt", dirs * 1.3, fmt="%.17g")
    with pytest.warns(UserWarning, match="unit length"):
        loaded = sceneio.load_dataset(tmp_path)
    np.testing.assert_allclose(np.linalg.norm(loaded.lights, axis=1), 1.0,
                               atol=1e-12)


def test_grayscale_loading(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    sceneio.save_scene(scene, stack, tmp_path)
    loaded = sceneio.load_dataset(tmp_path, grayscale=True)
    assert loaded.channels == 1
    np.testing.assert_allclose(loaded.images[..., 0],
                               stack.images.mean(axis=-1), atol=1e-12)


def test_drop_images():
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=6, seed=0)
    reduced = stack.drop_images([0, 2])
    assert reduced.n_images == 4
    np.testing.assert_array_equal(reduced.images[0], stack.images[1])
    np.testing.assert_array_equal(reduced.lights[1], stack.lights[3])


def test_color_stats_shape():
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    stats = stack.color_stats()
    assert stats.shape == (6,)
    assert (stats[3:] >= 0).all()


# --- normal map and depth encodings ---------------------------------------------


def test_normal_encoding_camera_facing_pixel():
    normals = np.zeros((2, 2, 3))
    normals[..., 2] = -1.0  # internal camera-facing
    mask = np.ones((2, 2), dtype=bool)
    img = sceneio.encode_normal_map(normals, mask)
    np.testing.assert_allclose(img[0, 0], [0.5, 0.5, 1.0], atol=1e-12)
    eight_bit = np.round(img * 255).astype(np.uint8)
    assert tuple(eight_bit[0, 0]) == (128, 128, 255)


def test_normal_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(8, 8, 3))
    n[..., 2] = -np.abs(n[..., 2]) - 0.1
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    mask = np.ones((8, 8), dtype=bool)
    back = sceneio.decode_normal_map(sceneio.encode_normal_map(n, mask), mask)
    np.testing.assert_allclose(back, n, atol=1e-12)


def test_depth_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 20, size=(17, 13)).astype(np.float32)
    sceneio.write_depth(tmp_path / "depth.f32", depth)
    back = sceneio.read_depth(tmp_path / "depth.f32")
    np.testing.assert_array_equal(back, depth)
    assert back.dtype == np.float32


def test_export_maps_layout(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=0)
    n = stack.n_images
    est = sceneio.SceneEstimate(
        normals=scene.normals,
        albedo=scene.albedo,
        coeffs=np.zeros((24, 24, 9)),
        depth=scene.depth,
        shadow_maps=scene.shadow_maps.astype(np.uint8),
        specular_maps=np.zeros((n, 24, 24)),
        rerendered=stack.images,
        mask=scene.mask,
    )
    out = tmp_path / "est"
    metrics = {"mae_deg": 1.0, "psnr_db": 40.0, "runtime_s": 2.0}
    sceneio.export_maps(est, out, metrics=metrics)
    for name in ("normal.png", "depth.f32", "depth.json", "albedo.png",
                 "specular_00.png", "shadow_02.png", "rerender_01.png",
                 "metrics.json"):
        assert (out / name).exists(), name
    import json

    loaded = json.loads((out / "metrics.json").read_text())
    assert set(loaded) >= {"mae_deg", "psnr_db", "runtime_s"}
    back = sceneio.read_depth(out / "depth.f32")
    np.testing.assert_array_equal(back, scene.depth.astype(np.float32))


def test_load_gt_roundtrip(tmp_path):
    scene, stack = sceneio.make_sphere_scene(24, 24, lights=4, seed=5)
    sceneio.save_scene(scene, stack, tmp_path)
    normals, mask, depth = sceneio.load_gt(tmp_path)
    np.testing.assert_array_equal(mask, scene.mask)
    # 16-bit quantization: recovered normals within ~0.01 deg of truth
    dots = np.clip((normals[mask] * scene.normals[mask]).sum(-1), -1, 1)
    assert np.degrees(np.arccos(dots)).max() < 0.05
    np.testing.assert_allclose(depth, scene.depth, atol=1e-5)
