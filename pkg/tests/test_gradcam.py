import numpy as np
import pytest

from fedsim.data import synth_dataset, AugmentConfig, augment
from fedsim.errors import ConfigError, ShapeError
from fedsim.gradcam import (SaliencyMap, colormap, export_overlay, gradcam_pp,
                            saliency_grid)
from fedsim.model import DualScaleTransformer, ModelConfig
from fedsim.tensor import Tensor

TINY = ModelConfig(image_size=32, patch_small=8, patch_large=16, embed_dim=32,
                   depth=1, heads=2, window=2, num_classes=7)


@pytest.fixture(scope="module")
def model():
    return DualScaleTransformer(TINY, 0)


@pytest.fixture(scope="module")
def image():
    examples, manifest = synth_dataset(7, 1, 32, 0, (1.0, 0.0, 0.0))
    aug = AugmentConfig.evaluation(manifest, 32)
    return augment(examples[3], aug).image


class TestSaliencyGrid:
    def test_constant_features_uniform_map(self):
        r = np.random.default_rng(0)
        feat = np.ones((4, 4, 8)) * r.normal(size=8)[None, None, :]
        grad = r.normal(size=(4, 4, 8))
        grid = saliency_grid(feat, grad)
        assert np.allclose(grid, grid[0, 0])

    def test_zero_gradient_zero_map(self):
        feat = np.random.default_rng(1).normal(size=(4, 4, 8))
        assert not saliency_grid(feat, np.zeros((4, 4, 8))).any()

    def test_nonnegative(self):
        r = np.random.default_rng(2)
        for _ in range(10):
            grid = saliency_grid(r.normal(size=(4, 4, 6)), r.normal(size=(4, 4, 6)))
            assert grid.min() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            saliency_grid(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)))


class TestGradcamPP:
    def test_contract_shape_and_range(self, model, image):
        smap = gradcam_pp(model, image, target_class=3)
        assert smap.grid.shape == (4, 4)
        assert smap.grid.min() >= 0.0 and smap.grid.max() <= 1.0
        assert smap.upsampled.shape == (32, 32)
        assert smap.target_class == 3
        assert smap.layer == 0
        assert np.all(np.isfinite(smap.grid))

    def test_max_normalized(self, model, image):
        smap = gradcam_pp(model, image, 2)
        if not smap.all_zero:
            assert smap.grid.max() == 1.0

    def test_upsample_blocks_constant(self, model, image):
        smap = gradcam_pp(model, image, 1)
        for i in range(4):
            for j in range(4):
                block = smap.upsampled[8 * i:8 * (i + 1), 8 * j:8 * (j + 1)]
                assert np.all(block == smap.grid[i, j])

    def test_deterministic(self, model, image):
        a = gradcam_pp(model, image, 4)
        b = gradcam_pp(model, image, 4)
        assert np.array_equal(a.grid, b.grid)

    def test_class_sensitivity(self, model, image):
        a = gradcam_pp(model, image, 0)
        b = gradcam_pp(model, image, 1)
        assert np.abs(a.grid - b.grid).sum() > 0.0

    def test_bad_class(self, model, image):
        with pytest.raises(ConfigError):
            gradcam_pp(model, image, 7)
        with pytest.raises(ConfigError):
            gradcam_pp(model, image, -1)

    def test_bad_layer(self, model, image):
        with pytest.raises(ConfigError):
            gradcam_pp(model, image, 0, layer=1)
        with pytest.raises(ConfigError):
            gradcam_pp(model, image, 0, layer=-2)

    def test_depth_zero_rejected(self, image):
        flat = DualScaleTransformer(
            ModelConfig(image_size=32, patch_small=8, patch_large=16,
                        embed_dim=32, depth=0, heads=2, window=2,
                        num_classes=7), 0)
        with pytest.raises(ConfigError):
            gradcam_pp(flat, image, 0)

    def test_all_zero_flag_when_score_constant(self, image):
        # zero the head column for one class: its logit is constant,
        # every gradient vanishes, and the map must flag all-zero
        model = DualScaleTransformer(TINY, 1)
        model._params["fusion/head_w"].data[:, 5] = 0.0
        smap = gradcam_pp(model, image, 5)
        assert smap.all_zero
        assert not smap.grid.any()

    def test_leaves_no_sticky_state(self, model, image):
        gradcam_pp(model, image, 0)
        out = model.forward(Tensor(image.data[None]))
        assert out.grad is None


class TestOverlay:
    def test_colormap_endpoints(self):
        lo = colormap(np.zeros((2, 2)))
        hi = colormap(np.ones((2, 2)))
        assert np.allclose(lo[..., 0], 0.0) and np.allclose(lo[..., 2], 1.0)
        assert np.allclose(hi[..., 0], 1.0) and np.allclose(hi[..., 2], 0.0)

    def test_png_dimensions_and_determinism(self, model, image, tmp_path):
        from PIL import Image

        smap = gradcam_pp(model, image, 2)
        raw = Tensor(np.clip(image.data * 0.2 + 0.5, 0, 1))
        p1, p2 = str(tmp_path / "a.png"), str(tmp_path / "b.png")
        export_overlay(smap, raw, p1)
        export_overlay(smap, raw, p2)
        with Image.open(p1) as im:
            assert im.size == (32, 32)
            assert im.mode == "RGB"
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_all_zero_map_pure_cool(self, tmp_path):
        from PIL import Image

        grid = np.zeros((4, 4))
        smap = SaliencyMap(grid, 0, 0, np.zeros((32, 32)), True)
        base = Tensor(np.full((3, 32, 32), 0.5))
        path = str(tmp_path / "cool.png")
        export_overlay(smap, base, path)
        with Image.open(path) as im:
            px = np.asarray(im)
        expected = np.clip(np.rint((0.5 * 0.5 + 0.5 * np.array([0.0, 0.2, 1.0]))
                                   * 255.0), 0, 255).astype(np.uint8)
        assert np.all(px == expected[None, None, :])

    def test_grayscale_image_broadcast(self, model, image, tmp_path):
        smap = gradcam_pp(model, image, 0)
        mono = Tensor(np.clip(image.data[:1], 0, 1))
        export_overlay(smap, mono, str(tmp_path / "mono.png"))

    def test_size_mismatch(self, model, image):
        smap = gradcam_pp(model, image, 0)
        with pytest.raises(ShapeError):
            export_overlay(smap, Tensor(np.zeros((3, 16, 16))), "/tmp/x.png")
