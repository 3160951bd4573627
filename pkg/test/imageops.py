#
# Copyright 2020-2023 Ghent University
#
# This file is part of vsc-forensics,
# originally created by the HPC team of Ghent University (http://ugent.be/hpc/en),
# with support of Ghent University (http://ugent.be/hpc),
# the Flemish Supercomputer Centre (VSC) (https://www.vscentrum.be),
# the Flemish Research Foundation (FWO) (http://www.fwo.be/en)
# and the Department of Economy, Science and Innovation (EWI) (http://www.ewi-vlaanderen.be/en).
#
# https://github.com/hpcugent/vsc-forensics
#
# All rights reserved.
#
"""
Tests for the image manipulations, the quality metric and cluster/patch extraction

@author: Andy Georges (Ghent University)
"""
import math
import os
import tempfile

import cv2
import numpy as np

from vsc.install.testing import TestCase

from vsc.forensics import ConfigurationError
from vsc.forensics.imageops import (
    MANIPULATION_TEST_POLICY, TEST_POLICY, TRAIN_POLICY, UNALTERED,
    Cluster, ClusterExtractionError, ImageBuffer, ImageOpsError, Provenance,
    augment_image, extract_clusters, gamma_correct, jpeg_codec_version, jpeg_cycle, mkManipulationTag,
    quality_score, read_image, resize, sample_patch, scan_dataset, tag_from_name, tag_suffix, tile_patches,
    write_image,
)


def smooth_image(size=256, seed=0):
    """Blurred noise: natural-image-like content without hard edges."""
    rng = np.random.default_rng(seed)
    pixels = cv2.GaussianBlur(rng.random((size, size, 3)), (0, 0), 6)
    pixels = (pixels - pixels.min()) / (pixels.max() - pixels.min())
    return ImageBuffer(0.1 + 0.8 * pixels, Provenance('model00', 'model00-dev0', 'scene000', UNALTERED))


def textured_image(height, width, seed=0):
    return ImageBuffer(np.random.default_rng(seed).random((height, width, 3)))


def psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 10 * math.log10(1.0 / mse)


class ImageOpsManipulationTest(TestCase):
    """Gamma, resize, JPEG and their tags"""

    def test_gamma(self):
        img = smooth_image()
        same = gamma_correct(img, 1.0)
        self.assertTrue(np.array_equal(same.pixels, img.pixels))

        edges = ImageBuffer(np.array([[[0.0, 1.0, 0.25]]]))
        for gamma in (0.5, 0.8, 1.2, 2.0):
            out = gamma_correct(edges, gamma).pixels
            self.assertEqual(out[0, 0, 0], 0.0)
            self.assertEqual(out[0, 0, 1], 1.0)
        self.assertAlmostEqual(gamma_correct(edges, 0.5).pixels[0, 0, 2], 0.5, places=12)

        out = gamma_correct(img, 0.8)
        self.assertEqual(out.manipulation, mkManipulationTag('gamma', 0.8))
        self.assertEqual(out.provenance.model_id, 'model00')
        back = gamma_correct(out, 1 / 0.8)
        self.assertTrue(np.allclose(back.pixels, img.pixels, atol=1e-6))

        self.assertErrorRegex(ConfigurationError, "positive", gamma_correct, img, 0.0)
        self.assertErrorRegex(ConfigurationError, "positive", gamma_correct, img, -1.0)

    def test_resize(self):
        img = smooth_image(512)
        same = resize(img, 1.0)
        self.assertTrue(np.array_equal(same.pixels, img.pixels))
        self.assertEqual(same.manipulation, mkManipulationTag('resize', 1.0))

        half = resize(img, 0.5)
        self.assertEqual((half.height, half.width), (256, 256))
        self.assertTrue(half.can_extract_clusters)
        self.assertEqual(half.manipulation.kind, 'resize')

        bigger = resize(smooth_image(100), 1.5)
        self.assertEqual((bigger.height, bigger.width), (150, 150))

        constant = ImageBuffer(np.full((300, 200, 3), 0.4))
        for scale in (0.5, 0.8, 1.1, 2.0):
            out = resize(constant, scale)
            self.assertTrue(np.allclose(out.pixels, 0.4, atol=1e-12))

        small = resize(smooth_image(300), 0.8)
        self.assertFalse(small.can_extract_clusters)
        self.assertErrorRegex(ClusterExtractionError, "smaller", extract_clusters, small)

        self.assertErrorRegex(ConfigurationError, "positive", resize, img, 0)

    def test_jpeg(self):
        img = smooth_image()
        best = jpeg_cycle(img, 100)
        self.assertTrue(psnr(best.pixels, img.pixels) > 40)
        self.assertEqual(best.manipulation, mkManipulationTag('jpeg', 100))

        lossy = jpeg_cycle(textured_image(64, 64), 70)
        self.assertFalse(np.array_equal(lossy.pixels, textured_image(64, 64).pixels))
        self.assertEqual(lossy.manipulation.factor, 70)

        for quality in (1, 50, 95):
            out = jpeg_cycle(textured_image(40, 72), quality)
            self.assertEqual((out.height, out.width), (40, 72))
            self.assertTrue(out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0)

        self.assertErrorRegex(ConfigurationError, "quality", jpeg_cycle, img, 0)
        self.assertErrorRegex(ConfigurationError, "quality", jpeg_cycle, img, 101)
        self.assertTrue(jpeg_codec_version().startswith("Pillow"))

    def test_transforms_stay_in_range(self):
        img = textured_image(300, 300)
        for tag in TRAIN_POLICY + TEST_POLICY:
            out = augment_image(img, [tag])[0]
            self.assertTrue(out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0, tag)
            self.assertEqual(out.manipulation, tag)

    def test_tags(self):
        self.assertEqual(UNALTERED.kind, 'unaltered')
        self.assertTrue(UNALTERED.factor is None)
        self.assertErrorRegex(ConfigurationError, "no factor", mkManipulationTag, 'unaltered', 1.0)
        self.assertErrorRegex(ConfigurationError, "needs a factor", mkManipulationTag, 'gamma')
        self.assertErrorRegex(ConfigurationError, "Unknown manipulation", mkManipulationTag, 'blur', 1.0)

        self.assertEqual(tag_suffix(mkManipulationTag('gamma', 0.8)), '_g0.8')
        self.assertEqual(tag_suffix(mkManipulationTag('jpeg', 70)), '_j70')
        self.assertEqual(tag_suffix(mkManipulationTag('resize', 1.5)), '_r1.5')
        self.assertEqual(tag_suffix(mkManipulationTag('resize', 2.0)), '_r2')
        self.assertEqual(tag_suffix(UNALTERED), '')

        self.assertEqual(tag_from_name('a/b/img0_g0.8.png'), mkManipulationTag('gamma', 0.8))
        self.assertEqual(tag_from_name('img0_j70.png'), mkManipulationTag('jpeg', 70))
        self.assertEqual(tag_from_name('img0_r1.5.png'), mkManipulationTag('resize', 1.5))
        self.assertEqual(tag_from_name('img0.png'), UNALTERED)

    def test_image_buffer_range(self):
        self.assertErrorRegex(ImageOpsError, r"\[0, 1\]", ImageBuffer, np.full((2, 2, 3), 1.5))
        self.assertErrorRegex(ImageOpsError, r"\[0, 1\]", ImageBuffer, np.full((2, 2, 3), np.nan))
        self.assertErrorRegex(ImageOpsError, "shape", ImageBuffer, np.zeros((2, 2)))


class ImageOpsPolicyTest(TestCase):
    """Augmentation policies"""

    def test_policy_sizes(self):
        img = smooth_image(300)
        self.assertEqual(len(augment_image(img, 'train')), 9)
        self.assertEqual(len(augment_image(img, 'test')), 12)
        self.assertEqual(len(augment_image(img, 'manipulation-test')), 11)
        self.assertEqual(augment_image(img, []), [])
        self.assertEqual(augment_image(img, 'none'), [])
        self.assertErrorRegex(ConfigurationError, "Unknown augmentation policy", augment_image, img, 'other')

    def test_policy_contents(self):
        kinds = dict((kind, sorted(t.factor for t in TRAIN_POLICY if t.kind == kind))
                     for kind in ('jpeg', 'resize', 'gamma'))
        self.assertEqual(kinds, {'jpeg': [70, 80, 90], 'resize': [0.5, 0.8, 1.5, 2.0], 'gamma': [0.8, 1.2]})

        self.assertEqual(sorted(t.factor for t in TEST_POLICY if t.kind == 'jpeg'), [80, 85, 90, 95])
        self.assertEqual(sorted(t.factor for t in MANIPULATION_TEST_POLICY if t.kind == 'jpeg'), [85, 90, 95])

        out = augment_image(smooth_image(300), TEST_POLICY)
        self.assertEqual([o.manipulation for o in out], list(TEST_POLICY))
        self.assertTrue(all(o.provenance.scene_id == 'scene000' for o in out))


class ImageOpsQualityTest(TestCase):
    """Quality metric"""

    def test_analytic_cases(self):
        self.assertTrue(abs(quality_score(np.zeros((256, 256, 3)))) <= 1e-9)
        self.assertTrue(abs(quality_score(np.ones((256, 256, 3)))) <= 1e-9)
        self.assertTrue(abs(quality_score(np.full((256, 256, 3), 0.5)) - 0.7) <= 1e-9)

    def test_formula(self):
        pixels = np.random.default_rng(1).random((32, 32, 3))
        expected = 0.0
        for c in range(3):
            mu = pixels[..., c].mean()
            sigma = pixels[..., c].std()
            expected += 0.7 * 4 * (mu - mu ** 2) + 0.3 * (1 - math.exp(math.log(0.01) * sigma))
        self.assertAlmostEqual(quality_score(Cluster(pixels=pixels)), expected / 3, places=12)
        self.assertTrue(0.0 <= quality_score(pixels) <= 1.0)

    def test_invariances(self):
        rng = np.random.default_rng(2)
        gray = np.repeat(rng.random((64, 64, 1)), 3, axis=2)
        score = quality_score(gray)
        self.assertAlmostEqual(quality_score(gray[..., ::-1]), score, places=12)

        colour = rng.random((64, 64, 3))
        score = quality_score(colour)
        self.assertAlmostEqual(quality_score(colour[::-1]), score, places=12)
        self.assertAlmostEqual(quality_score(colour[:, ::-1]), score, places=12)


class ImageOpsClusterTest(TestCase):
    """Clusters and patches"""

    def test_grid(self):
        clusters = extract_clusters(textured_image(512, 512))
        self.assertEqual(len(clusters), 4)
        self.assertEqual(sorted((c.row, c.col) for c in clusters), [(0, 0), (0, 256), (256, 0), (256, 256)])
        for c in clusters:
            self.assertEqual(c.pixels.shape, (256, 256, 3))

        clusters = extract_clusters(textured_image(1300, 1100), k=20)
        self.assertEqual(len(clusters), 20)
        qualities = [c.quality for c in clusters]
        self.assertEqual(qualities, sorted(qualities, reverse=True))
        self.assertEqual(len(set((c.row, c.col) for c in clusters)), 20)

        self.assertEqual(len(extract_clusters(textured_image(512, 512), k=2)), 2)

    def test_textured_half_wins(self):
        pixels = np.zeros((512, 1024, 3))
        pixels[:, 512:] = np.random.default_rng(3).random((512, 512, 3))
        clusters = extract_clusters(ImageBuffer(pixels), k=4)
        self.assertTrue(all(c.col >= 512 for c in clusters))

    def test_ties_row_major(self):
        clusters = extract_clusters(ImageBuffer(np.full((512, 768, 3), 0.5)))
        self.assertEqual([(c.row, c.col) for c in clusters],
                         [(0, 0), (0, 256), (0, 512), (256, 0), (256, 256), (256, 512)])

    def test_too_small(self):
        self.assertErrorRegex(ClusterExtractionError, "smaller", extract_clusters, textured_image(255, 600))

    def test_tile_patches(self):
        cluster = extract_clusters(textured_image(256, 256))[0]
        patches = tile_patches(cluster)
        self.assertEqual(len(patches), 16)
        covered = np.zeros((256, 256), dtype=int)
        for p in patches:
            self.assertEqual(p.pixels.shape, (64, 64, 3))
            covered[p.row:p.row + 64, p.col:p.col + 64] += 1
            self.assertTrue(np.array_equal(p.pixels, cluster.pixels[p.row:p.row + 64, p.col:p.col + 64]))
        self.assertTrue(np.all(covered == 1))
        self.assertEqual([(p.row, p.col) for p in patches[:5]], [(0, 0), (0, 64), (0, 128), (0, 192), (64, 0)])

    def test_sample_patch(self):
        cluster = extract_clusters(textured_image(256, 256))[0]
        a = [sample_patch(cluster, np.random.default_rng(5)) for _ in range(3)]
        b = [sample_patch(cluster, np.random.default_rng(5)) for _ in range(3)]
        self.assertEqual([(p.row, p.col) for p in a], [(p.row, p.col) for p in b])
        for p in a:
            self.assertEqual(p.pixels.shape, (64, 64, 3))

    def test_sample_patch_uniform(self):
        cluster = Cluster(pixels=np.zeros((256, 256, 3)))
        rng = np.random.default_rng(6)
        draws = 10000
        rows = np.zeros(193)
        cols = np.zeros(193)
        for _ in range(draws):
            p = sample_patch(cluster, rng)
            rows[p.row] += 1
            cols[p.col] += 1
        expected = draws / 193.0
        for counts in (rows, cols):
            chi2 = np.sum((counts - expected) ** 2 / expected)
            # 192 degrees of freedom: mean 192, standard deviation about 19.6
            self.assertTrue(chi2 < 192 + 5 * 19.6, chi2)
            self.assertTrue(counts.min() > 0)


class ImageOpsIOTest(TestCase):
    """Reading, writing and scanning"""

    def setUp(self):
        super(ImageOpsIOTest, self).setUp()
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        super(ImageOpsIOTest, self).tearDown()

    def test_png_roundtrip(self):
        img = smooth_image(64)
        path = os.path.join(self.tmpdir, 'sub', 'img.png')
        write_image(img, path)
        back = read_image(path)
        self.assertTrue(np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / 255 + 1e-12)
        self.assertEqual(back.manipulation, UNALTERED)

    def test_read_malformed(self):
        path = os.path.join(self.tmpdir, 'broken.png')
        with open(path, 'wb') as fh:
            fh.write(b"definitely not a png")
        self.assertErrorRegex(ImageOpsError, "broken.png", read_image, path)

    def test_scan_dataset(self):
        img = smooth_image(32)
        for relative in ['m1/d1/s1/img0.png', 'm1/d1/s1/img0_j70.png', 'm2/d3/s2/img0_g0.8.png',
                         'm2/d3/img_misplaced.png']:
            write_image(img, os.path.join(self.tmpdir, relative))
        with open(os.path.join(self.tmpdir, 'm1/d1/s1/notes.txt'), 'w') as fh:
            fh.write("ignored")

        entries = scan_dataset(self.tmpdir)
        self.assertEqual([e.path for e in entries],
                         [os.path.join('m1', 'd1', 's1', 'img0.png'), os.path.join('m1', 'd1', 's1', 'img0_j70.png'),
                          os.path.join('m2', 'd3', 's2', 'img0_g0.8.png')])
        self.assertEqual(entries[0].model_id, 'm1')
        self.assertEqual(entries[0].device_id, 'd1')
        self.assertEqual(entries[0].scene_id, 's1')
        self.assertEqual(entries[0].manipulation, UNALTERED)
        self.assertEqual(entries[1].manipulation, mkManipulationTag('jpeg', 70))
        self.assertEqual(entries[2].manipulation, mkManipulationTag('gamma', 0.8))
