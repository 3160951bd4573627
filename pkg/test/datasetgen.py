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
Tests for the synthetic dataset generator and the splits

@author: Andy Georges (Ghent University)
"""
import json
import os
import pickle
import shutil
import tempfile

import numpy as np

from vsc.install.testing import TestCase

from vsc.forensics import ConfigurationError
from vsc.forensics.datasetgen import (
    MANIFEST_FILENAME, METADATA_FILENAME, PRNU_AMPLITUDE,
    ClusterRef, DatasetExistsError, SplitError, SplitManifest,
    augment_dataset, balance_manipulation_classes, build_splits, capture, derive_rng, derive_seed,
    extract_dataset_clusters, generate_dataset, generate_scene, make_camera_models, make_devices,
    mkDatasetSettings, nearest_centroid_accuracy, prnu_pattern, signature_features,
)
from vsc.forensics.imageops import UNALTERED, DatasetEntry, mkManipulationTag, read_image


def entry(model, device, scene, kind='unaltered', factor=None, index=0):
    tag = mkManipulationTag(kind, factor)
    suffix = '' if factor is None else "_%s%s" % (kind[0], factor)
    return DatasetEntry(model_id=model, device_id=device, scene_id=scene,
                        path="%s/%s/%s/img%d%s.png" % (model, device, scene, index, suffix), manipulation=tag)


def read_tree(root):
    """Relative path -> bytes of every file under root."""
    contents = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            with open(path, 'rb') as fh:
                contents[os.path.relpath(path, root)] = fh.read()
    return contents


SMALL_SETTINGS = {
    'num_models': 2,
    'devices_per_model': 2,
    'num_scenes': 5,
    'val_scenes': 1,
    'test_scenes': 1,
    'seed': 3,
}


class DatasetGenSceneTest(TestCase):
    """Procedural scenes and the capture pipeline"""

    def test_scene_deterministic(self):
        a = generate_scene('scene000', seed=1)
        b = generate_scene('scene000', seed=1)
        self.assertTrue(np.array_equal(a.pixels, b.pixels))
        self.assertEqual((a.height, a.width), (512, 512))
        self.assertEqual(a.provenance.scene_id, 'scene000')

    def test_scenes_differ(self):
        a = generate_scene('scene000')
        b = generate_scene('scene001')
        self.assertTrue(np.mean(np.abs(a.pixels - b.pixels)) > 0.05)
        for scene in (a, b):
            self.assertTrue(np.std(scene.pixels) > 0.05)

    def test_scene_size(self):
        self.assertErrorRegex(ConfigurationError, "at least 512", generate_scene, 'scene000', 256)
        self.assertEqual(generate_scene('scene000', 640).width, 640)

    def test_camera_models(self):
        models = make_camera_models(8)
        self.assertEqual([m.model_id for m in models[:3]], ['model00', 'model01', 'model02'])
        signatures = set((m.cfa_pattern, m.demosaic_kernel) for m in models)
        self.assertEqual(len(signatures), 8)

        devices = make_devices(models[0], 3, seed=0)
        self.assertEqual([d.device_id for d in devices], ['model00-dev0', 'model00-dev1', 'model00-dev2'])
        self.assertEqual(len(set(d.prnu_seed for d in devices)), 3)
        self.assertEqual(devices, make_devices(models[0], 3, seed=0))

    def test_prnu(self):
        device = make_devices(make_camera_models(1)[0], 1, seed=0)[0]
        pattern = prnu_pattern(device, 64, 48)
        self.assertEqual(pattern.shape, (64, 48))
        self.assertTrue(np.max(np.abs(pattern)) <= PRNU_AMPLITUDE)
        self.assertTrue(np.array_equal(pattern, prnu_pattern(device, 64, 48)))

    def test_capture(self):
        scene = generate_scene('scene000')
        model = make_camera_models(1)[0]
        first, second = make_devices(model, 2, seed=0)

        a = capture(scene, model, first, derive_rng(0, 'capture'))
        again = capture(scene, model, first, derive_rng(0, 'capture'))
        b = capture(scene, model, second, derive_rng(0, 'capture'))

        self.assertTrue(np.array_equal(a.pixels, again.pixels))
        self.assertFalse(np.array_equal(a.pixels, b.pixels))
        self.assertEqual(a.provenance.model_id, 'model00')
        self.assertEqual(a.provenance.device_id, 'model00-dev0')
        self.assertEqual(a.provenance.scene_id, 'scene000')
        self.assertEqual(a.manipulation, UNALTERED)
        self.assertTrue(np.mean(np.abs(a.pixels - scene.pixels)) < 0.1)

        other = make_devices(make_camera_models(2)[1], 1, seed=0)[0]
        self.assertErrorRegex(ConfigurationError, "does not belong", capture, scene, model, other,
                              derive_rng(0, 'capture'))

    def test_models_separable(self):
        """A nearest centroid classifier on residual statistics beats chance on unseen scenes."""
        models = make_camera_models(4)
        train_features, train_labels, test_features, test_labels = [], [], [], []
        for index in range(6):
            scene = generate_scene("scene%03d" % index)
            for label, model in enumerate(models):
                device = make_devices(model, 1, seed=0)[0]
                img = capture(scene, model, device, derive_rng(0, index, label))
                if index < 4:
                    train_features.append(signature_features(img))
                    train_labels.append(label)
                else:
                    test_features.append(signature_features(img))
                    test_labels.append(label)

        self.assertEqual(len(train_features[0]), 12)
        accuracy = nearest_centroid_accuracy(train_features, train_labels, test_features, test_labels)
        self.assertTrue(accuracy > 0.25, accuracy)

    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, 'a'), derive_seed(1, 'a'))
        self.assertNotEqual(derive_seed(1, 'a'), derive_seed(2, 'a'))
        self.assertTrue(0 <= derive_seed('x') < 2 ** 64)


class DatasetGenSplitTest(TestCase):
    """Device and scene exclusive splits"""

    def setUp(self):
        super(DatasetGenSplitTest, self).setUp()
        self.models = make_camera_models(4)
        self.devices = dict((m.model_id, make_devices(m, 3, seed=0)) for m in self.models)
        self.scenes = ["scene%03d" % i for i in range(30)]

    def test_default_split(self):
        manifest = build_splits(self.models, self.devices, self.scenes)
        self.assertEqual(len(manifest.entries('test')), 4 * 1 * 3)
        self.assertEqual(len(manifest.entries('val')), 4 * 2 * 3)
        self.assertEqual(len(manifest.entries('train')), 4 * 2 * 24)
        self.assertTrue(manifest.validate())

        for model in self.models:
            test_devices = set(e.device_id for e in manifest.entries('test') if e.model_id == model.model_id)
            self.assertEqual(len(test_devices), 1)

        train_scenes = set(e.scene_id for e in manifest.entries('train'))
        val_scenes = set(e.scene_id for e in manifest.entries('val'))
        test_scenes = set(e.scene_id for e in manifest.entries('test'))
        self.assertEqual(len(val_scenes), 3)
        self.assertEqual(len(test_scenes), 3)
        self.assertFalse(train_scenes & val_scenes or train_scenes & test_scenes or val_scenes & test_scenes)

    def test_split_reproducible(self):
        a = build_splits(self.models, self.devices, self.scenes, rng=np.random.default_rng(4))
        b = build_splits(self.models, self.devices, self.scenes, rng=np.random.default_rng(4))
        self.assertEqual(a.to_dict(), b.to_dict())

    def test_images_per_scene(self):
        manifest = build_splits(self.models, self.devices, self.scenes, images_per_scene=2)
        self.assertEqual(len(manifest.entries('test')), 4 * 3 * 2)
        self.assertEqual(len(set(e.path for e in manifest.all_entries())), len(manifest.all_entries()))

    def test_split_errors(self):
        single = dict(self.devices)
        single['model01'] = single['model01'][:1]
        self.assertErrorRegex(SplitError, "at least 2", build_splits, self.models, single, self.scenes)
        self.assertErrorRegex(SplitError, "cannot provide", build_splits, self.models, self.devices,
                              self.scenes[:6])
        self.assertErrorRegex(SplitError, "cannot provide", build_splits, self.models, self.devices,
                              self.scenes, val_scenes=0)

    def test_validate_rejects_leaks(self):
        device_leak = SplitManifest({
            'train': [entry('m0', 'd0', 's0'), entry('m0', 'd1', 's0')],
            'test': [entry('m0', 'd1', 's1')],
        })
        self.assertErrorRegex(SplitError, "Test devices", device_leak.validate)

        scene_leak = SplitManifest({
            'train': [entry('m0', 'd0', 's0')],
            'val': [entry('m0', 'd0', 's1')],
            'test': [entry('m0', 'd1', 's1')],
        })
        self.assertErrorRegex(SplitError, "Test scenes", scene_leak.validate)

        lonely = SplitManifest({
            'train': [entry('m0', 'd0', 's0'), entry('m1', 'd2', 's0')],
            'test': [entry('m0', 'd1', 's1')],
        })
        self.assertErrorRegex(SplitError, "fewer than 2 devices", lonely.validate)

    def test_manifest_json(self):
        manifest = build_splits(self.models, self.devices, self.scenes)
        refs = [ClusterRef(path=manifest.entries('train')[0].path, row=0, col=256, quality=0.5)]
        manifest = SplitManifest(manifest.splits, {'train': refs}, {'seed': 0})
        tmpdir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmpdir, MANIFEST_FILENAME)
            manifest.to_json(path)
            back = SplitManifest.from_json(path)
            self.assertEqual(back.to_dict(), manifest.to_dict())
            self.assertEqual(back.entries('train')[0].manipulation, UNALTERED)
            self.assertEqual(back.clusters['train'][0].col, 256)
            self.assertEqual(back.clusters['val'], [])

            with open(path, 'w') as fh:
                fh.write("{ not json")
            self.assertErrorRegex(ConfigurationError, "Cannot load manifest", SplitManifest.from_json, path)
        finally:
            shutil.rmtree(tmpdir)

        self.assertErrorRegex(ConfigurationError, "Unknown split", manifest.entries, 'holdout')

    def test_records_pickle(self):
        """Worker pools ship these records between processes."""
        manifest = build_splits(self.models, self.devices, self.scenes)
        record = manifest.entries('train')[0]
        self.assertEqual(pickle.loads(pickle.dumps(record)), record)
        self.assertEqual(pickle.loads(pickle.dumps(self.models[0])), self.models[0])
        ref = ClusterRef(path='a', row=0, col=0, quality=0.1)
        self.assertEqual(pickle.loads(pickle.dumps(ref)), ref)


class DatasetGenBalanceTest(TestCase):
    """Manipulation class balancing"""

    def manifest(self):
        train = [entry('m0', 'd0', 's%d' % i) for i in range(3)]
        train += [entry('m0', 'd0', 's%d' % i, 'jpeg', 70) for i in range(2)]
        train += [entry('m0', 'd0', 's%d' % i, 'resize', 0.5) for i in range(2)]
        train += [entry('m0', 'd0', 's%d' % i, 'gamma', 0.8) for i in range(4)]
        return SplitManifest({'train': train})

    def test_balance_entries(self):
        manifest = self.manifest()
        balanced = balance_manipulation_classes(manifest, np.random.default_rng(0))
        kinds = [e.manipulation.kind for e in balanced.entries('train')]
        self.assertEqual(sorted(kinds), sorted(['unaltered', 'jpeg', 'resize', 'gamma'] * 2))
        self.assertTrue(balanced.metadata['balanced'])
        self.assertEqual(len(manifest.entries('train')), 11)

    def test_balance_clusters(self):
        manifest = self.manifest()
        manifest.clusters = {'train': [ClusterRef(path=e.path, row=0, col=c, quality=0.5)
                                       for e in manifest.entries('train') for c in (0, 256)]}
        balanced = balance_manipulation_classes(SplitManifest(manifest.splits, manifest.clusters),
                                                np.random.default_rng(0))
        kinds = dict((e.path, e.manipulation.kind) for e in manifest.entries('train'))
        counts = {}
        for ref in balanced.clusters['train']:
            counts[kinds[ref.path]] = counts.get(kinds[ref.path], 0) + 1
        self.assertEqual(counts, {'unaltered': 4, 'jpeg': 4, 'resize': 4, 'gamma': 4})
        self.assertEqual(len(balanced.entries('train')), 11)

    def test_balance_leaves_test_split(self):
        manifest = self.manifest()
        test = [entry('m1', 'd1', 's9', index=i) for i in range(2)]
        splits = {'train': manifest.entries('train'), 'val': [], 'test': test}
        clusters = dict((name, [ClusterRef(path=e.path, row=0, col=0, quality=0.5) for e in entries])
                        for name, entries in splits.items())
        balanced = balance_manipulation_classes(SplitManifest(splits, clusters), np.random.default_rng(0))
        self.assertEqual(len(balanced.clusters['train']), 4 * 2)
        self.assertEqual(balanced.clusters['test'], clusters['test'])
        self.assertEqual(balanced.entries('test'), test)

    def test_missing_class(self):
        manifest = SplitManifest({'train': [entry('m0', 'd0', 's0'), entry('m0', 'd0', 's0', 'jpeg', 70)]})
        self.assertErrorRegex(SplitError, "no samples of class", balance_manipulation_classes, manifest,
                              np.random.default_rng(0))


class DatasetGenWriteTest(TestCase):
    """Writing, augmenting and extracting a small dataset"""

    def setUp(self):
        super(DatasetGenWriteTest, self).setUp()
        self.tmpdir = tempfile.mkdtemp()
        self.settings = mkDatasetSettings(SMALL_SETTINGS)

    def tearDown(self):
        super(DatasetGenWriteTest, self).tearDown()

    def test_settings(self):
        self.assertEqual(mkDatasetSettings({}).num_scenes, 30)
        self.assertErrorRegex(ConfigurationError, "at least 2 camera models", mkDatasetSettings, {'num_models': 1})
        self.assertErrorRegex(ConfigurationError, "image_size", mkDatasetSettings, {'image_size': 300})

    def test_generate(self):
        root = os.path.join(self.tmpdir, 'data')
        manifest = generate_dataset(root, self.settings)

        self.assertEqual(len(manifest.entries('test')), 2)
        self.assertEqual(len(manifest.entries('val')), 2)
        self.assertEqual(len(manifest.entries('train')), 6)
        for e in manifest.all_entries():
            img = read_image(os.path.join(root, e.path))
            self.assertEqual((img.height, img.width), (512, 512))

        with open(os.path.join(root, METADATA_FILENAME)) as fh:
            meta = json.load(fh)
        self.assertTrue(meta['synthetic'])
        self.assertEqual(len(meta['models']), 2)

        on_disk = SplitManifest.from_json(os.path.join(root, MANIFEST_FILENAME))
        self.assertEqual(on_disk.to_dict(), manifest.to_dict())
        self.assertEqual(on_disk.metadata['task_classes'], ['model00', 'model01'])

        self.assertErrorRegex(DatasetExistsError, "already exists", generate_dataset, root, self.settings)
        generate_dataset(root, self.settings, force=True)

    def test_reproducible_across_workers(self):
        serial = os.path.join(self.tmpdir, 'serial')
        parallel = os.path.join(self.tmpdir, 'parallel')
        generate_dataset(serial, self.settings, workers=1)
        generate_dataset(parallel, self.settings, workers=2)
        self.assertEqual(read_tree(serial), read_tree(parallel))

    def test_augment_and_extract(self):
        root = os.path.join(self.tmpdir, 'data')
        manifest = generate_dataset(root, self.settings)
        policy = [mkManipulationTag('jpeg', 80), mkManipulationTag('resize', 0.5), mkManipulationTag('gamma', 1.2)]

        augmented = augment_dataset(root, manifest, policy, splits=('train',))
        self.assertEqual(len(augmented.entries('train')), 6 * 4)
        self.assertEqual(len(augmented.entries('val')), 2)
        self.assertEqual(augmented.metadata['policy'], 'custom')
        for e in augmented.entries('train'):
            self.assertTrue(os.path.exists(os.path.join(root, e.path)))
        resized = [e for e in augmented.entries('train') if e.manipulation.kind == 'resize']
        self.assertTrue(all(e.path.endswith('_r0.5.png') for e in resized))
        self.assertEqual(read_image(os.path.join(root, resized[0].path)).width, 256)
        self.assertTrue(augmented.validate())

        # rerunning does not list variants twice
        again = augment_dataset(root, augmented, policy, splits=('train',))
        self.assertEqual(len(again.entries('train')), 6 * 4)

        extracted = extract_dataset_clusters(root, augmented, k=3)
        per_path = {}
        for ref in extracted.clusters['train']:
            per_path[ref.path] = per_path.get(ref.path, 0) + 1
        for e in augmented.entries('train'):
            self.assertEqual(per_path[e.path], 1 if e.manipulation.kind == 'resize' else 3)
        self.assertEqual(len(extracted.clusters['test']), 2 * 3)

        parallel = extract_dataset_clusters(root, augmented, k=3, workers=2)
        self.assertEqual(parallel.to_dict(), extracted.to_dict())
