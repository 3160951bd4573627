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
Synthetic camera-signature datasets and device/scene exclusive splits.

A synthetic camera model is a Bayer pattern, a demosaicing kernel, a noise gain and an in-camera
JPEG quality. Devices of one model only differ in their fixed multiplicative sensor pattern (PRNU).
All generator parameters are artificial stand-ins for real camera pipelines.

@author: Andy Georges (Ghent University)
"""
import hashlib
import json
import logging
import os
import tempfile
from collections import OrderedDict
from multiprocessing import Pool

import cv2
import numpy as np
from PIL import Image, ImageDraw

from vsc.forensics import ConfigurationError, ForensicsError, namedrecord
from vsc.forensics.imageops import (
    CLUSTERS_PER_IMAGE, MANIPULATION_CLASSES, UNALTERED,
    DatasetEntry, ImageBuffer, ManipulationKind, Provenance,
    augment_image, extract_clusters, get_policy, jpeg_codec_version, jpeg_cycle,
    mkManipulationTag, read_image, tag_suffix, write_image,
)

MANIFEST_FILENAME = 'manifest.json'
METADATA_FILENAME = 'dataset_meta.json'

SPLITS = ('train', 'val', 'test')
BALANCED_SPLITS = ('train', 'val')

MIN_SCENE_SIZE = 512
PRNU_AMPLITUDE = 0.02
SCENE_OCTAVES = 5
SCENE_SHAPES = 24

CFA_PATTERNS = ('RGGB', 'BGGR', 'GRBG', 'GBRG')
IN_CAMERA_QUALITIES = (85, 90, 95, 98)

DEMOSAIC_KERNELS = OrderedDict([
    ('bilinear', np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])),
    ('box', np.ones((3, 3))),
    ('gaussian5', np.outer([1.0, 4.0, 6.0, 4.0, 1.0], [1.0, 4.0, 6.0, 4.0, 1.0])),
    ('wide', np.ones((5, 5))),
])

NOISE_GAIN_STEP = 4e-4


class SplitError(ForensicsError):
    pass


class DatasetExistsError(ForensicsError):
    pass


SyntheticCameraModel = namedrecord(
    'SyntheticCameraModel',
    ['model_id', 'cfa_pattern', 'demosaic_kernel', 'jpeg_quality', 'noise_gain'],
)
SyntheticDevice = namedrecord('SyntheticDevice', ['device_id', 'model_id', 'prnu_seed'])
ClusterRef = namedrecord('ClusterRef', ['path', 'row', 'col', 'quality'])

DatasetSettings = namedrecord(
    'DatasetSettings',
    ['num_models', 'devices_per_model', 'num_scenes', 'val_scenes', 'test_scenes',
     'images_per_scene', 'image_size', 'seed'],
    {
        'num_models': 4,
        'devices_per_model': 3,
        'num_scenes': 30,
        'val_scenes': 3,
        'test_scenes': 3,
        'images_per_scene': 1,
        'image_size': MIN_SCENE_SIZE,
        'seed': 0,
    },
)


def mkDatasetSettings(fields):
    """Make validated DatasetSettings from the given fields."""
    settings = DatasetSettings(**dict(fields))
    settings = settings._replace(**dict((k, int(v)) for k, v in settings._asdict().items()))
    if settings.num_models < 2:
        raise ConfigurationError("Need at least 2 camera models, got %d" % settings.num_models)
    if settings.num_models > len(CFA_PATTERNS) * len(DEMOSAIC_KERNELS):
        raise ConfigurationError("At most %d distinct camera models can be generated" %
                                 (len(CFA_PATTERNS) * len(DEMOSAIC_KERNELS)))
    if settings.images_per_scene < 1:
        raise ConfigurationError("images_per_scene must be positive")
    if settings.image_size < MIN_SCENE_SIZE:
        raise ConfigurationError("image_size must be at least %d, got %d" % (MIN_SCENE_SIZE, settings.image_size))
    return settings


def derive_seed(*keys):
    """64 bit seed derived from the given keys, independent of process and hash randomisation."""
    digest = hashlib.sha256(json.dumps([str(k) for k in keys]).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def derive_rng(*keys):
    return np.random.default_rng(derive_seed(*keys))


def make_camera_models(count):
    """
    Camera models with pairwise distinct signatures.

    Bayer pattern cycles fastest, then the demosaicing kernel; quality and noise gain also vary.
    """
    kernels = list(DEMOSAIC_KERNELS)
    models = []
    for index in range(count):
        models.append(SyntheticCameraModel(
            model_id="model%02d" % index,
            cfa_pattern=CFA_PATTERNS[index % len(CFA_PATTERNS)],
            demosaic_kernel=kernels[(index + index // len(CFA_PATTERNS)) % len(kernels)],
            jpeg_quality=IN_CAMERA_QUALITIES[(3 * index) % len(IN_CAMERA_QUALITIES)],
            noise_gain=NOISE_GAIN_STEP * (index + 1),
        ))
    return models


def make_devices(model, count, seed):
    return [
        SyntheticDevice(
            device_id="%s-dev%d" % (model.model_id, index),
            model_id=model.model_id,
            prnu_seed=derive_seed(seed, 'prnu', model.model_id, index),
        )
        for index in range(count)
    ]


def _value_noise(rng, size):
    """Sum of bilinearly upsampled random grids, per channel, normalised to [0, 1]."""
    total = np.zeros((size, size, 3))
    for octave in range(SCENE_OCTAVES):
        cells = 4 * 2 ** octave
        for channel in range(3):
            grid = rng.random((cells, cells)).astype(np.float32)
            layer = Image.fromarray(grid, mode='F').resize((size, size), Image.BILINEAR)
            total[..., channel] += np.asarray(layer, dtype=np.float64) * 0.5 ** octave
    low = total.min(axis=(0, 1))
    high = total.max(axis=(0, 1))
    return (total - low) / np.maximum(high - low, 1e-12)


def generate_scene(scene_id, size=MIN_SCENE_SIZE, seed=0):
    """
    Procedural scene keyed by scene_id: multi-octave value noise with random shapes drawn on top.
    """
    if size < MIN_SCENE_SIZE:
        raise ConfigurationError("Scenes must be at least %dx%d, got %d" % (MIN_SCENE_SIZE, MIN_SCENE_SIZE, size))

    rng = derive_rng(seed, 'scene', scene_id)
    base = 0.1 + 0.8 * _value_noise(rng, size)
    canvas = Image.fromarray(np.round(base * 255).astype(np.uint8), mode='RGB')
    draw = ImageDraw.Draw(canvas)
    for _ in range(SCENE_SHAPES):
        x0, y0 = rng.integers(0, size, size=2)
        w, h = rng.integers(size // 16, size // 3, size=2)
        box = [int(x0), int(y0), int(min(x0 + w, size - 1)), int(min(y0 + h, size - 1))]
        fill = tuple(int(v) for v in rng.integers(20, 236, size=3))
        if rng.random() < 0.5:
            draw.rectangle(box, fill=fill)
        else:
            draw.ellipse(box, fill=fill)

    return ImageBuffer(np.asarray(canvas, dtype=np.float64) / 255.0,
                       Provenance(scene_id=scene_id, manipulation=UNALTERED))


def cfa_masks(pattern, height, width):
    """(H, W, 3) 0/1 masks of the Bayer sites of each colour."""
    masks = np.zeros((height, width, 3))
    channel = {'R': 0, 'G': 1, 'B': 2}
    for index, colour in enumerate(pattern):
        row, col = divmod(index, 2)
        masks[row::2, col::2, channel[colour]] = 1.0
    return masks


def demosaic(mosaic, masks, kernel_name):
    """Normalised convolution of each colour plane with the model's interpolation kernel."""
    kernel = DEMOSAIC_KERNELS[kernel_name]
    out = np.empty_like(masks)
    for channel in range(3):
        num = cv2.filter2D(mosaic * masks[..., channel], cv2.CV_64F, kernel, borderType=cv2.BORDER_REFLECT)
        den = cv2.filter2D(masks[..., channel], cv2.CV_64F, kernel, borderType=cv2.BORDER_REFLECT)
        out[..., channel] = num / den
    return out


def prnu_pattern(device, height, width):
    """Fixed multiplicative sensor pattern of a device, uniform in [-PRNU_AMPLITUDE, PRNU_AMPLITUDE]."""
    rng = np.random.default_rng(device.prnu_seed)
    return rng.uniform(-PRNU_AMPLITUDE, PRNU_AMPLITUDE, size=(height, width))


def capture(scene, model, device, rng):
    """
    Simulate taking a picture of the scene with the device.

    Mosaic, demosaic, PRNU, signal dependent noise and in-camera JPEG, in that order.
    """
    if device.model_id != model.model_id:
        raise ConfigurationError("Device %s does not belong to model %s" % (device.device_id, model.model_id))

    height, width = scene.height, scene.width
    masks = cfa_masks(model.cfa_pattern, height, width)
    mosaic = (scene.pixels * masks).sum(axis=2)

    pixels = demosaic(mosaic, masks, model.demosaic_kernel)
    pixels *= 1.0 + prnu_pattern(device, height, width)[..., np.newaxis]
    pixels = np.clip(pixels, 0.0, 1.0)
    pixels += rng.standard_normal(pixels.shape) * np.sqrt(model.noise_gain * pixels)
    pixels = np.clip(pixels, 0.0, 1.0)

    provenance = Provenance(
        model_id=model.model_id,
        device_id=device.device_id,
        scene_id=scene.provenance.scene_id,
        manipulation=UNALTERED,
    )
    compressed = jpeg_cycle(ImageBuffer(pixels, provenance), model.jpeg_quality)
    # in-camera compression is part of the capture, not a manipulation
    return ImageBuffer(compressed.pixels, provenance)


def entry_to_dict(entry):
    result = dict(entry._asdict())
    result['manipulation'] = dict(entry.manipulation._asdict())
    return result


def entry_from_dict(data):
    data = dict(data)
    tag = data.get('manipulation') or {}
    data['manipulation'] = mkManipulationTag(tag.get('kind', 'unaltered'), tag.get('factor'))
    return DatasetEntry(**data)


class SplitManifest(object):
    """
    Train/val/test lists of dataset entries, plus optionally the extracted clusters per split.
    """

    def __init__(self, splits=None, clusters=None, metadata=None):
        self.splits = OrderedDict((name, list((splits or {}).get(name, []))) for name in SPLITS)
        self.clusters = None
        if clusters is not None:
            self.clusters = OrderedDict((name, list(clusters.get(name, []))) for name in SPLITS)
        self.metadata = dict(metadata or {})

    def entries(self, split):
        try:
            return self.splits[split]
        except KeyError:
            raise ConfigurationError("Unknown split %s, choose from %s" % (split, ", ".join(SPLITS)))

    def all_entries(self):
        return [e for name in SPLITS for e in self.splits[name]]

    def entry_map(self):
        return dict((e.path, e) for e in self.all_entries())

    def models(self):
        return sorted(set(e.model_id for e in self.all_entries()))

    def copy(self):
        return SplitManifest(self.splits, self.clusters, self.metadata)

    def validate(self):
        """Raise SplitError unless test devices and scenes are unseen in train and val."""
        seen = [e for name in ('train', 'val') for e in self.splits[name]]
        test = self.splits['test']

        leaked_devices = set(e.device_id for e in test) & set(e.device_id for e in seen)
        if leaked_devices:
            raise SplitError("Test devices also used for training or validation: %s" % sorted(leaked_devices))
        leaked_scenes = set(e.scene_id for e in test) & set(e.scene_id for e in seen)
        if leaked_scenes:
            raise SplitError("Test scenes also used for training or validation: %s" % sorted(leaked_scenes))

        devices = {}
        for e in self.all_entries():
            devices.setdefault(e.model_id, set()).add(e.device_id)
        single = sorted(m for m, d in devices.items() if len(d) < 2)
        if single:
            raise SplitError("Models with fewer than 2 devices cannot hold one out: %s" % single)
        return True

    def to_dict(self):
        data = {
            'splits': dict((name, [entry_to_dict(e) for e in entries]) for name, entries in self.splits.items()),
            'metadata': self.metadata,
        }
        if self.clusters is not None:
            data['clusters'] = dict((name, [dict(c._asdict()) for c in refs]) for name, refs in self.clusters.items())
        return data

    @classmethod
    def from_dict(cls, data):
        splits = dict((name, [entry_from_dict(e) for e in entries]) for name, entries in data['splits'].items())
        clusters = None
        if data.get('clusters') is not None:
            clusters = dict((name, [ClusterRef(**c) for c in refs]) for name, refs in data['clusters'].items())
        return cls(splits, clusters, data.get('metadata'))

    def to_json(self, path):
        write_json_atomic(path, self.to_dict())

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (IOError, OSError, ValueError) as err:
            logging.exception("Cannot load manifest %s", path)
            raise ConfigurationError("Cannot load manifest %s: %s" % (path, err))
        return cls.from_dict(data)


def write_json_atomic(path, data):
    """Dump data as sorted, indented JSON via a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    (fd, tmp) = tempfile.mkstemp(dir=directory, suffix='.json_tmp')
    with os.fdopen(fd, 'w') as fh:
        json.dump(data, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.rename(tmp, path)


def image_path(model_id, device_id, scene_id, index, suffix=''):
    return os.path.join(model_id, device_id, scene_id, "img%d%s.png" % (index, suffix))


def build_splits(models, devices, scene_ids, val_scenes=3, test_scenes=3, images_per_scene=1, rng=None):
    """
    Device and scene exclusive split.

    One device per model and test_scenes scenes go to test only. The other devices cover the
    remaining scenes, split by scene over val and train.

    With the desk-scale defaults (4 models, 3 devices per model, 30 scenes, 3 val and 3 test scenes)
    this gives 192 train, 24 val and 12 test images. For reference, the full-scale camera model
    setup on real photographs has 18 models and 7938 train, 1353 val and 540 test images.

    @param models: list of SyntheticCameraModel
    @param devices: dict model_id -> list of SyntheticDevice
    """
    if rng is None:
        rng = np.random.default_rng(0)

    for model in models:
        count = len(devices.get(model.model_id, []))
        if count < 2:
            raise SplitError("Model %s has %d devices, at least 2 are needed to hold one out" %
                             (model.model_id, count))
    if val_scenes < 1 or test_scenes < 1 or len(scene_ids) < val_scenes + test_scenes + 1:
        raise SplitError("%d scenes cannot provide %d validation, %d test and at least 1 training scene" %
                         (len(scene_ids), val_scenes, test_scenes))

    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    scene_split = {
        'test': sorted(order[:test_scenes]),
        'val': sorted(order[test_scenes:test_scenes + val_scenes]),
        'train': sorted(order[test_scenes + val_scenes:]),
    }

    splits = dict((name, []) for name in SPLITS)
    for model in models:
        model_devices = devices[model.model_id]
        held_out = model_devices[int(rng.integers(len(model_devices)))]
        for device in model_devices:
            names = ('test',) if device is held_out else ('train', 'val')
            for name in names:
                for scene_id in scene_split[name]:
                    for index in range(images_per_scene):
                        splits[name].append(DatasetEntry(
                            model_id=model.model_id,
                            device_id=device.device_id,
                            scene_id=scene_id,
                            path=image_path(model.model_id, device.device_id, scene_id, index),
                            manipulation=UNALTERED,
                        ))

    manifest = SplitManifest(splits)
    manifest.validate()
    logging.info("Split %s images over train/val/test",
                 "/".join(str(len(splits[name])) for name in SPLITS))
    return manifest


def balance_manipulation_classes(manifest, rng):
    """
    Subsample the train and val splits so that each manipulation class is equally represented.

    Works on the clusters when the manifest has them, on the images otherwise. The test split is left as is,
    its manipulations are usually applied at evaluation time.
    """
    balanced = manifest.copy()
    entries = manifest.entry_map()

    def kind_of(item):
        return (entries[item.path] if hasattr(item, 'quality') else item).manipulation.kind

    source = manifest.clusters if manifest.clusters is not None else manifest.splits
    for name in BALANCED_SPLITS:
        items = source.get(name)
        if not items:
            continue
        by_kind = dict((kind, []) for kind in MANIPULATION_CLASSES)
        for item in items:
            by_kind[kind_of(item)].append(item)
        empty = [kind for kind, members in by_kind.items() if not members]
        if empty:
            raise SplitError("Split %s has no samples of class %s" % (name, ", ".join(empty)))

        count = min(len(members) for members in by_kind.values())
        keep = set()
        for kind in MANIPULATION_CLASSES:
            members = by_kind[kind]
            chosen = rng.choice(len(members), size=count, replace=False)
            keep.update(id(members[i]) for i in chosen)
        selected = [item for item in items if id(item) in keep]

        if manifest.clusters is not None:
            balanced.clusters[name] = selected
        else:
            balanced.splits[name] = selected
        logging.info("Balanced split %s to %d samples per class", name, count)

    balanced.metadata['balanced'] = True
    return balanced


def signature_features(img):
    """
    Log energy of the high-pass residual per colour channel and Bayer phase (12 values).
    """
    pixels = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    residual = pixels - cv2.GaussianBlur(pixels, (3, 3), 0)
    features = []
    for channel in range(3):
        for row in range(2):
            for col in range(2):
                phase = residual[row::2, col::2, channel]
                features.append(np.log(np.mean(phase * phase) + 1e-12))
    return np.array(features)


def nearest_centroid_accuracy(train_features, train_labels, test_features, test_labels):
    """Accuracy of a nearest class centroid classifier on standardised features."""
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)

    mean = train_features.mean(axis=0)
    std = train_features.std(axis=0)
    std[std == 0] = 1.0
    train_z = (train_features - mean) / std
    test_z = (test_features - mean) / std

    classes = sorted(set(train_labels.tolist()))
    centroids = np.array([train_z[train_labels == c].mean(axis=0) for c in classes])
    distances = ((test_z[:, np.newaxis, :] - centroids[np.newaxis, :, :]) ** 2).sum(axis=2)
    predicted = np.array(classes)[distances.argmin(axis=1)]
    return float(np.mean(predicted == test_labels))


def _capture_task(task):
    """Generate, capture and store one image. Runs in a worker process."""
    (root, entry, model, device, index, seed, size) = task
    scene = generate_scene(entry.scene_id, size, seed)
    rng = derive_rng(seed, 'capture', device.device_id, entry.scene_id, index)
    img = capture(scene, model, device, rng)
    write_image(img, os.path.join(root, entry.path))
    return entry.path


def run_tasks(function, tasks, workers):
    """Map function over tasks, in a process pool when workers > 1."""
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [function(task) for task in tasks]
    with Pool(workers) as pool:
        return pool.map(function, tasks, chunksize=max(1, len(tasks) // (4 * workers)))


def generate_dataset(root, settings, workers=1, force=False):
    """
    Write a synthetic dataset with its manifest and metadata under root.

    @returns: the SplitManifest
    """
    manifest_path = os.path.join(root, MANIFEST_FILENAME)
    if os.path.exists(manifest_path) and not force:
        raise DatasetExistsError("A dataset already exists at %s, use --force to overwrite it" % root)
    if not os.path.isdir(root):
        os.makedirs(root)

    models = make_camera_models(settings.num_models)
    devices = dict((m.model_id, make_devices(m, settings.devices_per_model, settings.seed)) for m in models)
    scene_ids = ["scene%03d" % index for index in range(settings.num_scenes)]

    manifest = build_splits(models, devices, scene_ids,
                            val_scenes=settings.val_scenes,
                            test_scenes=settings.test_scenes,
                            images_per_scene=settings.images_per_scene,
                            rng=derive_rng(settings.seed, 'splits'))

    by_model = dict((m.model_id, m) for m in models)
    by_device = dict((d.device_id, d) for ds in devices.values() for d in ds)
    tasks = []
    for entry in manifest.all_entries():
        index = int(os.path.splitext(os.path.basename(entry.path))[0][len('img'):])
        tasks.append((root, entry, by_model[entry.model_id], by_device[entry.device_id], index,
                      settings.seed, settings.image_size))

    logging.info("Generating %d images with %d workers under %s", len(tasks), workers, root)
    run_tasks(_capture_task, tasks, workers)

    manifest.metadata = {'seed': settings.seed, 'task_classes': manifest.models()}
    manifest.to_json(manifest_path)

    meta = {
        'synthetic': True,
        'note': 'generator parameters are artificial stand-ins for camera pipelines',
        'settings': dict(settings._asdict()),
        'models': [dict(m._asdict()) for m in models],
        'devices': [dict(d._asdict()) for ds in devices.values() for d in ds],
        'prnu_amplitude': PRNU_AMPLITUDE,
        'demosaic_kernels': dict((k, v.tolist()) for k, v in DEMOSAIC_KERNELS.items()),
        'jpeg_codec': jpeg_codec_version(),
    }
    write_json_atomic(os.path.join(root, METADATA_FILENAME), meta)
    return manifest


def _augment_task(task):
    (root, entry, tags) = task
    img = read_image(os.path.join(root, entry.path),
                     Provenance(entry.model_id, entry.device_id, entry.scene_id, UNALTERED))
    stem = os.path.splitext(entry.path)[0]
    created = []
    for variant in augment_image(img, tags):
        path = "%s%s.png" % (stem, tag_suffix(variant.manipulation))
        write_image(variant, os.path.join(root, path))
        created.append(entry._replace(path=path, manipulation=variant.manipulation))
    return created


def augment_dataset(root, manifest, policy, splits=SPLITS, workers=1):
    """
    Store the policy's manipulated variants of every unaltered image next to it, and list them in the manifest.
    """
    tags = get_policy(policy)
    augmented = manifest.copy()
    for name in splits:
        originals = [e for e in manifest.entries(name) if e.manipulation.kind == ManipulationKind.unaltered.value]
        known = set(e.path for e in manifest.entries(name))
        results = run_tasks(_augment_task, [(root, e, tags) for e in originals], workers)
        added = [e for created in results for e in created if e.path not in known]
        augmented.splits[name] = list(manifest.entries(name)) + added
        logging.info("Added %d manipulated images to split %s", len(added), name)
    augmented.clusters = None
    augmented.metadata['policy'] = policy if isinstance(policy, str) else 'custom'
    return augmented


def _extract_task(task):
    (root, entry, k) = task
    img = read_image(os.path.join(root, entry.path))
    if not img.can_extract_clusters:
        logging.warning("Skipping %s, smaller than one cluster", entry.path)
        return []
    return [ClusterRef(path=entry.path, row=c.row, col=c.col, quality=c.quality)
            for c in extract_clusters(img, k)]


def extract_dataset_clusters(root, manifest, k=CLUSTERS_PER_IMAGE, workers=1):
    """Fill the clusters section of the manifest with the top-k clusters of every image."""
    extracted = manifest.copy()
    extracted.clusters = OrderedDict()
    for name in SPLITS:
        results = run_tasks(_extract_task, [(root, e, k) for e in manifest.entries(name)], workers)
        extracted.clusters[name] = [ref for refs in results for ref in refs]
        logging.info("Extracted %d clusters for split %s", len(extracted.clusters[name]), name)
    return extracted
