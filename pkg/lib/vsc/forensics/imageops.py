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
Image manipulations, the cluster quality metric and cluster/patch extraction.

Pixels are float64 RGB in [0, 1], shape (H, W, 3).

@author: Andy Georges (Ghent University)
"""
import io
import logging
import math
import os
import re
from enum import Enum

import cv2
import numpy as np
import PIL
from PIL import Image, features

from vsc.forensics import ConfigurationError, ForensicsError, namedrecord

CLUSTER_SIZE = 256
PATCH_SIZE = 64
CLUSTERS_PER_IMAGE = 20

QUALITY_ALPHA = 0.7
QUALITY_BETA = 4.0
QUALITY_GAMMA = math.log(0.01)

JPEG_SUBSAMPLING = 2  # 4:2:0

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.tif', '.tiff')

TAG_SUFFIX_REGEX = re.compile(r"_(?P<kind>[gjr])(?P<factor>\d+(?:\.\d+)?)$")


class ImageOpsError(ForensicsError):
    pass


class ClusterExtractionError(ImageOpsError):
    pass


class ManipulationKind(Enum):
    unaltered = "unaltered"
    jpeg = "jpeg"
    resize = "resize"
    gamma = "gamma"


MANIPULATION_CLASSES = [k.value for k in ManipulationKind]

SUFFIX_KINDS = {
    'g': ManipulationKind.gamma,
    'j': ManipulationKind.jpeg,
    'r': ManipulationKind.resize,
}

ManipulationTag = namedrecord('ManipulationTag', ['kind', 'factor'])
Provenance = namedrecord('Provenance', ['model_id', 'device_id', 'scene_id', 'manipulation'])
Cluster = namedrecord('Cluster', ['pixels', 'row', 'col', 'quality'])
Patch = namedrecord('Patch', ['pixels', 'row', 'col'])
DatasetEntry = namedrecord('DatasetEntry', ['model_id', 'device_id', 'scene_id', 'path', 'manipulation'])


def mkManipulationTag(kind, factor=None):
    """Make a ManipulationTag, checking the factor fits the kind."""
    try:
        kind = ManipulationKind(kind.value if isinstance(kind, ManipulationKind) else kind)
    except ValueError:
        raise ConfigurationError("Unknown manipulation kind %s" % (kind,))

    if kind == ManipulationKind.unaltered:
        if factor is not None:
            raise ConfigurationError("An unaltered image carries no factor, got %s" % (factor,))
        return ManipulationTag(kind=kind.value, factor=None)

    if factor is None:
        raise ConfigurationError("Manipulation %s needs a factor" % kind.value)
    if kind == ManipulationKind.jpeg:
        factor = int(factor)
        if not 0 < factor <= 100:
            raise ConfigurationError("JPEG quality must lie in (0, 100], got %s" % factor)
    else:
        factor = float(factor)
        if factor <= 0:
            raise ConfigurationError("%s factor must be positive, got %s" % (kind.value, factor))

    return ManipulationTag(kind=kind.value, factor=factor)


UNALTERED = mkManipulationTag(ManipulationKind.unaltered)


def _policy(*entries):
    return tuple(mkManipulationTag(kind, factor) for kind, factor in entries)


TRAIN_POLICY = _policy(
    ('jpeg', 70), ('jpeg', 80), ('jpeg', 90),
    ('resize', 0.5), ('resize', 0.8), ('resize', 1.5), ('resize', 2.0),
    ('gamma', 0.8), ('gamma', 1.2),
)

TEST_POLICY = _policy(
    ('gamma', 0.5), ('gamma', 0.75), ('gamma', 1.25), ('gamma', 1.5),
    ('jpeg', 95), ('jpeg', 90), ('jpeg', 85), ('jpeg', 80),
    ('resize', 0.8), ('resize', 0.9), ('resize', 1.1), ('resize', 1.2),
)

# manipulation detection is tested without the JPEG 80 column
MANIPULATION_TEST_POLICY = tuple(tag for tag in TEST_POLICY if tag != mkManipulationTag('jpeg', 80))

POLICIES = {
    'none': (),
    'train': TRAIN_POLICY,
    'test': TEST_POLICY,
    'manipulation-test': MANIPULATION_TEST_POLICY,
}


def get_policy(policy):
    """Return the tags of a named policy, or the given sequence of tags."""
    if policy is None:
        return ()
    if isinstance(policy, str):
        try:
            return POLICIES[policy]
        except KeyError:
            raise ConfigurationError("Unknown augmentation policy %s, choose from %s" % (policy, sorted(POLICIES)))
    return tuple(policy)


class ImageBuffer(object):
    """
    Decoded RGB image with its provenance.
    """

    def __init__(self, pixels, provenance=None):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ImageOpsError("Expected (H, W, 3) pixels, got shape %s" % (pixels.shape,))
        if not np.all(np.isfinite(pixels)) or pixels.min(initial=0.0) < 0.0 or pixels.max(initial=0.0) > 1.0:
            raise ImageOpsError("Pixel values must lie in [0, 1]")
        self.pixels = pixels
        if provenance is None:
            provenance = Provenance(manipulation=UNALTERED)
        elif provenance.manipulation is None:
            provenance = provenance._replace(manipulation=UNALTERED)
        self.provenance = provenance

    def __repr__(self):
        return "ImageBuffer(%dx%d, %s)" % (self.width, self.height, self.provenance)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def manipulation(self):
        return self.provenance.manipulation

    @property
    def can_extract_clusters(self):
        return self.height >= CLUSTER_SIZE and self.width >= CLUSTER_SIZE

    def derive(self, pixels, tag):
        """New buffer with the same origin, new pixels and the manipulation tag of the applied operation."""
        return ImageBuffer(pixels, self.provenance._replace(manipulation=tag))


def to_uint8(pixels):
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def from_uint8(array):
    return np.asarray(array, dtype=np.float64) / 255.0


def gamma_correct(img, gamma):
    """out = in ** gamma, per channel."""
    tag = mkManipulationTag(ManipulationKind.gamma, gamma)
    return img.derive(np.clip(np.power(img.pixels, tag.factor), 0.0, 1.0), tag)


def resize(img, scale):
    """
    Bilinear resize to round(dim * scale) per axis.

    An image that ends up smaller than a cluster is kept, but can_extract_clusters turns False.
    """
    tag = mkManipulationTag(ManipulationKind.resize, scale)
    height = int(math.floor(img.height * tag.factor + 0.5))
    width = int(math.floor(img.width * tag.factor + 0.5))
    if height < 1 or width < 1:
        raise ImageOpsError("Resizing %dx%d by %s leaves no pixels" % (img.width, img.height, scale))

    if (height, width) == (img.height, img.width):
        pixels = img.pixels.copy()
    else:
        pixels = cv2.resize(img.pixels, (width, height), interpolation=cv2.INTER_LINEAR)
    result = img.derive(np.clip(pixels, 0.0, 1.0), tag)

    if not result.can_extract_clusters:
        logging.warning("Resized image %dx%d is smaller than one %d cluster, it will be skipped for extraction",
                        width, height, CLUSTER_SIZE)
    return result


def jpeg_codec_version():
    """Version string of the JPEG codec behind Pillow, recorded in run metadata."""
    try:
        libjpeg = features.version_codec('jpg')
    except Exception:  # older Pillow releases
        libjpeg = None
    return "Pillow %s, libjpeg %s" % (PIL.__version__, libjpeg or 'unknown')


def jpeg_cycle(img, quality):
    """Baseline JPEG encode at quality with 4:2:0 chroma subsampling, then decode."""
    tag = mkManipulationTag(ManipulationKind.jpeg, quality)
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(img.pixels), mode='RGB').save(
            buf, format='JPEG', quality=tag.factor, subsampling=JPEG_SUBSAMPLING, optimize=False, progressive=False)
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert('RGB'))
    except (IOError, OSError, ValueError) as err:
        logging.exception("JPEG codec failed at quality %d", tag.factor)
        raise ImageOpsError("JPEG round trip failed: %s" % err)
    return img.derive(from_uint8(decoded), tag)


def apply_manipulation(img, tag):
    kind = ManipulationKind(tag.kind)
    if kind == ManipulationKind.gamma:
        return gamma_correct(img, tag.factor)
    elif kind == ManipulationKind.jpeg:
        return jpeg_cycle(img, tag.factor)
    elif kind == ManipulationKind.resize:
        return resize(img, tag.factor)
    return img.derive(img.pixels.copy(), UNALTERED)


def augment_image(img, policy):
    """One manipulated copy of img per tag in the policy; the original is not included."""
    return [apply_manipulation(img, tag) for tag in get_policy(policy)]


def quality_score(cluster, alpha=QUALITY_ALPHA, beta=QUALITY_BETA, gamma=QUALITY_GAMMA):
    """
    Score in [0, 1] favouring mid exposure and strong texture.

    Averages, over the RGB channels, alpha*beta*(mu - mu^2) + (1 - alpha)*(1 - exp(gamma*sigma)),
    with mu and sigma the channel mean and population standard deviation.
    """
    pixels = cluster.pixels if isinstance(cluster, Cluster) else np.asarray(cluster, dtype=np.float64)
    flat = pixels.reshape(-1, pixels.shape[-1])
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    terms = alpha * beta * (mu - mu * mu) + (1.0 - alpha) * (1.0 - np.exp(gamma * sigma))
    return float(terms.mean())


def extract_clusters(img, k=CLUSTERS_PER_IMAGE, size=CLUSTER_SIZE):
    """
    Top-k tiles of a non-overlapping size x size grid, by decreasing quality.

    Ties keep row-major order.
    """
    if img.height < size or img.width < size:
        raise ClusterExtractionError("Image %dx%d is smaller than one %dx%d cluster" %
                                     (img.width, img.height, size, size))
    candidates = []
    for row in range(0, img.height - size + 1, size):
        for col in range(0, img.width - size + 1, size):
            pixels = img.pixels[row:row + size, col:col + size]
            candidates.append(Cluster(pixels=pixels, row=row, col=col, quality=quality_score(pixels)))

    candidates.sort(key=lambda c: (-c.quality, c.row, c.col))
    selected = candidates[:k]
    logging.debug("Selected %d of %d candidate clusters from %s", len(selected), len(candidates), img)
    return selected


def sample_patch(cluster, rng, size=PATCH_SIZE):
    """Random size x size patch, offsets uniform over the valid range."""
    limit = cluster.pixels.shape[0] - size
    row, col = rng.integers(0, limit + 1, size=2)
    return Patch(pixels=cluster.pixels[row:row + size, col:col + size], row=int(row), col=int(col))


def tile_patches(cluster, size=PATCH_SIZE):
    """The disjoint size x size tiles covering the cluster, row-major."""
    extent = cluster.pixels.shape[0]
    return [
        Patch(pixels=cluster.pixels[row:row + size, col:col + size], row=row, col=col)
        for row in range(0, extent, size)
        for col in range(0, extent, size)
    ]


def tag_suffix(tag):
    """Filename suffix for a manipulation: _g0.8, _j70, _r1.5; empty when unaltered."""
    kind = ManipulationKind(tag.kind)
    if kind == ManipulationKind.unaltered:
        return ''
    letter = [k for k, v in SUFFIX_KINDS.items() if v == kind][0]
    return "_%s%s" % (letter, "%g" % tag.factor)


def tag_from_name(path):
    """Manipulation tag encoded in a filename, unaltered when there is none."""
    stem = os.path.splitext(os.path.basename(path))[0]
    match = TAG_SUFFIX_REGEX.search(stem)
    if not match:
        return UNALTERED
    return mkManipulationTag(SUFFIX_KINDS[match.group('kind')], match.group('factor'))


def read_image(path, provenance=None):
    """Load an image file as an ImageBuffer."""
    try:
        with Image.open(path) as im:
            array = np.asarray(im.convert('RGB'))
    except (IOError, OSError, ValueError, Image.DecompressionBombError) as err:
        logging.exception("Cannot read image %s", path)
        raise ImageOpsError("Cannot read image %s: %s" % (path, err))
    return ImageBuffer(from_uint8(array), provenance)


def write_image(img, path):
    """Store as 8-bit PNG, creating parent directories."""
    directory = os.path.dirname(path)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    Image.fromarray(to_uint8(img.pixels), mode='RGB').save(path, format='PNG')
    logging.debug("Wrote %s", path)


def scan_dataset(root):
    """
    Collect every image in a <root>/<model>/<device>/<scene>/<image> tree.

    Manipulation tags come from the filename suffixes.

    @returns: list of DatasetEntry, sorted by path; paths are relative to root
    """
    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        relative = os.path.relpath(dirpath, root)
        parts = [] if relative == os.curdir else relative.split(os.sep)
        if len(parts) != 3:
            continue
        model_id, device_id, scene_id = parts
        for name in sorted(filenames):
            if os.path.splitext(name)[1].lower() not in IMAGE_EXTENSIONS:
                continue
            entries.append(DatasetEntry(
                model_id=model_id,
                device_id=device_id,
                scene_id=scene_id,
                path=os.path.join(relative, name),
                manipulation=tag_from_name(name),
            ))
    entries.sort(key=lambda e: e.path)
    logging.info("Found %d images under %s", len(entries), root)
    return entries
