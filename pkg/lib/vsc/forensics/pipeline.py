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
Training loop, cluster and image level voting, and evaluation reports.

Both tasks share the network; only the label source and the number of classes differ:
  - cmi: the camera model that took the image
  - manipulation: unaltered, jpeg, resize or gamma

@author: Andy Georges (Ghent University)
"""
import csv
import io
import logging
import math
import os
import tempfile
from collections import OrderedDict
from enum import Enum
from multiprocessing import Pool

import numpy as np

from vsc.forensics import ConfigurationError, ForensicsError, namedrecord
from vsc.forensics.datasetgen import derive_rng, derive_seed, run_tasks, write_json_atomic
from vsc.forensics.imageops import (
    CLUSTER_SIZE, CLUSTERS_PER_IMAGE, MANIPULATION_CLASSES, UNALTERED,
    Cluster, ManipulationKind, Provenance,
    apply_manipulation, extract_clusters, get_policy, jpeg_codec_version, read_image,
    sample_patch, tile_patches, to_uint8,
)
from vsc.forensics.nnbackend import OptimizerState, adam_step, no_grad, plateau_schedule
from vsc.forensics.remnet import RemNet, residual_loss, xent_loss

CHECKPOINT_FILENAME = 'model.ckpt'
TRAINING_LOG_FILENAME = 'training_log.csv'
DIVERGENCE_FILENAME = 'divergence_batch.npz'
REPORT_JSON_FILENAME = 'report.json'
REPORT_CSV_FILENAME = 'report.csv'

TRAINING_LOG_FIELDS = ['epoch', 'lr', 'train_l2', 'train_xent', 'train_total', 'val_l2', 'val_xent', 'val_total']

# clusters per inference batch, 16 patches each
EVAL_CLUSTER_BATCH = 4


class TrainingDivergedError(ForensicsError):
    pass


class EmptySplitError(ForensicsError):
    pass


class Task(Enum):
    cmi = "cmi"
    manipulation = "manipulation"


TrainConfig = namedrecord(
    'TrainConfig',
    ['task', 'batch_size', 'initial_lr', 'max_epochs', 'plateau_patience', 'plateau_factor', 'loss_weight',
     'seed', 'clusters_per_image'],
    {
        'task': Task.cmi.value,
        'batch_size': 64,
        'initial_lr': 1e-3,
        'max_epochs': 70,
        'plateau_patience': 3,
        'plateau_factor': 0.5,
        'loss_weight': 0.5,
        'seed': 0,
        'clusters_per_image': CLUSTERS_PER_IMAGE,
    },
)

ClusterSample = namedrecord('ClusterSample', ['pixels', 'label', 'path', 'row', 'col'])
ClusterPrediction = namedrecord('ClusterPrediction', ['row', 'col', 'patch_probs', 'probs', 'label'])
ImageVerdict = namedrecord('ImageVerdict', ['label', 'clusters', 'confidence'])
EpochLosses = namedrecord('EpochLosses', ['l2', 'xent', 'total'])


def mkTrainConfig(fields):
    """Make a validated TrainConfig from the given fields."""
    config = TrainConfig(**dict(fields))
    try:
        Task(config.task)
    except ValueError:
        raise ConfigurationError("Unknown task %s, choose cmi or manipulation" % (config.task,))
    if int(config.batch_size) < 1:
        raise ConfigurationError("batch_size must be positive, got %s" % (config.batch_size,))
    if config.initial_lr <= 0:
        raise ConfigurationError("initial_lr must be positive, got %s" % (config.initial_lr,))
    if int(config.max_epochs) < 1:
        raise ConfigurationError("max_epochs must be positive, got %s" % (config.max_epochs,))
    if config.loss_weight < 0:
        raise ConfigurationError("loss_weight must be non-negative, got %s" % (config.loss_weight,))
    return config._replace(
        batch_size=int(config.batch_size),
        max_epochs=int(config.max_epochs),
        plateau_patience=int(config.plateau_patience),
        clusters_per_image=int(config.clusters_per_image),
        initial_lr=float(config.initial_lr),
        plateau_factor=float(config.plateau_factor),
        loss_weight=float(config.loss_weight),
    )


def task_classes(task, manifest):
    """Class names, in label order."""
    if Task(task) == Task.manipulation:
        return list(MANIPULATION_CLASSES)
    return manifest.models()


def label_of(provenance, task, classes):
    """Label index from the provenance: the model for cmi, the manipulation tag otherwise."""
    if Task(task) == Task.manipulation:
        name = provenance.manipulation.kind
    else:
        name = provenance.model_id
    try:
        return classes.index(name)
    except ValueError:
        raise ConfigurationError("Class %s is not one of %s" % (name, classes))


def _load_clusters_task(task):
    (root, entry, refs, k) = task
    img = read_image(os.path.join(root, entry.path))
    if refs is None:
        if not img.can_extract_clusters:
            return []
        refs = [(c.row, c.col) for c in extract_clusters(img, k)]
    return [(to_uint8(img.pixels[row:row + CLUSTER_SIZE, col:col + CLUSTER_SIZE]), row, col) for row, col in refs]


def load_split_clusters(root, manifest, split, task, classes, k=CLUSTERS_PER_IMAGE, workers=1):
    """
    Clusters of one split as uint8 arrays with their labels.

    Uses the clusters listed in the manifest when present, extracts them otherwise.
    """
    entries = manifest.entries(split)
    listed = None
    if manifest.clusters is not None:
        listed = {}
        for ref in manifest.clusters[split]:
            listed.setdefault(ref.path, []).append((ref.row, ref.col))
        entries = [e for e in entries if e.path in listed]

    tasks = [(root, e, listed[e.path] if listed is not None else None, k) for e in entries]
    samples = []
    for entry, crops in zip(entries, run_tasks(_load_clusters_task, tasks, workers)):
        label = label_of(entry, task, classes)
        for pixels, row, col in crops:
            samples.append(ClusterSample(pixels=pixels, label=label, path=entry.path, row=row, col=col))
    logging.info("Loaded %d clusters from %d images of split %s", len(samples), len(entries), split)
    return samples


def _as_batch(arrays, dtype):
    return np.stack(arrays).astype(dtype) / dtype(255.0)


def validation_losses(net, samples):
    """Eval mode losses over the 16 tiles of every cluster; the validation loss drives the schedule."""
    totals = np.zeros(2)
    count = 0
    dtype = net.dtype.type
    for start in range(0, len(samples), EVAL_CLUSTER_BATCH):
        chunk = samples[start:start + EVAL_CLUSTER_BATCH]
        patches = [p.pixels for s in chunk for p in tile_patches(Cluster(pixels=s.pixels))]
        labels = np.repeat([s.label for s in chunk], len(patches) // len(chunk))
        with no_grad():
            residue, probs = net.forward(_as_batch(patches, dtype), training=False)
            res = float(residual_loss(residue, net.config.residual_loss_kind).data)
            xent = float(xent_loss(probs, labels).data)
        totals += np.array([res, xent]) * len(patches)
        count += len(patches)
    res, xent = totals / max(count, 1)
    return EpochLosses(l2=res, xent=xent, total=net.config.loss_weight * res + xent)


def _dump_divergence(out_dir, batch, labels, epoch, step):
    path = os.path.join(out_dir, DIVERGENCE_FILENAME)
    np.savez(path, patches=batch, labels=labels, epoch=epoch, step=step)
    logging.error("Non-finite loss at epoch %d step %d, batch written to %s", epoch, step, path)
    return path


def train(root, manifest, train_config, network_config, out_dir, workers=1):
    """
    Train a RemNet on the train split, keeping the checkpoint with the lowest validation crossentropy.

    Each epoch visits every training cluster once, through one random patch.

    @returns: the best ModelCheckpoint, also stored as <out_dir>/model.ckpt
    """
    classes = task_classes(train_config.task, manifest)
    if network_config.class_count != len(classes):
        raise ConfigurationError("Network has %d classes, task %s needs %d" %
                                 (network_config.class_count, train_config.task, len(classes)))
    if network_config.loss_weight != train_config.loss_weight:
        raise ConfigurationError("Loss weight differs between network (%s) and training (%s) configuration" %
                                 (network_config.loss_weight, train_config.loss_weight))

    train_samples = load_split_clusters(root, manifest, 'train', train_config.task, classes,
                                        train_config.clusters_per_image, workers)
    if not train_samples:
        raise EmptySplitError("No training clusters in %s" % root)
    val_samples = load_split_clusters(root, manifest, 'val', train_config.task, classes,
                                      train_config.clusters_per_image, workers)
    if not val_samples:
        logging.warning("Empty validation split, the training loss drives the schedule and model selection")

    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)

    net = RemNet(network_config, seed=derive_seed(train_config.seed, 'init'), dtype=np.float32)
    state = OptimizerState(train_config.initial_lr,
                           plateau_patience=train_config.plateau_patience,
                           plateau_factor=train_config.plateau_factor)
    rng = derive_rng(train_config.seed, 'train')
    parameters = net.parameters()
    dtype = net.dtype.type

    checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILENAME)
    best = float('inf')
    checkpoint = None
    rows = []

    for epoch in range(1, train_config.max_epochs + 1):
        lr = state.learning_rate
        order = rng.permutation(len(train_samples))
        patches = [sample_patch(Cluster(pixels=train_samples[i].pixels), rng).pixels for i in order]
        labels = np.array([train_samples[i].label for i in order])

        sums = np.zeros(3)
        for step, start in enumerate(range(0, len(order), train_config.batch_size)):
            batch = _as_batch(patches[start:start + train_config.batch_size], dtype)
            batch_labels = labels[start:start + train_config.batch_size]

            net.zero_grad()
            loss, breakdown = net.total_loss(batch, batch_labels, training=True)
            if not all(math.isfinite(v) for v in breakdown):
                _dump_divergence(out_dir, batch, batch_labels, epoch, step)
                raise TrainingDivergedError("Loss became non-finite at epoch %d step %d: %s" %
                                            (epoch, step, breakdown))
            loss.backward()
            adam_step(parameters, state)
            sums += np.array(breakdown) * len(batch_labels)

        train_losses = EpochLosses(*(sums / len(order)))
        val_losses = validation_losses(net, val_samples) if val_samples else train_losses
        if not math.isfinite(val_losses.xent):
            raise TrainingDivergedError("Validation crossentropy became non-finite at epoch %d" % epoch)

        plateau_schedule(state, val_losses.xent)

        rows.append([epoch, lr] + list(train_losses) + list(val_losses))
        logging.info("epoch %d lr %g train l2 %.4f xent %.4f total %.4f val l2 %.4f xent %.4f total %.4f",
                     epoch, lr, train_losses.l2, train_losses.xent, train_losses.total,
                     val_losses.l2, val_losses.xent, val_losses.total)

        if val_losses.xent < best:
            best = val_losses.xent
            checkpoint = net.save(checkpoint_path,
                                  epoch=epoch,
                                  val_xent=val_losses.xent,
                                  seed=train_config.seed,
                                  task=train_config.task,
                                  classes=classes,
                                  train=dict(train_config._asdict()),
                                  jpeg_codec=jpeg_codec_version())

        write_training_log(os.path.join(out_dir, TRAINING_LOG_FILENAME), rows)

    logging.info("Best checkpoint at epoch %s with validation crossentropy %.4f",
                 checkpoint.metadata['epoch'], best)
    return checkpoint


def write_training_log(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAINING_LOG_FIELDS)
    for row in rows:
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    write_text_atomic(path, buf.getvalue())


def write_text_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    (fd, tmp) = tempfile.mkstemp(dir=directory, suffix='.tmp')
    with os.fdopen(fd, 'w') as fh:
        fh.write(text)
    os.rename(tmp, path)


def predict_cluster(net, cluster):
    """Average the class probabilities of the 16 tiles of the cluster; ties go to the lowest class index."""
    pixels = cluster.pixels
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(np.float64) / 255.0
    tiles = np.stack([p.pixels for p in tile_patches(Cluster(pixels=pixels))])
    patch_probs = net.predict_proba(tiles)
    probs = patch_probs.astype(np.float64).mean(axis=0)
    return ClusterPrediction(
        row=cluster.row,
        col=cluster.col,
        patch_probs=patch_probs,
        probs=probs,
        label=int(np.argmax(probs)),
    )


def majority_vote(labels, probs, class_count):
    """
    Modal label.

    Ties go to the class with the highest probability summed over all clusters, then to the lowest index.
    """
    if not len(labels):
        raise ConfigurationError("Cannot vote without cluster labels")
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    summed = np.asarray(probs, dtype=np.float64).sum(axis=0)
    best = summed[tied].max()
    return int(tied[summed[tied] == best][0])


def predict_image(net, img, k=CLUSTERS_PER_IMAGE):
    """
    Label every extracted cluster and vote.

    Raises ClusterExtractionError for images smaller than one cluster.
    """
    clusters = [predict_cluster(net, c) for c in extract_clusters(img, k)]
    label = majority_vote([c.label for c in clusters], [c.probs for c in clusters], net.config.class_count)
    confidence = float(np.mean([c.probs[label] for c in clusters]))
    return ImageVerdict(label=label, clusters=clusters, confidence=confidence)


class PredictionReport(object):
    """
    Per-image verdicts with their cluster evidence, plus the summary metrics.
    """

    def __init__(self, classes, records, task=None, split=None, policy=None, skipped=None, metadata=None):
        self.classes = list(classes)
        self.records = list(records)
        self.task = task
        self.split = split
        self.policy = policy
        self.skipped = list(skipped or [])
        self.metadata = dict(metadata or {})

        size = len(self.classes)
        self.confusion = np.zeros((size, size), dtype=np.int64)
        for record in self.records:
            self.confusion[record['true_label'], record['predicted']] += 1

    @property
    def accuracy(self):
        total = self.confusion.sum()
        return float(np.trace(self.confusion)) / total if total else 0.0

    def per_class_recall(self):
        recall = OrderedDict()
        for index, name in enumerate(self.classes):
            row = self.confusion[index].sum()
            recall[name] = float(self.confusion[index, index]) / row if row else None
        return recall

    def cluster_accuracy(self):
        total = sum(len(r['cluster_labels']) for r in self.records)
        correct = sum(sum(1 for label in r['cluster_labels'] if label == r['true_label']) for r in self.records)
        return float(correct) / total if total else 0.0

    def factor_table(self):
        """Accuracy per (manipulation kind, factor), unaltered first, then in order of appearance."""
        table = OrderedDict()
        for record in self.records:
            key = (record['manipulation']['kind'], record['manipulation']['factor'])
            correct, total = table.get(key, (0, 0))
            table[key] = (correct + int(record['predicted'] == record['true_label']), total + 1)
        keys = sorted(table, key=lambda key: key[0] != ManipulationKind.unaltered.value)
        return [
            OrderedDict([('kind', key[0]), ('factor', key[1]), ('correct', table[key][0]),
                         ('total', table[key][1]), ('accuracy', float(table[key][0]) / table[key][1])])
            for key in keys
        ]

    def recount(self, record):
        """Recompute an image verdict from its stored cluster labels and probabilities."""
        return majority_vote(record['cluster_labels'], record['cluster_probs'], len(self.classes))

    def to_dict(self):
        return {
            'task': self.task,
            'split': self.split,
            'policy': self.policy,
            'classes': self.classes,
            'accuracy': self.accuracy,
            'cluster_accuracy': self.cluster_accuracy(),
            'per_class_recall': self.per_class_recall(),
            'confusion': self.confusion.tolist(),
            'factors': self.factor_table(),
            'images': self.records,
            'skipped': self.skipped,
            'metadata': self.metadata,
        }

    def to_csv(self):
        """One column per (kind, factor), rows with accuracy and image count."""
        table = self.factor_table()
        header = ['metric'] + [row['kind'] if row['factor'] is None else "%s %g" % (row['kind'], row['factor'])
                               for row in table]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerow(['accuracy'] + ["%.4f" % row['accuracy'] for row in table])
        writer.writerow(['images'] + [row['total'] for row in table])
        return buf.getvalue()

    def write(self, out_dir):
        if not os.path.isdir(out_dir):
            os.makedirs(out_dir)
        write_json_atomic(os.path.join(out_dir, REPORT_JSON_FILENAME), self.to_dict())
        write_text_atomic(os.path.join(out_dir, REPORT_CSV_FILENAME), self.to_csv())
        logging.info("Wrote report with accuracy %.4f over %d images to %s",
                     self.accuracy, len(self.records), out_dir)


def _record(path, img, true_label, verdict):
    return OrderedDict([
        ('path', path),
        ('manipulation', OrderedDict([('kind', img.manipulation.kind), ('factor', img.manipulation.factor)])),
        ('true_label', true_label),
        ('predicted', verdict.label),
        ('confidence', verdict.confidence),
        ('cluster_offsets', [[c.row, c.col] for c in verdict.clusters]),
        ('cluster_labels', [c.label for c in verdict.clusters]),
        ('cluster_probs', [c.probs.tolist() for c in verdict.clusters]),
        ('patch_probs', [c.patch_probs.astype(np.float64).tolist() for c in verdict.clusters]),
    ])


_worker_state = {}


def _init_eval_worker(net, root, task, classes, k):
    _worker_state.update(net=net, root=root, task=task, classes=classes, k=k)


def _evaluate_entry(item):
    """Predict one dataset image and its policy variants."""
    (entry, tags) = item
    net, root = _worker_state['net'], _worker_state['root']
    provenance = Provenance(entry.model_id, entry.device_id, entry.scene_id, entry.manipulation)
    original = read_image(os.path.join(root, entry.path), provenance)

    records, skipped = [], []
    for img in [original] + [apply_manipulation(original, tag) for tag in tags]:
        name = entry.path if img is original else "%s[%s %s]" % (entry.path, img.manipulation.kind,
                                                                img.manipulation.factor)
        if not img.can_extract_clusters:
            skipped.append(name)
            continue
        true_label = label_of(img.provenance, _worker_state['task'], _worker_state['classes'])
        verdict = predict_image(net, img, _worker_state['k'])
        records.append(_record(name, img, true_label, verdict))
    return records, skipped


def evaluate(net, root, manifest, split, task, classes, policy=None, k=CLUSTERS_PER_IMAGE, workers=1):
    """
    Predict every image of the split and summarise.

    Without a policy, cmi evaluates the unaltered images only and manipulation evaluates them all.
    With a policy, each unaltered image is evaluated as is and after each of the policy's manipulations.
    """
    tags = get_policy(policy)
    entries = manifest.entries(split)
    if tags or Task(task) == Task.cmi:
        entries = [e for e in entries if e.manipulation == UNALTERED]
    if not entries:
        raise EmptySplitError("Split %s has no images to evaluate" % split)

    items = [(e, tags) for e in entries]
    if workers is not None and workers > 1 and len(items) > 1:
        with Pool(workers, initializer=_init_eval_worker, initargs=(net, root, task, classes, k)) as pool:
            results = pool.map(_evaluate_entry, items)
    else:
        _init_eval_worker(net, root, task, classes, k)
        results = [_evaluate_entry(item) for item in items]

    records = [r for rs, _ in results for r in rs]
    skipped = [s for _, ss in results for s in ss]
    if not records:
        raise EmptySplitError("No image of split %s is large enough to extract clusters" % split)
    if skipped:
        logging.warning("Skipped %d images smaller than one cluster", len(skipped))

    policy_name = policy if isinstance(policy, str) or policy is None else 'custom'
    return PredictionReport(classes, records, task=task, split=split, policy=policy_name, skipped=skipped,
                            metadata={'config_hash': net.config_hash(), 'jpeg_codec': jpeg_codec_version()})
