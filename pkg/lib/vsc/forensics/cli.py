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
Commands behind the remnet_* scripts.

Every command parses its options with SimpleOption (so --configfiles, --debug, ... are available),
records the resolved options as <out>/<command>_config.cfg and runs. The recorded file can be passed
back through --configfiles to replay the run; flags given on the command line win over the file.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for any other failure.

@author: Andy Georges (Ghent University)
"""
import logging
import os

from vsc.utils.generaloption import SimpleOption

from vsc.forensics import ConfigurationError, namedrecord
from vsc.forensics.datasetgen import (
    MANIFEST_FILENAME, SPLITS, DatasetExistsError, SplitManifest,
    augment_dataset, balance_manipulation_classes, derive_rng, extract_dataset_clusters,
    generate_dataset, mkDatasetSettings, write_json_atomic,
)
from vsc.forensics.imageops import CLUSTERS_PER_IMAGE, ClusterExtractionError, read_image, scan_dataset
from vsc.forensics.pipeline import Task, evaluate, mkTrainConfig, predict_image, task_classes, train
from vsc.forensics.remnet import ResidualLossKind, RemNet, mkNetworkConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

CONFIG_SECTION = 'MAIN'

# split holding the images of a dataset tree without manifest
SCANNED_SPLIT = 'test'

COMMANDS = ('gen', 'augment', 'extract', 'train', 'eval', 'predict')

MANIPULATE_CHOICES = ['none', 'train', 'test']
TASK_CHOICES = [t.value for t in Task]
RESIDUAL_LOSS_CHOICES = [k.value for k in ResidualLossKind]

COMMON_OPTIONS = {
    'seed': ("Master seed, all randomness of the run derives from it", int, 'store', 0),
    'out': ("Output directory", None, 'store', None),
    'workers': ("Number of worker processes", int, 'store', os.cpu_count() or 1),
}

DATASET_OPTION = {
    'dataset': ("Dataset root directory, holding manifest.json", None, 'store', None),
}

TASK_OPTION = {
    'task': ("Classification task", 'choice', 'store', Task.cmi.value, TASK_CHOICES),
}

CLUSTERS_OPTION = {
    'clusters': ("Clusters extracted per image", int, 'store', CLUSTERS_PER_IMAGE),
}

COMMAND_OPTIONS = {
    'gen': {
        'models': ("Number of synthetic camera models", int, 'store', 4),
        'devices': ("Devices per camera model", int, 'store', 3),
        'scenes': ("Number of scenes", int, 'store', 30),
        'val-scenes': ("Scenes reserved for validation", int, 'store', 3),
        'test-scenes': ("Scenes reserved for testing", int, 'store', 3),
        'images-per-scene': ("Captures per device and scene", int, 'store', 1),
        'image-size': ("Width and height of the generated images", int, 'store', 512),
        'force': ("Overwrite an existing dataset", None, 'store_true', False),
    },
    'augment': dict(DATASET_OPTION, **{
        'manipulate': ("Manipulation policy to apply", 'choice', 'store', 'train', MANIPULATE_CHOICES),
        'splits': ("Splits to augment", 'strlist', 'store', list(SPLITS)),
        'task': TASK_OPTION['task'],
    }),
    'extract': dict(DATASET_OPTION, **{
        'clusters': CLUSTERS_OPTION['clusters'],
        'task': TASK_OPTION['task'],
        'balance': ("Balance the manipulation classes (manipulation task)", None, 'store_true', False),
    }),
    'train': dict(DATASET_OPTION, **{
        'task': TASK_OPTION['task'],
        'clusters': CLUSTERS_OPTION['clusters'],
        'loss-weight': ("Weight of the residual loss", float, 'store', 0.5),
        'residual-loss': ("Residual loss kind", 'choice', 'store', ResidualLossKind.l2.value,
                          RESIDUAL_LOSS_CHOICES),
        'remnant-blocks': ("Number of remnant blocks, 0 disables the preprocessor", int, 'store', 3),
        'width-scale': ("Scale factor for all filter counts", float, 'store', 1.0),
        'batch-size': ("Batch size", int, 'store', 64),
        'lr': ("Initial learning rate", float, 'store', 1e-3),
        'epochs': ("Maximum number of epochs", int, 'store', 70),
        'patience': ("Epochs without validation improvement before the learning rate decays", int, 'store', 3),
        'factor': ("Learning rate decay factor", float, 'store', 0.5),
    }),
    'eval': dict(DATASET_OPTION, **{
        'checkpoint': ("Model checkpoint", None, 'store', None),
        'split': ("Split to evaluate", 'choice', 'store', 'test', list(SPLITS)),
        'manipulate': ("Manipulation policy applied on the fly", 'choice', 'store', 'none', MANIPULATE_CHOICES),
        'clusters': CLUSTERS_OPTION['clusters'],
        'task': ("Expected task of the checkpoint", 'choice', 'store', None, TASK_CHOICES),
    }),
    'predict': {
        'checkpoint': ("Model checkpoint", None, 'store', None),
        'image': ("Image to classify", None, 'store', None),
        'json': ("Also write the prediction as JSON to this file", None, 'store', None),
        'clusters': CLUSTERS_OPTION['clusters'],
    },
}

RunConfig = namedrecord(
    'RunConfig',
    ['command', 'task', 'dataset', 'network', 'train', 'policy', 'out', 'seed', 'workers', 'options'],
)


def command_options(command):
    options = dict(COMMON_OPTIONS)
    options.update(COMMAND_OPTIONS[command])
    return options


def _value(options, name):
    return getattr(options, name.replace('-', '_'))


def mkRunConfig(command, values):
    """
    Make a RunConfig from resolved option values.

    @param values: dict option name (with dashes) -> value
    """
    if command not in COMMANDS:
        raise ConfigurationError("Unknown command %s" % command)
    values = dict(values)
    seed = int(values.get('seed') or 0)

    network = train_config = None
    if command == 'train':
        network = {
            'num_remnant_blocks': values['remnant-blocks'],
            'loss_weight': values['loss-weight'],
            'residual_loss_kind': values['residual-loss'],
            'width_scale': values['width-scale'],
        }
        train_config = dict(mkTrainConfig({
            'task': values['task'],
            'batch_size': values['batch-size'],
            'initial_lr': values['lr'],
            'max_epochs': values['epochs'],
            'plateau_patience': values['patience'],
            'plateau_factor': values['factor'],
            'loss_weight': values['loss-weight'],
            'seed': seed,
            'clusters_per_image': values['clusters'],
        })._asdict())

    out = values.get('out') or values.get('dataset')
    if not out and command != 'predict':
        raise ConfigurationError("%s needs an output directory, use --out" % command)

    return RunConfig(
        command=command,
        task=values.get('task'),
        dataset=values.get('dataset') or (values.get('out') if command == 'gen' else None),
        network=network,
        train=train_config,
        policy=values.get('manipulate'),
        out=out,
        seed=seed,
        workers=max(1, int(values.get('workers') or 1)),
        options=values,
    )


def parse_options(command, args=None):
    """
    Parse the command line (or args) for the command.

    @returns: RunConfig; parse errors raise SystemExit like any SimpleOption script
    """
    options = command_options(command)
    kwargs = {}
    if args is not None:
        kwargs['go_args'] = list(args)
    opts = SimpleOption(options, **kwargs)
    values = dict((name, _value(opts.options, name)) for name in options)
    logging.debug("Resolved options for %s: %s", command, values)
    return mkRunConfig(command, values)


def format_run_config(config):
    """The resolved options as a configfile with a single [MAIN] section."""
    lines = ["[%s]" % CONFIG_SECTION]
    for name in sorted(config.options):
        value = config.options[name]
        # unset flags stay out, a configfile can only switch store_true options on
        if value is None or value is False:
            continue
        if isinstance(value, (list, tuple)):
            value = ','.join(str(v) for v in value)
        lines.append("%s = %s" % (name, value))
    return "\n".join(lines) + "\n"


def write_run_config(config):
    if not os.path.isdir(config.out):
        os.makedirs(config.out)
    path = os.path.join(config.out, "%s_config.cfg" % config.command)
    with open(path, 'w') as fh:
        fh.write(format_run_config(config))
    logging.info("Recorded run configuration in %s", path)
    return path


def _require(config, *names):
    missing = [name for name in names if not config.options.get(name)]
    if missing:
        raise ConfigurationError("%s needs --%s" % (config.command, ", --".join(missing)))


def _load_manifest(config):
    """
    Read the dataset manifest.

    A tree without manifest is scanned as <model>/<device>/<scene>/<image>, with every image in the test split.
    """
    _require(config, 'dataset')
    path = os.path.join(config.dataset, MANIFEST_FILENAME)
    if os.path.exists(path):
        return SplitManifest.from_json(path)

    if not os.path.isdir(config.dataset):
        raise ConfigurationError("Dataset %s does not exist, run remnet_gen.py first" % config.dataset)
    entries = scan_dataset(config.dataset)
    if not entries:
        raise ConfigurationError("No %s and no <model>/<device>/<scene>/<image> files in %s" %
                                 (MANIFEST_FILENAME, config.dataset))
    logging.warning("No %s in %s, using the %d scanned images as split %s",
                    MANIFEST_FILENAME, config.dataset, len(entries), SCANNED_SPLIT)
    return SplitManifest({SCANNED_SPLIT: entries}, metadata={'scanned': True})


def _policy_name(manipulate, task):
    if manipulate in (None, 'none'):
        return None
    if manipulate == 'test' and task == Task.manipulation.value:
        return 'manipulation-test'
    return manipulate


def cmd_gen(config):
    """Generate the synthetic dataset under --out."""
    settings = mkDatasetSettings({
        'num_models': config.options['models'],
        'devices_per_model': config.options['devices'],
        'num_scenes': config.options['scenes'],
        'val_scenes': config.options['val-scenes'],
        'test_scenes': config.options['test-scenes'],
        'images_per_scene': config.options['images-per-scene'],
        'image_size': config.options['image-size'],
        'seed': config.seed,
    })
    if os.path.exists(os.path.join(config.out, MANIFEST_FILENAME)) and not config.options.get('force'):
        raise DatasetExistsError("A dataset already exists at %s, use --force to overwrite it" % config.out)
    write_run_config(config)
    manifest = generate_dataset(config.out, settings, workers=config.workers, force=config.options.get('force'))
    print("Generated %s images in %s" % ("/".join(str(len(manifest.entries(s))) for s in SPLITS), config.out))
    return manifest


def cmd_augment(config):
    """Store manipulated copies of the dataset images and add them to the manifest."""
    manifest = _load_manifest(config)
    policy = _policy_name(config.policy, config.task)
    write_run_config(config)
    if policy is None:
        logging.info("No manipulation policy, nothing to do")
        return manifest
    unknown = [s for s in config.options['splits'] if s not in SPLITS]
    if unknown:
        raise ConfigurationError("Unknown splits %s" % unknown)
    augmented = augment_dataset(config.dataset, manifest, policy, config.options['splits'], config.workers)
    augmented.to_json(os.path.join(config.dataset, MANIFEST_FILENAME))
    print("Augmented dataset %s with policy %s" % (config.dataset, policy))
    return augmented


def cmd_extract(config):
    """List the top quality clusters of every image in the manifest, optionally balancing the classes."""
    manifest = _load_manifest(config)
    if config.options.get('balance') and config.task != Task.manipulation.value:
        raise ConfigurationError("--balance only applies to the manipulation task")
    write_run_config(config)
    extracted = extract_dataset_clusters(config.dataset, manifest, config.options['clusters'], config.workers)
    if config.options.get('balance'):
        extracted = balance_manipulation_classes(extracted, derive_rng(config.seed, 'balance'))
    extracted.to_json(os.path.join(config.dataset, MANIFEST_FILENAME))
    print("Extracted %s clusters" % "/".join(str(len(extracted.clusters[s])) for s in SPLITS))
    return extracted


def cmd_train(config):
    """Train a network and keep the best checkpoint in --out."""
    manifest = _load_manifest(config)
    classes = task_classes(config.task, manifest)
    network = mkNetworkConfig(dict(config.network, class_count=len(classes)))
    train_config = mkTrainConfig(config.train)
    write_run_config(config)
    checkpoint = train(config.dataset, manifest, train_config, network, config.out, workers=config.workers)
    print("Best checkpoint: epoch %s, validation crossentropy %.4f" %
          (checkpoint.metadata['epoch'], checkpoint.metadata['val_xent']))
    return checkpoint


def _load_model(config):
    _require(config, 'checkpoint')
    net, checkpoint = RemNet.from_checkpoint(config.options['checkpoint'])
    task = checkpoint.metadata.get('task')
    classes = checkpoint.metadata.get('classes')
    if task is None or classes is None or len(classes) != net.config.class_count:
        raise ConfigurationError("Checkpoint %s does not describe its task and classes" %
                                 config.options['checkpoint'])
    if config.task and config.task != task:
        raise ConfigurationError("Checkpoint was trained for task %s, not %s" % (task, config.task))
    return net, task, classes


def cmd_eval(config):
    """Evaluate a checkpoint on a split, writing report.json and report.csv to --out."""
    manifest = _load_manifest(config)
    net, task, classes = _load_model(config)
    if task_classes(task, manifest) != classes:
        raise ConfigurationError("Checkpoint classes %s do not match the dataset classes %s" %
                                 (classes, task_classes(task, manifest)))
    policy = _policy_name(config.policy, task)
    write_run_config(config)
    report = evaluate(net, config.dataset, manifest, config.options['split'], task, classes,
                      policy=policy, k=config.options['clusters'], workers=config.workers)
    report.write(config.out)
    print("Accuracy on %s (%s): %.4f over %d images" %
          (config.options['split'], policy or 'unaltered', report.accuracy, len(report.records)))
    return report


def cmd_predict(config):
    """Classify a single image; prints the verdict and optionally writes it as JSON."""
    _require(config, 'image')
    net, task, classes = _load_model(config)
    if config.out:
        write_run_config(config)
    img = read_image(config.options['image'])
    if not img.can_extract_clusters:
        raise ClusterExtractionError("Image %s is %dx%d, at least one 256x256 cluster is needed" %
                                     (config.options['image'], img.width, img.height))
    verdict = predict_image(net, img, config.options['clusters'])

    result = {
        'image': config.options['image'],
        'task': task,
        'verdict': classes[verdict.label],
        'confidence': verdict.confidence,
        'clusters': [
            {'row': c.row, 'col': c.col, 'label': classes[c.label], 'probabilities': c.probs.tolist()}
            for c in verdict.clusters
        ],
    }
    print("verdict: %s" % result['verdict'])
    print("confidence: %.4f" % result['confidence'])
    print("clusters: %s" % " ".join("%s@%d,%d" % (c['label'], c['row'], c['col']) for c in result['clusters']))
    if config.options.get('json'):
        write_json_atomic(config.options['json'], result)
    return result


COMMAND_FUNCTIONS = {
    'gen': cmd_gen,
    'augment': cmd_augment,
    'extract': cmd_extract,
    'train': cmd_train,
    'eval': cmd_eval,
    'predict': cmd_predict,
}


def run_command(command, args=None):
    """
    Parse options, run the command and map the outcome onto the exit code.
    """
    try:
        config = parse_options(command, args)
    except SystemExit as err:
        if err.code:
            return EXIT_USAGE
        return EXIT_OK
    except ConfigurationError as err:
        logging.error("%s", err)
        return EXIT_USAGE

    try:
        COMMAND_FUNCTIONS[command](config)
    except (ConfigurationError, DatasetExistsError) as err:
        logging.error("%s", err)
        return EXIT_USAGE
    except Exception as err:
        logging.exception("critical exception caught: %s", err)
        return EXIT_FAILURE
    return EXIT_OK
