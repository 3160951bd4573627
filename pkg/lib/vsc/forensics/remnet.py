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
The L2-constrained remnant network.

A chain of remnant blocks turns a 64x64 RGB patch into a residue with the same shape (each block
subtracts a learned content estimate from its input). The residue feeds a strided convolutional
classifier and is penalised by an auxiliary residual loss:

    total = loss_weight * residual + crossentropy

@author: Andy Georges (Ghent University)
"""
import hashlib
import json
import logging
from collections import OrderedDict
from enum import Enum

import numpy as np

from vsc.forensics import ConfigurationError, ForensicsError, namedrecord
from vsc.forensics.nnbackend import (
    BN_EPSILON, BN_MOMENTUM, CheckpointError, LayerParams, Tensor,
    avg_pool, batch_norm, concat, conv2d, load_checkpoint, nll, no_grad, prelu, reshape,
    save_checkpoint, softmax, sum_abs, sum_squares,
)

PATCH_SIZE = 64
CHANNELS = 3

REMNANT_WIDTHS = (64, 128, 256)
REMNANT_KERNEL = 3
REMNANT_DEPTH = 3

# (kernel, stride, filters)
CLASSIFIER_LAYERS = (
    (7, 2, 64),
    (5, 2, 128),
    (3, 2, 256),
    (2, 2, 512),
)
CLASSIFIER_POOL = 4

MIN_SCALED_WIDTH = 4
PROBABILITY_FLOOR = 1e-12


class InvalidLabelError(ForensicsError):
    pass


class ResidualLossKind(Enum):
    l2 = "l2"
    l1 = "l1"
    none = "none"


RemnantBlockConfig = namedrecord(
    'RemnantBlockConfig',
    ['widen_filters', 'kernel', 'depth'],
    {'kernel': REMNANT_KERNEL, 'depth': REMNANT_DEPTH},
)

NetworkConfig = namedrecord(
    'NetworkConfig',
    ['class_count', 'num_remnant_blocks', 'loss_weight', 'residual_loss_kind', 'width_scale'],
    {
        'num_remnant_blocks': 3,
        'loss_weight': 0.5,
        'residual_loss_kind': ResidualLossKind.l2.value,
        'width_scale': 1.0,
    },
)

LossBreakdown = namedrecord('LossBreakdown', ['residual_loss', 'xent_loss', 'total'])


def mkNetworkConfig(fields):
    """Make a validated NetworkConfig from the given fields."""
    fields = dict(fields)
    if 'residual_loss_kind' in fields:
        kind = fields['residual_loss_kind']
        fields['residual_loss_kind'] = kind.value if isinstance(kind, ResidualLossKind) else str(kind).lower()

    config = NetworkConfig(**fields)

    if config.class_count is None or int(config.class_count) < 2:
        raise ConfigurationError("class_count must be at least 2, got %s" % (config.class_count,))
    if config.loss_weight < 0:
        raise ConfigurationError("loss_weight must be non-negative, got %s" % (config.loss_weight,))
    if config.num_remnant_blocks < 0 or config.num_remnant_blocks > len(REMNANT_WIDTHS):
        raise ConfigurationError("num_remnant_blocks must lie in [0, %d], got %s" %
                                 (len(REMNANT_WIDTHS), config.num_remnant_blocks))
    if not 0 < config.width_scale <= 1:
        raise ConfigurationError("width_scale must lie in (0, 1], got %s" % (config.width_scale,))
    try:
        ResidualLossKind(config.residual_loss_kind)
    except ValueError:
        raise ConfigurationError("Unknown residual loss kind %s" % (config.residual_loss_kind,))

    return config._replace(
        class_count=int(config.class_count),
        num_remnant_blocks=int(config.num_remnant_blocks),
        loss_weight=float(config.loss_weight),
        width_scale=float(config.width_scale),
    )


def scaled_width(filters, width_scale):
    return max(MIN_SCALED_WIDTH, int(round(filters * width_scale)))


def remnant_block_forward(x, block_config, params, training=True):
    """
    Return x - H(x), H being the unactivated conv+BN stack of the block.

    The first layer sees the block input; the later layers see the previous output concatenated
    with the block input along the channel axis.
    """
    if x.data.ndim != 4 or x.shape[-1] != CHANNELS:
        raise ConfigurationError("remnant block expects (B, H, W, %d) input, got %s" % (CHANNELS, x.shape))
    if len(params) != block_config.depth:
        raise ConfigurationError("remnant block has %d layers, configured depth is %d" %
                                 (len(params), block_config.depth))

    h = x
    for index, layer in enumerate(params):
        inputs = h if index == 0 else concat([h, x], axis=-1)
        h = batch_norm(conv2d(inputs, layer, kernel=block_config.kernel, stride=1, padding='same'), layer, training)
    return x - h


def preprocessor_forward(x, blocks, training=True):
    """
    Chain the remnant blocks.

    @param blocks: sequence of (RemnantBlockConfig, [LayerParams, ...]); empty gives the identity
    """
    y = x
    for block_config, params in blocks:
        y = remnant_block_forward(y, block_config, params, training)
    return y


def classifier_forward(y_p, layers, head, training=True, trace=None):
    """
    Map a residue batch to class probabilities.

    @param layers: the four strided conv+BN+PReLU LayerParams
    @param head: the 1x1 output convolution
    @param trace: optional list collecting the intermediate (H, W, C) shapes
    """
    h = y_p
    for layer, (kernel, stride, _) in zip(layers, CLASSIFIER_LAYERS):
        h = conv2d(h, layer, kernel=kernel, stride=stride, padding='same')
        h = prelu(batch_norm(h, layer, training), layer.prelu_slope)
        if trace is not None:
            trace.append(h.shape[1:])
    h = avg_pool(h, CLASSIFIER_POOL)
    if trace is not None:
        trace.append(h.shape[1:])
    h = conv2d(h, head, kernel=1, stride=1, padding='valid')
    if trace is not None:
        trace.append(h.shape[1:])
    return softmax(reshape(h, (h.shape[0], h.shape[-1])))


def residual_loss(residue, kind):
    """Per-sample sum of squared (l2) or absolute (l1) residue values, averaged over the batch."""
    kind = ResidualLossKind(kind.value if isinstance(kind, ResidualLossKind) else kind)
    if kind == ResidualLossKind.l2:
        return sum_squares(residue)
    elif kind == ResidualLossKind.l1:
        return sum_abs(residue)
    return Tensor(np.asarray(0.0))


def _label_indices(labels, batch, class_count):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != class_count:
            raise InvalidLabelError("one-hot labels have %d columns, expected %d" % (labels.shape[1], class_count))
        labels = labels.argmax(axis=1)
    if labels.shape != (batch,):
        raise InvalidLabelError("expected %d labels, got shape %s" % (batch, labels.shape))
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise InvalidLabelError("labels must be integral, got %s" % (labels,))
        labels = labels.astype(np.int64)
    bad = labels[(labels < 0) | (labels >= class_count)]
    if bad.size:
        raise InvalidLabelError("label %d outside [0, %d)" % (bad[0], class_count))
    return labels


def xent_loss(probs, labels):
    """Mean negative log probability of the true class (index or one-hot labels)."""
    labels = _label_indices(labels, probs.shape[0], probs.shape[1])
    return nll(probs, labels, floor=PROBABILITY_FLOOR)


def total_loss(residue, probs, labels, loss_weight, kind):
    """
    Combine both terms.

    @returns: (scalar Tensor to call backward on, LossBreakdown of plain floats)
    """
    res = residual_loss(residue, kind)
    xent = xent_loss(probs, labels)
    total = res * loss_weight + xent
    breakdown = LossBreakdown(
        residual_loss=float(res.data),
        xent_loss=float(xent.data),
        total=float(total.data),
    )
    return total, breakdown


class RemNet(object):
    """
    Remnant preprocessor plus classifier, with named parameters.

    Parameter names look like remnant1.conv2.weights or classifier.head.bias.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers = OrderedDict()
        self.blocks = []

        rng = np.random.default_rng(seed)

        for index in range(config.num_remnant_blocks):
            width = scaled_width(REMNANT_WIDTHS[index], config.width_scale)
            block_config = RemnantBlockConfig(widen_filters=width)
            channels = [(CHANNELS, width), (width + CHANNELS, width), (width + CHANNELS, CHANNELS)]
            params = []
            for depth, (cin, cout) in enumerate(channels):
                layer = LayerParams(REMNANT_KERNEL, cin, cout, rng, dtype=self.dtype)
                self.layers["remnant%d.conv%d" % (index + 1, depth + 1)] = layer
                params.append(layer)
            self.blocks.append((block_config, params))

        cin = CHANNELS
        self.classifier_layers = []
        for index, (kernel, _, filters) in enumerate(CLASSIFIER_LAYERS):
            cout = scaled_width(filters, config.width_scale)
            layer = LayerParams(kernel, cin, cout, rng, dtype=self.dtype, prelu=True)
            self.layers["classifier.conv%d" % (index + 1)] = layer
            self.classifier_layers.append(layer)
            cin = cout

        self.head = LayerParams(1, cin, config.class_count, rng, dtype=self.dtype, batch_norm=False)
        self.layers["classifier.head"] = self.head

        logging.debug("Built RemNet with %d remnant blocks, %d classes, %d parameters",
                      config.num_remnant_blocks, config.class_count,
                      sum(p.data.size for p in self.parameters().values()))

    def parameters(self):
        """OrderedDict name -> learnable Tensor."""
        params = OrderedDict()
        for prefix, layer in self.layers.items():
            params.update(layer.named_parameters(prefix))
        return params

    def preprocessor_parameters(self):
        return OrderedDict((n, p) for n, p in self.parameters().items() if n.startswith('remnant'))

    def classifier_parameters(self):
        return OrderedDict((n, p) for n, p in self.parameters().items() if n.startswith('classifier'))

    def buffers(self):
        """OrderedDict name -> BN running statistic."""
        buffers = OrderedDict()
        for prefix, layer in self.layers.items():
            buffers.update(layer.named_buffers(prefix))
        return buffers

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def _as_input(self, x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def forward(self, x, training=True, trace=None):
        """@returns: (residue, probabilities)"""
        x = self._as_input(x)
        residue = preprocessor_forward(x, self.blocks, training)
        probs = classifier_forward(residue, self.classifier_layers, self.head, training, trace)
        return residue, probs

    def total_loss(self, x, labels, training=True):
        residue, probs = self.forward(x, training)
        return total_loss(residue, probs, labels, self.config.loss_weight, self.config.residual_loss_kind)

    def predict_proba(self, x):
        """Eval mode probabilities as an ndarray; builds no graph and leaves the running statistics alone."""
        with no_grad():
            _, probs = self.forward(x, training=False)
        return probs.data

    def state(self):
        tensors = OrderedDict((n, p.data) for n, p in self.parameters().items())
        tensors.update(self.buffers())
        return tensors

    def load_state(self, tensors):
        """Copy the named tensors into this network, refusing any architectural mismatch."""
        expected = self.state()
        for name in tensors:
            if name not in expected:
                raise CheckpointError("Unexpected tensor %s for this architecture" % name)
        for name, current in expected.items():
            if name not in tensors:
                raise CheckpointError("Missing tensor %s" % name)
            value = np.asarray(tensors[name])
            if value.shape != current.shape:
                raise CheckpointError("Tensor %s has shape %s, architecture expects %s" %
                                      (name, value.shape, current.shape))
            current[...] = value.astype(current.dtype)

    def config_hash(self):
        return config_hash(self.config)

    def save(self, path, **metadata):
        """Write a checkpoint; the metadata always carries the network config and its hash."""
        meta = dict(metadata)
        meta.update({
            'network': dict(self.config._asdict()),
            'config_hash': self.config_hash(),
            'dtype': self.dtype.name,
            'bn_epsilon': BN_EPSILON,
            'bn_momentum': BN_MOMENTUM,
        })
        return save_checkpoint(path, self.state(), meta)

    @classmethod
    def from_checkpoint(cls, path):
        checkpoint = load_checkpoint(path)
        try:
            config = mkNetworkConfig(checkpoint.metadata['network'])
        except KeyError:
            raise CheckpointError("Checkpoint %s carries no network configuration" % path)
        if checkpoint.metadata.get('config_hash') not in (None, config_hash(config)):
            raise CheckpointError("Checkpoint %s config hash does not match its network configuration" % path)
        net = cls(config, dtype=checkpoint.metadata.get('dtype', 'float32'))
        net.load_state(checkpoint.tensors)
        return net, checkpoint


def config_hash(config):
    payload = json.dumps(dict(config._asdict()), sort_keys=True)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
