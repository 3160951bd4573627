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
Minimal differentiable numeric core on top of numpy.

Only the operations the remnant network needs are implemented: same/valid padded 2D convolution,
batch normalisation, PReLU, average pooling, softmax, channel concatenation and the loss reductions.
All tensors are channels-last, i.e. (B, H, W, C).

Gradients are computed in reverse mode: every operation that has an input requiring a gradient
records its parents and a closure mapping the output gradient onto the parent gradients.

@author: Andy Georges (Ghent University)
"""
import io
import json
import logging
import os
import tempfile
import zipfile

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from vsc.forensics import ConfigurationError, ForensicsError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
PRELU_INIT = 0.25

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

PLATEAU_PATIENCE = 3
PLATEAU_FACTOR = 0.5
PLATEAU_TOLERANCE = 1e-6

CHECKPOINT_METADATA = 'metadata.json'
# fixed member timestamp, so identical tensors give identical checkpoint bytes
CHECKPOINT_DATE_TIME = (1980, 1, 1, 0, 0, 0)

_grad_state = {'enabled': True}


class GradientError(ForensicsError):
    pass


class CheckpointError(ForensicsError):
    pass


@contextmanager
def no_grad():
    """Do not record operations for backpropagation inside this block."""
    previous = _grad_state['enabled']
    _grad_state['enabled'] = False
    try:
        yield
    finally:
        _grad_state['enabled'] = previous


class Tensor(object):
    """
    N-dimensional array with an optional gradient buffer.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return "Tensor(name=%s, shape=%s, dtype=%s)" % (self.name, self.shape, self.dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Populate .grad of every leaf tensor requiring a gradient that this tensor depends on."""
        if not self.requires_grad:
            raise GradientError("backward called on a tensor that does not require a gradient")
        if grad is None:
            if self.data.size != 1:
                raise GradientError("backward without explicit gradient needs a scalar, got shape %s" % (self.shape,))
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        grads = {id(self): grad}

        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pgrad in zip(node._parents, node._backward(g)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pgrad
                else:
                    grads[id(parent)] = pgrad

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_same_shape(self, other, 'add')
        return _result(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_same_shape(self, other, 'sub')
        return _result(self.data - other.data, (self, other), lambda g: (g, -g))

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, 'mul')
            return _result(self.data * other.data, (self, other), lambda g: (g * other.data, g * self.data))
        factor = float(other)
        return _result(self.data * factor, (self,), lambda g: (g * factor,))

    __rmul__ = __mul__

    def sum(self):
        shape = self.shape
        return _result(np.sum(self.data), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ConfigurationError("%s: shape mismatch %s vs %s" % (op, a.shape, b.shape))


def _result(data, parents, backward):
    """Wrap an op result, recording the graph only when needed."""
    if _grad_state['enabled'] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class LayerParams(object):
    """
    Learnable parameters and running statistics of one conv [+ BN [+ PReLU]] layer.

    weights have shape (K, K, Cin, Cout).
    """

    def __init__(self, kernel, in_channels, out_channels, rng, dtype=np.float64,
                 use_bias=True, batch_norm=True, prelu=False):
        fan_in = kernel * kernel * in_channels
        std = np.sqrt(2.0 / fan_in)
        self.weights = Tensor(rng.normal(0.0, std, size=(kernel, kernel, in_channels, out_channels)).astype(dtype),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if use_bias else None

        self.bn_gamma = self.bn_beta = self.bn_running_mean = self.bn_running_var = None
        if batch_norm:
            self.bn_gamma = Tensor(np.ones(out_channels, dtype=dtype), requires_grad=True)
            self.bn_beta = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
            self.bn_running_mean = np.zeros(out_channels, dtype=dtype)
            self.bn_running_var = np.ones(out_channels, dtype=dtype)

        self.prelu_slope = None
        if prelu:
            self.prelu_slope = Tensor(np.full(out_channels, PRELU_INIT, dtype=dtype), requires_grad=True)

    @property
    def kernel(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[2]

    @property
    def out_channels(self):
        return self.weights.shape[3]

    def named_parameters(self, prefix):
        """Yield (name, Tensor) for every learnable tensor."""
        for field in ('weights', 'bias', 'bn_gamma', 'bn_beta', 'prelu_slope'):
            value = getattr(self, field)
            if value is not None:
                yield "%s.%s" % (prefix, field), value

    def named_buffers(self, prefix):
        """Yield (name, ndarray) for the running statistics."""
        for field in ('bn_running_mean', 'bn_running_var'):
            value = getattr(self, field)
            if value is not None:
                yield "%s.%s" % (prefix, field), value


def _same_padding(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, params, kernel=None, stride=1, padding='same'):
    """
    2D convolution of a (B, H, W, Cin) tensor.

    Computed as a sum of K*K shifted matrix products, which keeps memory linear in the input size.
    """
    if x.data.ndim != 4:
        raise ConfigurationError("conv2d expects (B, H, W, C) input, got shape %s" % (x.shape,))
    w = params.weights
    k = w.shape[0]
    if kernel is not None and kernel != k:
        raise ConfigurationError("conv2d kernel %s does not match weights %s" % (kernel, w.shape))
    batch, height, width, channels = x.shape
    if channels != w.shape[2]:
        raise ConfigurationError("conv2d input has %d channels, weights expect %d" % (channels, w.shape[2]))

    if padding == 'same':
        out_h, pad_top, pad_bottom = _same_padding(height, k, stride)
        out_w, pad_left, pad_right = _same_padding(width, k, stride)
    elif padding == 'valid':
        if height < k or width < k:
            raise ConfigurationError("conv2d valid padding: input %s smaller than kernel %d" % (x.shape, k))
        out_h, out_w = (height - k) // stride + 1, (width - k) // stride + 1
        pad_top = pad_bottom = pad_left = pad_right = 0
    else:
        raise ConfigurationError("Unknown padding mode %s" % padding)

    xp = np.pad(x.data, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right), (0, 0)), mode='constant')
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1

    out = np.zeros((batch, out_h, out_w, w.shape[3]), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            window = xp[:, i:i + row_span:stride, j:j + col_span:stride, :]
            out += np.tensordot(window, w.data[i, j], axes=([3], [0]))

    parents = (x, w)
    if params.bias is not None:
        out += params.bias.data
        parents = (x, w, params.bias)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                window = xp[:, i:i + row_span:stride, j:j + col_span:stride, :]
                gw[i, j] = np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
                if gxp is not None:
                    gxp[:, i:i + row_span:stride, j:j + col_span:stride, :] += np.tensordot(g, w.data[i, j],
                                                                                           axes=([3], [1]))
        gx = gxp[:, pad_top:pad_top + height, pad_left:pad_left + width, :] if gxp is not None else None
        if params.bias is not None:
            return gx, gw, g.sum(axis=(0, 1, 2))
        return gx, gw

    return _result(out, parents, backward)


def batch_norm(x, params, training, momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """
    Per-channel batch normalisation.

    In training mode the batch statistics are used and the running statistics are updated in place.
    """
    channels = x.shape[-1]
    if params.bn_gamma is None or params.bn_gamma.shape[0] != channels:
        raise ConfigurationError("batch_norm: %d channels do not match the layer parameters" % channels)
    gamma, beta = params.bn_gamma, params.bn_beta
    axes = tuple(range(x.data.ndim - 1))

    if training:
        count = x.data.size // channels
        if count == 0:
            raise ConfigurationError("batch_norm: empty batch in training mode")
        mean = x.data.mean(axis=axes)
        var = ((x.data - mean) ** 2).mean(axis=axes)
        params.bn_running_mean *= momentum
        params.bn_running_mean += (1.0 - momentum) * mean
        params.bn_running_var *= momentum
        params.bn_running_var += (1.0 - momentum) * var
    else:
        mean, var = params.bn_running_mean, params.bn_running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        if training:
            count = x.data.size // channels
            gx = (inv_std / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), backward)


def prelu(x, slope):
    """out = x for x > 0, slope * x otherwise; slope has one entry per channel."""
    if slope.data.ndim != 1 or slope.shape[0] != x.shape[-1]:
        raise ConfigurationError("prelu: slope shape %s does not match %d channels" % (slope.shape, x.shape[-1]))
    positive = x.data > 0
    out = np.where(positive, x.data, slope.data * x.data)
    axes = tuple(range(x.data.ndim - 1))

    def backward(g):
        gx = np.where(positive, g, g * slope.data)
        gslope = np.where(positive, 0.0, g * x.data).sum(axis=axes)
        return gx, gslope

    return _result(out, (x, slope), backward)


def avg_pool(x, kernel):
    batch, height, width, channels = x.shape
    if height % kernel or width % kernel:
        raise ConfigurationError("avg_pool: %dx%d input not divisible by kernel %d" % (height, width, kernel))
    out = x.data.reshape(batch, height // kernel, kernel, width // kernel, kernel, channels).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, kernel, axis=1), kernel, axis=2) / float(kernel * kernel)
        return (gx,)

    return _result(out, (x,), backward)


def softmax(x):
    """Softmax over the last axis, with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward)


def concat(tensors, axis=-1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tuple(tensors), backward)


def reshape(x, shape):
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def sum_squares(x):
    """Mean over the batch of the per-sample sum of squared elements."""
    batch = x.shape[0]
    value = np.sum(np.square(x.data, dtype=np.float64)) / batch
    return _result(np.asarray(value), (x,), lambda g: (g * 2.0 * x.data / batch,))


def sum_abs(x):
    """Mean over the batch of the per-sample sum of absolute values."""
    batch = x.shape[0]
    value = np.sum(np.abs(x.data), dtype=np.float64) / batch
    return _result(np.asarray(value), (x,), lambda g: (g * np.sign(x.data) / batch,))


def nll(probs, labels, floor=1e-12):
    """Mean negative log probability of the true classes; probabilities are floored before the log."""
    batch = probs.shape[0]
    rows = np.arange(batch)
    picked = probs.data[rows, labels]
    clipped = np.maximum(picked, floor)
    value = -np.sum(np.log(clipped.astype(np.float64))) / batch

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(picked > floor, -1.0 / (batch * clipped), 0.0)
        return (g * gp,)

    return _result(np.asarray(value), (probs,), backward)


def gradient_check(fn, tensors, eps=1e-6, max_entries=None, rng=None):
    """
    Compare analytic gradients with central finite differences.

    @param fn: callable returning a scalar Tensor
    @param tensors: leaf tensors (requires_grad) to check
    @param max_entries: check at most this many randomly chosen entries per tensor

    @returns: max over all checked entries of |analytic - numeric|, divided by the largest analytic or numeric
              gradient magnitude seen over all checked entries of all tensors. This is not a per-entry relative
              error: an error on a small entry is measured against the largest gradient, so the check is more
              forgiving on small entries than a per-entry metric.
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [t.grad.copy() for t in tensors]

    max_diff = 0.0
    scale = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                plus = float(fn().data)
                flat[idx] = original - eps
                minus = float(fn().data)
            flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            exact = grad.reshape(-1)[idx]
            max_diff = max(max_diff, abs(exact - numeric))
            scale = max(scale, abs(exact), abs(numeric))

    return max_diff / max(scale, 1e-12)


class OptimizerState(object):
    """
    Adam moments plus the plateau learning rate schedule.
    """

    def __init__(self, learning_rate, beta1=ADAM_BETA1, beta2=ADAM_BETA2, epsilon=ADAM_EPSILON,
                 plateau_patience=PLATEAU_PATIENCE, plateau_factor=PLATEAU_FACTOR):
        if learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive, got %s" % learning_rate)
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1), got %s, %s" % (beta1, beta2))
        if not 0 < plateau_factor < 1:
            raise ConfigurationError("plateau factor must lie in (0, 1), got %s" % plateau_factor)
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.best_metric = float('inf')
        self.epochs_since_improvement = 0


def adam_step(params, state):
    """
    One bias-corrected Adam update of the named parameters.

    @param params: mapping name -> Tensor, each with a populated grad
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientError("No gradient for parameters %s" % ", ".join(missing))

    state.step_count += 1
    correction1 = 1.0 - state.beta1 ** state.step_count
    correction2 = 1.0 - state.beta2 ** state.step_count

    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.data -= update.astype(p.dtype)

    return params, state


def plateau_schedule(state, val_metric):
    """
    Halve (by plateau_factor) the learning rate once val_metric failed to improve for plateau_patience epochs.
    """
    if val_metric < state.best_metric - PLATEAU_TOLERANCE:
        state.best_metric = val_metric
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= state.plateau_patience:
            state.learning_rate *= state.plateau_factor
            state.epochs_since_improvement = 0
            logging.info("Validation metric did not improve for %d epochs, learning rate now %g",
                         state.plateau_patience, state.learning_rate)
    return state


class ModelCheckpoint(object):
    """Named tensors plus a metadata record."""

    def __init__(self, tensors, metadata):
        self.tensors = OrderedDict(tensors)
        self.metadata = dict(metadata)


def save_checkpoint(path, tensors, metadata):
    """
    Write the named tensors and metadata as a zip of .npy members plus metadata.json.

    Layout of the checkpoint file, an uncompressed (stored) zip archive:
      - one member <name>.npy per tensor, in insertion order, written with numpy's .npy format
        (no pickles); RemNet names its tensors <layer>.<field>, e.g. remnant1.conv2.weights or
        classifier.conv4.bn_running_var
      - a last member metadata.json with the metadata, as JSON with sorted keys
    Every member carries the timestamp 1980-01-01 00:00:00, so identical tensors and metadata give
    identical checkpoint bytes.

    The file is written to a temporary name first and renamed into place.
    """
    names = list(tensors.keys())
    if len(set(names)) != len(names) or CHECKPOINT_METADATA in names:
        raise CheckpointError("Checkpoint tensor names must be unique")

    directory = os.path.dirname(os.path.abspath(path))
    (fd, tmp) = tempfile.mkstemp(dir=directory, suffix='.ckpt_tmp')
    try:
        with os.fdopen(fd, 'wb') as fh:
            with zipfile.ZipFile(fh, 'w', compression=zipfile.ZIP_STORED) as zf:
                for name in names:
                    buf = io.BytesIO()
                    np.lib.format.write_array(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
                    zf.writestr(zipfile.ZipInfo(name + '.npy', date_time=CHECKPOINT_DATE_TIME), buf.getvalue())
                meta = json.dumps(metadata, sort_keys=True, indent=1)
                zf.writestr(zipfile.ZipInfo(CHECKPOINT_METADATA, date_time=CHECKPOINT_DATE_TIME), meta)
        os.rename(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logging.info("Saved checkpoint with %d tensors to %s", len(names), path)
    return ModelCheckpoint(tensors, metadata)


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint."""
    tensors = OrderedDict()
    try:
        with zipfile.ZipFile(path, 'r') as zf:
            metadata = json.loads(zf.read(CHECKPOINT_METADATA).decode('utf-8'))
            for info in zf.infolist():
                if info.filename == CHECKPOINT_METADATA:
                    continue
                name = info.filename[:-len('.npy')]
                try:
                    tensors[name] = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
                except Exception as err:
                    raise CheckpointError("Corrupt tensor %s in checkpoint %s: %s" % (name, path, err))
    except (zipfile.BadZipFile, KeyError, ValueError, IOError, OSError) as err:
        logging.exception("Could not read checkpoint %s", path)
        raise CheckpointError("Cannot read checkpoint %s: %s" % (path, err))

    return ModelCheckpoint(tensors, metadata)
