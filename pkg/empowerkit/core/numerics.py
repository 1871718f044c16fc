"""
Empowerkit - Numerics

Deterministic small-scale neural-network machinery shared by every estimator,
forward model and policy: dense and gated-linear layers with manual
backpropagation over a flat parameter vector, Adam, running reward
normalization, finite-difference checking and the binary checkpoint format.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ContractViolation, NonFiniteActivation

logger = logging.getLogger(__name__)

ACTIVATIONS = ('tanh', 'relu', 'linear', 'softplus')

# Uniform fan-in init: W ~ U(-gain*sqrt(3/fan_in), +gain*sqrt(3/fan_in)), biases zero.
INIT_GAIN = {
    'tanh': 5.0 / 3.0,
    'relu': math.sqrt(2.0),
    'linear': 1.0,
    'softplus': 1.0,
    'glu': 1.0,
}

CHECKPOINT_MAGIC = b'EMPK'
CHECKPOINT_VERSION = 1

NORMALIZER_STD_FLOOR = 1e-8
NORMALIZER_CLIP = 5.0


def make_rng(seed):
    """Return the project's generator (PCG64) for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, count):
    """Return ``count`` independent generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def softplus(u):
    """
    log(1 + exp(u)) without overflow.

    Computed as max(u, 0) + log1p(exp(-|u|)), which is u + log1p(exp(-u)) for
    u > 0 and log1p(exp(u)) otherwise.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    return float(out) if out.ndim == 0 else out


def sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(u))
    out = np.where(u >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def glu_forward(x, w1, b1, w2, b2):
    """
    Gated linear unit: (x W1 + b1) * sigmoid(x W2 + b2).

    Args:
        x: input vector or batch (..., in_dim)
        w1, w2: weight matrices (in_dim, out_dim)
        b1, b2: bias vectors (out_dim,)

    Returns:
        Array of shape (..., out_dim)
    """
    x = np.asarray(x, dtype=np.float64)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if x.shape[-1] != w1.shape[0] or w1.shape != w2.shape:
        raise ContractViolation(
            f"GLU input has {x.shape[-1]} features, layer expects {w1.shape[0]}"
        )
    return (x @ w1 + b1) * sigmoid(x @ w2 + b2)


def _activate(z, activation):
    if activation == 'tanh':
        return np.tanh(z)
    if activation == 'relu':
        return np.maximum(z, 0.0)
    if activation == 'softplus':
        return softplus(z)
    return z


def _activation_grad(z, out, activation):
    if activation == 'tanh':
        return 1.0 - out * out
    if activation == 'relu':
        return (z > 0.0).astype(np.float64)
    if activation == 'softplus':
        return sigmoid(z)
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a Network: ``dense`` with an activation, or ``glu``."""

    kind: str
    in_dim: int
    out_dim: int
    activation: str = 'linear'

    def __post_init__(self):
        if self.kind not in ('dense', 'glu'):
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.kind == 'dense' and self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractViolation("layer dimensions must be positive")

    @property
    def param_count(self):
        single = self.in_dim * self.out_dim + self.out_dim
        return 2 * single if self.kind == 'glu' else single

    def to_dict(self):
        return {
            'kind': self.kind,
            'in_dim': self.in_dim,
            'out_dim': self.out_dim,
            'activation': self.activation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data['kind'], int(data['in_dim']), int(data['out_dim']), data.get('activation', 'linear'))


class Network:
    """
    Feed-forward parameter container over a flat float64 parameter vector.

    Layer parameters are laid out back to back; a dense layer stores W
    (in_dim x out_dim, row-major) then b, a GLU layer stores W1, b1, W2, b2.
    ``params`` is updated in place by the optimizer, so views taken from it
    stay valid for the lifetime of the network.
    """

    def __init__(self, layers, params=None):
        self.layers = tuple(layers)
        if not self.layers:
            raise ContractViolation("a network needs at least one layer")
        for previous, current in zip(self.layers, self.layers[1:]):
            if previous.out_dim != current.in_dim:
                raise ContractViolation(
                    f"layer dims do not chain: {previous.out_dim} -> {current.in_dim}"
                )
        self._offsets = []
        offset = 0
        for layer in self.layers:
            self._offsets.append(offset)
            offset += layer.param_count
        if params is None:
            self.params = np.zeros(offset, dtype=np.float64)
        else:
            self.params = np.array(params, dtype=np.float64).reshape(-1)
            if self.params.size != offset:
                raise ContractViolation(f"expected {offset} parameters, got {self.params.size}")

    @classmethod
    def build(cls, input_dim, hidden, output_dim, rng, activation='tanh',
              output_activation='linear', glu_layers=0, glu_width=256,
              output_gain=None, zero_output=False):
        """
        Build and initialize a stack of ``glu_layers`` GLU layers, dense hidden
        layers of the given widths, and a dense output layer.
        """
        specs = []
        width = input_dim
        for _ in range(glu_layers):
            specs.append(LayerSpec('glu', width, glu_width))
            width = glu_width
        for units in hidden:
            specs.append(LayerSpec('dense', width, int(units), activation))
            width = int(units)
        specs.append(LayerSpec('dense', width, output_dim, output_activation))
        net = cls(specs)
        net.initialize(rng, output_gain=output_gain)
        if zero_output:
            net.zero_output_layer()
        return net

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def param_count(self):
        return self.params.size

    def _views(self, index, source=None):
        source = self.params if source is None else source
        layer = self.layers[index]
        offset = self._offsets[index]
        n_w = layer.in_dim * layer.out_dim
        blocks = []
        for _ in range(2 if layer.kind == 'glu' else 1):
            w = source[offset:offset + n_w].reshape(layer.in_dim, layer.out_dim)
            b = source[offset + n_w:offset + n_w + layer.out_dim]
            blocks.extend([w, b])
            offset += n_w + layer.out_dim
        return blocks

    def initialize(self, rng, output_gain=None):
        self.params[:] = 0.0
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            gain = INIT_GAIN['glu'] if layer.kind == 'glu' else INIT_GAIN[layer.activation]
            if index == last and output_gain is not None:
                gain = output_gain
            limit = gain * math.sqrt(3.0 / layer.in_dim)
            blocks = self._views(index)
            for w in blocks[0::2]:
                w[...] = rng.uniform(-limit, limit, size=w.shape)

    def zero_output_layer(self):
        for block in self._views(len(self.layers) - 1):
            block[...] = 0.0

    def copy(self):
        return Network(self.layers, self.params.copy())

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ContractViolation(
                f"network expects inputs with {self.input_dim} features, got shape {x.shape}"
            )
        return x, single

    def _run(self, x):
        cache = []
        h = x
        for index, layer in enumerate(self.layers):
            if layer.kind == 'dense':
                w, b = self._views(index)
                z = h @ w + b
                out = _activate(z, layer.activation)
                cache.append((h, z, out))
            else:
                w1, b1, w2, b2 = self._views(index)
                a = h @ w1 + b1
                s = sigmoid(h @ w2 + b2)
                out = a * s
                cache.append((h, a, s))
            if not np.all(np.isfinite(out)):
                raise NonFiniteActivation(index)
            h = out
        return h, cache

    def forward(self, x):
        x, single = self._prepare(x)
        out, _ = self._run(x)
        return out[0] if single else out

    def forward_with_cache(self, x):
        """Batch forward pass that keeps the activations needed by ``backward``."""
        x, _ = self._prepare(x)
        return self._run(x)

    def backward(self, cache, upstream_grad):
        """
        Backpropagate ``upstream_grad`` through the activations in ``cache``.

        Returns:
            (param_grads, input_grads)
        """
        d = np.asarray(upstream_grad, dtype=np.float64)
        expected = (cache[-1][0].shape[0], self.output_dim)
        if d.shape != expected:
            raise ContractViolation(f"upstream gradient shape {d.shape} != output shape {expected}")
        grads = np.zeros_like(self.params)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            if layer.kind == 'dense':
                h, z, layer_out = cache[index]
                w, _ = self._views(index)
                gw, gb = self._views(index, grads)
                dz = d * _activation_grad(z, layer_out, layer.activation)
                gw[...] = h.T @ dz
                gb[...] = dz.sum(axis=0)
                d = dz @ w.T
            else:
                h, a, s = cache[index]
                w1, _, w2, _ = self._views(index)
                gw1, gb1, gw2, gb2 = self._views(index, grads)
                da = d * s
                dg = d * a * s * (1.0 - s)
                gw1[...] = h.T @ da
                gb1[...] = da.sum(axis=0)
                gw2[...] = h.T @ dg
                gb2[...] = dg.sum(axis=0)
                d = da @ w1.T + dg @ w2.T
            if not np.all(np.isfinite(d)):
                raise NonFiniteActivation(index, stage='backward')
        return grads, d

    def forward_backward(self, x, upstream_grad):
        """
        Run a forward pass and backpropagate ``upstream_grad``.

        Returns:
            (outputs, param_grads, input_grads) where param_grads is the exact
            gradient of sum(upstream_grad * outputs) w.r.t. the flat params.
        """
        x, single = self._prepare(x)
        out, cache = self._run(x)
        d = np.asarray(upstream_grad, dtype=np.float64)
        if single and d.ndim == 1:
            d = d[None, :]
        grads, dx = self.backward(cache, d)
        if single:
            return out[0], grads, dx[0]
        return out, grads, dx


def forward_backward(net, x, upstream_grad):
    return net.forward_backward(x, upstream_grad)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        size = np.asarray(params).size
        return cls(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state, params, grads):
    """
    Apply one bias-corrected Adam descent step to ``params`` in place.

    Returns:
        (params, state)
    """
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractViolation("params, grads and optimizer moments must have the same length")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class NormalizerState:
    """Running mean/variance (Welford) for reward standardization."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x):
        x = float(x)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self):
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self):
        return math.sqrt(max(self.variance, 0.0))

    def apply(self, x):
        """Standardize with the current statistics, without updating them."""
        scale = max(self.std, NORMALIZER_STD_FLOOR)
        out = np.clip((np.asarray(x, dtype=np.float64) - self.mean) / scale, -NORMALIZER_CLIP, NORMALIZER_CLIP)
        return float(out) if out.ndim == 0 else out

    def copy(self):
        return NormalizerState(self.count, self.mean, self.m2)


def normalize(state, x):
    """Update ``state`` with ``x``, then return x standardized and clamped to [-5, 5]."""
    state.update(x)
    return state.apply(x)


def normalize_many(state, values):
    """Update with every value in order, then standardize them all."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    for value in values:
        state.update(value)
    return state.apply(values)


def numerical_gradient(fn, params, eps=1e-5):
    """
    Central finite-difference gradient of the scalar ``fn()`` w.r.t. ``params``.

    ``params`` is perturbed in place one coordinate at a time and restored.
    """
    grad = np.zeros_like(params)
    for index in range(params.size):
        original = params[index]
        params[index] = original + eps
        plus = fn()
        params[index] = original - eps
        minus = fn()
        params[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def save_network(path, net, meta=None):
    """
    Write ``net`` to ``path``.

    Layout: magic b'EMPK', u16 version, u32 header length, UTF-8 JSON header
    {"layers": [...], "meta": {...}}, u64 parameter count, then the
    parameters as little-endian float64.
    """
    header = json.dumps(
        {'layers': [layer.to_dict() for layer in net.layers], 'meta': meta or {}},
        sort_keys=True,
    ).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack('<HI', CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack('<Q', net.params.size))
        fh.write(net.params.astype('<f8').tobytes())


def load_network(path):
    """
    Read a checkpoint written by ``save_network``.

    Returns:
        (Network, meta dict)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an empowerkit checkpoint")
    try:
        version, header_len = struct.unpack_from('<HI', raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        start = 10
        header = json.loads(raw[start:start + header_len].decode('utf-8'))
        (count,) = struct.unpack_from('<Q', raw, start + header_len)
        body = raw[start + header_len + 8:]
        params = np.frombuffer(body, dtype='<f8', count=count).astype(np.float64)
        layers = [LayerSpec.from_dict(item) for item in header['layers']]
        return Network(layers, params), header.get('meta', {})
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
