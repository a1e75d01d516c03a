"""Feedforward classifiers with hand-written forward and backward passes.

A network is an ordered list of layers (affine, batchnorm, relu, softmax
cross-entropy head). Parameters live in a flat store keyed ``"L{i}.<name>"``
(``"G{g}.theta"`` for shared hypernetworks); batchnorm running statistics live
in a separate per-member buffer store.

Late-phase weight models:

* ``batchnorm``       -- every batchnorm scale and shift
* ``rank1``           -- affine weights ``W = (u v^T) * theta`` with late ``u, v``
* ``hypernet``        -- ``W = theta_g . phi_l`` with late layer embeddings ``phi_l``
* ``last_layer_only`` -- weights and bias of the final affine layer

The first three also make the final affine layer late unless
``include_last=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericalError
from .numerics import RngStream

LATE_MODELS = ("batchnorm", "rank1", "hypernet", "last_layer_only")
_ALIASES = {"hypernet_embedding": "hypernet"}


def canonical_late_model(name):
    if name is None:
        return None
    name = _ALIASES.get(name, name)
    if name not in LATE_MODELS:
        raise ConfigError(f"unknown late-phase model {name!r}")
    return name


@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    width: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    classes: int


_LAYER_TYPES = {"affine": Affine, "batchnorm": BatchNorm, "relu": ReLU, "softmax_xent_head": SoftmaxHead}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass
class NetworkSpec:
    layers: list
    late_model: str | None = None
    include_last: bool = True
    hypernet_dim: int = 2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    roles: dict = field(init=False, repr=False)
    groups: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.late_model = canonical_late_model(self.late_model)
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                if width is not None and layer.in_dim != width:
                    raise DimensionError(f"layer {i}: expects width {layer.in_dim}, gets {width}")
                width = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if width is not None and layer.width != width:
                    raise DimensionError(f"layer {i}: batchnorm width {layer.width} != {width}")
                width = layer.width
            elif isinstance(layer, SoftmaxHead):
                if i != len(self.layers) - 1:
                    raise ConfigError("the softmax head must be the last layer")
                if width is not None and layer.classes != width:
                    raise DimensionError(f"head has {layer.classes} classes but input width {width}")
            elif not isinstance(layer, ReLU):
                raise ConfigError(f"layer {i}: unsupported layer {layer!r}")
        if not self.affine_indices:
            raise ConfigError("network needs at least one affine layer")
        self._assign_roles()

    @property
    def affine_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, Affine)]

    @property
    def batchnorm_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    @property
    def last_affine(self):
        return self.affine_indices[-1]

    @property
    def in_dim(self):
        return self.layers[self.affine_indices[0]].in_dim

    @property
    def has_head(self):
        return isinstance(self.layers[-1], SoftmaxHead)

    def _assign_roles(self):
        roles = {i: "plain" for i in self.affine_indices}
        groups = []
        if self.late_model in ("rank1", "hypernet"):
            eligible = [i for i in self.affine_indices
                        if not (self.include_last and i == self.last_affine)]
            for i in eligible:
                roles[i] = self.late_model
            if self.late_model == "hypernet":
                for i in eligible:
                    shape = (self.layers[i].out_dim, self.layers[i].in_dim)
                    if groups and groups[-1][1] == shape:
                        groups[-1][0].append(i)
                    else:
                        groups.append(([i], shape))
        self.roles = roles
        self.groups = [g[0] for g in groups]

    def group_of(self, i):
        for g, members in enumerate(self.groups):
            if i in members:
                return g
        raise KeyError(i)

    def to_dict(self):
        layers = []
        for layer in self.layers:
            entry = {"type": _LAYER_NAMES[type(layer)]}
            entry.update(layer.__dict__)
            layers.append(entry)
        return {"layers": layers, "late_model": self.late_model, "include_last": self.include_last,
                "hypernet_dim": self.hypernet_dim, "bn_eps": self.bn_eps,
                "bn_momentum": self.bn_momentum}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = _LAYER_TYPES[entry.pop("type")]
            layers.append(kind(**entry))
        return cls(layers, d.get("late_model"), d.get("include_last", True),
                   d.get("hypernet_dim", 2), d.get("bn_eps", 1e-5), d.get("bn_momentum", 0.1))


def mlp(in_dim, hidden, classes, batchnorm=True, activation=True, late_model=None,
        include_last=True, hypernet_dim=2):
    """Affine(+BatchNorm)(+ReLU) blocks followed by a linear classifier and head.

    Affine layers that feed a batchnorm carry no bias; batchnorm's shift plays
    that role.
    """
    layers = []
    prev = in_dim
    for width in hidden:
        layers.append(Affine(prev, width, bias=not batchnorm))
        if batchnorm:
            layers.append(BatchNorm(width))
        if activation:
            layers.append(ReLU())
        prev = width
    layers.append(Affine(prev, classes))
    layers.append(SoftmaxHead(classes))
    return NetworkSpec(layers, late_model, include_last, hypernet_dim)


def param_shapes(spec: NetworkSpec) -> dict:
    shapes = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Affine):
            role = spec.roles[i]
            wshape = (layer.out_dim, layer.in_dim)
            if role == "hypernet":
                g = spec.group_of(i)
                shapes[f"G{g}.theta"] = wshape + (spec.hypernet_dim,)
                shapes[f"L{i}.emb"] = (spec.hypernet_dim,)
            else:
                shapes[f"L{i}.W"] = wshape
            if role == "rank1":
                shapes[f"L{i}.u"] = (layer.out_dim,)
                shapes[f"L{i}.v"] = (layer.in_dim,)
            if layer.bias:
                shapes[f"L{i}.b"] = (layer.out_dim,)
        elif isinstance(layer, BatchNorm):
            shapes[f"L{i}.gamma"] = (layer.width,)
            shapes[f"L{i}.beta"] = (layer.width,)
    return shapes


def init_params(spec: NetworkSpec, rng: RngStream):
    """He-initialized weights, unit batchnorm scales, rank-1 factors near 1."""
    gen = rng.generator
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Affine):
            role = spec.roles[i]
            std = np.sqrt(2.0 / layer.in_dim)
            if role == "hypernet":
                g = spec.group_of(i)
                key = f"G{g}.theta"
                if key not in params:
                    params[key] = std * gen.standard_normal(
                        (layer.out_dim, layer.in_dim, spec.hypernet_dim))
                    members = spec.groups[g]
                    raw = gen.standard_normal((spec.hypernet_dim, len(members)))
                    if len(members) <= spec.hypernet_dim:
                        raw, _ = np.linalg.qr(raw)
                    raw = raw / np.linalg.norm(raw, axis=0, keepdims=True)
                    for col, j in enumerate(members):
                        params[f"L{j}.emb"] = raw[:, col].copy()
            else:
                params[f"L{i}.W"] = std * gen.standard_normal((layer.out_dim, layer.in_dim))
            if role == "rank1":
                params[f"L{i}.u"] = 1.0 + gen.uniform(-0.01, 0.01, layer.out_dim)
                params[f"L{i}.v"] = 1.0 + gen.uniform(-0.01, 0.01, layer.in_dim)
            if layer.bias:
                params[f"L{i}.b"] = np.zeros(layer.out_dim)
        elif isinstance(layer, BatchNorm):
            params[f"L{i}.gamma"] = np.ones(layer.width)
            params[f"L{i}.beta"] = np.zeros(layer.width)
    return dict(sorted(params.items())), init_buffers(spec)


def init_buffers(spec: NetworkSpec):
    buffers = {}
    for i in spec.batchnorm_indices:
        width = spec.layers[i].width
        buffers[f"L{i}.mean"] = np.zeros(width)
        buffers[f"L{i}.var"] = np.ones(width)
    return buffers


def build_late_partition(spec: NetworkSpec, selector: str | None = None):
    """Split parameter names into ``(base_keys, late_keys)``, both sorted."""
    selector = canonical_late_model(selector or spec.late_model)
    if selector is None:
        raise ConfigError("no late-phase selector given")
    if selector in ("rank1", "hypernet") and spec.late_model != selector:
        raise ConfigError(f"selector {selector!r} needs a network built with late_model={selector!r}")
    if selector == "batchnorm" and not spec.batchnorm_indices:
        raise ConfigError("batchnorm selector on a network without batchnorm layers")
    if selector in ("rank1", "hypernet") and not any(
            r == selector for r in spec.roles.values()):
        raise ConfigError(f"no affine layer is eligible for the {selector} model")
    keys = sorted(param_shapes(spec))
    last = spec.last_affine
    last_keys = {f"L{last}.W", f"L{last}.b"}
    late = set()
    if selector == "last_layer_only" or spec.include_last:
        late |= last_keys & set(keys)
    if selector == "batchnorm":
        late |= {k for k in keys if k.endswith(".gamma") or k.endswith(".beta")}
    elif selector == "rank1":
        late |= {k for k in keys if k.endswith(".u") or k.endswith(".v")}
    elif selector == "hypernet":
        late |= {k for k in keys if k.endswith(".emb")}
    base = [k for k in keys if k not in late]
    return base, sorted(late)


def rank1_effective(theta, u, v):
    """Effective weights ``(u v^T) * theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (len(u), len(v)):
        raise DimensionError(f"theta {theta.shape} does not match u ({len(u)}) and v ({len(v)})")
    return np.outer(u, v) * theta


def hypernet_effective(theta_g, phi):
    """``W_ij = sum_m theta_g[i, j, m] phi[m]``."""
    theta_g = np.asarray(theta_g, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if theta_g.ndim != 3 or theta_g.shape[2] != phi.shape[0]:
        raise DimensionError(f"embedding length {phi.shape[0]} does not match tensor {theta_g.shape}")
    return theta_g @ phi


def effective_weight(spec: NetworkSpec, params, i):
    role = spec.roles[i]
    if role == "hypernet":
        return hypernet_effective(params[f"G{spec.group_of(i)}.theta"], params[f"L{i}.emb"])
    if role == "rank1":
        return rank1_effective(params[f"L{i}.W"], params[f"L{i}.u"], params[f"L{i}.v"])
    return params[f"L{i}.W"]


@dataclass
class ForwardCache:
    n_layers: int
    train: bool
    logits: np.ndarray
    entries: list


def forward(spec: NetworkSpec, params, buffers, x, train=True, update_stats=True):
    """Return ``(logits, cache)``.

    In train mode batchnorm uses batch statistics and, when ``update_stats``,
    folds them into ``buffers`` (mutated in place). Eval mode reads ``buffers``.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise DataError(f"batch must be a nonempty 2-D array, got shape {h.shape}")
    n = h.shape[0]
    entries = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Affine):
            W = effective_weight(spec, params, i)
            out = h @ W.T
            if layer.bias:
                out = out + params[f"L{i}.b"]
            entries.append((h, W))
            h = out
        elif isinstance(layer, BatchNorm):
            gamma, beta = params[f"L{i}.gamma"], params[f"L{i}.beta"]
            if train:
                if n < 2:
                    raise DataError("train-mode batchnorm needs a batch of at least 2 samples")
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                if update_stats and buffers is not None:
                    m = spec.bn_momentum
                    buffers[f"L{i}.mean"] = (1 - m) * buffers[f"L{i}.mean"] + m * mu
                    buffers[f"L{i}.var"] = (1 - m) * buffers[f"L{i}.var"] + m * var
            else:
                mu, var = buffers[f"L{i}.mean"], buffers[f"L{i}.var"]
            inv = 1.0 / np.sqrt(var + spec.bn_eps)
            xhat = (h - mu) * inv
            entries.append((xhat, inv))
            h = gamma * xhat + beta
        elif isinstance(layer, ReLU):
            mask = h > 0
            entries.append(mask)
            h = h * mask
        else:
            entries.append(None)
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite activations in forward pass")
    return h, ForwardCache(len(spec.layers), train, h, entries)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(spec: NetworkSpec, params, cache: ForwardCache, labels):
    """Mean cross-entropy and its gradient with respect to every parameter."""
    labels = np.asarray(labels)
    logits = cache.logits
    if cache.n_layers != len(spec.layers) or len(cache.entries) != len(spec.layers):
        raise DimensionError("cache does not belong to this network")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {logits.shape[0]}")
    n = logits.shape[0]
    loss = cross_entropy(logits, labels)
    d = softmax(logits)
    d[np.arange(n), labels] -= 1.0
    d /= n
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        entry = cache.entries[i]
        if isinstance(layer, Affine):
            h, W = entry
            dW = d.T @ h
            if layer.bias:
                grads[f"L{i}.b"] += d.sum(axis=0)
            _accumulate_weight_grad(spec, params, grads, i, dW)
            d = d @ W
        elif isinstance(layer, BatchNorm):
            xhat, inv = entry
            gamma = params[f"L{i}.gamma"]
            grads[f"L{i}.gamma"] += (d * xhat).sum(axis=0)
            grads[f"L{i}.beta"] += d.sum(axis=0)
            dxhat = d * gamma
            if cache.train:
                d = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                                 - xhat * (dxhat * xhat).sum(axis=0))
            else:
                d = dxhat * inv
        elif isinstance(layer, ReLU):
            d = d * entry
    return loss, grads


def _accumulate_weight_grad(spec, params, grads, i, dW):
    role = spec.roles[i]
    if role == "hypernet":
        key = f"G{spec.group_of(i)}.theta"
        theta_g, phi = params[key], params[f"L{i}.emb"]
        grads[key] += dW[:, :, None] * phi[None, None, :]
        grads[f"L{i}.emb"] += np.tensordot(dW, theta_g, axes=([0, 1], [0, 1]))
    elif role == "rank1":
        theta, u, v = params[f"L{i}.W"], params[f"L{i}.u"], params[f"L{i}.v"]
        grads[f"L{i}.W"] += dW * np.outer(u, v)
        scaled = dW * theta
        grads[f"L{i}.u"] += scaled @ v
        grads[f"L{i}.v"] += scaled.T @ u
    else:
        grads[f"L{i}.W"] += dW


def loss_and_grads(spec, params, buffers, x, labels, update_stats=True):
    logits, cache = forward(spec, params, buffers, x, train=True, update_stats=update_stats)
    return backward(spec, params, cache, labels)


def predict_logits(spec, params, buffers, x, batch_size=4096):
    x = np.asarray(x, dtype=np.float64)
    outs = [forward(spec, params, buffers, x[s:s + batch_size], train=False)[0]
            for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def predict_proba(spec, params, buffers, x, batch_size=4096):
    """Eval-mode class probabilities."""
    return softmax(predict_logits(spec, params, buffers, x, batch_size))


def eval_loss(spec, params, buffers, x, labels, batch_size=4096):
    """Eval-mode mean cross-entropy over a whole dataset."""
    logits = predict_logits(spec, params, buffers, x, batch_size)
    return cross_entropy(logits, np.asarray(labels))


def _activations_before(spec, params, buffers, x, stop):
    h = x
    for i in range(stop):
        layer = spec.layers[i]
        if isinstance(layer, Affine):
            h = h @ effective_weight(spec, params, i).T
            if layer.bias:
                h = h + params[f"L{i}.b"]
        elif isinstance(layer, BatchNorm):
            inv = 1.0 / np.sqrt(buffers[f"L{i}.var"] + spec.bn_eps)
            h = params[f"L{i}.gamma"] * (h - buffers[f"L{i}.mean"]) * inv + params[f"L{i}.beta"]
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
    return h


def reestimate_batchnorm(spec: NetworkSpec, params, x, batch_size=None, buffers=None):
    """Replace running statistics with exact full-dataset statistics.

    Layers are processed in order; each layer's statistics are merged over
    batches with the pairwise (Chan) update, with upstream layers already using
    their re-estimated statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot re-estimate batchnorm statistics on an empty dataset")
    new = dict(buffers) if buffers is not None else init_buffers(spec)
    size = batch_size or x.shape[0]
    for i in spec.batchnorm_indices:
        count, mean, m2 = 0, None, None
        for s in range(0, x.shape[0], size):
            h = _activations_before(spec, params, new, x[s:s + size], i)
            nb = h.shape[0]
            mb = h.mean(axis=0)
            m2b = ((h - mb) ** 2).sum(axis=0)
            if mean is None:
                count, mean, m2 = nb, mb, m2b
            else:
                delta = mb - mean
                total = count + nb
                mean = mean + delta * (nb / total)
                m2 = m2 + m2b + delta**2 * (count * nb / total)
                count = total
        new[f"L{i}.mean"] = mean
        new[f"L{i}.var"] = m2 / count
    return new


def num_parameters(params) -> int:
    return int(sum(np.size(v) for v in params.values()))


def flatten(params, keys=None):
    keys = sorted(params) if keys is None else keys
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[k]) for k in keys])


def unflatten(vector, template, keys=None):
    keys = sorted(template) if keys is None else keys
    need = sum(np.size(template[k]) for k in keys)
    if need != len(vector):
        raise DimensionError(f"vector has {len(vector)} entries, layout needs {need}")
    out = dict(template)
    pos = 0
    for k in keys:
        size = np.size(template[k])
        out[k] = np.asarray(vector[pos:pos + size]).reshape(np.shape(template[k]))
        pos += size
    return out
