"""Late-phase weight engine: partitioning, perturbative spawning, the joint
ensemble iteration and weight-averaging collapse.

Parameter stores are ``dict[str, ndarray]``. Layer groups used for the spawn
normalization are the key prefixes before the first dot (``"L3"`` for
``"L3.gamma"`` and ``"L3.beta"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .numerics import RngStream


@dataclass
class LatePhaseConfig:
    K: int = 10
    T0: float = 0.0
    T0_unit: str = "epoch"
    sigma0: float = 0.0
    gamma_theta: float = 1.0
    shared_minibatch: bool = False
    allow_zero_norm: bool = False
    late_weight_decay: float | None = None

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer")
        if self.T0 < 0:
            raise ConfigError("T0 must be nonnegative")
        if self.T0_unit not in ("epoch", "iteration"):
            raise ConfigError("T0_unit must be 'epoch' or 'iteration'")
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be nonnegative")
        if not self.gamma_theta > 0:
            raise ConfigError("gamma_theta must be positive")
        return self


@dataclass
class SpawnRecord:
    iteration: int
    z: dict
    seed: int
    stream: tuple
    sigma0: float
    K: int

    def to_dict(self):
        return {"iteration": self.iteration, "z": dict(self.z), "seed": self.seed,
                "stream": list(self.stream), "sigma0": self.sigma0, "K": self.K}

    @classmethod
    def from_dict(cls, d):
        return cls(d["iteration"], dict(d["z"]), d["seed"], tuple(d["stream"]),
                   d["sigma0"], d["K"])


@dataclass
class WeightPartition:
    """Base store plus one late store per member (one before spawning)."""

    base: dict
    late: list
    buffers: list = field(default_factory=list)
    record: SpawnRecord | None = None

    def __post_init__(self):
        if not self.late:
            raise ConfigError("partition needs at least one late store")
        keys = sorted(self.late[0])
        for store in self.late[1:]:
            if sorted(store) != keys:
                raise ConfigError("late stores do not share one layout")
        if not self.buffers:
            self.buffers = [{} for _ in self.late]
        if len(self.buffers) != len(self.late):
            raise ConfigError("need one buffer store per late store")

    @property
    def K(self):
        return len(self.late)

    @property
    def spawned(self):
        return self.record is not None

    @property
    def late_keys(self):
        return sorted(self.late[0])

    def member(self, k):
        """Full parameter store of member ``k``."""
        params = dict(self.base)
        params.update(self.late[k])
        return params

    @classmethod
    def from_params(cls, params, late_keys, buffers=None):
        late_keys = set(late_keys)
        missing = late_keys - set(params)
        if missing:
            raise ConfigError(f"late keys not in parameter store: {sorted(missing)}")
        base = {k: v for k, v in params.items() if k not in late_keys}
        late = {k: v for k, v in params.items() if k in late_keys}
        return cls(base, [late], [dict(buffers or {})])


def layer_groups(keys):
    groups = {}
    for key in sorted(keys):
        groups.setdefault(key.split(".", 1)[0], []).append(key)
    return groups


def spawn_late_phase(phi0, K, sigma0, rng: RngStream, iteration=0, allow_zero_norm=False):
    """Replicate ``phi0`` into ``K`` stores ``phi0 + (sigma0 / Z) eps_k``.

    ``Z = sqrt(D) / ||phi0||`` is computed per layer group, so the perturbation
    of a layer scales with that layer's root-mean-square magnitude. Member
    ``k`` draws its noise from ``rng.child(k)``.
    """
    if int(K) != K or K < 1:
        raise ConfigError("K must be a positive integer")
    if sigma0 < 0:
        raise ConfigError("sigma0 must be nonnegative")
    z = {}
    for name, keys in layer_groups(phi0).items():
        size = sum(np.size(phi0[k]) for k in keys)
        norm = float(np.sqrt(sum(np.sum(np.square(phi0[k])) for k in keys)))
        if norm == 0.0 and sigma0 > 0:
            if not allow_zero_norm:
                raise NumericalError(f"late-phase layer {name!r} has zero norm; "
                                     "the spawn normalization is undefined")
            norm = 1e-12
        z[name] = float(np.sqrt(size) / norm) if norm > 0 else None
    stores = []
    for k in range(K):
        if sigma0 == 0:
            stores.append({key: np.array(v, copy=True) for key, v in phi0.items()})
            continue
        gen = rng.child(k)
        store = {}
        for name, keys in layer_groups(phi0).items():
            for key in keys:
                eps = gen.normal(np.shape(phi0[key]))
                store[key] = phi0[key] + (sigma0 / z[name]) * eps
        stores.append(store)
    return stores, SpawnRecord(int(iteration), z, rng.seed, rng.path, float(sigma0), int(K))


def spawn_partition(partition: WeightPartition, config: LatePhaseConfig, rng: RngStream,
                    iteration=0) -> WeightPartition:
    if partition.spawned:
        raise ConfigError("late phase has already been spawned")
    if partition.K != 1:
        raise ConfigError("spawning requires exactly one late store")
    stores, record = spawn_late_phase(partition.late[0], config.K, config.sigma0, rng,
                                      iteration, config.allow_zero_norm)
    buffers = [{k: v.copy() for k, v in partition.buffers[0].items()} for _ in stores]
    return WeightPartition(partition.base, stores, buffers, record)


def _check(grads, what, member):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite {what} gradient for {name!r} (member {member})")


def late_phase_iteration(partition: WeightPartition, config: LatePhaseConfig, batch_source,
                         grad_fn, U_phi, U_theta):
    """One outer iteration of joint late-phase training.

    ``batch_source(k)`` returns member ``k``'s minibatch and
    ``grad_fn(k, theta, phi, batch)`` returns ``(grad_theta, grad_phi, loss)``.
    Every member sees the same frozen base query point; each ``phi_k`` is
    updated right away with ``U_phi[k]``, and the base takes a single step with
    ``gamma_theta`` times the gradients summed in ascending member order.
    Returns the list of member losses; ``partition`` is updated in place.
    """
    if len(U_phi) != partition.K:
        raise ConfigError(f"{len(U_phi)} late optimizers for {partition.K} members")
    theta_q = U_theta.query(partition.base)
    total = None
    losses = []
    for k in range(partition.K):
        batch = batch_source(k)
        phi_q = U_phi[k].query(partition.late[k])
        g_theta, g_phi, loss = grad_fn(k, theta_q, phi_q, batch)
        _check(g_theta, "base", k)
        _check(g_phi, "late", k)
        partition.late[k] = U_phi[k].step(partition.late[k], g_phi)
        if total is None:
            total = {name: np.array(g, copy=True) for name, g in g_theta.items()}
        else:
            for name, g in g_theta.items():
                total[name] += g
        losses.append(loss)
    scaled = {name: config.gamma_theta * g for name, g in total.items()}
    partition.base = U_theta.step(partition.base, scaled)
    return losses


def single_model_step(partition: WeightPartition, batch, grad_fn, U_phi, U_theta):
    """Plain step of the single model before the late phase starts."""
    if partition.K != 1:
        raise ConfigError("single-model steps need exactly one late store")
    theta_q = U_theta.query(partition.base)
    phi_q = U_phi.query(partition.late[0])
    g_theta, g_phi, loss = grad_fn(0, theta_q, phi_q, batch)
    _check(g_theta, "base", 0)
    _check(g_phi, "late", 0)
    partition.late[0] = U_phi.step(partition.late[0], g_phi)
    partition.base = U_theta.step(partition.base, g_theta)
    return loss


def _mean_stores(stores):
    """Member mean computed as ``ref + sum(x_k - ref) / K``; exact for equal members."""
    ref = stores[0]
    K = len(stores)
    out = {}
    for key in ref:
        acc = np.zeros_like(ref[key], dtype=np.float64)
        for store in stores[1:]:
            acc += store[key] - ref[key]
        out[key] = ref[key] + acc / K
    return out


def collapse(partition: WeightPartition, late=None, base=None):
    """Single model with the member-averaged late weights and buffers.

    ``late``/``base`` substitute alternative stores of the same layout (SWA
    averages, for instance). Returns ``(params, buffers)``.
    """
    late = partition.late if late is None else late
    base = partition.base if base is None else base
    params = dict(base)
    params.update(_mean_stores(late))
    buffers = _mean_stores(partition.buffers) if partition.buffers[0] else {}
    return params, buffers


def member_predict_average(partition: WeightPartition, predict_fn, x, late=None, base=None):
    """Mean of ``predict_fn(params_k, buffers_k, x)`` over members in index order."""
    late = partition.late if late is None else late
    base = partition.base if base is None else base
    total = None
    for k in range(partition.K):
        params = dict(base)
        params.update(late[k])
        out = np.asarray(predict_fn(params, partition.buffers[k], x), dtype=np.float64)
        total = out.copy() if total is None else total + out
    return total / partition.K
