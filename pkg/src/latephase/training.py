"""Classifier training with an optional late phase, plus evaluation helpers.

Epoch accounting counts minibatches actually drawn: one per iteration before
the late phase (and in shared-minibatch mode), ``K`` per iteration when every
member draws its own minibatch.
"""

from __future__ import annotations

import math

import numpy as np

from . import models
from .checkpoint import load_checkpoint, pack, save_checkpoint, unpack
from .config import ExperimentConfig
from .data import Dataset, Standardizer, SyntheticSpec, generate, split
from .engine import (LatePhaseConfig, SpawnRecord, WeightPartition, collapse,
                     late_phase_iteration, member_predict_average, single_model_step,
                     spawn_partition)
from .errors import ConfigError, DataError
from .metrics import nll_and_accuracy
from .numerics import RngStream
from .optim import AdamState, LrSchedule, NesterovState, SwaState, SwaWrapper, lr_at

STREAM_INIT = 10
STREAM_SAMPLER = 11
STREAM_SPAWN = 12
METRIC_FIELDS = ("epoch", "iteration", "minibatches", "lr", "train_loss", "test_nll", "test_acc")


class Sampler:
    """Minibatches without replacement; a fresh permutation every ``N // B`` batches."""

    def __init__(self, n, batch_size, rng: RngStream):
        if batch_size < 1 or batch_size > n:
            raise ConfigError(f"batch size {batch_size} does not fit {n} training samples")
        self.n = int(n)
        self.batch_size = int(batch_size)
        self.rng = rng
        self.perm = None
        self.pos = 0

    @property
    def batches_per_epoch(self):
        return self.n // self.batch_size

    def next(self):
        if self.perm is None or self.pos + self.batch_size > self.batches_per_epoch * self.batch_size:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state(self):
        perm = np.zeros(0) if self.perm is None else self.perm.astype(np.float64)
        return perm, {"pos": self.pos, "rng": self.rng.get_state(), "has_perm": self.perm is not None}

    def restore(self, perm, meta):
        self.perm = perm.astype(np.int64) if meta["has_perm"] else None
        self.pos = int(meta["pos"])
        self.rng = RngStream.from_state(meta["rng"])


def load_task(cfg: ExperimentConfig):
    """Generate, split and standardize the configured dataset.

    Returns ``(train, test, spec, standardizer)``.
    """
    d = cfg.data
    spec = SyntheticSpec(d.generator, d.classes, d.features, d.separation, d.noise, d.n,
                         cfg.data_seed())
    full = generate(spec)
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("data.test_fraction must lie in (0, 1)")
    train, test = split(full, (1.0 - d.test_fraction, d.test_fraction), seed=spec.seed)
    scaler = Standardizer.fit(train.features)
    if not d.standardize:
        scaler = Standardizer(np.zeros(train.n_features), np.ones(train.n_features))
    return scaler.apply(train), scaler.apply(test), spec, scaler


def build_network(cfg: ExperimentConfig, in_dim, classes):
    m = cfg.model
    return models.mlp(in_dim, list(m.hidden), classes, batchnorm=m.batchnorm,
                      late_model=m.late_model, include_last=m.include_last,
                      hypernet_dim=m.hypernet_dim)


def late_config(cfg: ExperimentConfig) -> LatePhaseConfig:
    l = cfg.late
    return LatePhaseConfig(l.K, l.T0, l.T0_unit, l.sigma0, l.gamma_theta, l.shared_minibatch,
                           l.allow_zero_norm, l.late_weight_decay).validate()


def schedule_for(cfg: ExperimentConfig) -> LrSchedule:
    o, epochs = cfg.optim, cfg.train.epochs
    return LrSchedule(o.schedule, o.lr, o.anneal_start * epochs, o.anneal_end * epochs,
                      o.lr_end, tuple(o.milestones), o.factor)


def make_optimizer(cfg: ExperimentConfig, weight_decay=None):
    o = cfg.optim
    wd = o.weight_decay if weight_decay is None else weight_decay
    if o.optimizer == "sgd_nesterov":
        return NesterovState(o.lr, o.momentum, wd)
    if o.optimizer == "swa":
        return SwaWrapper(NesterovState(o.lr, o.momentum, wd))
    if o.optimizer == "adam":
        return AdamState(o.lr, o.beta1, o.beta2, o.adam_eps, wd)
    raise ConfigError(f"unknown optimizer {o.optimizer!r}")


def _optimizer_state(opt, prefix):
    arrays, meta = {}, {"lr": opt.lr}
    if isinstance(opt, SwaWrapper):
        inner_arrays, inner_meta = _optimizer_state(opt.inner, prefix + ".inner")
        arrays.update(inner_arrays)
        arrays.update(pack(prefix + ".swa", opt.swa.average))
        meta.update({"inner": inner_meta, "swa_t": opt.swa.t, "swa_start": opt.swa.start,
                     "active": opt.active})
    elif isinstance(opt, NesterovState):
        arrays.update(pack(prefix + ".velocity", opt.velocity))
    else:
        arrays.update(pack(prefix + ".m", opt.m))
        arrays.update(pack(prefix + ".v", opt.v))
        meta["t"] = opt.t
    return arrays, meta


def _restore_optimizer(opt, prefix, arrays, meta):
    opt.lr = meta["lr"]
    if isinstance(opt, SwaWrapper):
        _restore_optimizer(opt.inner, prefix + ".inner", arrays, meta["inner"])
        opt.swa = SwaState(unpack(prefix + ".swa", arrays), meta["swa_t"], meta["swa_start"])
        opt.active = meta["active"]
    elif isinstance(opt, NesterovState):
        opt.velocity = unpack(prefix + ".velocity", arrays)
    else:
        opt.m = unpack(prefix + ".m", arrays)
        opt.v = unpack(prefix + ".v", arrays)
        opt.t = meta["t"]


class Trainer:
    """Single-model training that switches to late-phase training at ``T0``.

    With ``late_enabled=False`` the model is trained as one network for the
    whole budget (the base run).
    """

    def __init__(self, cfg: ExperimentConfig, train: Dataset, test: Dataset, late_enabled=True):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.late_enabled = late_enabled
        self.late_cfg = late_config(cfg)
        self.schedule = schedule_for(cfg)
        self.spec = build_network(cfg, train.n_features, train.classes)
        params, buffers = models.init_params(self.spec, RngStream(cfg.run.seed, STREAM_INIT))
        _, late_keys = models.build_late_partition(self.spec)
        self.partition = WeightPartition.from_params(params, late_keys, buffers)
        self.U_theta = make_optimizer(cfg)
        self.U_phi = [make_optimizer(cfg, self.late_cfg.late_weight_decay)]
        self.sampler = Sampler(len(train), cfg.train.batch_size,
                               RngStream(cfg.run.seed, STREAM_SAMPLER))
        self.iteration = 0
        self.drawn = 0
        self.epochs_done = 0
        self.loss_sum = 0.0
        self.loss_count = 0
        self.rows = []

    @property
    def batches_per_epoch(self):
        return self.sampler.batches_per_epoch

    @property
    def total_batches(self):
        return self.cfg.train.epochs * self.batches_per_epoch

    @property
    def epoch(self):
        return self.drawn / self.batches_per_epoch

    @property
    def finished(self):
        return self.epochs_done >= self.cfg.train.epochs

    def _optimizers(self):
        return [self.U_theta] + list(self.U_phi)

    def _grad_fn(self, k, theta, phi, batch):
        params = dict(theta)
        params.update(phi)
        x, y = self.train.features[batch], self.train.labels[batch]
        loss, grads = models.loss_and_grads(self.spec, params, self.partition.buffers[k], x, y)
        g_theta = {name: grads[name] for name in theta}
        g_phi = {name: grads[name] for name in phi}
        return g_theta, g_phi, loss

    def _should_spawn(self):
        if not self.late_enabled or self.partition.spawned:
            return False
        if self.late_cfg.T0_unit == "iteration":
            return self.iteration >= self.late_cfg.T0
        return self.drawn >= self.late_cfg.T0 * self.batches_per_epoch

    def _spawn(self):
        rng = RngStream(self.cfg.run.seed, STREAM_SPAWN)
        self.partition = spawn_partition(self.partition, self.late_cfg, rng, self.iteration)
        template = self.U_phi[0]
        self.U_phi = [template.copy() for _ in range(self.late_cfg.K)]

    def _set_lr_and_swa(self):
        epoch = self.epoch
        lr = lr_at(self.schedule, math.floor(epoch))
        swa_on = self.cfg.optim.optimizer == "swa" and epoch >= self.cfg.optim.swa_start * self.cfg.train.epochs
        for opt in self._optimizers():
            opt.lr = lr
            if isinstance(opt, SwaWrapper) and swa_on and not opt.active:
                opt.active = True
                opt.swa.start = self.iteration
        return lr

    def step(self):
        """One outer iteration; returns the member losses."""
        self._set_lr_and_swa()
        if self._should_spawn():
            self._spawn()
        if not self.partition.spawned:
            batch = self.sampler.next()
            losses = [single_model_step(self.partition, batch, self._grad_fn,
                                        self.U_phi[0], self.U_theta)]
            drawn = 1
        elif self.late_cfg.shared_minibatch:
            batch = self.sampler.next()
            losses = late_phase_iteration(self.partition, self.late_cfg, lambda k: batch,
                                          self._grad_fn, self.U_phi, self.U_theta)
            drawn = 1
        else:
            losses = late_phase_iteration(self.partition, self.late_cfg,
                                          lambda k: self.sampler.next(),
                                          self._grad_fn, self.U_phi, self.U_theta)
            drawn = self.partition.K
        self.drawn += drawn
        self.iteration += 1
        for loss in losses:
            self.loss_sum += loss
            self.loss_count += 1
        while (not self.finished
               and self.drawn >= (self.epochs_done + 1) * self.batches_per_epoch):
            self.epochs_done += 1
            self._record_epoch()
        return losses

    def run(self, stop_after_epoch=None, on_iteration=None, checkpoint_dir=None):
        every = self.cfg.train.checkpoint_every
        while not self.finished:
            if stop_after_epoch is not None and self.epochs_done >= stop_after_epoch:
                break
            before = self.epochs_done
            self.step()
            if on_iteration is not None:
                on_iteration(self)
            if checkpoint_dir and every and self.epochs_done != before and self.epochs_done % every == 0:
                self.save(checkpoint_dir)
        if checkpoint_dir:
            self.save(checkpoint_dir)
        return self.rows

    def averaged_stores(self):
        """Base and late stores to evaluate (SWA averages when available)."""
        def avg(opt, store):
            return opt.averaged(store) if isinstance(opt, SwaWrapper) else store
        base = avg(self.U_theta, self.partition.base)
        late = [avg(opt, store) for opt, store in zip(self.U_phi, self.partition.late)]
        return base, late

    def _swa_in_use(self):
        return isinstance(self.U_theta, SwaWrapper) and self.U_theta.swa.t > 0

    def eval_model(self):
        """Collapsed single model ``(params, buffers)`` used for evaluation."""
        base, late = self.averaged_stores()
        params, buffers = collapse(self.partition, late=late, base=base)
        if self.spec.batchnorm_indices and (self.cfg.train.reestimate_bn or self._swa_in_use()):
            buffers = models.reestimate_batchnorm(self.spec, params, self.train.features)
        return params, buffers

    def member_models(self):
        base, late = self.averaged_stores()
        out = []
        for k in range(self.partition.K):
            params = dict(base)
            params.update(late[k])
            buffers = self.partition.buffers[k]
            if self.spec.batchnorm_indices and (self.cfg.train.reestimate_bn or self._swa_in_use()):
                buffers = models.reestimate_batchnorm(self.spec, params, self.train.features)
            out.append((params, buffers))
        return out

    def ensemble_proba(self, x):
        """Mean of member softmax outputs (the non-averaged ensemble)."""
        members = self.member_models()
        stores = WeightPartition({}, [p for p, _ in members], [b for _, b in members])
        return member_predict_average(
            stores, lambda p, b, xx: models.predict_proba(self.spec, p, b, xx), x)

    def evaluate(self, data: Dataset):
        params, buffers = self.eval_model()
        probs = models.predict_proba(self.spec, params, buffers, data.features)
        return nll_and_accuracy(probs, data.labels)

    def _record_epoch(self):
        result = self.evaluate(self.test)
        train_loss = self.loss_sum / self.loss_count if self.loss_count else float("nan")
        self.rows.append({"epoch": self.epochs_done, "iteration": self.iteration,
                          "minibatches": self.drawn, "lr": self.U_theta.lr,
                          "train_loss": train_loss, "test_nll": result.nll,
                          "test_acc": result.accuracy})
        self.loss_sum = 0.0
        self.loss_count = 0

    # checkpointing

    def save(self, directory, config_hash=""):
        arrays = {}
        arrays.update(pack("base", self.partition.base))
        for k, store in enumerate(self.partition.late):
            arrays.update(pack(f"late{k}", store))
            arrays.update(pack(f"buffers{k}", self.partition.buffers[k]))
        opt_meta = {}
        a, opt_meta["theta"] = _optimizer_state(self.U_theta, "opt_theta")
        arrays.update(a)
        opt_meta["phi"] = []
        for k, opt in enumerate(self.U_phi):
            a, m = _optimizer_state(opt, f"opt_phi{k}")
            arrays.update(a)
            opt_meta["phi"].append(m)
        perm, sampler_meta = self.sampler.state()
        arrays["sampler/perm"] = perm
        meta = {"kind": "trainer", "spec": self.spec.to_dict(), "K": self.partition.K,
                "record": None if self.partition.record is None else self.partition.record.to_dict(),
                "optimizers": opt_meta, "sampler": sampler_meta,
                "iteration": self.iteration, "drawn": self.drawn, "epochs_done": self.epochs_done,
                "loss_sum": self.loss_sum, "loss_count": self.loss_count, "rows": self.rows,
                "late_enabled": self.late_enabled}
        save_checkpoint(directory, arrays, meta, config_hash)

    def restore(self, directory):
        arrays, meta, _ = load_checkpoint(directory)
        if meta.get("kind") != "trainer":
            raise ConfigError(f"{directory} is not a trainer checkpoint")
        K = meta["K"]
        record = None if meta["record"] is None else SpawnRecord.from_dict(meta["record"])
        late = [unpack(f"late{k}", arrays) for k in range(K)]
        buffers = [unpack(f"buffers{k}", arrays) for k in range(K)]
        self.partition = WeightPartition(unpack("base", arrays), late, buffers, record)
        _restore_optimizer(self.U_theta, "opt_theta", arrays, meta["optimizers"]["theta"])
        template = self.U_phi[0]
        self.U_phi = []
        for k in range(K):
            opt = template.copy()
            _restore_optimizer(opt, f"opt_phi{k}", arrays, meta["optimizers"]["phi"][k])
            self.U_phi.append(opt)
        self.sampler.restore(arrays["sampler/perm"], meta["sampler"])
        self.iteration = meta["iteration"]
        self.drawn = meta["drawn"]
        self.epochs_done = meta["epochs_done"]
        self.loss_sum = meta["loss_sum"]
        self.loss_count = meta["loss_count"]
        self.rows = [dict(r) for r in meta["rows"]]
        self.late_enabled = meta["late_enabled"]
        return self


def save_model(directory, spec: models.NetworkSpec, params, buffers, extra=None, config_hash=""):
    """A single deployable model: parameters, buffers and the network spec."""
    arrays = {}
    arrays.update(pack("params", params))
    arrays.update(pack("buffers", buffers))
    meta = {"kind": "model", "spec": spec.to_dict(),
            "num_parameters": models.num_parameters(params)}
    meta.update(extra or {})
    save_checkpoint(directory, arrays, meta, config_hash)


def load_model(directory):
    arrays, meta, config_hash = load_checkpoint(directory)
    if meta.get("kind") != "model":
        raise DataError(f"{directory} does not hold a model checkpoint")
    spec = models.NetworkSpec.from_dict(meta["spec"])
    return spec, unpack("params", arrays), unpack("buffers", arrays), meta
