"""The simulation engine: fleet construction, Non-IID partitioning, the
round loop (select -> broadcast -> local train -> aggregate), stage
transitions with freezing, the simulated clock, and the two baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import cohort, costs, nn, selector
from .blocks import (
    BlockPartition,
    StageModel,
    assemble_stage_model,
    build_output_module,
    grow,
    partition_model,
)
from .config import ExperimentConfig, build_model
from .errors import ConfigurationError, InfeasibleStageError
from .pace import PaceController
from .selector import SelectionConstraints, UtilityRecord

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ datasets


def make_blobs(n_samples, num_classes, shape, noise, rng):
    """Class-conditional Gaussian images/vectors: fixed per-class mean
    pattern plus isotropic noise."""
    means = rng.normal(size=(num_classes,) + tuple(shape))
    labels = rng.integers(0, num_classes, size=n_samples)
    x = means[labels] + noise * rng.normal(size=(n_samples,) + tuple(shape))
    return x, labels


def build_dataset(cfg: ExperimentConfig):
    rng = np.random.default_rng([cfg.seed, 101])
    shape = tuple(cfg.model.input_shape)
    n = cfg.dataset.train_size + cfg.dataset.test_size
    x, y = make_blobs(n, cfg.model.num_classes, shape, cfg.dataset.noise, rng)
    tr = cfg.dataset.train_size
    return (x[:tr], y[:tr]), (x[tr:], y[tr:])


# ------------------------------------------------------------------ fleet


@dataclass
class ClientProfile:
    id: int
    memory_capacity: int
    compute_rate: float
    indices: np.ndarray  # rows of the training set

    @property
    def shard_size(self) -> int:
        return len(self.indices)


def partition_dirichlet(labels, num_clients, alpha, rng) -> list[np.ndarray]:
    """Per class, deal samples to clients with Dirichlet(alpha) proportions.

    Clients left empty are topped up with one sample taken from the largest
    shard, so every client holds at least one sample; the shards remain a
    disjoint cover of the dataset.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if num_clients > n:
        raise ConfigurationError(f"{num_clients} clients but only {n} samples")
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = np.floor(props * len(idx)).astype(int)
        # distribute the rounding remainder to the largest proportions
        rest = len(idx) - counts.sum()
        for k in np.argsort(-props)[:rest]:
            counts[k] += 1
        pos = 0
        for cid, cnt in enumerate(counts):
            shards[cid].extend(idx[pos : pos + cnt])
            pos += cnt
    for cid in range(num_clients):
        while not shards[cid]:
            donor = max(range(num_clients), key=lambda c: len(shards[c]))
            shards[cid].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=int) for s in shards]


def _assign_tiers(tiers, num_clients, rng):
    values = []
    for value, frac in tiers:
        values.extend([value] * round(frac * num_clients))
    while len(values) < num_clients:
        values.append(tiers[-1][0])
    values = values[:num_clients]
    rng.shuffle(values)
    return values


def build_fleet(cfg: ExperimentConfig, labels) -> list[ClientProfile]:
    rng = np.random.default_rng([cfg.seed, 202])
    n = cfg.fleet.num_clients
    shards = partition_dirichlet(labels, n, cfg.dataset.alpha, rng)
    mems = _assign_tiers(list(cfg.fleet.memory_tiers), n, rng)
    comps = _assign_tiers(list(cfg.fleet.compute_tiers), n, rng)
    return [
        ClientProfile(id=i, memory_capacity=int(mems[i]), compute_rate=float(comps[i]), indices=shards[i])
        for i in range(n)
    ]


# ------------------------------------------------------------------ training


def local_train(x, y, stage: StageModel, epochs, batch_size, opt_cfg, seed):
    """E epochs of minibatch SGD on the trainable region of a stage model.

    Returns ({(layer, name): tensor}, mean loss).  The caller's stage model
    is never mutated; frozen parameters are shared, trainable ones copied.
    With epochs == 0 the parameters come back unchanged and the loss is the
    evaluation loss.
    """
    params = [
        ({k: v.copy() for k, v in p.items()} if p is not None and stage.mask[i] else p)
        for i, p in enumerate(stage.params)
    ]
    rng = np.random.default_rng(seed)
    if epochs == 0:
        acts = nn.forward(stage.layers, params, x)
        loss = nn.loss_ce(acts[-1], y)
        return {k: params[k[0]][k[1]] for k in stage.trainable_keys()}, loss

    opt = nn.OptimizerState.for_mask(
        stage.layers,
        stage.mask,
        lr=opt_cfg.lr,
        momentum=opt_cfg.momentum,
        weight_decay=opt_cfg.weight_decay,
    )
    loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            caches: list = []
            acts = nn.forward(stage.layers, params, x[idx], caches)
            losses.append(nn.loss_ce(acts[-1], y[idx]) * len(idx))
            grads = nn.backward(stage.layers, params, acts, x[idx], y[idx], stage.mask, caches)
            nn.sgd_step(params, grads, opt)
        loss = sum(losses) / len(y)
    return {k: params[k[0]][k[1]] for k in stage.trainable_keys()}, loss


def aggregate(updates: dict[int, dict], weights: dict[int, int]) -> dict:
    """FedAvg: element-wise sum of |D_i|/|D| * tensors, ascending client id."""
    ids = sorted(updates)
    total = sum(weights[i] for i in ids)
    out = None
    for cid in ids:
        w = weights[cid] / total
        if out is None:
            out = {k: w * v for k, v in updates[cid].items()}
        else:
            for k, v in updates[cid].items():
                if out[k].shape != v.shape:
                    raise ConfigurationError(f"shape mismatch in update {k} from client {cid}")
                out[k] += w * v
    return out


def evaluate(stage_layers, params, x, y, batch_size=512):
    correct = 0
    loss = 0.0
    for s in range(0, len(y), batch_size):
        acts = nn.forward(stage_layers, params, x[s : s + batch_size])
        logits = acts[-1]
        correct += int((logits.argmax(axis=1) == y[s : s + batch_size]).sum())
        loss += nn.loss_ce(logits, y[s : s + batch_size]) * len(y[s : s + batch_size])
    return correct / len(y), loss / len(y)


# ------------------------------------------------------------------ reports


@dataclass
class ExperimentReport:
    kind: str
    records: list = field(default_factory=list)
    final_accuracy: float = 0.0
    total_sim_time: float = 0.0
    stage_memory: dict = field(default_factory=dict)  # stage -> bytes
    full_memory: int = 0
    freeze_rounds: dict = field(default_factory=dict)  # stage -> round index
    communities: list = field(default_factory=list)
    memory_wall: bool = False
    aborted: str | None = None

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "final_accuracy": self.final_accuracy,
            "total_sim_time": self.total_sim_time,
            "rounds": len(self.records),
            "stage_memory_bytes": {str(k): v for k, v in self.stage_memory.items()},
            "full_training_memory_bytes": self.full_memory,
            "freeze_rounds": {str(k): v for k, v in self.freeze_rounds.items()},
            "communities": [list(c) for c in self.communities],
            "memory_wall": self.memory_wall,
            "aborted": self.aborted,
        }


class Simulation:
    """Progressive (SmartFreeze-style) training run."""

    def __init__(self, cfg: ExperimentConfig, sink=None, checkpoint_hook=None):
        self.cfg = cfg
        self.sink = sink
        self.checkpoint_hook = checkpoint_hook
        model, boundaries = build_model(cfg.model)
        self.model = model
        self.partition: BlockPartition = partition_model(model, boundaries)
        (self.x_train, self.y_train), (self.x_test, self.y_test) = build_dataset(cfg)
        self.fleet = build_fleet(cfg, self.y_train)
        self.clients = {c.id: c for c in self.fleet}
        self.utilities = {c.id: UtilityRecord(client_id=c.id) for c in self.fleet}
        self.clock = 0.0
        self.global_round = 0

    # -- setup -------------------------------------------------------------

    def shard(self, cid):
        idx = self.clients[cid].indices
        return self.x_train[idx], self.y_train[idx]

    def probe_and_cluster(self):
        rng = np.random.default_rng([self.cfg.seed, 303])
        params = nn.init_params(self.model.layers, rng)
        shards = {c.id: self.shard(c.id) for c in self.fleet}
        grads = cohort.probe_gradients(
            shards,
            self.model.layers,
            params,
            batch_size=self.cfg.training.batch_size,
            lr=self.cfg.optimizer.lr,
            seed=self.cfg.seed,
        )
        self.ids, self.omega = cohort.similarity_matrix(grads)
        graph = cohort.build_graph(self.omega)
        self.communities = cohort.rlcd(graph, self.cfg.selector.delta, self.cfg.seed)
        return self.communities

    def phi(self) -> int:
        phi = self.cfg.selector.phi
        return math.ceil(0.05 * len(self.fleet)) if phi == "auto" else int(phi)

    # -- stage loop --------------------------------------------------------

    def _stage_lambda(self, eligible_ids, flops) -> float:
        if self.cfg.selector.lam != "auto":
            return float(self.cfg.selector.lam)
        imps = [self.utilities[c].importance for c in eligible_ids]
        times = [
            costs.client_time(
                flops,
                self.clients[c].shard_size,
                self.cfg.training.rho,
                self.clients[c].compute_rate,
                self.cfg.training.local_epochs,
            )
            for c in eligible_ids
        ]
        mt = float(np.mean(times))
        return float(np.mean(imps)) / mt if mt > 0 else 0.0

    def run_stage(self, stage: StageModel):
        cfg = self.cfg
        t = stage.stage
        mem = costs.stage_memory(stage, cfg.training.batch_size)
        flops = costs.stage_flops(stage)
        capacities = {c.id: c.memory_capacity for c in self.fleet}
        eligible_ids = selector.eligible(capacities, mem.total, t, self.phi())

        # refresh importances for everyone eligible at stage start
        for cid in eligible_ids:
            x, y = self.shard(cid)
            self.utilities[cid].importance = selector.data_importance(x, y, stage)
            self.utilities[cid].time_s = costs.client_time(
                flops, len(y), cfg.training.rho, self.clients[cid].compute_rate,
                cfg.training.local_epochs,
            )
        lam = self._stage_lambda(eligible_ids, flops)
        constraints = SelectionConstraints(
            lam=lam,
            epsilon=cfg.selector.epsilon,
            min_clients=self.phi(),
            min_data=cfg.selector.gamma,
            cohort_size=min(cfg.selector.cohort_size, len(eligible_ids)),
        )
        pace = PaceController(
            Q=cfg.pace.Q,
            H=cfg.pace.H,
            threshold=cfg.pace.threshold,
            patience=cfg.pace.patience,
            decay_ratio=cfg.pace.decay_ratio,
        )
        pace.observe(stage.block_param_vector())
        shard_sizes = {c.id: c.shard_size for c in self.fleet}
        frozen = None
        records = []
        for r in range(1, cfg.pace.stage_round_cap + 1):
            self.global_round += 1
            rng = np.random.default_rng([cfg.seed, t, r, 404])
            sel = selector.select(
                self.communities.communities,
                self.utilities,
                constraints,
                eligible_ids,
                rng,
                shard_sizes,
            )
            updates, times, losses = {}, {}, {}
            for cid in sel.selected:
                x, y = self.shard(cid)
                seed = [cfg.seed, t, r, cid]
                updates[cid], losses[cid] = local_train(
                    x, y, stage, cfg.training.local_epochs, cfg.training.batch_size,
                    cfg.optimizer, seed,
                )
                times[cid] = costs.client_time(
                    flops, len(y), cfg.training.rho,
                    self.clients[cid].compute_rate, cfg.training.local_epochs,
                )
            merged = aggregate(updates, shard_sizes)
            for (i, name), tensor in merged.items():
                stage.params[i][name] = tensor
            for cid in sel.selected:
                self.utilities[cid].importance = losses[cid] * shard_sizes[cid]
                self.utilities[cid].time_s = times[cid]
                self.utilities[cid].last_round = self.global_round
            rt = costs.round_time(times)
            self.clock += rt
            prec = pace.observe(stage.block_param_vector())
            acc, eval_loss = evaluate(stage.layers, stage.params, self.x_test, self.y_test)
            record = {
                "round": self.global_round,
                "stage": t,
                "selected": sel.selected,
                "explored": sel.explored,
                "mean_train_loss": float(np.mean([losses[c] for c in sel.selected])),
                "eval_accuracy": acc,
                "eval_loss": eval_loss,
                "perturbation": prec.perturbation,
                "smoothed_perturbation": prec.smoothed,
                "slope": prec.slope,
                "round_seconds": rt,
                "cumulative_seconds": self.clock,
                "stage_memory_bytes": mem.total,
                "lambda": lam,
                "data_constraint_met": sel.data_constraint_met,
            }
            records.append(record)
            if self.sink is not None:
                self.sink.write(record)
            if self.checkpoint_hook is not None:
                self.checkpoint_hook(self.global_round, t, stage)
            if prec.freeze:
                frozen = r
                break
        if frozen is None:
            log.warning("stage %d hit the round cap (%d) without freezing", t, cfg.pace.stage_round_cap)
        return stage, records, frozen, mem

    def run(self) -> ExperimentReport:
        cfg = self.cfg
        report = ExperimentReport(kind="smartfreeze")
        report.full_memory = costs.full_training_memory(
            self.model.layers, self.model.input_shape, cfg.training.batch_size
        )
        self.probe_and_cluster()
        report.communities = list(self.communities.communities)

        rng = np.random.default_rng([cfg.seed, 505])
        T = self.partition.num_blocks
        op = build_output_module(self.partition, 1, self.partition.num_classes, rng) if T > 1 else None
        stage = assemble_stage_model(self.partition, 1, op, [], rng)
        acc = 0.0
        for t in range(1, T + 1):
            try:
                stage, records, frozen, mem = self.run_stage(stage)
            except InfeasibleStageError as exc:
                report.aborted = str(exc)
                return report
            report.records.extend(records)
            report.stage_memory[t] = mem.total
            if frozen is not None:
                report.freeze_rounds[t] = frozen
            if records:
                acc = records[-1]["eval_accuracy"]
            if t < T:
                stage = grow(stage, self.partition, rng)
        report.final_accuracy = acc
        report.total_sim_time = self.clock
        return report


def run_experiment(cfg: ExperimentConfig, sink=None, checkpoint_hook=None) -> ExperimentReport:
    return Simulation(cfg, sink=sink, checkpoint_hook=checkpoint_hook).run()


# ------------------------------------------------------------------ baselines


def run_baseline(kind: str, cfg: ExperimentConfig, rounds=None, sink=None, checkpoint_hook=None) -> ExperimentReport:
    """fedavg_full: full-model FedAvg with uniform random selection ignoring
    memory.  exclusive_fl: identical, but only clients whose capacity covers
    full-model training may participate (possibly nobody: memory wall)."""
    if kind not in ("fedavg_full", "exclusive_fl"):
        raise ConfigurationError(f"unknown baseline kind {kind!r}")
    rounds = rounds if rounds is not None else cfg.training.baseline_rounds
    sim = Simulation(cfg)  # reuse dataset/fleet construction
    report = ExperimentReport(kind=kind)
    full_mem = costs.full_training_memory(
        sim.model.layers, sim.model.input_shape, cfg.training.batch_size
    )
    report.full_memory = full_mem
    pool = [c.id for c in sim.fleet]
    if kind == "exclusive_fl":
        pool = [c.id for c in sim.fleet if c.memory_capacity >= full_mem]
        if not pool:
            report.memory_wall = True
            return report

    layers = sim.model.layers
    mask = [l.parameterized for l in layers]
    rng = np.random.default_rng([cfg.seed, 606])
    params = nn.init_params(layers, rng)
    stage = StageModel(
        stage=0,
        layers=layers,
        params=params,
        mask=mask,
        trainable_start=0,
        op_start=len(sim.model.features),
        input_shape=sim.model.input_shape,
    )
    flops = costs.full_model_flops(layers, sim.model.input_shape)
    shard_sizes = {c.id: c.shard_size for c in sim.fleet}
    size = min(cfg.selector.cohort_size, len(pool))
    acc = 0.0
    for r in range(1, rounds + 1):
        rrng = np.random.default_rng([cfg.seed, r, 707])
        selected = sorted(int(pool[i]) for i in rrng.choice(len(pool), size=size, replace=False))
        updates, times, losses = {}, {}, {}
        for cid in selected:
            x, y = sim.shard(cid)
            updates[cid], losses[cid] = local_train(
                x, y, stage, cfg.training.local_epochs, cfg.training.batch_size,
                cfg.optimizer, [cfg.seed, 0, r, cid],
            )
            times[cid] = costs.client_time(
                flops, len(y), cfg.training.rho,
                sim.clients[cid].compute_rate, cfg.training.local_epochs,
            )
        merged = aggregate(updates, shard_sizes)
        for (i, name), tensor in merged.items():
            stage.params[i][name] = tensor
        rt = costs.round_time(times)
        sim.clock += rt
        acc, eval_loss = evaluate(layers, stage.params, sim.x_test, sim.y_test)
        record = {
            "round": r,
            "stage": 0,
            "selected": selected,
            "mean_train_loss": float(np.mean([losses[c] for c in selected])),
            "eval_accuracy": acc,
            "eval_loss": eval_loss,
            "round_seconds": rt,
            "cumulative_seconds": sim.clock,
            "stage_memory_bytes": full_mem,
        }
        report.records.append(record)
        if sink is not None:
            sink.write(record)
        if checkpoint_hook is not None:
            checkpoint_hook(r, 0, stage)
    report.final_accuracy = acc
    report.total_sim_time = sim.clock
    return report
