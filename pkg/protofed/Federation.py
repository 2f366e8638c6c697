"""The federated round protocol.

Each round the server broadcasts the global adapter (α) and prototype/head
(φ) groups, every client runs ``local_update`` on its own class-balanced
sampler and returns a ``RoundPayload``, and the server replaces the global
groups with the sample-size weighted average of the payloads.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .Loss import local_loss
from .Model import (HEAD, PROTOTYPES, ParamGroups, accuracy, calibrate_prototypes,
                    checkpoint_size, init_params, load_params, model_forward,
                    pretrain_backbone, save_params)
from .Optimizer import Optimizer, make_optimizer
from .Payload import RoundPayload, serialize_payload
from .RunSettings import FedConfig, RunConfig, WorkerSettings
from .SiteData import BalancedSampler, FederatedData, SiteDataset, augment
from .Tensor import get_dtype, set_precision
from .Worker import Worker
from .doc import copydoc
from .protofed_aux import NumericError, PayloadGroups, ProtocolError
from .protofed_types import DEFAULT_VARIANT_GRID, FreezeMode, Variant
import protofed.protofed_types as internal

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
ALIGNMENT_NAME = "alignment.csv"
EXTERNAL_NAME = "external_eval.csv"
CONFIG_NAME = "resolved_config.ini"
CHECKPOINT_DIR = "checkpoints"
PAYLOAD_DIR = "payloads"
GLOBAL_CHECKPOINT = "global.ckpt"

LOSS_FIELDS = ["ce", "clst", "sep", "l1", "adapter_l2", "prox", "total"]
METRICS_HEADER = (["round", "client"] + LOSS_FIELDS
                  + ["train_acc", "val_acc", "test_acc", "payload_bytes"])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else format(value, ".10g")
    return str(value)


@dataclass
class GlobalState(object):
    """Reference parameters θ^g: name → array for every communicated tensor."""
    alpha: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)
    round: int = 0

    def __repr__(self):
        return "'GlobalState: round {}, {} adapter / {} prototype tensors'".format(
            self.round, len(self.alpha), len(self.phi))

    @property
    def tensors(self) -> dict:
        return {**self.alpha, **self.phi}

    def copy(self) -> "GlobalState":
        return GlobalState({n: a.copy() for n, a in self.alpha.items()},
                           {n: a.copy() for n, a in self.phi.items()},
                           self.round)


@dataclass
class ClientState(object):
    client_id: int
    train: SiteDataset
    val: SiteDataset
    params: ParamGroups
    optimizer: Optimizer
    sampler: BalancedSampler
    rng: np.random.Generator
    history: list = field(default_factory=list)

    def __repr__(self):
        return "'ClientState: client {}, |D|={}'".format(self.client_id,
                                                         self.num_samples)

    @property
    def num_samples(self) -> int:
        return len(self.train)


@dataclass
class ClientRound(object):
    """What a client reports for one round besides its payload."""
    client_id: int
    losses: dict
    train_acc: float
    val_acc: float = float("nan")
    test_acc: float = float("nan")
    adapter_drift: float = float("nan")


def communicated_groups(fed: FedConfig) -> PayloadGroups:
    names = []
    if fed.communicate_adapters:
        names.append("adapters")
    if fed.communicate_prototypes:
        names.append("prototypes")
        if fed.communicate_head:
            names.append("head")
    return PayloadGroups.from_strings(*names)


def _phi_names(groups: PayloadGroups) -> list:
    return [n for n, g in ((PROTOTYPES, "prototypes"), (HEAD, "head"))
            if g in groups]


def global_from_params(params: ParamGroups, groups: PayloadGroups,
                       round_index: int = 0) -> GlobalState:
    alpha = {n: t.data.copy() for n, t in params.alpha.items()} \
        if "adapters" in groups else {}
    phi = {n: params.phi[n].data.copy() for n in _phi_names(groups)}
    return GlobalState(alpha, phi, round_index)


def _client_seed(seed: int, client_id: int, stream: int) -> list:
    return [seed, client_id, stream]


def make_client(client_id: int, train: SiteDataset, val: SiteDataset,
                initial: ParamGroups, config: RunConfig) -> ClientState:
    """The frozen backbone tensors are shared; α and φ are private copies."""
    params = ParamGroups(omega=initial.omega,
                         alpha={n: t.copy() for n, t in initial.alpha.items()},
                         phi={n: t.copy() for n, t in initial.phi.items()})
    fed = config.federation
    optimizer = make_optimizer(fed.optimizer, params.trainable(),
                               fed.learning_rate)
    sampler = BalancedSampler(train.labels, config.backbone.num_classes,
                              fed.batch_size,
                              seed=_client_seed(fed.seed, client_id, 1))
    rng = np.random.default_rng(_client_seed(fed.seed, client_id, 2))
    return ClientState(client_id, train, val, params, optimizer, sampler, rng)


def broadcast(global_state: GlobalState, clients: Iterable[ClientState]) -> None:
    """Overwrites every client's communicated tensors with copies of θ^g."""
    for client in clients:
        for local, reference in ((client.params.alpha, global_state.alpha),
                                 (client.params.phi, global_state.phi)):
            for name, value in reference.items():
                if name not in local or local[name].shape != value.shape:
                    raise ProtocolError(
                        f"client {client.client_id}: global tensor '{name}' "
                        f"{value.shape} does not match the local model")
                local[name].data = value.astype(local[name].dtype, copy=True)


def adapter_drift(params: ParamGroups, global_state: GlobalState) -> float:
    """‖α_i − α^g‖₂ over the communicated adapter tensors."""
    if not global_state.alpha:
        return float("nan")
    return float(np.sqrt(sum(np.sum((params.alpha[n].data - a) ** 2)
                             for n, a in global_state.alpha.items())))


def _train_epoch(client: ClientState, config: RunConfig,
                 reference: Optional[GlobalState], round_index: int) -> tuple:
    backbone = config.backbone
    layer = client.params.prototype_layer(backbone)
    rows, correct, seen = [], 0, 0
    for b, idx in enumerate(client.sampler.epoch()):
        images = client.train.images[idx]
        if config.data.augment:
            images = augment(images, client.rng)
        labels = client.train.labels[idx]
        output = model_forward(np.asarray(images, dtype=get_dtype()),
                               client.params, backbone)
        breakdown = local_loss(output, labels, client.params, layer,
                               config.loss, reference)
        if not np.isfinite(breakdown.total.data).all():
            raise NumericError(
                f"non-finite loss for client {client.client_id} in round "
                f"{round_index}, batch {b}")
        client.optimizer.zero_grad()
        breakdown.total.backward()
        for p in client.params.trainable():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(
                    f"non-finite gradient of '{p.name}' for client "
                    f"{client.client_id} in round {round_index}, batch {b}")
        client.optimizer.step()
        row = breakdown.as_row()
        rows.append(row)
        correct += int(np.sum(output.logits.data.argmax(axis=1) == labels))
        seen += len(labels)
        logger.debug("client %d round %d batch %d: %s", client.client_id,
                     round_index, b, breakdown)
    return rows, correct, seen


def local_update(client: ClientState, global_state: GlobalState,
                 config: RunConfig, round_index: Optional[int] = None
                 ) -> tuple[RoundPayload, ClientRound]:
    """E passes over the client's sampler, then packs the communicated
    tensors."""
    fed = config.federation
    if round_index is None:
        round_index = global_state.round + 1
    if fed.reset_optimizer:
        client.optimizer.reset()
    reference = global_state if fed.use_prox else None
    rows, correct, seen = [], 0, 0
    for _ in range(fed.local_epochs):
        r, c, s = _train_epoch(client, config, reference, round_index)
        rows.extend(r)
        correct += c
        seen += s
    losses = {k: float(np.mean([row[k] for row in rows])) for k in LOSS_FIELDS}
    client.history.append(losses)

    groups = communicated_groups(fed)
    payload = RoundPayload(
        client_id=client.client_id, round=round_index,
        num_samples=client.num_samples, groups=groups,
        alpha={n: t.data.copy() for n, t in client.params.alpha.items()}
        if "adapters" in groups else {},
        phi={n: client.params.phi[n].data.copy() for n in _phi_names(groups)})
    serialize_payload(payload)
    metrics = ClientRound(client.client_id, losses, correct / seen,
                          adapter_drift=adapter_drift(client.params,
                                                      global_state))
    return payload, metrics


def aggregation_weights(sample_counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ProtocolError(f"invalid sample counts {list(sample_counts)}")
    return counts / counts.sum()


def aggregate(payloads: Sequence[RoundPayload],
              expected_clients: Optional[Iterable[int]] = None,
              allow_partial: bool = False) -> GlobalState:
    """θ^g = Σ_i (|D_i| / Σ_j |D_j|) θ_i, summed in ascending client id.

    Tensors that are bitwise identical across payloads are passed through
    unchanged.
    """
    if not payloads:
        raise ProtocolError("no payloads to aggregate")
    payloads = sorted(payloads, key=lambda p: p.client_id)
    if expected_clients is not None:
        missing = sorted(set(expected_clients) - {p.client_id for p in payloads})
        if missing and not allow_partial:
            raise ProtocolError(f"missing payloads from client(s) {missing}")
        if missing:
            logger.warning("aggregating without client(s) %s, weights "
                           "renormalized over %d payloads", missing,
                           len(payloads))
    first = payloads[0]
    for p in payloads[1:]:
        if p.round != first.round:
            raise ProtocolError(
                f"payload of client {p.client_id} is from round {p.round}, "
                f"expected {first.round}")
        if p.groups != first.groups or list(p.alpha) != list(first.alpha) \
                or list(p.phi) != list(first.phi):
            raise ProtocolError(
                f"payload of client {p.client_id} carries different tensors "
                f"than client {first.client_id}")
        for name, value in p.tensors.items():
            if value.shape != first.tensors[name].shape:
                raise ProtocolError(
                    f"tensor '{name}' of client {p.client_id} has extents "
                    f"{value.shape}, expected {first.tensors[name].shape}")
    weights = aggregation_weights([p.num_samples for p in payloads])

    def _average(group: str) -> dict:
        out = {}
        for name, value in getattr(first, group).items():
            values = [getattr(p, group)[name] for p in payloads]
            if all(np.array_equal(v, value) for v in values[1:]):
                out[name] = value.copy()
                continue
            acc = np.zeros_like(value)
            for w, v in zip(weights, values):
                acc = acc + w * v
            out[name] = acc.astype(value.dtype)
        return out

    return GlobalState(_average("alpha"), _average("phi"), first.round)


@copydoc(accuracy)
def evaluate(params: ParamGroups, config: RunConfig, dataset: SiteDataset
             ) -> float:
    return accuracy(params, config.backbone,
                    np.asarray(dataset.images, dtype=get_dtype()),
                    dataset.labels, config.federation.eval_batch_size)


def initial_params(config: RunConfig, data: FederatedData) -> ParamGroups:
    backbone = config.backbone
    params = init_params(backbone, config.federation.seed)
    if backbone.freeze_mode is FreezeMode.WarmupPretrained \
            and backbone.warmup_steps > 0:
        if data.pretrain is None:
            raise ProtocolError("warm-up pretraining needs a pretraining split")
        images = np.asarray(data.pretrain.images, dtype=get_dtype())
        pretrain_backbone(params, backbone, images, data.pretrain.labels,
                          seed=config.federation.seed,
                          batch_size=config.federation.batch_size)
        if backbone.calibrate_prototypes:
            calibrate_prototypes(params, backbone, images, data.pretrain.labels,
                                 seed=config.federation.seed)
    return params


@dataclass
class RunReport(object):
    output_dir: Optional[Path]
    variant: Variant
    rows: list
    global_state: GlobalState
    clients: list
    payload_bytes: int
    checkpoint_bytes: int
    external: dict = field(default_factory=dict)

    def __repr__(self):
        return "'RunReport: {}, {} rounds, final test acc {}'".format(
            internal.__VariantStr__[self.variant], self.global_state.round,
            [round(a, 4) for a in self.final_test_accuracy()])

    def final_test_accuracy(self) -> list:
        last = max((r["round"] for r in self.rows), default=0)
        return [r["test_acc"] for r in self.rows if r["round"] == last]

    @property
    def payload_ratio(self) -> float:
        return self.payload_bytes / self.checkpoint_bytes


class _CsvLog(object):
    """Row-by-row CSV writer flushed after every round."""

    def __init__(self, path: Optional[Path], header: list):
        self._file = None
        if path is not None:
            self._file = open(path, "w", newline="")
            self._writer = csv.writer(self._file, lineterminator="\n")
            self._writer.writerow(header)

    def write(self, rows: Iterable[list]) -> None:
        if self._file is not None:
            self._writer.writerows([[_fmt(v) for v in row] for row in rows])
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


def _metrics_row(round_index: int, m: ClientRound, payload_bytes: int) -> dict:
    row = {"round": round_index, "client": m.client_id}
    row.update({k: m.losses.get(k) for k in LOSS_FIELDS})
    row.update(train_acc=m.train_acc, val_acc=m.val_acc, test_acc=m.test_acc,
               payload_bytes=payload_bytes)
    return row


def _client_task(client: ClientState, global_state: GlobalState,
                 config: RunConfig, test: SiteDataset, round_index: int):
    def task():
        payload, metrics = local_update(client, global_state, config, round_index)
        metrics.val_acc = evaluate(client.params, config, client.val)
        metrics.test_acc = evaluate(client.params, config, test)
        return payload, metrics
    return task


def run_federation(config: RunConfig, data: FederatedData,
                   output_dir: Union[str, Path, None] = None,
                   initial: Optional[ParamGroups] = None) -> RunReport:
    """Round 0 evaluates the initial model; rounds 1..R broadcast, train
    every client and aggregate. With ``output_dir`` the metrics, alignment,
    external evaluation, checkpoints and resolved config are written there.
    """
    config.validate()
    set_precision(config.run.precision)
    fed = config.federation
    if len(data.train) != fed.num_clients:
        raise ProtocolError(f"{fed.num_clients} clients configured, "
                            f"{len(data.train)} training sites given")
    out = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / CONFIG_NAME)

    params0 = initial if initial is not None else initial_params(config, data)
    clients = [make_client(i + 1, t, v, params0, config)
               for i, (t, v) in enumerate(zip(data.train, data.val))]
    groups = communicated_groups(fed)
    global_state = global_from_params(params0, groups)
    variant = config.run.variant
    rows = []
    payload_bytes = 0

    metrics_log = _CsvLog(out / METRICS_NAME if out else None, METRICS_HEADER)
    align_log = _CsvLog(out / ALIGNMENT_NAME if out else None,
                        ["round", "client", "adapter_drift"])
    try:
        for client in clients:
            m = ClientRound(client.client_id, {}, evaluate(client.params, config,
                                                           client.train),
                            evaluate(client.params, config, client.val),
                            evaluate(client.params, config, data.test))
            rows.append(_metrics_row(0, m, 0))
        metrics_log.write([[r[k] for k in METRICS_HEADER] for r in rows])
        logger.info("round 0: mean test acc %.4f",
                    np.mean([r["test_acc"] for r in rows]))

        with Worker(WorkerSettings(config.worker.workers)) as worker:
            for rnd in range(1, fed.rounds + 1):
                broadcast(global_state, clients)
                results = worker.map(
                    (c.client_id, _client_task(c, global_state, config,
                                               data.test, rnd))
                    for c in clients)
                payloads = [r.value[0] for r in results]
                round_rows = []
                for payload, metrics in (r.value for r in results):
                    round_rows.append(_metrics_row(rnd, metrics,
                                                   payload.byte_length))
                    if fed.dump_payloads and out is not None:
                        path = out / PAYLOAD_DIR / \
                            f"round{rnd:03d}_client{payload.client_id}.bin"
                        path.parent.mkdir(parents=True, exist_ok=True)
                        path.write_bytes(serialize_payload(payload))
                rows.extend(round_rows)
                metrics_log.write([[r[k] for k in METRICS_HEADER]
                                   for r in round_rows])
                align_log.write([[rnd, m.client_id, m.adapter_drift]
                                 for _, m in (r.value for r in results)])
                payload_bytes = max(p.byte_length for p in payloads)
                global_state = aggregate(payloads, [c.client_id for c in clients],
                                         fed.allow_partial)
                global_state.round = rnd
                logger.info(
                    "round %d: mean loss %.4f, mean val acc %.4f, mean test "
                    "acc %.4f", rnd,
                    np.mean([r["total"] for r in round_rows]),
                    np.mean([r["val_acc"] for r in round_rows]),
                    np.mean([r["test_acc"] for r in round_rows]))
    finally:
        metrics_log.close()
        align_log.close()

    external = {}
    if data.external is not None:
        external = {c.client_id: evaluate(c.params, config, data.external)
                    for c in clients}
        if out is not None:
            with open(out / EXTERNAL_NAME, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["client", "accuracy"])
                writer.writerows([[i, _fmt(a)] for i, a in external.items()])

    global_params = global_model(params0, global_state)
    if out is not None:
        save_params(global_params, out / CHECKPOINT_DIR / GLOBAL_CHECKPOINT)
        for c in clients:
            save_params(c.params, out / CHECKPOINT_DIR / f"client{c.client_id}.ckpt")
    if payload_bytes == 0:
        empty = RoundPayload(0, 0, 1, groups, alpha=global_state.alpha,
                             phi=global_state.phi)
        payload_bytes = len(serialize_payload(empty))
    return RunReport(out, variant, rows, global_state, clients, payload_bytes,
                     checkpoint_size(global_params), external)


def global_model(initial: ParamGroups, global_state: GlobalState) -> ParamGroups:
    """The initial model with the global groups laid over it."""
    params = initial.copy()
    for name, value in global_state.alpha.items():
        params.alpha[name].data = value.copy()
    for name, value in global_state.phi.items():
        params.phi[name].data = value.copy()
    return params


def train_centralized(config: RunConfig, train: SiteDataset, val: SiteDataset,
                      epochs: int, initial: ParamGroups) -> ParamGroups:
    """Plain local training of one client for ``epochs`` epochs, with the
    same sampler and optimizer streams client 1 uses in a federated run."""
    set_precision(config.run.precision)
    client = make_client(1, train, val, initial, config)
    for epoch in range(epochs):
        _train_epoch(client, config, None, epoch + 1)
    return client.params


@dataclass
class ComparisonRow(object):
    variant: str
    accuracies: list
    payload_bytes: int
    checkpoint_bytes: int

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def payload_ratio(self) -> float:
        if self.checkpoint_bytes == 0:
            return float("nan")
        return self.payload_bytes / self.checkpoint_bytes


def compare_variants(config: RunConfig, data: FederatedData,
                     variants: Sequence[Variant] = DEFAULT_VARIANT_GRID,
                     output_dir: Union[str, Path, None] = None) -> list:
    """Runs every variant from the same initial model and partitions."""
    if not variants:
        raise ProtocolError("no variants to compare")
    set_precision(config.run.precision)
    initial = initial_params(config, data)
    table = []
    for variant in variants:
        name = internal.__VariantStr__[variant]
        logger.info("running variant %s", name)
        run_dir = None if output_dir is None else Path(output_dir) / name
        report = run_federation(config.with_variant(variant), data, run_dir,
                                initial=initial)
        table.append(ComparisonRow(name, report.final_test_accuracy(),
                                   report.payload_bytes, report.checkpoint_bytes))
    if output_dir is not None:
        write_comparison(table, Path(output_dir) / "comparison.csv")
    return table


def write_comparison(table: Sequence[ComparisonRow], path: Union[str, Path]
                     ) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = max(len(r.accuracies) for r in table)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant"] + [f"client{i + 1}" for i in range(width)]
                        + ["avg", "payload_bytes", "checkpoint_bytes",
                           "payload_ratio"])
        for r in table:
            writer.writerow([r.variant] + [_fmt(a) for a in r.accuracies]
                            + [_fmt(r.average), r.payload_bytes,
                               r.checkpoint_bytes, _fmt(r.payload_ratio)])
    return path


def load_run_summary(run_dir: Union[str, Path]) -> ComparisonRow:
    """Final-round accuracies and byte counts of a finished run directory."""
    run_dir = Path(run_dir)
    metrics = run_dir / METRICS_NAME
    if not metrics.exists():
        raise FileNotFoundError(f"run {run_dir} has no {METRICS_NAME}")
    with open(metrics, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ProtocolError(f"{metrics} has no rows")
    last = max(int(r["round"]) for r in rows)
    final = sorted((r for r in rows if int(r["round"]) == last),
                   key=lambda r: int(r["client"]))
    config = RunConfig.load(run_dir / CONFIG_NAME) \
        if (run_dir / CONFIG_NAME).exists() else RunConfig()
    checkpoint = run_dir / CHECKPOINT_DIR / GLOBAL_CHECKPOINT
    checkpoint_bytes = checkpoint.stat().st_size if checkpoint.exists() else 0
    payload_bytes = max(int(r["payload_bytes"]) for r in final)
    if payload_bytes == 0 and checkpoint.exists():
        params = load_params(checkpoint, config.backbone)
        state = global_from_params(params, communicated_groups(config.federation))
        payload_bytes = len(serialize_payload(RoundPayload(
            0, 0, 1, communicated_groups(config.federation),
            alpha=state.alpha, phi=state.phi)))
    return ComparisonRow(internal.__VariantStr__[config.run.variant],
                         [float(r["test_acc"]) for r in final], payload_bytes,
                         checkpoint_bytes)
