"""In-process simulation of a server and K institutions.

Every cross-party transfer is materialised as a :class:`Message` so the
byte cost of each strategy can be accounted from the logs.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import nn
from .data import LabeledDataset
from .metrics import evaluate
from .nn import ModelGraph, OptimizerState, ParamSet

PARALLEL_KINDS = ("fedavg", "fedsgd", "fedavgm", "fedprox", "fedavg_share")
SERIAL_KINDS = ("cwt", "splitnn")
REPLAY_KINDS = ("cwt_replay", "fedreplay")
STRATEGY_KINDS = PARALLEL_KINDS + SERIAL_KINDS + REPLAY_KINDS + ("central",)

SERVER = -1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedavg"
    rounds: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.0
    lr_decay_interval: int = 0
    lr_decay_scale: float = 0.1
    participation: float = 1.0
    local_epochs: int = 1
    mu: float = 0.0
    server_momentum: float = 0.0
    share_fraction: float = 0.05
    cut_index: Optional[int] = None

    def validate(self, model: Optional[ModelGraph] = None) -> "StrategyConfig":
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in nn.OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.participation != 1.0:
            raise ConfigError("only full participation (1.0) is supported")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.kind == "fedprox" and self.mu < 0:
            raise ConfigError("fedprox needs mu >= 0")
        if self.kind == "fedavgm" and not 0 <= self.server_momentum < 1:
            raise ConfigError("fedavgm needs 0 <= server_momentum < 1")
        if self.kind == "fedavg_share" and not 0 < self.share_fraction < 1:
            raise ConfigError("fedavg_share needs 0 < share_fraction < 1")
        if self.kind == "splitnn":
            if self.cut_index is None:
                raise ConfigError("splitnn needs cut_index")
            if model is not None:
                try:
                    nn.split_at_cut_layer(model, self.cut_index)
                except nn.SplitError as exc:
                    raise ConfigError(str(exc)) from None
        return self


def make_optimizer(cfg: StrategyConfig, params: ParamSet, epoch: int = 0) -> OptimizerState:
    kwargs = dict(epoch=epoch, decay_interval=cfg.lr_decay_interval, decay_scale=cfg.lr_decay_scale)
    if cfg.optimizer == "sgd_momentum":
        kwargs["momentum"] = cfg.momentum
    return nn.init_optimizer(cfg.optimizer, params, cfg.learning_rate, **kwargs)


# ---------------------------------------------------------------------------
# messages

MESSAGE_KINDS = ("weights", "gradients", "activations", "activation_grads", "latents")


@dataclass(frozen=True)
class Message:
    kind: str
    payload: bytes
    source: int
    destination: int
    round: int

    def to_bytes(self) -> bytes:
        return struct.pack("<BI", MESSAGE_KINDS.index(self.kind), self.round) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, source: int = SERVER, destination: int = SERVER) -> "Message":
        if len(data) < 5:
            raise ValueError("message shorter than its 5-byte header")
        tag, rnd = struct.unpack("<BI", data[:5])
        if tag >= len(MESSAGE_KINDS):
            raise ValueError(f"unknown message kind tag {tag}")
        return cls(MESSAGE_KINDS[tag], data[5:], source, destination, rnd)

    @property
    def size(self) -> int:
        return 5 + len(self.payload)

    def tensors(self) -> ParamSet:
        return nn.params_from_bytes(self.payload)


def send(kind: str, tensors: ParamSet, source: int, destination: int, rnd: int) -> Message:
    return Message(kind, nn.params_to_bytes(tensors), source, destination, rnd)


def receive(msg: Message) -> ParamSet:
    # decode through the wire format so nothing bypasses serialization
    return Message.from_bytes(msg.to_bytes(), msg.source, msg.destination).tensors()


# ---------------------------------------------------------------------------
# logs

LOG_COLUMNS = ("round", "institution", "phase", "loss", "metric", "bytes_sent", "seed")


@dataclass(frozen=True)
class LogRecord:
    round: int
    institution: int
    phase: str
    loss: float = float("nan")
    metric: float = float("nan")
    bytes_sent: int = 0
    seed: int = 0
    wall_time: float = 0.0


@dataclass
class TrainingLog:
    records: List[LogRecord] = field(default_factory=list)

    def append(self, record: LogRecord) -> None:
        if self.records and record.round < self.records[-1].round:
            raise ValueError("log rounds must be non-decreasing")
        self.records.append(record)

    def extend(self, other: "TrainingLog") -> None:
        for r in other.records:
            self.append(r)

    def total_bytes(self, phase: Optional[str] = None) -> int:
        return sum(r.bytes_sent for r in self.records if phase is None or r.phase == phase)

    def final_metric(self) -> float:
        evals = [r.metric for r in self.records if r.phase == "eval"]
        return evals[-1] if evals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.round, r.institution, r.phase, _fmt(r.loss), _fmt(r.metric), r.bytes_sent, r.seed])
        return buf.getvalue()


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


# ---------------------------------------------------------------------------
# parties


@dataclass
class InstitutionNode:
    k: int
    data: LabeledDataset
    indices: Tuple[int, ...]
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass
class CentralServer:
    params: ParamSet
    momentum: Optional[ParamSet] = None
    round: int = 0


def make_nodes(ds: LabeledDataset, assignments: Sequence[Sequence[int]], seed: int) -> List[InstitutionNode]:
    return [InstitutionNode(k, ds.subset(a), tuple(a), seed) for k, a in enumerate(assignments)]


def batch_order(seed: int, k: int, rnd: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle of local indices, seeded by (experiment seed, institution, round, epoch)."""
    return np.random.default_rng([seed, k + 1, rnd, epoch]).permutation(n)


def minibatches(node: InstitutionNode, batch_size: int, iters: int, rnd: int):
    """Yield ``iters`` (images, labels) minibatches, reshuffling every local epoch."""
    n = node.size
    per_epoch = max(n // batch_size, 1)
    size = min(batch_size, n)
    for it in range(iters):
        epoch, pos = divmod(it, per_epoch)
        if pos == 0:
            order = torch.from_numpy(batch_order(node.seed, node.k, rnd, epoch, n))
        idx = order[pos * size:(pos + 1) * size]
        yield node.data.images[idx], node.data.labels[idx]


def local_iters(node: InstitutionNode, cfg: StrategyConfig) -> int:
    """floor(|D_k| / b) per local epoch (at least one step)."""
    return max(node.size // cfg.batch_size, 1) * cfg.local_epochs


def local_train(
    node: InstitutionNode,
    model: ModelGraph,
    global_params: ParamSet,
    iters: int,
    cfg: StrategyConfig,
    rnd: int = 0,
    prox: Optional[Tuple[float, ParamSet]] = None,
    opt: Optional[OptimizerState] = None,
) -> Tuple[ParamSet, int, TrainingLog, OptimizerState]:
    """Run ``iters`` minibatch steps from ``global_params`` on the node's data.

    With ``prox=(mu, anchor)`` the step uses ``grad + mu * (theta - anchor)``.
    """
    if node.size == 0:
        raise ValueError(f"institution {node.k} has no local data")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if prox is not None:
        mu, anchor = prox
        if mu < 0:
            raise ValueError("mu must be >= 0")
        nn.check_compatible(global_params, anchor, "params and proximal anchor")
    params = nn.clone_params(global_params)
    if opt is None:
        opt = make_optimizer(cfg, params, epoch=rnd)
    losses = []
    for step, (x, y) in enumerate(minibatches(node, cfg.batch_size, iters, rnd)):
        loss, grads = nn.loss_and_grad(model, params, x, y, batch_id=(node.k, rnd, step))
        if prox is not None:
            grads = {n: grads[n] + mu * (params[n] - anchor[n]) for n in grads}
        opt, params = nn.optimizer_step(opt, params, grads)
        losses.append(loss)
    log = TrainingLog()
    log.append(LogRecord(rnd, node.k, "local", float(np.mean(losses)), seed=node.seed))
    return params, node.size, log, opt


def aggregate_weighted_mean(updates: Sequence[Tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted mean, accumulated in float64."""
    if not updates:
        raise ValueError("need at least one update")
    first = updates[0][0]
    for p, _ in updates[1:]:
        nn.check_compatible(first, p, "updates")
    total = sum(c for _, c in updates)
    if total <= 0:
        raise ValueError("sample counts must sum to a positive number")
    out = {}
    for name in first:
        acc = torch.zeros_like(first[name], dtype=torch.float64)
        # fixed summation order (sorted by bytes) makes the mean permutation-invariant
        terms = sorted(
            ((p[name].to(torch.float64), c) for p, c in updates),
            key=lambda t: (t[1], t[0].numpy().tobytes()),
        )
        for tensor, c in terms:
            acc += tensor * (c / total)
        out[name] = acc.to(first[name].dtype)
    return out


def server_momentum_update(server: CentralServer, averaged: ParamSet, beta: float) -> CentralServer:
    """delta = w - avg; v = beta * v + delta; w = w - v (float64 arithmetic)."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    nn.check_compatible(server.params, averaged, "global and averaged weights")
    v_old = server.momentum or {n: torch.zeros_like(t, dtype=torch.float64) for n, t in server.params.items()}
    new_w, new_v = {}, {}
    for n, w in server.params.items():
        w64 = w.to(torch.float64)
        delta = w64 - averaged[n].to(torch.float64)
        v = beta * v_old[n] + delta
        new_v[n] = v
        new_w[n] = (w64 - v).to(w.dtype)
    return replace(server, params=new_w, momentum=new_v)


def _eval_record(rnd, model, params, eval_ds, seed) -> Optional[LogRecord]:
    if eval_ds is None:
        return None
    return LogRecord(rnd, SERVER, "eval", metric=evaluate(model, params, eval_ds), seed=seed)


def run_parallel_round(
    server: CentralServer,
    nodes: Sequence[InstitutionNode],
    model: ModelGraph,
    cfg: StrategyConfig,
    eval_ds: Optional[LabeledDataset] = None,
    seed: int = 0,
) -> Tuple[CentralServer, TrainingLog]:
    if cfg.kind not in PARALLEL_KINDS:
        raise ConfigError(f"{cfg.kind!r} is not a parallel strategy")
    cfg.validate(model)
    rnd = server.round
    log = TrainingLog()
    updates = []
    for node in nodes:
        down = send("weights", server.params, SERVER, node.k, rnd)
        log.append(LogRecord(rnd, SERVER, "broadcast", bytes_sent=down.size, seed=seed))
        local = receive(down)
        if cfg.kind == "fedsgd":
            loss, grads = nn.loss_and_grad(model, local, node.data.images, node.data.labels, batch_id=(node.k, rnd))
            up = send("gradients", grads, node.k, SERVER, rnd)
            log.append(LogRecord(rnd, node.k, "local", loss, bytes_sent=up.size, seed=seed))
        else:
            prox = (cfg.mu, local) if cfg.kind == "fedprox" else None
            params, _, local_log, _ = local_train(node, model, local, local_iters(node, cfg), cfg, rnd, prox)
            up = send("weights", params, node.k, SERVER, rnd)
            rec = local_log.records[-1]
            log.append(replace(rec, bytes_sent=up.size, seed=seed))
        updates.append((receive(up), node.size))
    # barrier: aggregation only after every institution reported
    averaged = aggregate_weighted_mean(updates)
    if cfg.kind == "fedsgd":
        opt = make_optimizer(replace(cfg, optimizer="sgd"), server.params, epoch=rnd)
        _, new_params = nn.optimizer_step(opt, server.params, averaged)
        server = replace(server, params=new_params)
    elif cfg.kind == "fedavgm":
        server = server_momentum_update(server, averaged, cfg.server_momentum)
    else:
        server = replace(server, params=averaged)
    server = replace(server, round=rnd + 1)
    rec = _eval_record(rnd, model, server.params, eval_ds, seed)
    if rec:
        log.append(rec)
    return server, log


def run_cwt_cycle(
    server: CentralServer,
    nodes: Sequence[InstitutionNode],
    model: ModelGraph,
    cfg: StrategyConfig,
    eval_ds: Optional[LabeledDataset] = None,
    seed: int = 0,
    replay=None,
) -> Tuple[CentralServer, TrainingLog, List[ParamSet]]:
    """One cycle of cyclical weight transfer: institution 1, 2, ..., K in order.

    Returns the K per-institution checkpoints alongside the server/log.
    ``replay`` (a callable ``(x, y, rnd, k, step) -> (x, y)``) lets the
    replay strategy widen every local batch; plain CWT leaves it ``None``.
    """
    if cfg.kind not in ("cwt", "cwt_replay", "central"):
        raise ConfigError(f"{cfg.kind!r} is not a cyclical strategy")
    rnd = server.round
    log = TrainingLog()
    msg = send("weights", server.params, SERVER, nodes[0].k, rnd)
    checkpoints = []
    for node in nodes:
        if node.size == 0:
            raise ValueError(f"institution {node.k} has no local data")
        log.append(LogRecord(rnd, msg.source, "transfer", bytes_sent=msg.size, seed=seed))
        params = receive(msg)
        opt = make_optimizer(cfg, params, epoch=rnd)
        losses = []
        for step, (x, y) in enumerate(minibatches(node, cfg.batch_size, local_iters(node, cfg), rnd)):
            if replay is not None:
                x, y = replay(x, y, rnd, node.k, step)
            loss, grads = nn.loss_and_grad(model, params, x, y, batch_id=(node.k, rnd, step))
            opt, params = nn.optimizer_step(opt, params, grads)
            losses.append(loss)
        log.append(LogRecord(rnd, node.k, "local", float(np.mean(losses)), seed=seed))
        checkpoints.append(nn.clone_params(params))
        msg = send("weights", params, node.k, SERVER if node is nodes[-1] else node.k + 1, rnd)
    log.append(LogRecord(rnd, msg.source, "transfer", bytes_sent=msg.size, seed=seed))
    server = replace(server, params=receive(msg), round=rnd + 1)
    rec = _eval_record(rnd, model, server.params, eval_ds, seed)
    if rec:
        log.append(rec)
    return server, log, checkpoints


@dataclass
class SplitServer(CentralServer):
    """Central server for split learning: also owns the tail weights."""

    tail_params: ParamSet = field(default_factory=dict)
    tail_opt: Optional[OptimizerState] = None


def run_splitnn_cycle(
    server: SplitServer,
    nodes: Sequence[InstitutionNode],
    model: ModelGraph,
    cfg: StrategyConfig,
    eval_ds: Optional[LabeledDataset] = None,
    seed: int = 0,
) -> Tuple[SplitServer, TrainingLog]:
    """Peer-to-peer split learning cycle.

    ``server.params`` holds the head weights between institution visits;
    the tail stays on the server throughout.
    """
    if cfg.kind != "splitnn":
        raise ConfigError(f"{cfg.kind!r} is not splitnn")
    cfg.validate(model)
    split = nn.split_at_cut_layer(model, cfg.cut_index)
    rnd = server.round
    log = TrainingLog()
    tail_params = server.tail_params
    tail_opt = server.tail_opt or make_optimizer(cfg, tail_params, epoch=rnd)
    tail_opt = replace(tail_opt, epoch=rnd)
    msg = send("weights", server.params, SERVER, nodes[0].k, rnd)
    for node in nodes:
        log.append(LogRecord(rnd, msg.source, "transfer", bytes_sent=msg.size, seed=seed))
        head_params = receive(msg)
        head_opt = make_optimizer(cfg, head_params, epoch=rnd)
        losses, act_bytes, grad_bytes = [], 0, 0
        for step, (x, y) in enumerate(minibatches(node, cfg.batch_size, local_iters(node, cfg), rnd)):
            with torch.no_grad():
                acts = nn.forward(split.head, head_params, x)
            up = send("activations", {"activations": acts, "targets": y.to(torch.float32)}, node.k, SERVER, rnd)
            act_bytes += up.size
            received = receive(up)
            loss, tail_grads, act_grad = nn.loss_grad_and_input_grad(
                split.tail, tail_params, received["activations"], received["targets"].to(y.dtype),
                batch_id=(node.k, rnd, step),
            )
            tail_opt, tail_params = nn.optimizer_step(tail_opt, tail_params, tail_grads)
            down = send("activation_grads", {"grad": act_grad}, SERVER, node.k, rnd)
            grad_bytes += down.size
            head_grads, _ = nn.backward_from(split.head, head_params, x, receive(down)["grad"])
            head_opt, head_params = nn.optimizer_step(head_opt, head_params, head_grads)
            losses.append(loss)
        log.append(LogRecord(rnd, node.k, "local", float(np.mean(losses)), bytes_sent=act_bytes, seed=seed))
        log.append(LogRecord(rnd, SERVER, "activation_grads", bytes_sent=grad_bytes, seed=seed))
        msg = send("weights", head_params, node.k, SERVER if node is nodes[-1] else node.k + 1, rnd)
    log.append(LogRecord(rnd, msg.source, "transfer", bytes_sent=msg.size, seed=seed))
    server = replace(server, params=receive(msg), tail_params=tail_params, tail_opt=tail_opt, round=rnd + 1)
    rec = _eval_record(rnd, model, {**server.params, **server.tail_params}, eval_ds, seed)
    if rec:
        log.append(rec)
    return server, log


def splitnn_gradients(
    model: ModelGraph, params: ParamSet, cut_index: int, x: torch.Tensor, y: torch.Tensor
) -> Tuple[float, ParamSet]:
    """Gradients obtained by passing activations/gradients across the cut as messages."""
    split = nn.split_at_cut_layer(model, cut_index)
    head = nn.subset_params(split.head, params)
    tail = nn.subset_params(split.tail, params)
    acts = receive(send("activations", {"a": nn.forward(split.head, head, x).detach()}, 0, SERVER, 0))["a"]
    loss, tail_grads, act_grad = nn.loss_grad_and_input_grad(split.tail, tail, acts, y)
    back = receive(send("activation_grads", {"g": act_grad}, SERVER, 0, 0))["g"]
    head_grads, _ = nn.backward_from(split.head, head, x, back)
    return loss, {**head_grads, **tail_grads}
