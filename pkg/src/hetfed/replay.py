"""Generative replay: the two-level quantized autoencoder, CWT+Replay and FedReplay.

CWT+Replay trains the autoencoder serially across institutions, keeps a
buffer of discrete latent codes (with labels) and mixes decoded replay
images into every local classifier batch.  FedReplay freezes the head of a
task network trained at one institution, ships each institution's
continuous head features to the server exactly once, and trains the tail
there.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .data import LabeledDataset
from .federation import (
    SERVER,
    CentralServer,
    InstitutionNode,
    LogRecord,
    Message,
    StrategyConfig,
    TrainingLog,
    batch_order,
    local_train,
    run_cwt_cycle,
)
from .metrics import evaluate
from .nn import Conv2d, ModelGraph, OptimizerState, ParamSet, ReLU, Upsample

# ---------------------------------------------------------------------------
# quantizer


def quantize_nearest(h: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Map every vector along the last dim of ``h`` to its nearest codebook row.

    Ties go to the lowest index.  Returns ``(indices, quantized)``; no
    gradient flows through ``quantized`` (see :func:`straight_through`).
    """
    if codebook.dim() != 2 or codebook.shape[0] < 2:
        raise ValueError("codebook must be an (M >= 2, d) matrix")
    if h.shape[-1] != codebook.shape[1]:
        raise ValueError(f"last dim {h.shape[-1]} does not match codebook dim {codebook.shape[1]}")
    flat = h.detach().reshape(-1, 1, h.shape[-1])
    dist = ((flat - codebook.detach()[None]) ** 2).sum(-1)
    # argmin returns the first minimal index
    idx = dist.argmin(dim=1).reshape(h.shape[:-1])
    return idx, codebook.detach()[idx]


def straight_through(h: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    return h + (quantized - h).detach()


def _quantize_map(h: torch.Tensor, codebook: torch.Tensor):
    """(B, d, H, W) feature map -> (indices (B, H, W), codes (B, d, H, W) with codebook grad)."""
    idx, _ = quantize_nearest(h.permute(0, 2, 3, 1), codebook)
    codes = F.embedding(idx, codebook).permute(0, 3, 1, 2)
    return idx, codes


# ---------------------------------------------------------------------------
# autoencoder


@dataclass(frozen=True)
class QuantizedAutoencoder:
    enc_bottom: ModelGraph   # x -> bottom features (hidden, s/4, s/4)
    enc_top: ModelGraph      # bottom features -> top pre-codes (d, s/8, s/8)
    cond_bottom: ModelGraph  # [bottom features, upsampled top code] -> bottom pre-codes (d, s/4, s/4)
    decoder: ModelGraph      # [upsampled top code, bottom code] -> image
    params: ParamSet
    commitment: float = 0.25

    @property
    def input_shape(self):
        return self.enc_bottom.input_shape

    @property
    def codebook_top(self) -> torch.Tensor:
        return self.params["codebook_top"]

    @property
    def codebook_bottom(self) -> torch.Tensor:
        return self.params["codebook_bottom"]

    def part(self, name: str, params: Optional[ParamSet] = None) -> ParamSet:
        params = self.params if params is None else params
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def build_autoencoder(
    input_shape: Sequence[int],
    hidden: int = 16,
    embed_dim: int = 8,
    codebook_size: int = 32,
    commitment: float = 0.25,
    seed: int = 0,
) -> QuantizedAutoencoder:
    """Two-level quantized autoencoder; top grid is input/8, bottom grid input/4."""
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ValueError("image height and width must be divisible by 8")
    if codebook_size < 2:
        raise ValueError("codebook_size must be >= 2")
    d = embed_dim
    enc_bottom = ModelGraph(
        (Conv2d(c, hidden, 4, 2, 1), ReLU(), Conv2d(hidden, hidden, 4, 2, 1), ReLU()),
        (c, h, w), "mse", "features",
    )
    enc_top = ModelGraph(
        (Conv2d(hidden, hidden, 4, 2, 1), ReLU(), Conv2d(hidden, d, 1, 1, 0)),
        (hidden, h // 4, w // 4), "mse", "features",
    )
    cond_bottom = ModelGraph((Conv2d(hidden + d, d, 1, 1, 0),), (hidden + d, h // 4, w // 4), "mse", "features")
    decoder = ModelGraph(
        (
            Conv2d(2 * d, hidden, 3, 1, 1), ReLU(), Upsample(2),
            Conv2d(hidden, hidden, 3, 1, 1), ReLU(), Upsample(2),
            Conv2d(hidden, c, 3, 1, 1),
        ),
        (2 * d, h // 4, w // 4), "mse", "features",
    )
    params: ParamSet = {}
    for i, (name, graph) in enumerate(
        (("enc_bottom", enc_bottom), ("enc_top", enc_top), ("cond_bottom", cond_bottom), ("decoder", decoder))
    ):
        for k, v in nn.init_params(graph, seed * 16 + i).items():
            params[f"{name}.{k}"] = v
    gen = torch.Generator().manual_seed(seed * 16 + 5)
    params["codebook_top"] = (torch.rand((codebook_size, d), generator=gen) * 2 - 1) / codebook_size
    params["codebook_bottom"] = (torch.rand((codebook_size, d), generator=gen) * 2 - 1) / codebook_size
    return QuantizedAutoencoder(enc_bottom, enc_top, cond_bottom, decoder, params, commitment)


@dataclass
class _Pass:
    idx_top: torch.Tensor
    idx_bottom: torch.Tensor
    h_top: torch.Tensor
    h_bottom: torch.Tensor
    q_top: torch.Tensor
    q_bottom: torch.Tensor
    recon: torch.Tensor


# images live in [0, 1]; the networks see them centred
OFFSET = 0.5


def _features(ae, params, x):
    return nn.forward(ae.enc_bottom, ae.part("enc_bottom", params), x - OFFSET)


def _run(ae: QuantizedAutoencoder, params: ParamSet, x: torch.Tensor) -> _Pass:
    feat = _features(ae, params, x)
    h_top = nn.forward(ae.enc_top, ae.part("enc_top", params), feat)
    idx_top, q_top = _quantize_map(h_top, params["codebook_top"])
    top_up = F.interpolate(straight_through(h_top, q_top), scale_factor=2, mode="nearest")
    h_bottom = nn.forward(ae.cond_bottom, ae.part("cond_bottom", params), torch.cat([feat, top_up], 1))
    idx_bottom, q_bottom = _quantize_map(h_bottom, params["codebook_bottom"])
    recon = _decode(ae, params, straight_through(h_top, q_top), straight_through(h_bottom, q_bottom))
    return _Pass(idx_top, idx_bottom, h_top, h_bottom, q_top, q_bottom, recon)


def _decode(ae, params, top, bottom):
    top_up = F.interpolate(top, scale_factor=2, mode="nearest")
    return nn.forward(ae.decoder, ae.part("decoder", params), torch.cat([top_up, bottom], 1)) + OFFSET


def init_codebooks_from_data(ae: QuantizedAutoencoder, images: torch.Tensor, seed: int = 0) -> QuantizedAutoencoder:
    """Seed both codebooks with encoder outputs at randomly chosen grid positions.

    Uniform random codebooks tend to collapse onto a single code; starting
    from actual encoder outputs keeps every code reachable.
    """
    rng = np.random.default_rng([seed, 0xC0DE])
    params = dict(ae.params)
    with torch.no_grad():
        feat = _features(ae, ae.params, images)
        h_top = nn.forward(ae.enc_top, ae.part("enc_top"), feat)
        top_vecs = h_top.permute(0, 2, 3, 1).reshape(-1, h_top.shape[1])
        params["codebook_top"] = _pick_rows(top_vecs, ae.codebook_top.shape[0], rng)
        _, q_top = _quantize_map(h_top, params["codebook_top"])
        top_up = F.interpolate(q_top, scale_factor=2, mode="nearest")
        h_bottom = nn.forward(ae.cond_bottom, ae.part("cond_bottom"), torch.cat([feat, top_up], 1))
        bottom_vecs = h_bottom.permute(0, 2, 3, 1).reshape(-1, h_bottom.shape[1])
        params["codebook_bottom"] = _pick_rows(bottom_vecs, ae.codebook_bottom.shape[0], rng)
    return replace(ae, params=params)


def _pick_rows(vectors: torch.Tensor, m: int, rng: np.random.Generator) -> torch.Tensor:
    pick = rng.choice(vectors.shape[0], size=m, replace=vectors.shape[0] < m)
    return vectors[torch.from_numpy(pick)].clone().contiguous()


def encode_indices(ae: QuantizedAutoencoder, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        out = _run(ae, ae.params, x)
    return out.idx_top, out.idx_bottom


def decode_indices(ae: QuantizedAutoencoder, idx_top: torch.Tensor, idx_bottom: torch.Tensor) -> torch.Tensor:
    m = ae.codebook_top.shape[0]
    if idx_top.numel() and (int(idx_top.min()) < 0 or int(idx_top.max()) >= m):
        raise ValueError("top indices out of codebook range")
    if idx_bottom.numel() and (int(idx_bottom.min()) < 0 or int(idx_bottom.max()) >= ae.codebook_bottom.shape[0]):
        raise ValueError("bottom indices out of codebook range")
    with torch.no_grad():
        top = F.embedding(idx_top, ae.codebook_top).permute(0, 3, 1, 2)
        bottom = F.embedding(idx_bottom, ae.codebook_bottom).permute(0, 3, 1, 2)
        return _decode(ae, ae.params, top, bottom)


def reconstruct(ae: QuantizedAutoencoder, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return _run(ae, ae.params, x).recon


def generator_losses(ae: QuantizedAutoencoder, params: ParamSet, x: torch.Tensor):
    """(total, reconstruction) for the standard quantized-autoencoder objective.

    total = mse(x, D(e)) + sum over levels of
            mse(sg[h], e) + commitment * mse(h, sg[e])
    """
    out = _run(ae, params, x)
    recon = F.mse_loss(out.recon, x)
    total = recon
    for h, q in ((out.h_top, out.q_top), (out.h_bottom, out.q_bottom)):
        total = total + F.mse_loss(q, h.detach()) + ae.commitment * F.mse_loss(h, q.detach())
    return total, recon


def generator_loss_and_step(
    ae: QuantizedAutoencoder,
    batch: torch.Tensor,
    opt: OptimizerState,
    batch_id=None,
) -> Tuple[float, QuantizedAutoencoder, OptimizerState]:
    if tuple(batch.shape[1:]) != ae.input_shape:
        raise nn.ShapeError(f"batch per-sample shape {tuple(batch.shape[1:])} != {ae.input_shape}")
    leaves = {k: v.detach().requires_grad_(True) for k, v in ae.params.items()}
    with torch.enable_grad():
        total, _ = generator_losses(ae, leaves, batch)
        value = float(total.detach())
        if not np.isfinite(value):
            raise nn.NonFiniteLossError(value, batch_id)
        names = list(leaves)
        grads = torch.autograd.grad(total, [leaves[n] for n in names], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(leaves[n])) for n, g in zip(names, grads)}
    opt, new = nn.optimizer_step(opt, ae.params, grads)
    return value, replace(ae, params=new), opt


def reconstruction_mse(ae: QuantizedAutoencoder, x: torch.Tensor) -> float:
    return float(F.mse_loss(reconstruct(ae, x), x))


# ---------------------------------------------------------------------------
# latent records

LATENT_MAGIC = b"HFLT"
LATENT_VERSION = 1
DISCRETE, CONTINUOUS = 0, 1


@dataclass(frozen=True)
class LatentRecord:
    label: object  # int class or float target
    origin: int
    e_top: Optional[torch.Tensor] = None     # int64 index grid
    e_bottom: Optional[torch.Tensor] = None  # int64 index grid
    features: Optional[torch.Tensor] = None  # float32 feature map

    def __post_init__(self):
        discrete = self.e_top is not None and self.e_bottom is not None
        if discrete == (self.features is not None):
            raise ValueError("a record holds either two index grids or one feature map")

    @property
    def kind(self) -> int:
        return CONTINUOUS if self.features is not None else DISCRETE

    def body_bytes(self) -> bytes:
        """Serialized latent payload (origin excluded), used for canonical ordering."""
        buf = io.BytesIO()
        _write_record_body(buf, self)
        return buf.getvalue()


def _write_grid(buf, t: torch.Tensor, dtype: str) -> None:
    shape = tuple(t.shape)
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(t.detach().contiguous().numpy().astype(dtype).tobytes())


def _write_record_body(buf, rec: LatentRecord) -> None:
    buf.write(struct.pack("<B", rec.kind))
    if rec.kind == DISCRETE:
        if int(rec.e_top.max()) > 0xFFFF or int(rec.e_bottom.max()) > 0xFFFF:
            raise ValueError("indices do not fit u16")
        _write_grid(buf, rec.e_top, "<u2")
        _write_grid(buf, rec.e_bottom, "<u2")
    else:
        _write_grid(buf, rec.features, "<f4")


def records_to_bytes(records: Sequence[LatentRecord], regression: bool = False) -> bytes:
    buf = io.BytesIO()
    buf.write(LATENT_MAGIC)
    buf.write(struct.pack("<HIB", LATENT_VERSION, len(records), 1 if regression else 0))
    for rec in records:
        if regression:
            buf.write(struct.pack("<f", float(rec.label)))
        else:
            buf.write(struct.pack("<I", int(rec.label)))
        buf.write(struct.pack("<H", rec.origin))
        _write_record_body(buf, rec)
    return buf.getvalue()


def records_from_bytes(data: bytes) -> List[LatentRecord]:
    reader = nn._Reader(data)
    if reader.take(4, "magic") != LATENT_MAGIC:
        raise nn.CheckpointError("bad magic", 0)
    version, count, flag = reader.unpack("<HIB", "header")
    if version != LATENT_VERSION:
        raise nn.CheckpointError(f"unsupported version {version}", 4)

    def grid(dtype, what):
        (rank,) = reader.unpack("<B", what)
        dims = reader.unpack(f"<{rank}I", what)
        n = int(np.prod(dims)) if dims else 1
        width = np.dtype(dtype).itemsize
        arr = np.frombuffer(reader.take(width * n, what), dtype=dtype).reshape(dims)
        return arr

    out = []
    for i in range(count):
        (label,) = reader.unpack("<f" if flag else "<I", f"label of record {i}")
        (origin,) = reader.unpack("<H", f"origin of record {i}")
        (kind,) = reader.unpack("<B", f"kind of record {i}")
        if kind == DISCRETE:
            top = torch.from_numpy(grid("<u2", f"top grid of record {i}").astype(np.int64))
            bottom = torch.from_numpy(grid("<u2", f"bottom grid of record {i}").astype(np.int64))
            out.append(LatentRecord(label, origin, e_top=top, e_bottom=bottom))
        elif kind == CONTINUOUS:
            feats = torch.from_numpy(grid("<f4", f"features of record {i}").astype(np.float32))
            out.append(LatentRecord(label, origin, features=feats))
        else:
            raise nn.CheckpointError(f"unknown latent kind {kind}", reader.offset - 1)
    if reader.offset != len(data):
        raise nn.CheckpointError("trailing bytes after last record", reader.offset)
    return out


def save_records(records: Sequence[LatentRecord], path, regression: bool = False) -> None:
    Path(path).write_bytes(records_to_bytes(records, regression))


def load_records(path) -> List[LatentRecord]:
    return records_from_bytes(Path(path).read_bytes())


def _label_tensor(labels: Sequence) -> torch.Tensor:
    if all(isinstance(v, (int, np.integer)) for v in labels):
        return torch.tensor([int(v) for v in labels], dtype=torch.long)
    return torch.tensor([float(v) for v in labels], dtype=torch.float32)


def _label_value(t: torch.Tensor):
    return int(t) if not t.dtype.is_floating_point else float(t)


# ---------------------------------------------------------------------------
# CWT+Replay


@dataclass(frozen=True)
class ReplayBuffer:
    records: Tuple[LatentRecord, ...] = ()
    generator: Optional[QuantizedAutoencoder] = None  # decoder snapshot used for replay

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class ReplayConfig:
    generator_epochs: int = 10
    generator_batch_size: int = 32
    generator_lr: float = 0.0004
    generator_lr_decay_interval: int = 150
    generator_lr_decay_scale: float = 0.5
    commitment: float = 0.25
    codebook_size: int = 32
    embed_dim: int = 8
    hidden: int = 16
    replay_ratio: float = 1.0
    generator_passes: int = 1
    encoder_epochs: int = 10
    encoder_institution: int = 0

    def validate(self) -> "ReplayConfig":
        if self.generator_epochs < 1 or self.generator_batch_size < 1 or self.generator_passes < 1:
            raise ValueError("generator epochs, batch size and passes must be >= 1")
        if not self.generator_lr > 0:
            raise ValueError("generator_lr must be positive")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be >= 0")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.encoder_epochs < 1:
            raise ValueError("encoder_epochs must be >= 1")
        return self


def synthesize_replay(buffer: ReplayBuffer, records: Sequence[LatentRecord]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Decode stored index grids with the buffer's frozen decoder."""
    if not records:
        shape = buffer.generator.input_shape if buffer.generator is not None else (0,)
        return torch.zeros((0, *shape)), torch.zeros(0, dtype=torch.long)
    if buffer.generator is None:
        raise ValueError("replay buffer has no decoder snapshot")
    top = torch.stack([r.e_top for r in records])
    bottom = torch.stack([r.e_bottom for r in records])
    images = decode_indices(buffer.generator, top, bottom)
    return images, _label_tensor([r.label for r in records])


def _encode_records(ae, images, labels, origins) -> List[LatentRecord]:
    records = []
    for start in range(0, images.shape[0], 256):
        top, bottom = encode_indices(ae, images[start:start + 256])
        for j in range(top.shape[0]):
            i = start + j
            records.append(LatentRecord(_label_value(labels[i]), int(origins[i]), e_top=top[j], e_bottom=bottom[j]))
    return records


def train_generator_serial(
    nodes: Sequence[InstitutionNode],
    ae: QuantizedAutoencoder,
    rcfg: ReplayConfig,
    seed: int = 0,
    log: Optional[TrainingLog] = None,
) -> Tuple[QuantizedAutoencoder, ReplayBuffer]:
    """Serial generator training with replay of earlier institutions' codes.

    At institution k the frozen previous generator decodes the stored codes
    of the other institutions; the generator trains on the union of those
    images and the real local batches.  Afterwards the whole union is
    re-encoded so the buffer stays consistent with the new codebooks.
    Only weights travel between institutions; Adam moments restart locally.
    """
    rcfg.validate()
    # codebooks start from encoder outputs on the first institution's data
    ae = init_codebooks_from_data(ae, nodes[0].data.images[:256], seed)
    buffer = ReplayBuffer((), None)
    epoch = 0
    b = rcfg.generator_batch_size
    for gpass in range(rcfg.generator_passes):
        for node in nodes:
            d_old = buffer.generator
            others = [r for r in buffer.records if r.origin != node.k]
            old_x, old_y = synthesize_replay(ReplayBuffer(tuple(others), d_old), others)
            opt = nn.init_optimizer(
                "adaptive", ae.params, rcfg.generator_lr, epoch=epoch,
                decay_interval=rcfg.generator_lr_decay_interval, decay_scale=rcfg.generator_lr_decay_scale,
            )
            n = node.size
            size = min(b, n)
            per_epoch = max(n // size, 1)
            rb = int(round(rcfg.replay_ratio * size)) if len(others) else 0
            losses = []
            for e in range(rcfg.generator_epochs):
                order = torch.from_numpy(batch_order(seed, node.k, 1000 * (gpass + 1), e, n))
                for step in range(per_epoch):
                    x = node.data.images[order[step * size:(step + 1) * size]]
                    if rb:
                        rng = np.random.default_rng([seed, node.k + 1, gpass, e, step, 1])
                        pick = torch.from_numpy(rng.choice(len(others), size=min(rb, len(others)), replace=False))
                        x = torch.cat([old_x[pick], x])
                    loss, ae, opt = generator_loss_and_step(ae, x, opt, batch_id=(node.k, e, step))
                    losses.append(loss)
                opt = nn.next_epoch(opt)
                epoch += 1
            if log is not None:
                log.append(LogRecord(gpass, node.k, "generator", float(np.mean(losses)), seed=seed))
            refreshed = _encode_records(ae, old_x, old_y, [r.origin for r in others]) if others else []
            own = _encode_records(ae, node.data.images, node.data.labels, [node.k] * n)
            buffer = ReplayBuffer(tuple(refreshed + own), ae)
    return ae, buffer


def replay_sampler(buffer: ReplayBuffer, ratio: float, seed: int):
    """Callable widening each local batch with decoded replay samples.

    The decoder is frozen during classifier training, so the whole buffer is
    decoded once up front.
    """
    if not len(buffer) or ratio <= 0:
        return None
    images, labels = synthesize_replay(buffer, buffer.records)

    def widen(x, y, rnd, k, step):
        rb = min(int(round(ratio * x.shape[0])), images.shape[0])
        rng = np.random.default_rng([seed, k + 1, rnd, step, 2])
        pick = torch.from_numpy(rng.choice(images.shape[0], size=rb, replace=False))
        return torch.cat([images[pick], x]), torch.cat([labels[pick].to(y.dtype), y])

    return widen


def train_classifier_with_replay(
    nodes: Sequence[InstitutionNode],
    model: ModelGraph,
    params: ParamSet,
    buffer: ReplayBuffer,
    cfg: StrategyConfig,
    replay_ratio: float = 1.0,
    eval_ds: Optional[LabeledDataset] = None,
    seed: int = 0,
) -> Tuple[ParamSet, TrainingLog, List[List[ParamSet]]]:
    """CWT cycles where every local batch is {replayed batch, real batch}."""
    widen = replay_sampler(buffer, replay_ratio, seed)
    server = CentralServer(nn.clone_params(params))
    log = TrainingLog()
    cycles = []
    cyc_cfg = replace(cfg, kind="cwt_replay")
    for _ in range(cfg.rounds):
        server, part, ckpts = run_cwt_cycle(server, nodes, model, cyc_cfg, eval_ds, seed, replay=widen)
        log.extend(part)
        cycles.append(ckpts)
    return server.params, log, cycles


# ---------------------------------------------------------------------------
# FedReplay


def train_encoder_at_institution(
    node: InstitutionNode,
    model: ModelGraph,
    cut_index: int,
    cfg: StrategyConfig,
    epochs: int,
    seed: int = 0,
    init: Optional[ParamSet] = None,
) -> Tuple[ModelGraph, ParamSet, ParamSet]:
    """Train the full task model on one institution, then freeze its head.

    Returns ``(head graph, head params, full trained params)``.
    """
    params = nn.init_params(model, seed) if init is None else nn.clone_params(init)
    for epoch in range(epochs):
        params, _, _, _ = local_train(node, model, params, max(node.size // cfg.batch_size, 1), cfg, epoch)
    if cut_index == 0:
        head = nn.identity_head(model)
    else:
        head = nn.split_at_cut_layer(model, cut_index).head
    return head, nn.subset_params(head, params), params


def fedreplay_client_extract(
    node: InstitutionNode,
    head: ModelGraph,
    head_params: ParamSet,
    rnd: int = 0,
) -> Tuple[List[LatentRecord], Message]:
    """Encode every local sample with the frozen head; one ``latents`` message out.

    Samples are encoded one at a time so a sample's features never depend on
    which other samples share its institution.
    """
    if tuple(node.data.images.shape[1:]) != head.input_shape:
        raise nn.ShapeError(f"encoder expects {head.input_shape}, got {tuple(node.data.images.shape[1:])}")
    records = []
    with torch.no_grad():
        for i in range(node.size):
            feats = nn.forward(head, head_params, node.data.images[i:i + 1])[0].contiguous()
            records.append(LatentRecord(_label_value(node.data.labels[i]), node.k, features=feats.clone()))
    regression = node.data.labels.dtype.is_floating_point
    msg = Message("latents", records_to_bytes(records, regression), node.k, SERVER, rnd)
    return records, msg


def canonical_order(records: Sequence[LatentRecord], seed: int) -> List[LatentRecord]:
    """Sort by (label, latent bytes), then one seeded shuffle; origin plays no part."""
    ordered = sorted(records, key=lambda r: (r.label, r.body_bytes()))
    perm = np.random.default_rng([seed, 0xFEED]).permutation(len(ordered))
    return [ordered[i] for i in perm]


def fedreplay_server_train(
    records: Sequence[LatentRecord],
    tail: ModelGraph,
    cfg: StrategyConfig,
    seed: int = 0,
    init: Optional[ParamSet] = None,
    head: Optional[ModelGraph] = None,
    head_params: Optional[ParamSet] = None,
    full_model: Optional[ModelGraph] = None,
    eval_ds: Optional[LabeledDataset] = None,
) -> Tuple[ParamSet, TrainingLog]:
    """Train the tail for ``cfg.rounds`` epochs on the union of all latents."""
    if not records:
        raise ValueError("no latent records to train on")
    union = canonical_order(records, seed)
    feats = torch.stack([r.features for r in union])
    labels = _label_tensor([r.label for r in union])
    if tuple(feats.shape[1:]) != tail.input_shape:
        raise nn.ShapeError(f"tail expects {tail.input_shape}, latents are {tuple(feats.shape[1:])}")
    params = nn.subset_params(tail, init) if init is not None else nn.init_params(tail, seed)
    params = nn.clone_params(params)
    if labels.dtype.is_floating_point:
        latent_ds = LabeledDataset(feats, labels, "regression", 1)
    else:
        latent_ds = LabeledDataset(feats, labels, "classification", max(int(labels.max()) + 1, 2))
    server = InstitutionNode(SERVER, latent_ds, (), seed)
    log = TrainingLog()
    iters = max(len(union) // cfg.batch_size, 1)
    for epoch in range(cfg.rounds):
        params, _, part, _ = local_train(server, tail, params, iters, cfg, epoch)
        log.extend(part)
        if eval_ds is not None and full_model is not None:
            metric = evaluate(full_model, {**head_params, **params}, eval_ds)
            log.append(LogRecord(epoch, SERVER, "eval", metric=metric, seed=seed))
    return params, log
