"""Reconstruction attacks on shared gradients and shared latents.

The attacker only ever sees the model definition plus what was shared; the
true image is used solely by :func:`attack_report` to score the result.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .data import LabeledDataset
from .metrics import aggregate_runs
from .nn import ModelGraph, ParamSet

INIT_KINDS = ("zeros", "uniform_noise", "gray")
ATTACK_KINDS = ("gradient", "model")
# fractions of max_iters at which the step size drops tenfold
LR_MILESTONES = (3 / 8, 5 / 8, 7 / 8)


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 1e-2
    max_iters: int = 1000
    learning_rate: float = 0.1
    init: str = "uniform_noise"
    seed: int = 0
    label_known: bool = True

    def validate(self) -> "AttackConfig":
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.init not in INIT_KINDS:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INIT_KINDS}")
        return self


@dataclass(frozen=True)
class ReconstructionResult:
    recovered: torch.Tensor
    psnr_db: float  # nan until scored by the harness
    objective_trace: Tuple[float, ...]  # best-so-far objective per iteration
    iterations_run: int
    best_iteration: int


def _tv(img: torch.Tensor) -> torch.Tensor:
    if img.dim() < 2:
        raise ValueError(f"total variation needs rank >= 2, got rank {img.dim()}")
    dh = (img[..., 1:, :] - img[..., :-1, :]).abs().sum()
    dw = (img[..., :, 1:] - img[..., :, :-1]).abs().sum()
    return dh + dw


def total_variation(img: torch.Tensor) -> float:
    """Anisotropic TV over the last two (spatial) axes, summed over the rest."""
    return float(_tv(img.detach()))


def psnr(a: torch.Tensor, b: torch.Tensor, max_value: float = 1.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    mse = float(((a.detach().double() - b.detach().double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def _initial_guess(shape: Tuple[int, ...], cfg: AttackConfig) -> torch.Tensor:
    if cfg.init == "zeros":
        return torch.zeros(shape)
    if cfg.init == "gray":
        return torch.full(shape, 0.5)
    rng = np.random.default_rng([cfg.seed, 0xA77])
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=shape).astype(np.float32))


def _lr_at(cfg: AttackConfig, it: int) -> float:
    drops = sum(it >= int(m * cfg.max_iters) for m in LR_MILESTONES)
    return cfg.learning_rate * 0.1 ** drops


def _optimize(
    objective: Callable[[torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    cfg: AttackConfig,
    extra: Optional[torch.Tensor] = None,
) -> ReconstructionResult:
    """Adaptive-step descent on ``objective`` with pixels clamped to [0, 1].

    ``extra`` is an optional unclamped variable optimized jointly (soft labels).
    """
    state = {"x": x0.clone()}
    if extra is not None:
        state["extra"] = extra.clone()
    opt = nn.init_optimizer("adaptive", state, cfg.learning_rate)
    trace: List[float] = []
    best_value, best_x, best_it = math.inf, state["x"].clone(), 0
    for it in range(cfg.max_iters):
        leaves = {k: v.detach().requires_grad_(True) for k, v in state.items()}
        with torch.enable_grad():
            obj = objective(leaves["x"]) if extra is None else objective(leaves["x"], leaves["extra"])
            grads = torch.autograd.grad(obj, list(leaves.values()))
        value = float(obj.detach())
        if not math.isfinite(value):
            raise nn.NonFiniteLossError(value, ("attack", it))
        if value < best_value:
            best_value, best_x, best_it = value, state["x"].clone(), it
        trace.append(best_value)
        opt = replace(opt, learning_rate=_lr_at(cfg, it))
        opt, state = nn.optimizer_step(opt, state, {k: g.detach() for k, g in zip(leaves, grads)})
        state["x"] = state["x"].clamp(0.0, 1.0)
    return ReconstructionResult(best_x, math.nan, tuple(trace), len(trace), best_it)


def _cosine_distance(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> torch.Tensor:
    fa = torch.cat([t.reshape(-1) for t in a])
    fb = torch.cat([t.reshape(-1) for t in b])
    return 1.0 - (fa * fb).sum() / (fa.norm() * fb.norm()).clamp_min(1e-30)


def gradient_matching_objective(
    model: ModelGraph,
    params: ParamSet,
    shared_grads: ParamSet,
    labels: Optional[torch.Tensor],
    alpha: float,
):
    """Closure computing ``(1 - cos(grad(x~), shared)) + alpha * TV(x~)``.

    With ``labels`` of None the closure takes a second argument: logits of a
    soft label that is optimized jointly.
    """
    nn.check_compatible(params, shared_grads, "shared gradients")
    names = list(model.param_shapes())
    target = [shared_grads[n].detach() for n in names]
    if float(torch.cat([t.reshape(-1) for t in target]).norm()) == 0.0:
        raise ValueError("shared gradient has zero norm; cosine distance is undefined")
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}

    def objective(x, soft=None):
        out = nn.forward(model, leaves, x)
        if soft is None:
            loss = nn.loss_from_outputs(model, out, labels)
        else:
            loss = -(F.softmax(soft, dim=-1) * F.log_softmax(out, dim=-1)).sum(dim=-1).mean()
        grads = torch.autograd.grad(loss, [leaves[n] for n in names], create_graph=True)
        return _cosine_distance(grads, target) + alpha * _tv(x)

    return objective


def gradient_inversion(
    model: ModelGraph,
    params: ParamSet,
    shared_grads: ParamSet,
    cfg: AttackConfig,
    labels: Optional[torch.Tensor] = None,
    batch_size: int = 1,
) -> ReconstructionResult:
    """Recover the input batch behind a shared gradient by gradient matching.

    ``labels`` are required when ``cfg.label_known``; otherwise soft labels
    are recovered alongside the images (cross-entropy models only).
    """
    cfg.validate()
    if cfg.label_known:
        if labels is None:
            raise ValueError("label_known attack needs labels")
        batch_size = labels.shape[0]
        objective = gradient_matching_objective(model, params, shared_grads, labels, cfg.alpha)
        extra = None
    else:
        if model.loss_kind != "cross_entropy":
            raise ValueError("label recovery is only defined for cross_entropy models")
        objective = gradient_matching_objective(model, params, shared_grads, None, cfg.alpha)
        extra = torch.zeros((batch_size, model.output_shape[0]))
    x0 = _initial_guess((batch_size, *model.input_shape), cfg)
    return _optimize(objective, x0, cfg, extra)


def model_inversion(
    encoder: ModelGraph,
    encoder_params: ParamSet,
    shared_latent: torch.Tensor,
    cfg: AttackConfig,
) -> ReconstructionResult:
    """Recover inputs from shared features: ``||E(x~) - z||^2 + alpha * TV(x~)``."""
    cfg.validate()
    z = shared_latent.detach()
    if tuple(z.shape) == encoder.output_shape:
        z = z.unsqueeze(0)
    if tuple(z.shape[1:]) != encoder.output_shape:
        raise nn.ShapeError(f"latent {tuple(shared_latent.shape)} does not match encoder output {encoder.output_shape}")
    params = {k: v.detach() for k, v in encoder_params.items()}

    def objective(x):
        return ((nn.forward(encoder, params, x) - z) ** 2).sum() + cfg.alpha * _tv(x)

    x0 = _initial_guess((z.shape[0], *encoder.input_shape), cfg)
    result = _optimize(objective, x0, cfg)
    if tuple(shared_latent.shape) == encoder.output_shape:
        result = replace(result, recovered=result.recovered[0])
    return result


def closed_form_dense_recovery(grad_w: torch.Tensor, grad_b: torch.Tensor) -> torch.Tensor:
    """Input of a bias-bearing dense layer from its batch-1 gradients.

    For ``y = W x + b`` the gradients are ``delta x^T`` and ``delta``, so any
    row with a nonzero ``delta_i`` divided by it gives ``x``.
    """
    gb = grad_b.double().reshape(-1)
    i = int(gb.abs().argmax())
    if abs(float(gb[i])) <= 1e-12:
        raise ValueError("bias gradient is zero; input is not recoverable")
    return (grad_w.double()[i] / gb[i]).to(grad_w.dtype)


@dataclass(frozen=True)
class AttackReport:
    kind: str
    indices: Tuple[int, ...]
    psnrs: Tuple[float, ...]  # nan marks a failed attack
    iterations: Tuple[int, ...]
    best_iterations: Tuple[int, ...]
    results: Tuple[Optional[ReconstructionResult], ...]

    @property
    def failures(self) -> int:
        return sum(math.isnan(p) for p in self.psnrs)

    def summary(self):
        ok = [p for p in self.psnrs if not math.isnan(p)]
        if not ok:
            return None
        return aggregate_runs(ok)

    def to_csv(self) -> str:
        """Per-image rows, then a ``mean`` row (``index`` holds the valid count)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "index", "psnr_db", "std_db", "iterations_run", "best_iteration"])
        for j, (idx, p, its, best) in enumerate(zip(self.indices, self.psnrs, self.iterations, self.best_iterations)):
            w.writerow([j, idx, _fmt(p), "", its, best])
        s = self.summary()
        if s is None:
            w.writerow(["mean", 0, "nan", "nan", "", ""])
        else:
            w.writerow(["mean", s.runs, _fmt(s.mean), _fmt(s.std), "", ""])
        return buf.getvalue()


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def attack_report(
    dataset: LabeledDataset,
    count: int,
    kind: str,
    cfg: AttackConfig,
    model: ModelGraph,
    params: ParamSet,
) -> AttackReport:
    """Attack ``count`` randomly chosen images one at a time and score them.

    For ``kind="gradient"`` the victim shares the batch-1 gradient of
    ``model``; for ``kind="model"`` ``model`` is the shared encoder and the
    victim shares its features.  Per-image failures become NaN rows.
    """
    cfg.validate()
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > len(dataset):
        raise ValueError(f"count {count} exceeds dataset size {len(dataset)}")
    picks = np.random.default_rng([cfg.seed, 0x50]).choice(len(dataset), size=count, replace=False)
    indices, psnrs, its, bests, results = [], [], [], [], []
    for j, idx in enumerate(int(i) for i in picks):
        x = dataset.images[idx:idx + 1]
        y = dataset.labels[idx:idx + 1]
        icfg = replace(cfg, seed=int(np.random.default_rng([cfg.seed, idx]).integers(2 ** 31)))
        try:
            if kind == "gradient":
                _, shared = nn.loss_and_grad(model, params, x, y)
                res = gradient_inversion(model, params, shared, icfg, labels=y if cfg.label_known else None)
            else:
                with torch.no_grad():
                    z = nn.forward(model, params, x)
                res = model_inversion(model, params, z, icfg)
            res = replace(res, psnr_db=psnr(res.recovered, x))
        except (ValueError, FloatingPointError):
            res = None
        indices.append(idx)
        results.append(res)
        psnrs.append(math.nan if res is None else res.psnr_db)
        its.append(0 if res is None else res.iterations_run)
        bests.append(-1 if res is None else res.best_iteration)
    return AttackReport(kind, tuple(indices), tuple(psnrs), tuple(its), tuple(bests), tuple(results))
