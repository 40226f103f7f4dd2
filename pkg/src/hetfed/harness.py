"""Experiment configuration, strategy dispatch and run directories."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import attacks, nn, replay
from .data import (
    DatasetSpec,
    LabeledDataset,
    PartitionPlan,
    SkewSpec,
    apply_global_share,
    institution_datasets,
    ks_skewness,
    make_synthetic_dataset,
    partition_by_proportions,
    preset_partition,
    train_test_split,
)
from .federation import (
    PARALLEL_KINDS,
    STRATEGY_KINDS,
    CentralServer,
    ConfigError,
    LogRecord,
    SplitServer,
    StrategyConfig,
    TrainingLog,
    make_nodes,
    run_cwt_cycle,
    run_parallel_round,
    run_splitnn_cycle,
)
from .metrics import STD_CONVENTION, ForgettingMatrix, aggregate_runs, evaluate, forgetting_matrix
from .nn import ModelGraph, ParamSet

SUMMARY_COLUMNS = ("strategy", "split", "metric", "mean", "std", "runs")
SPLITS = ("split1", "split2", "split3")
COMPARE_KINDS = ("fedavg", "fedavg_share", "cwt", "cwt_replay", "fedreplay")


class RunError(RuntimeError):
    """A run failed after validation; the partial run directory is kept."""


# ---------------------------------------------------------------------------
# configuration


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    task_kind: Literal["classification", "regression"] = "classification"
    num_classes: int = Field(2, ge=2)
    image_size: int = Field(16, ge=4)
    channels: int = Field(1, ge=1)
    samples_per_class: int = Field(500, ge=1)
    n: int = Field(2000, ge=1)
    noise_sigma: float = Field(0.1, ge=0)
    contrast: float = Field(1.0, gt=0)
    modes_per_class: int = Field(1, ge=1)
    seed: int = 0
    pattern_seed: int = 0
    test_fraction: float = Field(0.25, gt=0, lt=1)

    def spec(self) -> DatasetSpec:
        return DatasetSpec(**self.model_dump(exclude={"test_fraction"}))


class PartitionSection(_Section):
    preset: Optional[Literal["split1", "split2", "split3"]] = "split1"
    institutions: int = Field(4, ge=1)
    size: Optional[int] = Field(None, ge=1)
    proportions: Optional[List[List[float]]] = None
    sizes: Optional[List[int]] = None

    @model_validator(mode="after")
    def _one_source(self):
        explicit = self.proportions is not None or self.sizes is not None
        if explicit:
            if self.proportions is None or self.sizes is None:
                raise ValueError("explicit partitions need both proportions and sizes")
            SkewSpec(tuple(tuple(r) for r in self.proportions), tuple(self.sizes))
            if len(self.sizes) != self.institutions:
                raise ValueError("institutions must equal the number of explicit sizes")
        return self

    @property
    def label(self) -> str:
        return "custom" if self.proportions is not None else self.preset


class ModelSection(_Section):
    channels: List[int] = Field(default_factory=lambda: [8])
    hidden: int = Field(0, ge=0)
    loss_kind: Optional[Literal["cross_entropy", "mse", "mae"]] = None


class StrategySection(_Section):
    kind: Literal[STRATEGY_KINDS] = "fedavg"
    rounds: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    optimizer: Literal["sgd", "sgd_momentum", "adaptive"] = "sgd"
    momentum: float = Field(0.0, ge=0, lt=1)
    lr_decay_interval: int = Field(0, ge=0)
    lr_decay_scale: float = Field(0.1, gt=0)
    participation: float = 1.0
    local_epochs: int = Field(1, ge=1)
    mu: float = Field(0.0, ge=0)
    server_momentum: float = Field(0.0, ge=0, lt=1)
    share_fraction: float = Field(0.05, gt=0, lt=1)
    cut_index: Optional[int] = Field(None, ge=0)

    def runtime(self, kind: Optional[str] = None) -> StrategyConfig:
        data = self.model_dump()
        if kind is not None:
            data["kind"] = kind
        return StrategyConfig(**data)


class ReplaySection(_Section):
    generator_epochs: int = Field(10, ge=1)
    generator_batch_size: int = Field(32, ge=1)
    generator_lr: float = Field(0.0004, gt=0)
    generator_lr_decay_interval: int = Field(150, ge=0)
    generator_lr_decay_scale: float = Field(0.5, gt=0)
    commitment: float = Field(0.25, ge=0)
    codebook_size: int = Field(32, ge=2)
    embed_dim: int = Field(8, ge=1)
    hidden: int = Field(16, ge=1)
    replay_ratio: float = Field(1.0, ge=0)
    generator_passes: int = Field(1, ge=1)
    encoder_epochs: int = Field(10, ge=1)
    encoder_institution: int = Field(0, ge=0)
    fedreplay_cut_index: int = Field(3, ge=0)

    def runtime(self) -> replay.ReplayConfig:
        return replay.ReplayConfig(**self.model_dump(exclude={"fedreplay_cut_index"}))


class AttackSection(_Section):
    kind: Literal["gradient", "model"] = "gradient"
    alpha: float = Field(1e-2, ge=0)
    max_iters: int = Field(1000, ge=1, le=20000)
    learning_rate: float = Field(0.1, gt=0)
    init: Literal["zeros", "uniform_noise", "gray"] = "uniform_noise"
    count: int = Field(50, ge=1)
    cut_index: int = Field(3, ge=0)
    label_known: bool = True

    def runtime(self, seed: int) -> attacks.AttackConfig:
        return attacks.AttackConfig(
            self.alpha, self.max_iters, self.learning_rate, self.init, seed, self.label_known
        )


class ExperimentConfig(_Section):
    name: str = "experiment"
    seed: int = 0
    runs: int = Field(4, ge=1)
    output_dir: Optional[str] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    model: ModelSection = Field(default_factory=ModelSection)
    strategy: StrategySection = Field(default_factory=StrategySection)
    strategies: Optional[List[Literal[STRATEGY_KINDS]]] = None
    replay: ReplaySection = Field(default_factory=ReplaySection)
    attack: AttackSection = Field(default_factory=AttackSection)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.model.loss_kind is not None:
            ce = self.model.loss_kind == "cross_entropy"
            if ce != (self.dataset.task_kind == "classification"):
                raise ValueError(f"loss {self.model.loss_kind} does not fit a {self.dataset.task_kind} task")
        try:
            self.strategy.runtime().validate(build_model(self))
            self.replay.runtime().validate()
        except (ConfigError, ValueError) as exc:
            raise ValueError(str(exc)) from None
        if self.replay.encoder_institution >= self.partition.institutions:
            raise ValueError("encoder_institution out of range")
        return self

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Validated copy with top-level or dotted (``strategy.kind``) overrides."""
        data = self.model_dump()
        for key, value in changes.items():
            if value is None:
                continue
            node = data
            *path, leaf = key.split(".")
            for part in path:
                node = node[part]
            node[leaf] = value
        return ExperimentConfig.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()


SCHEMA_PATH = Path(__file__).with_name("config_schema.json")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(data or {})


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# presets

# toy classification setting: small enough for CI, skewed enough to show
# forgetting and client drift on split3
TOY = dict(
    dataset=dict(samples_per_class=600, noise_sigma=0.45, contrast=1.0, modes_per_class=8, test_fraction=1 / 3),
    model=dict(channels=[8], hidden=0),
    strategy=dict(rounds=10, batch_size=8, learning_rate=0.05, lr_decay_interval=7, lr_decay_scale=0.1),
    replay=dict(generator_epochs=15, generator_lr=0.003, generator_lr_decay_interval=1000, replay_ratio=2.0),
    attack=dict(count=20, max_iters=3000),
)


def _merge(base: dict, extra: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def preset_names() -> List[str]:
    names = [f"{s}-{k}" for s in SPLITS for k in STRATEGY_KINDS]
    names += [f"compare-all-{s}" for s in SPLITS]
    names += ["attack-gradient", "attack-model"]
    return names


def preset_config(name: str) -> ExperimentConfig:
    """Toy-scale presets: ``<split>-<kind>``, ``compare-all-<split>``, ``attack-*``."""
    if name.startswith("compare-all-"):
        split = name[len("compare-all-"):]
        if split in SPLITS:
            return parse_config(_merge(TOY, dict(name=name, partition=dict(preset=split), strategies=list(COMPARE_KINDS))))
    elif name.startswith("attack-"):
        kind = name[len("attack-"):]
        if kind == "gradient":
            # batch-1 dense layer: the closed-form recovery applies
            return parse_config(_merge(TOY, dict(name=name, model=dict(channels=[]), attack=dict(kind=kind, alpha=0.0))))
        if kind == "model":
            # the TV prior swamps the small latents of untrained encoders at 1e-2
            return parse_config(_merge(TOY, dict(name=name, attack=dict(kind=kind, alpha=1e-3))))
    else:
        split, _, kind = name.partition("-")
        if split in SPLITS and kind in STRATEGY_KINDS:
            extra = dict(name=name, partition=dict(preset=split), strategy=dict(kind=kind))
            if kind == "splitnn":
                extra["strategy"]["cut_index"] = 3
            return parse_config(_merge(TOY, extra))
    raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")


# ---------------------------------------------------------------------------
# building blocks


def build_model(cfg: ExperimentConfig) -> ModelGraph:
    d = cfg.dataset
    loss = cfg.model.loss_kind or ("cross_entropy" if d.task_kind == "classification" else "mae")
    outputs = d.num_classes if d.task_kind == "classification" else 1
    return nn.toy_cnn((d.channels, d.image_size, d.image_size), outputs, cfg.model.channels, cfg.model.hidden, loss)


def build_data(cfg: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    full = make_synthetic_dataset(cfg.dataset.spec())
    return train_test_split(full, cfg.dataset.test_fraction, cfg.dataset.seed)


def build_partition(cfg: ExperimentConfig, train: LabeledDataset, seed: int) -> PartitionPlan:
    p = cfg.partition
    if p.proportions is not None:
        spec = SkewSpec(tuple(tuple(r) for r in p.proportions), tuple(p.sizes))
        return partition_by_proportions(train, spec, seed)
    return preset_partition(p.preset, train, seed, p.institutions, p.size)


def data_fingerprint(train: LabeledDataset, plan: PartitionPlan) -> str:
    h = hashlib.sha256()
    h.update(train.images.numpy().tobytes())
    h.update(train.labels.numpy().tobytes())
    h.update(plan.to_text().encode())
    return h.hexdigest()


@dataclass
class RunResult:
    kind: str
    seed: int
    metric: float
    params: ParamSet
    log: TrainingLog
    forgetting: Optional[ForgettingMatrix] = None
    latents: Optional[bytes] = None
    extras: Dict[str, object] = field(default_factory=dict)


def run_strategy(
    kind: str,
    cfg: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    plan: PartitionPlan,
    seed: int,
) -> RunResult:
    """Train one strategy from a fresh initialization and score it on ``test``."""
    model = build_model(cfg)
    scfg = cfg.strategy.runtime(kind).validate(model)
    params = nn.init_params(model, seed)
    regression = train.task_kind == "regression"
    nodes = make_nodes(train, plan.assignments, seed)
    forgetting = None
    latents = None
    if kind == "central":
        server = CentralServer(params)
        union = make_nodes(train, [tuple(range(len(train)))], seed)
        log = TrainingLog()
        for _ in range(scfg.rounds):
            server, part, _ = run_cwt_cycle(server, union, model, scfg, seed=seed)
            log.extend(part)
        final = server.params
    elif kind in PARALLEL_KINDS:
        if kind == "fedavg_share":
            nodes = make_nodes(train, apply_global_share(train, plan, scfg.share_fraction, seed).assignments, seed)
        server = CentralServer(params)
        log = TrainingLog()
        for _ in range(scfg.rounds):
            server, part = run_parallel_round(server, nodes, model, scfg, seed=seed)
            log.extend(part)
        final = server.params
    elif kind == "cwt":
        server = CentralServer(params)
        log = TrainingLog()
        for _ in range(scfg.rounds):
            server, part, ckpts = run_cwt_cycle(server, nodes, model, scfg, seed=seed)
            log.extend(part)
        final = server.params
        if len(nodes) > 1:
            forgetting = forgetting_matrix(model, ckpts, [n.data for n in nodes], scfg.rounds - 1)
    elif kind == "splitnn":
        split = nn.split_at_cut_layer(model, scfg.cut_index)
        server = SplitServer(nn.subset_params(split.head, params), tail_params=nn.subset_params(split.tail, params))
        log = TrainingLog()
        for _ in range(scfg.rounds):
            server, part = run_splitnn_cycle(server, nodes, model, scfg, seed=seed)
            log.extend(part)
        final = {**server.params, **server.tail_params}
    elif kind == "cwt_replay":
        rcfg = cfg.replay.runtime()
        d = cfg.dataset
        ae = replay.build_autoencoder(
            (d.channels, d.image_size, d.image_size), rcfg.hidden, rcfg.embed_dim, rcfg.codebook_size,
            rcfg.commitment, seed,
        )
        log = TrainingLog()
        ae, buffer = replay.train_generator_serial(nodes, ae, rcfg, seed, log)
        final, part, cycles = replay.train_classifier_with_replay(
            nodes, model, params, buffer, scfg, rcfg.replay_ratio, None, seed
        )
        log.extend(part)
        latents = replay.records_to_bytes(buffer.records, regression)
        if len(nodes) > 1:
            forgetting = forgetting_matrix(model, cycles[-1], [n.data for n in nodes], scfg.rounds - 1)
    elif kind == "fedreplay":
        rcfg = cfg.replay.runtime()
        cut = cfg.replay.fedreplay_cut_index
        # the encoder comes from one institution of a balanced split of the
        # same training set, so it is identical whatever partition is studied
        iid = preset_partition("split1", train, seed, cfg.partition.institutions)
        enc_node = make_nodes(train, iid.assignments, seed)[rcfg.encoder_institution]
        enc_cfg = cfg.strategy.runtime("central")
        head, head_params, _ = replay.train_encoder_at_institution(enc_node, model, cut, enc_cfg, rcfg.encoder_epochs, seed)
        records = []
        log = TrainingLog()
        for node in nodes:
            recs, msg = replay.fedreplay_client_extract(node, head, head_params)
            records += recs
            log.append(LogRecord(0, node.k, "latents", bytes_sent=msg.size, seed=seed))
        tail = model if cut == 0 else nn.split_at_cut_layer(model, cut).tail
        tail_params, part = replay.fedreplay_server_train(records, tail, scfg, seed, init=params)
        log.extend(part)
        final = {**head_params, **tail_params}
        latents = replay.records_to_bytes(replay.canonical_order(records, seed), regression)
    else:
        raise ConfigError(f"unknown strategy kind {kind!r}")
    metric = evaluate(model, final, test)
    return RunResult(kind, seed, metric, final, log, forgetting, latents)


# ---------------------------------------------------------------------------
# run directories


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDirectory:
    """Append-only output directory; every file is listed in ``manifest.csv``."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        if self.root.exists() and any(self.root.iterdir()):
            raise ConfigError(f"output directory {self.root} is not empty")
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []

    def write_bytes(self, rel: str, data: bytes) -> Path:
        path = self.root / rel
        if path.exists():
            raise RunError(f"refusing to overwrite {path}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files.append(rel)
        return path

    def write_text(self, rel: str, text: str) -> Path:
        return self.write_bytes(rel, text.encode())

    def write_manifest(self) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "size", "sha256"])
        for rel in sorted(self.files):
            p = self.root / rel
            w.writerow([rel, p.stat().st_size, _sha256(p)])
        return self.write_text("manifest.csv", buf.getvalue())

    def fail(self, exc: BaseException) -> None:
        text = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
        (self.root / "error.txt").write_text(text)


def summary_csv(rows: Sequence[Tuple[str, str, str, float, float, int]]) -> str:
    buf = io.StringIO()
    buf.write(f"# std: {STD_CONVENTION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for strategy, split, metric, mean, std, runs in rows:
        w.writerow([strategy, split, metric, f"{mean:.6f}", f"{std:.6f}", runs])
    return buf.getvalue()


def _emit_run(rd: RunDirectory, prefix: str, res: RunResult) -> None:
    rd.write_text(f"{prefix}/log.csv", res.log.to_csv())
    rd.write_bytes(f"{prefix}/model.hfsm", nn.params_to_bytes(res.params))
    if res.forgetting is not None:
        rd.write_text(f"{prefix}/forgetting.csv", res.forgetting.to_csv())
    if res.latents is not None:
        rd.write_bytes(f"{prefix}/latents.hflt", res.latents)


@dataclass
class ExperimentOutcome:
    directory: Path
    results: Dict[str, List[RunResult]]
    summary: List[Tuple[str, str, str, float, float, int]]


def _run_kinds(cfg: ExperimentConfig, kinds: Sequence[str], out: Union[str, Path]) -> ExperimentOutcome:
    rd = RunDirectory(out)
    rd.write_text("config.yaml", cfg.to_yaml())
    results: Dict[str, List[RunResult]] = {k: [] for k in kinds}
    try:
        train, test = build_data(cfg)
        for r in range(cfg.runs):
            seed = cfg.seed + r
            plan = build_partition(cfg, train, seed)
            rd.write_text(f"run{r}/partition.txt", plan.to_text())
            fingerprint = data_fingerprint(train, plan)
            for kind in kinds:
                res = run_strategy(kind, cfg, train, test, plan, seed)
                # every strategy must have seen the same bytes
                if data_fingerprint(train, plan) != fingerprint:
                    raise RunError("data or partition changed between strategies")
                _emit_run(rd, f"run{r}/{kind}", res)
                results[kind].append(res)
        metric = "accuracy" if cfg.dataset.task_kind == "classification" else "mae"
        rows = []
        for kind in kinds:
            s = aggregate_runs([res.metric for res in results[kind]])
            rows.append((kind, cfg.partition.label, metric, s.mean, s.std, s.runs))
        rd.write_text("summary.csv", summary_csv(rows))
        forgetting = [res.forgetting for k in kinds for res in results[k][:1] if res.forgetting is not None]
        if forgetting:
            rd.write_text("forgetting.csv", forgetting[0].to_csv())
        rd.write_manifest()
    except ConfigError:
        raise
    except Exception as exc:
        rd.fail(exc)
        raise RunError(f"{type(exc).__name__}: {exc}") from exc
    return ExperimentOutcome(rd.root, results, rows)


def run_experiment(cfg: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> ExperimentOutcome:
    """R seeded runs of ``cfg.strategy.kind``; writes the full run directory."""
    return _run_kinds(cfg, [cfg.strategy.kind], _out_dir(cfg, out))


def compare_strategies(
    cfgs: Union[ExperimentConfig, Sequence[ExperimentConfig]],
    out: Optional[Union[str, Path]] = None,
) -> ExperimentOutcome:
    """Side-by-side runs on identical data; a ``central`` row is always included.

    Accepts one config (kinds from ``strategies``) or several configs that
    must agree on everything but the strategy kind.
    """
    if isinstance(cfgs, ExperimentConfig):
        base = cfgs
        kinds = list(cfgs.strategies or [cfgs.strategy.kind])
    else:
        cfgs = list(cfgs)
        if not cfgs:
            raise ConfigError("nothing to compare")
        base = cfgs[0]
        shared = ("seed", "runs", "dataset", "partition", "model")
        for c in cfgs[1:]:
            for key in shared:
                if getattr(c, key) != getattr(base, key):
                    raise ConfigError(f"compared configs disagree on {key!r}")
        kinds = [c.strategy.kind for c in cfgs]
    if "central" not in kinds:
        kinds = ["central"] + kinds
    if len(set(kinds)) != len(kinds):
        raise ConfigError("duplicate strategy kinds in comparison")
    return _run_kinds(base, kinds, _out_dir(base, out))


def _out_dir(cfg: ExperimentConfig, out) -> Path:
    if out is not None:
        return Path(out)
    if cfg.output_dir is not None:
        return Path(cfg.output_dir)
    return Path("runs") / cfg.name


# ---------------------------------------------------------------------------
# attacks and partitions


def run_attack(cfg: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> attacks.AttackReport:
    """Attack test images with the configured (untrained) task model or its head."""
    rd = RunDirectory(_out_dir(cfg, out))
    rd.write_text("config.yaml", cfg.to_yaml())
    try:
        _, test = build_data(cfg)
        model = build_model(cfg)
        params = nn.init_params(model, cfg.seed)
        a = cfg.attack
        if a.kind == "model":
            target = nn.identity_head(model) if a.cut_index == 0 else nn.split_at_cut_layer(model, a.cut_index).head
            params = nn.subset_params(target, params)
        else:
            target = model
        report = attacks.attack_report(test, a.count, a.kind, a.runtime(cfg.seed), target, params)
        rd.write_text("psnr.csv", report.to_csv())
        recovered = {
            f"image{j}": (res.recovered if res is not None else torch.full(tuple(test.images.shape[1:]), float("nan")))
            for j, res in enumerate(report.results)
        }
        rd.write_bytes("recovered.hfsm", nn.params_to_bytes({k: v.reshape(test.images.shape[1:]) for k, v in recovered.items()}))
        rd.write_manifest()
    except ConfigError:
        raise
    except Exception as exc:
        rd.fail(exc)
        raise RunError(f"{type(exc).__name__}: {exc}") from exc
    return report


def run_partition(cfg: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Tuple[PartitionPlan, float]:
    rd = RunDirectory(_out_dir(cfg, out))
    rd.write_text("config.yaml", cfg.to_yaml())
    train, _ = build_data(cfg)
    plan = build_partition(cfg, train, cfg.seed)
    ks = ks_skewness(train, plan)
    rd.write_text("partition.txt", plan.to_text())
    counts = [[int((d.label_array() == c).sum()) for c in range(cfg.dataset.num_classes)]
              if d.task_kind == "classification" else [len(d)] for d in institution_datasets(train, plan)]
    rd.write_text("partition.json", json.dumps({"ks_skewness": round(ks, 6), "counts": counts}, indent=2) + "\n")
    rd.write_manifest()
    return plan, ks


def verify_manifest(root: Union[str, Path]) -> List[str]:
    """Paths whose size or hash no longer match the manifest."""
    root = Path(root)
    bad = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            p = root / row["path"]
            if not p.exists() or p.stat().st_size != int(row["size"]) or _sha256(p) != row["sha256"]:
                bad.append(row["path"])
    return bad
