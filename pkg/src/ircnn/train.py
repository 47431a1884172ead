"""Experiment harness: run configuration, the training loop, evaluation, and
checkpoint resume.

A run is fully determined by its :class:`RunConfig` (the seed is mandatory;
nothing is seeded from the wall clock). Random streams are spawned from the
master seed per purpose (init, split, batch shuffling/flips, dropout) and the
shuffling/dropout generator states are checkpointed after every epoch, so a
resumed run reproduces the uninterrupted run's remaining epochs exactly.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    AugmentConfig,
    Dataset,
    batch_iter,
    load_dataset,
    normalize,
    split_train_val,
)
from .errors import ConfigError, NumericsError
from .graph import LayerGraph
from .initializers import LsuvReport, init_baseline, lsuv_init
from .models import ModelConfig, build_model, make_preset
from .optim import (
    AdamConfig,
    EveConfig,
    OptimizerState,
    SgdConfig,
    StepInfo,
    adam_step,
    apply_l2,
    eve_step,
    l2_scope,
    sgd_nesterov_step,
)

METRICS_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,epoch_time_s,effective_lr,eve_d"

DATASET_SHAPES = {"mnist": (1, 10), "cifar10": (3, 10), "cifar100": (3, 100)}

_OPT_CONFIGS = {"sgd": SgdConfig, "adam": AdamConfig, "eve": EveConfig}


@dataclass
class RunConfig:
    model: dict
    dataset: dict
    optimizer: dict
    seed: int
    out_dir: str
    epochs: int = 5
    batch_size: int = 128
    variant: str = "ircnn"
    initializer: str = "baseline"
    l2: float = 0.002
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    record_wall_time: bool = True
    resume_from: str | None = None

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("run config must set an explicit seed")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size must be >= 1, got {self.epochs}, "
                              f"{self.batch_size}")
        if self.initializer not in ("baseline", "lsuv"):
            raise ConfigError(f"initializer must be 'baseline' or 'lsuv', got "
                              f"{self.initializer!r}")
        if self.optimizer.get("name") not in _OPT_CONFIGS:
            raise ConfigError(f"optimizer name must be one of {sorted(_OPT_CONFIGS)}, "
                              f"got {self.optimizer.get('name')!r}")
        if self.dataset.get("name") not in DATASET_SHAPES:
            raise ConfigError(f"dataset name must be one of {sorted(DATASET_SHAPES)}, "
                              f"got {self.dataset.get('name')!r}")
        if self.l2 < 0:
            raise ConfigError(f"l2 strength must be >= 0, got {self.l2}")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "RunConfig":
        d = dict(d)
        try:
            if "augment" in d:
                d["augment"] = AugmentConfig(**d["augment"])
            cfg = RunConfig(**d)
        except TypeError as e:
            raise ConfigError(f"malformed run config: {e}") from e
        cfg.validate()
        return cfg

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_json_dict(json.loads(Path(path).read_text()))


def make_opt_config(opt: dict):
    kind = opt["name"]
    kwargs = {k: v for k, v in opt.items() if k != "name"}
    try:
        return _OPT_CONFIGS[kind](**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad {kind} optimizer options: {e}") from e


def optimizer_step(kind: str, cfg, state: OptimizerState, params, grads,
                   batch_loss: float) -> StepInfo:
    if kind == "sgd":
        return sgd_nesterov_step(state, params, grads, cfg)
    if kind == "adam":
        return adam_step(state, params, grads, cfg)
    return eve_step(state, params, grads, batch_loss, cfg)


def resolve_model_config(run_cfg: RunConfig, in_channels: int, classes: int
                         ) -> ModelConfig:
    spec = run_cfg.model
    if "preset" in spec:
        cfg = make_preset(spec["preset"], in_channels=in_channels, classes=classes,
                          variant=run_cfg.variant,
                          time_steps=spec.get("time_steps", 2))
    elif "path" in spec:
        cfg = ModelConfig.load(spec["path"]).with_variant(run_cfg.variant)
        if "time_steps" in spec:
            cfg = cfg.with_time_steps(spec["time_steps"])
        if cfg.in_channels != in_channels or cfg.classes != classes:
            raise ConfigError(f"model config expects {cfg.in_channels} channels / "
                              f"{cfg.classes} classes but dataset provides "
                              f"{in_channels} / {classes}")
    else:
        raise ConfigError("run config 'model' needs a 'preset' or 'path' entry")
    cfg.validate()
    return cfg


def load_splits(run_cfg: RunConfig, data_dir: str | Path
                ) -> tuple[Dataset, Dataset, Dataset]:
    """Returns raw (train, val, test) before normalization."""
    name = run_cfg.dataset["name"]
    train = load_dataset(name, data_dir, "train")
    test = load_dataset(name, data_dir, "test")
    limit = run_cfg.dataset.get("train_limit")
    if limit:
        if limit > train.n:
            raise ConfigError(f"train_limit {limit} exceeds dataset size {train.n}")
        train = train.subset(np.arange(limit))
    val_spec = run_cfg.dataset.get("validation", {"source": "holdout", "fraction": 0.1})
    if val_spec["source"] == "test":
        val = test
    elif val_spec["source"] == "holdout":
        split_seed = np.random.SeedSequence(run_cfg.seed).spawn(4)[1]
        train, val = split_train_val(train, val_spec.get("fraction", 0.1),
                                     seed=split_seed)
    else:
        raise ConfigError(f"validation source must be 'holdout' or 'test', got "
                          f"{val_spec['source']!r}")
    return train, val, test


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    per_class_accuracy: dict[int, float]
    error_percent: float


def evaluate(graph: LayerGraph, ds: Dataset, batch_size: int) -> EvalResult:
    """Single unshuffled pass in infer mode (dropout disabled)."""
    total_loss, correct, seen = 0.0, 0, 0
    per_class_total = np.zeros(ds.num_classes, dtype=np.int64)
    per_class_hit = np.zeros(ds.num_classes, dtype=np.int64)
    for x, y in batch_iter(ds, min(batch_size, ds.n), "eval"):
        run = graph.forward(x, y, mode="infer")
        n = len(y)
        total_loss += run.loss * n
        pred = run.probs.argmax(axis=1)
        correct += int((pred == y).sum())
        seen += n
        np.add.at(per_class_total, y, 1)
        np.add.at(per_class_hit, y, pred == y)
    acc = correct / seen
    per_class = {int(c): float(per_class_hit[c] / per_class_total[c])
                 for c in range(ds.num_classes) if per_class_total[c]}
    return EvalResult(loss=total_loss / seen, accuracy=acc,
                      per_class_accuracy=per_class,
                      error_percent=100.0 * (1.0 - acc))


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    epoch_time_s: float
    effective_lr: float
    eve_d: float | None

    def validate(self, prev_epoch: int) -> None:
        if not (np.isfinite(self.train_loss) and np.isfinite(self.val_loss)):
            raise NumericsError(f"non-finite loss in metrics row for epoch {self.epoch}")
        for a in (self.train_acc, self.val_acc):
            if not 0.0 <= a <= 1.0:
                raise NumericsError(f"accuracy {a} out of [0, 1] at epoch {self.epoch}")
        if self.epoch <= prev_epoch:
            raise ConfigError(f"epoch {self.epoch} not strictly increasing")

    def to_csv(self) -> str:
        d = "" if self.eve_d is None else f"{self.eve_d:.6f}"
        return (f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},"
                f"{self.val_loss:.6f},{self.val_acc:.6f},{self.epoch_time_s:.3f},"
                f"{self.effective_lr:.8g},{d}")


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    checkpoint_path: Path
    metrics_path: Path
    summary: dict
    lsuv_report: LsuvReport | None = None


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


def _opt_state_to_checkpoint(kind, opt_cfg, state: OptimizerState):
    scalars = {"name": kind, "cfg": asdict(opt_cfg), "t": state.t, "d": state.d,
               "f_prev": state.f_prev}
    tensors = {}
    for pfx, buf in (("vel", state.velocity), ("m", state.m), ("v", state.v)):
        for name, arr in buf.items():
            tensors[f"{pfx}:{name}"] = arr
    return scalars, tensors


def _opt_state_from_checkpoint(scalars: dict, tensors: dict,
                               params: dict) -> OptimizerState:
    state = OptimizerState(t=scalars["t"], d=scalars["d"], f_prev=scalars["f_prev"])
    for key, arr in tensors.items():
        pfx, _, name = key.partition(":")
        buf = {"vel": state.velocity, "m": state.m, "v": state.v}[pfx]
        buf[name] = np.ascontiguousarray(arr, dtype=params[name].dtype) \
                      .reshape(params[name].shape)
    return state


def run_training(run_cfg: RunConfig, data_dir: str | Path) -> TrainResult:
    run_cfg.validate()
    out_dir = Path(run_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.bin"
    summary_path = out_dir / "summary.json"

    in_channels, classes = DATASET_SHAPES[run_cfg.dataset["name"]]
    train_raw, val_raw, _ = load_splits(run_cfg, data_dir)
    model_cfg = resolve_model_config(run_cfg, in_channels, classes)
    graph = build_model(model_cfg, dtype=np.float32)
    if graph.params["stem.conv.w"].shape[1] != train_raw.images.shape[1]:
        raise ConfigError(f"model stem expects {graph.params['stem.conv.w'].shape[1]} "
                          f"channels, dataset has {train_raw.images.shape[1]}")

    seeds = np.random.SeedSequence(run_cfg.seed).spawn(4)
    s_init, _, s_loop, s_dropout = seeds

    kind = run_cfg.optimizer["name"]
    opt_cfg = make_opt_config(run_cfg.optimizer)
    config_echo = {"run": run_cfg.to_json_dict(), "model": model_cfg.to_json_dict()}

    lsuv_report = None
    resumed = None
    if run_cfg.resume_from:
        resumed = load_checkpoint(run_cfg.resume_from)
        if resumed.config.get("model") != config_echo["model"]:
            raise ConfigError("resume checkpoint was written for a different model config")
        stats_mean = np.asarray(resumed.norm_stats["mean"])
        stats_std = np.asarray(resumed.norm_stats["std"])
        train = normalize(train_raw, stats_mean, stats_std)
        val = normalize(val_raw, stats_mean, stats_std)
        for name in graph.params:
            graph.params[name] = np.ascontiguousarray(
                resumed.params[name], dtype=graph.dtype).reshape(graph.params[name].shape)
        opt_state = _opt_state_from_checkpoint(resumed.opt_scalars,
                                               resumed.opt_tensors, graph.params)
        loop_rng = _restore_rng(resumed.rng_state["loop"])
        dropout_rng = _restore_rng(resumed.rng_state["dropout"])
        epoch_start = resumed.rng_state["epoch"]
        if epoch_start >= run_cfg.epochs:
            raise ConfigError(f"checkpoint is already at epoch {epoch_start}; nothing "
                              f"to resume for epochs={run_cfg.epochs}")
    else:
        train = normalize(train_raw)
        val = normalize(val_raw, train.channel_mean, train.channel_std)
        if run_cfg.initializer == "baseline":
            init_baseline(graph, s_init)
        else:
            probe_n = min(max(64, run_cfg.batch_size), train.n)
            lsuv_report = lsuv_init(graph, train.images[:probe_n], seed=s_init)
        opt_state = OptimizerState()
        loop_rng = np.random.default_rng(s_loop)
        dropout_rng = np.random.default_rng(s_dropout)
        epoch_start = 0

    scope = l2_scope(graph) if run_cfg.l2 > 0 else set()
    rows: list[MetricsRow] = []
    prev_epoch = epoch_start
    norm_stats = {"mean": [float(v) for v in train.channel_mean],
                  "std": [float(v) for v in train.channel_std]}

    def save_ckpt(epoch: int) -> None:
        scalars, tensors = _opt_state_to_checkpoint(kind, opt_cfg, opt_state)
        ck = Checkpoint(
            config=config_echo,
            params=dict(graph.params),
            opt_scalars=scalars,
            opt_tensors=tensors,
            norm_stats=norm_stats,
            rng_state={"epoch": epoch, "loop": _rng_state(loop_rng),
                       "dropout": _rng_state(dropout_rng)},
            timestamp=time.time() if run_cfg.record_wall_time else 0.0,
        )
        save_checkpoint(ck, ckpt_path)

    def write_summary(status: str, extra: dict | None = None) -> dict:
        summary = {"status": status, "epochs_completed": prev_epoch,
                   "final_val_acc": rows[-1].val_acc if rows else None,
                   "final_val_loss": rows[-1].val_loss if rows else None,
                   "seed": run_cfg.seed, "variant": run_cfg.variant}
        if extra:
            summary.update(extra)
        summary_path.write_text(json.dumps(summary, indent=2) + "\n")
        return summary

    with open(metrics_path, "w") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        metrics.flush()
        try:
            for epoch in range(epoch_start + 1, run_cfg.epochs + 1):
                t0 = time.monotonic()
                loss_sum, acc_sum, seen = 0.0, 0.0, 0
                info = StepInfo(lr=0.0)
                for i, (x, y) in enumerate(batch_iter(train, run_cfg.batch_size,
                                                      "train", loop_rng,
                                                      run_cfg.augment)):
                    loss, acc, grads = graph.forward_backward(x, y, mode="train",
                                                              rng=dropout_rng)
                    if not np.isfinite(loss):
                        raise NumericsError(f"non-finite training loss at epoch "
                                            f"{epoch}, batch {i}")
                    grads = apply_l2(grads, graph.params, run_cfg.l2, scope)
                    info = optimizer_step(kind, opt_cfg, opt_state, graph.params,
                                          grads, loss)
                    n = len(y)
                    loss_sum += loss * n
                    acc_sum += acc * n
                    seen += n
                ev = evaluate(graph, val, run_cfg.batch_size)
                elapsed = time.monotonic() - t0 if run_cfg.record_wall_time else 0.0
                row = MetricsRow(epoch=epoch, train_loss=loss_sum / seen,
                                 train_acc=acc_sum / seen, val_loss=ev.loss,
                                 val_acc=ev.accuracy, epoch_time_s=elapsed,
                                 effective_lr=info.lr, eve_d=info.d)
                row.validate(prev_epoch)
                prev_epoch = epoch
                rows.append(row)
                metrics.write(row.to_csv() + "\n")
                metrics.flush()
                save_ckpt(epoch)
        except KeyboardInterrupt:
            save_ckpt(prev_epoch)
            write_summary("interrupted")
            raise
        except NumericsError as e:
            save_ckpt(prev_epoch)
            write_summary("failed", {"error": str(e)})
            raise

    summary = write_summary("completed")
    result = TrainResult(rows=rows, checkpoint_path=ckpt_path,
                         metrics_path=metrics_path, summary=summary,
                         lsuv_report=lsuv_report)
    return result


def evaluate_checkpoint(ckpt_path: str | Path, split: str, data_dir: str | Path
                        ) -> tuple[EvalResult, dict]:
    """Rebuild a model from a checkpoint and evaluate one dataset split."""
    ck = load_checkpoint(ckpt_path)
    run_cfg = RunConfig.from_json_dict(ck.config["run"])
    model_cfg = ModelConfig.from_json_dict(ck.config["model"])
    graph = build_model(model_cfg, dtype=np.float32)
    for name in graph.params:
        if name not in ck.params:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        graph.params[name] = np.ascontiguousarray(
            ck.params[name], dtype=graph.dtype).reshape(graph.params[name].shape)

    train_raw, val_raw, test_raw = load_splits(run_cfg, data_dir)
    ds_raw = {"train": train_raw, "val": val_raw, "test": test_raw}.get(split)
    if ds_raw is None:
        raise ConfigError(f"split must be train/val/test, got {split!r}")
    if ds_raw.images.shape[1] != graph.params["stem.conv.w"].shape[1]:
        raise ConfigError(f"dataset channels {ds_raw.images.shape[1]} do not match "
                          f"model stem {graph.params['stem.conv.w'].shape[1]}")
    ds = normalize(ds_raw, np.asarray(ck.norm_stats["mean"]),
                   np.asarray(ck.norm_stats["std"]))
    return evaluate(graph, ds, run_cfg.batch_size), ck.config
