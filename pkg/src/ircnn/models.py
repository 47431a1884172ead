"""Model assembly: multi-branch recurrent blocks, transaction blocks, and the
three network variants built from them.

Variants:

* ``ircnn`` — each branch unit is a recurrent convolution layer (two kernels,
  one bias, T unroll steps).
* ``ein``   — each unit is a stack of two unshared convolutions of the same
  kernel size and width (first bias-free, second biased), ReLU after each.
  Parameter count is exactly that of the recurrent unit.
* ``eirn``  — ein plus a shortcut adding each block's input to its output,
  with a bias-free 1x1 projection when the channel counts differ.

Block branches: 1x1 unit, 3x3 unit, and 3x3/stride-1 average pool feeding a
1x1 unit; each branch goes through response normalization and dropout before
channel concatenation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import INPUT, LayerGraph
from .layers import LrnAttrs
from .ops import ConvSpec

VARIANTS = ("ircnn", "ein", "eirn")


@dataclass(frozen=True)
class IrcnnBlockConfig:
    """Branch widths (output channels per branch) and unroll depth of one block."""

    in_channels: int
    c_1x1: int
    c_3x3: int
    c_pool_1x1: int
    t: int = 2

    @property
    def out_channels(self) -> int:
        return self.c_1x1 + self.c_3x3 + self.c_pool_1x1

    def validate(self) -> None:
        if min(self.in_channels, self.c_1x1, self.c_3x3, self.c_pool_1x1) < 1:
            raise ConfigError(f"block widths/in_channels must be >= 1: {self}")
        if self.t < 0:
            raise ConfigError(f"block time steps must be >= 0: {self}")


@dataclass(frozen=True)
class TransactionBlockConfig:
    """Conv stage between blocks with optional pooling and dropout."""

    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    has_maxpool: bool = False
    has_gap: bool = False
    dropout: float = 0.5

    def validate(self) -> None:
        if self.out_channels < 1:
            raise ConfigError(f"transaction out_channels must be >= 1: {self}")
        if self.has_maxpool and self.has_gap:
            raise ConfigError("transaction block cannot have both max pooling and "
                              "global average pooling")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"transaction dropout must be in [0, 1): {self.dropout}")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a full network."""

    variant: str
    in_channels: int
    classes: int
    stem_channels: int
    pairs: tuple[tuple[IrcnnBlockConfig, TransactionBlockConfig], ...]
    preset: str | None = None
    block_dropout: float = 0.5
    lrn: LrnAttrs = field(default_factory=LrnAttrs)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.in_channels < 1 or self.classes < 2 or self.stem_channels < 1:
            raise ConfigError(f"bad channel/class counts in {self}")
        if not self.pairs:
            raise ConfigError("model needs at least one (block, transaction) pair")
        if not 0.0 <= self.block_dropout < 1.0:
            raise ConfigError(f"block dropout must be in [0, 1): {self.block_dropout}")
        cur = self.stem_channels
        for i, (blk, trans) in enumerate(self.pairs):
            blk.validate()
            trans.validate()
            if blk.in_channels != cur:
                raise ConfigError(f"pair {i}: block expects {blk.in_channels} input "
                                  f"channels but receives {cur}")
            cur = trans.out_channels
        if not self.pairs[-1][1].has_gap:
            raise ConfigError("final transaction block must use global average pooling")
        for _, trans in self.pairs[:-1]:
            if trans.has_gap:
                raise ConfigError("only the final transaction block may use global "
                                  "average pooling")
        if self.preset == "paper" and len(self.pairs) != 3:
            raise ConfigError("paper preset has exactly three block pairs")

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)

    def with_time_steps(self, t: int) -> "ModelConfig":
        pairs = tuple((replace(blk, t=t), trans) for blk, trans in self.pairs)
        return replace(self, pairs=pairs)

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "preset": self.preset,
            "variant": self.variant,
            "in_channels": self.in_channels,
            "classes": self.classes,
            "stem_channels": self.stem_channels,
            "block_dropout": self.block_dropout,
            "lrn": asdict(self.lrn),
            "pairs": [
                {"block": asdict(blk),
                 "transaction": {**asdict(trans), "kernel": list(trans.kernel)}}
                for blk, trans in self.pairs
            ],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ModelConfig":
        try:
            pairs = tuple(
                (IrcnnBlockConfig(**p["block"]),
                 TransactionBlockConfig(**{**p["transaction"],
                                           "kernel": tuple(p["transaction"]["kernel"])}))
                for p in d["pairs"])
            cfg = ModelConfig(
                variant=d["variant"], in_channels=d["in_channels"], classes=d["classes"],
                stem_channels=d["stem_channels"], pairs=pairs, preset=d.get("preset"),
                block_dropout=d.get("block_dropout", 0.5),
                lrn=LrnAttrs(**d["lrn"]) if "lrn" in d else LrnAttrs())
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed model config: {e}") from e
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "ModelConfig":
        return ModelConfig.from_json_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _zeros(g: LayerGraph, name: str, shape: tuple[int, ...]) -> None:
    g.set_param(name, np.zeros(shape, dtype=g.dtype))


def _add_unit(g: LayerGraph, prefix: str, in_id: str, in_ch: int, width: int,
              kernel: tuple[int, int], t: int, variant: str) -> str:
    """One branch unit: a recurrent conv layer, or its two-conv equivalent."""
    spec = ConvSpec(kernel=kernel, out_channels=width)
    if variant == "ircnn":
        nid = g.add(f"{prefix}.rcl", "rcl", in_id, spec=spec, t=t, l2_scope=True)
        _zeros(g, f"{nid}.w_f", (width, in_ch, *kernel))
        _zeros(g, f"{nid}.w_r", (width, width, *kernel))
        _zeros(g, f"{nid}.b", (width,))
        return nid
    c1 = g.add(f"{prefix}.conv1", "conv", in_id, spec=spec, bias=False, l2_scope=True)
    _zeros(g, f"{c1}.w", (width, in_ch, *kernel))
    r1 = g.add(f"{prefix}.relu1", "relu", c1)
    spec2 = ConvSpec(kernel=kernel, out_channels=width)
    c2 = g.add(f"{prefix}.conv2", "conv", r1, spec=spec2, bias=True, l2_scope=True)
    _zeros(g, f"{c2}.w", (width, width, *kernel))
    _zeros(g, f"{c2}.b", (width,))
    return g.add(f"{prefix}.relu2", "relu", c2)


def build_ircnn_block(cfg: IrcnnBlockConfig, graph: LayerGraph | None = None,
                      in_id: str = INPUT, prefix: str = "block",
                      variant: str = "ircnn", dropout_rate: float = 0.5,
                      lrn_attrs: LrnAttrs = LrnAttrs()) -> tuple[LayerGraph, str]:
    """Append one multi-branch block; returns (graph, output node id).

    Branch a: 1x1 unit. Branch b: 3x3 unit. Branch c: 3x3/stride-1 same-pad
    average pool, then a 1x1 unit. Each branch: unit -> lrn -> dropout.
    Outputs are channel-concatenated in (a, b, c) order.
    """
    cfg.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    g = graph if graph is not None else LayerGraph()
    branch_out = []
    for tag, width, kernel, src in (
            ("a", cfg.c_1x1, (1, 1), in_id),
            ("b", cfg.c_3x3, (3, 3), in_id),
            ("c", cfg.c_pool_1x1, (1, 1), None)):
        if src is None:
            src = g.add(f"{prefix}.c.pool", "avgpool", in_id, stride=(1, 1), padding="same")
        unit = _add_unit(g, f"{prefix}.{tag}", src, cfg.in_channels, width, kernel,
                         cfg.t, variant)
        norm = g.add(f"{prefix}.{tag}.lrn", "lrn", unit, lrn=lrn_attrs)
        drop = g.add(f"{prefix}.{tag}.drop", "dropout", norm, rate=dropout_rate)
        branch_out.append(drop)
    out = g.add(f"{prefix}.cat", "concat", branch_out)
    return g, out


def build_transaction_block(cfg: TransactionBlockConfig, graph: LayerGraph | None = None,
                            in_id: str = INPUT, in_channels: int = 1,
                            prefix: str = "trans") -> tuple[LayerGraph, str]:
    """Append conv(+ReLU), optional 3x3/stride-2 max pool, optional global
    average pool, then dropout; returns (graph, output node id)."""
    cfg.validate()
    g = graph if graph is not None else LayerGraph()
    spec = ConvSpec(kernel=cfg.kernel, out_channels=cfg.out_channels)
    conv = g.add(f"{prefix}.conv", "conv", in_id, spec=spec, bias=True)
    _zeros(g, f"{conv}.w", (cfg.out_channels, in_channels, *cfg.kernel))
    _zeros(g, f"{conv}.b", (cfg.out_channels,))
    cur = g.add(f"{prefix}.relu", "relu", conv)
    if cfg.has_maxpool:
        cur = g.add(f"{prefix}.maxpool", "maxpool", cur, stride=(2, 2), padding="same")
    if cfg.has_gap:
        cur = g.add(f"{prefix}.gap", "gap", cur)
    cur = g.add(f"{prefix}.drop", "dropout", cur, rate=cfg.dropout)
    return g, cur


def build_model(cfg: ModelConfig, dtype=np.float32) -> LayerGraph:
    """Assemble the full network: stem conv, (block, transaction) pairs, and a
    1x1 classifier conv feeding softmax cross-entropy. Parameters are created
    zero-filled; run an initializer before training."""
    cfg.validate()
    g = LayerGraph(dtype=dtype)

    stem_spec = ConvSpec(kernel=(3, 3), out_channels=cfg.stem_channels)
    g.add("stem.conv", "conv", INPUT, spec=stem_spec, bias=True)
    _zeros(g, "stem.conv.w", (cfg.stem_channels, cfg.in_channels, 3, 3))
    _zeros(g, "stem.conv.b", (cfg.stem_channels,))
    cur = g.add("stem.relu", "relu", "stem.conv")
    cur_ch = cfg.stem_channels

    for i, (blk, trans) in enumerate(cfg.pairs):
        block_in = cur
        _, cur = build_ircnn_block(blk, g, in_id=block_in, prefix=f"b{i}",
                                   variant=cfg.variant, dropout_rate=cfg.block_dropout,
                                   lrn_attrs=cfg.lrn)
        if cfg.variant == "eirn":
            shortcut = block_in
            if blk.in_channels != blk.out_channels:
                proj_spec = ConvSpec(kernel=(1, 1), out_channels=blk.out_channels)
                shortcut = g.add(f"b{i}.proj", "conv", block_in, spec=proj_spec, bias=False)
                _zeros(g, f"b{i}.proj.w", (blk.out_channels, blk.in_channels, 1, 1))
            cur = g.add(f"b{i}.add", "residual_add", [cur, shortcut])
        cur_ch = blk.out_channels
        _, cur = build_transaction_block(trans, g, in_id=cur, in_channels=cur_ch,
                                         prefix=f"t{i}")
        cur_ch = trans.out_channels

    head_spec = ConvSpec(kernel=(1, 1), out_channels=cfg.classes)
    g.add("head.conv", "conv", cur, spec=head_spec, bias=True)
    _zeros(g, "head.conv.w", (cfg.classes, cur_ch, 1, 1))
    _zeros(g, "head.conv.b", (cfg.classes,))
    g.add("loss", "softmax_xent", "head.conv")
    g.validate()
    return g


def count_params(graph: LayerGraph) -> tuple[int, list[tuple[str, int]]]:
    return graph.count_params()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset_tiny(in_channels: int = 1, classes: int = 10, variant: str = "ircnn",
                time_steps: int = 2) -> ModelConfig:
    """Desk-scale preset: 12-channel trunk, (4,4,4) branch widths everywhere.

    Block input and output channel counts match, so the eirn shortcuts are
    parameter-free and all three variants have identical parameter counts.
    Dropout is 0.1 rather than the full-scale 0.5: with 4-channel branches a
    half-rate mask is mostly noise and reliably kills desk-scale training runs.
    """
    def pair(has_maxpool=False, has_gap=False):
        return (IrcnnBlockConfig(in_channels=12, c_1x1=4, c_3x3=4, c_pool_1x1=4,
                                 t=time_steps),
                TransactionBlockConfig(out_channels=12, has_maxpool=has_maxpool,
                                       has_gap=has_gap, dropout=0.1))
    return ModelConfig(variant=variant, in_channels=in_channels, classes=classes,
                       stem_channels=12,
                       pairs=(pair(has_maxpool=True), pair(), pair(has_gap=True)),
                       preset="tiny", block_dropout=0.1)


def preset_paper(in_channels: int = 3, classes: int = 100, variant: str = "ircnn",
                 time_steps: int = 2) -> ModelConfig:
    """Full-scale preset; widths chosen to land the parameter budget."""
    widths = [(64, 96, 64), (96, 128, 96), (128, 160, 128)]
    trans = [(128, True, False), (256, False, False), (240, False, True)]
    pairs = []
    cur = 64
    for (a, b, c), (tw, mp, gp) in zip(widths, trans):
        pairs.append((IrcnnBlockConfig(in_channels=cur, c_1x1=a, c_3x3=b, c_pool_1x1=c,
                                       t=time_steps),
                      TransactionBlockConfig(out_channels=tw, has_maxpool=mp, has_gap=gp)))
        cur = tw
    return ModelConfig(variant=variant, in_channels=in_channels, classes=classes,
                       stem_channels=64, pairs=tuple(pairs), preset="paper")


PRESETS = {"tiny": preset_tiny, "paper": preset_paper}


def make_preset(name: str, **kwargs) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)
