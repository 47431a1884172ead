"""Static layer DAG with named parameters and a reverse-mode backward pass.

A :class:`LayerGraph` owns an ordered set of :class:`LayerNode` and a flat
``params`` dict keyed "node_id.suffix". Forward runs nodes in topological
order; backward walks the same order reversed, summing gradient contributions
per node output. The graph plus its parameters is a unit owned by one thread
at a time; forward/backward never mutate parameters.

Node kinds and their attrs:

==============  =======================================  ====================
kind            attrs                                    params
==============  =======================================  ====================
conv            spec: ConvSpec, bias: bool               w, b (if bias)
rcl             spec: ConvSpec, t: int                   w_f, w_r, b
relu            --                                       --
lrn             lrn: LrnAttrs                            --
dropout         rate: float                              --
maxpool         stride, padding                          --
avgpool         stride, padding                          --
gap             --                                       --
concat          --                                       --
residual_add    --                                       --
softmax_xent    --                                       --
==============  =======================================  ====================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers, ops
from .errors import ConfigError, IrcnnError

INPUT = "input"

KINDS = ("conv", "rcl", "relu", "lrn", "dropout", "maxpool", "avgpool", "gap",
         "concat", "residual_add", "softmax_xent")

_ARITY = {"concat": None, "residual_add": 2}  # None = one or more; default 1


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass
class GraphRun:
    """Result of one forward pass (plus caches needed for backward)."""

    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    loss: float | None = None
    accuracy: float | None = None
    grads: dict[str, np.ndarray] | None = None
    captured: dict[str, np.ndarray] = field(default_factory=dict)
    _values: dict[str, np.ndarray] = field(default_factory=dict)
    _caches: dict[str, Any] = field(default_factory=dict)
    _mode: str = "train"
    _labels: np.ndarray | None = None


class LayerGraph:
    """Validated DAG of layer nodes with a parameter store."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype.type not in (np.float32, np.float64):
            raise ConfigError(f"graph dtype must be float32 or float64, got {dtype}")
        self.nodes: dict[str, LayerNode] = {}
        self.params: dict[str, np.ndarray] = {}
        self._order: list[str] | None = None

    # -- construction -------------------------------------------------------

    def add(self, node_id: str, kind: str, inputs: list[str] | str,
            **attrs: Any) -> str:
        if kind not in KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}")
        if node_id in self.nodes or node_id == INPUT:
            raise ConfigError(f"duplicate node id {node_id!r}")
        if isinstance(inputs, str):
            inputs = [inputs]
        self.nodes[node_id] = LayerNode(node_id, kind, list(inputs), attrs)
        self._order = None
        return node_id

    def set_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def param_names_of(self, node_id: str) -> list[str]:
        node = self.nodes[node_id]
        if node.kind == "conv":
            names = [f"{node_id}.w"] + ([f"{node_id}.b"] if node.attrs.get("bias", True) else [])
        elif node.kind == "rcl":
            names = [f"{node_id}.w_f", f"{node_id}.w_r", f"{node_id}.b"]
        else:
            names = []
        return names

    def kernel_param_names(self) -> list[str]:
        """All kernel (non-bias) parameter names, in node order."""
        out = []
        for nid in self.nodes:
            out += [n for n in self.param_names_of(nid) if not n.endswith(".b")]
        return out

    # -- validation ---------------------------------------------------------

    def topo_order(self) -> list[str]:
        if self._order is None:
            indeg = {nid: 0 for nid in self.nodes}
            consumers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
            for node in self.nodes.values():
                for src in node.inputs:
                    if src == INPUT:
                        continue
                    if src not in self.nodes:
                        raise ConfigError(f"node {node.id!r} references unknown input {src!r}")
                    indeg[node.id] += 1
                    consumers[src].append(node.id)
            ready = [nid for nid, d in indeg.items() if d == 0]
            order: list[str] = []
            while ready:
                nid = ready.pop(0)
                order.append(nid)
                for c in consumers[nid]:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        ready.append(c)
            if len(order) != len(self.nodes):
                raise ConfigError("layer graph contains a cycle")
            self._order = order
        return self._order

    def validate(self, training: bool = True) -> None:
        order = self.topo_order()
        loss_nodes = [n for n in self.nodes.values() if n.kind == "softmax_xent"]
        if training:
            if len(loss_nodes) != 1:
                raise ConfigError(f"training graph needs exactly one loss node, "
                                  f"found {len(loss_nodes)}")
            consumed = {src for n in self.nodes.values() for src in n.inputs}
            if loss_nodes[0].id in consumed:
                raise ConfigError("loss node must be terminal")
        for node in self.nodes.values():
            arity = _ARITY.get(node.kind, 1)
            if arity is None:
                if not node.inputs:
                    raise ConfigError(f"{node.id}: concat needs at least one input")
            elif len(node.inputs) != arity:
                raise ConfigError(f"{node.id}: kind {node.kind} takes {arity} input(s), "
                                  f"got {len(node.inputs)}")
            if node.kind == "rcl":
                spec: ops.ConvSpec = node.attrs["spec"]
                if spec.stride != (1, 1) or spec.padding != "same":
                    raise ConfigError(f"{node.id}: rcl requires stride 1, same padding")
                if node.attrs.get("t", 0) < 0:
                    raise ConfigError(f"{node.id}: rcl time steps must be >= 0")
            if node.kind == "dropout" and not 0.0 <= node.attrs["rate"] < 1.0:
                raise ConfigError(f"{node.id}: dropout rate must be in [0, 1)")
        for nid in order:
            for pname in self.param_names_of(nid):
                if pname not in self.params:
                    raise ConfigError(f"parameter {pname!r} is not initialized")

    def loss_node(self) -> LayerNode:
        for node in self.nodes.values():
            if node.kind == "softmax_xent":
                return node
        raise ConfigError("graph has no loss node")

    def count_params(self) -> tuple[int, list[tuple[str, int]]]:
        """Exact parameter total plus a per-node breakdown."""
        rows = []
        for nid in self.nodes:
            size = sum(self.params[p].size for p in self.param_names_of(nid)
                       if p in self.params)
            if self.param_names_of(nid):
                rows.append((nid, size))
        return sum(s for _, s in rows), rows

    # -- execution ----------------------------------------------------------

    def _node_forward(self, node: LayerNode, xs: list[np.ndarray], mode: str,
                      rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        k = node.kind
        if k == "conv":
            spec = node.attrs["spec"]
            w = self.params[f"{node.id}.w"]
            b = self.params.get(f"{node.id}.b") if node.attrs.get("bias", True) else None
            return ops.conv2d(xs[0], w, b, spec), xs[0]
        if k == "rcl":
            y, cache = layers.rcl_forward(xs[0], self.params[f"{node.id}.w_f"],
                                          self.params[f"{node.id}.w_r"],
                                          self.params[f"{node.id}.b"],
                                          node.attrs["t"], node.attrs["spec"])
            return y, cache
        if k == "relu":
            return layers.relu(xs[0]), xs[0]
        if k == "lrn":
            return layers.lrn(xs[0], node.attrs["lrn"]), xs[0]
        if k == "dropout":
            y, mask = layers.dropout(xs[0], node.attrs["rate"], mode, rng)
            return y, mask
        if k == "maxpool":
            return ops.pool2d(xs[0], "max", stride=node.attrs["stride"],
                              padding=node.attrs["padding"]), xs[0]
        if k == "avgpool":
            return ops.pool2d(xs[0], "avg", stride=node.attrs["stride"],
                              padding=node.attrs["padding"]), xs[0]
        if k == "gap":
            return ops.global_avg_pool(xs[0]), xs[0].shape
        if k == "concat":
            return ops.concat_channels(xs), [x.shape[1] for x in xs]
        if k == "residual_add":
            if xs[0].shape != xs[1].shape:
                raise ConfigError(f"{node.id}: residual_add shapes differ: "
                                  f"{xs[0].shape} vs {xs[1].shape}")
            return xs[0] + xs[1], None
        raise IrcnnError(f"unhandled kind {k}")  # pragma: no cover

    def forward(self, x: np.ndarray, labels: np.ndarray | None = None,
                mode: str = "train", rng: np.random.Generator | None = None,
                capture: tuple[str, ...] = (), stop_at: str | None = None) -> GraphRun:
        """Run the graph on a batch.

        In infer mode dropout nodes are the identity. ``capture`` collects the
        outputs of the named nodes (for an rcl node, its step-0 pre-activation,
        which is what initialization probes). ``stop_at`` ends the pass early
        once that node has run.
        """
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        run = GraphRun(_mode=mode, _labels=labels)
        values: dict[str, np.ndarray] = {INPUT: x}
        loss_id = None
        for nid in self.topo_order():
            node = self.nodes[nid]
            if node.kind == "softmax_xent":
                loss_id = nid
                run.logits = values[node.inputs[0]]
                if labels is not None:
                    run.loss, run.probs, grad_logits = layers.softmax_xent(
                        run.logits, labels)
                    run.accuracy = float((run.probs.argmax(axis=1) == labels).mean())
                    run._caches[nid] = grad_logits
            else:
                xs = [values[s] for s in node.inputs]
                y, cache = self._node_forward(node, xs, mode, rng)
                values[nid] = y
                run._caches[nid] = cache
                if nid in capture:
                    if node.kind == "rcl":
                        run.captured[nid] = cache["pre"][0]
                    else:
                        run.captured[nid] = y
            if stop_at is not None and nid == stop_at:
                break
        run._values = values
        if run.logits is None and loss_id is None and stop_at is None:
            raise ConfigError("graph has no loss node; cannot produce logits")
        return run

    def _node_backward(self, node: LayerNode, run: GraphRun, grad: np.ndarray,
                       grads: dict[str, np.ndarray]) -> list[np.ndarray]:
        k = node.kind
        cache = run._caches[node.id]
        if k == "conv":
            spec = node.attrs["spec"]
            w = self.params[f"{node.id}.w"]
            gx, gw, gb = ops.conv2d_grad(cache, w, spec, grad)
            grads[f"{node.id}.w"] = gw
            if node.attrs.get("bias", True):
                grads[f"{node.id}.b"] = gb
            return [gx]
        if k == "rcl":
            gx, gwf, gwr, gb = layers.rcl_backward(cache, grad)
            grads[f"{node.id}.w_f"] = gwf
            grads[f"{node.id}.w_r"] = gwr
            grads[f"{node.id}.b"] = gb
            return [gx]
        if k == "relu":
            return [layers.relu_grad(cache, grad)]
        if k == "lrn":
            return [layers.lrn_grad(cache, node.attrs["lrn"], grad)]
        if k == "dropout":
            return [layers.dropout_grad(cache, node.attrs["rate"], grad)]
        if k == "maxpool":
            return [ops.pool2d_grad(cache, "max", grad, stride=node.attrs["stride"],
                                    padding=node.attrs["padding"])]
        if k == "avgpool":
            return [ops.pool2d_grad(cache, "avg", grad, stride=node.attrs["stride"],
                                    padding=node.attrs["padding"])]
        if k == "gap":
            return [ops.global_avg_pool_grad(cache, grad)]
        if k == "concat":
            return ops.split_channels(grad, cache)
        if k == "residual_add":
            return [grad, grad]
        raise IrcnnError(f"unhandled kind {k}")  # pragma: no cover

    def backward(self, run: GraphRun) -> dict[str, np.ndarray]:
        """Reverse pass over a completed training forward; returns param grads."""
        if run._mode != "train":
            raise IrcnnError("backward requires a train-mode forward")
        if run._labels is None:
            raise IrcnnError("backward requires a forward pass with labels")
        loss = self.loss_node()
        node_grads: dict[str, np.ndarray] = {loss.inputs[0]: run._caches[loss.id]}
        grads: dict[str, np.ndarray] = {}
        for nid in reversed(self.topo_order()):
            node = self.nodes[nid]
            if node.kind == "softmax_xent" or nid not in node_grads:
                continue
            input_grads = self._node_backward(node, run, node_grads.pop(nid), grads)
            for src, g in zip(node.inputs, input_grads):
                if src == INPUT:
                    continue
                if src in node_grads:
                    node_grads[src] = node_grads[src] + g
                else:
                    node_grads[src] = g
        run.grads = grads
        return grads

    def forward_backward(self, x: np.ndarray, labels: np.ndarray, mode: str = "train",
                         rng: np.random.Generator | None = None
                         ) -> tuple[float, float, dict[str, np.ndarray] | None]:
        """One step: (loss, accuracy, grads). Infer mode produces no gradients."""
        run = self.forward(x, labels, mode=mode, rng=rng)
        grads = self.backward(run) if mode == "train" else None
        return run.loss, run.accuracy, grads
