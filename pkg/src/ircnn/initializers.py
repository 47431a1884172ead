"""Parameter initialization: Glorot-uniform baseline and the layer-sequential
unit-variance procedure (orthonormalize kernels, then rescale each conv/rcl
kernel until its pre-activation variance on a probe batch is 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InitializationError
from .graph import LayerGraph


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    co, ci, kh, kw = shape
    return ci * kh * kw, co * kh * kw


def init_baseline(graph: LayerGraph, seed: int) -> None:
    """Glorot-uniform kernels (bound sqrt(6/(fan_in+fan_out))), zero biases.

    Draw order follows parameter insertion order, so the same config and seed
    always produce bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    for name, value in graph.params.items():
        if name.endswith(".b"):
            graph.params[name] = np.zeros_like(value)
        else:
            fan_in, fan_out = _fans(value.shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            graph.params[name] = rng.uniform(-bound, bound, size=value.shape) \
                                    .astype(graph.dtype)


def orthonormalize_kernels(graph: LayerGraph, seed: int) -> None:
    """Replace every kernel with a semi-orthogonal draw (biases stay zero).

    The kernel flattened to (out_channels, fan_in) gets orthonormal rows; when
    out_channels exceeds fan_in that is impossible, so the columns are made
    orthonormal instead (the standard orthogonal-init fallback).
    """
    rng = np.random.default_rng(seed)
    for name, value in graph.params.items():
        if name.endswith(".b"):
            graph.params[name] = np.zeros_like(value)
            continue
        co = value.shape[0]
        fan_in = int(np.prod(value.shape[1:]))
        a = rng.standard_normal((max(co, fan_in), min(co, fan_in)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))          # fix the sign ambiguity of QR
        mat = q.T if co <= fan_in else q
        graph.params[name] = mat.reshape(value.shape).astype(graph.dtype)


@dataclass
class LsuvLayerReport:
    node_id: str
    variance: float
    iterations: int
    converged: bool


@dataclass
class LsuvReport:
    layers: list[LsuvLayerReport]

    @property
    def all_converged(self) -> bool:
        return all(l.converged for l in self.layers)

    def __str__(self) -> str:
        lines = [f"{l.node_id:24s} var={l.variance:.6f} iters={l.iterations} "
                 f"{'ok' if l.converged else 'UNCONVERGED'}" for l in self.layers]
        return "\n".join(lines)


def lsuv_init(graph: LayerGraph, probe_batch: np.ndarray, tol_var: float = 0.01,
              max_iters: int = 10, seed: int = 0) -> LsuvReport:
    """Orthonormalize, then visit conv/rcl nodes in topological order and scale
    each kernel by 1/sqrt(variance of its pre-activation on the probe batch)
    until |var - 1| <= tol_var or max_iters is hit.

    Recurrent layers are probed at their step-0 pre-activation; their recurrent
    kernel receives the same scalar so the whole unit keeps its orientation.
    Returns a per-layer report; a zero-variance (dead) layer is an error.
    """
    if probe_batch.shape[0] < 64:
        raise ConfigError(f"lsuv probe batch must have >= 64 samples, got "
                          f"{probe_batch.shape[0]}")
    orthonormalize_kernels(graph, seed)

    reports = []
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        if node.kind not in ("conv", "rcl"):
            continue
        kernels = ([f"{nid}.w"] if node.kind == "conv" else
                   [f"{nid}.w_f", f"{nid}.w_r"])
        var, iters, converged = np.nan, 0, False
        for it in range(1, max_iters + 1):
            run = graph.forward(probe_batch, mode="infer", capture=(nid,), stop_at=nid)
            var = float(run.captured[nid].var())
            iters = it
            if abs(var - 1.0) <= tol_var:
                converged = True
                break
            if var == 0.0:
                raise InitializationError(f"dead layer during lsuv: {nid} has zero "
                                          f"pre-activation variance on the probe batch")
            scale = 1.0 / np.sqrt(var)
            for kname in kernels:
                graph.params[kname] = (graph.params[kname] * scale).astype(graph.dtype)
        else:
            # final variance after the last rescale
            run = graph.forward(probe_batch, mode="infer", capture=(nid,), stop_at=nid)
            var = float(run.captured[nid].var())
            converged = abs(var - 1.0) <= tol_var
        reports.append(LsuvLayerReport(nid, var, iters, converged))
    return LsuvReport(reports)
