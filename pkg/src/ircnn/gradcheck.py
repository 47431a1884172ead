"""Whole-graph gradient verification against central finite differences.

The analytic gradients come from one train-mode backward pass; the numeric
side perturbs single parameter coordinates and re-runs the forward loss. Every
dropout node must be at rate 0 so the loss is a deterministic function of the
parameters (the check covers every other layer kind).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import LayerGraph

MAX_GRADCHECK_PARAMS = 50_000


def randomize_for_check(graph: LayerGraph, seed: int) -> None:
    """Move parameters to a generic point for gradient checking.

    Kernels get the baseline init; biases get small nonzero draws. Zero biases
    are a degenerate point: convolutions of ReLU-sparse inputs land exactly on
    ReLU kinks (output 0.0 wherever the input window is all zero), where the
    loss is not differentiable and central differences measure the subgradient
    midpoint at any step size.
    """
    from .initializers import init_baseline

    init_baseline(graph, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    for name, p in graph.params.items():
        if name.endswith(".b"):
            graph.params[name] = rng.uniform(-0.1, 0.1, size=p.shape) \
                                    .astype(graph.dtype)


@dataclass
class GradCheckRow:
    name: str
    coords_checked: int
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_text(self) -> str:
        lines = [f"{'tensor':28s} {'coords':>6s} {'max_rel_err':>12s}  status"]
        for r in self.rows:
            lines.append(f"{r.name:28s} {r.coords_checked:6d} {r.max_rel_err:12.3e}  "
                         f"{'pass' if r.passed else 'FAIL'}")
        lines.append(f"RESULT {'pass' if self.passed else 'FAIL'} "
                     f"(tolerance {self.rel_tol:g})")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def check_graph_gradients(graph: LayerGraph, x: np.ndarray, labels: np.ndarray,
                          min_coords: int = 200, step: float = 1e-5,
                          rel_tol: float = 1e-4, seed: int = 0,
                          grad_hook=None) -> GradCheckReport:
    """Compare analytic parameter gradients with finite differences.

    Checks a random subsample of at least ``min_coords`` coordinates per
    kernel tensor and every bias coordinate. ``grad_hook(name, grad)`` lets
    tests inject faults into the analytic side.
    """
    if graph.dtype != np.float64:
        raise ConfigError("gradient checking requires a float64 graph")
    total = sum(p.size for p in graph.params.values())
    if total > MAX_GRADCHECK_PARAMS:
        raise ConfigError(f"gradient check limited to {MAX_GRADCHECK_PARAMS} "
                          f"parameters, model has {total}")
    for nid, node in graph.nodes.items():
        if node.kind == "dropout" and node.attrs["rate"] != 0.0:
            raise ConfigError(f"gradient check requires dropout rate 0 (node {nid!r})")

    run = graph.forward(x, labels, mode="train")
    grads = graph.backward(run)
    rng = np.random.default_rng(seed)

    rows = []
    for name in graph.params:
        analytic = grads[name]
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        p = graph.params[name]
        flat = p.reshape(-1)
        if name.endswith(".b") or flat.size <= min_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=min_coords, replace=False)
        def central_diff(idx: int, h: float) -> float:
            orig = flat[idx]
            flat[idx] = orig + h
            hi = graph.forward(x, labels, mode="train").loss
            flat[idx] = orig - h
            lo = graph.forward(x, labels, mode="train").loss
            flat[idx] = orig
            return (hi - lo) / (2.0 * h)

        flat_analytic = analytic.reshape(-1)
        err = 0.0
        for idx in coords:
            a = flat_analytic[idx]
            e = float(_rel_err(np.asarray(a), np.asarray(central_diff(idx, step))))
            # a ReLU kink inside the +-step bracket corrupts the difference
            # quotient; shrinking the step moves the bracket off the kink, while
            # a genuinely wrong gradient keeps failing at every step
            for h in (step / 10.0, step / 100.0):
                if e < rel_tol:
                    break
                e = min(e, float(_rel_err(np.asarray(a),
                                          np.asarray(central_diff(idx, h)))))
            err = max(err, e)
        rows.append(GradCheckRow(name=name, coords_checked=int(coords.size),
                                 max_rel_err=err, passed=err < rel_tol))
    return GradCheckReport(rows=rows, rel_tol=rel_tol)
