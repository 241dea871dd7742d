"""Static efficiency accounting: parameters, MACs, and FLOPs per layer.

Counting conventions (mirrored exactly by the runtime instrumentation in
the graph executor, which tallies from live arrays during a forward pass):

  conv     params = c_out*(c_in/groups)*kh*kw (+ c_out with bias);
           macs = weight_params * n * h_out * w_out; flops = 2*macs
  bn       params = 2*c (scale and shift); flops = 2*elements
  relu     flops = elements
  sigmoid  flops = 4*elements
  gap      flops = in_elements + out_elements
  upsample flops = 7*out_elements (4 multiplies + 3 adds per output)
  add/mul  flops = out_elements
  concat   free (memory movement only)

Only conv rows carry MACs, so "flops == 2*macs" holds exactly there. A
conv-only total reproduces the stricter convention many tools use. Both
MAC and FLOP totals are always reported because published efficiency
figures rarely say which one they are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import graph
from .errors import AnalysisError
from .graph import LayerSpec, OpCounter, ParamStore
from .tensor import Rng


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    output_shape: tuple[int, int, int, int]
    params: int
    macs: int
    flops: int


@dataclass
class CostReport:
    rows: list[CostRow]
    totals: tuple[int, int, int]       # (params, macs, flops)
    conv_totals: tuple[int, int, int]  # conv rows only
    input_shapes: dict[str, tuple[int, int, int, int]]
    note: str = ""

    def text_table(self) -> str:
        lines = []
        if self.note:
            lines.append(f"# {self.note}")
        for name, shape in sorted(self.input_shapes.items()):
            lines.append(f"# input {name}: {'x'.join(str(d) for d in shape)}")
        header = f"{'layer':<24}{'output':>18}{'params':>14}{'macs':>16}{'flops':>16}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            shape = "x".join(str(d) for d in r.output_shape)
            lines.append(
                f"{r.name:<24}{shape:>18}{r.params:>14,}{r.macs:>16,}{r.flops:>16,}"
            )
        lines.append("-" * len(header))
        p, m, f = self.totals
        lines.append(f"{'total':<24}{'':>18}{p:>14,}{m:>16,}{f:>16,}")
        p, m, f = self.conv_totals
        lines.append(f"{'total (conv only)':<24}{'':>18}{p:>14,}{m:>16,}{f:>16,}")
        return "\n".join(lines)

    def to_json(self) -> str:
        obj = {
            "note": self.note,
            "inputs": {k: list(v) for k, v in self.input_shapes.items()},
            "rows": [
                {
                    "name": r.name, "kind": r.kind,
                    "output_shape": list(r.output_shape),
                    "params": r.params, "macs": r.macs, "flops": r.flops,
                }
                for r in self.rows
            ],
            "totals": dict(zip(("params", "macs", "flops"), self.totals)),
            "conv_totals": dict(zip(("params", "macs", "flops"), self.conv_totals)),
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _row_for(spec: LayerSpec, in_shapes: list[tuple], out_shape: tuple) -> CostRow:
    n, c, h, w = out_shape
    out_elems = n * c * h * w
    params = macs = flops = 0
    if spec.kind == "conv":
        c_in = in_shapes[0][1]
        wparams = spec.out_channels * (c_in // spec.groups) * spec.kernel * spec.kernel
        params = wparams + (spec.out_channels if spec.bias else 0)
        macs = wparams * n * h * w
        flops = 2 * macs
    elif spec.kind == "bn":
        params = 2 * c
        flops = 2 * out_elems
    elif spec.kind == "relu":
        flops = out_elems
    elif spec.kind == "sigmoid":
        flops = 4 * out_elems
    elif spec.kind == "gap":
        ish = in_shapes[0]
        flops = ish[0] * ish[1] * ish[2] * ish[3] + out_elems
    elif spec.kind == "upsample":
        flops = 7 * out_elems
    elif spec.kind in ("add", "mul"):
        flops = out_elems
    elif spec.kind == "concat":
        pass
    else:
        raise AnalysisError(f"no cost model for layer kind {spec.kind!r}")
    return CostRow(
        name=spec.name, kind=spec.kind, output_shape=tuple(out_shape),
        params=int(params), macs=int(macs), flops=int(flops),
    )


def count_layer(spec: LayerSpec, input_shape) -> CostRow:
    """Cost of one layer given its (first) input shape.

    Binary layers accept a dict {value name: shape}; unary layers may pass
    the plain 4-tuple.
    """
    if isinstance(input_shape, dict):
        shapes = dict(input_shape)
    else:
        shapes = {spec.inputs[0]: tuple(input_shape)}
    all_shapes = dict(shapes)
    out_shape = graph._infer_one(spec, all_shapes)
    return _row_for(spec, [shapes[i] for i in spec.inputs], out_shape)


def count_model(specs, input_shapes: dict) -> CostReport:
    """Per-layer costs in topological order plus exact integer totals.

    An empty model is a valid degenerate case with all-zero totals.
    """
    specs = list(specs)
    if not specs:
        return CostReport(
            rows=[], totals=(0, 0, 0), conv_totals=(0, 0, 0),
            input_shapes={k: tuple(v) for k, v in input_shapes.items()},
        )
    shapes = graph.infer_shapes(specs, input_shapes)
    rows = []
    for spec in specs:
        rows.append(_row_for(
            spec, [shapes[i] for i in spec.inputs], shapes[spec.output]
        ))
    totals = (
        sum(r.params for r in rows), sum(r.macs for r in rows),
        sum(r.flops for r in rows),
    )
    conv = [r for r in rows if r.kind == "conv"]
    conv_totals = (
        sum(r.params for r in conv), sum(r.macs for r in conv),
        sum(r.flops for r in conv),
    )
    return CostReport(
        rows=rows, totals=totals, conv_totals=conv_totals,
        input_shapes={k: tuple(v) for k, v in input_shapes.items()},
    )


@dataclass
class VerifyMismatch:
    name: str
    static: tuple[int, int]    # (macs, flops)
    measured: tuple[int, int]


@dataclass
class VerifyReport:
    mismatches: list[VerifyMismatch]
    trials: int

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def describe(self) -> str:
        if self.ok:
            return f"static and instrumented counts agree over {self.trials} trial(s)"
        lines = [f"{len(self.mismatches)} row(s) disagree:"]
        for m in self.mismatches:
            lines.append(
                f"  {m.name}: static macs={m.static[0]} flops={m.static[1]}"
                f" vs measured macs={m.measured[0]} flops={m.measured[1]}"
            )
        return "\n".join(lines)


def verify_counts(specs, input_shapes: dict, trials: int = 1, seed: int = 0) -> VerifyReport:
    """Compare the static cost table against instrumented execution.

    Runs the graph on random inputs with the executor's op counter enabled
    and demands exact per-row agreement on MACs and FLOPs. Use small shapes;
    this actually executes the model.
    """
    static = {r.name: (r.macs, r.flops) for r in count_model(specs, input_shapes).rows}
    mismatches: dict[str, VerifyMismatch] = {}
    rng = Rng(seed)
    for t in range(trials):
        store = ParamStore()
        graph.init_params(specs, store, rng.split(t))
        inputs = {
            name: rng.split(1000 + t).normal(int(np.prod(shape)))
            .reshape(shape).astype(np.float32)
            for name, shape in input_shapes.items()
        }
        counter = OpCounter()
        graph.run_forward(specs, store, inputs, mode="infer", counter=counter)
        for name, expected in static.items():
            got = counter.rows.get(name, (0, 0))
            if got != expected and name not in mismatches:
                mismatches[name] = VerifyMismatch(name=name, static=expected, measured=got)
    return VerifyReport(mismatches=list(mismatches.values()), trials=trials)
