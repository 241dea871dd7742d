"""Inference latency harness: warmup, monotonic timing, percentiles.

Each resolution is padded up to the stride tile (multiples of 32), a fixed
random input is allocated once, the model runs untimed warmup iterations,
and then the timed iterations measure forward passes only (optionally the
end-to-end path including the x8 upsample and argmax). The garbage
collector is paused inside the timed region and the input is reused, so
the region performs no Python-side allocation beyond numpy's own
temporaries; a per-allocation hook is not available on CPython without
distorting the timings, so that property is best-effort by construction.
"""

from __future__ import annotations

import gc
import json
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import graph, network
from .config import EngineConfig, config_hash
from .graph import ParamStore
from .tensor import Rng, Tensor

_INPUT_SALT = 0xBE7C


def pad_to_tile(w: int, h: int, tile: int = 32) -> tuple[int, int]:
    return (-(-w // tile) * tile, -(-h // tile) * tile)


@dataclass
class BenchRow:
    nominal: tuple[int, int]   # (w, h) as configured
    padded: tuple[int, int]    # (w, h) actually run
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    environment: str
    config_hash: int
    e2e: bool

    def text_table(self) -> str:
        header = (f"{'size':>12}{'padded':>12}{'mean ms':>12}"
                  f"{'median ms':>12}{'p95 ms':>12}{'fps':>10}")
        lines = [f"# {self.environment}",
                 f"# config_hash {self.config_hash:#018x}"
                 f"{'  (end-to-end)' if self.e2e else '  (forward only)'}",
                 header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.nominal[0]}x{r.nominal[1]:<6}".rjust(12)
                + f"{r.padded[0]}x{r.padded[1]:<6}".rjust(12)
                + f"{r.mean_ms:>12.3f}{r.median_ms:>12.3f}"
                + f"{r.p95_ms:>12.3f}{r.fps:>10.3f}"
            )
        return "\n".join(lines)

    def to_json(self) -> str:
        obj = {
            "environment": self.environment,
            "config_hash": self.config_hash,
            "e2e": self.e2e,
            "rows": [
                {
                    "nominal": list(r.nominal), "padded": list(r.padded),
                    "mean_ms": r.mean_ms, "median_ms": r.median_ms,
                    "p95_ms": r.p95_ms, "fps": r.fps,
                }
                for r in self.rows
            ],
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def environment_descriptor() -> str:
    return (f"{platform.platform()} python {platform.python_version()} "
            f"numpy {np.__version__} cpus {os.cpu_count()}")


def run_bench(cfg: EngineConfig, store: ParamStore | None = None,
              e2e: bool = False, echo=None) -> BenchReport:
    """Time inference at every configured resolution.

    With no store, weights are freshly initialized from the config seed
    (latency does not depend on weight values). fps is defined as
    1000 / mean_ms exactly.
    """
    net = network.build_network(cfg.model, train=False)
    if store is None:
        store = ParamStore()
        graph.init_params(net.specs, store, Rng(cfg.seed))
    rows = []
    for res_i, (w, h) in enumerate(cfg.bench.resolutions):
        pw, ph = pad_to_tile(w, h)
        rng = Rng(cfg.seed).split(_INPUT_SALT).split(res_i)
        x = rng.normal(3 * ph * pw, std=50.0).reshape(1, 3, ph, pw).astype(np.float32)
        run = graph.GraphRun(net.specs, store, mode="infer")

        def one_pass():
            values = run.forward({net.input: x})
            if e2e:
                return network.predict_full_res(
                    Tensor(values[net.main_logits]), ph, pw
                )
            return values[net.main_logits]

        for _ in range(cfg.bench.warmup_iters):
            one_pass()
        times_ms = np.empty(cfg.bench.timed_iters, dtype=np.float64)
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for t in range(cfg.bench.timed_iters):
                t0 = time.perf_counter()
                one_pass()
                times_ms[t] = (time.perf_counter() - t0) * 1000.0
        finally:
            if gc_was_enabled:
                gc.enable()
        mean_ms = float(times_ms.mean())
        row = BenchRow(
            nominal=(w, h), padded=(pw, ph),
            mean_ms=mean_ms,
            median_ms=float(np.median(times_ms)),
            p95_ms=float(np.percentile(times_ms, 95.0)),
            fps=1000.0 / mean_ms,
        )
        rows.append(row)
        if echo is not None:
            echo(f"{w}x{h}: mean {row.mean_ms:.2f} ms  fps {row.fps:.2f}")
    return BenchReport(
        rows=rows, environment=environment_descriptor(),
        config_hash=config_hash(cfg), e2e=e2e,
    )
