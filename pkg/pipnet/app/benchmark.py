"""
Analytic multiply-accumulate counts and wall-clock latency of a network.
"""
import logging
import os
import platform
import time
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .exceptions import ConfigurationError
from .networks import NetworkGraph
from .schemas import FlopReport, LatencyReport, LayerFlops
from .tensor_engine import SeededRng, Tensor

logger = logging.getLogger(__name__)

ZERO_COST_KINDS = {"relu", "pool", "affine"}


def layer_macs(layer, in_shape: Sequence[int], out_shape: Sequence[int], batch: int = 1) -> int:
    kind = layer.kind
    if kind == "conv":
        _, h, w = out_shape
        return batch * layer.out_ch * h * w * layer.in_ch * layer.kernel * layer.kernel
    if kind == "deconv":
        # the adjoint forward conv maps the deconv output back onto its input grid
        _, h, w = in_shape
        return batch * layer.in_ch * h * w * layer.out_ch * layer.kernel * layer.kernel
    if kind == "dense":
        return batch * layer.d_out * layer.d_in
    if kind in ZERO_COST_KINDS:
        return 0
    raise ConfigurationError(f"cannot count operations of layer type {kind!r}")


def count_flops(net: NetworkGraph, batch: int = 1) -> FlopReport:
    rows = []
    groups: dict[str, int] = {}
    for group, name, layer, in_shape, out_shape in net.layer_shapes():
        macs = layer_macs(layer, in_shape, out_shape, batch)
        rows.append(LayerFlops(name=name, group=group, kind=layer.kind, output_shape=list(out_shape), macs=macs))
        groups[group] = groups.get(group, 0) + macs
    return FlopReport(layers=rows, total_macs=sum(r.macs for r in rows), group_macs=groups)


def head_macs(report: FlopReport) -> int:
    """MACs of everything outside the backbone."""
    return sum(m for g, m in report.group_macs.items() if g != "backbone")


def environment() -> dict[str, str]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": str(os.cpu_count()),
        "omp_num_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
        "openblas_num_threads": os.environ.get("OPENBLAS_NUM_THREADS", "unset"),
    }


def time_inference(net: NetworkGraph, input_shape: Optional[Sequence[int]] = None, n_warmup: int = 3,
                   n_runs: int = 20, seed: int = 0) -> LatencyReport:
    """
    Batch-1 forward latency in milliseconds over `n_runs` timed runs after
    `n_warmup` untimed ones. Native thread pools (BLAS, OpenMP) are limited to
    one thread while timing; `thread_limit` records what they reported.
    """
    shape = tuple(input_shape) if input_shape is not None else (1, *net.input_shape)
    if shape[0] != 1:
        raise ConfigurationError(f"latency is measured at batch size 1, got input shape {shape}")
    if n_runs < 1:
        raise ConfigurationError("n_runs must be at least 1")
    x = Tensor(SeededRng(seed, 0x62656E).uniform(0.0, 1.0, size=shape), dtype=net.dtype)
    times = []
    with threadpool_limits(limits=1):
        pools = threadpool_info()
        for _ in range(n_warmup):
            net.forward(x)
        for _ in range(n_runs):
            start = time.perf_counter()
            net.forward(x)
            times.append((time.perf_counter() - start) * 1000.0)
    times = np.asarray(times)
    mean = float(times.mean())
    report = LatencyReport(
        mean_ms=mean,
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        fps=1000.0 / mean if mean > 0 else float("inf"),
        n_runs=n_runs,
        n_warmup=n_warmup,
        input_shape=list(shape),
        thread_limit=max((p["num_threads"] for p in pools), default=None),
        environment=environment(),
    )
    logger.info(f"Latency over {n_runs} runs: median {report.median_ms:.3f} ms ({report.fps:.1f} FPS)")
    return report
