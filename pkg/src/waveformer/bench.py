"""
Latency / throughput / memory benchmark.

Protocol: ``warmup`` untimed forward passes, then ``iterations`` timed
ones, each wall-clocked individually with ``perf_counter_ns``. Execution is
pinned to ``threads`` BLAS/OpenMP threads (1 by default). The paired
mode alternates FP32 and INT8 iterations so both see the same host load.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import time
import tracemalloc
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .model import WaveFormer
from .quant import QuantizedTensor, int8_kernel_name, quantize_model
from .tensor import Tensor

# Published reference points (Intel i7-11800H, ONNX Runtime); context only.
PUBLISHED_REFERENCE = {
    "fp32": {"mean_ms": 10.23, "qps": 97.8, "peak_mb": 84.9},
    "int8": {"mean_ms": 6.75, "qps": 148.1, "peak_mb": 65.2},
}

CSV_HEADER = ("precision", "iters", "warmup", "mean_ms", "median_ms", "p95_ms", "qps",
              "peak_mb", "cpu", "threads")


@dataclass
class BenchReport:
    precision: str
    iterations: int
    warmup: int
    batch: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    qps: float
    peak_mb: float
    cpu: str
    threads: int
    kernel: str = ""
    samples_ms: np.ndarray = field(default=None, repr=False)
    warnings: list[str] = field(default_factory=list)

    @property
    def jitter(self) -> float:
        """p95 / median latency ratio."""
        return self.p95_ms / self.median_ms if self.median_ms > 0 else float("nan")

    def csv_row(self) -> list:
        return [self.precision, self.iterations, self.warmup, f"{self.mean_ms:.4f}",
                f"{self.median_ms:.4f}", f"{self.p95_ms:.4f}", f"{self.qps:.2f}",
                f"{self.peak_mb:.2f}", self.cpu, self.threads]

    def pretty(self) -> str:
        ref = PUBLISHED_REFERENCE.get(self.precision)
        lines = [
            f"[{self.precision}] {self.iterations} iters after {self.warmup} warm-up, "
            f"batch {self.batch}, {self.threads} thread(s), kernel {self.kernel}",
            f"  latency/sample  mean {self.mean_ms:.3f} ms  median {self.median_ms:.3f} ms  "
            f"p95 {self.p95_ms:.3f} ms  (p95/median {self.jitter:.2f})",
            f"  throughput      {self.qps:.1f} samples/s",
            f"  peak memory     {self.peak_mb:.2f} MB (weights + traced activations)",
            f"  cpu             {self.cpu}",
        ]
        if ref:
            lines.append(f"  published ref   {ref['mean_ms']} ms, {ref['qps']} QPS, "
                         f"{ref['peak_mb']} MB (different hardware/runtime; not comparable)")
        lines.extend(f"  warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def reports_csv(reports: Sequence[BenchReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def cpu_model() -> str:
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def param_bytes(model: WaveFormer) -> int:
    total = 0
    for p in model.params.values():
        if isinstance(p, QuantizedTensor):
            total += p.nbytes
        elif isinstance(p, Tensor):
            total += p.data.nbytes
    return total


def _set_torch_threads(n: int) -> int | None:
    try:
        import torch
    except ImportError:
        return None
    prev = torch.get_num_threads()
    torch.set_num_threads(n)
    return prev


def _prepare(model: WaveFormer, precision: str) -> WaveFormer:
    if precision not in ("fp32", "int8"):
        raise ValueError(f"precision must be fp32 or int8, got {precision!r}")
    if precision == "int8" and not model.is_quantized:
        return quantize_model(model)
    if precision == "fp32" and model.is_quantized:
        raise ValueError("cannot run an INT8 model at fp32")
    if precision == "fp32" and model.config.dtype != "float32":
        model = model.with_params({n: Tensor(p.data.astype(np.float32), name=n)
                                   for n, p in model.params.items()})
        model = model.with_config(dtype="float32")
    return model


def _measure(models: Sequence[WaveFormer], iterations: int, warmup: int, batch: int,
             threads: int, seed: int) -> tuple[np.ndarray, list[int]]:
    """Per-iteration wall times (ms), models interleaved round-robin, plus traced peaks."""
    cfg = models[0].config
    x = np.random.default_rng(seed).standard_normal(
        (batch, cfg.channels, cfg.window)).astype(np.float32)
    times = np.empty((len(models), iterations), dtype=np.float64)
    peaks = []
    prev_torch = _set_torch_threads(threads)
    try:
        with threadpool_limits(limits=threads):
            for _ in range(warmup):
                for m in models:
                    m.predict_logits(x)
            for i in range(iterations):
                for k, m in enumerate(models):
                    t0 = time.perf_counter_ns()
                    m.predict_logits(x)
                    times[k, i] = (time.perf_counter_ns() - t0) / 1e6
            for m in models:
                tracemalloc.start()
                try:
                    m.predict_logits(x)
                    peaks.append(tracemalloc.get_traced_memory()[1])
                finally:
                    tracemalloc.stop()
    finally:
        if prev_torch is not None:
            _set_torch_threads(prev_torch)
    return times, peaks


def _report(model: WaveFormer, precision: str, times: np.ndarray, peak: int, iterations: int,
            warmup: int, batch: int, threads: int) -> BenchReport:
    per_sample = times / batch
    mean = float(per_sample.mean())
    notes: list[str] = []
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    if resolution_ms > 0.01 * mean:
        notes.append(f"timer resolution {resolution_ms:.3g} ms exceeds 1% of mean latency")
        warnings.warn(notes[-1], stacklevel=3)
    return BenchReport(
        precision=precision,
        iterations=iterations,
        warmup=warmup,
        batch=batch,
        mean_ms=mean,
        median_ms=float(np.median(per_sample)),
        p95_ms=float(np.percentile(per_sample, 95)),
        qps=1000.0 / mean,
        peak_mb=(param_bytes(model) + peak) / 2 ** 20,
        cpu=cpu_model(),
        threads=threads,
        kernel="numpy-blas" if precision == "fp32" else int8_kernel_name(),
        samples_ms=per_sample,
        warnings=notes,
    )


def _check_args(iterations: int, warmup: int, batch: int, threads: int) -> None:
    if iterations < 1 or warmup < 0 or batch < 1 or threads < 1:
        raise ValueError("iterations, batch and threads must be positive; warmup >= 0")


def benchmark(model: WaveFormer, precision: str = "fp32", iterations: int = 200,
              warmup: int = 10, batch: int = 1, threads: int = 1, seed: int = 0
              ) -> BenchReport:
    """Time ``iterations`` single-batch inferences of ``model`` at ``precision``.

    ``precision`` is ``"fp32"`` or ``"int8"``; an FP model is quantized on
    the fly for ``"int8"``. Latencies are reported per sample.
    """
    _check_args(iterations, warmup, batch, threads)
    model = _prepare(model, precision)
    times, peaks = _measure([model], iterations, warmup, batch, threads, seed)
    return _report(model, precision, times[0], peaks[0], iterations, warmup, batch, threads)


def benchmark_paired(model: WaveFormer, iterations: int = 200, warmup: int = 10, batch: int = 1,
                     threads: int = 1, seed: int = 0) -> tuple[BenchReport, BenchReport]:
    """FP32 and INT8 reports from interleaved iterations.

    Alternating the two precisions iteration by iteration exposes both to
    the same host load, so slow drift (thermal, neighbours) cancels in the
    comparison. Each iteration is still timed on its own.
    """
    _check_args(iterations, warmup, batch, threads)
    fp, q = _prepare(model, "fp32"), _prepare(model, "int8")
    times, peaks = _measure([fp, q], iterations, warmup, batch, threads, seed)
    return (_report(fp, "fp32", times[0], peaks[0], iterations, warmup, batch, threads),
            _report(q, "int8", times[1], peaks[1], iterations, warmup, batch, threads))


def environment() -> dict[str, str]:
    return {"cpu": cpu_model(), "python": platform.python_version(),
            "numpy": np.__version__, "os_cpus": str(os.cpu_count())}
