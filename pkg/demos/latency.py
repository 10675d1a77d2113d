"""Single-thread latency of the default model at FP32 and INT8.

Run: python demos/latency.py [iterations]
"""

import sys

from waveformer.bench import benchmark, environment
from waveformer.model import ModelConfig, WaveFormer

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 50
model = WaveFormer(ModelConfig())
print(environment())
for precision in ("fp32", "int8"):
    print(benchmark(model, precision, iterations=iters, warmup=10).pretty())
