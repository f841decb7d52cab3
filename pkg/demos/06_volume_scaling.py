"""More points in the same volume: coarse levels saturate, the first splat does not."""

from latticeflow.bench import run_bench

report = run_bench(points=(8192, 16384, 32768), repeats=3)
print(report.to_table())
