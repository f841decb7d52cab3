"""The factorised correlation layer against its brute-force double loop."""

import numpy as np

from latticeflow.bclops import SignalMatrix
from latticeflow.lattice import build_point_lattice
from latticeflow.layers import CorrConfig, LayerIO, corr_bcl
from latticeflow.reference import naive_corr

rng = np.random.default_rng(2)
f1 = build_point_lattice(rng.uniform(-1, 1, (6, 3)), 1.0)
f2 = build_point_lattice(rng.uniform(-1, 1, (6, 3)) + 0.3, 1.0)
cfg = CorrConfig.init(rng, 3, 4, 4, mid=5, out=6)
F1, F2 = rng.normal(size=(f1.num_keys, 4)), rng.normal(size=(f2.num_keys, 4))

out = corr_bcl(LayerIO(f1, SignalMatrix(F1)), LayerIO(f2, SignalMatrix(F2)), cfg).data
table = naive_corr(
    {tuple(k): list(r) for k, r in zip(f1.keys.tolist(), F1.tolist())},
    {tuple(k): list(r) for k, r in zip(f2.keys.tolist(), F2.tolist())},
    cfg.patch_offsets, cfg.disp_offsets,
    (cfg.g.weights[0].data, cfg.g.biases[0].data), (cfg.h.weights[0].data, cfg.h.biases[0].data), 3,
)
ref = np.array([table[tuple(k)] for k in f1.keys.tolist()])
print("output", out.shape, "max deviation from loop:", np.abs(out - ref).max())

# parameters grow with p + q, not p * q
p, q = cfg.p, cfg.q
n = sum(w.data.size for w in cfg.params)
print(f"p={p} q={q} params={n}  p*(C1+C2)*mid + mid + q*mid*out + out = {p * 8 * 5 + 5 + q * 5 * 6 + 6}")

# elementwise multiplication needs equal widths
try:
    CorrConfig.init(rng, 3, 4, 3, 5, 6, mode="mult")
except ValueError as exc:
    print("EM:", exc)
