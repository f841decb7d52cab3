"""Splat, convolve and slice on a sparse lattice, with density normalization."""

import numpy as np

from latticeflow.bclops import ConvStack, SignalMatrix, Splat, Tape, lattice_conv, slice_features, splat
from latticeflow.lattice import build_point_lattice

rng = np.random.default_rng(1)
pts = rng.uniform(-1, 1, (300, 3))
lat = build_point_lattice(pts, 2.0)
print(lat.num_points, "points ->", lat.num_keys, "occupied lattice points")

# normalized splatting gives convex combinations, so constants survive
const = np.tile([1.5, -2.0], (300, 1))
print("constant preserved:", np.abs(splat(lat, const) - [1.5, -2.0]).max())

# doubling every point changes raw sums but not normalized values
raw = splat(lat, const, normalize=False)
twice = build_point_lattice(np.vstack([pts, pts]), 2.0)
print("raw sum ratio:", splat(twice, np.vstack([const, const]), normalize=False).sum() / raw.sum())

# unnormalized splat and slice are transposes of each other
u, v = rng.normal(size=(300, 2)), rng.normal(size=(lat.num_keys, 2))
print("<Su,v> - <u,S^T v> =", np.sum(splat(lat, u, False) * v) - np.sum(u * slice_features(lat, v)))

# a two-layer conv stack over the 1-ring, with gradients from the tape
stack = ConvStack.init(rng, 2, [8, 3], kernel=9)
tape = Tape()
x = SignalMatrix(rng.normal(size=(300, 2)))
y = lattice_conv(lat, Splat(lat)(x, tape=tape), stack, tape)
tape.backward(y, np.ones(y.shape))
print("conv output", y.shape, "input grad norm", np.linalg.norm(x.grad).round(4))
