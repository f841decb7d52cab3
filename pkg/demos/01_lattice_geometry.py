"""Points on the permutohedral lattice: elevation, enclosing simplices, scales."""

import numpy as np

from latticeflow.lattice import (
    ScaleSchedule,
    build_point_lattice,
    check_lattice_points,
    elevate,
    enclosing_simplex,
    neighbor_offsets,
    simplex_edge_length,
)

rng = np.random.default_rng(0)
pts = rng.uniform(-1, 1, (5, 3))

# 3D positions become 4-vectors on the zero-sum plane
e = elevate(pts, scale=2.0)
print("elevated sums:", e.sum(axis=1).round(12))

# every point sits in one simplex with d+1 = 4 vertices
fp = enclosing_simplex(e)
print("vertices of point 0:\n", fp.vertices[0])
print("weights:", fp.weights[0].round(4), "sum", fp.weights[0].sum())
print("all vertices valid:", check_lattice_points(fp.vertices).all())
print("reconstruction error:", np.abs(fp.reconstruct() - e).max())

# the 1-ring used by every lattice conv: the key itself plus 2(d+1) neighbours
print("1-ring offsets:\n", neighbor_offsets(3))

# a cloud occupies far fewer lattice points at coarser scales
cloud = rng.uniform(-2, 2, (4000, 3))
sched = ScaleSchedule.from_spacing(0.05, num_levels=4)
for s in sched.levels:
    lat = build_point_lattice(cloud, s)
    print(f"scale {s:7.3f}  edge {simplex_edge_length(3, s):6.3f} m  occupied {lat.num_keys}")
