import numpy as np

from latticeflow.bclops import ConvStack, SignalMatrix
from latticeflow.lattice import build_point_lattice


def as_dict(fmap, features):
    """{key tuple: row list} view of row-aligned lattice features."""
    return {tuple(k): list(r) for k, r in zip(fmap.keys.tolist(), np.asarray(features).tolist())}


def from_dict(fmap, table, width):
    out = np.zeros((fmap.num_keys, width))
    for j, k in enumerate(fmap.keys.tolist()):
        out[j] = table[tuple(k)]
    return out


def small_cloud(rng, n=None, d=3, spread=1.5):
    n = int(rng.integers(5, 51)) if n is None else n
    return rng.uniform(-spread, spread, (n, d))


def random_stack(rng, c_in, widths, kernel, acts=None):
    st = ConvStack.init(rng, c_in, widths, kernel)
    for w in st.weights + st.biases:
        w.data[...] = rng.normal(0, 0.7, w.data.shape)
    if acts is not None:
        st.activations = list(acts)
    return st


def stack_layers(stack):
    return [(w.data, b.data, a) for w, b, a in zip(stack.weights, stack.biases, stack.activations)]


def lattice_of(rng, n=None, scale=1.2, d=3):
    pts = small_cloud(rng, n, d)
    return pts, build_point_lattice(pts, scale)


def fresh(a):
    return SignalMatrix(np.array(a, dtype=np.float64))
