"""Independent reference computations shared by unit and acceptance tests."""

import math


def enumerate_param_shapes(D, F, P, K, J, layers, wavelet=True):
    """Every learnable tensor shape, written out from the architecture."""
    shapes = [(P, D), (D,), (D,), (D,)]  # patch projection, bias, LN gamma/beta
    if wavelet:
        shapes += [(4, D, 2, 2), (4, D, 2, 2)]  # analysis / synthesis banks
        for _ in range(J):
            shapes += [(4, D, 3, 3), (4, D)]  # per-band refinement kernels and scales
        shapes += [(D, 3, 3), (D,)]  # base depthwise conv
    shapes.append((D,))  # class token
    for _ in range(layers):
        shapes += [(D,), (D,)]
        shapes += [(D, D), (D,)] * 4
        shapes += [(D,), (D,), (D, F), (F,), (F, D), (D,)]
    shapes += [(D,), (D,), (D, K), (K,)]
    return shapes


def param_oracle(D, F, P, K, J, layers, wavelet=True):
    return sum(math.prod(s) for s in enumerate_param_shapes(D, F, P, K, J, layers, wavelet))
