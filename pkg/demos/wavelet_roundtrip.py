"""Walk through one WaveletConv level on a small feature map.

Run: python demos/wavelet_roundtrip.py
"""

import numpy as np

from waveformer.tensor import Tensor
from waveformer.wavelet import (SUBBANDS, dwt_level, haar_bank, init_wavelet_params, iwt_level,
                                waveletconv_forward, wavelet_path)

rng = np.random.default_rng(0)

# A feature map as the patch embedding produces it: (batch, depth, channels, patches).
x = rng.standard_normal((1, 2, 8, 5))

# One Haar analysis step splits each depth slice into four half-size subbands.
bank = Tensor(haar_bank(2))
bands, pad = dwt_level(Tensor(x), bank)
print("input", x.shape, "-> subbands", bands[0].shape, "padding", pad.as_tuple())
for name, b in zip(SUBBANDS, bands):
    print(f"  {name} energy {np.sum(b.data ** 2):8.3f}")
print(f"  total  {sum(np.sum(b.data ** 2) for b in bands):8.3f}  (input {np.sum(x ** 2):8.3f})")

# Synthesis undoes analysis exactly, cropping the padded column.
back = iwt_level(*bands, bank, pad).data
print("single-level roundtrip error", np.abs(back - x).max())

# At initialization the learnable three-level path is the identity, and the
# full module (base conv + path) returns twice its input.
params = init_wavelet_params(2, 3, np.float64)
print("3-level path error", np.abs(wavelet_path(Tensor(x), params, 3).data - x).max())
print("module output / input", np.unique(np.round(waveletconv_forward(Tensor(x), params, 3).data / x, 12)))
