"""
The three networks
==================

A UNet generator maps a 5-slice stack to the centre slice of the other
contrast. A global critic scores a whole patch with one number. A local
discriminator returns a per-pixel realness map in (0, 1).
"""
import numpy as np

from dualsynth.networks import (SpectralNormState, build_generator, build_global_discriminator,
                                build_local_discriminator, d1_forward, d2_forward, generator_forward,
                                spectral_normalize)
from dualsynth.autodiff import Tensor

x = np.random.default_rng(0).standard_normal((2, 5, 64, 64)).astype(np.float32)

g = build_generator(depth=3, base_channels=16, seed=0)
print("generator parameters:", g.num_parameters())
y = generator_forward(g, x)
print("G(x):", y.shape)

d1 = build_global_discriminator(64, seed=1)
print("D1 scores:", d1_forward(d1, y.data).data)

d2 = build_local_discriminator(seed=2)
m = d2_forward(d2, y.data).data
print("D2 map:", m.shape, "range", m.min().round(3), "to", m.max().round(3))

# spectral normalization: divide by the top singular value found by power iteration
w = np.random.default_rng(3).standard_normal((32, 48))
state = SpectralNormState.create(32, np.random.default_rng(4), power_iterations=50)
w_sn = spectral_normalize(Tensor(w), state).data
print("sigma before", np.linalg.svd(w, compute_uv=False)[0].round(3),
      "after", np.linalg.svd(w_sn, compute_uv=False)[0].round(5))

# one power iteration per call also converges when the weight changes slowly
state = SpectralNormState.create(32, np.random.default_rng(4), power_iterations=1)
for step in range(60):
    w_sn = spectral_normalize(Tensor(w), state).data
    if step in (0, 5, 59):
        print(f"call {step + 1}: sigma {np.linalg.svd(w_sn, compute_uv=False)[0]:.5f}")
