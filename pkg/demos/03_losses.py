"""
Losses by hand
==============

Each term of the generator objective on tiny inputs where the answer can be
checked by hand.
"""
import math

import numpy as np

from dualsynth import autodiff as ad
from dualsynth import losses as L

y = np.array([[1.0, 2.0], [3.0, 4.0]])
g = np.array([[1.5, 2.0], [2.0, 4.0]])
print("L1 reconstruction:", L.recon_loss(y, g, 1).item(), "(|-0.5| + |1|) / 4 = 0.375")

# critic loss with a linear critic f(x) = x @ w: its input gradient is w everywhere,
# so the penalty term is lambda * (||w|| - 1)^2 = 10 * 16 = 160
w = ad.tensor(np.array([[3.0], [4.0]]))
critic = lambda x: ad.reshape(ad.matmul(x, w), (x.shape[0],))  # noqa: E731
loss, parts = L.critic_loss_d1(critic, y, g, 10.0, np.random.default_rng(0), return_parts=True)
print("critic loss:", round(loss.item(), 6), "penalty:", 10 * parts["gp"])

# a local discriminator that is unsure everywhere (0.5) costs ln 2 per pixel per term
half = lambda x: ad.tensor(np.full(x.shape, 0.5))  # noqa: E731
print("D2 loss at 0.5:", L.d2_loss(half, y, g).item(), "= 2 ln 2 =", 2 * math.log(2))

# attention: confident pixels (M near 1) get small weights, doubtful ones keep weight near 1
m = np.array([[0.9, 0.5], [0.1, 0.75]])
f = L.attention_weights(m, beta=2.0)
print("weights (1 - M)^2:\n", f)
print("attention loss:", L.attention_recon_loss(y, g, f, 1).item())

# with beta = 0 the weights are all ones and the attention loss is the plain loss, bit for bit
print("beta=0 equal:", L.attention_recon_loss(y, g, L.attention_weights(m, 0.0), 1).item() == L.recon_loss(y, g, 1).item())

print("total = att + 0.05 adv1 + 0.1 adv2:", L.total_gen_loss(1.0, 2.0, 3.0, L.LossWeights()).item())
