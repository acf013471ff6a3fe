"""Train a conditional RealNVP to cover a feasible action set.

The flow learns an invertible map between the latent box [-1,1]^2 (under a
mollified uniform density) and the disc a1^2 + a2^2 <= 0.05. Accuracy is the
fraction of uniform latent draws whose image is feasible; recall is the
fraction of feasible actions whose preimage lands back inside the latent box.
This demo uses a small net and a few hundred epochs, enough to pass 99%
accuracy on the disc in a couple of minutes.
"""

import numpy as np

from flowact import Ball, FlowModel, HmcConfig, hmc_sample

cs = Ball(0.05)
print("sampling 40k training actions with hard-wall HMC...")
data = hmc_sample(cs, None, 40000, HmcConfig(seed=0, thinning=5, decay=0.5))

flow = FlowModel(dim=2, n_layers=6, hidden=(32, 32), sigma=0.01, seed=1)
print(f"untrained accuracy: {flow.accuracy(cs, n_samples=20000, seed=2):.4f} "
      "(the identity map only covers the disc's share of the box, ~3.9%)")

for stage in range(4):
    history = flow.train(data, epochs=20, batch_size=5000, lr=1e-3, seed=stage)
    acc = flow.accuracy(cs, n_samples=20000, seed=3)
    rec = flow.recall(cs, None, data)
    print(f"after {20 * (stage + 1):3d} epochs: nll={history[-1]:7.4f} "
          f"accuracy={acc:.4f} recall={rec:.4f}")

# Invertibility is structural, not learned: verify the round trip.
rng = np.random.default_rng(4)
z = rng.uniform(-1, 1, size=(5000, 2))
x = flow.backward_map(z)
z_back, logdet = flow.forward_map_logdet(x)
print(f"\nround-trip max error: {np.max(np.abs(z_back - z)):.2e}")
print(f"analytic input Jacobian at a random latent:\n"
      f"{flow.input_gradient(z[0]).round(4)}")
