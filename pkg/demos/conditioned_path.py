"""What does a surviving path look like?

Conditioned on H_1(0) > u, the path S_{pu} follows u^{tau-2} I_E(p):
it rises, then returns to 0 at p = 1. Self-normalised tilted sampling
gives the conditional mean directly, without a normalizing constant.
"""
import numpy as np

from thinlevy.mc import conditioned_profile
from thinlevy.process import ModelParams
from thinlevy.ratefn import solve_theta_star

params = ModelParams(tau=3.5, beta_tilde=0.0)
table = solve_theta_star(params)
u = 6.0
p = np.linspace(0.0, 1.0, 11)
prof = conditioned_profile(params, u, p, reps=5000, seed=3, table=table)

print(f"u = {u}, effective sample size {prof.effective_sample_size:.0f} of {prof.reps}\n")
print(f"{'p':>5} {'E[S | survive]/u^(tau-2)':>25} {'I_E(p)':>9}")
for q, m, pred in zip(prof.p, prof.mean_path / prof.scale, prof.predicted / prof.scale):
    bar = "#" * int(max(m, 0.0) * 60)
    print(f"{q:5.2f} {m:25.4f} {pred:9.4f}  {bar}")
print(f"\nlargest scaled deviation: {prof.max_scaled_deviation:.4f}")
