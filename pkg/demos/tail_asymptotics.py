"""How rare is a long-lived exploration?

The vertex-1 path S_t starts at 1 and drifts downward. Staying positive
up to time u costs about exp(-I u^{tau-1}). The finite-u prediction
multiplies this by A u^{-(tau-1)/2} and by the lower-order terms that
the exact minimisation behind log phi(u) carries.

This script sets the prediction against tilted importance sampling. It
prints the log of their ratio, which should shrink as u grows.
"""
import math

from thinlevy.endgame import build_endgame, predict_log_tails
from thinlevy.mc import estimate_h1_tail
from thinlevy.process import ModelParams
from thinlevy.ratefn import solve_theta_star, theta_star_u

params = ModelParams(tau=3.5, beta_tilde=0.0)
table = solve_theta_star(params)
constants = build_endgame(table)
print(f"theta* = {table.theta_star:.6f}, I = {table.I:.6f}")
print(f"kappa = {constants.kappa:.6f}, A = {constants.A:.6f}, D = {constants.D:.6f}\n")

print(f"{'u':>4} {'theta*_u':>9} {'log P pred':>11} {'log P IS':>10} {'+-':>6} {'log ratio':>10}")
for u in (2.0, 3.0, 4.0, 5.0):
    _, pred = predict_log_tails(u, table, constants)
    est = estimate_h1_tail(params, u, reps=5000, seed=int(10 * u), table=table)
    rel = est.std_error / est.value if est.value > 0 else math.nan
    print(f"{u:4.0f} {theta_star_u(u, table):9.4f} {pred:11.4f} {est.log_value:10.4f} {rel:6.3f} "
          f"{est.log_value - pred:10.4f}")
