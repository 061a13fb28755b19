"""Joint state and parameter estimation on a rotating-advection field.

The truth is driven by a vortex advection field (non-stationary in
space); the interpolation baseline uses a stationary prior whose scale
parameters are also badly mis-specified. The augmented solver alternates
state updates on the interpolation cost with stationary parameter
updates on the trajectory likelihood, and recovers most of the skill gap
to the true prior without ever seeing the truth.
"""

import numpy as np

from spdekit import (ObservationSet, ParamFields, SolverConfig,
                     SpaceTimeGrid, Trajectory, assemble_block_precision,
                     evaluate, oi_solve_precision, run_solver, sample_prior)

grid = SpaceTimeGrid(nx=8, ny=8, nt=8)
yy, xx = np.meshgrid(np.arange(grid.ny, dtype=float),
                     np.arange(grid.nx, dtype=float), indexing="ij")
cy, cx = (grid.ny - 1) / 2, (grid.nx - 1) / 2
omega = 0.3
theta_true = ParamFields.stationary(grid, kappa=0.4, h=(0.25, 0.0, 0.25),
                                    tau=0.25)
theta_true = theta_true.replace_fields(
    m_u=np.broadcast_to(-omega * (yy - cy), grid.shape).copy(),
    m_v=np.broadcast_to(omega * (xx - cx), grid.shape).copy())
print(f"truth: vortex advection, peak speed "
      f"{np.hypot(theta_true.m_u.values, theta_true.m_v.values).max():.2f} "
      "cells/step")

truth = sample_prior(theta_true, grid, n_members=1, base_seed=100).members[0]
mask = np.random.default_rng(200).random(grid.shape) < 0.25
obs = ObservationSet.from_truth(truth, mask, noise_var=0.1, seed=300)

# the baseline prior has no advection and the wrong scales
theta0 = ParamFields.stationary(grid, kappa=0.8, h=(0.25, 0.0, 0.25),
                                tau=0.75)
baseline = evaluate(
    oi_solve_precision(assemble_block_precision(theta0, grid), obs),
    truth).mu_score
oracle = evaluate(
    oi_solve_precision(assemble_block_precision(theta_true, grid), obs),
    truth).mu_score
print(f"interpolation skill: mis-specified prior {baseline:.3f}, "
      f"true prior {oracle:.3f}")

cfg = SolverConfig(n_iterations=46 * 5, update_mode="alternating",
                   x_steps=40, theta_steps=6,
                   step={"kind": "adam", "lr": 0.25, "eps": 8.0},
                   theta_step={"kind": "adam", "lr": 0.04, "eps": 1e-2},
                   theta_params=("kappa", "tau", "m_u", "m_v"),
                   theta_stationary=True)
result = run_solver(Trajectory.zeros(grid), theta0, obs, cfg)
joint = evaluate(result.x, truth).mu_score
theta = result.theta
print(f"joint solve skill: {joint:.3f} (margin {joint - baseline:+.3f})")
print(f"parameters moved: kappa 0.80 -> {theta.kappa.values[1, 0, 0]:.2f}, "
      f"tau 0.75 -> {theta.tau.values[1, 0, 0]:.2f}, "
      f"m -> ({theta.m_u.values[1, 0, 0]:+.2f}, "
      f"{theta.m_v.values[1, 0, 0]:+.2f})")
print("(a stationary advection cannot represent the vortex; the gain "
      "comes from fixing the scales and adding advective smoothing)")
