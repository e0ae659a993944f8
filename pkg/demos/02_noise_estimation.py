"""From score vectors to a timestep.

The spread of score lengths gives the noise variance, which is then
matched against the training schedule. Two oracles are compared: the
exact noise displacement, and the projection to the nearest clean point
(which drops the tangential part of the noise and so reads low).

    python3 demos/02_noise_estimation.py
"""

from pcdenoise.datagen import NoiseSpec, ShapeSpec, apply_noise, sample_shape
from pcdenoise.sampler import SamplerConfig, estimate_noise
from pcdenoise.schedule import adaptive_schedule, format_schedule_table, linear_schedule
from pcdenoise.score_model import DisplacementOracle, OracleScore

sched = linear_schedule()
print(f"T = {sched.T}, largest trainable noise sigma_bar_T = {sched.sigma_bar[-1]:.5f}")

clean = sample_shape(ShapeSpec("sphere", n=50_000, seed=3))
cfg = SamplerConfig(calibration="chi3")

print(f"\n{'sigma':>6} {'exact':>8} {'nearest':>8} {'tau':>5}")
for sigma in (0.005, 0.01, 0.02, 0.03):
    noisy = apply_noise(clean, NoiseSpec(sigma=sigma, seed=4))
    exact = estimate_noise(noisy, DisplacementOracle(clean, noisy), cfg, sched)
    near = estimate_noise(noisy, OracleScore(clean), cfg, sched)
    print(f"{sigma:6.3f} {exact.sigma_hat:8.4f} {near.sigma_hat:8.4f} {exact.tau_hat:5d}")

# %% the adaptive schedule for the last estimate, in the normalized frame
taus = adaptive_schedule(sched, exact.tau_hat, L=5)
print("\nschedule:", taus.taus)
print(format_schedule_table(sched, taus.taus))
