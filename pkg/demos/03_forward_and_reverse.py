# %% [markdown]
# # Forward noising and reverse sampling, with exact oracles
#
# Before training anything, the sampler can be checked against noise
# predictors whose optimal form is known in closed form.

# %%
import numpy as np

from motiondiff import build_schedule, q_sample, q_step, sample_images

sched = build_schedule("cosine", 50)
rng = np.random.default_rng(0)

# %% [markdown]
# ## Forward process
#
# Iterating single noising steps lands on the same distribution as the
# closed-form jump `sqrt(abar) x0 + sqrt(1 - abar) eps`.

# %%
x0 = np.array([1.0, -0.5])
n, t = 50_000, 25
x = np.broadcast_to(x0, (n, 2)).copy()
for step in range(1, t + 1):
    x = q_step(x, step, sched, rng).value
jump = q_sample(np.broadcast_to(x0, (n, 2)), t, rng.standard_normal((n, 2)), sched)
print("iterated mean", x.mean(0).round(3), " closed form", (np.sqrt(sched.alpha_bars[t]) * x0).round(3))
print("iterated var ", x.var(0).round(3), " closed form", round(1 - sched.alpha_bars[t], 3))
print("jump mean    ", jump.mean(0).round(3))


# %% [markdown]
# ## A point-mass oracle
#
# If all training data were one pose `p`, the best noise prediction is
# `(x_t - sqrt(abar) p) / sqrt(1 - abar)`. Running the reverse chain with it
# must return `p`.

# %%
class PointOracle:
    def __init__(self, point):
        self.point = point

    def predict(self, x, t, c):
        ab = sched.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
        return (x - np.sqrt(ab) * self.point) / np.sqrt(1 - ab)


pose = rng.standard_normal((3, 8, 32))
out = sample_images(PointOracle(pose), 0, 20, sched, pose.shape, rng=1)
print("worst RMSE to the target pose:", np.sqrt(((out - pose) ** 2).mean(axis=(1, 2, 3))).max())


# %% [markdown]
# ## A Gaussian oracle
#
# For data drawn from `N(0.5, 0.2^2)` the optimal predictor is also known.
# Samples should come out with that mean and spread.

# %%
class GaussOracle:
    def predict(self, x, t, c):
        ab = sched.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * 0.5) / (ab * 0.04 + 1 - ab)


out = sample_images(GaussOracle(), 0, 2000, sched, (3, 1, 1), rng=2)
print(f"sample mean {out.mean():.3f} (target 0.5), std {out.std():.3f} (target 0.2)")
