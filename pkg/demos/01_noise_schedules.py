# %% [markdown]
# # Noise schedules
#
# A diffusion model corrupts data over `T` steps. How much signal survives
# step `t` is `alpha_bar[t]`, the running product of `1 - beta`. This demo
# builds the cosine and linear schedules and compares them.

# %%
import numpy as np

from motiondiff import build_schedule, cosine_alpha_bar

cos = build_schedule("cosine", 1000)
lin = build_schedule("linear", 1000)

# %% [markdown]
# The cosine curve starts at exactly 1 and ends at exactly 0. Halfway through
# it still keeps about half of the signal.

# %%
print("alpha_bar(0)    =", cosine_alpha_bar(0, 1000))
print("alpha_bar(500)  =", cosine_alpha_bar(500, 1000))
print("alpha_bar(1000) =", cosine_alpha_bar(1000, 1000))

# %% [markdown]
# The linear schedule destroys signal much faster. On short, low-resolution
# inputs such as a 8 x 32 skeleton image, that leaves few useful steps.

# %%
for t in (100, 250, 500, 750):
    print(f"t={t:4d}  cosine {cos.alpha_bars[t]:.4f}   linear {lin.alpha_bars[t]:.4f}")

# %% [markdown]
# The last cosine step would need `beta = 1`, so betas are clipped to 0.999
# and `alpha_bar` is recomputed from the clipped values. The product identity
# therefore holds to round-off.

# %%
print("largest beta:", cos.betas.max())
err = np.max(np.abs(cos.alpha_bars - np.cumprod(cos.alphas)))
print("max |alpha_bar - prod(alpha)|:", err)

# %% [markdown]
# Short schedules work the same way. The desk-scale model uses `T = 50`.
# `to_csv` gives the table that the `schedule-dump` command prints.

# %%
print(build_schedule("cosine", 5).to_csv())
