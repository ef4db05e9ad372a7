# %% [markdown]
# # Checking gradients
#
# Every differentiable operation is registered with a small random case.
# The checker compares the tape's gradients with central differences and
# sets aside entries where a kink (relu, max) sits inside the step.

# %%
from lba_sodkit import gradcheck

print(len(gradcheck.REGISTRY), "registered cases")

# %%
for name in ("conv2d", "sobel_magnitude", "softmax_lastdim", "batchnorm"):
    if name in gradcheck.REGISTRY:
        rep = gradcheck.gradcheck(name, seed=0)
        print(f"{name:<18} rel err {rep.max_rel_err:.1e}  checked {rep.n_checked}  pass {rep.passed}")

# %% [markdown]
# Whole-module cases perturb every parameter tensor of a small model.

# %%
rep = gradcheck.gradcheck("efaba", seed=0)
print("efaba", f"{rep.max_rel_err:.1e}", rep.passed, "kinks set aside:", rep.n_kinks)
