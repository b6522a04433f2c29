# %% InfoNCE and its denominator-only variant on random value vectors.
import numpy as np

from cetn import autodiff as ad
from cetn import losses

rng = np.random.default_rng(3)
a, b = rng.normal(size=(64, 8)), rng.normal(size=(64, 8))


def value(fn, *arrays, **kw):
    t = ad.Tape()
    return float(fn(*[t.var(x) for x in arrays], **kw).value)


# %% the two losses differ by the mean aligned similarity, scaled by 1/tau
for tau in (0.1, 0.2, 0.5):
    do = value(losses.do_infonce, a, b, tau=tau)
    full = value(losses.infonce, a, b, tau=tau)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    expected = np.mean(((an * bn).sum(axis=1) - 1) / tau)
    print(f"tau={tau}: do-infonce {do:.4f}  infonce {full:.4f}  gap {do - full:+.4f}  expected {expected:+.4f}")

# %% pushing the spaces apart lowers the denominator-only loss
near = a + 0.05 * rng.normal(size=a.shape)
far = rng.normal(size=a.shape)
print("aligned spaces   ", value(losses.do_infonce, a, near, tau=0.2))
print("unrelated spaces ", value(losses.do_infonce, a, far, tau=0.2))

# %% cosine loss keeps each auxiliary space anchored to the main one
print("cos loss aligned ", value(losses.cos_loss, a, near))
print("cos loss random  ", value(losses.cos_loss, a, far))
