# %% The three semantic spaces of one instance and how the through connection ties them.
import numpy as np

from cetn import autodiff as ad
from cetn.embedding import pair_layout, products
from cetn.model import CETN, ModelConfig

fields, d = 4, 3
model = CETN(ModelConfig(embedding_dim=d, value_dim=5, hidden_dims=(16, 16), embedding_std=0.3), [7, 9, 3, 5])
model.init_params(1)
idx = np.array([[2, 4, 1, 0], [6, 8, 2, 3]])

# %% widths: raw embeddings, element-wise pair products, inner pair products
print("space widths (main, ep, ip):", model.space_widths())
print("first pairs:", pair_layout(fields, d)[2][:5])

# %% the ip space is the per-pair sum of the ep space
t = ad.Tape()
e = t.var(np.random.default_rng(0).normal(size=(2, fields * d)))
ep, ip = products(e, fields, d)
print("ep summed per pair == ip:", np.allclose(ep.value.reshape(2, -1, d).sum(axis=2), ip.value))

# %% training graph draws sign-aligned noise; evaluation substitutes its mean, 0.5
t = ad.Tape()
params = {k: t.constant(v) for k, v in model.params.items()}
logit_a, spaces, _ = model.forward(t, idx, np.random.default_rng(0), params)
logit_b, _, _ = model.forward(t, idx, np.random.default_rng(1), params)
print("train logits, two noise draws:", logit_a.value, logit_b.value)
print("eval probabilities:", model.predict(idx))

# %% zero the auxiliary value MLPs: the through connection copies V into V' and V''
for k in model.params:
    if k.startswith(("ep.v.", "ip.v.")):
        model.params[k][...] = 0.0
t = ad.Tape()
_, spaces, _ = model.forward(t, idx, None, {k: t.constant(v) for k, v in model.params.items()})
print("V' == V:", np.array_equal(spaces[1].V.value, spaces[0].V.value))
print("V'' == V:", np.array_equal(spaces[2].V.value, spaces[0].V.value))
