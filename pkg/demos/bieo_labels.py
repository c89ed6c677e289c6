"""
Region labels and Gumbel sampling
=================================

How a target span becomes per-frame B/I/E/O labels, and how the
sequence-matching head samples hard labels while keeping a gradient.
"""

import numpy as np

from seqpan import autograd as ag
from seqpan.labeling import annotate, assign_bieo, sample_gumbel

# a 30 s video cut into 16 frames, moment from 7.5 s to 20 s
a = annotate(7.5, 20.0, 30.0, 16)
print("frames", a.i_start, "to", a.i_end)

# eta widens the begin and end regions by a fraction of the span length
for eta in (0.0, 0.25, 0.5):
    print(f"eta={eta:<5}", assign_bieo(a.i_start, a.i_end, 16, eta))

# single-frame moments still get one B and one E frame
print("single  ", assign_bieo(5, 5, 16, 0.25))
print("at 0    ", assign_bieo(0, 0, 16, 0.25))

# Gumbel-Max: argmax of logits plus noise samples the softmax distribution
rng = np.random.default_rng(0)
logits = np.array([2.0, 0.5, 0.0, -1.0])
draws = (logits[:, None] + sample_gumbel((4, 20_000), rng)).argmax(axis=0)
print("softmax ", np.round(np.exp(logits) / np.exp(logits).sum(), 3))
print("sampled ", np.round(np.bincount(draws, minlength=4) / draws.size, 3))

# straight-through: forward the one-hot sample, backpropagate the relaxation
h = ag.Tensor(logits[:, None].copy(), requires_grad=True)
g = sample_gumbel((4, 1), rng)
soft = ag.softmax(ag.scale(h + ag.Tensor(g), 1 / 0.3), axis=0)
hard = ag.one_hot(soft.data.argmax(axis=0), 4, axis=0)
labels = ag.straight_through(hard, soft)
(labels * ag.Tensor(np.arange(4.0)[:, None])).sum().backward()
print("forward ", labels.data.ravel())
print("grad    ", np.round(h.grad.ravel(), 4))
