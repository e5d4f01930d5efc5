"""Reverse-mode gradients on a tape.

Build a tiny expression, read off its gradient, then compare against central
finite differences.
"""

import numpy as np

from permgm import diffcore as dc

rng = np.random.default_rng(0)

# A parameter is a named tensor the tape tracks
w = dc.Parameter("w", rng.normal(size=(3, 2)))
x = rng.normal(size=(4, 3))

with dc.ComputationRecord() as rec:
    h = dc.relu(x @ w.tensor)
    loss = dc.logsumexp(h, axis=1).sum()

print("loss         :", loss.item())
print("tape length  :", len(rec.nodes), [n.tag for n in rec.nodes])
grads = dc.backward(loss, rec)
print("dloss/dw     :\n", grads[w])

# same thing through finite differences
report = dc.finite_diff_check(lambda: dc.logsumexp(dc.relu(x @ w.tensor), axis=1).sum(), [w])
print("gradcheck    :", report)

# replaying the record reproduces every intermediate bit for bit
replayed = rec.replay()
print("replay equal :", all(n.output.data.tobytes() == r.tobytes() for n, r in zip(rec.nodes, replayed)))
