"""
Group-wise contrastive alignment
================================

The alignment loss pulls matched scene/description pairs together. Its
value has closed forms for degenerate batches, which makes it easy to
sanity check.
"""

import math

import numpy as np

from gpvl import nnkit as nn
from gpvl.alignment import align_loss, contrastive_loss, retrieval_eval, similarity_matrix

rng = np.random.default_rng(0)

# identical pairs everywhere: every row and column of the similarity matrix is flat
for k in (2, 4, 8):
    V = np.broadcast_to(rng.normal(size=(3, 8)), (k, 3, 8)).copy()
    T = np.broadcast_to(rng.normal(size=(5, 8)), (k, 5, 8)).copy()
    w1, w2 = nn.Tensor(np.full((1, 3), 0.3)), nn.Tensor(np.full((1, 5), 0.2))
    print(k, align_loss(nn.Tensor(V), nn.Tensor(T), w1, w2, math.log(0.07)).item(), 2 * math.log(k))

# a clean diagonal
print(contrastive_loss(nn.Tensor(np.array([[2.0, 0.0], [0.0, 2.0]])), 0.0).item(),
      2 * math.log(1 + math.exp(-2)))

# random text features retrieve near chance level; copying the visual features
# as text lifts accuracy, though the max-based score is not a metric so it need not reach 1
V = rng.normal(size=(6, 4, 8))
w1, w2 = nn.Tensor(np.full((1, 4), 0.25)), nn.Tensor(np.full((1, 4), 0.25))
mask = np.ones((6, 4), bool)   # every text row is real
print("random", retrieval_eval(similarity_matrix(nn.Tensor(V), nn.Tensor(rng.normal(size=(6, 4, 8))), w1, w2, mask)))
print("matched", retrieval_eval(similarity_matrix(nn.Tensor(V), nn.Tensor(V.copy()), w1, w2, mask)))
