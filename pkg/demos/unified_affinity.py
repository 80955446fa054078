"""Depthwise conv, self-attention and token-MLP mixing as one operation: affinity @ values."""
import numpy as np

from contextagg import oracle
from contextagg.affinity import ConvAffinityParams, MlpAffinityParams, conv_affinity, mlp_affinity
from contextagg.tensor import Param
from contextagg.verify import attention_via_affinity, conv_via_affinity

rng = np.random.default_rng(0)
h, w, c = 5, 6, 4
n = h * w

# conv: static and sparse, one 3x3 footprint per channel laid out on the grid
grid = rng.normal(size=(h, w, c))
kernel = rng.normal(size=(c, 3, 3))
conv = conv_affinity(ConvAffinityParams(Param(kernel, "f64"), (h, w))).weights.data
diff = np.abs(conv_via_affinity(grid, kernel) - oracle.direct_depthwise_conv(grid, kernel)).max()
print(f"conv  affinity {conv.shape}  max nonzeros/row {int((conv != 0).sum(-1).max())}  vs sliding window {diff:.1e}")

# attention: dynamic and dense, recomputed from every input
x = rng.normal(size=(n, c))
wq, wk, wv = (rng.normal(size=(c, c)) for _ in range(3))
bq, bk, bv = (rng.normal(size=c) for _ in range(3))
a, out = attention_via_affinity(x, wq, wk, wv, 2, bq, bk, bv)
a_ref, out_ref = oracle.naive_attention(x, wq, wk, wv, 2, bq, bk, bv)
print(f"attn  affinity {a.shape}  rows sum to 1: {np.allclose(a.sum(-1), 1)}  vs loops {np.abs(out - out_ref).max():.1e}")

# token MLP: static and dense, the transposed mixing weights
dense = rng.normal(size=(1, n, n)) / np.sqrt(n)
mlp = mlp_affinity(MlpAffinityParams("dense", dense=Param(dense, "f64"))).weights.data
print(f"mlp   affinity {mlp.shape}  input-independent, dense: {bool((mlp != 0).all())}")

# locality: conv row of the centre token covers only its 3x3 neighbourhood
centre = (h // 2) * w + w // 2
print("conv footprint of the centre token (channel 0):")
print((conv[0, centre].reshape(h, w) != 0).astype(int))
