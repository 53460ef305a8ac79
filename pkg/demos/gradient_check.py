"""
Checking hand-written gradients
===============================

Every backward pass in the package is compared with central finite
differences. This walks through the check for a GRU layer and for a full
two-stream model.
"""
import numpy as np

from tapg import fusion as fu
from tapg import numeric as nc
from tapg.sst import SstConfig


def numeric_grad(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


rng = np.random.default_rng(0)

# a GRU layer under a random linear loss
p = nc.GruLayerParams.init(3, 4, rng).astype(np.float64)
X, R = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
states, cache = nc.gru_forward(p, X)
dX, _, grads = nc.gru_backward(p, cache, R)
num = numeric_grad(lambda: np.sum(R * nc.gru_forward(p, X)[0]), p.U)
print("GRU dU max abs diff:", np.abs(num - grads.U).max())

# late fusion with a shared fc layer, all parameters
cfgs = fu.StreamConfigs(SstConfig(0, 1, 4, 3, dropout_rate=0.0), SstConfig(0, 1, 5, 3, dropout_rate=0.0),
                        SstConfig(0, 1, 4, 3, dropout_rate=0.0))
model = fu.init_two_stream(fu.FusionVariant("late-fc"), (3, 2), cfgs, seed=0).astype(np.float64)
Xv, Xf = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
Y = (rng.random((4, 3)) < 0.5).astype(float)
_, g = fu.two_stream_loss_and_grads(model, Xv, Xf, Y, pos_weight=2.0, training=False)
for name, arr in model.params().items():
    if name not in g:
        continue  # stream heads are bypassed by the shared fc
    num = numeric_grad(lambda: fu.two_stream_loss_and_grads(model, Xv, Xf, Y, 2.0, training=False)[0], arr)
    print(f"{name:14s} max abs diff {np.abs(num - g[name]).max():.2e}")
