"""
Top-k messages over a lossy link
================================

What goes on the air when an agent shares its model or gradient.
"""
import numpy as np

from d2dfl import comms
from d2dfl.nn import init_model

g = comms.ring_topology(15, seed=0)
print("ring neighbours of agent 0:", g.neighbors(0))
M = comms.metropolis_mixing(g)
print("row sums", M.sum(axis=1).min(), M.sum(axis=1).max(), "symmetric", np.allclose(M, M.T))

m = init_model(0)
msg = comms.sparsify_topk(m, 5750)
print("entries", msg.n_entries, "bytes", msg.byte_size, "per layer", msg.layer_bytes())

print("frames per layer", comms.frame_count(msg, comms.ChannelModel()))
for bler in (0.0, 0.01, 0.1):
    ch = comms.ChannelModel(bler=bler)
    print("bler", bler)
    rng = np.random.default_rng(1)
    got = comms.transmit(msg, ch, rng)
    print("  lost layers", got.lost, "dropped frames", got.dropped_frames)

print("gossip round   (ms, kB):", comms.round_accounting([msg, msg]))
grad = comms.sparsify_topk(m, 8000, comms.GRADIENT)
print("diffusion round (ms, kB):", comms.round_accounting([msg, msg, grad, grad]))
