"""
Training the radar classifier on one machine
============================================

A single agent with the whole synthetic training split, plain SGD.
"""
import numpy as np

from d2dfl import datasets
from d2dfl.nn import Batch, eval_loss, init_model, loss_and_grad, sgd_step
from d2dfl.selfcheck import gradient_max_error, random_case

# backprop against central finite differences first
rng = np.random.default_rng(0)
print("max gradient relative error:", max(gradient_max_error(*random_case(rng)) for _ in range(5)))

data = datasets.gen_synthetic(per_class=150, seed=0)
train, test = datasets.preprocess(data)
print("features:", train.features.shape, "scale:", train.scale)

model = init_model(0)
print("initial validation loss: %.4f" % eval_loss(model, test))
for step in range(1, 2001):
    idx = rng.choice(len(train), 16, replace=False)
    _, g = loss_and_grad(model, Batch(train.features[idx], train.labels[idx]))
    model = sgd_step(model, g, 0.025)
    if step % 500 == 0:
        print("step %4d  validation loss %.4f" % (step, eval_loss(model, test)))
