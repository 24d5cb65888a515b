"""Independent reference computations shared by the tests."""

import math


def loop_forward(net, x):
    """Dense-net forward pass with plain python loops, no numpy matmul."""
    h = list(x)
    for W, b, act in zip(net.weights, net.biases, net.activations):
        out = []
        for j in range(W.shape[1]):
            z = b[j] + sum(h[i] * W[i, j] for i in range(len(h)))
            out.append(math.tanh(z) if act == "tanh" else max(z, 0.0) if act == "relu" else z)
        h = out
    return h
