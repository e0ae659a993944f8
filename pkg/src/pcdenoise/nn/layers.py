"""Dense layers built on the tensor ops."""

import numpy as np

from .tensor import add, matmul, relu

__all__ = ["Linear", "MLP", "ResidualBlock"]


class Linear:
    """``y = x @ W + b`` with He-uniform initialisation scaled by ``gain``."""

    def __init__(self, params, name, n_in, n_out, rng, gain=1.0):
        bound = gain * np.sqrt(6.0 / n_in)
        self.W = params.add(f"{name}.W", rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = params.add(f"{name}.b", np.zeros(n_out))
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x):
        return add(matmul(x, self.W), self.b)


class MLP:
    """Stack of linear layers with ReLU between them.

    Args:
        sizes: layer widths including input, e.g. ``(35, 32, 32, 32)`` is a
            3-layer MLP.
        final_relu: also apply ReLU after the last layer.
    """

    def __init__(self, params, name, sizes, rng, final_relu=False):
        self.layers = [
            Linear(params, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.final_relu = final_relu

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = relu(x)
        return x


class ResidualBlock:
    """``x + L2(relu(L1(relu(x))))``."""

    def __init__(self, params, name, width, rng):
        self.fc1 = Linear(params, f"{name}.fc1", width, width, rng)
        self.fc2 = Linear(params, f"{name}.fc2", width, width, rng)

    def __call__(self, x):
        return add(x, self.fc2(relu(self.fc1(relu(x)))))
