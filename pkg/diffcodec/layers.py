"""
Trainable building blocks on top of numerics
"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatchError
from .numerics import Tensor, conv2d, conv_transpose2d, matmul, relu


class Parameter(Tensor):
    """Leaf tensor that always requires gradients"""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in definition order"""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeMismatchError("load_state_dict", [param.shape, value.shape], name)
            param.data = value.copy()


def _uniform(rng: np.random.Generator, bound: float, shape: Sequence[int]) -> np.ndarray:
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear(Module):
    """Affine map on (batch, features) inputs"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init_scale: float = 1.0):
        bound = init_scale / np.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 zero_init: bool = False):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape)
        else:
            weight = _uniform(rng, 1.0 / np.sqrt(in_channels * kernel_size * kernel_size), shape)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 output_padding: int = 0):
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (in_channels, out_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                padding=self.padding, output_padding=self.output_padding)


class MLP(Module):
    """Stack of Linear layers with ReLU between them

    ``final_scale`` shrinks the initial weights of the output layer.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 final_scale: Optional[float] = None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = []
        for index, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = index == len(sizes) - 2
            scale = final_scale if (last and final_scale is not None) else 1.0
            self.layers.append(Linear(n_in, n_out, rng, init_scale=scale))

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)
