"""Stateful layer objects and the Model container.

Each layer owns its parameter arrays, caches what its backward pass needs
during forward, and exposes (name, array) pairs for the optimizer and the
serializer. A Model is an ordered layer list plus the ArchSpec it was built
from; built eval or folded models are safe to share across threads as long
as nobody calls forward(train=True) on them.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ShapeError


class Layer:
    """Base class: a named op with parameters and a cached backward."""

    name = ""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def named_params(self):
        """Learnable (name, array) pairs, stable order."""
        return []

    def named_buffers(self):
        """Non-learnable state that still serializes (BN running stats)."""
        return []

    def param_grads(self):
        """Gradients aligned one-to-one with named_params()."""
        return []


class Conv2d(Layer):
    def __init__(self, p: ops.ConvParams, name: str = ""):
        self.p = p
        self.name = name
        self._x = None
        self.dweight = None
        self.dbias = None

    def forward(self, x, train=False):
        self._x = x
        return ops.conv2d_forward(x, self.p)

    def backward(self, grad):
        dx, self.dweight, self.dbias = ops.conv2d_backward(self._x, self.p, grad)
        return dx

    def named_params(self):
        out = [("weight", self.p.weight)]
        if self.p.bias is not None:
            out.append(("bias", self.p.bias))
        return out

    def param_grads(self):
        out = [("weight", self.dweight)]
        if self.p.bias is not None:
            out.append(("bias", self.dbias))
        return out


class DepthwiseConv2d(Layer):
    def __init__(self, p: ops.DepthwiseConvParams, name: str = ""):
        self.p = p
        self.name = name
        self._x = None
        self.dweight = None
        self.dbias = None

    def forward(self, x, train=False):
        self._x = x
        return ops.depthwise_conv2d_forward(x, self.p)

    def backward(self, grad):
        dx, self.dweight, self.dbias = ops.depthwise_conv2d_backward(self._x, self.p, grad)
        return dx

    def named_params(self):
        out = [("weight", self.p.weight)]
        if self.p.bias is not None:
            out.append(("bias", self.p.bias))
        return out

    def param_grads(self):
        out = [("weight", self.dweight)]
        if self.p.bias is not None:
            out.append(("bias", self.dbias))
        return out


class GDConv(Layer):
    def __init__(self, p: ops.GDConvParams, name: str = ""):
        self.p = p
        self.name = name
        self._x = None
        self.dweight = None
        self.dbias = None

    def forward(self, x, train=False):
        self._x = x
        return ops.gdconv_forward(x, self.p)

    def backward(self, grad):
        dx, self.dweight, self.dbias = ops.gdconv_backward(self._x, self.p, grad)
        return dx

    def named_params(self):
        out = [("weight", self.p.weight)]
        if self.p.bias is not None:
            out.append(("bias", self.p.bias))
        return out

    def param_grads(self):
        out = [("weight", self.dweight)]
        if self.p.bias is not None:
            out.append(("bias", self.dbias))
        return out


class BatchNorm2d(Layer):
    def __init__(self, p: ops.BatchNormParams, name: str = ""):
        self.p = p
        self.name = name
        self._cache = None
        self.dgamma = None
        self.dbeta = None

    def forward(self, x, train=False):
        y, self._cache = ops.batchnorm_forward(x, self.p, train)
        return y

    def backward(self, grad):
        dx, self.dgamma, self.dbeta = ops.batchnorm_backward(self.p, self._cache, grad)
        return dx

    def named_params(self):
        return [("gamma", self.p.gamma), ("beta", self.p.beta)]

    def named_buffers(self):
        return [("running_mean", self.p.running_mean), ("running_var", self.p.running_var)]

    def param_grads(self):
        return [("gamma", self.dgamma), ("beta", self.dbeta)]


class PReLU(Layer):
    def __init__(self, p: ops.PReLUParams, name: str = ""):
        self.p = p
        self.name = name
        self._x = None
        self.dslope = None

    def forward(self, x, train=False):
        self._x = x
        return ops.prelu_forward(x, self.p)

    def backward(self, grad):
        dx, self.dslope = ops.prelu_backward(self._x, self.p, grad)
        return dx

    def named_params(self):
        return [("slope", self.p.slope)]

    def param_grads(self):
        return [("slope", self.dslope)]


class ReLU(Layer):
    def __init__(self, name: str = ""):
        self.name = name
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return ops.relu_forward(x)

    def backward(self, grad):
        return ops.relu_backward(self._x, grad)


class GlobalAvgPool(Layer):
    def __init__(self, name: str = ""):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return ops.gapool_forward(x)

    def backward(self, grad):
        return ops.gapool_backward(self._shape, grad)


class FCHead(Layer):
    """Flatten-and-project head used for the head-comparison experiments."""

    def __init__(self, weight: np.ndarray, name: str = ""):
        self.weight = weight
        self.name = name
        self._x = None
        self.dweight = None

    def forward(self, x, train=False):
        self._x = x
        return ops.fc_forward(x, self.weight)

    def backward(self, grad):
        dx, self.dweight = ops.fc_backward(self._x, self.weight, grad)
        return dx

    def named_params(self):
        return [("weight", self.weight)]

    def param_grads(self):
        return [("weight", self.dweight)]


class Residual(Layer):
    """Runs its body and adds the identity shortcut; no activation after."""

    def __init__(self, body: list[Layer], name: str = ""):
        self.body = body
        self.name = name

    def forward(self, x, train=False):
        y = x
        for layer in self.body:
            y = layer.forward(y, train)
        if y.shape != x.shape:
            raise ShapeError(f"{self.name}: residual body changed shape {x.shape} -> {y.shape}")
        return x + y

    def backward(self, grad):
        g = grad
        for layer in reversed(self.body):
            g = layer.backward(g)
        return g + grad


def walk_leaves(layers):
    """Yield (name, layer) for every non-container layer.

    Leaf names are absolute already (block layers carry their full path),
    so containers contribute nothing to the name.
    """
    for layer in layers:
        if isinstance(layer, Residual):
            yield from walk_leaves(layer.body)
        else:
            yield layer.name, layer


class Model:
    """Ordered layer sequence materialized from an ArchSpec.

    global_op_index points at the top-level position of the global operator
    (GDConv / GAPool / FC head); layers after it form the post-global
    weight-decay group during training.
    """

    def __init__(self, layers: list[Layer], arch, global_op_index: int, folded: bool = False):
        self.layers = layers
        self.arch = arch
        self.global_op_index = global_op_index
        self.folded = folded

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train and self.folded:
            raise ValueError("folded models are inference-only")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def leaves(self):
        return list(walk_leaves(self.layers))

    def named_params(self):
        out = []
        for lname, layer in self.leaves():
            for pname, arr in layer.named_params():
                out.append((f"{lname}.{pname}", arr))
        return out

    def named_buffers(self):
        out = []
        for lname, layer in self.leaves():
            for bname, arr in layer.named_buffers():
                out.append((f"{lname}.{bname}", arr))
        return out

    def param_grads(self):
        out = []
        for lname, layer in self.leaves():
            for pname, g in layer.param_grads():
                out.append((f"{lname}.{pname}", g))
        return out

    def embed_forward(self, x: np.ndarray) -> np.ndarray:
        """Eval forward returning flat (n, embedding_dim) features."""
        y = self.forward(x, train=False)
        return y.reshape(y.shape[0], -1)

    def forward_prefix(self, x: np.ndarray, stop: int) -> np.ndarray:
        """Eval forward through layers[:stop], caching for backward_prefix."""
        for layer in self.layers[:stop]:
            x = layer.forward(x, train=False)
        return x

    def backward_prefix(self, grad: np.ndarray, stop: int) -> np.ndarray:
        for layer in reversed(self.layers[:stop]):
            grad = layer.backward(grad)
        return grad
