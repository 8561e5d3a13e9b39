"""A small reverse-mode differentiation engine on top of numpy.

`Tensor` wraps an ndarray and remembers the op that produced it. Calling
`backward()` on a scalar result walks the graph in reverse topological order
and accumulates `.grad` on every node that requires it. Only the handful of
ops needed by dense and 2-D convolutional classifiers are provided.
"""

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"Unknown precision: {precision}. Expected one of {sorted(PRECISIONS)}.")


def precision_of(dtype) -> str:
    for name, candidate in PRECISIONS.items():
        if np.dtype(candidate) == np.dtype(dtype):
            return name
    raise ValueError(f"Unsupported dtype: {dtype}.")


class Tensor:
    """A node in the computation graph.

    Attributes:
        data (np.ndarray): The value of the node.
        grad (Optional[np.ndarray]): Accumulated gradient of the final scalar w.r.t. `data`.
        requires_grad (bool): Whether gradients flow into this node.
        op (str): Name of the op that produced the node ("leaf" for inputs and parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this node.

        Args:
            grad (Optional[np.ndarray]): Seed gradient. Defaults to ones, which is the usual
                choice for a scalar loss.
        """
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad, parents if requires_grad else (), backward if requires_grad else None, op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(out, (a, b), backward, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (dense) or per-channel (conv) bias."""
    if x.data.ndim == 2:
        shaped = bias.data
        reduce_axes = (0,)
    else:
        shaped = bias.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
        reduce_axes = (0,) + tuple(range(2, x.data.ndim))
    out = x.data + shaped

    def backward(g):
        x._accumulate(g)
        bias._accumulate(g.sum(axis=reduce_axes))

    return _result(out, (x, bias), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, np.zeros((), dtype=x.data.dtype))

    def backward(g):
        x._accumulate(g * positive)

    return _result(out, (x,), backward, "relu")


def flatten(x: Tensor) -> Tensor:
    in_shape = x.data.shape
    out = x.data.reshape(in_shape[0], -1)

    def backward(g):
        x._accumulate(g.reshape(in_shape))

    return _result(out, (x,), backward, "flatten")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    Args:
        x (Tensor): Input of shape (N, C, H, W).
        weight (Tensor): Kernel of shape (O, C, k, k).
        stride (int): Step between output positions along both spatial axes.

    Returns:
        Tensor of shape (N, O, (H - k) // stride + 1, (W - k) // stride + 1).
    """
    k = weight.data.shape[-1]
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    # (N, C, Ho, Wo, k, k) x (O, C, k, k) -> (N, Ho, Wo, O)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            h_end = stride * (out_h - 1) + 1
            w_end = stride * (out_w - 1) + 1
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    dx[:, :, i : i + h_end : stride, j : j + w_end : stride] += contrib
            x._accumulate(dx)

    return _result(out, (x, weight), backward, "conv2d")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer `labels` under `logits` (N, classes)."""
    n = logits.data.shape[0]
    rows = np.arange(n)
    logp = log_softmax(logits.data)
    loss = -logp[rows, labels].mean()

    def backward(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1
        logits._accumulate(probs * (g / n))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")
