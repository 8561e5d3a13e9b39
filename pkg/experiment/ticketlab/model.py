"""Model descriptions, parameter sets and the forward/backward passes."""

from dataclasses import asdict, dataclass, field
import math
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .config import ModelConfig, digest
from .errors import ConfigurationError, CongruenceError, NumericFailure
from .rng import stream


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2D, ReLU, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus the per-sample input shape and class count.

    Dense layers consume flat vectors, Conv2D layers consume (channels, height, width)
    maps. Shapes must compose; call `validate()` (done by `from_config`) to check.
    """

    input_shape: tuple
    class_count: int
    layers: tuple

    def output_shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer."""
        shape = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ConfigurationError(f"layer {i} (Dense) expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2D):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigurationError(
                        f"layer {i} (Conv2D) expects ({layer.in_channels}, H, W), got {shape}"
                    )
                k, s = layer.kernel_size, layer.stride
                if k < 1 or s < 1 or shape[1] < k or shape[2] < k:
                    raise ConfigurationError(f"layer {i} (Conv2D) kernel {k}/stride {s} does not fit {shape}")
                shape = (layer.out_channels, (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ConfigurationError(f"layer {i}: unknown layer type {type(layer).__name__}")
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        if not any(isinstance(layer, (Dense, Conv2D)) for layer in self.layers):
            raise ConfigurationError("a model needs at least one prunable (Dense or Conv2D) layer")
        shapes = self.output_shapes()
        if shapes[-1] != (self.class_count,):
            raise ConfigurationError(f"model output shape {shapes[-1]} does not match class_count {self.class_count}")

    def digest(self) -> str:
        layers = [{"type": type(layer).__name__, **asdict(layer)} for layer in self.layers]
        return digest({"input_shape": list(self.input_shape), "class_count": self.class_count, "layers": layers})

    @classmethod
    def from_config(cls, config: ModelConfig) -> "ModelSpec":
        layers = []
        for i, lc in enumerate(config.layers):
            kind = lc.type.lower()
            try:
                if kind == "dense":
                    layers.append(Dense(int(lc.in_features), int(lc.out_features), lc.bias))
                elif kind == "conv2d":
                    layers.append(
                        Conv2D(int(lc.in_channels), int(lc.out_channels), int(lc.kernel_size), lc.stride, lc.bias)
                    )
                elif kind == "relu":
                    layers.append(ReLU())
                elif kind == "flatten":
                    layers.append(Flatten())
                else:
                    raise ConfigurationError(f"layer {i}: unknown layer type {lc.type}")
            except TypeError:
                raise ConfigurationError(f"layer {i} ({lc.type}) is missing a size field")
        spec = cls(tuple(config.input_shape), config.class_count, tuple(layers))
        spec.validate()
        return spec


def mlp(input_dim: int, hidden: Sequence[int], class_count: int, bias: bool = True) -> ModelSpec:
    """Dense→ReLU→…→Dense classifier."""
    layers = []
    widths = [input_dim, *hidden]
    for a, b in zip(widths, widths[1:]):
        layers += [Dense(a, b, bias), ReLU()]
    layers.append(Dense(widths[-1], class_count, bias))
    spec = ModelSpec((input_dim,), class_count, tuple(layers))
    spec.validate()
    return spec


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    prunable: bool


@dataclass
class ParamSet:
    """Ordered, named weight tensors of one model.

    Entries follow model topology (`layer{i}.weight`, `layer{i}.bias`). Only weight
    matrices and kernels are prunable. `provenance` records where the weights came
    from: init, reinit, rewind(k), pretrained(T), sparse_trained, finetuned, with a
    ⊙m suffix once a mask has been applied.
    """

    entries: list[ParamEntry]
    provenance: str = "init"
    metadata: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for entry in self.entries:
            if entry.name == name:
                return entry.value
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def prunable_names(self) -> list[str]:
        return [e.name for e in self.entries if e.prunable]

    @property
    def dtype(self) -> np.dtype:
        return self.entries[0].value.dtype

    def prunable(self) -> list[ParamEntry]:
        return [e for e in self.entries if e.prunable]

    def layer_sizes(self) -> list[int]:
        return [int(e.value.size) for e in self.entries if e.prunable]

    def copy(self, provenance: Optional[str] = None) -> "ParamSet":
        return ParamSet(
            [ParamEntry(e.name, e.value.copy(), e.prunable) for e in self.entries],
            self.provenance if provenance is None else provenance,
            dict(self.metadata),
        )

    def with_values(self, values: Sequence[np.ndarray], provenance: Optional[str] = None) -> "ParamSet":
        if len(values) != len(self.entries):
            raise CongruenceError(f"expected {len(self.entries)} tensors, got {len(values)}")
        return ParamSet(
            [ParamEntry(e.name, v, e.prunable) for e, v in zip(self.entries, values)],
            self.provenance if provenance is None else provenance,
            dict(self.metadata),
        )

    def scale(self, c: float) -> "ParamSet":
        return self.with_values([e.value * e.value.dtype.type(c) for e in self.entries])

    def check_congruent(self, other) -> None:
        """Raise `CongruenceError` unless `other` has the same names and shapes in the same order."""
        other_entries = list(other)
        if len(other_entries) != len(self.entries):
            raise CongruenceError(f"expected {len(self.entries)} entries, got {len(other_entries)}")
        for mine, theirs in zip(self.entries, other_entries):
            if mine.name != theirs.name or mine.value.shape != theirs.value.shape:
                raise CongruenceError(
                    f"entry {mine.name}{mine.value.shape} does not match {theirs.name}{theirs.value.shape}"
                )

    def is_finite(self) -> bool:
        return all(np.isfinite(e.value).all() for e in self.entries)


def fan_in(layer: Union[Dense, Conv2D]) -> int:
    if isinstance(layer, Dense):
        return layer.in_features
    return layer.in_channels * layer.kernel_size * layer.kernel_size


def init_params(model: ModelSpec, seed: int, precision: str = "f32", purpose: str = "init") -> ParamSet:
    """Draw θ₀ for `model`.

    Weights are i.i.d. uniform on [-b, b] with b = sqrt(6 / fan_in); biases are zero.
    The draw is a pure function of (model, seed, purpose); use purpose="reinit" (with a
    derived seed) for θ₀′.
    """
    dtype = ag.dtype_for(precision)
    rng = stream(seed, purpose)
    entries = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            shape = (layer.in_features, layer.out_features)
        elif isinstance(layer, Conv2D):
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        else:
            continue
        bound = math.sqrt(6.0 / fan_in(layer))
        weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
        entries.append(ParamEntry(f"layer{i}.weight", weight, True))
        if layer.bias:
            out = layer.out_features if isinstance(layer, Dense) else layer.out_channels
            entries.append(ParamEntry(f"layer{i}.bias", np.zeros(out, dtype=dtype), False))
    return ParamSet(entries, "reinit" if purpose == "reinit" else "init", {"seed": int(seed), "init": "kaiming_uniform"})


def _graph(model: ModelSpec, params: ParamSet, batch: np.ndarray, track: bool):
    """Run the layers, returning (logits node, {name: leaf node})."""
    expected = tuple(model.input_shape)
    if batch.ndim != len(expected) + 1 or tuple(batch.shape[1:]) != expected:
        raise ConfigurationError(f"batch shape {batch.shape} does not match model input (N, {expected})")
    leaves = {e.name: ag.Tensor(e.value, requires_grad=track) for e in params}
    x = ag.Tensor(batch.astype(params.dtype, copy=False))
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            x = ag.matmul(x, leaves[f"layer{i}.weight"])
            if layer.bias:
                x = ag.add_bias(x, leaves[f"layer{i}.bias"])
        elif isinstance(layer, Conv2D):
            x = ag.conv2d(x, leaves[f"layer{i}.weight"], layer.stride)
            if layer.bias:
                x = ag.add_bias(x, leaves[f"layer{i}.bias"])
        elif isinstance(layer, ReLU):
            x = ag.relu(x)
        elif isinstance(layer, Flatten):
            x = ag.flatten(x)
    return x, leaves


def forward(model: ModelSpec, params: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (batch_size, class_count)."""
    logits, _ = _graph(model, params, batch, track=False)
    if not np.isfinite(logits.data).all():
        raise NumericFailure("non-finite logits")
    return logits.data


def loss_and_grads(
    model: ModelSpec,
    params: ParamSet,
    batch: np.ndarray,
    labels: np.ndarray,
    epoch: Optional[int] = None,
    batch_index: Optional[int] = None,
) -> tuple[float, ParamSet]:
    """Mean softmax cross-entropy and its gradient w.r.t. every entry of `params`.

    Raises:
        NumericFailure: the loss or a gradient is not finite. `epoch`/`batch_index` are
            attached to the error.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.class_count):
        raise ConfigurationError(f"labels must lie in [0, {model.class_count})")
    logits, leaves = _graph(model, params, batch, track=True)
    loss = ag.softmax_cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite loss {value}", epoch=epoch, batch=batch_index)
    loss.backward()
    grads = []
    for entry in params:
        g = leaves[entry.name].grad
        grads.append(np.zeros_like(entry.value) if g is None else g)
    grad_set = params.with_values(grads, provenance="grad")
    if not grad_set.is_finite():
        raise NumericFailure("non-finite gradient", epoch=epoch, batch=batch_index)
    return value, grad_set


def accuracy(model: ModelSpec, params: ParamSet, dataset, batch_size: int = 1024) -> float:
    """Fraction of samples whose argmax logit equals the label (ties go to the smaller class)."""
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("accuracy needs a non-empty dataset")
    correct = 0
    for start in range(0, n, batch_size):
        logits = forward(model, params, dataset.inputs[start : start + batch_size])
        correct += int((np.argmax(logits, axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / n
