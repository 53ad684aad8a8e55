"""
Minimal feed-forward networks in numpy: dense, valid 2-D convolution, average
pooling and pointwise activations, trained with softmax cross-entropy.

Parameters of a model live in one flat float64 vector together with a layout
describing where each tensor sits. Layers that hold parameters contribute a
weight tensor followed by a bias tensor, in layer order.
"""

from typing import TYPE_CHECKING, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pydantic
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from hefl.errors import EmptyDatasetError, LabelError, ModelSpecError, ShapeError

if TYPE_CHECKING:
    from hefl.data import ImageSet

Tensor = np.ndarray
Shape = Tuple[int, ...]

ACTIVATIONS = ("sigmoid", "tanh", "relu")


class LayerSpec(pydantic.BaseModel):
    kind: Literal["dense", "conv2d", "avgpool2d", "activation"]
    units: Optional[int] = pydantic.Field(None, description="Output width of a dense layer.")
    filters: Optional[int] = pydantic.Field(None, description="Output channels of a conv2d layer.")
    kernel: Optional[int] = pydantic.Field(None, description="Square kernel size of a conv2d layer.")
    pool: int = pydantic.Field(2, description="Square window of an avgpool2d layer.")
    activation: Optional[Literal["sigmoid", "tanh", "relu"]] = None

    class Config:
        allow_mutation = False

    @pydantic.root_validator(skip_on_failure=True)
    def _check_kind(cls, values):
        kind = values["kind"]
        if kind == "dense" and not (values.get("units") or 0) > 0:
            raise ValueError("dense layer needs units > 0")
        if kind == "conv2d" and not ((values.get("filters") or 0) > 0 and (values.get("kernel") or 0) > 0):
            raise ValueError("conv2d layer needs filters > 0 and kernel > 0")
        if kind == "avgpool2d" and values.get("pool", 0) < 1:
            raise ValueError("avgpool2d layer needs pool >= 1")
        if kind == "activation" and values.get("activation") is None:
            raise ValueError("activation layer needs an activation name")
        return values

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")


class ParamSlot(pydantic.BaseModel):
    """Location of one parameter tensor inside the flat vector."""

    name: str
    offset: int
    length: int
    shape: Tuple[int, ...]

    class Config:
        allow_mutation = False


class ModelSpec(pydantic.BaseModel):
    """
    Architecture of a classifier. The last layer must be a dense layer with
    ``num_classes`` units; softmax cross-entropy is applied on top of it.
    """

    input_shape: Tuple[int, ...]
    num_classes: int = pydantic.Field(..., gt=1)
    layers: List[LayerSpec]
    _layout: Optional[List[ParamSlot]] = pydantic.PrivateAttr(default=None)

    class Config:
        allow_mutation = False

    def layer_shapes(self) -> List[Shape]:
        """
        Output shape (without the batch axis) of every layer.

        Raises:
            ModelSpecError: When a layer cannot consume its input shape or the
                output layer does not produce ``num_classes`` logits.
        """
        shape: Shape = tuple(self.input_shape)
        shapes = []
        for index, layer in enumerate(self.layers):
            if layer.kind == "dense":
                shape = (layer.units,)
            elif layer.kind == "conv2d":
                if len(shape) != 3:
                    raise ModelSpecError(f"layer {index}: conv2d needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if h < layer.kernel or w < layer.kernel:
                    raise ModelSpecError(f"layer {index}: kernel {layer.kernel} larger than input {shape}")
                shape = (layer.filters, h - layer.kernel + 1, w - layer.kernel + 1)
            elif layer.kind == "avgpool2d":
                if len(shape) != 3:
                    raise ModelSpecError(f"layer {index}: avgpool2d needs a (C, H, W) input, got {shape}")
                c, h, w = shape
                if h < layer.pool or w < layer.pool:
                    raise ModelSpecError(f"layer {index}: pool {layer.pool} larger than input {shape}")
                shape = (c, h // layer.pool, w // layer.pool)
            shapes.append(shape)
        if not self.layers or self.layers[-1].kind != "dense" or shapes[-1] != (self.num_classes,):
            raise ModelSpecError(f"the output layer must be dense with {self.num_classes} units")
        return shapes

    def param_layout(self) -> List[ParamSlot]:
        if self._layout is not None:
            return self._layout
        slots = []
        offset = 0
        in_shape: Shape = tuple(self.input_shape)
        for index, (layer, out_shape) in enumerate(zip(self.layers, self.layer_shapes())):
            if layer.kind == "dense":
                shapes = [(int(np.prod(in_shape)), layer.units), (layer.units,)]
            elif layer.kind == "conv2d":
                shapes = [(layer.filters, in_shape[0], layer.kernel, layer.kernel), (layer.filters,)]
            else:
                shapes = []
            for suffix, shape in zip(("weight", "bias"), shapes):
                length = int(np.prod(shape))
                slots.append(ParamSlot(name=f"{index}.{layer.kind}.{suffix}", offset=offset, length=length, shape=shape))
                offset += length
            in_shape = out_shape
        self._layout = slots
        return slots

    @property
    def param_count(self) -> int:
        layout = self.param_layout()
        return layout[-1].offset + layout[-1].length


class ModelParams(pydantic.BaseModel):
    flat: np.ndarray
    layout: List[ParamSlot]

    class Config:
        arbitrary_types_allowed = True

    @pydantic.validator("flat", pre=True)
    def _as_float_vector(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 1:
            raise ValueError(f"flat parameters must be 1-D, got shape {value.shape}")
        return value

    @pydantic.root_validator(skip_on_failure=True)
    def _check_layout(cls, values):
        offset = 0
        for slot in values["layout"]:
            if slot.offset != offset:
                raise ValueError(f"layout slot {slot.name} is not contiguous")
            offset += slot.length
        if offset != len(values["flat"]):
            raise ValueError(f"layout covers {offset} entries but the vector has {len(values['flat'])}")
        return values

    def __len__(self) -> int:
        return len(self.flat)

    def unflatten(self) -> List[np.ndarray]:
        """Views of every tensor, in layout order."""
        return [self.flat[s.offset : s.offset + s.length].reshape(s.shape) for s in self.layout]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], layout: List[ParamSlot]) -> "ModelParams":
        if len(arrays) != len(layout):
            raise ShapeError(f"expected {len(layout)} tensors, got {len(arrays)}")
        for array, slot in zip(arrays, layout):
            if tuple(np.shape(array)) != tuple(slot.shape):
                raise ShapeError(f"tensor {slot.name} has shape {np.shape(array)}, expected {slot.shape}")
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]) if arrays else np.zeros(0)
        return cls(flat=flat, layout=layout)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        if len(flat) != len(self.flat):
            raise ShapeError(f"parameter vector has length {len(flat)}, expected {len(self.flat)}")
        return ModelParams(flat=flat, layout=self.layout)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat.copy())


class Gradient(pydantic.BaseModel):
    """
    Gradient of the mean batch loss. ``inputs`` is the gradient with respect to
    the input batch and ``labels`` the gradient with respect to the label rows;
    ``observed`` marks the coordinates that carry information (``None`` = all).
    """

    flat: np.ndarray
    inputs: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True


class ForwardCache(pydantic.BaseModel):
    inputs: np.ndarray
    logits: np.ndarray
    steps: list

    class Config:
        arbitrary_types_allowed = True


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if name == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0.0)


def _activation_grad(name: str, x: np.ndarray, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return upstream * y * (1.0 - y)
    if name == "tanh":
        return upstream * (1.0 - y * y)
    return upstream * (x > 0)


def _layer_arrays(spec: ModelSpec, params: ModelParams) -> List[Optional[Tuple[np.ndarray, np.ndarray]]]:
    tensors = iter(params.unflatten())
    return [(next(tensors), next(tensors)) if layer.has_params else None for layer in spec.layers]


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """
    Glorot-uniform weights and zero biases, drawn from ``default_rng(seed)``.

    Raises:
        ModelSpecError: When the layer shapes do not compose.
    """
    rng = np.random.default_rng(seed)
    arrays = []
    for slot in spec.param_layout():
        if slot.name.endswith("bias"):
            arrays.append(np.zeros(slot.shape))
            continue
        if len(slot.shape) == 2:
            fan_in, fan_out = slot.shape
        else:
            receptive = slot.shape[2] * slot.shape[3]
            fan_in, fan_out = slot.shape[1] * receptive, slot.shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-limit, limit, size=slot.shape))
    params = ModelParams.from_arrays(arrays, spec.param_layout())
    logger.trace(f"Initialised {len(params)} parameters with seed {seed}")
    return params


def forward(spec: ModelSpec, params: ModelParams, batch: Tensor) -> Tuple[Tensor, ForwardCache]:
    """
    Computes the logits of ``batch`` (shape ``(B, *input_shape)``).

    Raises:
        ShapeError: When the batch or the parameter vector has the wrong shape.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match input shape {tuple(spec.input_shape)}")
    if len(params) != spec.param_count:
        raise ShapeError(f"parameter vector has length {len(params)}, expected {spec.param_count}")

    inputs = x
    steps = []
    for layer, arrays in zip(spec.layers, _layer_arrays(spec, params)):
        if layer.kind == "dense":
            weight, bias = arrays
            flat = x.reshape(len(x), -1)
            steps.append((x.shape, flat))
            x = flat @ weight + bias
        elif layer.kind == "conv2d":
            weight, bias = arrays
            windows = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
            steps.append(windows)
            x = np.einsum("nchwij,fcij->nfhw", windows, weight, optimize=True) + bias[None, :, None, None]
        elif layer.kind == "avgpool2d":
            p = layer.pool
            n, c, h, w = x.shape
            ho, wo = h // p, w // p
            steps.append(x.shape)
            x = x[:, :, : ho * p, : wo * p].reshape(n, c, ho, p, wo, p).mean(axis=(3, 5))
        else:
            y = _activate(layer.activation, x)
            steps.append((x, y))
            x = y
    return x, ForwardCache(inputs=inputs, logits=x, steps=steps)


def _targets(labels: Tensor, batch_size: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != batch_size:
            raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch_size}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise LabelError("hard labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise LabelError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
        targets = np.zeros((batch_size, num_classes))
        targets[np.arange(batch_size), labels] = 1.0
        return targets
    if labels.shape != (batch_size, num_classes):
        raise ShapeError(f"soft labels have shape {labels.shape}, expected {(batch_size, num_classes)}")
    return labels.astype(np.float64)


def backward(spec: ModelSpec, params: ModelParams, cache: ForwardCache, labels: Tensor) -> Tuple[float, Gradient]:
    """
    Mean softmax cross-entropy of the cached batch and its gradient.

    ``labels`` holds either integer classes ``(B,)`` or label rows ``(B, K)``;
    the loss of a label row ``y`` is ``-sum(y * log softmax(logits))``.

    Raises:
        LabelError: When an integer label is outside ``[0, num_classes)``.
        ShapeError: When labels do not match the batch.
    """
    logits = cache.logits
    batch_size = len(logits)
    targets = _targets(labels, batch_size, spec.num_classes)

    log_probs = log_softmax(logits, axis=1)
    loss = float(-(targets * log_probs).sum() / batch_size)
    probs = np.exp(log_probs)
    upstream = (probs * targets.sum(axis=1, keepdims=True) - targets) / batch_size
    label_grad = -log_probs / batch_size

    grads: List[np.ndarray] = []
    arrays = _layer_arrays(spec, params)
    for layer, weights, step in reversed(list(zip(spec.layers, arrays, cache.steps))):
        if layer.kind == "dense":
            weight, _ = weights
            in_shape, flat = step
            grads.extend([upstream.sum(axis=0), flat.T @ upstream])
            upstream = (upstream @ weight.T).reshape(in_shape)
        elif layer.kind == "conv2d":
            weight, _ = weights
            windows = step
            k = layer.kernel
            grads.extend(
                [
                    upstream.sum(axis=(0, 2, 3)),
                    np.einsum("nchwij,nfhw->fcij", windows, upstream, optimize=True),
                ]
            )
            padded = np.pad(upstream, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            full = sliding_window_view(padded, (k, k), axis=(2, 3))
            upstream = np.einsum("nfhwij,fcij->nchw", full, weight[:, :, ::-1, ::-1], optimize=True)
        elif layer.kind == "avgpool2d":
            p = layer.pool
            in_shape = step
            spread = np.repeat(np.repeat(upstream, p, axis=2), p, axis=3) / (p * p)
            upstream = np.zeros(in_shape)
            upstream[:, :, : spread.shape[2], : spread.shape[3]] = spread
        else:
            x, y = step
            upstream = _activation_grad(layer.activation, x, y, upstream)

    flat = np.concatenate([g.ravel() for g in reversed(grads)])
    return loss, Gradient(flat=flat, inputs=upstream, labels=label_grad)


def sgd_step(params: ModelParams, grad: Gradient, lr: float) -> ModelParams:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grad.flat) != len(params.flat):
        raise ShapeError(f"gradient has length {len(grad.flat)}, parameters {len(params.flat)}")
    return params.with_flat(params.flat - lr * grad.flat)


def train_local(
    spec: ModelSpec,
    params: ModelParams,
    dataset: "ImageSet",
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> ModelParams:
    """
    Minibatch SGD over ``dataset`` for ``epochs`` passes. Sample order is a
    fresh permutation per epoch drawn from ``default_rng(seed)``.

    Raises:
        EmptyDatasetError: When ``dataset`` holds no samples.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            index = order[start : start + batch_size]
            _, cache = forward(spec, params, dataset.images[index])
            _, grad = backward(spec, params, cache, dataset.labels[index])
            params = sgd_step(params, grad, lr)
    return params


def evaluate(spec: ModelSpec, params: ModelParams, dataset: "ImageSet", batch_size: int = 256) -> Tuple[float, float]:
    """Returns ``(mean loss, accuracy in percent)`` over ``dataset``."""
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    total_loss, correct = 0.0, 0
    for start in range(0, n, batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        logits, cache = forward(spec, params, images)
        loss, _ = backward(spec, params, cache, labels)
        total_loss += loss * len(images)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return total_loss / n, 100.0 * correct / n


# --- Presets.


def mlp_spec(
    input_shape: Sequence[int], num_classes: int, hidden: Sequence[int] = (32,), activation: str = "tanh"
) -> ModelSpec:
    layers = []
    for width in hidden:
        layers += [LayerSpec(kind="dense", units=width), LayerSpec(kind="activation", activation=activation)]
    layers.append(LayerSpec(kind="dense", units=num_classes))
    return ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes, layers=layers)


def lenet_lite_spec(
    input_shape: Sequence[int] = (3, 32, 32),
    num_classes: int = 10,
    kernel: int = 5,
    channels: Sequence[int] = (6, 16),
    hidden: Sequence[int] = (120, 84),
    activation: str = "tanh",
    pool: int = 2,
) -> ModelSpec:
    """
    LeNet-5 shaped network: conv/activation stages, each followed by average
    pooling unless ``pool`` is 1, then dense layers.
    """
    layers = []
    for filters in channels:
        layers += [LayerSpec(kind="conv2d", filters=filters, kernel=kernel), LayerSpec(kind="activation", activation=activation)]
        if pool > 1:
            layers.append(LayerSpec(kind="avgpool2d", pool=pool))
    for width in hidden:
        layers += [LayerSpec(kind="dense", units=width), LayerSpec(kind="activation", activation=activation)]
    layers.append(LayerSpec(kind="dense", units=num_classes))
    return ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes, layers=layers)


def build_model_spec(
    name: str,
    input_shape: Sequence[int],
    num_classes: int,
    hidden: Sequence[int] = (32,),
    activation: str = "tanh",
    kernel: int = 5,
    channels: Sequence[int] = (6, 16),
    pool: int = 2,
) -> ModelSpec:
    if name == "mlp":
        spec = mlp_spec(input_shape, num_classes, hidden=hidden, activation=activation)
    elif name == "lenet_lite":
        spec = lenet_lite_spec(input_shape, num_classes, kernel=kernel, channels=channels, hidden=hidden, activation=activation, pool=pool)
    else:
        raise ModelSpecError(f"unknown model preset {name!r}")
    spec.layer_shapes()
    return spec
