"""A small dense-array network engine that hosts quantizers.

Parameters are stored at full precision ("shadow weights"); quantization is
applied functionally at forward time. Three forward modes exist:

* ``float``: every quantizer is bypassed.
* ``soft``: active quantizers use the sigmoid-sum form (differentiable).
* ``hard``: active quantizers use the step form; inference only.

Gradients are computed by hand-written reverse passes per layer.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import _ops
from .core import QuantLevels, QuantParams, ideal_quantize, soft_quantize, soft_quantize_backward
from .exceptions import ConfigurationError, ContractError, NumericError

__all__ = [
    "Conv2d",
    "Flatten",
    "Gradients",
    "Linear",
    "MaxPool2d",
    "Network",
    "Quantizer",
    "ReLU",
    "SGD",
    "Tape",
    "backward",
    "forward",
    "sgd_step",
    "softmax_cross_entropy",
]

MODES = ("float", "soft", "hard")
PARAM_FLOOR = 1e-8

softmax_cross_entropy = _ops.softmax_cross_entropy


class Quantizer:
    """A level set plus mutable operator state, attachable to layers.

    ``active`` switches the quantizer on in soft/hard forwards; ``trainable``
    gates optimizer updates on top of the per-scalar learnable flags.
    """

    def __init__(self, levels, params: QuantParams, name: str = "q", kind: str = "weight",
                 *, active: bool = True, trainable: bool = True, report=None):
        self.levels = QuantLevels.from_spec(levels)
        if params.biases.shape != (self.levels.n,):
            raise ConfigurationError(
                f"quantizer {name!r}: {params.biases.size} biases for level set {self.levels}"
            )
        self.params = params
        self.name = name
        self.kind = kind
        self.active = active
        self.trainable = trainable
        self.report = report

    @property
    def temperature(self) -> float:
        return self.params.temperature

    def set_temperature(self, t: float):
        self.params = self.params.replace(temperature=float(t))

    def __call__(self, x, mode: str):
        if mode == "soft":
            return soft_quantize(x, self.levels, self.params)
        if mode == "hard":
            return ideal_quantize(x, self.levels, self.params)
        return x

    def backward(self, x, upstream):
        return soft_quantize_backward(x, upstream, self.levels, self.params)

    def __repr__(self):
        return f"Quantizer({self.name!r}, {self.levels}, {self.params!r}, active={self.active})"


class Layer:
    kind = "layer"
    has_params = False

    def __init__(self, name: str):
        self.name = name
        self.weight_quantizer: Quantizer | None = None
        self.activation_quantizer: Quantizer | None = None
        self.trainable = True

    def parameters(self) -> dict:
        return {}

    def output_shape(self, input_shape):
        return input_shape

    def quantizers(self):
        return [q for q in (self.weight_quantizer, self.activation_quantizer) if q is not None]

    def _act_forward(self, y, mode, cache):
        q = self.activation_quantizer
        if q is not None and q.active and mode != "float":
            cache["act_in"] = y
            return q(y, mode)
        return y

    def _act_backward(self, cache, dy, qgrads):
        if "act_in" in cache:
            g = self.activation_quantizer.backward(cache["act_in"], dy)
            qgrads.append((self.activation_quantizer, g))
            return g.d_input
        return dy


class _Weighted(Layer):
    has_params = True

    def effective_weight(self, mode, cache=None):
        q = self.weight_quantizer
        if q is not None and q.active and mode != "float":
            if cache is not None:
                cache["wq"] = True
            return q(self.weight, mode)
        return self.weight

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def _weight_backward(self, cache, dw, grads, qgrads):
        if cache.get("wq"):
            g = self.weight_quantizer.backward(self.weight, dw)
            qgrads.append((self.weight_quantizer, g))
            dw = g.d_input
        grads[f"{self.name}.weight"] = dw


class Linear(_Weighted):
    kind = "linear"

    def __init__(self, name, in_features, out_features, rng=None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        self.bias = np.zeros(out_features)

    def token(self):
        return f"linear:{self.out_features}"

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ContractError(f"{self.name}: expects input ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x, mode):
        cache = {"x": x}
        w = self.effective_weight(mode, cache)
        cache["w_eff"] = w
        y = x @ w.T + self.bias
        return self._act_forward(y, mode, cache), cache

    def backward(self, cache, dy, grads, qgrads):
        dy = self._act_backward(cache, dy, qgrads)
        grads[f"{self.name}.bias"] = dy.sum(axis=0)
        self._weight_backward(cache, dy.T @ cache["x"], grads, qgrads)
        return dy @ cache["w_eff"]


class Conv2d(_Weighted):
    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                 (out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels)

    def token(self):
        return f"conv:{self.out_channels}:{self.kernel_size}:{self.padding}:{self.stride}"

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ContractError(f"{self.name}: expects ({self.in_channels}, H, W) input, got {tuple(input_shape)}")
        ho, wo = _ops.conv_output_hw(input_shape[1], input_shape[2], self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ContractError(f"{self.name}: kernel larger than padded input {tuple(input_shape)}")
        return (self.out_channels, ho, wo)

    def forward(self, x, mode):
        cache = {"x_shape": x.shape}
        w = self.effective_weight(mode, cache)
        w2 = w.reshape(self.out_channels, -1)
        y, cols = _ops.conv2d(x, w2, self.kernel_size, self.stride, self.padding)
        y = y + self.bias[None, :, None, None]
        cache["cols"], cache["w2"] = cols, w2
        return self._act_forward(y, mode, cache), cache

    def backward(self, cache, dy, grads, qgrads):
        dy = self._act_backward(cache, dy, qgrads)
        grads[f"{self.name}.bias"] = dy.sum(axis=(0, 2, 3))
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dw = (d2.T @ cache["cols"]).reshape(self.weight.shape)
        self._weight_backward(cache, dw, grads, qgrads)
        return _ops.col2im(d2 @ cache["w2"], cache["x_shape"], self.kernel_size, self.stride, self.padding)


class ReLU(Layer):
    kind = "relu"

    def token(self):
        return "relu"

    def forward(self, x, mode):
        mask = x > 0
        cache = {"mask": mask}
        return self._act_forward(np.where(mask, x, 0.0), mode, cache), cache

    def backward(self, cache, dy, grads, qgrads):
        dy = self._act_backward(cache, dy, qgrads)
        return np.where(cache["mask"], dy, 0.0)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, name, size=2):
        super().__init__(name)
        self.size = size

    def token(self):
        return f"pool:{self.size}"

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ContractError(f"{self.name}: expects (C, H, W) input, got {tuple(input_shape)}")
        c, h, w = input_shape
        if h < self.size or w < self.size:
            raise ContractError(f"{self.name}: pool size {self.size} exceeds input {tuple(input_shape)}")
        return (c, h // self.size, w // self.size)

    def forward(self, x, mode):
        y, idx = _ops.maxpool_forward(x, self.size)
        cache = {"idx": idx, "x_shape": x.shape}
        return self._act_forward(y, mode, cache), cache

    def backward(self, cache, dy, grads, qgrads):
        dy = self._act_backward(cache, dy, qgrads)
        return _ops.maxpool_backward(dy, cache["idx"], cache["x_shape"], self.size)


class Flatten(Layer):
    kind = "flatten"

    def token(self):
        return "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, mode):
        return x.reshape(x.shape[0], -1), {"x_shape": x.shape}

    def backward(self, cache, dy, grads, qgrads):
        return dy.reshape(cache["x_shape"])


@dataclass
class Tape:
    mode: str
    caches: list


@dataclass
class Gradients:
    """Parameter gradients keyed ``"<layer>.weight"`` / ``"<layer>.bias"``, and
    per-quantizer ``{"alpha", "beta", "biases"}`` gradients keyed by quantizer name."""

    params: dict = field(default_factory=dict)
    quantizers: dict = field(default_factory=dict)

    def add_quantizer(self, q: Quantizer, g):
        acc = self.quantizers.get(q.name)
        if acc is None:
            self.quantizers[q.name] = {"alpha": g.d_alpha, "beta": g.d_beta, "biases": np.array(g.d_biases)}
        else:
            acc["alpha"] += g.d_alpha
            acc["beta"] += g.d_beta
            acc["biases"] = acc["biases"] + g.d_biases


def parse_arch(arch: str) -> list[tuple]:
    """Parse ``"conv:8:3:1,relu,pool:2,flatten,linear:10"`` into layer specs.

    ``conv:<out>:<kernel>[:<padding>[:<stride>]]``, ``linear:<out>``,
    ``pool:<size>``, ``relu`` and ``flatten``.
    """
    specs = []
    for tok in arch.replace(" ", "").split(","):
        if not tok:
            continue
        head, *args = tok.split(":")
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ConfigurationError(f"bad layer token {tok!r}") from None
        if head == "conv" and 2 <= len(nums) <= 4:
            specs.append(("conv2d", *nums))
        elif head == "linear" and len(nums) == 1:
            specs.append(("linear", nums[0]))
        elif head in ("pool", "maxpool") and len(nums) <= 1:
            specs.append(("maxpool2d", nums[0] if nums else 2))
        elif head in ("relu", "flatten") and not nums:
            specs.append((head,))
        else:
            raise ConfigurationError(f"bad layer token {tok!r}")
    if not specs:
        raise ConfigurationError("empty architecture")
    return specs


_SHORT_NAMES = {"conv2d": "conv", "linear": "fc", "maxpool2d": "pool"}


class Network:
    """An ordered stack of layers with optional quantizer attachments."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique")
        self.shapes = self._infer_shapes()

    @classmethod
    def from_arch(cls, arch: str, input_shape, seed: int = 0) -> "Network":
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        layers = []
        counts: dict[str, int] = {}
        for spec in parse_arch(arch):
            kind = spec[0]
            counts[kind] = counts.get(kind, 0) + 1
            name = f"{_SHORT_NAMES.get(kind, kind)}{counts[kind]}"
            if kind == "conv2d":
                if len(shape) != 3:
                    raise ConfigurationError(f"{name}: convolution needs (C, H, W) input, got {shape}")
                out, k = spec[1], spec[2]
                pad = spec[3] if len(spec) > 3 else 0
                stride = spec[4] if len(spec) > 4 else 1
                layer = Conv2d(name, shape[0], out, k, stride, pad, rng)
            elif kind == "linear":
                if len(shape) != 1:
                    raise ConfigurationError(f"{name}: linear layer needs flat input, got {shape}; add 'flatten'")
                layer = Linear(name, shape[0], spec[1], rng)
            elif kind == "maxpool2d":
                layer = MaxPool2d(name, spec[1])
            elif kind == "relu":
                layer = ReLU(name)
            else:
                layer = Flatten(name)
            shape = layer.output_shape(shape)
            layers.append(layer)
        return cls(layers, input_shape)

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def arch(self) -> str:
        return ",".join(l.token() for l in self.layers)

    def parameterized_layers(self) -> list[_Weighted]:
        return [l for l in self.layers if l.has_params]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def quantizers(self) -> list[Quantizer]:
        """Distinct quantizers in layer order (a shared quantizer appears once)."""
        seen, out = set(), []
        for layer in self.layers:
            for q in layer.quantizers():
                if id(q) not in seen:
                    seen.add(id(q))
                    out.append(q)
        return out

    def weight_quantizers(self):
        return [q for q in self.quantizers() if q.kind == "weight"]

    def activation_quantizers(self):
        return [q for q in self.quantizers() if q.kind == "activation"]

    def has_quantizers(self) -> bool:
        return bool(self.quantizers())

    def named_parameters(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def attach_weight_quantizer(self, layer_name: str, quantizer: Quantizer):
        layer = self.layer(layer_name)
        if not layer.has_params:
            raise ContractError(f"{layer_name} has no weights to quantize")
        quantizer.kind = "weight"
        layer.weight_quantizer = quantizer

    def attach_activation_quantizer(self, layer_name: str, quantizer: Quantizer):
        idx = [l.name for l in self.layers].index(layer_name)
        if not self._post_relu(idx):
            raise ContractError(
                f"activation quantizers attach after a ReLU (optionally followed by pooling); {layer_name} is not"
            )
        quantizer.kind = "activation"
        self.layers[idx].activation_quantizer = quantizer

    def _post_relu(self, idx):
        layer = self.layers[idx]
        if layer.kind == "relu":
            return True
        if layer.kind == "maxpool2d" and idx > 0:
            return self._post_relu(idx - 1) and self.layers[idx - 1].activation_quantizer is None
        return False

    def set_temperature(self, t: float):
        for q in self.quantizers():
            q.set_temperature(t)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ContractError(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        return x

    def forward(self, x, mode: str = "soft"):
        """Logits and the tape needed by :meth:`backward`."""
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        x = self._check_input(x)
        if mode == "hard":
            return self.to_inference().forward(x), Tape("hard", [])
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite output from layer {layer.name}")
            caches.append(cache)
        return x, Tape(mode, caches)

    def predict(self, x, mode: str = "hard", batch_size: int = 1024):
        out = [self.forward(x[i:i + batch_size], mode)[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0,) + self.output_shape)

    def activations(self, x, upto: int):
        """Float-mode output of layer ``upto`` (inclusive), quantizers bypassed."""
        x = self._check_input(x)
        for layer in self.layers[:upto + 1]:
            x, _ = layer.forward(x, "float")
        return x

    def backward(self, tape: Tape, loss_grad) -> Gradients:
        if tape.mode == "hard":
            raise ContractError("backward through a hard-mode forward is not defined; hard mode is inference-only")
        grads = Gradients()
        qgrads: list = []
        dy = np.asarray(loss_grad, dtype=np.float64)
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            dy = layer.backward(cache, dy, grads.params, qgrads)
        for q, g in qgrads:
            grads.add_quantizer(q, g)
        return grads

    def to_inference(self):
        """Freeze into an :class:`~sigquant.inference.InferenceModel` (step quantizers)."""
        from .inference import InferenceModel

        return InferenceModel.from_network(self)

    def __repr__(self):
        parts = []
        for l in self.layers:
            tag = l.name
            if l.weight_quantizer is not None:
                tag += f"[W:{l.weight_quantizer.levels}]"
            if l.activation_quantizer is not None:
                tag += f"[A:{l.activation_quantizer.levels}]"
            parts.append(tag)
        return f"Network({self.input_shape} -> {' -> '.join(parts)})"


def forward(network: Network, batch, mode: str = "soft"):
    return network.forward(batch, mode)


def backward(network: Network, tape: Tape, loss_grad) -> Gradients:
    return network.backward(tape, loss_grad)


@dataclass
class SGD:
    """SGD with momentum, decoupled-from-quantizer weight decay and global-norm clipping.

    ``max_scale_step`` optionally caps each alpha/beta update at that fraction
    of the current value. Off by default; from a random start a single
    uncapped step can drive a scale to its floor and silence the layer.
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float | None = None
    buffers: dict = field(default_factory=dict)
    max_scale_step: float | None = None

    def _applied(self, network: Network, grads: Gradients):
        items = []
        for layer in network.parameterized_layers():
            if not layer.trainable:
                continue
            for key, p in layer.parameters().items():
                g = grads.params.get(key)
                if g is not None:
                    if g.shape != p.shape:
                        raise ContractError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
                    items.append(("param", key, layer, g))
        for q in network.quantizers():
            g = grads.quantizers.get(q.name)
            if g is None or not q.trainable:
                continue
            if q.params.alpha_learnable:
                items.append(("alpha", f"{q.name}/alpha", q, np.asarray(g["alpha"])))
            if q.params.beta_learnable:
                items.append(("beta", f"{q.name}/beta", q, np.asarray(g["beta"])))
            if q.params.biases_learnable:
                items.append(("biases", f"{q.name}/biases", q, np.asarray(g["biases"])))
        return items

    def step(self, network: Network, grads: Gradients) -> float:
        """Apply one update in place; returns the pre-clipping global gradient norm."""
        items = self._applied(network, grads)
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for *_, g in items)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for kind, key, owner, g in items:
            g = g * scale
            v = self.buffers.get(key)
            v = g.copy() if v is None else self.momentum * v + g
            self.buffers[key] = v
            if kind == "param":
                p = owner.parameters()[key]
                p -= self.lr * (v + self.weight_decay * p)
            elif kind == "biases":
                b = np.sort(owner.params.biases - self.lr * v)
                for i in range(1, b.size):
                    if b[i] <= b[i - 1]:
                        b[i] = np.nextafter(b[i - 1], np.inf)
                owner.params = owner.params.replace(biases=b)
            else:
                cur = getattr(owner.params, kind)
                delta = self.lr * float(v)
                if self.max_scale_step is not None:
                    delta = float(np.clip(delta, -self.max_scale_step * cur, self.max_scale_step * cur))
                val = max(cur - delta, PARAM_FLOOR)
                owner.params = owner.params.replace(**{kind: val})
        return norm

    def state_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "clip_norm": self.clip_norm, "max_scale_step": self.max_scale_step,
                "buffers": {k: np.array(v) for k, v in self.buffers.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "SGD":
        return cls(state["lr"], state["momentum"], state["weight_decay"], state["clip_norm"],
                   {k: np.array(v) for k, v in state["buffers"].items()}, state.get("max_scale_step"))


def sgd_step(network: Network, grads: Gradients, opt: SGD):
    opt.step(network, grads)
    return network, opt
