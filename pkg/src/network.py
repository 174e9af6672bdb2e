"""
Network Module
==============

Ordered stack of layers with reverse-mode differentiation.

Key Features:
- Shape compatibility is checked layer by layer when the network is built;
  errors name the offending layer.
- Modes: 'train' (dropout active, batchnorm uses and updates batch statistics)
  and 'infer' (dropout identity, batchnorm uses running statistics only).
- forward(record=True) keeps the per-layer cache so backward() can return
  gradients for every trainable parameter and for the network input. Attacks
  use record=True in infer mode to get input gradients of the deployed model.
- A frozen network (trainable=False) still propagates input gradients but
  reports no parameter gradients.
- grad_check() compares analytic gradients against central differences on a
  float64 copy of the network.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import BackwardError, NonFiniteError, ShapeError
from layers import Dropout, LayerSpec, make_layer, spec_from_dict, spec_to_dict

logger = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class Gradients:
    """Gradients from one backward pass: per-parameter arrays plus the input gradient."""
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    input: Optional[np.ndarray] = None

    def __add__(self, other: 'Gradients') -> 'Gradients':
        merged = dict(self.params)
        for name, grad in other.params.items():
            merged[name] = merged[name] + grad if name in merged else grad
        if self.input is None:
            inp = other.input
        elif other.input is None:
            inp = self.input
        else:
            inp = self.input + other.input
        return Gradients(merged, inp)


class Network:
    """
    Layered network over numpy arrays.

    Parameters are addressed as "<layer index>.<name>", e.g. "0.kernel",
    "3.gamma". The same names key the checkpoint payload and the Adam moments.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int],
                 seed: int = 0, name: str = 'net'):
        self.name = name
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape: Tuple[int, ...] = tuple(int(d) for d in input_shape)
        self.seed = seed
        self.layers = []
        self.mode = 'infer'
        self.trainable = True
        self.dtype = np.float32
        self._recorded = False

        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer = make_layer(spec)
            layer.name = f"{name}[{i}:{layer.name}]"
            try:
                shape = layer.build(shape, rng)
            except ShapeError as e:
                logger.error(f"✗ Incompatible layer stack in {name}: {e}")
                raise
            self.layers.append(layer)
        self.output_shape: Tuple[int, ...] = shape
        self.reseed(seed)

        logger.debug(f"Network {name} built: {len(self.layers)} layers, "
                     f"{self.num_parameters():,} parameters, {self.input_shape} -> {self.output_shape}")

    # ------------------------------------------------------------------ modes

    def train(self) -> 'Network':
        self.mode = 'train'
        return self

    def eval(self) -> 'Network':
        self.mode = 'infer'
        return self

    def freeze(self) -> 'Network':
        self.trainable = False
        return self

    def unfreeze(self) -> 'Network':
        self.trainable = True
        return self

    def reseed(self, seed: int):
        """Reset the dropout streams so a forward pass can be replayed exactly."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.reseed(np.random.SeedSequence([seed, i]).generate_state(1)[0])

    # ------------------------------------------------------------- tensors

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable parameter arrays (live references); empty when frozen."""
        if not self.trainable:
            return {}
        return self.all_parameters()

    def all_parameters(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.all_parameters()
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy values in place so every outside reference keeps seeing the live arrays."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}", layer=self.name)
        for key, arr in own.items():
            value = np.asarray(state[key])
            if value.shape != arr.shape:
                raise ShapeError(f"state '{key}' has shape {value.shape}, expected {arr.shape}",
                                 layer=self.name, expected=arr.shape, actual=value.shape)
            arr[...] = value

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.all_parameters().values()))

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """(kind, per-sample output shape) for each layer; used for structural equality."""
        return [(spec.kind, layer.output_shape) for spec, layer in zip(self.specs, self.layers)]

    def astype(self, dtype) -> 'Network':
        clone = copy.deepcopy(self)
        clone.dtype = dtype
        for layer in clone.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k] = store[k].astype(dtype)
        return clone

    def config(self) -> dict:
        return {
            'name': self.name,
            'input_shape': list(self.input_shape),
            'seed': self.seed,
            'layers': [spec_to_dict(s) for s in self.specs],
        }

    @classmethod
    def from_config(cls, config: dict) -> 'Network':
        specs = [spec_from_dict(d) for d in config['layers']]
        return cls(specs, config['input_shape'], seed=config.get('seed', 0), name=config.get('name', 'net'))

    # -------------------------------------------------------- forward/backward

    def forward(self, batch: np.ndarray, record: Optional[bool] = None) -> np.ndarray:
        """
        Run the batch through every layer.

        Args:
            batch: array whose leading dimension is the batch size
            record: keep the backward cache (defaults to True in train mode)

        Raises:
            ShapeError: batch shape does not match the network input
            NonFiniteError: a layer produced NaN/Inf
        """
        x = np.asarray(batch)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input batch shape {x.shape} incompatible with per-sample shape {self.input_shape}",
                             layer=f"{self.name}[input]", expected=self.input_shape, actual=x.shape[1:])
        train = self.mode == 'train'
        if record is None:
            record = train
        for layer in self.layers:
            x = layer.forward(x, train, record)
            if not np.isfinite(x).all():
                logger.error(f"✗ Non-finite activation at {layer.name}")
                raise NonFiniteError("non-finite activation", where=layer.name)
        self._recorded = record
        return x

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)

    def infer(self, batch: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Chunked forward pass without recording; the mode is left as it is."""
        n = len(batch)
        if n == 0:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        chunks = [self.forward(batch[i:i + batch_size], record=False) for i in range(0, n, batch_size)]
        return np.concatenate(chunks, axis=0)

    def backward(self, output_grad: np.ndarray) -> Gradients:
        """
        Back-propagate output_grad through the recorded forward pass.

        Returns:
            Gradients with one entry per trainable parameter and the input gradient

        Raises:
            BackwardError: no recorded forward pass
        """
        if not self._recorded:
            raise BackwardError(f"[{self.name}] backward() called without a recorded forward pass")
        g = np.asarray(output_grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        grads = Gradients(input=g)
        if self.trainable:
            for i, layer in enumerate(self.layers):
                for k, v in layer.grads.items():
                    grads.params[f"{i}.{k}"] = v
        return grads

    def summary(self) -> str:
        lines = [f"{self.name}: input {self.input_shape}"]
        for layer in self.layers:
            n = sum(v.size for v in layer.params.values())
            lines.append(f"  {layer.name:<28} -> {str(layer.output_shape):<16} params={n:,}")
        return '\n'.join(lines)


def grad_check(net: Network, batch: np.ndarray, loss: LossFn, h: float = 1e-3,
               seed: int = 0, include_input: bool = True) -> float:
    """
    Maximum relative error between analytic and central-difference gradients.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    The check runs on a float64 copy in the network's current mode. Dropout
    streams are replayed and batchnorm running statistics restored around
    every evaluation so each perturbed forward sees the same function.

    Args:
        net: network to check (left untouched)
        batch: input batch
        loss: callable mapping the network output to (loss value, output gradient)
        h: finite-difference step
        include_input: also check the gradient with respect to the input

    Returns:
        Maximum relative error; 0.0 when there is nothing to check
    """
    if not net.trainable:
        return 0.0
    work = net.astype(np.float64)
    x = np.array(batch, dtype=np.float64)
    saved = {k: v.copy() for k, v in work.buffers().items()}

    def restore():
        for k, v in work.buffers().items():
            v[...] = saved[k]

    def evaluate(inp) -> float:
        work.reseed(seed)
        value = loss(work.forward(inp, record=False))[0]
        restore()
        return float(value)

    work.reseed(seed)
    _, out_grad = loss(work.forward(x, record=True))
    analytic = work.backward(out_grad)
    restore()

    targets = list(work.parameters().items())
    if include_input:
        targets.append(('input', x))

    worst = 0.0
    for name, arr in targets:
        a_grad = analytic.input if name == 'input' else analytic.params[name]
        flat = arr.reshape(-1)
        a_flat = np.asarray(a_grad).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = evaluate(x)
            flat[j] = orig - h
            minus = evaluate(x)
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-8)
            err = abs(a_flat[j] - numeric) / denom
            if err > worst:
                worst = err
                logger.debug(f"grad_check: new worst {err:.3e} at {name}[{j}] "
                             f"(analytic={a_flat[j]:.6e}, numeric={numeric:.6e})")
    return float(worst)
