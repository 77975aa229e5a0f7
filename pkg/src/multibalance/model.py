"""Shared-bottom multi-task MLP with hand-written forward and backward passes.

The bottom maps inputs ``x`` to a representation ``Phi`` (one row per
sample). The representation is handed, unchanged, to each of the ``M`` task
heads. Every head ends in a single output unit: a sigmoid with
cross-entropy for ``"binary"`` tasks, or the identity with half squared
error for ``"regression"`` tasks. Task losses are batch means.

Layers compute ``act(x @ W + b)`` with ``W`` of shape ``(fan_in, fan_out)``.

Three backward routes are provided:

* :func:`backward_representation_tap` - one sweep through the heads that
  yields every task's gradient at its copy of ``Phi``;
* :func:`backward_apply_aggregate` - continue that sweep into the bottom
  from a caller-supplied representation gradient;
* :func:`backward_per_task` - ``M`` full, independent sweeps (the classic
  multi-pass route).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "AggregateGradients",
    "Batch",
    "ForwardTrace",
    "Layer",
    "PROB_CLIP",
    "RepresentationGradients",
    "SharedBottomModel",
    "StaleTraceError",
    "TaskGradients",
    "backward_apply_aggregate",
    "backward_per_task",
    "backward_representation_tap",
    "flatten_grads",
    "forward",
    "jacobian_repr",
    "load_model",
    "save_model",
    "task_losses",
]

PROB_CLIP = 1e-12
JACOBIAN_MAX_ENTRIES = 1_000_000
TASK_KINDS = ("binary", "regression")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# name -> (function, derivative expressed through the activation value)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


class StaleTraceError(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            self.weight = self.weight.reshape(1, -1) if self.weight.ndim < 2 else self.weight
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ValueError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, input_dim)
    labels: np.ndarray  # (batch, M)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.ndim == 1:
            labels = labels[:, None]
        self.labels = labels
        if self.inputs.shape[0] < 1:
            raise ValueError("empty batch")
        if labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels and inputs disagree on batch size")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class SharedBottomModel:
    bottom: list[Layer]
    heads: list[list[Layer]]
    task_kinds: list[str]
    version: int = 0

    def __post_init__(self):
        if not self.bottom:
            raise ValueError("bottom needs at least one layer")
        if len(self.heads) != len(self.task_kinds) or not self.heads:
            raise ValueError("need one head per task")
        for prev, nxt in zip(self.bottom, self.bottom[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ValueError("bottom layer dimensions do not chain")
        for m, (head, kind) in enumerate(zip(self.heads, self.task_kinds)):
            if kind not in TASK_KINDS:
                raise ValueError(f"unknown task kind {kind!r}")
            if head[0].fan_in != self.repr_dim:
                raise ValueError(f"head {m} does not take the representation as input")
            for prev, nxt in zip(head, head[1:]):
                if prev.fan_out != nxt.fan_in:
                    raise ValueError(f"head {m} layer dimensions do not chain")
            if head[-1].fan_out != 1:
                raise ValueError(f"head {m} must end in a single output unit")
            want = "sigmoid" if kind == "binary" else "identity"
            if head[-1].activation != want:
                raise ValueError(f"head {m} ({kind}) must end with {want}")

    @classmethod
    def create(
        cls,
        input_dim: int,
        bottom_hidden: list[int],
        repr_dim: int,
        head_hidden: list[int],
        task_kinds: list[str],
        rng: np.random.Generator,
        repr_activation: str = "tanh",
    ) -> "SharedBottomModel":
        """Glorot-uniform initialised model; biases start at zero."""

        def layer(n_in, n_out, act):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return Layer(rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out), act)

        dims = [input_dim, *bottom_hidden, repr_dim]
        bottom = [
            layer(a, b, "tanh" if i < len(dims) - 2 else repr_activation)
            for i, (a, b) in enumerate(zip(dims, dims[1:]))
        ]
        heads = []
        for kind in task_kinds:
            hd = [repr_dim, *head_hidden, 1]
            last = "sigmoid" if kind == "binary" else "identity"
            heads.append(
                [layer(a, b, "tanh" if i < len(hd) - 2 else last) for i, (a, b) in enumerate(zip(hd, hd[1:]))]
            )
        return cls(bottom, heads, list(task_kinds))

    @property
    def input_dim(self) -> int:
        return self.bottom[0].fan_in

    @property
    def repr_dim(self) -> int:
        return self.bottom[-1].fan_out

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def n_shared_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.bottom)

    def shared_vector(self) -> np.ndarray:
        return flatten_grads([(layer.weight, layer.bias) for layer in self.bottom])

    def set_shared_vector(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for layer in self.bottom:
            for arr in (layer.weight, layer.bias):
                arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
                pos += arr.size
        self.touch()

    def touch(self) -> None:
        """Mark parameters as changed so older traces are rejected."""
        self.version += 1

    def copy(self) -> "SharedBottomModel":
        dup = lambda ls: [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in ls]  # noqa: E731
        return SharedBottomModel(dup(self.bottom), [dup(h) for h in self.heads], list(self.task_kinds))


@dataclass
class ForwardTrace:
    bottom_acts: list[np.ndarray]  # [x, a_1, ..., a_L]; a_L is the representation
    head_acts: list[list[np.ndarray]]  # per task: [Phi, ..., output]
    head_pre: list[np.ndarray]  # per task: pre-activation of the output unit, (batch,)
    losses: np.ndarray  # (M,) batch-mean task losses
    version: int
    batch: Batch = field(repr=False)

    @property
    def representation(self) -> np.ndarray:
        return self.bottom_acts[-1]

    @property
    def outputs(self) -> np.ndarray:
        """(batch, M) head outputs: probabilities or regression values."""
        return np.stack([acts[-1][:, 0] for acts in self.head_acts], axis=1)


@dataclass
class RepresentationGradients:
    V: np.ndarray  # (repr_dim, M); column m is the batch sum of per_sample[m]
    per_sample: np.ndarray  # (M, batch, repr_dim); gradient of the mean loss w.r.t. each row of Phi
    head_grads: list[list[tuple[np.ndarray, np.ndarray]]]


@dataclass
class TaskGradients:
    bottom: list[tuple[np.ndarray, np.ndarray]]
    head: list[tuple[np.ndarray, np.ndarray]]
    representation: np.ndarray  # (repr_dim,) batch-summed gradient at Phi

    @property
    def flat_bottom(self) -> np.ndarray:
        return flatten_grads(self.bottom)


@dataclass
class AggregateGradients:
    bottom: list[tuple[np.ndarray, np.ndarray]]
    heads: list[list[tuple[np.ndarray, np.ndarray]]]

    @property
    def flat_bottom(self) -> np.ndarray:
        return flatten_grads(self.bottom)


def flatten_grads(pairs) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in pairs])


def _run_layers(layers: list[Layer], x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for layer in layers:
        fn = ACTIVATIONS[layer.activation][0]
        acts.append(fn(acts[-1] @ layer.weight + layer.bias))
    return acts


def task_losses(kinds, outputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Batch-mean loss per task from (batch, M) outputs and labels."""
    losses = np.empty(len(kinds))
    for m, kind in enumerate(kinds):
        out, y = outputs[:, m], labels[:, m]
        if kind == "binary":
            p = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
            losses[m] = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
        else:
            losses[m] = 0.5 * np.mean((out - y) ** 2)
    return losses


def forward(model: SharedBottomModel, batch: Batch) -> ForwardTrace:
    if batch.inputs.shape[1] != model.input_dim:
        raise ValueError(f"input dim {batch.inputs.shape[1]} != model input dim {model.input_dim}")
    if batch.labels.shape[1] != model.n_tasks:
        raise ValueError(f"batch has {batch.labels.shape[1]} label columns for {model.n_tasks} tasks")
    bottom_acts = _run_layers(model.bottom, batch.inputs)
    phi = bottom_acts[-1]
    head_acts, head_pre = [], []
    for head in model.heads:
        acts = _run_layers(head[:-1], phi)
        last = head[-1]
        z = (acts[-1] @ last.weight + last.bias)[:, 0]
        acts.append(ACTIVATIONS[last.activation][0](z)[:, None])
        head_acts.append(acts)
        head_pre.append(z)
    outputs = np.stack([acts[-1][:, 0] for acts in head_acts], axis=1)
    losses = task_losses(model.task_kinds, outputs, batch.labels)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(losses))):
        raise FloatingPointError("non-finite activations or losses in forward pass")
    return ForwardTrace(bottom_acts, head_acts, head_pre, losses, model.version, batch)


def _check_trace(model: SharedBottomModel, trace: ForwardTrace, batch: Batch) -> None:
    if trace.version != model.version or trace.batch is not batch:
        raise StaleTraceError("trace was not produced by forward() on this model state and batch")


def _backprop_layers(layers: list[Layer], acts: list[np.ndarray], dz_last: np.ndarray):
    """Backward through ``layers`` given the gradient at the last pre-activation.

    Returns per-layer ``(dW, db)`` and the gradient w.r.t. the stack's input.
    """
    grads = [None] * len(layers)
    dz = dz_last
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        grads[i] = (acts[i].T @ dz, dz.sum(axis=0))
        dx = dz @ layer.weight.T
        if i > 0:
            dz = dx * ACTIVATIONS[layers[i - 1].activation][1](acts[i])
    return grads, dx


def _output_delta(kind: str, z: np.ndarray, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(pre-activation of the output unit), shape (batch, 1)."""
    n = y.shape[0]
    if kind == "binary":
        inside = (out > PROB_CLIP) & (out < 1.0 - PROB_CLIP)  # the clipped loss is flat outside
        return ((out - y) * inside / n)[:, None]
    return ((out - y) / n)[:, None]


def _head_backward(model, trace, m):
    head = model.heads[m]
    acts = trace.head_acts[m]
    dz = _output_delta(model.task_kinds[m], trace.head_pre[m], acts[-1][:, 0], trace.batch.labels[:, m])
    return _backprop_layers(head, acts, dz)


def _bottom_backward(model, trace, d_phi):
    acts = trace.bottom_acts
    dz = d_phi * ACTIVATIONS[model.bottom[-1].activation][1](acts[-1])
    grads, _ = _backprop_layers(model.bottom, acts, dz)
    return grads


def backward_representation_tap(model, trace, batch) -> RepresentationGradients:
    """One backward sweep through all heads, stopping at the representation."""
    _check_trace(model, trace, batch)
    per_sample = np.empty((model.n_tasks, len(batch), model.repr_dim))
    head_grads = []
    for m in range(model.n_tasks):
        grads, d_phi = _head_backward(model, trace, m)
        per_sample[m] = d_phi
        head_grads.append(grads)
    V = per_sample.sum(axis=1).T.copy()
    return RepresentationGradients(V, per_sample, head_grads)


def backward_apply_aggregate(model, trace, batch, h, tap: RepresentationGradients | None = None):
    """Propagate a representation gradient ``h`` into the bottom.

    ``h`` of shape ``(batch, repr_dim)`` is used as the gradient at each row
    of ``Phi``. A vector of shape ``(repr_dim,)`` is spread evenly over the
    rows, i.e. every sample receives ``h / batch``. Head gradients are each
    task's own unweighted gradient, taken from ``tap`` when given.
    """
    _check_trace(model, trace, batch)
    h = np.asarray(h, dtype=np.float64)
    if h.shape == (model.repr_dim,):
        h = np.broadcast_to(h / len(batch), (len(batch), model.repr_dim))
    elif h.shape != (len(batch), model.repr_dim):
        raise ValueError(f"h has shape {h.shape}; expected ({model.repr_dim},) or ({len(batch)}, {model.repr_dim})")
    if tap is None:
        tap = backward_representation_tap(model, trace, batch)
    return AggregateGradients(_bottom_backward(model, trace, h), tap.head_grads)


def backward_per_task(model, trace, batch) -> list[TaskGradients]:
    """``M`` independent full sweeps, one per task loss."""
    _check_trace(model, trace, batch)
    out = []
    for m in range(model.n_tasks):
        head_grads, d_phi = _head_backward(model, trace, m)
        out.append(TaskGradients(_bottom_backward(model, trace, d_phi), head_grads, d_phi.sum(axis=0)))
    return out


def _per_sample_bottom_grads(model, acts, d_phi):
    """Per-sample flattened bottom gradients for per-sample seeds ``d_phi``."""
    layers = model.bottom
    dz = d_phi * ACTIVATIONS[layers[-1].activation][1](acts[-1])
    parts = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        n = dz.shape[0]
        dW = acts[i][:, :, None] * dz[:, None, :]
        parts[i] = np.concatenate([dW.reshape(n, -1), dz], axis=1)
        if i > 0:
            dz = (dz @ layers[i].weight.T) * ACTIVATIONS[layers[i - 1].activation][1](acts[i])
    return np.concatenate(parts, axis=1)


def jacobian_repr(model, batch, per_sample: bool = True, chunk: int = 256):
    """Jacobians of the representation w.r.t. the flattened shared parameters.

    Returns ``(mean, per)`` where ``mean`` has shape ``(repr_dim, P)`` and
    ``per`` has shape ``(batch, repr_dim, P)`` (``None`` unless requested).
    The parameter order matches :meth:`SharedBottomModel.shared_vector`.
    """
    P, k = model.n_shared_params, model.repr_dim
    if P * k > JACOBIAN_MAX_ENTRIES:
        raise MemoryError(f"Jacobian would have {P * k} entries (limit {JACOBIAN_MAX_ENTRIES})")
    n = len(batch)
    total = np.zeros((k, P))
    per = np.empty((n, k, P)) if per_sample else None
    for start in range(0, n, chunk):
        x = batch.inputs[start : start + chunk]
        acts = _run_layers(model.bottom, x)
        for j in range(k):
            seed = np.zeros((x.shape[0], k))
            seed[:, j] = 1.0
            rows = _per_sample_bottom_grads(model, acts, seed)
            total[j] += rows.sum(axis=0)
            if per is not None:
                per[start : start + x.shape[0], j] = rows
    return total / n, per


_MAGIC = "multibalance-checkpoint 1"


def save_model(model: SharedBottomModel, path) -> None:
    """Write a text checkpoint; see the README for the line format."""
    lines = [_MAGIC, "tasks " + " ".join(model.task_kinds)]

    def dump(prefix, layer):
        lines.append(f"{prefix}.activation {layer.activation}")
        r, c = layer.weight.shape
        lines.append(f"{prefix}.weight {r}x{c} " + " ".join(repr(float(v)) for v in layer.weight.ravel()))
        lines.append(f"{prefix}.bias {layer.bias.size} " + " ".join(repr(float(v)) for v in layer.bias))

    for i, layer in enumerate(model.bottom):
        dump(f"bottom.{i}", layer)
    for m, head in enumerate(model.heads):
        for i, layer in enumerate(head):
            dump(f"head.{m}.{i}", layer)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> SharedBottomModel:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != _MAGIC:
        raise ValueError("not a multibalance checkpoint")
    entries = {}
    kinds = None
    for line in text[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key == "tasks":
            kinds = rest.split()
        else:
            entries[key] = rest
    if kinds is None:
        raise ValueError("checkpoint has no tasks line")

    def layer(prefix):
        act = entries[f"{prefix}.activation"]
        shape, *wv = entries[f"{prefix}.weight"].split()
        r, c = (int(s) for s in shape.split("x"))
        _, *bv = entries[f"{prefix}.bias"].split()
        return Layer(np.array(wv, dtype=np.float64).reshape(r, c), np.array(bv, dtype=np.float64), act)

    def stack(prefix):
        out, i = [], 0
        while f"{prefix}.{i}.activation" in entries:
            out.append(layer(f"{prefix}.{i}"))
            i += 1
        return out

    return SharedBottomModel(stack("bottom"), [stack(f"head.{m}") for m in range(len(kinds))], kinds)
