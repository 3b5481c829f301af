"""Feed-forward network with hand-written backprop and per-example gradients.

Everything runs in plain float64 numpy: a stack of dense layers with
rectified-linear hidden activations, optional inverted dropout after each
hidden layer, and an identity output layer. Per-example gradients (one
full parameter vector per sample) feed the gradient-alignment reweighting
scheme; the summed path is used for ordinary weighted SGD.

All reductions happen in a fixed order, so a fixed (seed, spec, input)
triple reproduces forward passes, gradients, and checkpoints bit for bit.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, StaleTraceError

DEFAULT_HIDDEN_WIDTHS = (128, 128, 64, 64, 32, 32, 16, 16)

CHECKPOINT_FORMAT_VERSION = 1

# Dropout rates the sweep protocol considers; the per-run rate is a free
# config knob with this default.
DROPOUT_CANDIDATES = (0.0, 0.1, 0.2)
DEFAULT_DROPOUT = 0.1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer widths and dropout rate."""

    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...] = DEFAULT_HIDDEN_WIDTHS
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionError("input_dim and output_dim must be >= 1")
        if any(w < 1 for w in self.hidden_widths):
            raise DimensionError(f"hidden widths must all be >= 1, got {self.hidden_widths}")
        if not 0.0 <= float(self.dropout_rate) < 1.0:
            raise DimensionError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer, input side first."""
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def layer_count(self) -> int:
        """Number of dense (parameterized) layers."""
        return len(self.hidden_widths) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_widths": list(self.hidden_widths),
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_widths=tuple(int(w) for w in d["hidden_widths"]),
            dropout_rate=float(d["dropout_rate"]),
        )


@dataclass
class ParamSet:
    """All dense-layer tensors of one network, flattenable to one vector.

    Layer ``l`` holds a weight matrix of shape ``(fan_in, fan_out)`` and a
    bias vector of shape ``(fan_out,)``. The flat layout is
    ``W0.ravel(), b0, W1.ravel(), b1, ...`` which every gradient vector in
    this package follows.
    """

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise DimensionError("parameter count does not match the spec's layer count")
        for (fan_in, fan_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise DimensionError(
                    f"layer tensor shapes {w.shape}/{b.shape} do not match spec ({fan_in},{fan_out})"
                )

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        """New ParamSet whose tensors are read back from a flat vector."""
        if flat.shape != (self.n_params,):
            raise DimensionError(f"flat vector has length {flat.shape}, expected ({self.n_params},)")
        weights, biases = [], []
        pos = 0
        for fan_in, fan_out in self.spec.layer_dims:
            weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(flat[pos : pos + fan_out].copy())
            pos += fan_out
        return ParamSet(self.spec, weights, biases)

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """Flat-vector slices ``(weight_slice, bias_slice)`` per dense layer."""
        out = []
        pos = 0
        for fan_in, fan_out in self.spec.layer_dims:
            w_sl = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b_sl = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w_sl, b_sl))
        return out

    def weight_entry_mask(self) -> np.ndarray:
        """Boolean flat mask selecting weight-matrix entries (biases False)."""
        mask = np.zeros(self.n_params, dtype=bool)
        for w_sl, _ in self.layer_slices():
            mask[w_sl] = True
        return mask

    def crc32(self) -> int:
        return zlib.crc32(self.flatten().tobytes())


@dataclass
class ForwardTrace:
    """Record of one forward pass, sufficient to replay it bit-exactly."""

    x: np.ndarray
    pre_activations: list[np.ndarray]
    hidden_activations: list[np.ndarray]
    masks: list[np.ndarray] | None
    y_hat: np.ndarray
    params_crc: int
    train_mode: bool


def init_params(spec: MlpSpec, seed: int) -> ParamSet:
    """Fan-in-scaled uniform weights (suited to rectified-linear stacks),
    zero biases. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(spec, weights, biases)


def _draw_masks(spec: MlpSpec, n: int, rng: np.random.Generator, shared: bool) -> list[np.ndarray]:
    keep = 1.0 - spec.dropout_rate
    shape = (1,) if shared else (n,)
    return [
        (rng.random(shape + (width,)) < keep).astype(np.float64)
        for width in spec.hidden_widths
    ]


def forward(
    params: ParamSet,
    batch_x: np.ndarray,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    masks: Sequence[np.ndarray] | None = None,
    shared_mask: bool = False,
) -> ForwardTrace:
    """Run the network on a batch, recording everything backprop needs.

    In train mode with a nonzero dropout rate, inverted dropout is applied
    after each hidden activation: multiply by a 0/1 mask and by
    ``1/(1-p)``, so inference needs no rescaling. Masks are drawn from
    ``rng`` (or taken from ``masks`` to reuse a previous draw; entries
    broadcast against the batch, so a ``(width,)`` mask is shared by all
    examples).
    """
    spec = params.spec
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim != 2 or batch_x.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch_x has shape {batch_x.shape}, expected (n, {spec.input_dim})"
        )
    n = batch_x.shape[0]

    use_dropout = train and spec.dropout_rate > 0.0
    if use_dropout and masks is None:
        if rng is None:
            raise DimensionError("train-mode forward with dropout needs rng or masks")
        masks = _draw_masks(spec, n, rng, shared_mask)
    if not use_dropout:
        masks = None
    mask_list = [np.asarray(m, dtype=np.float64) for m in masks] if masks is not None else None

    keep = 1.0 - spec.dropout_rate
    a = batch_x
    pre_acts: list[np.ndarray] = []
    hidden_acts: list[np.ndarray] = []
    for l in range(len(spec.hidden_widths)):
        z = a @ params.weights[l] + params.biases[l]
        h = np.maximum(z, 0.0)
        if mask_list is not None:
            h = h * mask_list[l] / keep
        pre_acts.append(z)
        hidden_acts.append(h)
        a = h
    y_hat = a @ params.weights[-1] + params.biases[-1]

    return ForwardTrace(
        x=batch_x,
        pre_activations=pre_acts,
        hidden_activations=hidden_acts,
        masks=mask_list,
        y_hat=y_hat,
        params_crc=params.crc32(),
        train_mode=train,
    )


def replay(params: ParamSet, trace: ForwardTrace) -> np.ndarray:
    """Recompute predictions from a trace's inputs and recorded masks."""
    return forward(
        params,
        trace.x,
        train=trace.train_mode,
        masks=trace.masks,
    ).y_hat


def per_example_loss(trace: ForwardTrace, batch_y: np.ndarray) -> np.ndarray:
    """Mean squared error over the output entries, one value per example."""
    batch_y = np.asarray(batch_y, dtype=np.float64)
    if batch_y.shape != trace.y_hat.shape:
        raise DimensionError(
            f"batch_y has shape {batch_y.shape}, expected {trace.y_hat.shape}"
        )
    diff = trace.y_hat - batch_y
    return np.mean(diff * diff, axis=1)


def _check_trace(params: ParamSet, trace: ForwardTrace) -> None:
    if params.crc32() != trace.params_crc:
        raise StaleTraceError("trace was built from different parameter values")


def _backward_deltas(params: ParamSet, trace: ForwardTrace, out_delta: np.ndarray) -> list[np.ndarray]:
    """Propagate output-layer deltas back through ReLU and dropout.

    Returns one (n, width) delta array per dense layer, ordered input side
    first; ``deltas[l]`` is d(loss)/d(pre-activation of layer l) except for
    the output layer where the pre-activation is the output itself.
    """
    spec = params.spec
    keep = 1.0 - spec.dropout_rate
    deltas = [out_delta]
    d = out_delta
    for l in range(len(spec.hidden_widths) - 1, -1, -1):
        d = d @ params.weights[l + 1].T
        if trace.masks is not None:
            d = d * trace.masks[l] / keep
        d = d * (trace.pre_activations[l] > 0.0)
        deltas.append(d)
    deltas.reverse()
    return deltas


def _layer_inputs(trace: ForwardTrace) -> list[np.ndarray]:
    return [trace.x, *trace.hidden_activations]


def per_example_grads(params: ParamSet, trace: ForwardTrace, batch_y: np.ndarray) -> np.ndarray:
    """Exact gradient of each example's loss, as an (n, n_params) matrix.

    Row i is the flattened gradient of that example's mean-squared error
    with respect to every parameter, backpropagated through the recorded
    dropout masks. The row mean equals the gradient of the batch-mean loss.
    """
    _check_trace(params, trace)
    batch_y = np.asarray(batch_y, dtype=np.float64)
    if batch_y.shape != trace.y_hat.shape:
        raise DimensionError(
            f"batch_y has shape {batch_y.shape}, expected {trace.y_hat.shape}"
        )
    n, out_dim = trace.y_hat.shape
    out_delta = (2.0 / out_dim) * (trace.y_hat - batch_y)
    deltas = _backward_deltas(params, trace, out_delta)
    inputs = _layer_inputs(trace)

    grads = np.empty((n, params.n_params))
    for (w_sl, b_sl), a_in, d in zip(params.layer_slices(), inputs, deltas):
        a_in = np.broadcast_to(a_in, (n, a_in.shape[-1]))
        grads[:, w_sl] = np.einsum("ni,nj->nij", a_in, d).reshape(n, -1)
        grads[:, b_sl] = d
    return grads


def combined_gradient(
    params: ParamSet,
    trace: ForwardTrace,
    batch_y: np.ndarray,
    coeffs: np.ndarray,
) -> np.ndarray:
    """Gradient of ``sum_i coeffs[i] * loss_i`` as a flat vector.

    Cheaper than materializing per-example gradients; pass
    ``coeffs = ones(n)/n`` for the plain batch-mean gradient.
    """
    _check_trace(params, trace)
    batch_y = np.asarray(batch_y, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if batch_y.shape != trace.y_hat.shape:
        raise DimensionError(
            f"batch_y has shape {batch_y.shape}, expected {trace.y_hat.shape}"
        )
    n, out_dim = trace.y_hat.shape
    if coeffs.shape != (n,):
        raise DimensionError(f"coeffs has shape {coeffs.shape}, expected ({n},)")
    out_delta = (2.0 / out_dim) * (trace.y_hat - batch_y) * coeffs[:, None]
    deltas = _backward_deltas(params, trace, out_delta)
    inputs = _layer_inputs(trace)

    grad = np.empty(params.n_params)
    for (w_sl, b_sl), a_in, d in zip(params.layer_slices(), inputs, deltas):
        a_in = np.broadcast_to(a_in, (n, a_in.shape[-1]))
        grad[w_sl] = (a_in.T @ d).ravel()
        grad[b_sl] = d.sum(axis=0)
    return grad


def l2_penalty_grad(
    params: ParamSet,
    lam: float,
    trainable_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of ``lam * sum(w^2)`` over trainable weight-matrix entries.

    Biases and frozen entries contribute exactly zero.
    """
    if lam < 0:
        raise DimensionError("l2 coefficient must be >= 0")
    flat = params.flatten()
    grad = np.zeros_like(flat)
    if lam == 0.0:
        return grad
    mask = params.weight_entry_mask()
    if trainable_mask is not None:
        mask = mask & np.asarray(trainable_mask, dtype=bool)
    grad[mask] = 2.0 * lam * flat[mask]
    return grad


def hidden_embeddings(params: ParamSet, batch_x: np.ndarray) -> np.ndarray:
    """Final hidden-layer activations in inference mode (no dropout)."""
    if not params.spec.hidden_widths:
        raise DimensionError("network has no hidden layer to embed from")
    trace = forward(params, batch_x, train=False)
    return trace.hidden_activations[-1]


def save_checkpoint(params: ParamSet, metadata: dict, manifest_path: str | Path) -> Path:
    """Write a two-file checkpoint: JSON manifest plus raw float64 blob.

    The manifest records the spec, caller metadata, per-tensor shapes and
    byte offsets into the blob, and a CRC-32 of the blob so truncation or
    corruption is caught on load. Returns the manifest path.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.suffix != ".json":
        manifest_path = manifest_path.with_suffix(".json")
    blob_path = manifest_path.with_suffix(".bin")

    tensors = []
    chunks = []
    offset = 0
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        for name, arr in ((f"W{l}", w), (f"b{l}", b)):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": params.spec.to_dict(),
        "metadata": metadata,
        "tensors": tensors,
        "blob_file": blob_path.name,
        "blob_bytes": len(blob),
        "blob_crc32": zlib.crc32(blob),
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(manifest_path: str | Path) -> tuple[ParamSet, MlpSpec, dict]:
    """Read a checkpoint back, verifying format version and blob CRC-32."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc

    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    blob_path = manifest_path.parent / manifest["blob_file"]
    if not blob_path.exists():
        raise CheckpointError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"] or zlib.crc32(blob) != manifest["blob_crc32"]:
        raise CheckpointError("checkpoint blob failed its CRC-32 / length check")

    spec = MlpSpec.from_dict(manifest["spec"])
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        if entry["name"].startswith("W"):
            weights.append(arr)
        else:
            biases.append(arr)
    params = ParamSet(spec, weights, biases)
    return params, spec, manifest["metadata"]
