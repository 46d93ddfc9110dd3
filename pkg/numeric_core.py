"""
Numeric Core
Dense float64 building blocks for the recurrent recommenders: embeddings, a GRU
cell, affine + softmax + cross-entropy, hand-derived backward passes, Adam and a
central finite-difference gradient checker.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

# Row-major 2-D float64 array; rows x cols.
Tensor2 = np.ndarray

GRU_GATES = ('z', 'r', 'h')


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class NumericError(ArithmeticError):
    """Raised when a loss or parameter becomes NaN or infinite."""


def as_tensor2(data, name: str = 'tensor') -> Tensor2:
    """Coerce data to a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


class Param:
    """A trainable matrix with its gradient and Adam moments."""

    def __init__(self, name: str, value):
        self.name = name
        self.value: Tensor2 = as_tensor2(value, name).copy()
        self.grad: Tensor2 = np.zeros_like(self.value)
        self.m: Tensor2 = np.zeros_like(self.value)
        self.v: Tensor2 = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> 'Param':
        clone = Param(self.name, self.value)
        clone.grad = self.grad.copy()
        clone.m = self.m.copy()
        clone.v = self.v.copy()
        clone.step = self.step
        return clone

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, step={self.step})"


def _check_ids(ids, rows: int, name: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    bad = ids[(ids < 0) | (ids >= rows)]
    if bad.size:
        raise IndexError(f"id {int(bad[0])} out of range for {name} with {rows} rows")
    return ids


def embedding_forward(table: Param, ids) -> Tensor2:
    """Gather rows of the embedding table; row j of the output is table[ids[j]]."""
    flat = _check_ids(ids, table.value.shape[0], table.name)
    return table.value[flat]


def embedding_backward(table: Param, ids, d_out: Tensor2):
    """Scatter-add d_out rows into table.grad at the looked-up ids."""
    flat = _check_ids(ids, table.value.shape[0], table.name)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (flat.size, table.value.shape[1]):
        raise ShapeError(
            f"gradient for {table.name} has shape {d_out.shape}, "
            f"expected {(flat.size, table.value.shape[1])}")
    np.add.at(table.grad, flat, d_out)


class GruCell:
    """
    Single GRU layer.

    z_t = sigmoid(x W_z + h U_z + b_z), r_t = sigmoid(x W_r + h U_r + b_r),
    h^_t = tanh(x W_h + (r_t * h) U_h + b_h), h_t = (1 - z_t) * h + z_t * h^_t
    """

    def __init__(self, name: str, input_size: int, hidden_size: int):
        if input_size < 1 or hidden_size < 1:
            raise ShapeError(f"GRU {name} sizes must be positive, got {input_size}x{hidden_size}")
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.params: Dict[str, Param] = {}
        for gate in GRU_GATES:
            self.params[f'W_{gate}'] = Param(f'{name}.W_{gate}', np.zeros((input_size, hidden_size)))
        for gate in GRU_GATES:
            self.params[f'U_{gate}'] = Param(f'{name}.U_{gate}', np.zeros((hidden_size, hidden_size)))
        for gate in GRU_GATES:
            self.params[f'b_{gate}'] = Param(f'{name}.b_{gate}', np.zeros((1, hidden_size)))

    def __getitem__(self, key: str) -> Param:
        return self.params[key]

    def parameters(self) -> List[Param]:
        return list(self.params.values())


@dataclass
class GruTrace:
    """Per-step activations cached by gru_forward for the backward pass."""
    inputs: List[Tensor2] = field(default_factory=list)
    h_prev: List[Tensor2] = field(default_factory=list)
    z: List[Tensor2] = field(default_factory=list)
    r: List[Tensor2] = field(default_factory=list)
    h_hat: List[Tensor2] = field(default_factory=list)
    h: List[Tensor2] = field(default_factory=list)
    mask: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.inputs)


def _as_sequence(inputs) -> np.ndarray:
    if isinstance(inputs, np.ndarray):
        seq = inputs.astype(np.float64, copy=False)
    else:
        steps = list(inputs)
        if not steps:
            raise ShapeError("input sequence must contain at least one step")
        seq = np.stack([np.asarray(s, dtype=np.float64) for s in steps])
    if seq.ndim != 3:
        raise ShapeError(f"input sequence must be steps x batch x features, got shape {seq.shape}")
    return seq


def gru_forward(cell: GruCell, inputs, h0: Tensor2, mask: Optional[np.ndarray] = None):
    """
    Run the cell over a sequence.

    Args:
        cell: the GRU layer
        inputs: T x B x input_size array (or a sequence of B x input_size arrays)
        h0: initial state, B x hidden_size
        mask: optional T x B booleans; where False the state is carried unchanged

    Returns:
        (hidden states as T x B x hidden_size array, GruTrace)
    """
    seq = _as_sequence(inputs)
    steps, batch, features = seq.shape
    h = np.asarray(h0, dtype=np.float64)
    if features != cell.input_size:
        raise ShapeError(f"{cell.name} expects {cell.input_size} input columns, got {features}")
    if h.shape != (batch, cell.hidden_size):
        raise ShapeError(f"{cell.name} h0 has shape {h.shape}, expected {(batch, cell.hidden_size)}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (steps, batch):
            raise ShapeError(f"mask has shape {mask.shape}, expected {(steps, batch)}")

    p = cell.params
    trace = GruTrace(mask=mask)
    outputs = np.empty((steps, batch, cell.hidden_size))
    for t in range(steps):
        x = seq[t]
        z = expit(x @ p['W_z'].value + h @ p['U_z'].value + p['b_z'].value)
        r = expit(x @ p['W_r'].value + h @ p['U_r'].value + p['b_r'].value)
        h_hat = np.tanh(x @ p['W_h'].value + (r * h) @ p['U_h'].value + p['b_h'].value)
        h_new = (1.0 - z) * h + z * h_hat
        if mask is not None:
            h_new = np.where(mask[t][:, None], h_new, h)
        trace.inputs.append(x)
        trace.h_prev.append(h)
        trace.z.append(z)
        trace.r.append(r)
        trace.h_hat.append(h_hat)
        trace.h.append(h_new)
        outputs[t] = h_new
        h = h_new
    return outputs, trace


def gru_backward(cell: GruCell, trace: GruTrace, d_hidden) -> np.ndarray:
    """
    Backpropagate through time.

    d_hidden carries an upstream gradient for every step (T x B x hidden_size).
    Gradients accumulate into the nine cell parameters; the gradient with respect
    to each input step is returned as a T x B x input_size array.
    """
    d_hidden = np.asarray(d_hidden, dtype=np.float64)
    steps = len(trace)
    if d_hidden.ndim != 3 or d_hidden.shape[0] != steps:
        raise ShapeError(f"d_hidden has shape {d_hidden.shape}, trace has {steps} steps")
    if steps == 0:
        return np.zeros((0, 0, cell.input_size))
    batch = trace.inputs[0].shape[0]
    if d_hidden.shape[1:] != (batch, cell.hidden_size):
        raise ShapeError(f"d_hidden steps must be {(batch, cell.hidden_size)}, got {d_hidden.shape[1:]}")

    p = cell.params
    W_z, W_r, W_h = p['W_z'].value, p['W_r'].value, p['W_h'].value
    U_z, U_r, U_h = p['U_z'].value, p['U_r'].value, p['U_h'].value
    d_inputs = np.zeros((steps, batch, cell.input_size))
    dh_next = np.zeros((batch, cell.hidden_size))
    for t in range(steps - 1, -1, -1):
        x, h_prev = trace.inputs[t], trace.h_prev[t]
        z, r, h_hat = trace.z[t], trace.r[t], trace.h_hat[t]
        dh_total = d_hidden[t] + dh_next
        if trace.mask is not None:
            active = trace.mask[t][:, None].astype(np.float64)
            dh = dh_total * active
            dh_carry = dh_total * (1.0 - active)
        else:
            dh = dh_total
            dh_carry = 0.0

        d_a_h = dh * z * (1.0 - h_hat ** 2)
        d_a_z = dh * (h_hat - h_prev) * z * (1.0 - z)
        d_rh = d_a_h @ U_h.T
        d_a_r = d_rh * h_prev * r * (1.0 - r)

        p['W_z'].grad += x.T @ d_a_z
        p['W_r'].grad += x.T @ d_a_r
        p['W_h'].grad += x.T @ d_a_h
        p['U_z'].grad += h_prev.T @ d_a_z
        p['U_r'].grad += h_prev.T @ d_a_r
        p['U_h'].grad += (r * h_prev).T @ d_a_h
        p['b_z'].grad += d_a_z.sum(axis=0, keepdims=True)
        p['b_r'].grad += d_a_r.sum(axis=0, keepdims=True)
        p['b_h'].grad += d_a_h.sum(axis=0, keepdims=True)

        d_inputs[t] = d_a_z @ W_z.T + d_a_r @ W_r.T + d_a_h @ W_h.T
        dh_next = (dh * (1.0 - z) + d_rh * r + d_a_z @ U_z.T + d_a_r @ U_r.T) + dh_carry
    return d_inputs


def softmax_rows(logits: Tensor2) -> Tensor2:
    """Row-wise softmax with row-max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def affine_softmax(W: Param, b: Param, h: Tensor2) -> Tensor2:
    """Forward-only fully-connected layer followed by softmax."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != W.value.shape[0]:
        raise ShapeError(f"hidden has shape {h.shape}, {W.name} expects {W.value.shape[0]} columns")
    return softmax_rows(h @ W.value + b.value)


def affine_softmax_xent(W: Param, b: Param, h: Tensor2, targets):
    """
    Fully-connected layer, softmax and mean cross-entropy with gradients.

    Returns:
        (mean loss, probabilities B x classes, gradient with respect to h)
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != W.value.shape[0]:
        raise ShapeError(f"hidden has shape {h.shape}, {W.name} expects {W.value.shape[0]} columns")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != h.shape[0]:
        raise ShapeError(f"{targets.size} targets for a batch of {h.shape[0]}")
    classes = W.value.shape[1]
    bad = targets[(targets < 0) | (targets >= classes)]
    if bad.size:
        raise IndexError(f"target {int(bad[0])} out of range for {classes} items")

    batch = h.shape[0]
    logits = h @ W.value + b.value
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    rows = np.arange(batch)
    log_likelihood = shifted[rows, targets] - np.log(total[:, 0])
    loss = float(-log_likelihood.mean()) if batch else 0.0
    if not np.isfinite(loss):
        raise NumericError(f"cross-entropy is not finite ({loss})")

    d_logits = probs.copy()
    d_logits[rows, targets] -= 1.0
    d_logits /= max(batch, 1)
    W.grad += h.T @ d_logits
    b.grad += d_logits.sum(axis=0, keepdims=True)
    d_h = d_logits @ W.value.T
    return loss, probs, d_h


def adam_step(param: Param, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update; consumes and zeroes the gradient."""
    g = param.grad
    param.step += 1
    param.m *= beta1
    param.m += (1.0 - beta1) * g
    param.v *= beta2
    param.v += (1.0 - beta2) * (g * g)
    m_hat = param.m / (1.0 - beta1 ** param.step)
    v_hat = param.v / (1.0 - beta2 ** param.step)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()


@dataclass
class GradCheckReport:
    """Maximum relative error between analytic and numeric gradients, per parameter."""
    max_rel_error: Dict[str, float]
    coords_checked: Dict[str, int]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def failures(self) -> List[str]:
        return [name for name, err in self.max_rel_error.items() if err >= self.tol]


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[Param],
                      eps: float = 1e-5, tol: float = 1e-4,
                      max_coords: int = 1000, seed: int = 0,
                      abs_floor: float = 1e-8) -> GradCheckReport:
    """
    Compare analytic gradients against central differences.

    loss_fn runs forward and backward, accumulating gradients into params, and
    returns the scalar loss. Parameters larger than max_coords are checked on a
    fixed-seed random subset of coordinates. Errors are relative to the larger
    of the two gradients, or to abs_floor when both are smaller.
    """
    for param in params:
        param.zero_grad()
    base = loss_fn()
    if not np.isfinite(base):
        raise NumericError(f"loss is not finite ({base})")
    analytic = {param.name: param.grad.copy() for param in params}
    rng = np.random.default_rng(seed)

    errors: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for param in params:
        flat_value = param.value.reshape(-1)
        if flat_value.size > max_coords:
            coords = np.sort(rng.choice(flat_value.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat_value.size)
        grad = analytic[param.name].reshape(-1)
        worst = 0.0
        for i in coords:
            original = flat_value[i]
            flat_value[i] = original + eps
            plus = loss_fn()
            flat_value[i] = original - eps
            minus = loss_fn()
            flat_value[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"loss is not finite while perturbing {param.name}[{i}]")
            numeric = (plus - minus) / (2.0 * eps)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
        errors[param.name] = worst
        counts[param.name] = int(coords.size)
        logger.debug("grad check %s: %d coords, max rel error %.3e", param.name, coords.size, worst)

    for param in params:
        param.zero_grad()
    return GradCheckReport(errors, counts, tol)
