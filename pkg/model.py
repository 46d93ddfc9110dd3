"""
Model
IT-RNN (item embeddings -> GRU -> softmax) and DT-RNN (a dwell-time GRU whose
per-step output is concatenated with the item embedding) over left-padded batches.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from numeric_core import (GruCell, GruTrace, Param, ShapeError, affine_softmax,
                          affine_softmax_xent, embedding_backward, embedding_forward,
                          gru_backward, gru_forward)
from preprocess import MAX_INPUT_LENGTH, Example

logger = logging.getLogger(__name__)

PAD_INDEX = 0
ITEM_ENCODINGS = ('embedding', 'onehot')
EMBEDDING_INIT_RANGE = 0.05
SEED_MASK = (1 << 64) - 1


@dataclass
class ItRnnConfig:
    """Sizes of the item-only model."""
    num_items: int
    item_em_size: int = 128
    it_rnn_size: int = 128
    max_len: int = MAX_INPUT_LENGTH
    item_encoding: str = 'embedding'

    def __post_init__(self):
        for name in ('num_items', 'item_em_size', 'it_rnn_size', 'max_len'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.item_encoding not in ITEM_ENCODINGS:
            raise ValueError(f"item_encoding must be one of {ITEM_ENCODINGS}, got {self.item_encoding!r}")

    @property
    def item_input_size(self) -> int:
        return self.item_em_size if self.item_encoding == 'embedding' else self.num_items + 1

    def to_dict(self) -> Dict:
        return {'num_items': self.num_items, 'item_em_size': self.item_em_size,
                'it_rnn_size': self.it_rnn_size, 'max_len': self.max_len,
                'item_encoding': self.item_encoding}


@dataclass
class DtRnnConfig:
    """Item model sizes plus the dwell-time path."""
    base: ItRnnConfig
    dt_em_size: int = 16
    dt_rnn_size: int = 8
    dwell_bucket_count: int = 3601

    def __post_init__(self):
        for name in ('dt_em_size', 'dt_rnn_size', 'dwell_bucket_count'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> Dict:
        return {'base': self.base.to_dict(), 'dt_em_size': self.dt_em_size,
                'dt_rnn_size': self.dt_rnn_size, 'dwell_bucket_count': self.dwell_bucket_count}


ModelConfig = Union[ItRnnConfig, DtRnnConfig]


def config_from_dict(data: Dict) -> ModelConfig:
    if 'base' in data:
        return DtRnnConfig(ItRnnConfig(**data['base']), data['dt_em_size'],
                           data['dt_rnn_size'], data['dwell_bucket_count'])
    return ItRnnConfig(**data)


class ModelParams:
    """Named parameters of an IT-RNN or DT-RNN."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.kind = 'dt' if isinstance(config, DtRnnConfig) else 'it'
        base = self.base_config
        self.params: Dict[str, Param] = {}

        if self.kind == 'dt':
            self.params['dwell_embedding'] = Param(
                'dwell_embedding', np.zeros((config.dwell_bucket_count + 1, config.dt_em_size)))
            self.dwell_gru: Optional[GruCell] = GruCell('dwell_gru', config.dt_em_size, config.dt_rnn_size)
            self.params.update({p.name: p for p in self.dwell_gru.parameters()})
            gru_input = config.dt_rnn_size + base.item_input_size
        else:
            self.dwell_gru = None
            gru_input = base.item_input_size

        if base.item_encoding == 'embedding':
            self.params['item_embedding'] = Param(
                'item_embedding', np.zeros((base.num_items + 1, base.item_em_size)))
        self.item_gru = GruCell('item_gru', gru_input, base.it_rnn_size)
        self.params.update({p.name: p for p in self.item_gru.parameters()})
        self.params['out_W'] = Param('out_W', np.zeros((base.it_rnn_size, base.num_items)))
        self.params['out_b'] = Param('out_b', np.zeros((1, base.num_items)))

    @property
    def base_config(self) -> ItRnnConfig:
        return self.config.base if self.kind == 'dt' else self.config

    @property
    def num_items(self) -> int:
        return self.base_config.num_items

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def parameters(self) -> List[Param]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> 'ModelParams':
        clone = ModelParams(self.config)
        for name, param in self.params.items():
            clone.params[name] = param.copy()
        for cell in (clone.item_gru, clone.dwell_gru):
            if cell is not None:
                for key in cell.params:
                    cell.params[key] = clone.params[cell.params[key].name]
        return clone

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()


@dataclass
class Batch:
    """Left-padded index grids; real item indices and dwell buckets are shifted by +1."""
    item_ids: np.ndarray
    dwell_ids: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    session_ids: np.ndarray

    def __len__(self):
        return self.item_ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.item_ids.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """T x B booleans, True at real (non-pad) positions."""
        positions = np.arange(self.max_len)[:, None]
        return positions >= (self.max_len - self.lengths)[None, :]

    @classmethod
    def from_examples(cls, examples: Sequence[Example], max_len: int = MAX_INPUT_LENGTH) -> 'Batch':
        size = len(examples)
        item_ids = np.full((size, max_len), PAD_INDEX, dtype=np.int64)
        dwell_ids = np.full((size, max_len), PAD_INDEX, dtype=np.int64)
        lengths = np.empty(size, dtype=np.int64)
        for row, ex in enumerate(examples):
            n = ex.length
            if n > max_len:
                raise ShapeError(f"example of length {n} exceeds max_len {max_len}")
            item_ids[row, max_len - n:] = np.asarray(ex.input_items) + 1
            dwell_ids[row, max_len - n:] = np.asarray(ex.input_dwell) + 1
            lengths[row] = n
        return cls(item_ids, dwell_ids, lengths,
                   np.array([ex.target_item for ex in examples], dtype=np.int64),
                   np.array([ex.session_id for ex in examples], dtype=np.int64))


@dataclass
class ModelTrace:
    """Activations from a forward pass, consumed by model_backward."""
    batch: Batch
    item_inputs: np.ndarray
    item_trace: GruTrace
    last_hidden: np.ndarray
    dwell_trace: Optional[GruTrace] = None
    extras: Dict = field(default_factory=dict)


def _glorot(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """
    Deterministic initialisation from numpy's PCG64 bit generator.

    Weight matrices ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), biases
    zero, embeddings ~ U(-0.05, 0.05) with the pad row zeroed. Draws happen in
    parameter order, so identical seeds give identical parameters on every platform.
    """
    params = ModelParams(config)
    rng = np.random.Generator(np.random.PCG64(seed & SEED_MASK))
    for name, param in params.params.items():
        short = name.rsplit('.', 1)[-1]
        if name.endswith('_embedding'):
            param.value[...] = rng.uniform(-EMBEDDING_INIT_RANGE, EMBEDDING_INIT_RANGE, size=param.shape)
            param.value[PAD_INDEX] = 0.0
        elif short.startswith('b_') or name == 'out_b':
            param.value[...] = 0.0
        else:
            param.value[...] = _glorot(rng, param.shape)
    return params


def _item_inputs(params: ModelParams, batch: Batch) -> np.ndarray:
    """T x B x item_input_size item encodings."""
    ids = batch.item_ids.T
    if params.base_config.item_encoding == 'onehot':
        encoded = np.zeros(ids.shape + (params.num_items + 1,))
        np.put_along_axis(encoded, ids[..., None], 1.0, axis=-1)
        return encoded
    flat = embedding_forward(params['item_embedding'], ids.reshape(-1))
    return flat.reshape(ids.shape + (flat.shape[1],))


def _check_batch(params: ModelParams, batch: Batch):
    if batch.item_ids.ndim != 2 or batch.item_ids.shape != batch.dwell_ids.shape:
        raise ShapeError(f"item grid {batch.item_ids.shape} and dwell grid {batch.dwell_ids.shape} differ")
    if np.any(batch.lengths < 1) or np.any(batch.lengths > batch.max_len):
        raise ShapeError(f"batch lengths must lie in 1..{batch.max_len}")


def itrnn_forward(params: ModelParams, batch: Batch):
    """Item GRU over the padded window; the final position's state feeds the softmax."""
    _check_batch(params, batch)
    mask = batch.mask
    inputs = _item_inputs(params, batch)
    h0 = np.zeros((len(batch), params.base_config.it_rnn_size))
    hidden, item_trace = gru_forward(params.item_gru, inputs, h0, mask)
    last = hidden[-1]
    probs = affine_softmax(params['out_W'], params['out_b'], last)
    return probs, ModelTrace(batch, inputs, item_trace, last)


def dtrnn_forward(params: ModelParams, batch: Batch):
    """Dwell embeddings -> dwell GRU; [dwell state ; item embedding] -> item GRU -> softmax."""
    if params.kind != 'dt':
        raise ShapeError("dtrnn_forward needs DT-RNN parameters")
    _check_batch(params, batch)
    config: DtRnnConfig = params.config
    mask = batch.mask
    batch_size = len(batch)

    dwell_ids = batch.dwell_ids.T
    dwell_flat = embedding_forward(params['dwell_embedding'], dwell_ids.reshape(-1))
    dwell_inputs = dwell_flat.reshape(dwell_ids.shape + (config.dt_em_size,))
    dwell_hidden, dwell_trace = gru_forward(
        params.dwell_gru, dwell_inputs, np.zeros((batch_size, config.dt_rnn_size)), mask)

    item_inputs = _item_inputs(params, batch)
    inputs = np.concatenate([dwell_hidden, item_inputs], axis=-1)
    hidden, item_trace = gru_forward(
        params.item_gru, inputs, np.zeros((batch_size, config.base.it_rnn_size)), mask)
    last = hidden[-1]
    probs = affine_softmax(params['out_W'], params['out_b'], last)
    return probs, ModelTrace(batch, item_inputs, item_trace, last, dwell_trace)


def model_forward(params: ModelParams, batch: Batch):
    if params.kind == 'dt':
        return dtrnn_forward(params, batch)
    return itrnn_forward(params, batch)


def model_backward(params: ModelParams, trace: ModelTrace, targets=None) -> float:
    """Accumulate gradients of the mean next-item negative log-likelihood; return the loss."""
    batch = trace.batch
    targets = batch.targets if targets is None else targets
    loss, _, d_last = affine_softmax_xent(params['out_W'], params['out_b'], trace.last_hidden, targets)

    steps = batch.max_len
    d_hidden = np.zeros((steps, len(batch), params.item_gru.hidden_size))
    d_hidden[-1] = d_last
    d_inputs = gru_backward(params.item_gru, trace.item_trace, d_hidden)

    if params.kind == 'dt':
        split = params.config.dt_rnn_size
        d_dwell_hidden, d_item_inputs = d_inputs[..., :split], d_inputs[..., split:]
        d_dwell_inputs = gru_backward(params.dwell_gru, trace.dwell_trace, d_dwell_hidden)
        embedding_backward(params['dwell_embedding'], batch.dwell_ids.T.reshape(-1),
                           d_dwell_inputs.reshape(-1, d_dwell_inputs.shape[-1]))
    else:
        d_item_inputs = d_inputs

    if params.base_config.item_encoding == 'embedding':
        embedding_backward(params['item_embedding'], batch.item_ids.T.reshape(-1),
                           d_item_inputs.reshape(-1, d_item_inputs.shape[-1]))
    return loss


def predict_proba(params: ModelParams, batch: Batch) -> np.ndarray:
    probs, _ = model_forward(params, batch)
    return probs


def top_k_indices(prob_row: np.ndarray, k: int) -> np.ndarray:
    """Indices by descending probability, ties by ascending index."""
    order = np.argsort(-prob_row, kind='stable')
    return order[:min(k, prob_row.size)]


def predict_topk(params: ModelParams, batch: Batch, k: int = 20) -> List[List[Tuple[int, float]]]:
    """Per row, the k most probable item indices with their probabilities."""
    probs = predict_proba(params, batch)
    return [[(int(i), float(row[i])) for i in top_k_indices(row, k)] for row in probs]
