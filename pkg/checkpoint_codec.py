"""
Checkpoint Codec
Serializes model parameters and Adam state to a self-describing container: a
`key: value` text header followed by raw little-endian float64 payloads.
"""
import json
from typing import Any, Dict, Optional, Tuple

import numpy as np

from model import ModelParams, config_from_dict

FORMAT_TAG = 'dwellrec-checkpoint/1'
HEADER_END = b'\n\n'
FLOAT_DTYPE = np.dtype('<f8')


class CheckpointError(ValueError):
    """Raised for a truncated or inconsistent checkpoint."""


class CheckpointCodec:
    """Builds and parses checkpoint containers."""

    @staticmethod
    def parse_header(data: bytes) -> Dict[str, str]:
        """Parse the `key: value` header lines into a dictionary."""
        text = data.decode('utf-8')
        header = {}
        for line in text.strip().split('\n'):
            if ':' in line:
                key, value = line.split(':', 1)
                header[key.strip()] = value.strip()
        return header

    @staticmethod
    def serialize_header(header: Dict[str, Any]) -> bytes:
        lines = [f"{key}: {value}" for key, value in header.items()]
        return '\n'.join(lines).encode('utf-8')

    @staticmethod
    def serialize(params: ModelParams, vocab_digest: Optional[str] = None,
                  extra: Optional[Dict[str, Any]] = None) -> bytes:
        """
        Encode every parameter's value, first and second Adam moments and step.

        Returns:
            The container bytes; decoding them reproduces params bit for bit.
        """
        header: Dict[str, Any] = {
            'format': FORMAT_TAG,
            'model_kind': params.kind,
            'config': json.dumps(params.config.to_dict(), sort_keys=True),
            'vocab_digest': vocab_digest or '',
            'param_count': len(params.params),
        }
        for key, value in (extra or {}).items():
            header[f'extra.{key}'] = json.dumps(value, sort_keys=True)
        payload = []
        offset = 0
        for i, (name, param) in enumerate(params.params.items()):
            rows, cols = param.shape
            header[f'param.{i}'] = f"{name} {rows} {cols} {param.step} {offset}"
            for array in (param.value, param.m, param.v):
                blob = np.ascontiguousarray(array, dtype=FLOAT_DTYPE).tobytes()
                payload.append(blob)
                offset += len(blob)
        return CheckpointCodec.serialize_header(header) + HEADER_END + b''.join(payload)

    @staticmethod
    def parse(data: bytes) -> Tuple[ModelParams, Dict[str, str]]:
        """Decode a container produced by serialize."""
        split = data.find(HEADER_END)
        if split < 0:
            raise CheckpointError("checkpoint header is not terminated")
        header = CheckpointCodec.parse_header(data[:split])
        if header.get('format') != FORMAT_TAG:
            raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")
        body = memoryview(data)[split + len(HEADER_END):]

        params = ModelParams(config_from_dict(json.loads(header['config'])))
        if params.kind != header['model_kind']:
            raise CheckpointError(f"config describes {params.kind}, header says {header['model_kind']}")
        count = int(header['param_count'])
        if count != len(params.params):
            raise CheckpointError(f"checkpoint holds {count} params, model has {len(params.params)}")
        for i in range(count):
            name, rows, cols, step, offset = header[f'param.{i}'].split()
            rows, cols, step, offset = int(rows), int(cols), int(step), int(offset)
            if name not in params.params:
                raise CheckpointError(f"unexpected parameter {name!r}")
            param = params.params[name]
            if param.shape != (rows, cols):
                raise CheckpointError(f"{name} has shape {(rows, cols)}, model expects {param.shape}")
            n_bytes = rows * cols * FLOAT_DTYPE.itemsize
            arrays = []
            for part in range(3):
                start = offset + part * n_bytes
                if start + n_bytes > len(body):
                    raise CheckpointError(f"checkpoint truncated inside {name}")
                arrays.append(np.frombuffer(body[start:start + n_bytes], dtype=FLOAT_DTYPE)
                              .reshape(rows, cols).astype(np.float64))
            param.value[...], param.m[...], param.v[...] = arrays
            param.step = step
        return params, header


def save_checkpoint(path: str, params: ModelParams, vocab_digest: Optional[str] = None,
                    extra: Optional[Dict[str, Any]] = None):
    with open(path, 'wb') as f:
        f.write(CheckpointCodec.serialize(params, vocab_digest, extra))


def load_checkpoint(path: str, vocab_digest: Optional[str] = None) -> Tuple[ModelParams, Dict[str, str]]:
    """Load a checkpoint; if vocab_digest is given it must match the stored one."""
    with open(path, 'rb') as f:
        params, header = CheckpointCodec.parse(f.read())
    stored = header.get('vocab_digest', '')
    if vocab_digest and stored and stored != vocab_digest:
        raise CheckpointError(f"{path} was trained with a different vocabulary")
    return params, header
