"""
SDWT1 checkpoints: magic b'SDWT0001', uint32 little-endian header length, UTF-8 JSON
header (metadata plus the name and shape of every blob), then the blobs as little-endian
float64 in declaration order.
"""
import os
import json
import struct
import numpy as np
from typing import Any, Dict, Tuple
from sim_types import FormatVersionMismatch, TruncatedFile, ExportIoError
from sklearn.preprocessing import StandardScaler
from neural_core import MlpWeights

CHECKPOINT_MAGIC = b'SDWT0001'
_BLOB_DTYPE = np.dtype('<f8')


def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]):
    """Write named arrays (insertion order kept) with a JSON metadata header"""
    header = {
        'metadata': metadata,
        'blobs': [{'name': name, 'shape': list(np.shape(a))} for name, a in arrays.items()],
    }
    header_bytes = json.dumps(header).encode('utf-8')
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack('<I', len(header_bytes)))
            f.write(header_bytes)
            for a in arrays.values():
                f.write(np.ascontiguousarray(a, dtype=_BLOB_DTYPE).tobytes())
    except OSError as e:
        raise ExportIoError(f"Could not write checkpoint {path}: {e}")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a checkpoint

    Returns:
        Tuple of (ordered name -> float64 array, metadata)
    """
    with open(path, 'rb') as f:
        data = f.read()

    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        if len(data) < len(CHECKPOINT_MAGIC):
            raise TruncatedFile(f"{path}: missing magic")
        raise FormatVersionMismatch(f"{path}: not an SDWT1 checkpoint", magic=data[:8].hex())
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise TruncatedFile(f"{path}: missing header length")
    (header_length,) = struct.unpack_from('<I', data, offset)
    offset += 4
    if len(data) < offset + header_length:
        raise TruncatedFile(f"{path}: header shorter than declared")
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    offset += header_length

    arrays: Dict[str, np.ndarray] = {}
    for blob in header['blobs']:
        shape = tuple(blob['shape'])
        count = int(np.prod(shape)) if shape else 1
        size = count * _BLOB_DTYPE.itemsize
        if len(data) < offset + size:
            raise TruncatedFile(f"{path}: blob '{blob['name']}' truncated")
        arrays[blob['name']] = np.frombuffer(data, dtype=_BLOB_DTYPE, count=count,
                                             offset=offset).reshape(shape).astype(np.float64)
        offset += size
    return arrays, header['metadata']


def pack_weights(prefix: str, weights: MlpWeights) -> Dict[str, np.ndarray]:
    """Flatten MlpWeights into prefixed blobs (params first, then buffers)"""
    arrays = {f'{prefix}.params.{k}': v for k, v in weights.params.items()}
    arrays.update({f'{prefix}.buffers.{k}': v for k, v in weights.buffers.items()})
    return arrays


def unpack_weights(prefix: str, arrays: Dict[str, np.ndarray], momentum: float, eps: float) -> MlpWeights:
    """Inverse of pack_weights"""
    params_prefix = f'{prefix}.params.'
    buffers_prefix = f'{prefix}.buffers.'
    return MlpWeights(
        params={k[len(params_prefix):]: v.copy() for k, v in arrays.items() if k.startswith(params_prefix)},
        buffers={k[len(buffers_prefix):]: v.copy() for k, v in arrays.items() if k.startswith(buffers_prefix)},
        momentum=momentum,
        eps=eps,
    )


def pack_scaler(prefix: str, scaler: StandardScaler) -> Dict[str, np.ndarray]:
    return {f'{prefix}.mean': scaler.mean_, f'{prefix}.scale': scaler.scale_}


def unpack_scaler(prefix: str, arrays: Dict[str, np.ndarray]) -> StandardScaler:
    """Rebuild a fitted StandardScaler from its stored statistics"""
    mean = arrays[f'{prefix}.mean'].copy()
    scale = arrays[f'{prefix}.scale'].copy()
    scaler = StandardScaler()
    scaler.mean_ = mean
    scaler.scale_ = scale
    scaler.var_ = scale ** 2
    scaler.n_features_in_ = mean.shape[0]
    scaler.n_samples_seen_ = 1
    return scaler
