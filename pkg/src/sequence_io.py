"""
SDSQ1 sequence files: magic b'SDSQ0001', uint32 little-endian header length, UTF-8 JSON
header, then per frame the positions followed by the BC vector as little-endian float32.
"""
import os
import json
import struct
import numpy as np
from typing import List
from sim_types import (
    Frame, StateSequence, Topology, FormatVersionMismatch, TruncatedFile, ExportIoError, STORAGE_DTYPE
)

SEQUENCE_MAGIC = b'SDSQ0001'
_FRAME_DTYPE = STORAGE_DTYPE


def save_sequence(sequence: StateSequence, path: str):
    """Write one StateSequence (topology required) to `path`"""
    if sequence.topology is None:
        raise ExportIoError("Sequence has no topology to store")
    header = {
        'topology': sequence.topology.to_dict(),
        'dt': sequence.dt,
        'bc_dim': sequence.bc_dim,
        'frame_count': len(sequence),
        'scenario': sequence.scenario,
    }
    header_bytes = json.dumps(header).encode('utf-8')
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(SEQUENCE_MAGIC)
            f.write(struct.pack('<I', len(header_bytes)))
            f.write(header_bytes)
            for frame in sequence.frames:
                f.write(np.concatenate([frame.x, frame.p]).astype(_FRAME_DTYPE).tobytes())
    except OSError as e:
        raise ExportIoError(f"Could not write sequence file {path}: {e}")


def load_sequence(path: str) -> StateSequence:
    """Read an SDSQ1 file back into a float64 StateSequence"""
    with open(path, 'rb') as f:
        data = f.read()

    if len(data) < len(SEQUENCE_MAGIC):
        raise TruncatedFile(f"{path}: missing magic")
    if data[:len(SEQUENCE_MAGIC)] != SEQUENCE_MAGIC:
        raise FormatVersionMismatch(f"{path}: not an SDSQ1 file", magic=data[:8].hex())

    offset = len(SEQUENCE_MAGIC)
    if len(data) < offset + 4:
        raise TruncatedFile(f"{path}: missing header length")
    (header_length,) = struct.unpack_from('<I', data, offset)
    offset += 4
    if len(data) < offset + header_length:
        raise TruncatedFile(f"{path}: header shorter than declared")
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    offset += header_length

    topology = Topology.from_dict(header['topology'])
    bc_dim = int(header['bc_dim'])
    frame_count = int(header['frame_count'])
    width = topology.dofs + bc_dim
    expected = frame_count * width * _FRAME_DTYPE.itemsize
    if len(data) - offset < expected:
        raise TruncatedFile(f"{path}: expected {expected} payload bytes, found {len(data) - offset}")

    values = np.frombuffer(data, dtype=_FRAME_DTYPE, count=frame_count * width, offset=offset)
    values = values.reshape(frame_count, width).astype(np.float64)
    frames = [Frame(t, values[t, :topology.dofs].copy(), values[t, topology.dofs:].copy())
              for t in range(frame_count)]
    return StateSequence(frames=frames, dt=float(header['dt']), scenario=header['scenario'],
                         topology=topology, bc_dim=bc_dim)


def save_dataset(sequences: List[StateSequence], directory: str, prefix: str = "seq") -> List[str]:
    """Write one SDSQ1 file per sequence; returns the paths in order"""
    paths = []
    for i, sequence in enumerate(sequences):
        path = os.path.join(directory, f"{prefix}_{i:03d}.sdsq")
        save_sequence(sequence, path)
        paths.append(path)
    return paths


def load_dataset(directory: str) -> List[StateSequence]:
    """Load every .sdsq file in a directory, sorted by file name"""
    names = sorted(n for n in os.listdir(directory) if n.endswith('.sdsq'))
    return [load_sequence(os.path.join(directory, n)) for n in names]
