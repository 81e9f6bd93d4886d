import numpy as np
from enum import Enum
from typing import Any, Dict, Optional
from dataclasses import dataclass
from geometry import SimObject
from sim_types import TopologyKind, MissingBcValues, InvalidTopology


class EncodingMode(Enum):
    ROOT_RELATIVE = "root_relative"
    DIRICHLET_MEAN_RELATIVE = "dirichlet_mean_relative"


@dataclass
class RelativeEncoding:
    """
    Translation-removing coordinates fed to the autoencoder

    ROOT_RELATIVE: every non-root rod vertex as an offset from its strand root; roots dropped.
    DIRICHLET_MEAN_RELATIVE: every vertex offset by the mean of the Dirichlet vertices.
    Decoding needs the reference vertices' positions (the BC values of the frame).
    """
    mode: EncodingMode
    num_vertices: int
    reference_vertices: np.ndarray          # roots or Dirichlet vertices
    owner: Optional[np.ndarray] = None      # ROOT_RELATIVE: root index (into reference) per vertex

    def __post_init__(self):
        self.reference_vertices = np.asarray(self.reference_vertices, dtype=np.int64)
        if self.mode == EncodingMode.ROOT_RELATIVE:
            if self.owner is None:
                raise InvalidTopology("Root-relative encoding needs a strand owner per vertex")
            self.owner = np.asarray(self.owner, dtype=np.int64)
            keep = np.ones(self.num_vertices, dtype=bool)
            keep[self.reference_vertices] = False
            self._kept = np.flatnonzero(keep)
        else:
            if self.reference_vertices.size == 0:
                raise InvalidTopology("Dirichlet-mean encoding needs at least one Dirichlet vertex")
            self._kept = np.arange(self.num_vertices)

    @property
    def encoded_dim(self) -> int:
        return 3 * len(self._kept)

    @property
    def kept_vertices(self) -> np.ndarray:
        return self._kept

    def reference_positions(self, x: np.ndarray) -> np.ndarray:
        """BC values of a frame: positions of the reference vertices, (..., K, 3)"""
        points = np.asarray(x, dtype=np.float64).reshape(np.shape(x)[:-1] + (-1, 3))
        return points[..., self.reference_vertices, :]

    def _offsets(self, reference: np.ndarray) -> np.ndarray:
        """Per kept vertex translation, (..., kept, 3)"""
        if self.mode == EncodingMode.ROOT_RELATIVE:
            return reference[..., self.owner[self._kept], :]
        mean = reference.mean(axis=-2, keepdims=True)
        return np.broadcast_to(mean, reference.shape[:-2] + (len(self._kept), 3))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """
        Encode absolute positions

        Args:
            x: Flat positions (3N,) or batch (B, 3N)

        Returns:
            Relative coordinates (encoded_dim,) or (B, encoded_dim)
        """
        x = np.asarray(x, dtype=np.float64)
        points = x.reshape(x.shape[:-1] + (-1, 3))
        reference = points[..., self.reference_vertices, :]
        relative = points[..., self._kept, :] - self._offsets(reference)
        return relative.reshape(x.shape[:-1] + (-1,))

    def decode(self, v: np.ndarray, bc_values: Optional[np.ndarray]) -> np.ndarray:
        """
        Absolute positions from relative coordinates and the reference vertices' positions

        Args:
            v: Encoded vector(s)
            bc_values: (K, 3) or (B, K, 3) reference positions for the frame(s)
        """
        if bc_values is None:
            raise MissingBcValues("Decoding relative coordinates needs the frame's BC values")
        v = np.asarray(v, dtype=np.float64)
        reference = np.asarray(bc_values, dtype=np.float64)
        if reference.shape[-2:] != (len(self.reference_vertices), 3):
            raise MissingBcValues(
                f"Expected {len(self.reference_vertices)} reference positions, got shape {reference.shape}"
            )
        batch_shape = v.shape[:-1]
        points = np.zeros(batch_shape + (self.num_vertices, 3))
        relative = v.reshape(batch_shape + (-1, 3))
        points[..., self._kept, :] = relative + self._offsets(reference)
        if self.mode == EncodingMode.ROOT_RELATIVE:
            points[..., self.reference_vertices, :] = reference
        return points.reshape(batch_shape + (-1,))

    def pullback(self, full_gradient: np.ndarray) -> np.ndarray:
        """Transpose of d(decode)/dv applied to a full-space gradient"""
        g = np.asarray(full_gradient)
        points = g.reshape(g.shape[:-1] + (-1, 3))
        return points[..., self._kept, :].reshape(g.shape[:-1] + (-1,))

    def validate_encoded(self, v: np.ndarray) -> bool:
        """Shape and finiteness check of an encoded vector"""
        if v is None or not isinstance(v, np.ndarray):
            return False
        if v.shape[-1] != self.encoded_dim:
            return False
        return bool(np.all(np.isfinite(v)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode.value,
            'num_vertices': self.num_vertices,
            'reference_vertices': self.reference_vertices.tolist(),
            'owner': None if self.owner is None else self.owner.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RelativeEncoding':
        return cls(mode=EncodingMode(data['mode']), num_vertices=data['num_vertices'],
                   reference_vertices=np.asarray(data['reference_vertices'], dtype=np.int64),
                   owner=None if data.get('owner') is None else np.asarray(data['owner']))


def create_relative_encoding(sim_object: SimObject) -> RelativeEncoding:
    """
    Factory: root-relative coding for rod sets, Dirichlet-mean coding otherwise

    Returns:
        Configured RelativeEncoding
    """
    topology = sim_object.topology
    if topology.kind == TopologyKind.ROD_SET:
        roots = topology.roots()
        owner = np.zeros(topology.num_vertices, dtype=np.int64)
        for strand_index, (start, stop) in enumerate(topology.strands):
            owner[start:stop] = strand_index
        return RelativeEncoding(EncodingMode.ROOT_RELATIVE, topology.num_vertices, roots, owner)
    return RelativeEncoding(EncodingMode.DIRICHLET_MEAN_RELATIVE, topology.num_vertices,
                            sim_object.dirichlet)
