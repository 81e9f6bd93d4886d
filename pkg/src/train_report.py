import os
import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

LOSS_TERMS = ('total', 'inertial', 'elastic', 'external', 'bc')


@dataclass
class TrainReport:
    """Per-epoch loss records, wall time and seed of one training run"""
    seed: int
    losses: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    kind: str = ""
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, epoch: int, **terms: float):
        entry = {'epoch': epoch}
        for name in LOSS_TERMS:
            entry[name] = float(terms.get(name, 0.0))
        self.losses.append(entry)
        self.wall_time = time.perf_counter() - self._start

    def series(self, term: str = 'total') -> List[float]:
        return [entry[term] for entry in self.losses]

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1]['total'] if self.losses else None

    def write_jsonl(self, path: str):
        """One JSON record per epoch"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as f:
            for entry in self.losses:
                record = dict(entry)
                record['seed'] = self.seed
                record['kind'] = self.kind
                f.write(json.dumps(record) + '\n')

    def summary(self) -> Dict[str, float]:
        return {
            'kind': self.kind,
            'seed': self.seed,
            'epochs': len(self.losses),
            'final_loss': self.final_loss,
            'wall_time': self.wall_time,
        }
