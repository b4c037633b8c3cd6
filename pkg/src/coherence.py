from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ParameterDomainError


@dataclass(frozen=True)
class CoherenceLaw:
    """Power law T2(N) = t2_ref * (N / n_ref) ** exponent for N pi pulses."""

    t2_ref: float = 3.2
    n_ref: int = 2
    exponent: float = 0.41

    def __post_init__(self):
        if not (self.t2_ref > 0 and self.n_ref > 0):
            raise ParameterDomainError(
                f"coherence law needs t2_ref > 0 and n_ref > 0, got {self.t2_ref}, {self.n_ref}")

    def t2(self, n_pi: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
        n = np.asarray(n_pi, dtype=float)
        if np.any(n <= 0):
            raise ParameterDomainError(f"pulse count must be > 0, got {n_pi}")
        out = self.t2_ref * (n / self.n_ref) ** self.exponent
        return out if out.ndim else float(out)
