from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

MODES = ("atten", "scatter", "both")


def lambda_grid(n: int = 25, lo: float = 1e-4, hi: float = 1e4) -> np.ndarray:
    """Log-uniform regularization candidates, endpoints included."""
    return np.logspace(np.log10(lo), np.log10(hi), n)


@dataclass
class ReconConfig:
    """Tuning of the cyclic reconstruction.

    ``lambda_rho`` / ``lambda_p`` of ``None`` trigger discrepancy-principle
    selection over ``lambda_grid`` during the first cycle; ``lambda_search``
    is passed on to :func:`select_lambda`.
    """

    mode: str = "both"
    lambda_rho: float | None = None
    lambda_p: float | None = None
    w1: float | None = None
    w2: float | None = None
    eps_fpi: float = 1e-11
    eps_epi: float = 3e-3
    l_max: int = 100
    fpi_max: int = 50
    eps_cyclic: float = 1e-2
    max_cycles: int = 10
    rho_init: float = 0.4
    scales: tuple[int, ...] = (10, 20, 30, 40, 50)
    lambda_grid: tuple[float, ...] = field(default_factory=lambda: tuple(lambda_grid()))
    lambda_search: str = "full"
    lsqr_tol: float = 1e-10
    lsqr_max_iter: int = 2000
    # Levenberg-Marquardt
    lm_tau: float = 1e-3
    lm_max_iter: int = 50
    lm_step_tol: float = 1e-8
    lm_max_rejects: int = 20
    # non-local means
    nlm_patch: int = 5
    nlm_search: int = 11
    nlm_bandwidth_frac: float = 0.1
    kappa: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_search not in ("full", "descending"):
            raise ValueError(f"lambda_search must be 'full' or 'descending', got {self.lambda_search!r}")
        self.scales = tuple(int(s) for s in self.scales)
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if not self.scales or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be a nonempty strictly ascending sequence")
        for name in ("eps_fpi", "eps_epi", "eps_cyclic", "lsqr_tol", "lm_step_tol", "lm_tau", "rho_init"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_rho", "lambda_p"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if (self.lambda_rho is None or self.lambda_p is None) and not self.lambda_grid:
            raise ValueError("an empty lambda grid needs fixed lambda_rho and lambda_p")

    def to_dict(self) -> dict:
        return asdict(self)
