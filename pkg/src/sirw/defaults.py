"""Statistical thresholds shared by the test-suite and the CLI harness."""
from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Thresholds:
    p_min: float = 0.01          # two-sample tests
    p_min_grid: float = 0.001    # family-wise level for Bonferroni grids
    ks_max: float = 0.05         # KS distance to an exact limit law
    ks_max_fine: float = 0.03    # tighter KS distance (BMPE, Euler vs exact)
    n_se: float = 3.0            # s.e. multiples for mean checks
    trend_slack: float = 0.01    # allowed KS increase in convergence trends
    dp_gap: float = 1e-8         # DP identities
    pathwise: float = 1e-10      # pathwise drift identity per term
    residual: float = 1e-12      # BMPE fixed-point residual

    def override(self, **kw) -> "Thresholds":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


THRESHOLDS = Thresholds()

GAMMA_TOL = 1e-10
DP_TOL = 1e-12
URN_MAX_DRAWS = 10**9
RECORD_CAP = 50_000_000
WORKERS_ENV = "SIRW_WORKERS"
SCHEMA_VERSION = "1"
