import time
from typing import Optional

import pandas as pd
from pydantic import model_validator

from handlers.router import ExperimentConfig, Router
from services.attention import column_sum_stats
from services.sinkhorn import sinkhorn
from utils.io import read_matrix_csv, write_csv, write_json, write_matrix_csv
from utils.logger import logger

router = Router()


# ─── sinkhorn ────────────────────────────────────────────────────────────────

class SinkhornCommandConfig(ExperimentConfig):
    cost: str
    iters: Optional[int] = None
    tol: Optional[float] = None
    max_iterations: Optional[int] = None
    out: str = "kernel.csv"
    potentials: str = "potentials.csv"

    @model_validator(mode="after")
    def one_stop_rule(self) -> "SinkhornCommandConfig":
        if self.iters is not None and self.tol is not None:
            raise ValueError("give either iters or tol, not both")
        return self


def _sinkhorn_arguments(parser) -> None:
    parser.add_argument("--cost", help="cost matrix CSV (no header)")
    parser.add_argument("--iters", type=int, default=None, help="fixed number of updates")
    parser.add_argument("--tol", type=float, default=None, help="marginal-violation tolerance")
    parser.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    parser.add_argument("--out", default=None, help="kernel CSV")
    parser.add_argument("--potentials", default=None, help="potentials CSV (columns f, g)")


@router.command("sinkhorn", SinkhornCommandConfig, "Sinkhorn-scale exp(C) for a cost matrix", _sinkhorn_arguments)
def cmd_sinkhorn(cfg: SinkhornCommandConfig) -> int:
    C = read_matrix_csv(cfg.cost)
    logger.info(f"Loaded {C.shape[0]}×{C.shape[1]} cost from {cfg.cost}")
    start = time.time()
    result = sinkhorn(C, iterations=cfg.iters, tolerance=cfg.tol, max_iterations=cfg.max_iterations)
    logger.info(
        f"Sinkhorn: {result.iterations} iterations, violation row={result.marginal_violation[0]:.2e} "
        f"col={result.marginal_violation[1]:.2e} ({time.time() - start:.3f}s)"
    )
    write_matrix_csv(result.K, cfg.output_path(cfg.out))
    write_csv(pd.DataFrame({"f": result.f, "g": result.g}), cfg.output_path(cfg.potentials))
    return 0


# ─── colsums ─────────────────────────────────────────────────────────────────

class ColsumsCommandConfig(ExperimentConfig):
    kernel: str
    out: str = "colsums.json"


def _colsums_arguments(parser) -> None:
    parser.add_argument("--kernel", help="attention kernel CSV (no header)")
    parser.add_argument("--out", default=None, help="stats JSON")


@router.command("colsums", ColsumsCommandConfig, "Column-sum statistics of an attention kernel", _colsums_arguments)
def cmd_colsums(cfg: ColsumsCommandConfig) -> int:
    stats = column_sum_stats(read_matrix_csv(cfg.kernel))
    logger.info(f"Column sums in [{stats.minimum:.6f}, {stats.maximum:.6f}], mean {stats.mean:.6f}")
    write_json(stats.to_dict(), cfg.output_path(cfg.out))
    return 0
