from typing import Dict, List, Literal, Optional

from pydantic import field_validator

from handlers.router import ExperimentConfig, Router
from services.attention import NormalizationSpec
from services.autodiff import grad_check
from services.numerics import SeededRng
from services.report import generate_training_report
from services.training import SetClassifier, TrainConfig, TrainingResult, synth_dataset, train_toy
from utils.io import write_csv, write_json
from utils.logger import logger

router = Router()


# ─── train ───────────────────────────────────────────────────────────────────

class TrainCommandConfig(ExperimentConfig):
    dataset: Literal["two_gaussians", "ring_vs_blob"] = "ring_vs_blob"
    normalization: Literal["softmax", "sinkhorn", "both"] = "both"
    iterations: int = 3
    n_per_class: int = 200
    points_per_set: int = 16
    test_fraction: float = 0.25
    hidden: int = 16
    epochs: int = 30
    lr: float = 0.2
    batch_size: int = 8
    monitor_size: int = 8
    init_scale: float = 0.01
    value_init: float = -0.5
    xlsx: Optional[str] = None

    def runs(self) -> Dict[str, TrainConfig]:
        specs = {
            "softmax": NormalizationSpec.softmax(),
            "sinkhorn": NormalizationSpec.sinkhorn(self.iterations),
        }
        names = list(specs) if self.normalization == "both" else [self.normalization]
        return {
            name: TrainConfig(
                dataset=self.dataset,
                n_per_class=self.n_per_class,
                points_per_set=self.points_per_set,
                test_fraction=self.test_fraction,
                normalization=specs[name],
                hidden=self.hidden,
                epochs=self.epochs,
                learning_rate=self.lr,
                batch_size=self.batch_size,
                monitor_size=self.monitor_size,
                init_scale=self.init_scale,
                value_init=self.value_init,
                seed=self.seed,
            )
            for name in names
        }


def _train_arguments(parser) -> None:
    parser.add_argument("--dataset", choices=("two_gaussians", "ring_vs_blob"), default=None)
    parser.add_argument("--normalization", choices=("softmax", "sinkhorn", "both"), default=None)
    parser.add_argument("--iterations", type=int, default=None, help="odd Sinkhorn iteration count")
    parser.add_argument("--n-per-class", dest="n_per_class", type=int, default=None)
    parser.add_argument("--points-per-set", dest="points_per_set", type=int, default=None)
    parser.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    parser.add_argument("--hidden", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None, help="SGD learning rate")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--monitor-size", dest="monitor_size", type=int, default=None)
    parser.add_argument("--init-scale", dest="init_scale", type=float, default=None)
    parser.add_argument("--value-init", dest="value_init", type=float, default=None)
    parser.add_argument("--xlsx", default=None, help="also write an Excel report to this file")


@router.command("train", TrainCommandConfig, "Train the toy set classifier", _train_arguments)
def cmd_train(cfg: TrainCommandConfig) -> int:
    results: Dict[str, TrainingResult] = {}
    for name, run_cfg in cfg.runs().items():
        result = train_toy(run_cfg)
        results[name] = result
        write_csv(result.records_frame(), cfg.output_path(f"train_{name}_records.csv"))
        write_csv(result.histogram_frame(), cfg.output_path(f"train_{name}_colsums.csv"))
        write_json(result.parameters_dict(), cfg.output_path(f"train_{name}_params.json"))

    summary = {
        name: {
            "normalization": str(r.config.normalization),
            "final_test_accuracy": r.final.test_accuracy,
            "final_train_accuracy": r.final.train_accuracy,
            "final_train_loss": r.final.train_loss,
            "baseline_accuracy": r.baseline_accuracy,
            "final_column_sum_spread": r.final.column_sums.spread,
        }
        for name, r in results.items()
    }
    write_json(summary, cfg.output_path("train_summary.json"))

    if "softmax" in results and "sinkhorn" in results:
        soft, sink = results["softmax"].mean_epoch_seconds(), results["sinkhorn"].mean_epoch_seconds()
        if soft > 0:
            logger.info(f"Sinkhorn / SoftMax epoch time: {sink / soft:.2f}")
    if cfg.xlsx:
        generate_training_report(results, cfg.output_path(cfg.xlsx))
    return 0


# ─── gradcheck ───────────────────────────────────────────────────────────────

class GradcheckCommandConfig(ExperimentConfig):
    iterations: List[int] = [1, 3, 21]
    points_per_set: int = 8
    hidden: int = 8
    init_scale: float = 0.5
    tolerance: Optional[float] = None
    coordinates: Optional[int] = None
    step: Optional[float] = None
    out: str = "gradcheck.json"

    @field_validator("iterations", mode="before")
    @classmethod
    def split_iterations(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return value


def _gradcheck_arguments(parser) -> None:
    parser.add_argument("--iterations", default=None, help="comma-separated odd iteration counts")
    parser.add_argument("--points-per-set", dest="points_per_set", type=int, default=None)
    parser.add_argument("--hidden", type=int, default=None)
    parser.add_argument("--init-scale", dest="init_scale", type=float, default=None)
    parser.add_argument("--tolerance", type=float, default=None)
    parser.add_argument("--coordinates", type=int, default=None, help="checked entries per parameter")
    parser.add_argument("--step", type=float, default=None, help="finite-difference step")
    parser.add_argument("--out", default=None, help="report JSON")


@router.command(
    "gradcheck", GradcheckCommandConfig, "Backward pass of the classifier versus finite differences",
    _gradcheck_arguments,
)
def cmd_gradcheck(cfg: GradcheckCommandConfig) -> int:
    data = synth_dataset("ring_vs_blob", 1, cfg.points_per_set, cfg.seed)
    inputs = {"X": data.X[0], "label": data.y[0]}
    reports = {}
    for k in cfg.iterations:
        model = SetClassifier(
            cfg.points_per_set,
            hidden=cfg.hidden,
            normalization=NormalizationSpec.sinkhorn(k),
            rng=SeededRng(cfg.seed),
            init_scale=cfg.init_scale,
        )
        report = grad_check(
            model.graph, inputs, tolerance=cfg.tolerance, coordinates=cfg.coordinates,
            step=cfg.step, seed=cfg.seed,
        )
        reports[str(k)] = report.to_dict()

    passed = all(r["passed"] for r in reports.values())
    write_json(
        {
            "max_rel_error": max(r["max_rel_error"] for r in reports.values()),
            "passed": passed,
            "iterations": reports,
        },
        cfg.output_path(cfg.out),
    )
    if not passed:
        logger.error(f"Gradient check failed for iterations {[k for k, r in reports.items() if not r['passed']]}")
        return 1
    return 0
