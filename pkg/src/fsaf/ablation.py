"""Branch / selection ablation on a synthetic dataset."""
from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainConfig
from .evaluation import EvalReport, evaluate
from .inference import DetectOptions, detect_batch
from .train import Trainer

log = logging.getLogger(__name__)

# name -> (branches, selection)
VARIANTS = {
    "ab-only": ("ab", "online"),
    "af-heuristic": ("af", "heuristic"),
    "af-online": ("af", "online"),
    "joint": ("both", "online"),
}


def train_and_evaluate(config: TrainConfig, train_set, test_set, log_path=None,
                       log_every: int = 0):
    """Train one model from scratch and score it on ``test_set``.

    Returns ``(params, report)``.
    """
    trainer = Trainer(config, train_set)
    trainer.train(log_path=log_path, log_every=log_every)
    images, boxes = test_set.batch(range(len(test_set)), dtype=np.dtype(config.dtype))
    dets = detect_batch(trainer.params, images, DetectOptions(max_detections=100))
    report = evaluate(dict(enumerate(dets)), dict(enumerate(boxes)), config.num_classes)
    return trainer.params, report


@dataclass
class AblationResult:
    seeds: tuple
    reports: dict = field(default_factory=dict)  # variant -> [EvalReport per seed]

    def median(self, variant: str, metric: str = "AP") -> float:
        return statistics.median(getattr(r, metric) for r in self.reports[variant])

    def table(self) -> str:
        cols = ["AP", "AP50", "AP75"]
        lines = [f"{'variant':<14}" + "".join(f"{'seed ' + str(s):>9}" for s in self.seeds)
                 + "".join(f"{'med ' + c:>10}" for c in cols)]
        for name, reports in self.reports.items():
            per_seed = "".join(f"{100 * r.AP:9.2f}" for r in reports)
            med = "".join(f"{100 * self.median(name, c):10.2f}" for c in cols)
            lines.append(f"{name:<14}{per_seed}{med}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds),
                "reports": {k: [r.to_dict() for r in v] for k, v in self.reports.items()},
                "median_AP": {k: self.median(k) for k in self.reports}}


def run_ablation(base: TrainConfig, train_set, test_set, seeds=(0, 1, 2),
                 variants=tuple(VARIANTS)) -> AblationResult:
    """Train every variant once per seed; all other settings come from ``base``."""
    result = AblationResult(tuple(seeds))
    for name in variants:
        branches, selection = VARIANTS[name]
        reports: list[EvalReport] = []
        for seed in seeds:
            config = replace(base, branches=branches, selection=selection, seed=int(seed))
            _, report = train_and_evaluate(config, train_set, test_set)
            log.info("%s seed %d: AP %.4f AP50 %.4f", name, seed, report.AP, report.AP50)
            reports.append(report)
        result.reports[name] = reports
    return result
