"""
Calibration

Sweeps the KL weight sigma2 and the regularization weights lambda1 and lambda2
over a small grid on a phantom dataset. Each combination trains a fresh model,
reconstructs the series from one slice's latents and is scored by motion
alignment first and mean SER second.
"""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .evaluation import (
    alignment_score,
    empirical_kl_summary,
    evaluate_series,
    kl_spread,
    kl_summary,
    reconstruct_series,
    reference_series,
)
from .trainer import LossConfig, build_model, train

logger = logging.getLogger(__name__)

CALIBRATION_COLUMNS = ("sigma2", "lambda1", "lambda2", "alignment", "mean_ser", "final_total", "kl_spread")


@dataclass
class CalibrationPoint:
    """Scores of one trained (sigma2, lambda1, lambda2) combination."""

    sigma2: float
    lambda1: float
    lambda2: float
    alignment: float
    mean_ser: float
    final_total: float
    # max / min per-slice KL; the moment-matched KL in baseline mode
    kl_spread: float

    @property
    def rank_key(self):
        ser = self.mean_ser if math.isfinite(self.mean_ser) else -math.inf
        return (self.alignment, ser)

    def to_dict(self):
        return {name: getattr(self, name) for name in CALIBRATION_COLUMNS}


@dataclass
class CalibrationResult:
    """Every scored combination, in sweep order."""

    points: list = field(default_factory=list)

    @property
    def best(self):
        if not self.points:
            return None
        # max keeps the first of equal keys, so ties go to the earlier combination
        return max(self.points, key=lambda p: p.rank_key)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CALIBRATION_COLUMNS)
            for point in self.points:
                writer.writerow([repr(float(v)) for v in point.to_dict().values()])

    def summary(self):
        best = self.best
        if best is None:
            return "no combinations scored"
        return (
            f"{len(self.points)} combinations; best sigma2={best.sigma2:g} lambda1={best.lambda1:g} "
            f"lambda2={best.lambda2:g} (alignment {best.alignment:.3f}, mean SER {best.mean_ser:.2f} dB)"
        )


def fit_and_score(cfg, dataset, loss, z):
    """
    Train a fresh model with loss and score the series generated from slice z.

    Returns:
        CalibrationPoint.
    """
    if dataset.phantom is None:
        raise ValueError("scoring needs a phantom dataset with known motion phases")
    net, bank = build_model(cfg, dataset)
    report = train(loss, net, bank, dataset, cfg.seed)
    series = reconstruct_series(net, bank, z)
    metrics = evaluate_series(series, reference_series(dataset.phantom, z), metrics=("ser",))
    spread = kl_spread(empirical_kl_summary(bank) if loss.deterministic else kl_summary(bank))
    return CalibrationPoint(
        sigma2=loss.sigma2,
        lambda1=loss.lambda1,
        lambda2=loss.lambda2,
        alignment=alignment_score(series, dataset.phantom, z, grid=cfg.phase_grid),
        mean_ser=metrics.aggregate("ser"),
        final_total=report.final.total if report.final else math.nan,
        kl_spread=spread,
    )


def run_calibration(cfg, dataset, z):
    """
    Train and score every combination of cfg.calibrate_sigma2, cfg.calibrate_lambda1
    and cfg.calibrate_lambda2 for cfg.calibrate_epochs epochs each.

    Returns:
        CalibrationResult.
    """
    base = replace(LossConfig.from_run_config(cfg), epochs=cfg.calibrate_epochs, log_every=0)
    grid = list(itertools.product(cfg.calibrate_sigma2, cfg.calibrate_lambda1, cfg.calibrate_lambda2))
    result = CalibrationResult()
    for i, (sigma2, lambda1, lambda2) in enumerate(grid):
        loss = replace(base, sigma2=sigma2, lambda1=lambda1, lambda2=lambda2)
        point = fit_and_score(cfg, dataset, loss, z)
        result.points.append(point)
        logger.info(
            f"[{i + 1}/{len(grid)}] sigma2={sigma2:g} lambda1={lambda1:g} lambda2={lambda2:g}: "
            f"alignment={point.alignment:.3f} mean_ser={point.mean_ser:.2f}"
        )
    logger.info(result.summary())
    return result
