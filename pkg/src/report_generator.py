"""
Module for writing run artifacts: metric CSVs, experiment records and
difference-map reports.
"""

import csv
import json
import logging
import math
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from src.image_io import write_ppm
from src.metrics import to_gray

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

TRAINING_LOG_FIELDS = ["step", "stage", "loss", "val_psnr_db", "val_ssim"]
SAMPLE_METRIC_FIELDS = ["sample", "psnr_db", "ssim"]
LENGTH_SWEEP_FIELDS = ["length", "psnr_db", "ssim"]
BENCH_FIELDS = ["kernel", "length", "median_us"]


def format_value(value: Any) -> str:
    """Fixed formatting so reruns produce byte-identical files."""
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6f}"
    return str(value)


class ReportGenerator:
    """Class for writing reports of training, evaluation and inference runs."""

    def __init__(self, output_dir: str = "reports"):
        """
        Initialize the report generator.

        Args:
            output_dir: Directory to save generated reports
        """
        self.output_dir = output_dir

        if not os.path.exists(self.output_dir):
            os.makedirs(self.output_dir)
            logger.info(f"Created report directory: {self.output_dir}")

    def _path(self, filename: str) -> str:
        return filename if os.path.isabs(filename) else os.path.join(self.output_dir, filename)

    def write_csv(self, filename: str, header: Sequence[str], rows: List[Dict[str, Any]],
                  footer: Optional[str] = None) -> str:
        """
        Write rows as CSV with the given header.

        Args:
            filename: File name inside the output directory (or an absolute path)
            header: Column names
            rows: Dictionaries keyed by column name
            footer: Optional trailing comment line (written as "# footer")

        Returns:
            Path to the written file
        """
        path = self._path(filename)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(row.get(column)) for column in header])
            if footer:
                f.write(f"# {footer}\n")
        logger.info(f"Wrote {len(rows)} rows to {path}")
        return path

    def write_training_log(self, rows: List[Dict[str, Any]], filename: str = "metrics.csv") -> str:
        return self.write_csv(filename, TRAINING_LOG_FIELDS, rows)

    def write_sample_metrics(self, rows: List[Dict[str, Any]], filename: str = "sample_metrics.csv") -> str:
        return self.write_csv(filename, SAMPLE_METRIC_FIELDS, rows)

    def write_length_sweep(self, rows: List[Dict[str, Any]], filename: str = "eval.csv") -> str:
        return self.write_csv(filename, LENGTH_SWEEP_FIELDS, rows)

    def write_bench(self, rows: List[Dict[str, Any]], filename: str = "bench.csv", noisy: bool = False) -> str:
        return self.write_csv(filename, BENCH_FIELDS, rows, footer="noisy: single repetition" if noisy else None)

    def write_experiment_record(self, record: Dict[str, Any], filename: str = "experiment.json") -> str:
        path = self._path(filename)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
        logger.info(f"Experiment record saved to {path}")
        return path

    def generate_difference_report(self, prediction: np.ndarray, reference: np.ndarray, keyframe: np.ndarray,
                                   label: str, reference_label: str, stem: str = "difference") -> Dict[str, Any]:
        """
        Compare two predictions and locate where they differ.

        The difference energy is split between the top-quartile high-frequency
        region of the keyframe (squared Laplacian of its grayscale, upsampled to
        the prediction grid) and the rest of the image.

        Args:
            prediction: (3, 4H, 4W) image
            reference: (3, 4H, 4W) image it is compared against
            keyframe: (c, H, W) LR keyframe
            label: Name of ``prediction`` in the report
            reference_label: Name of ``reference`` in the report
            stem: File stem for the written map and report

        Returns:
            Dictionary with the statistics and the written paths
        """
        diff = np.asarray(prediction, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
        energy = to_gray(diff * diff)
        scale = energy.shape[0] // keyframe.shape[-2]
        detail = ndimage.laplace(to_gray(keyframe)) ** 2
        detail = np.kron(detail, np.ones((scale, scale)))
        mask = detail >= np.quantile(detail, 0.75)
        total = float(energy.sum())
        fraction = float(energy[mask].sum() / total) if total > 0 else 0.0
        stats = {
            "compared": f"{label} vs {reference_label}",
            "difference_energy": total,
            "high_frequency_fraction": fraction,
            "high_frequency_area": float(mask.mean()),
        }

        peak = float(np.abs(diff).max())
        magnitude = np.abs(diff) / peak if peak > 0 else np.zeros_like(diff)
        stats["map_path"] = write_ppm(self._path(f"{stem}.ppm"), magnitude)
        report_path = self._path(f"{stem}.txt")
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(f"Difference map: {stats['compared']}\n")
            f.write(f"total squared difference: {total:.6e}\n")
            f.write(f"share in top-quartile high-frequency region: {fraction:.4f} "
                    f"(region covers {stats['high_frequency_area']:.4f} of the image)\n")
            verdict = "concentrated in" if fraction > stats["high_frequency_area"] else "not concentrated in"
            f.write(f"difference energy is {verdict} high-frequency areas\n")
        stats["report_path"] = report_path
        logger.info(f"Difference report ({stats['compared']}): {fraction:.3f} of energy in HF region")
        return stats
