"""
Report Generator Module
Renders metrics and speed results as table rows, text reports, JSON and CSV
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from harness import FPSReport
from metrics import MetricsReport

TABLE_HEADER = "Method | IoU | Fβ | MAE | BER"
FPS_HEADER = "Method | FPS"


def metrics_row(name: str, report: MetricsReport) -> str:
    """e.g. "GEM-Tiny | 0.770 | 0.865 | 0.032 | 8.21" """
    return report.table_row(name)


def fps_row(name: str, report: FPSReport) -> str:
    return report.table_row(name)


def metrics_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Header plus one row per (method, report), the layout of the comparison tables"""
    return "\n".join([TABLE_HEADER] + [metrics_row(name, report) for name, report in rows])


class GEMReportGenerator:
    def generate_report(self, name: str, report: MetricsReport, config_hash: Optional[str] = None,
                        fps: Optional[FPSReport] = None, output_file: Optional[str] = None) -> str:
        """
        Generate a text report for one evaluated model

        Args:
            name: Method name used in the table row
            report: Dataset metrics
            config_hash: Hash of the training config, if known
            fps: Optional speed benchmark
            output_file: Optional file path to save report

        Returns:
            Formatted report string
        """
        report_lines = []
        report_lines.append("=" * 80)
        report_lines.append("GLASS SEGMENTATION EVALUATION REPORT")
        report_lines.append("=" * 80)
        report_lines.append(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        if config_hash:
            report_lines.append(f"Config: {config_hash}")
        report_lines.append("")

        report_lines.extend(self._generate_summary(report))
        report_lines.append("")

        report_lines.append("TABLE ROW")
        report_lines.append("-" * 40)
        report_lines.append(TABLE_HEADER)
        report_lines.append(metrics_row(name, report))
        report_lines.append("")

        if fps is not None:
            report_lines.append("SPEED")
            report_lines.append("-" * 40)
            report_lines.append(FPS_HEADER)
            report_lines.append(fps_row(name, fps))
            report_lines.append(f"  ± {fps.fps_std:.2f} over {fps.trials} trials at {fps.image_size}px")
            report_lines.append(f"  Hardware: {fps.hardware}")
            report_lines.append("")

        report_lines.extend(self._generate_worst_images(report))

        report_text = "\n".join(report_lines)

        if output_file:
            with open(output_file, "w", encoding="utf-8") as f:
                f.write(report_text)
            print(f"Report saved to: {output_file}")

        return report_text

    def _generate_summary(self, report: MetricsReport) -> List[str]:
        lines = []
        lines.append("SUMMARY STATISTICS")
        lines.append("-" * 40)
        lines.append(f"Images: {report.num_images} ({report.pooling.value} aggregation)")
        lines.append(f"  - IoU:  {report.iou:.4f}")
        lines.append(f"  - Fβ:   {report.f_beta:.4f}")
        lines.append(f"  - MAE:  {report.mae:.4f}")
        lines.append(f"  - BER:  {report.ber:.2f}")
        return lines

    def _generate_worst_images(self, report: MetricsReport, count: int = 5) -> List[str]:
        if not report.per_image:
            return []
        lines = [f"LOWEST IoU IMAGES (of {len(report.per_image)})", "-" * 40]
        ranked = sorted(enumerate(report.per_image), key=lambda item: item[1].iou)[:count]
        for index, m in ranked:
            lines.append(f"  #{index}: IoU {m.iou:.3f}, Fβ {m.f_beta:.3f}, MAE {m.mae:.3f}, BER {m.ber:.2f}")
        return lines


def per_image_frame(report: MetricsReport, sample_ids: Optional[Sequence[str]] = None) -> pd.DataFrame:
    frame = pd.DataFrame([m.dict() for m in report.per_image], columns=["iou", "f_beta", "mae", "ber"])
    if sample_ids is not None:
        frame.insert(0, "sample", list(sample_ids))
    return frame


def save_csv_report(report: MetricsReport, output_file: Union[str, Path],
                    sample_ids: Optional[Sequence[str]] = None) -> Path:
    """Per-image metrics as a delimited table"""
    per_image_frame(report, sample_ids).to_csv(output_file, index=False)
    print(f"Per-image metrics saved to: {output_file}")
    return Path(output_file)


def save_json_report(name: str, report: MetricsReport, output_file: Union[str, Path],
                     extra: Optional[Dict] = None) -> Path:
    """Dataset metrics as a key/value document"""
    document = {"method": name, "pooling": report.pooling.value, "num_images": report.num_images,
                **report.summary(), **(extra or {})}
    with open(output_file, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, ensure_ascii=False)
    print(f"Metrics saved to: {output_file}")
    return Path(output_file)
