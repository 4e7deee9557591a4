"""
Visualizer Module
Mask overlays, t-SNE scatter plots and loss curves with matplotlib
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class GEMVisualizer:
    def __init__(self):
        self.colors = {
            "glass": "#00BFFF",
            "loss": "#FF0000",
            "default": "#808080",
        }
        self.group_colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]

    def overlay(self, image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
        """Blend the glass colour into an RGB uint8 image wherever mask is set"""
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        color = np.array(matplotlib.colors.to_rgb(self.colors["glass"])) * 255.0
        blended = image.copy()
        blended[mask] = (1 - alpha) * image[mask] + alpha * color
        return np.clip(np.rint(blended), 0, 255).astype(np.uint8)

    def save_overlay(self, image: np.ndarray, mask: np.ndarray, output_file: Union[str, Path],
                     title: Optional[str] = None) -> Path:
        fig, ax = plt.subplots(1, 1, figsize=(8, 8))
        ax.imshow(self.overlay(image, mask))
        ax.set_axis_off()
        ax.set_title(title or f"Glass: {np.asarray(mask).astype(bool).mean() * 100:.1f}% of pixels")
        plt.tight_layout()
        plt.savefig(output_file, dpi=150, bbox_inches="tight")
        plt.close(fig)
        print(f"Overlay saved to: {output_file}")
        return Path(output_file)

    def plot_tsne(self, points: np.ndarray, labels: Sequence[str], output_file: Union[str, Path],
                  title: str = "Feature distribution (t-SNE)") -> Path:
        fig, ax = plt.subplots(1, 1, figsize=(10, 10))
        labels = list(labels)
        for i, group in enumerate(dict.fromkeys(labels)):
            idx = [j for j, label in enumerate(labels) if label == group]
            ax.scatter(points[idx, 0], points[idx, 1], s=8, alpha=0.7,
                       color=self.group_colors[i % len(self.group_colors)], label=group)
        ax.set_title(title)
        ax.legend(loc="upper right")
        ax.grid(True, alpha=0.3)
        plt.tight_layout()
        plt.savefig(output_file, dpi=150, bbox_inches="tight")
        plt.close(fig)
        print(f"t-SNE plot saved to: {output_file}")
        return Path(output_file)

    def plot_loss_curve(self, loss_log: List[Dict[str, float]], output_file: Union[str, Path],
                        terms: Sequence[str] = ("cls", "ce", "dice", "l1", "giou")) -> Path:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(15, 6))
        steps = [r["step"] for r in loss_log]

        ax1.plot(steps, [r["loss"] for r in loss_log], color=self.colors["loss"])
        ax1.set_title("Total Loss")
        ax1.set_xlabel("Step")
        ax1.grid(True, alpha=0.3)

        for term in terms:
            if loss_log and term in loss_log[0]:
                ax2.plot(steps, [r[term] for r in loss_log], label=term)
        ax2.set_title("Weighted Loss Terms")
        ax2.set_xlabel("Step")
        ax2.legend()
        ax2.grid(True, alpha=0.3)

        plt.tight_layout()
        plt.savefig(output_file, dpi=150, bbox_inches="tight")
        plt.close(fig)
        print(f"Loss curve saved to: {output_file}")
        return Path(output_file)


def plot_tsne(points: np.ndarray, labels: Sequence[str], output_file: Union[str, Path]) -> Path:
    return GEMVisualizer().plot_tsne(points, labels, output_file)
