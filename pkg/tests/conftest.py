"""
Shared fixtures: micro-scale configs and procedurally generated glass data on tmp_path
"""

from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np
import pytest

from api_models import ModelConfig, ScaleTag, TrainConfig
from config import load_config
from datagen import (
    DatasetManifest, ProceduralBackend, PromptBank, build_jobs, load_mask_set, run_generation, save_mask,
)
from model import preset_config

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / "configs"
PROMPTS_PATH = CONFIG_DIR / "prompts.json"


def rectangle_mask(size: int, index: int) -> np.ndarray:
    """A half-size square at one of four offsets; 25% foreground"""
    q = size // 4
    mask = np.zeros((size, size), dtype=np.uint8)
    y0 = (index % 2) * q
    x0 = ((index // 2) % 2) * q
    mask[y0:y0 + 2 * q, x0:x0 + 2 * q] = 1
    return mask


def write_masks(directory: Path, masks: List[np.ndarray]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(masks):
        save_mask(mask, directory / f"mask_{i:02d}.png")
    return directory


@pytest.fixture
def prompt_bank() -> PromptBank:
    return PromptBank.from_file(PROMPTS_PATH)


@pytest.fixture
def micro_model_config() -> ModelConfig:
    return ModelConfig.parse_obj(preset_config("micro"))


@pytest.fixture
def micro_train_config() -> Callable[..., TrainConfig]:
    """Factory: micro TrainConfig, optionally with config files and dotted overrides"""

    def make(*overrides: str, paths: Sequence[Path] = ()) -> TrainConfig:
        base = {
            "model": preset_config("micro"),
            "batch_size": 2,
            "epochs_pretrain": 10,
            "epochs_finetune": 10,
            "num_workers": 0,
            "log_every": 1,
            "augment": {"enabled": False},
        }
        return load_config(paths=[str(p) for p in paths], overrides=list(overrides), base=base)

    return make


@pytest.fixture
def mask_dir(tmp_path) -> Path:
    return write_masks(tmp_path / "masks", [rectangle_mask(64, i) for i in range(4)])


@pytest.fixture
def stub_manifest(tmp_path, mask_dir, prompt_bank) -> Callable[..., DatasetManifest]:
    """Factory: run the procedural backend over rectangle masks and return the manifest"""

    def make(count: int = 4, size: int = 64, name: str = "stub") -> DatasetManifest:
        jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, ScaleTag.X1, count=count, target_size=size)
        result = run_generation(jobs, ProceduralBackend(), tmp_path / name, scale_tag=ScaleTag.X1,
                                parallelism=2, retries=0, backoff=0.0)
        return result.manifest

    return make
