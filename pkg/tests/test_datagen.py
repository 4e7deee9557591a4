import json
import threading
from pathlib import Path

import numpy as np
import pytest

from api_models import EncoderConfig, Provenance, ScaleTag
import datagen
from conftest import PROMPTS_PATH, rectangle_mask, write_masks
from datagen import (
    NUM_TEMPLATES, SCALE_COUNTS, DatasetManifest, EncoderEmbedder, GenerationBackend, MaskRecord,
    ProceduralBackend, PromptBank, ThumbnailEmbedder, build_jobs, compare_distributions, job_seed,
    load_image, load_mask, load_mask_set, manifest_from_directories, reduce_embeddings, run_generation,
    save_image, save_mask, validate_pair,
)
from errors import BackendTimeout, ConfigError, DataError, LeakageError, ParameterError


def records(count: int, split: str = "train"):
    return [MaskRecord(mask_id=f"m{i:05d}", path=f"/masks/m{i:05d}.png", split=split) for i in range(count)]


# ---------------------------------------------------------------------------
# prompts and jobs
# ---------------------------------------------------------------------------

def test_prompt_bank_file(prompt_bank):
    assert len(prompt_bank) == NUM_TEMPLATES
    assert prompt_bank.prompt(0) == "a photo of a clean transparent glasses"
    assert all("<object>" not in prompt_bank.prompt(i) for i in range(NUM_TEMPLATES))


def test_prompt_bank_validation():
    templates = json.loads(PROMPTS_PATH.read_text())["templates"]
    with pytest.raises(ConfigError):
        PromptBank(templates[:-1])
    with pytest.raises(ConfigError):
        PromptBank(templates[:-1] + ["<object> next to <object>"])
    with pytest.raises(ConfigError):
        PromptBank(templates[:-1] + ["no placeholder"])


def test_one_x_build_uses_every_mask_once(prompt_bank):
    masks = records(3912)
    jobs = build_jobs(masks, prompt_bank, ScaleTag.X1)
    assert len(jobs) == 3912
    assert sorted(job.mask_id for job in jobs) == [m.mask_id for m in masks]
    assert {job.replica for job in jobs} == {0}
    assert {job.template_index for job in jobs} == set(range(NUM_TEMPLATES))


@pytest.mark.parametrize("scale", [ScaleTag.X5, ScaleTag.X10, ScaleTag.X20])
def test_larger_scales_use_fixed_counts(prompt_bank, scale):
    jobs = build_jobs(records(3912), prompt_bank, scale)
    assert len(jobs) == SCALE_COUNTS[scale]
    assert SCALE_COUNTS[scale] == {ScaleTag.X5: 23467, ScaleTag.X10: 46933, ScaleTag.X20: 93865}[scale]
    assert len({job.job_id for job in jobs}) == len(jobs)


def test_masks_cycle_round_robin(prompt_bank):
    masks = [MaskRecord("a", "/a.png"), MaskRecord("b", "/b.png")]
    jobs = build_jobs(masks, prompt_bank, count=5)
    assert [job.mask_id for job in jobs] == ["a", "b", "a", "b", "a"]
    assert [job.replica for job in jobs] == [0, 0, 1, 1, 2]
    assert jobs[2].seed == job_seed("a", 1)


def test_prompt_follows_seed(prompt_bank):
    for job in build_jobs(records(50), prompt_bank, count=50):
        assert job.template_index == job.seed % NUM_TEMPLATES
        assert job.prompt == prompt_bank.prompt(job.template_index)
        assert 0 <= job.seed < 2 ** 64


def test_single_prompt_mode(prompt_bank):
    jobs = build_jobs(records(30), prompt_bank, count=30, single_prompt=True)
    assert {job.template_index for job in jobs} == {0}


def test_seeds_are_stable():
    assert job_seed("mask_01", 3) == job_seed("mask_01", 3)
    assert job_seed("mask_01", 3) != job_seed("mask_01", 4)


def test_validation_masks_are_rejected(prompt_bank):
    with pytest.raises(LeakageError):
        build_jobs(records(3) + records(1, split="val"), prompt_bank, count=4)
    with pytest.raises(LeakageError):
        build_jobs(records(3), prompt_bank, count=3, validation_ids=["m00001"])
    assert issubclass(LeakageError, DataError)


def test_empty_mask_set(prompt_bank):
    with pytest.raises(DataError):
        build_jobs([], prompt_bank, count=1)


# ---------------------------------------------------------------------------
# backend and validation
# ---------------------------------------------------------------------------

def test_stub_backend_is_deterministic():
    backend = ProceduralBackend()
    mask = rectangle_mask(64, 1)
    first = backend.generate(mask, "a photo of the transparent glasses", 123, 64)
    second = backend.generate(mask, "a photo of the transparent glasses", 123, 64)
    assert first.dtype == np.uint8
    assert np.array_equal(first, second)
    assert not np.array_equal(first, backend.generate(mask, "a photo of the transparent glasses", 124, 64))
    assert not np.array_equal(first, backend.generate(mask, "a dark photo of the transparent glasses", 123, 64))


def test_stub_backend_honours_target_size():
    image = ProceduralBackend().generate(rectangle_mask(64, 0), "prompt", 1, 384)
    assert image.shape == (384, 384, 3)


def test_valid_pair_has_no_violations():
    mask = np.zeros((384, 384), dtype=np.uint8)
    mask[:, : int(384 * 0.2)] = 1
    assert validate_pair(np.zeros((384, 384, 3), dtype=np.uint8), mask) == []


def test_pair_violations():
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    soft = np.zeros((8, 8))
    soft[:2] = 0.5
    assert any(v.startswith("non-binary") for v in validate_pair(image, soft))
    assert any(v.startswith("foreground fraction") for v in validate_pair(image, np.ones((8, 8))))
    assert any(v.startswith("foreground fraction") for v in validate_pair(image, np.zeros((8, 8))))
    assert any(v.startswith("dimension mismatch") for v in validate_pair(image, rectangle_mask(16, 0)))


class FlakyBackend(GenerationBackend):
    """Stub that fails some prompts a fixed number of times"""

    model_version = "flaky-1"

    def __init__(self, failures_by_seed):
        self.remaining = dict(failures_by_seed)
        self.stub = ProceduralBackend()

    def generate(self, mask, prompt, seed, size):
        if self.remaining.get(seed, 0) > 0:
            self.remaining[seed] -= 1
            raise BackendTimeout(f"seed {seed} timed out")
        return self.stub.generate(mask, prompt, seed, size)


def test_run_generation_records_failures(tmp_path, mask_dir, prompt_bank):
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, count=10, target_size=32)
    backend = FlakyBackend({jobs[3].seed: 100, jobs[5].seed: 2})
    result = run_generation(jobs, backend, tmp_path / "out", scale_tag=ScaleTag.X1, parallelism=3,
                            retries=2, backoff=0.0)
    assert len(result.entries) == 9
    assert [f.job_id for f in result.failures] == [jobs[3].job_id]

    manifest = DatasetManifest.read(result.manifest_path)
    assert manifest.count == 9 and len(manifest.failures) == 1
    assert manifest.model_version == "flaky-1" and manifest.scale_tag == ScaleTag.X1
    assert manifest.validate_files() == []
    first = manifest.entries[0]
    assert first.provenance == Provenance.SYNTHETIC
    assert (first.prompt, first.seed) == (jobs[0].prompt, jobs[0].seed)
    assert load_image(manifest.resolve(first.image_path)).shape == (32, 32, 3)
    assert set(np.unique(load_mask(manifest.resolve(first.mask_path))).tolist()) <= {0, 1}


class CountingBackend(ProceduralBackend):
    def __init__(self):
        self.calls = 0
        self.lock = threading.Lock()

    def generate(self, mask, prompt, seed, size):
        with self.lock:
            self.calls += 1
        return super().generate(mask, prompt, seed, size)


def test_pairs_are_written_while_jobs_are_still_running(tmp_path, mask_dir, prompt_bank, monkeypatch):
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, count=40, target_size=16)
    backend = CountingBackend()
    calls_at_write = []
    original = datagen.save_image

    def spy(image, path):
        calls_at_write.append(backend.calls)
        return original(image, path)

    monkeypatch.setattr(datagen, "save_image", spy)
    result = run_generation(jobs, backend, tmp_path / "out", parallelism=2, retries=0)
    assert result.manifest.count == 40
    assert backend.calls == 40
    # at most 2 * parallelism jobs are in flight when the first pair lands on disk
    assert calls_at_write[0] <= 4
    assert not (tmp_path / "out" / "manifest.jsonl.partial").exists()


class BrokenBackend(ProceduralBackend):
    def __init__(self, bad_seed):
        self.bad_seed = bad_seed

    def generate(self, mask, prompt, seed, size):
        if seed == self.bad_seed:
            raise RuntimeError("decoder crashed")
        return super().generate(mask, prompt, seed, size)


def test_unexpected_job_errors_become_failure_records(tmp_path, mask_dir, prompt_bank):
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, count=6, target_size=16)
    result = run_generation(jobs, BrokenBackend(jobs[2].seed), tmp_path / "out", parallelism=2, retries=3,
                            backoff=0.0)
    assert result.manifest.count == 5
    assert [f.job_id for f in result.failures] == [jobs[2].job_id]
    assert "RuntimeError: decoder crashed" in result.failures[0].reason


class Interrupted(BaseException):
    pass


def test_interrupted_run_keeps_the_partial_manifest(tmp_path, mask_dir, prompt_bank, monkeypatch):
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, count=6, target_size=16)
    written = []
    original = datagen.save_mask

    def save_then_stop(mask, path):
        if len(written) == 2:
            raise Interrupted
        written.append(path)
        return original(mask, path)

    monkeypatch.setattr(datagen, "save_mask", save_then_stop)
    with pytest.raises(Interrupted):
        run_generation(jobs, ProceduralBackend(), tmp_path / "out", parallelism=1, retries=0)
    out = tmp_path / "out"
    assert not (out / "manifest.jsonl").exists()
    lines = [json.loads(l) for l in (out / "manifest.jsonl.partial").read_text().splitlines()]
    assert len(lines) == 2 and all(l["type"] == "entry" for l in lines)
    assert all((out / l["image_path"]).exists() for l in lines)


def test_manifest_layout_is_header_then_records(tmp_path, stub_manifest):
    manifest = stub_manifest(count=4)
    lines = (manifest.root / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["type"] == "header" and header["count"] == 4 and header["manifest_version"] == 1
    entry = json.loads(lines[1])
    assert list(entry) == ["type", "image_path", "mask_path", "provenance", "prompt", "seed"]


def test_generation_runs_are_reproducible(tmp_path, mask_dir, prompt_bank):
    jobs = build_jobs(load_mask_set(mask_dir), prompt_bank, count=4, target_size=32)
    first = run_generation(jobs, ProceduralBackend(), tmp_path / "a", parallelism=4, retries=0)
    second = run_generation(jobs, ProceduralBackend(), tmp_path / "b", parallelism=1, retries=0)
    for a, b in zip(first.entries, second.entries):
        assert np.array_equal(load_image(first.manifest.resolve(a.image_path)),
                              load_image(second.manifest.resolve(b.image_path)))


def test_malformed_manifest(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"type": "header", "manifest_version": 1}\n{"type": "entry", "image_path": "x"}\n')
    with pytest.raises(DataError):
        DatasetManifest.read(path)
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "absent.jsonl")


def test_manifest_from_directories_pairs_by_stem(tmp_path):
    write_masks(tmp_path / "masks", [rectangle_mask(16, i) for i in range(3)])
    (tmp_path / "images").mkdir()
    for i in range(2):
        save_image(np.full((16, 16, 3), 40 * i, dtype=np.uint8), tmp_path / "images" / f"mask_{i:02d}.png")
    manifest = manifest_from_directories(tmp_path / "images", tmp_path / "masks")
    assert manifest.count == 2
    assert manifest.entries[0].provenance == Provenance.REAL
    assert manifest.validate_files() == []


# ---------------------------------------------------------------------------
# distribution comparison
# ---------------------------------------------------------------------------

def constant_manifest(root: Path, value: int, count: int, seed: int) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for i in range(count):
        noise = rng.integers(-3, 4, size=(16, 16, 3))
        save_image(np.clip(value + noise, 0, 255).astype(np.uint8), root / "images" / f"{i:03d}.png")
        save_mask(rectangle_mask(16, i), root / "masks" / f"{i:03d}.png")
    return manifest_from_directories(root / "images", root / "masks")


def test_too_few_points_for_perplexity():
    with pytest.raises(ParameterError):
        reduce_embeddings(np.random.default_rng(0).random((10, 4)), perplexity=30)


def test_distinct_datasets_form_separate_clusters(tmp_path):
    dark = constant_manifest(tmp_path / "dark", 30, 20, seed=0)
    bright = constant_manifest(tmp_path / "bright", 220, 20, seed=1)
    result = compare_distributions([dark, bright], ThumbnailEmbedder(size=8), labels=["dark", "bright"],
                                   perplexity=5, output_dir=tmp_path / "tsne")
    a, b = result.group("dark"), result.group("bright")
    intra = np.mean([np.linalg.norm(a - a.mean(0), axis=1).mean(), np.linalg.norm(b - b.mean(0), axis=1).mean()])
    inter = np.linalg.norm(a.mean(0) - b.mean(0))
    assert inter > intra
    assert result.plot_path.exists()
    assert json.loads(result.points_path.read_text())["labels"].count("dark") == 20


def test_identical_datasets_spread_alike(tmp_path):
    same = constant_manifest(tmp_path / "same", 100, 15, seed=2)
    result = compare_distributions([same, same], ThumbnailEmbedder(size=8), labels=["a", "b"], perplexity=5)

    def spread(points):
        diffs = points[:, None, :] - points[None, :, :]
        return np.sqrt((diffs ** 2).sum(-1)).mean()

    assert spread(result.group("a")) == pytest.approx(spread(result.group("b")), rel=0.1)


def test_comparison_needs_two_manifests(tmp_path):
    only = constant_manifest(tmp_path / "only", 10, 3, seed=0)
    with pytest.raises(ParameterError):
        compare_distributions([only], ThumbnailEmbedder())


def test_encoder_embedder_pools_to_one_vector_per_image():
    cfg = EncoderConfig(patch_size=8, embed_dim=16, depth=1, num_heads=2, image_size=32)
    images = [np.full((20, 24, 3), v, dtype=np.uint8) for v in (0, 128, 255)]
    features = EncoderEmbedder(cfg).embed(images)
    assert features.shape == (3, 16)
    assert not np.allclose(features[0], features[2])


@pytest.mark.slow
def test_one_x_run_yields_one_validated_pair_per_mask(tmp_path, prompt_bank):
    masks = write_masks(tmp_path / "masks", [rectangle_mask(16, i) for i in range(3912)])
    jobs = build_jobs(load_mask_set(masks), prompt_bank, ScaleTag.X1, target_size=16)
    result = run_generation(jobs, ProceduralBackend(), tmp_path / "sgsd_1x", scale_tag=ScaleTag.X1,
                            parallelism=8, retries=0)
    assert result.manifest.count == 3912 and result.failures == []
    assert len({e.seed for e in result.entries}) == 3912
