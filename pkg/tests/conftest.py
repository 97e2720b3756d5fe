"""Shared fixtures: the desk-scale photo corpus and a model trained on it.

Training is deterministic, so setting PATCHLIKELY_TEST_CACHE to a directory
reuses the corpus and checkpoint across test runs; without it everything is
rebuilt in a session tmp dir (a few minutes of CPU).
"""

import os
import sys
from pathlib import Path

import pytest

from patchlikely import data_io
from patchlikely.toydata import reference_photo, save_photo_corpus
from patchlikely.training import (PatchDataset, TrainConfig, load_checkpoint,
                                  train)

CORPUS_SEED = 0
CORPUS_COUNT = 120
CORPUS_CROP = 96

CORPUS_TRAIN_CONFIG = dict(
    batch_size=48, steps=1500, learning_rate=7e-4, warmup_steps=100,
    checkpoint_every=500, seed=11, patch_size=16, flow_steps=8,
    hidden_width=48)


@pytest.fixture(scope="session")
def work_dir(tmp_path_factory) -> Path:
    env = os.environ.get("PATCHLIKELY_TEST_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("shared")


@pytest.fixture(scope="session")
def corpus_dir(work_dir) -> Path:
    directory = work_dir / "corpus"
    marker = directory / f"crop_{CORPUS_COUNT - 1:04d}.png"
    if not marker.exists():
        print("\n[fixtures] building photo corpus ...", file=sys.stderr)
        save_photo_corpus(directory, count=CORPUS_COUNT, size=CORPUS_CROP,
                          seed=CORPUS_SEED)
    return directory


@pytest.fixture(scope="session")
def corpus_checkpoint_path(work_dir, corpus_dir) -> Path:
    path = work_dir / "corpus_model.plfw"
    if not path.exists():
        cfg = TrainConfig(**CORPUS_TRAIN_CONFIG)
        dataset = PatchDataset(corpus_dir, cfg.patch_size)
        print(f"\n[fixtures] training corpus model ({cfg.steps} steps) ...",
              file=sys.stderr)

        def log_fn(step, metrics):
            if step % 250 == 0:
                print(f"[fixtures] step {step} nll {metrics['nll']:.1f}",
                      file=sys.stderr)

        train(cfg, dataset, out_path=path, log_fn=log_fn)
    return path


@pytest.fixture(scope="session")
def corpus_model(corpus_checkpoint_path):
    return load_checkpoint(corpus_checkpoint_path).params


@pytest.fixture(scope="session")
def camera_image_path(work_dir) -> Path:
    path = work_dir / "camera.png"
    if not path.exists():
        data_io.save_image(reference_photo("camera"), path)
    return path


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance pass/fail lines past output capture."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
