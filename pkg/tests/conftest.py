import numpy as np
import pytest
import torch

from dualavse import harness
from dualavse.config import CorpusConfig, ModelConfig, StftConfig, TrainSchedule
from dualavse.datagen import Corpus, build_corpus

harness.set_determinism()

# Tiny but complete corpus: every split, speaker and noise kind present.
TINY_CORPUS = CorpusConfig(n_train=8, n_val=4, n_test=4, n_speakers=6, speaker_split=(4, 1, 1))
SMALL_MODEL = ModelConfig(base_channels=16, backbone_width=0.5)
SHORT_SCHED = TrainSchedule(stage_steps=(3, 2, 2), batch_size=2, val_every=3, val_clips=4)

# Gradient-check scale: F=17 (fft 32), T=16, N=4, 8x8 frames.
MICRO_STFT = StftConfig(win_len=32, hop=8, fft_size=32)
MICRO_MODEL = ModelConfig(base_channels=8, n_frames=4, n_bins=17, n_spec_frames=16, image_size=8)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(TINY_CORPUS, out, overwrite=True)
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    return Corpus(tiny_corpus_dir / "manifest.json")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# One line per acceptance criterion, filled by tests/test_acceptance.py and
# repeated at the end of the run so it survives output capture.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
