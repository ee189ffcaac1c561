import numpy as np
import pytest

from chunkcnn.audio import SynthSpec, read_wav, synth_corpus
from chunkcnn.dsp import FeatureConfig, chunk, compute_norm_stats, mel_spectrogram, per_feature_normalize
from chunkcnn.nn import Conv2D, Dense, Flatten, MaxPool2D, SoftmaxOutput, assemble
from chunkcnn.sad import align_labels
from chunkcnn.segments import read_segments


def small_model(seed=0, geometry=(12, 13), n_classes=3, pool=(3, 3)):
    """Every layer kind at a size a finite-difference check can afford."""
    layers = [Conv2D(3, (3, 3)), MaxPool2D(pool), Conv2D(2, (2, 2)), Flatten(), Dense(5), SoftmaxOutput(n_classes)]
    return assemble("sad", layers, geometry, [f"c{i}" for i in range(n_classes)], seed=seed)


def make_toy_sad_set(tmp_dir, n_chunks=50, seed=7):
    """``n_chunks`` normalized SAD chunks and labels cut from one synthetic file."""
    spec = SynthSpec(tasks=("sad",), sad_files=(1, 0, 0), sad_file_seconds=12.0, seed=seed)
    synth_corpus(spec, tmp_dir)
    cfg = FeatureConfig.sad()
    audio = read_wav(tmp_dir / "sad" / "train" / "sad_train_000.wav")
    batch = chunk(mel_spectrogram(audio, cfg), cfg)
    labels = align_labels(read_segments(tmp_dir / "sad_train.tsv")["sad_train_000"], len(batch), cfg.shift_s)
    batch = per_feature_normalize(batch, compute_norm_stats(batch.chunks))
    return batch.chunks[:n_chunks], labels[:n_chunks]


@pytest.fixture(scope="session")
def toy_sad_set(tmp_path_factory):
    return make_toy_sad_set(tmp_path_factory.mktemp("toy"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Acceptance bookkeeping: one PASS/FAIL line per criterion in the summary
# ---------------------------------------------------------------------------

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    names = [v for k, v in report.user_properties if k == "criterion"]
    if not names:
        return
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    _CRITERIA.append((names[0], report.passed, report.duration, detail))


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, duration, detail in _CRITERIA:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({duration:.1f}s)" + (f"  {detail}" if detail else ""))
