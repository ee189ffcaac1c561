"""Corpus-level training and inference for both tasks.

Feature extraction and per-file inference fan out over ``workers`` processes;
results are always collected in manifest order, so the worker count never
changes an output.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sad, sid
from .audio import ManifestEntry, read_manifest, read_speaker_labels, read_wav
from .dsp import (
    ChunkIndex,
    FeatureConfig,
    compute_norm_stats,
    load_features,
    mel_spectrogram,
    normalize,
    save_features,
)
from .errors import EmptyInputError, TaskError
from .nn import CnnModel, TrainConfig, build_architecture, model_from_bytes, model_to_bytes, train
from .segments import SegmentList, read_segments

log = logging.getLogger(__name__)


# Epoch budgets sized so both synthetic tasks train in a few CPU minutes; the
# synthetic SID task saturates after a couple of epochs.
TASK_TRAIN_DEFAULTS = {
    "sad": {"max_epochs": 10},
    "sid": {"max_epochs": 4, "class_weights": "inverse"},
}


def default_train_config(task: str, **overrides) -> TrainConfig:
    if task not in TASK_TRAIN_DEFAULTS:
        raise TaskError(f"unknown task {task!r}")
    return TrainConfig(**{**TASK_TRAIN_DEFAULTS[task], **overrides})


def corpus_entries(corpus_dir: str | Path, task: str, role: str) -> list[ManifestEntry]:
    entries = [e for e in read_manifest(Path(corpus_dir) / "manifest.tsv")
               if e.role == role and e.path.startswith(f"{task}/")]
    if not entries:
        raise EmptyInputError(f"{corpus_dir}: manifest lists no {task} files for role {role!r}")
    return entries


def _map(fn, items, workers, initializer=None, initargs=()):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as ex:
            return list(ex.map(fn, items))
    if initializer is not None:
        initializer(*initargs)
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def _cache_path(cache_dir, file_id, cfg: FeatureConfig, pad_rows: int) -> Path:
    key = hashlib.sha1(repr((cfg.as_tuple(), pad_rows)).encode()).hexdigest()[:10]
    return Path(cache_dir) / f"{file_id}.{key}.fsmel"


def _features_one(job):
    path, cfg, pad_rows, cache_file = job
    if cache_file is not None and Path(cache_file).exists():
        return load_features(cache_file, cfg.frame_len_ms).values
    audio = read_wav(path)
    spec = sid.sid_spectrogram(audio, cfg) if pad_rows else mel_spectrogram(audio, cfg)
    if cache_file is None:
        return spec.values
    save_features(cache_file, spec)
    # cached runs and fresh runs must see the same float32-rounded values
    return spec.values.astype(np.float32).astype(np.float64)


def extract_features(corpus_dir, entries: Sequence[ManifestEntry], cfg: FeatureConfig, pad: bool = False,
                     workers: int = 1, cache_dir=None) -> list[np.ndarray]:
    """Raw log-mel matrices, one per manifest entry (wrap-padded to a chunk when ``pad``)."""
    pad_rows = cfg.chunk_frames if pad else 0
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(Path(corpus_dir) / e.path, cfg, pad_rows,
             _cache_path(cache_dir, e.file_id, cfg, pad_rows) if cache_dir else None) for e in entries]
    return _map(_features_one, jobs, workers)


# ---------------------------------------------------------------------------
# SAD
# ---------------------------------------------------------------------------

def train_sad(corpus_dir, feature_cfg: FeatureConfig | None = None, train_cfg: TrainConfig | None = None,
              val_fraction: float = 1 / 6, workers: int = 1, cache_dir=None, progress=None):
    """Train the SAD network on the corpus ``train`` role.

    The last ``val_fraction`` of the training files are held out for early
    stopping. Returns ``(model, history)``.
    """
    feature_cfg = feature_cfg or FeatureConfig.sad()
    train_cfg = train_cfg or default_train_config("sad")
    entries = corpus_entries(corpus_dir, "sad", "train")
    refs = read_segments(Path(corpus_dir) / "sad_train.tsv")
    n_val = min(max(1, int(round(len(entries) * val_fraction))), len(entries) - 1)
    if n_val < 1:
        raise EmptyInputError("SAD training needs at least two files (one held out for validation)")
    feats = extract_features(corpus_dir, entries, feature_cfg, workers=workers, cache_dir=cache_dir)
    tr_entries, va_entries = entries[:-n_val], entries[-n_val:]
    tr_feats, va_feats = feats[:-n_val], feats[-n_val:]
    stats = compute_norm_stats(tr_feats)

    def index(ents, fs):
        specs = {e.file_id: normalize(v, stats) for e, v in zip(ents, fs)}
        starts, labels = sad.training_chunks(refs, specs, feature_cfg.chunk_frames,
                                             feature_cfg.shift_frames, feature_cfg.shift_s)
        return ChunkIndex(list(specs.values()), starts, feature_cfg.chunk_frames), labels

    x_tr, y_tr = index(tr_entries, tr_feats)
    x_va, y_va = index(va_entries, va_feats)
    log.info("SAD: %d training chunks, %d validation chunks", len(y_tr), len(y_va))
    model = build_architecture("sad", (feature_cfg.chunk_frames, feature_cfg.n_mels),
                               class_labels=sad.SAD_CLASSES, seed=train_cfg.seed, feature_config=feature_cfg)
    model.norm_stats = stats
    return train(model, x_tr, y_tr, x_va, y_va, train_cfg, progress)


_WORKER_MODEL: CnnModel | None = None


def _set_worker_model(blob: bytes) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model_from_bytes(blob)


def _sad_infer_one(job):
    path, average_posteriors, min_segment_s = job
    return sad.infer_segments(_WORKER_MODEL, read_wav(path), average_posteriors, min_segment_s)


def infer_sad(model: CnnModel, corpus_dir, role: str = "eval", workers: int = 1,
              average_posteriors: bool = False, min_segment_s: float = 0.0) -> list[SegmentList]:
    if model.task != "sad":
        raise TaskError(f"model was trained for {model.task!r}, not 'sad'")
    entries = corpus_entries(corpus_dir, "sad", role)
    jobs = [(Path(corpus_dir) / e.path, average_posteriors, min_segment_s) for e in entries]
    return _map(_sad_infer_one, jobs, workers, _set_worker_model, (model_to_bytes(model),))


# ---------------------------------------------------------------------------
# SID
# ---------------------------------------------------------------------------

def train_sid(corpus_dir, feature_cfg: FeatureConfig | None = None, train_cfg: TrainConfig | None = None,
              workers: int = 1, cache_dir=None, progress=None):
    """Train the SID network on ``train`` utterances, validating on ``dev``."""
    feature_cfg = feature_cfg or FeatureConfig.sid()
    train_cfg = train_cfg or default_train_config("sid")
    corpus_dir = Path(corpus_dir)
    tr_entries = corpus_entries(corpus_dir, "sid", "train")
    va_entries = corpus_entries(corpus_dir, "sid", "dev")
    tr_spk = read_speaker_labels(corpus_dir / "sid_train.tsv")
    va_spk = read_speaker_labels(corpus_dir / "sid_dev.tsv")
    speakers = sorted(set(tr_spk[e.file_id] for e in tr_entries))
    class_of = {s: i for i, s in enumerate(speakers)}
    unknown = sorted({va_spk[e.file_id] for e in va_entries} - set(speakers))
    if unknown:
        raise TaskError(f"validation speakers absent from training: {', '.join(unknown)}")

    tr_feats = extract_features(corpus_dir, tr_entries, feature_cfg, pad=True, workers=workers, cache_dir=cache_dir)
    va_feats = extract_features(corpus_dir, va_entries, feature_cfg, pad=True, workers=workers, cache_dir=cache_dir)
    stats = compute_norm_stats(tr_feats)

    def index(ents, fs, spk):
        specs = [normalize(v, stats) for v in fs]
        starts = sid.training_chunks(specs, feature_cfg.chunk_frames, feature_cfg.shift_frames)
        labels = np.array([class_of[spk[ents[s].file_id]] for s, _ in starts], dtype=np.int64)
        return ChunkIndex(specs, starts, feature_cfg.chunk_frames), labels

    x_tr, y_tr = index(tr_entries, tr_feats, tr_spk)
    x_va, y_va = index(va_entries, va_feats, va_spk)
    log.info("SID: %d speakers, %d training chunks, %d validation chunks", len(speakers), len(y_tr), len(y_va))
    model = build_architecture("sid", (feature_cfg.chunk_frames, feature_cfg.n_mels),
                               class_labels=speakers, seed=train_cfg.seed, feature_config=feature_cfg)
    model.norm_stats = stats
    return train(model, x_tr, y_tr, x_va, y_va, train_cfg, progress)


def _sid_infer_one(job):
    path, use_posteriors = job
    return sid.identify(_WORKER_MODEL, read_wav(path), use_posteriors)


def infer_sid(model: CnnModel, corpus_dir, role: str = "eval", workers: int = 1,
              use_posteriors: bool = True) -> list[tuple[str, sid.RankedHypothesis]]:
    if model.task != "sid":
        raise TaskError(f"model was trained for {model.task!r}, not 'sid'")
    entries = corpus_entries(corpus_dir, "sid", role)
    jobs = [(Path(corpus_dir) / e.path, use_posteriors) for e in entries]
    hyps = _map(_sid_infer_one, jobs, workers, _set_worker_model, (model_to_bytes(model),))
    return [(e.file_id, h) for e, h in zip(entries, hyps)]


def train_durations(corpus_dir) -> dict[str, float]:
    """Seconds of training audio per speaker, from the manifest."""
    corpus_dir = Path(corpus_dir)
    spk = read_speaker_labels(corpus_dir / "sid_train.tsv")
    out: dict[str, float] = {}
    for e in read_manifest(corpus_dir / "manifest.tsv"):
        if e.file_id in spk:
            out[spk[e.file_id]] = out.get(spk[e.file_id], 0.0) + e.duration_s
    # durations are whole milliseconds; undo the summation noise
    return {s: round(v, 3) for s, v in out.items()}
