"""Command-line front end: ``chunkcnn <subcommand> [--config FILE] [--key value ...]``.

Every setting is a flat key. Values are resolved in this order, later wins:
built-in defaults, the ``--config`` file (``key = value`` lines, ``#``
comments), ``CHUNKCNN_<KEY>`` environment variables, command-line flags.
Every subcommand accepts every key, so one config file can drive the whole
pipeline; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import pipeline, plots, sad, sid
from .audio import SynthSpec, default_train_seconds, read_manifest, read_speaker_labels, synth_corpus
from .dsp import FeatureConfig
from .errors import ChunkCNNError, ConfigError, TaskError
from .nn import TrainConfig, load_model, save_model, write_history
from .segments import read_segments, write_segments

log = logging.getLogger("chunkcnn")

ENV_PREFIX = "CHUNKCNN_"
COMMANDS = ("synth", "train-sad", "infer-sad", "score-sad", "train-sid", "infer-sid", "score-sid")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str):
    return None if text.strip() in ("", "auto") else float(text)


def _opt_int(text: str):
    return None if text.strip() in ("", "auto") else int(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], object]
    default: object
    help: str
    group: str


KEYS = [
    # paths and run control
    Key("corpus_dir", str, "corpus", "corpus root (written by synth, read by the others)", "paths"),
    Key("out_dir", str, "runs", "directory for models, system output and reports", "paths"),
    Key("model", str, "", "model file; default <out_dir>/<task>.fsnn", "paths"),
    Key("feature_cache", str, "", "directory for cached log-mel features; empty disables caching", "paths"),
    Key("role", str, "eval", "corpus partition to infer or score: train, dev or eval", "paths"),
    Key("ref", str, "", "reference labels; default <corpus_dir>/<task>_<role>.tsv", "paths"),
    Key("sys", str, "", "system output; default <out_dir>/<task>_<role>_sys.tsv", "paths"),
    Key("workers", int, 1, "worker processes for per-file work", "paths"),
    Key("seed", int, 7, "seed for corpus synthesis, weight init and shuffling", "paths"),
    Key("plots", _bool, True, "render PNG figures next to the report TSVs", "paths"),
    # corpus synthesis
    Key("tasks", str, "sad,sid", "comma-separated tasks to synthesize", "synth"),
    Key("sad_train_files", int, 60, "SAD training files", "synth"),
    Key("sad_dev_files", int, 10, "SAD development files", "synth"),
    Key("sad_eval_files", int, 10, "SAD evaluation files", "synth"),
    Key("sad_file_seconds", float, 60.0, "length of each SAD file", "synth"),
    Key("short_burst_prob", float, 0.0, "probability that a SAD speech burst lasts only 0.1 s", "synth"),
    Key("n_speakers", int, 8, "SID speakers", "synth"),
    Key("train_seconds_min", float, 60.0, "training audio of the least-represented speaker", "synth"),
    Key("train_seconds_max", float, 500.0, "training audio of the best-represented speaker", "synth"),
    Key("sid_dev_utterances", int, 32, "SID development utterances", "synth"),
    Key("sid_eval_utterances", int, 80, "SID evaluation utterances", "synth"),
    Key("test_seconds_min", float, 1.0, "shortest SID test utterance", "synth"),
    Key("test_seconds_max", float, 20.0, "longest SID test utterance", "synth"),
    Key("snr_db_min", float, 5.0, "lowest per-file SNR", "synth"),
    Key("snr_db_max", float, 20.0, "highest per-file SNR", "synth"),
    # features (empty = task default)
    Key("frame_len_ms", _opt_float, None, "analysis frame length (SAD 50, SID 25)", "features"),
    Key("frame_hop_ms", _opt_float, None, "frame hop (10)", "features"),
    Key("n_mels", _opt_int, None, "mel bands (40)", "features"),
    Key("fmin_hz", _opt_float, None, "lowest filterbank edge (0)", "features"),
    Key("fmax_hz", _opt_float, None, "highest filterbank edge; 0 means Nyquist", "features"),
    Key("chunk_len_ms", _opt_float, None, "chunk length (SAD 320, SID 1280)", "features"),
    Key("chunk_shift_ms", _opt_float, None, "chunk shift (160)", "features"),
    # training (empty = task default)
    Key("learning_rate", float, 1e-3, "Adam step size", "training"),
    Key("adam_beta1", float, 0.9, "Adam first-moment decay", "training"),
    Key("adam_beta2", float, 0.999, "Adam second-moment decay", "training"),
    Key("adam_epsilon", float, 1e-8, "Adam denominator offset", "training"),
    Key("batch_size", int, 64, "chunks per mini-batch", "training"),
    Key("max_epochs", _opt_int, None, "epoch budget (SAD 10, SID 4)", "training"),
    Key("early_stop_patience", int, 5, "epochs without validation improvement before stopping", "training"),
    Key("class_weights", str, "", "none, inverse, or comma-separated weights (SAD none, SID inverse)", "training"),
    Key("val_fraction", float, 1 / 6, "share of SAD training files held out for validation", "training"),
    # inference and scoring
    Key("average_posteriors", _bool, False, "SAD: average the two chunk posteriors covering a region", "inference"),
    Key("min_segment_s", float, 0.0, "SAD: relabel interior segments shorter than this", "inference"),
    Key("vote_posteriors", _bool, True, "SID: break vote count ties by summed posterior", "inference"),
    Key("collar_s", float, sad.COLLAR_S, "SAD scoring collar around reference transitions", "inference"),
]
KEY_BY_NAME = {k.name: k for k in KEYS}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_BY_NAME:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_config(flags: dict[str, str | None], config_path: str | None = None,
                   environ: dict[str, str] | None = None) -> dict[str, object]:
    """Merge defaults, config file, environment and flags into typed values."""
    environ = os.environ if environ is None else environ
    raw: dict[str, str] = {}
    if config_path:
        raw.update(read_config_file(config_path))
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key not in KEY_BY_NAME:
                raise ConfigError(f"unknown config key {key!r} (from environment variable {name})")
            raw[key] = value
    raw.update({k: v for k, v in flags.items() if v is not None})
    values = {k.name: k.default for k in KEYS}
    for key, text in raw.items():
        try:
            values[key] = KEY_BY_NAME[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if values["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if values["role"] not in ("train", "dev", "eval"):
        raise ConfigError(f"role must be train, dev or eval, got {values['role']!r}")
    return values


def feature_config(task: str, cfg: dict) -> FeatureConfig:
    base = FeatureConfig.sad() if task == "sad" else FeatureConfig.sid()
    overrides = {k: cfg[k] for k in ("frame_len_ms", "frame_hop_ms", "n_mels", "fmin_hz", "fmax_hz",
                                     "chunk_len_ms", "chunk_shift_ms") if cfg[k] is not None}
    out = FeatureConfig(**{**base.__dict__, **overrides})
    try:
        out.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def train_config(task: str, cfg: dict) -> TrainConfig:
    overrides = {k: cfg[k] for k in ("learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon",
                                     "batch_size", "early_stop_patience")}
    overrides["seed"] = cfg["seed"]
    if cfg["max_epochs"] is not None:
        overrides["max_epochs"] = cfg["max_epochs"]
    cw = cfg["class_weights"].strip()
    if cw:
        if cw in ("none", "inverse"):
            overrides["class_weights"] = None if cw == "none" else "inverse"
        else:
            try:
                overrides["class_weights"] = [float(x) for x in cw.split(",")]
            except ValueError:
                raise ConfigError(f"bad value for class_weights: {cw!r}") from None
    try:
        return pipeline.default_train_config(task, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synth_spec(cfg: dict) -> SynthSpec:
    tasks = tuple(t.strip() for t in cfg["tasks"].split(",") if t.strip())
    if not tasks or set(tasks) - {"sad", "sid"}:
        raise ConfigError(f"tasks must be a subset of sad,sid, got {cfg['tasks']!r}")
    try:
        return SynthSpec(
            n_speakers=cfg["n_speakers"],
            per_speaker_train_seconds=default_train_seconds(
                cfg["n_speakers"], cfg["train_seconds_min"], cfg["train_seconds_max"]),
            test_duration_range=(cfg["test_seconds_min"], cfg["test_seconds_max"]),
            n_dev_utterances=cfg["sid_dev_utterances"],
            n_eval_utterances=cfg["sid_eval_utterances"],
            snr_db_range=(cfg["snr_db_min"], cfg["snr_db_max"]),
            seed=cfg["seed"],
            tasks=tasks,
            sad_files=(cfg["sad_train_files"], cfg["sad_dev_files"], cfg["sad_eval_files"]),
            sad_file_seconds=cfg["sad_file_seconds"],
            sad_short_burst_prob=cfg["short_burst_prob"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _paths(task: str, cfg: dict) -> dict[str, Path]:
    out = Path(cfg["out_dir"])
    corpus = Path(cfg["corpus_dir"])
    role = cfg["role"]
    return {
        "corpus": corpus,
        "out": out,
        "model": Path(cfg["model"] or out / f"{task}.fsnn"),
        "ref": Path(cfg["ref"] or corpus / f"{task}_{role}.tsv"),
        "sys": Path(cfg["sys"] or out / f"{task}_{role}_sys.tsv"),
        "cache": Path(cfg["feature_cache"]) if cfg["feature_cache"] else None,
    }


def _load_task_model(path: Path, task: str):
    model = load_model(path)
    if model.task != task:
        raise TaskError(f"{path} holds a {model.task.upper()} model; this command needs a {task.upper()} model")
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    spec = synth_spec(cfg)
    entries = synth_corpus(spec, cfg["corpus_dir"], workers=cfg["workers"])
    print(f"wrote {len(entries)} files to {cfg['corpus_dir']}", file=out)
    return 0


def _cmd_train(task: str, cfg: dict, out=None) -> int:
    out = out or sys.stdout
    p = _paths(task, cfg)
    p["out"].mkdir(parents=True, exist_ok=True)
    fcfg, tcfg = feature_config(task, cfg), train_config(task, cfg)
    if task == "sad":
        model, history = pipeline.train_sad(p["corpus"], fcfg, tcfg, cfg["val_fraction"],
                                            cfg["workers"], p["cache"])
    else:
        model, history = pipeline.train_sid(p["corpus"], fcfg, tcfg, cfg["workers"], p["cache"])
    p["model"].parent.mkdir(parents=True, exist_ok=True)
    save_model(model, p["model"])
    hist_path = p["out"] / f"{task}_history.tsv"
    write_history(hist_path, history)
    if cfg["plots"]:
        plots.plot_training_history(history, hist_path.with_suffix(".png"))
    best = min(history, key=lambda r: r.val_loss)
    print(f"model\t{p['model']}", file=out)
    print(f"epochs\t{len(history)}\tbest_epoch\t{best.epoch}\tval_loss\t{best.val_loss:.6f}", file=out)
    return 0


def cmd_train_sad(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    return _cmd_train("sad", cfg, out)


def cmd_train_sid(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    return _cmd_train("sid", cfg, out)


def cmd_infer_sad(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    p = _paths("sad", cfg)
    model = _load_task_model(p["model"], "sad")
    lists = pipeline.infer_sad(model, p["corpus"], cfg["role"], cfg["workers"],
                               cfg["average_posteriors"], cfg["min_segment_s"])
    p["sys"].parent.mkdir(parents=True, exist_ok=True)
    write_segments(p["sys"], lists)
    print(f"segments\t{p['sys']}", file=out)
    return 0


def cmd_infer_sid(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    p = _paths("sid", cfg)
    model = _load_task_model(p["model"], "sid")
    results = pipeline.infer_sid(model, p["corpus"], cfg["role"], cfg["workers"], cfg["vote_posteriors"])
    p["sys"].parent.mkdir(parents=True, exist_ok=True)
    sid.write_system_output(p["sys"], [(utt, h.speakers) for utt, h in results])
    print(f"ranked\t{p['sys']}", file=out)
    return 0


def cmd_score_sad(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    p = _paths("sad", cfg)
    refs, syss = read_segments(p["ref"]), read_segments(p["sys"])
    rep = sad.score_dcf(refs, syss, cfg["collar_s"])
    p["out"].mkdir(parents=True, exist_ok=True)
    rows = [(fid, f.dcf, f.short_segment_count) for fid, f in rep.per_file.items()]
    report = p["out"] / f"sad_{cfg['role']}_report.tsv"
    sad.write_sad_report(report, rows)
    if cfg["plots"]:
        plots.plot_dcf_vs_short_segments(rows, report.with_name(f"sad_{cfg['role']}_dcf_vs_short_segments.png"))
    print(f"DCF {rep.dcf:.4f}", file=out)
    print(f"P_FN {rep.p_fn:.4f}", file=out)
    print(f"P_FP {rep.p_fp:.4f}", file=out)
    return 0


def cmd_score_sid(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    p = _paths("sid", cfg)
    refs = read_speaker_labels(p["ref"])
    sys_out = sid.read_system_output(p["sys"])
    manifest = read_manifest(p["corpus"] / "manifest.tsv")
    durations = {e.file_id: e.duration_s for e in manifest}
    trials = sid.make_trials(refs, sys_out, durations)
    acc = sid.topn_accuracies(trials)
    role = cfg["role"]
    p["out"].mkdir(parents=True, exist_ok=True)
    dur_rows = sid.duration_binned_report(trials)
    spk_rows = sid.speaker_accuracy_report(trials, pipeline.train_durations(p["corpus"]))
    dur_path = p["out"] / f"sid_{role}_duration_report.tsv"
    spk_path = p["out"] / f"sid_{role}_speaker_report.tsv"
    sid.write_duration_report(dur_path, dur_rows)
    sid.write_speaker_report(spk_path, spk_rows)
    if cfg["plots"]:
        plots.plot_hit_miss_by_duration(dur_rows, dur_path.with_suffix(".png"))
        plots.plot_accuracy_vs_train_duration(spk_rows, spk_path.with_suffix(".png"))
    for n, a in enumerate(acc, 1):
        print(f"TOP{n} {a:.4f}", file=out)
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train-sad": cmd_train_sad,
    "infer-sad": cmd_infer_sad,
    "score-sad": cmd_score_sad,
    "train-sid": cmd_train_sid,
    "infer-sid": cmd_infer_sid,
    "score-sid": cmd_score_sid,
}

DESCRIPTIONS = {
    "synth": "generate the synthetic SAD/SID corpus",
    "train-sad": "train the speech activity network",
    "infer-sad": "write speech/non-speech segments for a corpus role",
    "score-sad": "score SAD output with the collared DCF and write the per-file report",
    "train-sid": "train the speaker identification network",
    "infer-sid": "write ranked top-5 speakers for a corpus role",
    "score-sid": "score SID output (top-1..top-5) and write the duration reports",
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkcnn", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name],
                            epilog=f"Every key may also come from the config file or {ENV_PREFIX}<KEY>.")
        sp.add_argument("--config", metavar="FILE", help="flat 'key = value' config file")
        sp.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
        groups = {}
        for key in KEYS:
            if key.group not in groups:
                groups[key.group] = sp.add_argument_group(f"{key.group} keys")
            default = "" if key.default is None else key.default
            groups[key.group].add_argument(f"--{key.name.replace('_', '-')}", dest=key.name, metavar="V",
                                           default=None, help=f"{key.help} [{key.name}, default {default!r}]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    flags = {k.name: getattr(args, k.name) for k in KEYS}
    try:
        cfg = resolve_config(flags, args.config)
        return HANDLERS[args.command](cfg)
    except ChunkCNNError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: io: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
