import shutil

import pytest

from chunkcnn import cli
from chunkcnn.errors import ConfigError

TINY = [
    "--sad-train-files", "3", "--sad-dev-files", "1", "--sad-eval-files", "2", "--sad-file-seconds", "8",
    "--n-speakers", "3", "--train-seconds-min", "12", "--train-seconds-max", "20",
    "--sid-dev-utterances", "3", "--sid-eval-utterances", "4", "--test-seconds-max", "4",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "-q", "--corpus-dir", str(root / "corpus"), *TINY]) == 0
    return root


def common(root, out="runs"):
    return ["-q", "--corpus-dir", str(root / "corpus"), "--out-dir", str(root / out), "--max-epochs", "1"]


def test_help_lists_every_key(capsys):
    for command in cli.COMMANDS:
        with pytest.raises(SystemExit):
            cli.main([command, "--help"])
        text = capsys.readouterr().out
        for key in cli.KEYS:
            assert f"--{key.name.replace('_', '-')}" in text
            assert f"[{key.name}," in text


def test_precedence_flag_env_file_default(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nworkers = 3\nseed = 11\nbatch_size = 8\n")
    cfg = cli.resolve_config({"seed": "13"}, conf, {"CHUNKCNN_SEED": "12", "CHUNKCNN_BATCH_SIZE": "16"})
    assert cfg["seed"] == 13
    assert cfg["batch_size"] == 16
    assert cfg["workers"] == 3
    assert cfg["n_mels"] is None and cfg["collar_s"] == 0.25


def test_unknown_keys_rejected(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("learning_rat = 0.1\n")
    code, _, err = run(capsys, "score-sad", "--config", str(conf))
    assert code != 0
    assert err.startswith("error: config:") and "'learning_rat'" in err
    assert len(err.strip().splitlines()) == 1
    with pytest.raises(ConfigError, match="'colar_s'"):
        cli.resolve_config({}, None, {"CHUNKCNN_COLAR_S": "1"})


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError, match="workers"):
        cli.resolve_config({"workers": "two"}, None, {})
    with pytest.raises(ConfigError):
        cli.feature_config("sad", cli.resolve_config({"chunk_len_ms": "325"}, None, {}))
    with pytest.raises(ConfigError):
        cli.train_config("sad", cli.resolve_config({"learning_rate": "0"}, None, {}))


def test_task_defaults():
    cfg = cli.resolve_config({}, None, {})
    assert cli.feature_config("sad", cfg).frame_len_ms == 50.0
    assert cli.feature_config("sid", cfg).chunk_frames == 128
    assert cli.train_config("sid", cfg).class_weights == "inverse"
    assert cli.train_config("sad", cfg).class_weights is None
    assert cli.train_config("sad", cli.resolve_config({"class_weights": "1,2"}, None, {})).class_weights == [1.0, 2.0]


def test_perfect_sad_system_scores_zero(corpus, capsys):
    ref = corpus / "corpus" / "sad_eval.tsv"
    code, out, _ = run(capsys, "score-sad", *common(corpus, "perfect"), "--sys", str(ref))
    assert code == 0
    assert out.splitlines()[0] == "DCF 0.0000"
    assert (corpus / "perfect" / "sad_eval_report.tsv").exists()
    assert (corpus / "perfect" / "sad_eval_dcf_vs_short_segments.png").stat().st_size > 0


def test_perfect_sid_system(corpus, capsys):
    ref = corpus / "corpus" / "sid_eval.tsv"
    sys_path = corpus / "perfect_sid.tsv"
    sys_path.write_text(ref.read_text())
    code, out, _ = run(capsys, "score-sid", *common(corpus, "perfect"), "--sys", str(sys_path))
    assert code == 0
    assert out.splitlines() == [f"TOP{n} 1.0000" for n in range(1, 6)]
    for name in ("sid_eval_duration_report.tsv", "sid_eval_duration_report.png",
                 "sid_eval_speaker_report.tsv", "sid_eval_speaker_report.png"):
        assert (corpus / "perfect" / name).exists()


def test_sad_round_trip_and_training_determinism(corpus, capsys):
    args = common(corpus, "sad_a")
    assert run(capsys, "train-sad", *args)[0] == 0
    assert run(capsys, "train-sad", *common(corpus, "sad_b"))[0] == 0
    a = (corpus / "sad_a" / "sad.fsnn").read_bytes()
    assert a == (corpus / "sad_b" / "sad.fsnn").read_bytes()
    assert (corpus / "sad_a" / "sad_history.tsv").exists()
    assert run(capsys, "infer-sad", *args)[0] == 0
    code, out, _ = run(capsys, "score-sad", *args)
    assert code == 0
    assert out.startswith("DCF ") and "P_FN " in out and "P_FP " in out
    # re-running inference overwrites its output identically
    first = (corpus / "sad_a" / "sad_eval_sys.tsv").read_bytes()
    run(capsys, "infer-sad", *args, "--workers", "2")
    assert (corpus / "sad_a" / "sad_eval_sys.tsv").read_bytes() == first


def test_sid_round_trip_and_task_mismatch(corpus, capsys):
    args = common(corpus, "sid_a")
    assert run(capsys, "train-sid", *args)[0] == 0
    assert run(capsys, "infer-sid", *args)[0] == 0
    code, out, _ = run(capsys, "score-sid", *args)
    assert code == 0
    acc = [float(line.split()[1]) for line in out.splitlines()]
    assert len(acc) == 5 and acc == sorted(acc)
    shutil.copy(corpus / "sid_a" / "sid.fsnn", corpus / "sid_a" / "sad.fsnn")
    code, _, err = run(capsys, "infer-sad", *args)
    assert code != 0 and err.startswith("error: task:")


def test_missing_input_is_one_line_error(tmp_path, capsys):
    code, _, err = run(capsys, "score-sad", "-q", "--ref", str(tmp_path / "nope.tsv"),
                       "--sys", str(tmp_path / "nope.tsv"))
    assert code != 0
    assert err.startswith("error: io:") and len(err.strip().splitlines()) == 1


def test_corrupt_model_reports_category(tmp_path, corpus, capsys):
    bad = tmp_path / "m.fsnn"
    bad.write_bytes(b"FSNN\x01\x00\x00\x00garbage")
    code, _, err = run(capsys, "infer-sad", *common(corpus), "--model", str(bad))
    assert code != 0 and err.startswith("error: model-")
