import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganaug import cli
from ganaug import data as D
from ganaug import trainer as TR

SMALL = ["--phantom", "--final-res", "16", "--iters", "12", "--latent-dim", "8", "--batch", "4",
         "--phantom-count", "16", "--channel-cap", "4", "--precision", "64", "--checkpoint-every", "6"]


def train(tmp_path, *extra):
    return cli.main(["train", *SMALL, "--out-dir", str(tmp_path), *extra])


# precedence -----------------------------------------------------------------------------

# field -> (flag, two distinct legal values)
CANDIDATES = {
    "latent_dim": ("--latent-dim", [16, 24]),
    "final_resolution": ("--final-res", [8, 64]),
    "total_iterations": ("--iters", [100, 300]),
    "batch_size": ("--batch", [8, 16]),
    "learning_rate": ("--lr", [0.01, 0.0005]),
    "lambda1": ("--lambda1", [1.0, 2.5]),
    "lambda2": ("--lambda2", [3.0, 0.5]),
    "lambda_gp": ("--lambda-gp", [5.0, 7.0]),
    "lambda_ssim": ("--lambda-ssim", [0.25, 4.0]),
    "seed": ("--seed", [3, 11]),
    "model": ("--model", ["pggan-ssim", "alpha-gan-gp"]),
    "channel_cap": ("--channel-cap", [4, 16]),
    "precision": ("--precision", [64, 32]),
    "checkpoint_every": ("--checkpoint-every", [5, 9]),
    "data_dir": ("--data-dir", ["a", "b"]),
    "out_dir": ("--out-dir", ["x", "y"]),
    "ssim_mode": ("--ssim-mode", ["reconstruction", "pairwise"]),
}


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(CANDIDATES)), st.booleans(), st.booleans())
def test_precedence_per_field(tmp_path_factory, field, in_file, on_cli):
    flag, (file_value, cli_value) = CANDIDATES[field]
    default = getattr(TR.RunConfig(), field)
    argv = ["train"]
    if in_file:
        path = tmp_path_factory.mktemp("cfg") / "run.cfg"
        path.write_text(f"# generated\n{field} = {file_value}\n", encoding="utf-8")
        argv += ["--config", str(path)]
    if on_cli:
        argv += [flag, str(cli_value)]
    config = cli.resolve_config(cli.build_parser().parse_args(argv))
    expected = cli_value if on_cli else file_value if in_file else default
    assert getattr(config, field) == expected
    # all other fields keep their defaults
    for f in dataclasses.fields(TR.RunConfig):
        if f.name != field:
            assert getattr(config, f.name) == getattr(TR.RunConfig(), f.name)


def test_config_file_grammar():
    got = cli.parse_config_text("final-res = 16   # flag spelling\niters=40\n\nphantom = yes\nchannel_cap = none\n")
    assert got == {"final_resolution": 16, "total_iterations": 40, "phantom": True, "channel_cap": None}
    with pytest.raises(TR.ConfigError, match="colour"):
        cli.parse_config_text("colour = 3")
    with pytest.raises(TR.ConfigError, match="line 2"):
        cli.parse_config_text("seed = 1\nseed 2")
    with pytest.raises(TR.ConfigError, match="^seed"):
        cli.parse_config_text("seed = one")


def test_phantom_flag_from_file_kept_when_flag_absent(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("phantom = true\n")
    config = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", str(cfg)]))
    assert config.phantom is True


# exit codes -------------------------------------------------------------------------------


def test_missing_data_dir_is_config_error(tmp_path, capsys):
    code = cli.main(["train", "--final-res", "8", "--iters", "10", "--out-dir", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "data_dir" in capsys.readouterr().err


def test_bad_field_message_names_field(tmp_path, capsys):
    assert train(tmp_path, "--lr", "-1") == cli.EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_data_error_exit(tmp_path):
    missing = tmp_path / "nowhere"
    assert cli.main(["train", "--final-res", "8", "--iters", "10", "--data-dir", str(missing),
                     "--out-dir", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_numerical_abort_exit(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TR.T.NonFiniteError("loss is nan")

    monkeypatch.setattr(TR.TrainingRun, "step", boom)
    assert train(tmp_path) == cli.EXIT_NAN


def test_io_error_exit(tmp_path):
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "none.pglb"), "--out-dir", str(tmp_path)]) == cli.EXIT_IO
    bad = tmp_path / "bad.pglb"
    bad.write_bytes(b"PGLB" + b"\0" * 60)
    assert cli.main(["generate", "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == cli.EXIT_IO
    assert cli.main(["train", *SMALL, "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_IO


# commands ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", *SMALL, "--out-dir", str(out)]) == 0
    return out


def test_train_layout(trained):
    ckpts = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert ckpts == ["ckpt_000006.pglb", "ckpt_000012.pglb"]
    samples = sorted((trained / "samples").glob("*.pgm"))
    assert len(samples) == 2
    values, maxval = D.read_pgm(samples[-1])
    # 8x8 mosaic of 16x16 samples
    assert values.shape == (8 * 16, 8 * 16)
    assert len((trained / "logs" / "train.jsonl").read_text().splitlines()) == 12


def test_train_resume_matches(trained, tmp_path):
    assert cli.main(["train", "--resume", str(trained / "checkpoints" / "ckpt_000006.pglb"), "--out-dir", str(tmp_path)]) == 0
    a = (tmp_path / "checkpoints" / "ckpt_000012.pglb").read_bytes()
    assert a == (trained / "checkpoints" / "ckpt_000012.pglb").read_bytes()


def test_generate_writes_count(trained, tmp_path):
    ck = str(trained / "checkpoints" / "ckpt_000012.pglb")
    assert cli.main(["generate", "--checkpoint", ck, "--count", "64", "--seed", "1", "--out-dir", str(tmp_path / "a")]) == 0
    files = sorted((tmp_path / "a").glob("*.pgm"))
    assert len(files) == 64 and files[0].name == "00000.pgm"
    values, maxval = D.read_pgm(files[3])
    img = D.pgm_values_to_image(values, maxval)
    assert img.shape == (16, 16) and img.min() >= -1 and img.max() <= 1
    cli.main(["generate", "--checkpoint", ck, "--count", "64", "--seed", "1", "--out-dir", str(tmp_path / "b")])
    assert all(f.read_bytes() == (tmp_path / "b" / f.name).read_bytes() for f in files)
    assert cli.main(["generate", "--checkpoint", ck, "--count", "-1", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG


def test_evaluate_small_counts(trained, tmp_path, capsys):
    ck = str(trained / "checkpoints" / "ckpt_000012.pglb")
    code = cli.main(["evaluate", "--checkpoint", ck, "--phantom", "--phantom-count", "64", "--fid-samples", "64",
                     "--msssim-pairs", "20", "--provider", "random-conv", "--seed", "5", "--out-dir", str(tmp_path)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pair_count_fid"] == 64 and report["pair_count_msssim"] == 20
    assert report["seed"] == 5 and report["provider_id"].startswith("random-conv")
    assert np.isfinite(report["fid"]) and 0 <= report["ms_ssim"] <= 1
    assert (tmp_path / "reports" / "report_ckpt_000012.json").exists()


def test_evaluate_errors(trained, tmp_path):
    ck = str(trained / "checkpoints" / "ckpt_000012.pglb")
    assert cli.main(["evaluate", "--checkpoint", ck, "--provider", "external-file", "--phantom"]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", "--checkpoint", ck, "--provider", "inception", "--phantom"]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", "--checkpoint", ck]) == cli.EXIT_CONFIG


def test_evaluate_below_window_is_data_error(tmp_path):
    assert cli.main(["train", *SMALL[:1], "--final-res", "8", *SMALL[3:], "--out-dir", str(tmp_path)]) == 0
    ck = str(tmp_path / "checkpoints" / "ckpt_000012.pglb")
    assert cli.main(["evaluate", "--checkpoint", ck, "--phantom", "--fid-samples", "16", "--msssim-pairs", "4",
                     "--provider", "random-conv"]) == cli.EXIT_DATA


def test_phantom_command(tmp_path):
    assert cli.main(["phantom", "--count", "259", "--final-res", "8", "--out-dir", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 259
    assert len(D.read_manifest(tmp_path / D.MANIFEST_NAME)) == 259
    recs = D.load_records(tmp_path)
    assert recs[0].pixels.shape == (1, 8, 8)


def test_convert_command_pads(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(0)
    vol = rng.integers(0, 4000, size=(240, 240)).astype(np.uint16)
    D.write_pgm(src / "case01_064.pgm", vol)
    out = tmp_path / "out"
    assert cli.main(["convert", "--data-dir", str(src), "--out-dir", str(out), "--pad", "256"]) == 0
    recs = D.load_records(out)
    assert len(recs) == 1 and recs[0].pixels.shape == (1, 256, 256)
    assert recs[0].pixels.min() == -1.0 and recs[0].pixels.max() == 1.0


def test_convert_missing_dir(tmp_path):
    assert cli.main(["convert", "--data-dir", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")]) in (cli.EXIT_DATA, cli.EXIT_IO)


def test_train_from_data_dir(tmp_path):
    D.save_records(D.phantom_generate(D.PhantomParams(resolution=16, seed=2), 12), tmp_path / "d")
    code = cli.main(["train", "--data-dir", str(tmp_path / "d"), "--final-res", "8", "--iters", "8", "--latent-dim", "8",
                     "--batch", "4", "--channel-cap", "4", "--out-dir", str(tmp_path / "o")])
    assert code == 0
    assert (tmp_path / "o" / "checkpoints" / "ckpt_000008.pglb").exists()


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "ganaug", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "train" in r.stdout
